use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to a probability before taking its logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Numerically stable softmax of one logit row, written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Row-wise softmax over the last axis of an `n × C` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::invalid(format!(
            "softmax needs an n × C tensor with C ≥ 2, got {shape:?}"
        )));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let c = shape[1];
    let mut out = Tensor::zeros(shape);
    for (z, p) in logits
        .data()
        .chunks_exact(c)
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        softmax_into(z, p);
    }
    Ok(out)
}

/// `-ln p[label]` with `p[label]` clamped below at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::invalid(format!(
            "label {label} out of range for {} classes",
            probs.len()
        ))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}
