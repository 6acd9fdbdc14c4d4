//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Layer, Mode};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor in the relative-error formula.
const REL_FLOOR: f64 = 1e-8;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn parameters(&self) -> Vec<f64>;
    fn set_parameters(&mut self, values: &[f64]) -> Result<()>;
    fn value(&mut self) -> Result<f64>;
    fn gradient(&mut self) -> Result<Vec<f64>>;

    /// Whether repeated evaluation at the same point gives the same value.
    fn is_deterministic(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Coordinates {
    All,
    /// `count` distinct coordinates drawn with a seeded RNG.
    Sample { count: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the objective's analytic gradient with central differences of
/// step `epsilon` and returns the worst relative error seen.
pub fn grad_check(
    objective: &mut dyn Objective,
    epsilon: f64,
    coords: Coordinates,
) -> Result<GradCheckReport> {
    if !objective.is_deterministic() {
        return Err(Error::NonDeterministic(
            "central differences need a deterministic objective (disable train-mode dropout)"
                .into(),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let base = objective.parameters();
    objective.set_parameters(&base)?;
    let analytic = objective.gradient()?;
    if analytic.len() != base.len() {
        return Err(Error::invalid("gradient length differs from parameter count"));
    }
    let indices: Vec<usize> = match coords {
        Coordinates::All => (0..base.len()).collect(),
        Coordinates::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, base.len(), count.min(base.len())).into_vec();
            idx.sort_unstable();
            idx
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: indices.len(),
    };
    let mut probe = base.clone();
    for &i in &indices {
        probe[i] = base[i] + epsilon;
        objective.set_parameters(&probe)?;
        let plus = objective.value()?;
        probe[i] = base[i] - epsilon;
        objective.set_parameters(&probe)?;
        let minus = objective.value()?;
        probe[i] = base[i];
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(analytic[i], numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradient check at coordinate {i}")));
        }
        if err >= report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic: analytic[i],
                numeric,
                checked: indices.len(),
            };
        }
    }
    objective.set_parameters(&base)?;
    Ok(report)
}

/// Objective built from two closures, for plain scalar functions.
pub struct FnObjective<F, G> {
    pub x: Vec<f64>,
    pub f: F,
    pub grad: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    fn parameters(&self) -> Vec<f64> {
        self.x.clone()
    }

    fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        self.x.copy_from_slice(values);
        Ok(())
    }

    fn value(&mut self) -> Result<f64> {
        Ok((self.f)(&self.x))
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        Ok((self.grad)(&self.x))
    }
}

/// Checks a single layer through the scalar probe `Σ w ⊙ layer(x)` with
/// fixed random weights `w`. Parameters are the input followed by the
/// layer's own parameters.
pub struct LayerProbe {
    pub layer: Layer,
    pub input: Tensor,
    pub mode: Mode,
    weights: Option<Tensor>,
}

impl LayerProbe {
    pub fn new(layer: Layer, input: Tensor, mode: Mode, seed: u64) -> Result<Self> {
        let mut probe = LayerProbe {
            layer,
            input,
            mode,
            weights: None,
        };
        let out = probe.layer.forward(&probe.input, mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        probe.weights = Some(Tensor::from_fn(out.shape(), |_| rng.gen_range(-1.0..1.0)));
        Ok(probe)
    }
}

fn is_stochastic(layer: &Layer, mode: Mode) -> bool {
    matches!(layer, Layer::Dropout(d) if mode == Mode::Train && d.p() > 0.0)
}

impl Objective for LayerProbe {
    fn parameters(&self) -> Vec<f64> {
        let mut v = self.input.data().to_vec();
        for p in self.layer.params() {
            v.extend_from_slice(p.data());
        }
        v
    }

    fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        let n = self.input.len();
        self.input.data_mut().copy_from_slice(&values[..n]);
        let mut off = n;
        for p in self.layer.params_mut() {
            let k = p.len();
            p.data_mut().copy_from_slice(&values[off..off + k]);
            off += k;
        }
        Ok(())
    }

    fn value(&mut self) -> Result<f64> {
        let out = self.layer.forward(&self.input, self.mode)?;
        let w = self.weights.as_ref().expect("weights set in constructor");
        Ok(out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        for p in self.layer.params_mut() {
            p.zero_grad();
        }
        self.layer.forward(&self.input, self.mode)?;
        let w = self.weights.clone().expect("weights set in constructor");
        let dx = self.layer.backward(&w)?;
        let mut g = dx.into_data();
        for p in self.layer.params() {
            g.extend_from_slice(p.grad().expect("parameters carry gradients"));
        }
        Ok(g)
    }

    fn is_deterministic(&self) -> bool {
        !is_stochastic(&self.layer, self.mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::LayerKind;

    #[test]
    fn constant_function_has_zero_error() {
        let mut obj = FnObjective {
            x: vec![1.0, -2.0, 3.0],
            f: |_: &[f64]| 4.2,
            grad: |x: &[f64]| vec![0.0; x.len()],
        };
        let r = grad_check(&mut obj, 1e-5, Coordinates::All).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.numeric, 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut obj = FnObjective {
            x: vec![0.5, 1.5],
            f: |x: &[f64]| x[0] * x[0] + x[1].sin(),
            grad: |x: &[f64]| vec![2.0 * x[0], x[1].cos() * 1.01],
        };
        let r = grad_check(&mut obj, 1e-5, Coordinates::All).unwrap();
        assert!(r.max_rel_error > 1e-3);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn train_mode_dropout_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Layer::new(LayerKind::Dropout { p: 0.2 }, &mut rng).unwrap();
        let mut probe =
            LayerProbe::new(layer, Tensor::zeros(&[2, 3]), Mode::Train, 1).unwrap();
        assert!(matches!(
            grad_check(&mut probe, 1e-5, Coordinates::All),
            Err(Error::NonDeterministic(_))
        ));
    }

    #[test]
    fn sampled_coordinates_are_bounded() {
        let mut obj = FnObjective {
            x: vec![0.1; 50],
            f: |x: &[f64]| x.iter().map(|v| v * v).sum(),
            grad: |x: &[f64]| x.iter().map(|v| 2.0 * v).collect(),
        };
        let r = grad_check(&mut obj, 1e-5, Coordinates::Sample { count: 7, seed: 3 }).unwrap();
        assert_eq!(r.checked, 7);
        assert!(r.max_rel_error < 1e-8);
    }
}
