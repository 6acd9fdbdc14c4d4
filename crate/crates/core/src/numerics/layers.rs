use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::{gemm, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance floor added inside the batch-norm square root.
pub const BATCH_NORM_EPS: f64 = 1e-6;
/// Weight of the newest batch statistics in the running averages.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

thread_local! {
    static BACKWARD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: when enabled, dense layers on this thread report a corrupted
/// weight gradient so that gradient checking can be shown to catch it.
#[doc(hidden)]
pub fn inject_backward_fault(enabled: bool) {
    BACKWARD_FAULT.with(|f| f.set(enabled));
}

fn backward_fault() -> bool {
    BACKWARD_FAULT.with(|f| f.get())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv3x3 { in_channels: usize, out_channels: usize },
    BatchNorm { features: usize },
    Relu,
    MaxPool2x2,
    GlobalAvgPool,
    Dropout { p: f64 },
    Softmax,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerKind::Dense { inputs, outputs } => write!(f, "Dense({inputs}→{outputs})"),
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            } => write!(f, "Conv3x3({in_channels}→{out_channels})"),
            LayerKind::BatchNorm { features } => write!(f, "BatchNorm({features})"),
            LayerKind::Relu => f.write_str("ReLU"),
            LayerKind::MaxPool2x2 => f.write_str("MaxPool2x2"),
            LayerKind::GlobalAvgPool => f.write_str("GlobalAvgPool"),
            LayerKind::Dropout { p } => write!(f, "Dropout({p})"),
            LayerKind::Softmax => f.write_str("Softmax"),
        }
    }
}

/// A layer instance: parameters plus whatever the forward pass cached for
/// the backward pass.
#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv3x3(Conv3x3),
    BatchNorm(BatchNorm),
    Relu(Relu),
    MaxPool2x2(MaxPool2x2),
    GlobalAvgPool(GlobalAvgPool),
    Dropout(Dropout),
    Softmax(Softmax),
}

impl Layer {
    /// Builds a layer with fan-in scaled uniform weights and zero biases.
    pub fn new<R: Rng>(kind: LayerKind, rng: &mut R) -> Result<Self> {
        Ok(match kind {
            LayerKind::Dense { inputs, outputs } => Layer::Dense(Dense::new(inputs, outputs, rng)?),
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            } => Layer::Conv3x3(Conv3x3::new(in_channels, out_channels, rng)?),
            LayerKind::BatchNorm { features } => Layer::BatchNorm(BatchNorm::new(features)?),
            LayerKind::Relu => Layer::Relu(Relu::default()),
            LayerKind::MaxPool2x2 => Layer::MaxPool2x2(MaxPool2x2::default()),
            LayerKind::GlobalAvgPool => Layer::GlobalAvgPool(GlobalAvgPool::default()),
            LayerKind::Dropout { p } => Layer::Dropout(Dropout::new(p, rng.gen())?),
            LayerKind::Softmax => Layer::Softmax(Softmax::default()),
        })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(l) => LayerKind::Dense {
                inputs: l.inputs,
                outputs: l.outputs,
            },
            Layer::Conv3x3(l) => LayerKind::Conv3x3 {
                in_channels: l.in_channels,
                out_channels: l.out_channels,
            },
            Layer::BatchNorm(l) => LayerKind::BatchNorm {
                features: l.features,
            },
            Layer::Relu(_) => LayerKind::Relu,
            Layer::MaxPool2x2(_) => LayerKind::MaxPool2x2,
            Layer::GlobalAvgPool(_) => LayerKind::GlobalAvgPool,
            Layer::Dropout(l) => LayerKind::Dropout { p: l.p },
            Layer::Softmax(_) => LayerKind::Softmax,
        }
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.forward(input),
            Layer::Conv3x3(l) => l.forward(input),
            Layer::BatchNorm(l) => l.forward(input, mode),
            Layer::Relu(l) => Ok(l.forward(input)),
            Layer::MaxPool2x2(l) => l.forward(input),
            Layer::GlobalAvgPool(l) => l.forward(input),
            Layer::Dropout(l) => Ok(l.forward(input, mode)),
            Layer::Softmax(l) => l.forward(input),
        }
    }

    /// Gradient with respect to the layer input; parameter gradients are
    /// accumulated into the layer's parameter tensors.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.backward(upstream),
            Layer::Conv3x3(l) => l.backward(upstream),
            Layer::BatchNorm(l) => l.backward(upstream),
            Layer::Relu(l) => l.backward(upstream),
            Layer::MaxPool2x2(l) => l.backward(upstream),
            Layer::GlobalAvgPool(l) => l.backward(upstream),
            Layer::Dropout(l) => l.backward(upstream),
            Layer::Softmax(l) => l.backward(upstream),
        }
    }

    /// Trainable parameters in declaration order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::Conv3x3(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv3x3(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state that still belongs in a checkpoint.
    pub fn buffers(&self) -> Vec<&Tensor> {
        match self {
            Layer::BatchNorm(l) => vec![&l.running_mean, &l.running_var],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::BatchNorm(l) => vec![&mut l.running_mean, &mut l.running_var],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let kind = self.kind();
        let bad = || Error::shape(format!("{kind}"), &expected_sample_shape(kind, input), input);
        match kind {
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(bad());
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            } => match input {
                [c, h, w] if *c == in_channels => Ok(vec![out_channels, *h, *w]),
                _ => Err(bad()),
            },
            LayerKind::BatchNorm { features } => match input {
                [f, ..] if *f == features && input.len() != 2 => Ok(input.to_vec()),
                _ => Err(bad()),
            },
            LayerKind::MaxPool2x2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(bad()),
            },
            LayerKind::GlobalAvgPool => match input {
                [c, _, _] => Ok(vec![*c]),
                _ => Err(bad()),
            },
            LayerKind::Relu | LayerKind::Dropout { .. } | LayerKind::Softmax => Ok(input.to_vec()),
        }
    }

    /// Multiply-accumulate count of one forward pass on a single sample.
    pub fn macs(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        Ok(match self.kind() {
            LayerKind::Dense { inputs, outputs } => (inputs * outputs) as u64,
            LayerKind::Conv3x3 { in_channels, .. } => {
                (out.iter().product::<usize>() * in_channels * 9) as u64
            }
            LayerKind::BatchNorm { .. } => out.iter().product::<usize>() as u64,
            _ => 0,
        })
    }
}

fn expected_sample_shape(kind: LayerKind, actual: &[usize]) -> Vec<usize> {
    match kind {
        LayerKind::Dense { inputs, .. } => vec![inputs],
        LayerKind::Conv3x3 { in_channels, .. } => {
            let mut s = vec![in_channels];
            s.extend(actual.iter().skip(1).take(2));
            s
        }
        LayerKind::BatchNorm { features } => {
            let mut s = vec![features];
            s.extend(actual.iter().skip(1));
            s
        }
        _ => actual.to_vec(),
    }
}

fn fan_in_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::parameter(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.gen_range(-bound..bound));
    t
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::invalid(format!("{name} must be positive")));
    }
    Ok(())
}

// ── Dense ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    /// `outputs × inputs`
    pub weight: Tensor,
    pub bias: Tensor,
    cache: Option<Tensor>,
}

impl Dense {
    fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        positive("Dense inputs", inputs)?;
        positive("Dense outputs", outputs)?;
        Ok(Dense {
            inputs,
            outputs,
            weight: fan_in_uniform(&[outputs, inputs], inputs, rng),
            bias: Tensor::parameter(&[outputs]),
            cache: None,
        })
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let n = input.rows();
        if input.shape() != [n, self.inputs] {
            return Err(Error::shape(
                format!("Dense({}→{}) forward", self.inputs, self.outputs),
                &[n, self.inputs],
                input.shape(),
            ));
        }
        let mut out = Tensor::zeros(&[n, self.outputs]);
        for row in out.data_mut().chunks_exact_mut(self.outputs) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(
            n,
            self.inputs,
            self.outputs,
            1.0,
            MatRef::row_major(input.data(), self.inputs),
            MatRef::transposed(self.weight.data(), self.inputs),
            1.0,
            out.data_mut(),
        );
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let input = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("Dense"))?;
        let n = input.rows();
        upstream.expect_shape("Dense backward", &[n, self.outputs])?;
        let g = upstream.data();

        let scale = if backward_fault() { 1.5 } else { 1.0 };
        gemm(
            self.outputs,
            n,
            self.inputs,
            scale,
            MatRef::transposed(g, self.outputs),
            MatRef::row_major(input.data(), self.inputs),
            1.0,
            self.weight.ensure_grad(),
        );
        let db = self.bias.ensure_grad();
        for row in g.chunks_exact(self.outputs) {
            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
        }

        let mut dx = Tensor::zeros(&[n, self.inputs]);
        gemm(
            n,
            self.outputs,
            self.inputs,
            1.0,
            MatRef::row_major(g, self.outputs),
            MatRef::row_major(self.weight.data(), self.inputs),
            0.0,
            dx.data_mut(),
        );
        Ok(dx)
    }
}

// ── Conv3x3 ───────────────────────────────────────────────────────────

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    in_channels: usize,
    out_channels: usize,
    /// `out × in × 3 × 3`
    pub weight: Tensor,
    pub bias: Tensor,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Vec<f64>,
    n: usize,
    h: usize,
    w: usize,
}

fn im2col(input: &[f64], channels: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], channels: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

impl Conv3x3 {
    fn new<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Result<Self> {
        positive("Conv3x3 in_channels", in_channels)?;
        positive("Conv3x3 out_channels", out_channels)?;
        Ok(Conv3x3 {
            in_channels,
            out_channels,
            weight: fan_in_uniform(&[out_channels, in_channels, 3, 3], in_channels * 9, rng),
            bias: Tensor::parameter(&[out_channels]),
            cache: None,
        })
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (n, h, w) = match input.shape() {
            &[n, c, h, w] if c == self.in_channels => (n, h, w),
            other => {
                let mut expected = vec![other[0], self.in_channels];
                expected.extend(other.iter().skip(2).take(2));
                return Err(Error::shape(
                    format!("Conv3x3({}→{}) forward", self.in_channels, self.out_channels),
                    &expected,
                    other,
                ));
            }
        };
        let hw = h * w;
        let k = self.in_channels * 9;
        let mut cols = vec![0.0; n * k * hw];
        let mut out = Tensor::zeros(&[n, self.out_channels, h, w]);
        let in_len = self.in_channels * hw;
        let out_len = self.out_channels * hw;
        for s in 0..n {
            let col = &mut cols[s * k * hw..(s + 1) * k * hw];
            im2col(&input.data()[s * in_len..(s + 1) * in_len], self.in_channels, h, w, col);
            let dst = &mut out.data_mut()[s * out_len..(s + 1) * out_len];
            for (co, plane) in dst.chunks_exact_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v = self.bias.data()[co]);
            }
            gemm(
                self.out_channels,
                k,
                hw,
                1.0,
                MatRef::row_major(self.weight.data(), k),
                MatRef::row_major(col, hw),
                1.0,
                dst,
            );
        }
        self.cache = Some(ConvCache { cols, n, h, w });
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("Conv3x3"))?;
        let (n, h, w) = (cache.n, cache.h, cache.w);
        upstream.expect_shape("Conv3x3 backward", &[n, self.out_channels, h, w])?;
        let hw = h * w;
        let k = self.in_channels * 9;
        let out_len = self.out_channels * hw;
        let in_len = self.in_channels * hw;
        let mut dx = Tensor::zeros(&[n, self.in_channels, h, w]);
        let mut dcol = vec![0.0; k * hw];
        for s in 0..n {
            let g = &upstream.data()[s * out_len..(s + 1) * out_len];
            let col = &cache.cols[s * k * hw..(s + 1) * k * hw];
            gemm(
                self.out_channels,
                hw,
                k,
                1.0,
                MatRef::row_major(g, hw),
                MatRef::transposed(col, hw),
                1.0,
                self.weight.ensure_grad(),
            );
            let db = self.bias.ensure_grad();
            for (co, plane) in g.chunks_exact(hw).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
            gemm(
                k,
                self.out_channels,
                hw,
                1.0,
                MatRef::transposed(self.weight.data(), k),
                MatRef::row_major(g, hw),
                0.0,
                &mut dcol,
            );
            col2im(
                &dcol,
                self.in_channels,
                h,
                w,
                &mut dx.data_mut()[s * in_len..(s + 1) * in_len],
            );
        }
        Ok(dx)
    }
}

// ── BatchNorm ─────────────────────────────────────────────────────────

/// Batch normalisation over the feature axis (axis 1) of 2-D or 4-D input;
/// for 4-D input the statistics pool over batch and spatial positions.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    features: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    cache: Option<NormCache>,
}

#[derive(Debug, Clone)]
struct NormCache {
    shape: Vec<usize>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm {
    fn new(features: usize) -> Result<Self> {
        positive("BatchNorm features", features)?;
        let mut gamma = Tensor::parameter(&[features]);
        gamma.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut running_var = Tensor::zeros(&[features]);
        running_var.data_mut().iter_mut().for_each(|v| *v = 1.0);
        Ok(BatchNorm {
            features,
            gamma,
            beta: Tensor::parameter(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var,
            cache: None,
        })
    }

    /// (batch, spatial) extents for an input shape, validating the feature axis.
    fn layout(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match shape {
            [n, f] if *f == self.features => Ok((*n, 1)),
            [n, f, h, w] if *f == self.features => Ok((*n, h * w)),
            other => {
                let mut expected = other.to_vec();
                if expected.len() >= 2 {
                    expected[1] = self.features;
                }
                Err(Error::shape(
                    format!("BatchNorm({}) forward", self.features),
                    &expected,
                    other,
                ))
            }
        }
    }

    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, spatial) = self.layout(input.shape())?;
        let f = self.features;
        let x = input.data();
        let count = (n * spatial) as f64;
        let idx = |s: usize, c: usize, p: usize| (s * f + c) * spatial + p;

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for c in 0..f {
                    let mut sum = 0.0;
                    for s in 0..n {
                        sum += x[idx(s, c, 0)..idx(s, c, 0) + spatial].iter().sum::<f64>();
                    }
                    let m = sum / count;
                    let mut sq = 0.0;
                    for s in 0..n {
                        sq += x[idx(s, c, 0)..idx(s, c, 0) + spatial]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = sq / count;
                }
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for c in 0..f {
                    let rm = &mut self.running_mean.data_mut()[c];
                    *rm = (1.0 - BATCH_NORM_MOMENTUM) * *rm + BATCH_NORM_MOMENTUM * mean[c];
                    let rv = &mut self.running_var.data_mut()[c];
                    *rv = (1.0 - BATCH_NORM_MOMENTUM) * *rv + BATCH_NORM_MOMENTUM * var[c] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = Tensor::zeros(input.shape());
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        for s in 0..n {
            for c in 0..f {
                let base = idx(s, c, 0);
                for p in base..base + spatial {
                    let h = (x[p] - mean[c]) * inv_std[c];
                    xhat[p] = h;
                    out.data_mut()[p] = gamma[c] * h + beta[c];
                }
            }
        }
        self.cache = Some(NormCache {
            shape: input.shape().to_vec(),
            xhat,
            inv_std,
            mode,
        });
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("BatchNorm"))?;
        upstream.expect_shape("BatchNorm backward", &cache.shape)?;
        let (n, spatial) = self.layout(&cache.shape)?;
        let f = self.features;
        let g = upstream.data();
        let count = (n * spatial) as f64;
        let idx = |s: usize, c: usize| (s * f + c) * spatial;

        let mut sum_g = vec![0.0; f];
        let mut sum_gx = vec![0.0; f];
        for s in 0..n {
            for c in 0..f {
                let base = idx(s, c);
                for p in base..base + spatial {
                    sum_g[c] += g[p];
                    sum_gx[c] += g[p] * cache.xhat[p];
                }
            }
        }
        {
            let dgamma = self.gamma.ensure_grad();
            dgamma.iter_mut().zip(&sum_gx).for_each(|(d, v)| *d += v);
        }
        {
            let dbeta = self.beta.ensure_grad();
            dbeta.iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v);
        }

        let gamma = self.gamma.data();
        let mut dx = Tensor::zeros(&cache.shape);
        let out = dx.data_mut();
        for s in 0..n {
            for c in 0..f {
                let base = idx(s, c);
                let scale = gamma[c] * cache.inv_std[c];
                match cache.mode {
                    Mode::Eval => {
                        for p in base..base + spatial {
                            out[p] = g[p] * scale;
                        }
                    }
                    Mode::Train => {
                        let mg = sum_g[c] / count;
                        let mgx = sum_gx[c] / count;
                        for p in base..base + spatial {
                            out[p] = scale * (g[p] - mg - cache.xhat[p] * mgx);
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

// ── ReLU ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<(Vec<usize>, Vec<bool>)>,
}

impl Relu {
    fn forward(&mut self, input: &Tensor) -> Tensor {
        let mask: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
        let out = Tensor::from_fn(input.shape(), |i| if mask[i] { input.data()[i] } else { 0.0 });
        self.mask = Some((input.shape().to_vec(), mask));
        out
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (shape, mask) = self
            .mask
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("ReLU"))?;
        upstream.expect_shape("ReLU backward", shape)?;
        Ok(Tensor::from_fn(shape, |i| {
            if mask[i] {
                upstream.data()[i]
            } else {
                0.0
            }
        }))
    }
}

// ── MaxPool2x2 ────────────────────────────────────────────────────────

/// 2×2 max pooling, stride 2, floor on odd extents. Ties go to the first
/// element of the window in row-major order.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2x2 {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2x2 {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = match input.shape() {
            &[n, c, h, w] if h >= 2 && w >= 2 => (n, c, h, w),
            other => {
                return Err(Error::shape(
                    "MaxPool2x2 forward (needs n×c×h×w with h,w ≥ 2)",
                    &[other[0], 1, 2, 2],
                    other,
                ))
            }
        };
        let (oh, ow) = (h / 2, w / 2);
        let x = input.data();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        for plane in 0..n * c {
            let src = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = src + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = src + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out.data_mut()[o] = x[best];
                    argmax[o] = best;
                }
            }
        }
        self.cache = Some((input.shape().to_vec(), argmax));
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (shape, argmax) = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("MaxPool2x2"))?;
        let expected = [shape[0], shape[1], shape[2] / 2, shape[3] / 2];
        upstream.expect_shape("MaxPool2x2 backward", &expected)?;
        let mut dx = Tensor::zeros(shape);
        for (o, &src) in argmax.iter().enumerate() {
            dx.data_mut()[src] += upstream.data()[o];
        }
        Ok(dx)
    }
}

// ── GlobalAvgPool ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (n, c, hw) = match input.shape() {
            &[n, c, h, w] => (n, c, h * w),
            other => {
                return Err(Error::shape(
                    "GlobalAvgPool forward (needs n×c×h×w)",
                    &[other[0], 1, 1, 1],
                    other,
                ))
            }
        };
        let out = Tensor::from_fn(&[n, c], |i| {
            input.data()[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64
        });
        self.shape = Some(input.shape().to_vec());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let shape = self
            .shape
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("GlobalAvgPool"))?;
        upstream.expect_shape("GlobalAvgPool backward", &shape[..2])?;
        let hw = shape[2] * shape[3];
        Ok(Tensor::from_fn(shape, |i| upstream.data()[i / hw] / hw as f64))
    }
}

// ── Dropout ───────────────────────────────────────────────────────────

/// Inverted dropout: kept activations are scaled by `1/(1-p)` at train time,
/// so evaluation is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
    /// Per-element multiplier from the last forward; `None` entries mean identity.
    cache: Option<(Vec<usize>, Option<Vec<f64>>)>,
}

impl Dropout {
    fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout p must lie in [0,1), got {p}")));
        }
        Ok(Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cache: None,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn forward(&mut self, input: &Tensor, mode: Mode) -> Tensor {
        if mode == Mode::Eval || self.p == 0.0 {
            self.cache = Some((input.shape().to_vec(), None));
            return input.clone();
        }
        let keep = 1.0 - self.p;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..input.len())
            .map(|_| if self.rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let out = Tensor::from_fn(input.shape(), |i| input.data()[i] * mask[i]);
        self.cache = Some((input.shape().to_vec(), Some(mask)));
        out
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (shape, mask) = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("Dropout"))?;
        upstream.expect_shape("Dropout backward", shape)?;
        Ok(match mask {
            None => upstream.clone(),
            Some(m) => Tensor::from_fn(shape, |i| upstream.data()[i] * m[i]),
        })
    }
}

// ── Softmax ───────────────────────────────────────────────────────────

/// Row-wise softmax over the last dimension of a 2-D tensor.
#[derive(Debug, Clone, Default)]
pub struct Softmax {
    output: Option<Tensor>,
}

impl Softmax {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = super::loss::softmax(input)?;
        self.output = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let p = self
            .output
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("Softmax"))?;
        upstream.expect_shape("Softmax backward", p.shape())?;
        let c = p.shape()[1];
        let mut dx = Tensor::zeros(p.shape());
        for ((pr, gr), dr) in p
            .data()
            .chunks_exact(c)
            .zip(upstream.data().chunks_exact(c))
            .zip(dx.data_mut().chunks_exact_mut(c))
        {
            let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for j in 0..c {
                dr[j] = pr[j] * (gr[j] - dot);
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn layer(kind: LayerKind) -> Layer {
        Layer::new(kind, &mut rng()).unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut l = layer(LayerKind::Relu);
        let x = Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(l.forward(&x, Mode::Train).unwrap().data(), &[0.0, 2.0]);
        let g = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(l.backward(&g).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let mut l = layer(LayerKind::MaxPool2x2);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = l.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn maxpool_floors_odd_extents() {
        let mut l = layer(LayerKind::MaxPool2x2);
        let x = Tensor::zeros(&[2, 3, 7, 7]);
        assert_eq!(l.forward(&x, Mode::Eval).unwrap().shape(), &[2, 3, 3, 3]);
    }

    #[test]
    fn batchnorm_identity_statistics_in_eval() {
        let mut l = layer(LayerKind::BatchNorm { features: 2 });
        let x = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
        let y = l.forward(&x, Mode::Eval).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-6);
        assert!((y.data()[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_train_normalises_and_tracks_running_stats() {
        let mut l = layer(LayerKind::BatchNorm { features: 1 });
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = l.forward(&x, Mode::Train).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
        let Layer::BatchNorm(bn) = &l else { unreachable!() };
        assert!((bn.running_mean.data()[0] - 0.25).abs() < 1e-12);
        // unbiased batch variance 5/3
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn dense_identity_backward_passes_gradient() {
        let mut l = layer(LayerKind::Dense {
            inputs: 3,
            outputs: 3,
        });
        if let Layer::Dense(d) = &mut l {
            d.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            for i in 0..3 {
                d.weight.data_mut()[i * 3 + i] = 1.0;
            }
        }
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(l.forward(&x, Mode::Eval).unwrap().data(), x.data());
        let g = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        assert_eq!(l.backward(&g).unwrap().data(), g.data());
    }

    #[test]
    fn conv_center_delta_is_identity() {
        let mut l = layer(LayerKind::Conv3x3 {
            in_channels: 1,
            out_channels: 1,
        });
        if let Layer::Conv3x3(c) = &mut l {
            c.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            c.weight.data_mut()[4] = 1.0;
            c.bias.data_mut()[0] = 0.0;
        }
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 * 0.3 - 1.0);
        assert_eq!(l.forward(&x, Mode::Eval).unwrap().data(), x.data());
        let g = Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f64).sin());
        assert_eq!(l.backward(&g).unwrap().data(), g.data());
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut l = layer(LayerKind::Conv3x3 {
            in_channels: 2,
            out_channels: 3,
        });
        let x = Tensor::from_fn(&[2, 2, 5, 4], |i| ((i * 37) % 11) as f64 - 5.0);
        let y = l.forward(&x, Mode::Eval).unwrap();
        let Layer::Conv3x3(c) = &l else { unreachable!() };
        let wt = c.weight.data();
        for s in 0..2 {
            for co in 0..3 {
                for yy in 0..5 {
                    for xx in 0..4 {
                        let mut acc = c.bias.data()[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = yy as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sy >= 5 || sx < 0 || sx >= 4 {
                                        continue;
                                    }
                                    let xi = ((s * 2 + ci) * 5 + sy as usize) * 4 + sx as usize;
                                    acc += wt[((co * 2 + ci) * 3 + ky) * 3 + kx] * x.data()[xi];
                                }
                            }
                        }
                        let got = y.data()[((s * 3 + co) * 5 + yy) * 4 + xx];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut l = layer(LayerKind::Dropout { p: 0.5 });
        let x = Tensor::from_fn(&[4, 50], |_| 1.0);
        assert_eq!(l.forward(&x, Mode::Eval).unwrap().data(), x.data());
        let y = l.forward(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(y.data().iter().any(|&v| v == 0.0));
        let g = Tensor::from_fn(&[4, 50], |_| 1.0);
        assert_eq!(l.backward(&g).unwrap().data(), y.data());
    }

    #[test]
    fn invalid_dropout_rejected() {
        assert!(Layer::new(LayerKind::Dropout { p: 1.0 }, &mut rng()).is_err());
        assert!(Layer::new(LayerKind::Dropout { p: -0.1 }, &mut rng()).is_err());
    }

    #[test]
    fn backward_before_forward_rejected() {
        for kind in [
            LayerKind::Dense {
                inputs: 2,
                outputs: 2,
            },
            LayerKind::Relu,
            LayerKind::Softmax,
            LayerKind::BatchNorm { features: 2 },
        ] {
            let mut l = layer(kind);
            let err = l.backward(&Tensor::zeros(&[1, 2])).unwrap_err();
            assert!(matches!(err, Error::BackwardBeforeForward(_)), "{kind}: {err}");
        }
    }

    #[test]
    fn shape_mismatch_names_expected_and_actual() {
        let mut l = layer(LayerKind::Dense {
            inputs: 4,
            outputs: 2,
        });
        let err = l.forward(&Tensor::zeros(&[3, 5]), Mode::Eval).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[3, 5]"), "{msg}");

        l.forward(&Tensor::zeros(&[3, 4]), Mode::Eval).unwrap();
        assert!(l.backward(&Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn eval_forward_is_bit_identical() {
        let mut r = rng();
        for kind in [
            LayerKind::Conv3x3 {
                in_channels: 2,
                out_channels: 2,
            },
            LayerKind::BatchNorm { features: 2 },
            LayerKind::Dropout { p: 0.3 },
        ] {
            let mut l = Layer::new(kind, &mut r).unwrap();
            let x = Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64 * 0.7).cos());
            let a = l.forward(&x, Mode::Eval).unwrap();
            let b = l.forward(&x, Mode::Eval).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn output_shapes_and_macs() {
        let conv = layer(LayerKind::Conv3x3 {
            in_channels: 1,
            out_channels: 32,
        });
        assert_eq!(conv.output_shape(&[1, 28, 28]).unwrap(), vec![32, 28, 28]);
        assert_eq!(conv.macs(&[1, 28, 28]).unwrap(), 32 * 28 * 28 * 9);
        let pool = layer(LayerKind::MaxPool2x2);
        assert_eq!(pool.output_shape(&[32, 7, 7]).unwrap(), vec![32, 3, 3]);
        let dense = layer(LayerKind::Dense {
            inputs: 256,
            outputs: 16,
        });
        assert_eq!(dense.param_count(), 4112);
        assert!(dense.output_shape(&[200]).is_err());
    }
}
