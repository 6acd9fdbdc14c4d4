//! Finite-difference gradient suite over every layer kind and the gated
//! multi-exit objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gating::{compute_gates, GateConfig, GateMatrix};
use crate::model::{build_cnn, build_mlp, CnnConfig, MlpConfig, MultiExitNetwork};
use crate::numerics::{
    cross_entropy, grad_check, softmax, Coordinates, GradCheckReport, Layer, LayerKind, LayerProbe, Mode,
    Objective, Tensor,
};
use crate::training::cgt_loss;

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Coordinates checked per network-level case.
const NETWORK_COORDS: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CaseReport {
    fn from_check(name: &str, r: GradCheckReport) -> Self {
        CaseReport {
            name: name.into(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            worst_index: r.worst_index,
            analytic: r.analytic,
            numeric: r.numeric,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so no central difference straddles a ReLU kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A permutation of an evenly spaced grid: distinct values with gaps far
/// above epsilon, so pooling never ties.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    rand::seq::SliceRandom::shuffle(v.as_mut_slice(), rng);
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

fn layer(kind: LayerKind, rng: &mut ChaCha8Rng) -> Result<Layer> {
    let mut l = Layer::new(kind, rng)?;
    // Non-trivial affine parameters for batch norm.
    if let Layer::BatchNorm(bn) = &mut l {
        bn.gamma.data_mut().iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
        bn.beta.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        bn.running_mean.data_mut().iter_mut().for_each(|m| *m = rng.gen_range(-0.2..0.2));
        bn.running_var.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
    }
    Ok(l)
}

fn probe_case(
    name: &str,
    l: Layer,
    input: Tensor,
    mode: Mode,
    seed: u64,
) -> Result<CaseReport> {
    let mut probe = LayerProbe::new(l, input, mode, seed)?;
    let r = grad_check(&mut probe, EPSILON, Coordinates::All)?;
    Ok(CaseReport::from_check(name, r))
}

/// Train-mode dropout with the mask stream reset before every forward pass.
struct DropoutProbe {
    layer: Layer,
    input: Tensor,
    weights: Tensor,
    mask_seed: u64,
}

impl DropoutProbe {
    fn forward(&mut self) -> Result<Tensor> {
        if let Layer::Dropout(d) = &mut self.layer {
            d.reseed(self.mask_seed);
        }
        self.layer.forward(&self.input, Mode::Train)
    }
}

impl Objective for DropoutProbe {
    fn parameters(&self) -> Vec<f64> {
        self.input.data().to_vec()
    }

    fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        self.input.data_mut().copy_from_slice(values);
        Ok(())
    }

    fn value(&mut self) -> Result<f64> {
        let out = self.forward()?;
        Ok(out.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum())
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        self.forward()?;
        Ok(self.layer.backward(&self.weights.clone())?.into_data())
    }
}

/// Mean cross-entropy of `softmax(Dense(x))` over a batch.
struct DenseSoftmaxCe {
    layer: Layer,
    input: Tensor,
    labels: Vec<usize>,
}

impl DenseSoftmaxCe {
    fn probs(&mut self) -> Result<Tensor> {
        let z = self.layer.forward(&self.input, Mode::Train)?;
        softmax(&z)
    }
}

impl Objective for DenseSoftmaxCe {
    fn parameters(&self) -> Vec<f64> {
        let mut v = self.input.data().to_vec();
        self.layer.params().iter().for_each(|p| v.extend_from_slice(p.data()));
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
        let p = self.probs()?;
        let mut total = 0.0;
        for (i, &y) in self.labels.iter().enumerate() {
            total += cross_entropy(p.row(i), y)?;
        }
        Ok(total / self.labels.len() as f64)
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        self.layer.params_mut().into_iter().for_each(Tensor::zero_grad);
        let mut g = self.probs()?;
        let n = self.labels.len();
        let c = g.row_len();
        for (i, &y) in self.labels.iter().enumerate() {
            g.data_mut()[i * c + y] -= 1.0;
        }
        g.data_mut().iter_mut().for_each(|v| *v /= n as f64);
        let mut out = self.layer.backward(&g)?.into_data();
        self.layer
            .params()
            .iter()
            .for_each(|p| out.extend_from_slice(p.grad().expect("parameters carry gradients")));
        Ok(out)
    }
}

/// The gated objective of a whole network as a function of its parameters,
/// in eval mode with the gate matrix computed once and then held fixed.
pub struct GatedNetworkObjective {
    pub net: MultiExitNetwork,
    pub batch: Tensor,
    pub labels: Vec<usize>,
    pub gates: GateMatrix,
}

impl GatedNetworkObjective {
    pub fn new(
        mut net: MultiExitNetwork,
        batch: Tensor,
        labels: Vec<usize>,
        gate: &GateConfig,
    ) -> Result<Self> {
        let out = net.forward_all_exits(&batch, Mode::Eval)?;
        let active = vec![true; net.num_exits()];
        let gates = compute_gates(gate, &out, &labels, &active)?;
        Ok(GatedNetworkObjective {
            net,
            batch,
            labels,
            gates,
        })
    }
}

impl Objective for GatedNetworkObjective {
    fn parameters(&self) -> Vec<f64> {
        self.net.params().iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        let mut off = 0;
        for p in self.net.params_mut() {
            let k = p.len();
            p.data_mut().copy_from_slice(&values[off..off + k]);
            off += k;
        }
        Ok(())
    }

    fn value(&mut self) -> Result<f64> {
        let out = self.net.forward_all_exits(&self.batch, Mode::Eval)?;
        Ok(cgt_loss(&out, &self.labels, &self.gates)?.value)
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        self.net.zero_grad();
        let out = self.net.forward_all_exits(&self.batch, Mode::Eval)?;
        let loss = cgt_loss(&out, &self.labels, &self.gates)?;
        self.net.backward(&loss.logit_grads)?;
        Ok(self
            .net
            .params()
            .iter()
            .flat_map(|p| p.grad().expect("parameters carry gradients").iter().copied())
            .collect())
    }
}

/// Puts batch-norm running statistics at non-trivial values so eval-mode
/// normalisation is not the identity.
fn perturb_running_stats(net: &mut MultiExitNetwork, rng: &mut ChaCha8Rng) {
    for block in net.blocks_mut() {
        for l in &mut block.layers {
            if let Layer::BatchNorm(bn) = l {
                bn.running_mean.data_mut().iter_mut().for_each(|m| *m = rng.gen_range(-0.1..0.1));
                bn.running_var.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
            }
        }
    }
}

/// Distance of a batch from the nearest non-differentiable point of the
/// backbone: the smallest |ReLU input| and the smallest gap between the two
/// largest entries of any max-pool window whose maximum is positive.
pub fn kink_margin(net: &MultiExitNetwork, batch: &Tensor) -> Result<f64> {
    let mut net = net.clone();
    let mut margin = f64::INFINITY;
    let mut h = batch.clone();
    for block in net.blocks_mut() {
        for layer in &mut block.layers {
            match layer {
                Layer::Relu(_) => {
                    margin = h.data().iter().fold(margin, |m, v| m.min(v.abs()));
                }
                Layer::MaxPool2x2(_) => margin = margin.min(pool_gap(&h)),
                _ => {}
            }
            h = layer.forward(&h, Mode::Eval)?;
        }
    }
    Ok(margin)
}

fn pool_gap(h: &Tensor) -> f64 {
    let &[n, c, height, width] = h.shape() else {
        return f64::INFINITY;
    };
    let mut gap = f64::INFINITY;
    let d = h.data();
    for plane in 0..n * c {
        let base = plane * height * width;
        for y in (0..height - height % 2).step_by(2) {
            for x in (0..width - width % 2).step_by(2) {
                let mut w = [
                    d[base + y * width + x],
                    d[base + y * width + x + 1],
                    d[base + (y + 1) * width + x],
                    d[base + (y + 1) * width + x + 1],
                ];
                w.sort_by(|a, b| b.total_cmp(a));
                if w[0] > 0.0 {
                    gap = gap.min(w[0] - w[1]);
                }
            }
        }
    }
    gap
}

/// Required [`kink_margin`] for network-level cases.
const KINK_MARGIN: f64 = 1e-3;

fn network_case(
    name: &str,
    mut net: MultiExitNetwork,
    shape: &[usize],
    classes: usize,
    gate: GateConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CaseReport> {
    perturb_running_stats(&mut net, rng);
    let mut batch = uniform(shape, -1.0, 1.0, rng);
    for _ in 0..10_000 {
        if kink_margin(&net, &batch)? >= KINK_MARGIN {
            break;
        }
        batch = uniform(shape, -1.0, 1.0, rng);
    }
    let labels = (0..batch.rows()).map(|_| rng.gen_range(0..classes)).collect();
    let mut obj = GatedNetworkObjective::new(net, batch, labels, &gate)?;
    let r = grad_check(
        &mut obj,
        EPSILON,
        Coordinates::Sample {
            count: NETWORK_COORDS,
            seed: rng.gen(),
        },
    )?;
    Ok(CaseReport::from_check(name, r))
}

fn small_mlp(seed: u64) -> Result<MultiExitNetwork> {
    build_mlp(
        MlpConfig {
            input_dim: 6,
            width: 8,
            num_classes: 3,
            depth: 3,
            exit_positions: vec![1, 2, 3],
            dropout: 0.2,
        },
        seed,
    )
}

fn small_cnn(seed: u64) -> Result<MultiExitNetwork> {
    build_cnn(
        CnnConfig {
            in_channels: 1,
            widths: vec![2, 3, 4],
            num_classes: 3,
            image_size: 8,
        },
        seed,
    )
}

/// Runs every case for one seed.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CaseReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let s = |rng: &mut ChaCha8Rng| rng.gen::<u64>();

    let l = layer(LayerKind::Dense { inputs: 5, outputs: 4 }, &mut rng)?;
    let x = uniform(&[3, 5], -1.0, 1.0, &mut rng);
    out.push(probe_case("dense", l, x, Mode::Train, s(&mut rng))?);

    let l = layer(LayerKind::Conv3x3 { in_channels: 2, out_channels: 3 }, &mut rng)?;
    let x = uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut rng);
    out.push(probe_case("conv3x3", l, x, Mode::Train, s(&mut rng))?);

    let l = layer(LayerKind::BatchNorm { features: 4 }, &mut rng)?;
    let x = uniform(&[6, 4], -1.0, 1.0, &mut rng);
    out.push(probe_case("batchnorm_train_2d", l, x, Mode::Train, s(&mut rng))?);

    let l = layer(LayerKind::BatchNorm { features: 3 }, &mut rng)?;
    let x = uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    out.push(probe_case("batchnorm_train_4d", l, x, Mode::Train, s(&mut rng))?);

    let l = layer(LayerKind::BatchNorm { features: 3 }, &mut rng)?;
    let x = uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
    out.push(probe_case("batchnorm_eval", l, x, Mode::Eval, s(&mut rng))?);

    let l = layer(LayerKind::Relu, &mut rng)?;
    let x = off_kink(&[4, 6], &mut rng);
    out.push(probe_case("relu", l, x, Mode::Train, s(&mut rng))?);

    let l = layer(LayerKind::MaxPool2x2, &mut rng)?;
    let x = distinct(&[2, 2, 5, 5], &mut rng);
    out.push(probe_case("maxpool2x2", l, x, Mode::Train, s(&mut rng))?);

    let l = layer(LayerKind::GlobalAvgPool, &mut rng)?;
    let x = uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
    out.push(probe_case("global_avg_pool", l, x, Mode::Train, s(&mut rng))?);

    let l = layer(LayerKind::Dropout { p: 0.3 }, &mut rng)?;
    let x = uniform(&[4, 5], -1.0, 1.0, &mut rng);
    out.push(probe_case("dropout_eval", l.clone(), x.clone(), Mode::Eval, s(&mut rng))?);
    let weights = uniform(&[4, 5], -1.0, 1.0, &mut rng);
    let mut dp = DropoutProbe {
        layer: l,
        input: x,
        weights,
        mask_seed: s(&mut rng),
    };
    let r = grad_check(&mut dp, EPSILON, Coordinates::All)?;
    out.push(CaseReport::from_check("dropout_train_fixed_mask", r));

    let l = layer(LayerKind::Softmax, &mut rng)?;
    let x = uniform(&[3, 4], -2.0, 2.0, &mut rng);
    out.push(probe_case("softmax", l, x, Mode::Train, s(&mut rng))?);

    let l = layer(LayerKind::Dense { inputs: 5, outputs: 4 }, &mut rng)?;
    let input = uniform(&[3, 5], -1.0, 1.0, &mut rng);
    let labels = (0..3).map(|_| rng.gen_range(0..4)).collect();
    let mut ce = DenseSoftmaxCe { layer: l, input, labels };
    let r = grad_check(&mut ce, EPSILON, Coordinates::All)?;
    out.push(CaseReport::from_check("dense_softmax_cross_entropy", r));

    // With three classes a threshold just above 1/3 lets some exits succeed,
    // so the hard gates are a genuine mix of zeros and ones.
    for (name, gate) in [
        ("mlp_hard_cgt", GateConfig::hard(0.34)),
        ("mlp_soft_cgt", GateConfig::soft(0.5, 1.0)),
    ] {
        let net = small_mlp(s(&mut rng))?;
        out.push(network_case(name, net, &[5, 6], 3, gate, &mut rng)?);
    }
    for (name, gate) in [
        ("cnn_hard_cgt", GateConfig::hard(0.34)),
        ("cnn_soft_cgt", GateConfig::soft(0.5, 1.0)),
    ] {
        let net = small_cnn(s(&mut rng))?;
        out.push(network_case(name, net, &[3, 1, 8, 8], 3, gate, &mut rng)?);
    }
    Ok(out)
}
