//! Gated multi-exit objective and training loops.
//!
//! The batch objective is `(1/N) Σ_i Σ_e λ_ie · CE(p_ie, y_i)`; the gate
//! matrix `λ` comes from [`crate::gating`] and is treated as a constant.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::gating::{compute_gates, fixed_gates, GateConfig, GateMatrix, GateMode};
use crate::inference::{CostModel, EarlyExitPolicy};
use crate::metrics::evaluate;
use crate::model::{ExitOutputs, MultiExitNetwork};
use crate::numerics::{cross_entropy, Mode, OptimizerKind, OptimizerState, Tensor};

/// Value and logit gradients of the gated objective for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedLoss {
    pub value: f64,
    /// Unweighted mean cross-entropy per exit.
    pub raw: Vec<f64>,
    /// `λ_ie / N · (p_ie − onehot(y_i))`; `None` where the gate column is all zero.
    pub logit_grads: Vec<Option<Tensor>>,
}

fn check_inputs(outputs: &ExitOutputs, labels: &[usize], gates: &GateMatrix) -> Result<()> {
    let (n, exits, c) = (outputs.batch_size(), outputs.num_exits(), outputs.num_classes());
    if labels.len() != n {
        return Err(Error::shape("labels", &[n], &[labels.len()]));
    }
    if gates.batch_size() != n || gates.num_exits() != exits {
        return Err(Error::shape(
            "gate matrix",
            &[n, exits],
            &[gates.batch_size(), gates.num_exits()],
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} outside [0, {c})")));
    }
    Ok(())
}

fn gated_reduction(outputs: &ExitOutputs, labels: &[usize], gates: &GateMatrix) -> Result<GatedLoss> {
    check_inputs(outputs, labels, gates)?;
    let (n, exits, c) = (outputs.batch_size(), outputs.num_exits(), outputs.num_classes());
    let inv_n = 1.0 / n as f64;
    let mut ce = vec![0.0; n * exits];
    for i in 0..n {
        for e in 0..exits {
            ce[i * exits + e] = cross_entropy(outputs.prob(i, e), labels[i])?;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for e in 0..exits {
            total += gates.get(i, e) * ce[i * exits + e];
        }
    }
    let raw = (0..exits)
        .map(|e| (0..n).map(|i| ce[i * exits + e]).sum::<f64>() * inv_n)
        .collect();
    let logit_grads = (0..exits)
        .map(|e| {
            if gates.column_is_zero(e) {
                return None;
            }
            let mut g = outputs.probs[e].clone();
            let data = g.data_mut();
            for i in 0..n {
                let w = gates.get(i, e) * inv_n;
                let row = &mut data[i * c..(i + 1) * c];
                row[labels[i]] -= 1.0;
                row.iter_mut().for_each(|v| *v *= w);
            }
            Some(g)
        })
        .collect();
    Ok(GatedLoss {
        value: total * inv_n,
        raw,
        logit_grads,
    })
}

/// Confidence-gated objective for gates computed from these same outputs.
pub fn cgt_loss(outputs: &ExitOutputs, labels: &[usize], gates: &GateMatrix) -> Result<GatedLoss> {
    gated_reduction(outputs, labels, gates)
}

/// Weighted sum of per-exit mean losses with the same weights for every sample.
pub fn fixed_joint_loss(outputs: &ExitOutputs, labels: &[usize], weights: &[f64]) -> Result<GatedLoss> {
    if weights.len() != outputs.num_exits() {
        return Err(Error::shape("exit weights", &[outputs.num_exits()], &[weights.len()]));
    }
    let gates = fixed_gates(weights, outputs.batch_size())?;
    gated_reduction(outputs, labels, &gates)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    HardCgt,
    SoftCgt,
    FixedJoint,
    /// Stage-wise: stage `e` trains the blocks between exits `e−1` and `e`
    /// plus head `e`, everything else frozen.
    Cascade,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::HardCgt => "hardcgt",
            Regime::SoftCgt => "softcgt",
            Regime::FixedJoint => "fixed",
            Regime::Cascade => "cascade",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "hardcgt" | "hard" => Ok(Regime::HardCgt),
            "softcgt" | "soft" => Ok(Regime::SoftCgt),
            "fixed" | "fixedjoint" => Ok(Regime::FixedJoint),
            "cascade" | "co" => Ok(Regime::Cascade),
            _ => Err(Error::invalid(format!(
                "unknown regime {s:?} (expected hardcgt, softcgt, fixed or cascade)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub gate: GateConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epoch at which each head's loss switches on; empty means all at 0.
    pub head_activation_epochs: Vec<usize>,
    pub augment: Option<AugmentConfig>,
    /// Extra train-mode forward passes after the last epoch, weights fixed,
    /// so the BatchNorm running averages catch up with the final weights.
    pub bn_refresh_batches: usize,
}

impl TrainConfig {
    /// Adam at 1e-3, batch 128, 30 epochs, all heads active from the start.
    pub fn new(regime: Regime, gate: GateConfig) -> Self {
        TrainConfig {
            regime,
            gate,
            epochs: 30,
            batch_size: 128,
            optimizer: OptimizerKind::adam(),
            learning_rate: 1e-3,
            seed: 0,
            head_activation_epochs: Vec::new(),
            augment: None,
            bn_refresh_batches: 0,
        }
    }

    pub fn activation_epochs(&self, num_exits: usize) -> Vec<usize> {
        if self.head_activation_epochs.is_empty() {
            vec![0; num_exits]
        } else {
            self.head_activation_epochs.clone()
        }
    }

    pub fn validate(&self, num_exits: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        let expected = match self.regime {
            Regime::HardCgt => Some(GateMode::Hard),
            Regime::SoftCgt => Some(GateMode::Soft),
            Regime::FixedJoint => Some(GateMode::Fixed),
            Regime::Cascade => None,
        };
        if let Some(mode) = expected {
            if self.gate.mode != mode {
                return Err(Error::Config(format!(
                    "regime {} needs {mode:?} gating, got {:?}",
                    self.regime, self.gate.mode
                )));
            }
            self.gate.validate(num_exits)?;
        }
        if self.regime == Regime::Cascade && self.epochs < num_exits {
            return Err(Error::Config(format!(
                "cascade training needs at least one epoch per exit ({num_exits})"
            )));
        }
        let act = self.activation_epochs(num_exits);
        if act.len() != num_exits {
            return Err(Error::Config(format!(
                "expected {num_exits} head activation epochs, got {}",
                act.len()
            )));
        }
        if act.windows(2).any(|w| w[1] < w[0]) || act[num_exits - 1] >= self.epochs {
            return Err(Error::Config(format!(
                "head activation epochs {act:?} must be non-decreasing and below {}",
                self.epochs
            )));
        }
        // The optimizer validates its own coefficients.
        OptimizerState::new(self.optimizer, self.learning_rate)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    /// Mean unweighted cross-entropy per exit over every sample of the epoch.
    pub raw_loss: Vec<f64>,
    /// Mean gate per exit over every sample of the epoch.
    pub mean_gate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossRecord {
    pub epochs: Vec<EpochLosses>,
}

pub const LOSS_CSV_HEADER: &str = "epoch,exit,raw_loss,mean_gate";

impl LossRecord {
    /// Raw loss of 1-based `exit` in the final epoch.
    pub fn final_raw_loss(&self, exit: usize) -> Option<f64> {
        self.epochs.last().map(|e| e.raw_loss[exit - 1])
    }

    /// One row per (epoch, exit), both 1-based.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOSS_CSV_HEADER);
        s.push('\n');
        for ep in &self.epochs {
            for (e, (l, g)) in ep.raw_loss.iter().zip(&ep.mean_gate).enumerate() {
                s.push_str(&format!("{},{},{l},{g}\n", ep.epoch + 1, e + 1));
            }
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Salt separating the dropout stream from the shuffle stream.
const DROPOUT_SALT: u64 = 0x5eed_d209;

struct EpochRunner<'a> {
    ds: &'a Dataset,
    batch_size: usize,
    order: Vec<usize>,
    shuffle_rng: ChaCha8Rng,
    augment: Option<(AugmentConfig, ChaCha8Rng)>,
}

impl<'a> EpochRunner<'a> {
    fn new(ds: &'a Dataset, config: &TrainConfig) -> Self {
        EpochRunner {
            ds,
            batch_size: config.batch_size,
            order: (0..ds.len()).collect(),
            shuffle_rng: ChaCha8Rng::seed_from_u64(config.seed),
            augment: config
                .augment
                .filter(AugmentConfig::is_enabled)
                .map(|a| (a, ChaCha8Rng::seed_from_u64(a.seed))),
        }
    }

    /// One shuffled pass; `gates` decides each batch's weights.
    fn run(
        &mut self,
        net: &mut MultiExitNetwork,
        opt: &mut OptimizerState,
        epoch: usize,
        gates: &dyn Fn(&ExitOutputs, &[usize]) -> Result<GateMatrix>,
    ) -> Result<EpochLosses> {
        let exits = net.num_exits();
        self.order.shuffle(&mut self.shuffle_rng);
        let mut raw = vec![0.0; exits];
        let mut gate_sum = vec![0.0; exits];
        let diverged = |batch: usize, loss: f64| Error::Divergence { epoch, batch, loss };
        for (b, idx) in self.order.chunks(self.batch_size).enumerate() {
            let mut x = self.ds.batch(idx);
            if let Some((cfg, rng)) = self.augment.as_mut() {
                augment(&mut x, cfg, rng)?;
            }
            let y = self.ds.batch_labels(idx);
            let out = match net.forward_all_exits(&x, Mode::Train) {
                Err(Error::NonFinite(_)) => return Err(diverged(b, f64::NAN)),
                other => other?,
            };
            let g = gates(&out, &y)?;
            let loss = cgt_loss(&out, &y, &g)?;
            if !loss.value.is_finite() {
                return Err(diverged(b, loss.value));
            }
            net.backward(&loss.logit_grads)?;
            opt.step(&mut net.trainable_params_mut())?;
            for e in 0..exits {
                raw[e] += loss.raw[e] * idx.len() as f64;
                gate_sum[e] += g.column_sum(e);
            }
        }
        let n = self.ds.len() as f64;
        Ok(EpochLosses {
            epoch,
            raw_loss: raw.into_iter().map(|v| v / n).collect(),
            mean_gate: gate_sum.into_iter().map(|v| v / n).collect(),
        })
    }
}

fn check_dataset(net: &MultiExitNetwork, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset(ds.provenance().to_string()));
    }
    if ds.sample_shape() != net.sample_shape().as_slice() {
        return Err(Error::shape("training samples", &net.sample_shape(), ds.sample_shape()));
    }
    if ds.num_classes() > net.num_classes() {
        return Err(Error::invalid(format!(
            "dataset has {} classes, network {}",
            ds.num_classes(),
            net.num_classes()
        )));
    }
    Ok(())
}

/// Trains `net` in place; cascade configs are routed to [`cascade_train`].
pub fn train(net: &mut MultiExitNetwork, ds: &Dataset, config: &TrainConfig) -> Result<LossRecord> {
    train_with_observer(net, ds, config, &mut |_, _| {})
}

/// As [`train`], calling `observer` with the epoch's losses and the network
/// after every epoch.
pub fn train_with_observer(
    net: &mut MultiExitNetwork,
    ds: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochLosses, &MultiExitNetwork),
) -> Result<LossRecord> {
    if config.regime == Regime::Cascade {
        return cascade_with_observer(net, ds, config, observer);
    }
    let exits = net.num_exits();
    config.validate(exits)?;
    check_dataset(net, ds)?;
    net.reseed_dropout(config.seed ^ DROPOUT_SALT);
    let mut opt = OptimizerState::new(config.optimizer, config.learning_rate)?;
    let mut runner = EpochRunner::new(ds, config);
    let activation = config.activation_epochs(exits);
    let mut record = LossRecord::default();
    for epoch in 0..config.epochs {
        let active: Vec<bool> = activation.iter().map(|&a| a <= epoch).collect();
        let gate = &config.gate;
        let losses = runner.run(net, &mut opt, epoch, &|out, y| {
            compute_gates(gate, out, y, &active)
        })?;
        observer(&losses, net);
        record.epochs.push(losses);
    }
    refresh_batch_norm(net, ds, config)?;
    Ok(record)
}

/// Salt for the batch order of [`refresh_batch_norm`].
const REFRESH_SALT: u64 = 0xb47c_4e0f;

/// Runs `config.bn_refresh_batches` shuffled, unaugmented batches through
/// the network in train mode without updating any weight.
pub fn refresh_batch_norm(net: &mut MultiExitNetwork, ds: &Dataset, config: &TrainConfig) -> Result<()> {
    if config.bn_refresh_batches == 0 {
        return Ok(());
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ REFRESH_SALT);
    let mut done = 0;
    while done < config.bn_refresh_batches {
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size) {
            if done == config.bn_refresh_batches {
                break;
            }
            net.forward_all_exits(&ds.batch(idx), Mode::Train)?;
            done += 1;
        }
    }
    Ok(())
}

/// Epochs given to each cascade stage: equal shares, the first
/// `epochs mod E` stages taking one extra.
pub fn cascade_schedule(epochs: usize, num_exits: usize) -> Vec<usize> {
    (0..num_exits)
        .map(|s| epochs / num_exits + usize::from(s < epochs % num_exits))
        .collect()
}

pub fn cascade_train(net: &mut MultiExitNetwork, ds: &Dataset, config: &TrainConfig) -> Result<LossRecord> {
    cascade_with_observer(net, ds, config, &mut |_, _| {})
}

fn cascade_with_observer(
    net: &mut MultiExitNetwork,
    ds: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochLosses, &MultiExitNetwork),
) -> Result<LossRecord> {
    let exits = net.num_exits();
    let mut config = config.clone();
    config.regime = Regime::Cascade;
    config.validate(exits)?;
    check_dataset(net, ds)?;
    net.reseed_dropout(config.seed ^ DROPOUT_SALT);
    let positions = net.exit_positions().to_vec();
    let mut runner = EpochRunner::new(ds, &config);
    let unit = GateConfig::fixed(vec![1.0; exits]);
    let mut record = LossRecord::default();
    let mut epoch = 0;
    for (stage, stage_epochs) in cascade_schedule(config.epochs, exits).into_iter().enumerate() {
        let first = if stage == 0 { 0 } else { positions[stage - 1] };
        for b in 0..net.num_blocks() {
            net.set_block_frozen(b, !(first..positions[stage]).contains(&b));
        }
        for e in 0..exits {
            net.set_head_frozen(e, e != stage);
        }
        let active: Vec<bool> = (0..exits).map(|e| e == stage).collect();
        let mut opt = OptimizerState::new(config.optimizer, config.learning_rate)?;
        for _ in 0..stage_epochs {
            let losses = runner.run(net, &mut opt, epoch, &|out, y| {
                compute_gates(&unit, out, y, &active)
            });
            let losses = match losses {
                Ok(l) => l,
                Err(err) => {
                    net.unfreeze_all();
                    return Err(err);
                }
            };
            observer(&losses, net);
            record.epochs.push(losses);
            epoch += 1;
        }
    }
    net.unfreeze_all();
    refresh_batch_norm(net, ds, &config)?;
    Ok(record)
}

/// `w₁ > w₂ > … > w_E`, all positive and finite.
pub fn strictly_descending(weights: &[f64]) -> bool {
    weights.iter().all(|w| *w > 0.0 && w.is_finite()) && weights.windows(2).all(|p| p[0] > p[1])
}

#[derive(Debug, Clone)]
pub struct GridSearchReport {
    pub best: Vec<f64>,
    /// Candidates that passed the constraint with their validation macro-F1
    /// (`None` when a single candidate was returned untrained).
    pub scores: Vec<(Vec<f64>, Option<f64>)>,
    pub rejected: Vec<Vec<f64>>,
    /// The network trained with `best`, when training happened.
    pub best_network: Option<MultiExitNetwork>,
}

/// Trains one fixed-weight model per admissible candidate and keeps the one
/// with the highest validation macro-F1 under early exit; ties keep the
/// earlier candidate.
pub fn grid_search_fixed_weights(
    build: &mut dyn FnMut() -> Result<MultiExitNetwork>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    grid: &[Vec<f64>],
    base: &TrainConfig,
    policy: &EarlyExitPolicy,
) -> Result<GridSearchReport> {
    let (admissible, rejected): (Vec<Vec<f64>>, Vec<Vec<f64>>) =
        grid.iter().cloned().partition(|w| strictly_descending(w));
    if admissible.is_empty() {
        return Err(Error::invalid(
            "no candidate weights satisfy w1 > w2 > ... > wE > 0",
        ));
    }
    if admissible.len() == 1 {
        return Ok(GridSearchReport {
            best: admissible[0].clone(),
            scores: vec![(admissible[0].clone(), None)],
            rejected,
            best_network: None,
        });
    }
    let mut scores = Vec::with_capacity(admissible.len());
    let mut best: Option<(usize, f64, MultiExitNetwork)> = None;
    for (k, w) in admissible.iter().enumerate() {
        let mut net = build()?;
        let mut cfg = base.clone();
        cfg.regime = Regime::FixedJoint;
        cfg.gate = GateConfig {
            fixed_weights: w.clone(),
            mode: GateMode::Fixed,
            ..base.gate.clone()
        };
        train(&mut net, train_ds, &cfg)?;
        let cost = CostModel::from_network(&net)?;
        let f1 = evaluate(&net, val_ds, policy, &cost)?.macro_f1;
        scores.push((w.clone(), Some(f1)));
        if best.as_ref().is_none_or(|(_, b, _)| f1 > *b) {
            best = Some((k, f1, net));
        }
    }
    let (k, _, net) = best.expect("at least two candidates trained");
    Ok(GridSearchReport {
        best: admissible[k].clone(),
        scores,
        rejected,
        best_network: Some(net),
    })
}
