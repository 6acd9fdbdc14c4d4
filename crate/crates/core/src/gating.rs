//! Per-sample, per-exit loss weights.
//!
//! * Hard gating: exit `e` keeps its loss only if every earlier exit failed,
//!   where an exit succeeds when its top class is the true label and its top
//!   probability reaches `tau`.
//! * Soft gating: exit `e` is weighted by the product of the residual
//!   coefficients `1 − σ(β·(s − τ))` of the earlier exits.
//! * Fixed gating: the same weight row for every sample.
//!
//! Gates are computed from detached confidences; they are constants as far as
//! backpropagation is concerned.

use crate::error::{Error, Result};
use crate::model::ExitOutputs;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Hard,
    Soft,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    pub mode: GateMode,
    /// Confidence threshold in (0, 1).
    pub tau: f64,
    /// Sigmoid temperature β for soft gating; β = 1 is the plain residual gate.
    pub temperature: f64,
    /// Per-exit weights for fixed gating.
    pub fixed_weights: Vec<f64>,
}

impl GateConfig {
    pub fn hard(tau: f64) -> Self {
        GateConfig {
            mode: GateMode::Hard,
            tau,
            temperature: 1.0,
            fixed_weights: Vec::new(),
        }
    }

    pub fn soft(tau: f64, temperature: f64) -> Self {
        GateConfig {
            mode: GateMode::Soft,
            tau,
            temperature,
            fixed_weights: Vec::new(),
        }
    }

    pub fn fixed(weights: Vec<f64>) -> Self {
        GateConfig {
            mode: GateMode::Fixed,
            tau: 0.9,
            temperature: 1.0,
            fixed_weights: weights,
        }
    }

    pub fn validate(&self, num_exits: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0,1), got {}", self.tau)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.mode == GateMode::Fixed {
            if self.fixed_weights.len() != num_exits {
                return Err(Error::invalid(format!(
                    "expected {num_exits} fixed weights, got {}",
                    self.fixed_weights.len()
                )));
            }
            if self.fixed_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
                return Err(Error::invalid("fixed weights must be positive"));
            }
        }
        Ok(())
    }
}

/// `batch × exits` matrix of loss weights, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMatrix {
    values: Vec<f64>,
    batch: usize,
    exits: usize,
    mode: GateMode,
}

impl GateMatrix {
    pub fn from_rows(rows: &[Vec<f64>], mode: GateMode) -> Result<Self> {
        let exits = rows.first().map(Vec::len).unwrap_or(0);
        if exits == 0 || rows.iter().any(|r| r.len() != exits) {
            return Err(Error::invalid("gate rows must be non-empty and equally long"));
        }
        Ok(GateMatrix {
            values: rows.concat(),
            batch: rows.len(),
            exits,
            mode,
        })
    }

    pub fn ones(batch: usize, exits: usize) -> Self {
        GateMatrix {
            values: vec![1.0; batch * exits],
            batch,
            exits,
            mode: GateMode::Fixed,
        }
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn num_exits(&self) -> usize {
        self.exits
    }

    pub fn get(&self, i: usize, e: usize) -> f64 {
        self.values[i * self.exits + e]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.exits..(i + 1) * self.exits]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, e: usize) -> Vec<f64> {
        (0..self.batch).map(|i| self.get(i, e)).collect()
    }

    pub fn column_sum(&self, e: usize) -> f64 {
        (0..self.batch).map(|i| self.get(i, e)).sum()
    }

    pub fn column_is_zero(&self, e: usize) -> bool {
        (0..self.batch).all(|i| self.get(i, e) == 0.0)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Top-class probability.
pub fn confidence(p: &[f64]) -> f64 {
    p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// True when the exit's top class is `label` and its confidence reaches `tau`.
pub fn success_indicator(p: &[f64], label: usize, tau: f64) -> bool {
    argmax(p) == label && confidence(p) >= tau
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `1 − σ(β·(s − τ))`.
pub fn residual_coefficient(s: f64, tau: f64, beta: f64) -> f64 {
    sigmoid(-beta * (s - tau))
}

/// Cumulative products of `1 − δ`: λ₁ = 1, λₑ = ∏_{e'<e} (1 − δ_{e'}).
pub fn hard_gates(deltas: &[Vec<bool>]) -> Result<GateMatrix> {
    let rows: Vec<Vec<f64>> = deltas
        .iter()
        .map(|d| {
            let mut lambda = 1.0;
            d.iter()
                .map(|&ok| {
                    let out = lambda;
                    if ok {
                        lambda = 0.0;
                    }
                    out
                })
                .collect()
        })
        .collect();
    GateMatrix::from_rows(&rows, GateMode::Hard)
}

/// Cumulative products of residual coefficients: λ₁ = 1, λₑ = ∏_{e'<e} r_{e'}.
/// The last column of `r` is not used.
pub fn soft_gates(r: &[Vec<f64>]) -> Result<GateMatrix> {
    if r.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("residual coefficients must lie in [0,1]"));
    }
    let rows: Vec<Vec<f64>> = r
        .iter()
        .map(|row| {
            let mut lambda = 1.0;
            row.iter()
                .map(|&coef| {
                    let out = lambda;
                    lambda *= coef;
                    out
                })
                .collect()
        })
        .collect();
    GateMatrix::from_rows(&rows, GateMode::Soft)
}

/// The same weight row broadcast to `batch` samples.
pub fn fixed_gates(weights: &[f64], batch: usize) -> Result<GateMatrix> {
    if weights.is_empty() || weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid("fixed weights must be finite and non-negative"));
    }
    if batch == 0 {
        return Err(Error::invalid("batch must be non-empty"));
    }
    Ok(GateMatrix {
        values: weights.repeat(batch),
        batch,
        exits: weights.len(),
        mode: GateMode::Fixed,
    })
}

/// Gates for a batch from its exit outputs. Inactive exits get weight 0 and
/// are skipped when forming the products for later exits.
pub fn compute_gates(
    config: &GateConfig,
    outputs: &ExitOutputs,
    labels: &[usize],
    active: &[bool],
) -> Result<GateMatrix> {
    let n = outputs.batch_size();
    let exits = outputs.num_exits();
    if labels.len() != n || active.len() != exits {
        return Err(Error::invalid(format!(
            "gate inputs disagree: {n} samples / {} labels, {exits} exits / {} activity flags",
            labels.len(),
            active.len()
        )));
    }
    config.validate(exits)?;
    let active_idx: Vec<usize> = (0..exits).filter(|&e| active[e]).collect();

    let mut values = vec![0.0; n * exits];
    match config.mode {
        GateMode::Fixed => {
            for i in 0..n {
                for &e in &active_idx {
                    values[i * exits + e] = config.fixed_weights[e];
                }
            }
        }
        GateMode::Hard | GateMode::Soft => {
            for i in 0..n {
                let factors: Vec<f64> = active_idx
                    .iter()
                    .map(|&e| {
                        let p = outputs.prob(i, e);
                        match config.mode {
                            GateMode::Hard => {
                                if success_indicator(p, labels[i], config.tau) {
                                    0.0
                                } else {
                                    1.0
                                }
                            }
                            _ => residual_coefficient(confidence(p), config.tau, config.temperature),
                        }
                    })
                    .collect();
                let mut lambda = 1.0;
                for (&e, f) in active_idx.iter().zip(factors) {
                    values[i * exits + e] = lambda;
                    lambda *= f;
                }
            }
        }
    }
    Ok(GateMatrix {
        values,
        batch: n,
        exits,
        mode: config.mode,
    })
}
