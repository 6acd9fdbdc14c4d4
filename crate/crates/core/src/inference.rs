//! Threshold-gated early-exit prediction and compute accounting.

use std::io::Write;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gating::{argmax, confidence};
use crate::model::MultiExitNetwork;
use crate::numerics::{Mode, Tensor};

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "EXITGATE_THREADS";

/// Samples per evaluation chunk in [`predict_dataset`].
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyExitPolicy {
    tau: f64,
}

impl EarlyExitPolicy {
    /// `tau` must lie in `[0, 1]`. At 0 every sample leaves at the first exit;
    /// at 1 only a saturated softmax can leave early.
    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::invalid(format!("tau must lie in [0,1], got {tau}")));
        }
        Ok(EarlyExitPolicy { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn takes(&self, s: f64) -> bool {
        s >= self.tau
    }
}

impl Default for EarlyExitPolicy {
    fn default() -> Self {
        EarlyExitPolicy { tau: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub predicted: usize,
    /// 1-based.
    pub exit_taken: usize,
    /// Confidence at each exit evaluated, the taken one last.
    pub confidences: Vec<f64>,
    pub cost_units: f64,
    /// Backbone blocks actually run for this sample.
    pub blocks_executed: usize,
}

/// Cumulative multiply–accumulate cost of reaching each exit: every block up
/// to the exit plus every head evaluated on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    cumulative: Vec<f64>,
}

impl CostModel {
    pub fn from_network(net: &MultiExitNetwork) -> Result<Self> {
        let blocks = net.block_macs()?;
        let heads = net.head_macs()?;
        let mut cumulative = Vec::with_capacity(heads.len());
        let mut head_total = 0u64;
        for (e, &pos) in net.exit_positions().iter().enumerate() {
            head_total += heads[e];
            let block_total: u64 = blocks[..pos].iter().sum();
            cumulative.push((block_total + head_total) as f64);
        }
        Self::from_cumulative(cumulative)
    }

    pub fn from_cumulative(cumulative: Vec<f64>) -> Result<Self> {
        if cumulative.is_empty() || cumulative[0] <= 0.0 {
            return Err(Error::invalid("exit costs must be positive"));
        }
        if cumulative.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid(format!(
                "cumulative exit costs must strictly increase: {cumulative:?}"
            )));
        }
        Ok(CostModel { cumulative })
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn at_exit(&self, exit: usize) -> f64 {
        self.cumulative[exit - 1]
    }

    pub fn full(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }
}

/// Runs one sample through the backbone, stopping at the first exit whose
/// confidence reaches `tau`; falls back to the last exit.
pub fn predict_early_exit(
    net: &mut MultiExitNetwork,
    x: &[f64],
    policy: &EarlyExitPolicy,
    cost: &CostModel,
) -> Result<InferenceResult> {
    let mut shape = vec![1];
    shape.extend(net.sample_shape());
    let mut h = Tensor::new(shape, x.to_vec())?;
    let start = net.block_executions();
    let positions = net.exit_positions().to_vec();
    let mut confidences = Vec::with_capacity(positions.len());
    let mut block = 0;
    for (e, &pos) in positions.iter().enumerate() {
        while block < pos {
            h = net.forward_block(block, &h, Mode::Eval)?;
            block += 1;
        }
        let (_, p) = net.forward_head(e, &h, Mode::Eval)?;
        let s = confidence(p.data());
        confidences.push(s);
        if policy.takes(s) || e + 1 == positions.len() {
            return Ok(InferenceResult {
                predicted: argmax(p.data()),
                exit_taken: e + 1,
                confidences,
                cost_units: cost.at_exit(e + 1),
                blocks_executed: net.block_executions() - start,
            });
        }
    }
    unreachable!("network has at least one exit")
}

/// Prediction and exit per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Routing {
    pub predicted: Vec<usize>,
    /// 1-based exit per sample.
    pub exits: Vec<usize>,
}

/// Early-exit predictions for a whole dataset. Samples are processed in
/// chunks; after each exit the chunk is compacted to the samples still
/// running, so each sample sees exactly the computation of
/// [`predict_early_exit`]. Chunks are spread over up to [`worker_threads`]
/// threads, each with its own copy of the network.
pub fn predict_dataset(
    net: &MultiExitNetwork,
    ds: &Dataset,
    policy: &EarlyExitPolicy,
) -> Result<Routing> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset(ds.provenance().to_string()));
    }
    let mut expected = net.sample_shape();
    if ds.sample_shape() != expected.as_slice() {
        expected.insert(0, ds.len());
        let mut actual = ds.sample_shape().to_vec();
        actual.insert(0, ds.len());
        return Err(Error::shape("dataset for inference", &expected, &actual));
    }
    let chunks: Vec<Vec<usize>> = (0..ds.len())
        .collect::<Vec<_>>()
        .chunks(CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    let threads = worker_threads().min(chunks.len());
    let mut routing = Routing {
        predicted: vec![0; ds.len()],
        exits: vec![0; ds.len()],
    };

    let results: Vec<Result<Vec<(usize, usize, usize)>>> = if threads <= 1 {
        let mut local = net.clone();
        vec![chunks
            .iter()
            .map(|c| route_chunk(&mut local, ds, c, policy))
            .collect::<Result<Vec<_>>>()
            .map(|v| v.concat())]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let chunks = &chunks;
                    let mut local = net.clone();
                    scope.spawn(move || {
                        let mut out = Vec::new();
                        for c in chunks.iter().skip(w).step_by(threads) {
                            out.extend(route_chunk(&mut local, ds, c, policy)?);
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    for r in results {
        for (i, pred, exit) in r? {
            routing.predicted[i] = pred;
            routing.exits[i] = exit;
        }
    }
    Ok(routing)
}

fn route_chunk(
    net: &mut MultiExitNetwork,
    ds: &Dataset,
    indices: &[usize],
    policy: &EarlyExitPolicy,
) -> Result<Vec<(usize, usize, usize)>> {
    let positions = net.exit_positions().to_vec();
    let mut out = Vec::with_capacity(indices.len());
    let mut alive: Vec<usize> = indices.to_vec();
    let mut h = ds.batch(&alive);
    let mut block = 0;
    for (e, &pos) in positions.iter().enumerate() {
        while block < pos {
            h = net.forward_block(block, &h, Mode::Eval)?;
            block += 1;
        }
        let (_, p) = net.forward_head(e, &h, Mode::Eval)?;
        let last = e + 1 == positions.len();
        let mut keep = Vec::with_capacity(alive.len());
        for (row, &i) in alive.iter().enumerate() {
            let probs = p.row(row);
            if last || policy.takes(confidence(probs)) {
                out.push((i, argmax(probs), e + 1));
            } else {
                keep.push(row);
            }
        }
        if keep.is_empty() {
            break;
        }
        if keep.len() < alive.len() {
            h = select_rows(&h, &keep);
            alive = keep.iter().map(|&r| alive[r]).collect();
        }
    }
    Ok(out)
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    let mut data = Vec::with_capacity(rows.len() * t.row_len());
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(shape, data).expect("row selection keeps the shape")
}

/// Thread cap from `EXITGATE_THREADS`; 1 when unset or unparsable.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStats {
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    /// Accuracy among the samples leaving at each exit; `None` if none did.
    pub accuracy_at_exit: Vec<Option<f64>>,
    pub cumulative_cost: Vec<f64>,
    pub routing: Routing,
}

pub fn routing_stats(
    net: &MultiExitNetwork,
    ds: &Dataset,
    policy: &EarlyExitPolicy,
    cost: &CostModel,
) -> Result<RoutingStats> {
    let routing = predict_dataset(net, ds, policy)?;
    Ok(summarize_routing(routing, ds.labels(), net.num_exits(), cost))
}

pub fn summarize_routing(
    routing: Routing,
    labels: &[usize],
    num_exits: usize,
    cost: &CostModel,
) -> RoutingStats {
    let n = routing.exits.len();
    let mut counts = vec![0usize; num_exits];
    let mut correct = vec![0usize; num_exits];
    for ((&exit, &pred), &y) in routing.exits.iter().zip(&routing.predicted).zip(labels) {
        counts[exit - 1] += 1;
        if pred == y {
            correct[exit - 1] += 1;
        }
    }
    RoutingStats {
        fractions: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        accuracy_at_exit: counts
            .iter()
            .zip(&correct)
            .map(|(&c, &k)| (c > 0).then(|| k as f64 / c as f64))
            .collect(),
        counts,
        cumulative_cost: cost.cumulative().to_vec(),
        routing,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSummary {
    pub absolute: f64,
    /// Relative to always running to the last exit.
    pub normalized: f64,
}

/// `Σ_e fraction_e · cumulative_cost_e`.
pub fn expected_cost(fractions: &[f64], cost: &CostModel) -> Result<CostSummary> {
    if fractions.len() != cost.cumulative().len() {
        return Err(Error::shape(
            "routing fractions",
            &[cost.cumulative().len()],
            &[fractions.len()],
        ));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::invalid(format!(
            "routing fractions must form a distribution (sum {total})"
        )));
    }
    let absolute: f64 = fractions
        .iter()
        .zip(cost.cumulative())
        .map(|(f, c)| f * c)
        .sum();
    Ok(CostSummary {
        absolute,
        normalized: absolute / cost.full(),
    })
}

pub const ROUTING_CSV_HEADER: &str = "exit,fraction,accuracy_at_exit,cumulative_cost_units";

/// One row per exit; an exit no sample reached has an empty accuracy field.
pub fn routing_csv(stats: &RoutingStats) -> String {
    let mut s = String::from(ROUTING_CSV_HEADER);
    s.push('\n');
    for e in 0..stats.counts.len() {
        let acc = stats.accuracy_at_exit[e].map_or(String::new(), |a| a.to_string());
        s.push_str(&format!(
            "{},{},{},{}\n",
            e + 1,
            stats.fractions[e],
            acc,
            stats.cumulative_cost[e]
        ));
    }
    s
}

pub fn write_routing_csv(stats: &RoutingStats, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(routing_csv(stats).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_mlp, MlpConfig};
    use crate::numerics::Layer;

    fn tiny(seed: u64) -> MultiExitNetwork {
        build_mlp(
            MlpConfig {
                input_dim: 4,
                width: 6,
                num_classes: 2,
                depth: 3,
                exit_positions: vec![1, 2, 3],
                dropout: 0.0,
            },
            seed,
        )
        .unwrap()
    }

    /// Makes head 1 output logits `[k·x₀, −k·x₀]` regardless of block 1.
    fn oracle_first_head(net: &mut MultiExitNetwork, k: f64) {
        for layer in &mut net.blocks_mut()[0].layers {
            if let Layer::Dense(d) = layer {
                let (out, inp) = (d.weight.shape()[0], d.weight.shape()[1]);
                for o in 0..out {
                    for i in 0..inp {
                        d.weight.data_mut()[o * inp + i] = if o == i { 1.0 } else { 0.0 };
                    }
                }
                d.bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
            }
            if let Layer::BatchNorm(bn) = layer {
                bn.running_mean.data_mut().iter_mut().for_each(|v| *v = 0.0);
                bn.running_var
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 1.0 - crate::numerics::layers::BATCH_NORM_EPS);
            }
        }
        for layer in &mut net.heads_mut()[0].layers {
            if let Layer::Dense(d) = layer {
                let inp = d.weight.shape()[1];
                d.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
                d.weight.data_mut()[0] = k;
                d.weight.data_mut()[inp] = -k;
                d.bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
            }
        }
    }

    fn toy_set() -> Dataset {
        // Label 0 ⇔ x₀ > 0; ReLU keeps x₀ only for the positive class, so the
        // negative class sits at logits (0, 0) unless x₀ is mirrored in x₁.
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..20 {
            let v = 1.0 + i as f64 / 10.0;
            f.extend([v, 0.0, 0.0, 0.0]);
            l.push(0);
        }
        Dataset::new(f, vec![4], l, 2, "toy").unwrap()
    }

    #[test]
    fn policy_validation() {
        assert!(EarlyExitPolicy::new(1.1).is_err());
        assert!(EarlyExitPolicy::new(-0.1).is_err());
        assert_eq!(EarlyExitPolicy::default().tau(), 0.9);
        let p = EarlyExitPolicy::new(0.9).unwrap();
        assert!(p.takes(0.9));
        assert!(!p.takes(0.8999));
    }

    #[test]
    fn cost_model_arithmetic() {
        let c = CostModel::from_cumulative(vec![1.0, 2.0, 3.0]).unwrap();
        let s = expected_cost(&[0.6, 0.213, 0.187], &c).unwrap();
        assert!((s.absolute - 1.587).abs() < 1e-12);
        assert_eq!(expected_cost(&[0.0, 0.0, 1.0], &c).unwrap().absolute, 3.0);
        assert_eq!(expected_cost(&[1.0, 0.0, 0.0], &c).unwrap().absolute, 1.0);
        assert_eq!(expected_cost(&[0.0, 0.0, 1.0], &c).unwrap().normalized, 1.0);
        assert!(expected_cost(&[0.5, 0.0, 0.0], &c).is_err());
        assert!(CostModel::from_cumulative(vec![1.0, 1.0]).is_err());
        assert!(CostModel::from_cumulative(vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn network_cost_model_accumulates() {
        let net = build_mlp(MlpConfig::default(), 0).unwrap();
        let c = CostModel::from_network(&net).unwrap();
        let b = net.block_macs().unwrap();
        let h = net.head_macs().unwrap();
        assert_eq!(c.at_exit(1), (b[0] + h[0]) as f64);
        assert_eq!(
            c.full(),
            (b.iter().sum::<u64>() + h.iter().sum::<u64>()) as f64
        );
    }

    #[test]
    fn oracle_head_routes_everything_to_exit_one() {
        let mut net = tiny(3);
        oracle_first_head(&mut net, 50.0);
        let ds = toy_set();
        let cost = CostModel::from_network(&net).unwrap();
        let policy = EarlyExitPolicy::default();
        for i in 0..ds.len() {
            let r = predict_early_exit(&mut net, ds.sample(i), &policy, &cost).unwrap();
            assert_eq!((r.exit_taken, r.predicted, r.blocks_executed), (1, 0, 1));
            assert_eq!(r.cost_units, cost.at_exit(1));
        }
        let stats = routing_stats(&net, &ds, &policy, &cost).unwrap();
        assert_eq!(stats.fractions, vec![1.0, 0.0, 0.0]);
        assert_eq!(stats.accuracy_at_exit[0], Some(1.0));
        assert_eq!(stats.accuracy_at_exit[1], None);
    }

    #[test]
    fn boundary_confidence_exits() {
        // x₀ = ln 9 / 2 with k = 1 gives softmax [0.9, 0.1] up to rounding.
        let mut net = tiny(3);
        oracle_first_head(&mut net, 1.0);
        let cost = CostModel::from_network(&net).unwrap();
        let x0 = 9f64.ln() / 2.0;
        let mut probe = net.clone();
        let r = predict_early_exit(&mut probe, &[x0, 0.0, 0.0, 0.0], &EarlyExitPolicy::new(0.5).unwrap(), &cost).unwrap();
        let s = r.confidences[0];
        assert!((s - 0.9).abs() < 1e-12);
        let at = predict_early_exit(&mut net, &[x0, 0.0, 0.0, 0.0], &EarlyExitPolicy::new(s).unwrap(), &cost).unwrap();
        assert_eq!(at.exit_taken, 1);
        let above = EarlyExitPolicy::new(s + 1e-9).unwrap();
        let r = predict_early_exit(&mut net, &[x0, 0.0, 0.0, 0.0], &above, &cost).unwrap();
        assert!(r.exit_taken > 1);
        assert_eq!(r.confidences.len(), r.exit_taken);
        assert!(r.confidences[..r.exit_taken - 1].iter().all(|&c| c < above.tau()));
    }

    #[test]
    fn fallback_to_last_exit() {
        let mut net = tiny(5);
        let cost = CostModel::from_network(&net).unwrap();
        let policy = EarlyExitPolicy::new(1.0).unwrap();
        let r = predict_early_exit(&mut net, &[0.1, -0.2, 0.3, 0.0], &policy, &cost).unwrap();
        assert_eq!(r.exit_taken, 3);
        assert_eq!(r.blocks_executed, 3);
        assert_eq!(r.cost_units, cost.full());
    }

    #[test]
    fn batched_routing_matches_per_sample() {
        let net = tiny(11);
        let cost = CostModel::from_network(&net).unwrap();
        let f: Vec<f64> = (0..600 * 4).map(|i| ((i * 37 % 101) as f64 - 50.0) / 10.0).collect();
        let ds = Dataset::new(f, vec![4], (0..600).map(|i| i % 2).collect(), 2, "grid").unwrap();
        for tau in [0.0, 0.55, 0.7, 1.0] {
            let policy = EarlyExitPolicy::new(tau).unwrap();
            let routing = predict_dataset(&net, &ds, &policy).unwrap();
            let mut single = net.clone();
            for i in 0..ds.len() {
                let r = predict_early_exit(&mut single, ds.sample(i), &policy, &cost).unwrap();
                assert_eq!((routing.predicted[i], routing.exits[i]), (r.predicted, r.exit_taken));
            }
            let stats = summarize_routing(routing, ds.labels(), 3, &cost);
            assert!((stats.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if tau == 0.0 {
                assert_eq!(stats.fractions, vec![1.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn csv_layout() {
        let cost = CostModel::from_cumulative(vec![1.0, 2.0]).unwrap();
        let stats = summarize_routing(
            Routing {
                predicted: vec![0, 1],
                exits: vec![1, 1],
            },
            &[0, 0],
            2,
            &cost,
        );
        assert_eq!(
            routing_csv(&stats),
            "exit,fraction,accuracy_at_exit,cumulative_cost_units\n1,1,0.5,1\n2,0,,2\n"
        );
    }
}
