//! Confusion matrices, macro-averaged scores and the evaluation report.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{
    expected_cost, predict_dataset, summarize_routing, CostModel, EarlyExitPolicy, RoutingStats,
};
use crate::model::MultiExitNetwork;

/// `counts[t·C + p]` = samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if classes == 0 || counts.len() != classes * classes {
            return Err(Error::invalid(format!(
                "{} counts for a {classes}×{classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }
}

pub fn confusion(predicted: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predicted.is_empty() {
        return Err(Error::invalid("confusion matrix of no samples"));
    }
    if predicted.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&p, &t) in predicted.iter().zip(labels) {
        if p >= classes || t >= classes {
            return Err(Error::invalid(format!(
                "class index ({t}, {p}) outside [0, {classes})"
            )));
        }
        counts[t * classes + p] += 1;
    }
    ConfusionMatrix::from_counts(classes, counts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassScores>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Unweighted class means of precision, recall and F1. A quantity whose
/// denominator is zero scores 0 for that class.
pub fn macro_scores(cm: &ConfusionMatrix) -> MacroScores {
    let c = cm.classes();
    let per_class: Vec<ClassScores> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k) as f64;
            let predicted: f64 = (0..c).map(|t| cm.get(t, k) as f64).sum();
            let actual: f64 = (0..c).map(|p| cm.get(k, p) as f64).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            ClassScores {
                precision,
                recall,
                f1: ratio(2.0 * precision * recall, precision + recall),
            }
        })
        .collect();
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    MacroScores {
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        f1: mean(|s| s.f1),
        per_class,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub accuracy: f64,
    pub routing: RoutingStats,
    pub expected_cost: f64,
    pub normalized_cost: f64,
}

impl EvalReport {
    pub fn exit_fractions(&self) -> &[f64] {
        &self.routing.fractions
    }
}

/// Early-exit predictions on `ds`, scored by the exit each sample took.
pub fn evaluate(
    net: &MultiExitNetwork,
    ds: &Dataset,
    policy: &EarlyExitPolicy,
    cost: &CostModel,
) -> Result<EvalReport> {
    let routing = predict_dataset(net, ds, policy)?;
    let cm = confusion(&routing.predicted, ds.labels(), ds.num_classes())?;
    let scores = macro_scores(&cm);
    let stats = summarize_routing(routing, ds.labels(), net.num_exits(), cost);
    let c = expected_cost(&stats.fractions, cost)?;
    Ok(EvalReport {
        macro_f1: scores.f1,
        macro_precision: scores.precision,
        macro_recall: scores.recall,
        accuracy: cm.correct() as f64 / cm.total() as f64,
        routing: stats,
        expected_cost: c.absolute,
        normalized_cost: c.normalized,
    })
}

/// Row identity for the report CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportLabels {
    pub dataset: String,
    pub task: String,
    pub backbone: String,
    pub model: String,
}

/// Header for `num_exits` exits; scores and routing are percentages.
pub fn report_csv_header(num_exits: usize) -> String {
    let mut cols = vec![
        "dataset".to_string(),
        "task".into(),
        "backbone".into(),
        "model".into(),
        "f1".into(),
        "precision".into(),
        "recall".into(),
    ];
    cols.extend((1..=num_exits).map(|e| format!("exit_{e}")));
    cols.extend(["accuracy", "expected_cost", "normalized_cost"].map(String::from));
    cols.join(",")
}

pub fn report_csv_row(labels: &ReportLabels, r: &EvalReport) -> String {
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let mut cols = vec![
        labels.dataset.clone(),
        labels.task.clone(),
        labels.backbone.clone(),
        labels.model.clone(),
        pct(r.macro_f1),
        pct(r.macro_precision),
        pct(r.macro_recall),
    ];
    cols.extend(r.routing.fractions.iter().map(|&f| pct(f)));
    cols.push(pct(r.accuracy));
    cols.push(format!("{:.0}", r.expected_cost));
    cols.push(format!("{:.4}", r.normalized_cost));
    cols.join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_cases() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(t, p), u64::from(t == p));
            }
        }
        assert!(confusion(&[], &[], 3).is_err());
        let cm = confusion(&[0, 0], &[0, 1], 2).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(1, 0), cm.get(0, 1), cm.get(1, 1)), (1, 1, 0, 0));
        assert!(confusion(&[0, 3], &[0, 1], 2).is_err());
        assert!(confusion(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn two_class_scores() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2]).unwrap();
        let s = macro_scores(&cm);
        let p: Vec<f64> = s.per_class.iter().map(|c| c.precision).collect();
        let r: Vec<f64> = s.per_class.iter().map(|c| c.recall).collect();
        let f: Vec<f64> = s.per_class.iter().map(|c| c.f1).collect();
        assert_eq!(p, vec![1.0, 2.0 / 3.0]);
        assert_eq!(r, vec![0.5, 1.0]);
        assert!((f[0] - 2.0 / 3.0).abs() < 1e-15 && (f[1] - 0.8).abs() < 1e-15);
        assert!((s.f1 - 0.733_333_333_333_333_3).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_absent_classes() {
        let s = macro_scores(&confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap());
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = macro_scores(&confusion(&[0, 1], &[0, 1], 3).unwrap());
        assert_eq!(s.per_class[2], ClassScores { precision: 0.0, recall: 0.0, f1: 0.0 });
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn csv_header_order() {
        assert_eq!(
            report_csv_header(3),
            "dataset,task,backbone,model,f1,precision,recall,exit_1,exit_2,exit_3,accuracy,expected_cost,normalized_cost"
        );
    }

    fn pairs() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(0usize..4, n),
                proptest::collection::vec(0usize..4, n),
            )
        })
    }

    proptest! {
        #[test]
        fn relabeling_invariance((p, t) in pairs(), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
            let a = macro_scores(&confusion(&p, &t, 4).unwrap());
            let pp: Vec<usize> = p.iter().map(|&v| perm[v]).collect();
            let tp: Vec<usize> = t.iter().map(|&v| perm[v]).collect();
            let b = macro_scores(&confusion(&pp, &tp, 4).unwrap());
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
            prop_assert!((a.precision - b.precision).abs() < 1e-12);
            prop_assert!((a.recall - b.recall).abs() < 1e-12);
        }

        #[test]
        fn macro_f1_within_class_range((p, t) in pairs()) {
            let s = macro_scores(&confusion(&p, &t, 4).unwrap());
            let lo = s.per_class.iter().map(|c| c.f1).fold(f64::INFINITY, f64::min);
            let hi = s.per_class.iter().map(|c| c.f1).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo - 1e-12 <= s.f1 && s.f1 <= hi + 1e-12);
            for v in [s.f1, s.precision, s.recall] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn order_independent((p, t) in pairs()) {
            let a = confusion(&p, &t, 4).unwrap();
            let b = confusion(
                &p.iter().rev().copied().collect::<Vec<_>>(),
                &t.iter().rev().copied().collect::<Vec<_>>(),
                4,
            ).unwrap();
            prop_assert_eq!(a.total(), p.len() as u64);
            prop_assert_eq!(a, b);
        }
    }
}
