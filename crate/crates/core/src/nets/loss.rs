//! Binary cross-entropy losses on probability vectors.

use serde::{Deserialize, Serialize};

use super::graph::PROB_EPS;

#[inline]
fn clamp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean of `-(t ln p + (1 - t) ln(1 - p))` with `p` clamped to
/// `[1e-7, 1 - 1e-7]`. Targets may be soft (any value in `[0, 1]`).
pub fn binary_cross_entropy(probs: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(probs.len(), targets.len(), "length mismatch");
    if probs.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = clamp(p);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    total / probs.len() as f64
}

/// Mean binary cross-entropy against hard `{0, 1}` labels.
pub fn ce_loss(probs: &[f64], labels: &[f64]) -> f64 {
    binary_cross_entropy(probs, labels)
}

/// Hard-label cross-entropy plus `delta` times the cross-entropy against
/// the teacher's probabilities used as soft targets.
pub fn distill_loss(student: &[f64], teacher: &[f64], labels: &[f64], delta: f64) -> f64 {
    let hard = ce_loss(student, labels);
    if delta == 0.0 {
        return hard;
    }
    let teacher: Vec<f64> = teacher.iter().map(|&q| clamp(q)).collect();
    hard + delta * binary_cross_entropy(student, &teacher)
}

/// Which objective a training run minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Ce,
    /// Requires teacher probabilities aligned with the training rows.
    Distill {
        delta: f64,
    },
}
