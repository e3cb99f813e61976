//! Batch-serving stub with wall-clock latency statistics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{predict_batch, Batch, ModelArtifact};
use crate::synthgen::ScenarioDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p95_ms: f64,
    /// One wall time per timed repetition.
    pub samples_ms: Vec<f64>,
}

/// Nearest-rank percentile of `values` (`q` in (0, 1]).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// One warm-up pass, then `reps` timed forward passes over `batch`.
pub fn serve_batch(
    model: &ModelArtifact,
    batch: &Batch,
    reps: usize,
) -> Result<(Vec<f64>, LatencyStats)> {
    if reps < 3 {
        return Err(Error::Config(format!(
            "serve needs at least 3 repetitions, got {reps}"
        )));
    }
    let preds = predict_batch(model, batch)?;
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        let p = predict_batch(model, batch)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        if p != preds {
            return Err(Error::Data(
                "predictions changed between repetitions".into(),
            ));
        }
    }
    let mean_ms = samples.iter().sum::<f64>() / reps as f64;
    let p95_ms = percentile(&samples, 0.95);
    Ok((
        preds,
        LatencyStats {
            mean_ms,
            p95_ms,
            samples_ms: samples,
        },
    ))
}

/// A serving batch of `size` rows drawn cyclically from `rows`.
pub fn request_batch(ds: &ScenarioDataset, rows: &[usize], size: usize) -> Result<Batch> {
    if rows.is_empty() {
        return Err(Error::Data("no rows to build a request batch from".into()));
    }
    let picked: Vec<usize> = (0..size).map(|i| rows[i % rows.len()]).collect();
    Ok(Batch::from_rows(ds, &picked))
}
