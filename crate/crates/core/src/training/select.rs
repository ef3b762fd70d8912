use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricOrder {
    LowerIsBetter,
    HigherIsBetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Steps of the last `k` checkpoints, oldest first.
    pub considered: Vec<u64>,
    /// Best `n` of those, best first.
    pub selected: Vec<u64>,
    pub metrics: Vec<f64>,
    pub mean_metric: f64,
}

/// Ranks the last `k` of `(step, metric)` (in step order) and keeps the best
/// `n`. Equal metrics favour the later step.
pub fn checkpoint_select(
    checkpoints: &[(u64, f64)],
    k: usize,
    n: usize,
    order: MetricOrder,
) -> Result<Selection> {
    if n == 0 || k < n {
        return Err(Error::Config(format!(
            "need 1 <= top_n <= keep_last, got {n} and {k}"
        )));
    }
    if checkpoints.len() < n {
        return Err(Error::Checkpoint(format!(
            "{} checkpoints available, {n} required",
            checkpoints.len()
        )));
    }
    let mut sorted = checkpoints.to_vec();
    sorted.sort_by_key(|c| c.0);
    let last = &sorted[sorted.len().saturating_sub(k)..];
    let mut ranked = last.to_vec();
    ranked.sort_by(|a, b| {
        let by_metric = match order {
            MetricOrder::LowerIsBetter => a.1.total_cmp(&b.1),
            MetricOrder::HigherIsBetter => b.1.total_cmp(&a.1),
        };
        by_metric.then(b.0.cmp(&a.0))
    });
    ranked.truncate(n);
    let metrics: Vec<f64> = ranked.iter().map(|c| c.1).collect();
    Ok(Selection {
        considered: last.iter().map(|c| c.0).collect(),
        selected: ranked.iter().map(|c| c.0).collect(),
        mean_metric: metrics.iter().sum::<f64>() / n as f64,
        metrics,
    })
}
