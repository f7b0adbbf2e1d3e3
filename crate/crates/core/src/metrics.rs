//! Forecast accuracy: RMSE, Pearson IC and Spearman rank IC.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction and target lengths differ ({pred} vs {target})")]
    LengthMismatch { pred: usize, target: usize },
    #[error("need at least 2 points, got {0}")]
    TooShort(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub rmse: f64,
    pub ic: f64,
    pub ric: f64,
    /// Set when either series is constant; `ic` and `ric` are then 0.
    #[serde(skip)]
    pub degenerate: bool,
}

pub fn rmse(pred: &[f64], target: &[f64]) -> f64 {
    let sq: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    (sq / pred.len() as f64).sqrt()
}

/// Pearson correlation, `None` if either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Metrics over one series; constant inputs give `ic = ric = 0` and set the flag.
pub fn evaluate(pred: &[f64], target: &[f64]) -> Result<Metrics, MetricsError> {
    if pred.len() != target.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if pred.len() < 2 {
        return Err(MetricsError::TooShort(pred.len()));
    }
    let ic = pearson(pred, target);
    let ric = spearman(pred, target);
    Ok(Metrics {
        rmse: rmse(pred, target),
        ic: ic.unwrap_or(0.0),
        ric: ric.unwrap_or(0.0),
        degenerate: ic.is_none() || ric.is_none(),
    })
}
