//! Reference forecasters used to judge trained models.

use nalgebra::{DMatrix, DVector};
use samba_core::data::{FeatureFrame, Sample};

/// Predicts that each target return equals the return realized one day earlier.
///
/// Samples must come from `frame`; a target with no earlier return gets 0.
pub fn persistence(frame: &FeatureFrame, samples: &[Sample]) -> Vec<f64> {
    samples
        .iter()
        .map(|s| {
            let t = s.target_index;
            if t >= 2 {
                let c = &frame.close;
                (c[t - 1] - c[t - 2]) / c[t - 2]
            } else {
                0.0
            }
        })
        .collect()
}

/// Least-squares linear model on the flattened window plus an intercept.
#[derive(Debug, Clone)]
pub struct LinearBaseline {
    coef: DVector<f64>,
}

fn design(samples: &[Sample]) -> DMatrix<f64> {
    let width = samples[0].x.len() + 1;
    DMatrix::from_fn(samples.len(), width, |i, j| if j == 0 { 1.0 } else { samples[i].x.data()[j - 1] })
}

impl LinearBaseline {
    /// Ordinary least squares via SVD; `None` when there are fewer samples
    /// than coefficients, where the problem has no unique solution.
    pub fn fit(samples: &[Sample]) -> Option<Self> {
        let first = samples.first()?;
        if samples.len() <= first.x.len() {
            return None;
        }
        let x = design(samples);
        let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.target));
        let coef = x.svd(true, true).solve(&y, 1e-12).ok()?;
        Some(Self { coef })
    }

    pub fn coefficients(&self) -> &[f64] {
        self.coef.as_slice()
    }

    pub fn predict(&self, samples: &[Sample]) -> Vec<f64> {
        if samples.is_empty() {
            return Vec::new();
        }
        (design(samples) * &self.coef).iter().copied().collect()
    }
}
