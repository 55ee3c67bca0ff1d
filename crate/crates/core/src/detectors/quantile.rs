use serde::{Deserialize, Serialize};

use super::Flag;
use crate::error::{Error, Result};

/// Linear-interpolation quantile: sorted values, index `h = q (n - 1)`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quantile values"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile {q} outside (0, 1]"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantile values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileThreshold {
    pub quantile: f64,
    pub value: f64,
    pub calibration_size: usize,
}

impl QuantileThreshold {
    pub fn fit(scores: &[f64], q: f64) -> Result<Self> {
        Ok(Self {
            quantile: q,
            value: quantile(scores, q)?,
            calibration_size: scores.len(),
        })
    }

    /// Red iff `score > value`.
    pub fn flag(&self, score: f64) -> Flag {
        if score > self.value {
            Flag::Red
        } else {
            Flag::Green
        }
    }
}
