use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Gap between the two smallest per-class mean errors.
pub fn model_confidence(per_class_mean_error: &[f64]) -> Result<f64> {
    if per_class_mean_error.len() < 2 {
        return Err(invalid("confidence needs at least two classes"));
    }
    let (mut a, mut b) = (f64::INFINITY, f64::INFINITY);
    for &e in per_class_mean_error {
        if e < a {
            b = a;
            a = e;
        } else if e < b {
            b = e;
        }
    }
    Ok(b - a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedConfidences {
    pub values: Vec<f64>,
    /// Set when every raw confidence was zero; values are then all zero.
    pub all_zero: bool,
}

/// Divides each raw confidence by the set maximum.
pub fn normalize_confidences(raws: &[f64]) -> Result<NormalizedConfidences> {
    if raws.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(invalid("raw confidences must be finite and non-negative"));
    }
    let max = raws.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        if !raws.is_empty() {
            log::warn!("all raw confidences are zero");
        }
        return Ok(NormalizedConfidences {
            values: vec![0.0; raws.len()],
            all_zero: true,
        });
    }
    Ok(NormalizedConfidences {
        values: raws.iter().map(|r| r / max).collect(),
        all_zero: false,
    })
}
