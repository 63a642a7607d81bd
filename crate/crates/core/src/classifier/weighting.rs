//! Per-draw error weighting and normalization strategies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{min_snr_weight, NoiseSchedule};

/// Coefficients of the quartic fitted to the spread of squared errors over
/// normalized time; the weight is its reciprocal.
pub const POLYNOMIAL_COEFFS: [f64; 5] = [0.927, 9.837, -4.684, 6.019, -9.340];

/// Number of time buckets used by the learned logistic weighting.
pub const LOGISTIC_BUCKETS: usize = 20;

pub const DEFAULT_EXP_DECAY: f64 = 5.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightingStrategy {
    CustomPolynomial,
    LogisticLearned { bucket_weights: Vec<f64> },
    NormalizedPerDraw,
    Ranking,
    Uniform,
    Snr,
    ExpDecay { k: f64 },
}

impl Default for WeightingStrategy {
    fn default() -> Self {
        WeightingStrategy::CustomPolynomial
    }
}

/// f(u) = 0.927 + 9.837u - 4.684u^2 + 6.019u^3 - 9.340u^4.
pub fn polynomial(u: f64) -> f64 {
    POLYNOMIAL_COEFFS.iter().rev().fold(0.0, |acc, c| acc * u + c)
}

/// Bucket index in 0..LOGISTIC_BUCKETS for timestep t of T.
pub fn time_bucket(t: usize, total: usize) -> usize {
    (((t.saturating_sub(1)) * LOGISTIC_BUCKETS) / total.max(1)).min(LOGISTIC_BUCKETS - 1)
}

impl WeightingStrategy {
    /// Parses a CLI name. The learned strategy needs fitted weights and is
    /// not constructible by name.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "custom_polynomial" | "polynomial" => WeightingStrategy::CustomPolynomial,
            "normalized_per_draw" | "normalized" => WeightingStrategy::NormalizedPerDraw,
            "ranking" => WeightingStrategy::Ranking,
            "uniform" => WeightingStrategy::Uniform,
            "snr" => WeightingStrategy::Snr,
            "exp_decay" => WeightingStrategy::ExpDecay {
                k: DEFAULT_EXP_DECAY,
            },
            other => return Err(Error::Config(format!("unknown weighting {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightingStrategy::CustomPolynomial => "custom_polynomial",
            WeightingStrategy::LogisticLearned { .. } => "logistic_learned",
            WeightingStrategy::NormalizedPerDraw => "normalized_per_draw",
            WeightingStrategy::Ranking => "ranking",
            WeightingStrategy::Uniform => "uniform",
            WeightingStrategy::Snr => "snr",
            WeightingStrategy::ExpDecay { .. } => "exp_decay",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            WeightingStrategy::LogisticLearned { bucket_weights } => {
                if bucket_weights.len() != LOGISTIC_BUCKETS
                    || bucket_weights.iter().any(|w| !(w.is_finite() && *w > 0.0))
                {
                    return Err(Error::Config(format!(
                        "logistic weighting needs {LOGISTIC_BUCKETS} positive bucket weights"
                    )));
                }
            }
            WeightingStrategy::ExpDecay { k } if !k.is_finite() => {
                return Err(Error::Config("exp_decay k must be finite".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Scalar weight applied to every class's error at timestep t, or `None`
    /// for the strategies that normalize across classes instead.
    pub fn scalar_weight(&self, t: usize, s: &NoiseSchedule) -> Result<Option<f64>> {
        let u = t as f64 / s.steps() as f64;
        Ok(match self {
            WeightingStrategy::CustomPolynomial => Some(1.0 / polynomial(u)),
            WeightingStrategy::LogisticLearned { bucket_weights } => {
                Some(bucket_weights[time_bucket(t, s.steps())])
            }
            WeightingStrategy::Uniform => Some(1.0),
            WeightingStrategy::Snr => Some(min_snr_weight(s.snr(t)?)),
            WeightingStrategy::ExpDecay { k } => Some((-k * u).exp()),
            WeightingStrategy::NormalizedPerDraw | WeightingStrategy::Ranking => None,
        })
    }

    /// Normalizes one draw's errors (one entry per candidate class).
    pub fn normalize(&self, t: usize, errors: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
        s.check_t(t)?;
        if let Some(w) = self.scalar_weight(t, s)? {
            return Ok(errors.iter().map(|e| e * w).collect());
        }
        Ok(match self {
            WeightingStrategy::NormalizedPerDraw => standardize(errors),
            WeightingStrategy::Ranking => average_ranks(errors),
            _ => unreachable!("scalar strategies handled above"),
        })
    }
}

/// Affine map to mean 0, population standard deviation 1. Zero variance maps
/// to all zeros.
pub fn standardize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return Vec::new();
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return vec![0.0; xs.len()];
    }
    let sd = var.sqrt();
    xs.iter().map(|x| (x - mean) / sd).collect()
}

/// Ranks 1..=n in ascending order; ties share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One calibration observation for the learned weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub t: usize,
    pub error: f64,
    pub is_correct_class: bool,
}

/// Fits per-bucket weights by logistic regression of "is the correct class"
/// on the bucket-specific error, `logit = a - sum_b beta_b * error * [bucket = b]`.
///
/// The fitted slopes (clamped at zero, with a small floor) become the bucket
/// weights, rescaled to mean 1. Without any signal all slopes vanish and the
/// weights are uniform.
pub fn fit_logistic_weights(calibration: &[CalibrationPoint], total_steps: usize) -> Result<WeightingStrategy> {
    let mut counts = [0usize; LOGISTIC_BUCKETS];
    for p in calibration {
        if p.t == 0 || p.t > total_steps {
            return Err(Error::InvalidArgument(format!("calibration timestep {} out of range", p.t)));
        }
        counts[time_bucket(p.t, total_steps)] += 1;
    }
    if let Some(b) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InsufficientData(format!(
            "calibration has no observations in time bucket {b}"
        )));
    }

    // Standardize errors within each bucket so slopes are comparable and do
    // not trade off against the shared intercept; slopes are mapped back to
    // the raw error scale afterwards.
    let mut mean = [0.0f64; LOGISTIC_BUCKETS];
    let mut scale = [0.0f64; LOGISTIC_BUCKETS];
    for p in calibration {
        mean[time_bucket(p.t, total_steps)] += p.error;
    }
    for (m, c) in mean.iter_mut().zip(counts) {
        *m /= c as f64;
    }
    for p in calibration {
        let b = time_bucket(p.t, total_steps);
        scale[b] += (p.error - mean[b]).powi(2);
    }
    for (s, c) in scale.iter_mut().zip(counts) {
        let sd = (*s / c as f64).sqrt();
        *s = if sd > 1e-12 { sd } else { 1.0 };
    }

    // Parameters: [intercept, beta_0 .. beta_19].
    let dim = LOGISTIC_BUCKETS + 1;
    let ridge = 1e-2;
    let mut theta = vec![0.0f64; dim];
    for _ in 0..100 {
        let mut grad = vec![0.0f64; dim];
        let mut hess = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        for p in calibration {
            let b = time_bucket(p.t, total_steps);
            let x = (p.error - mean[b]) / scale[b];
            let logit = theta[0] - theta[1 + b] * x;
            let prob = 1.0 / (1.0 + (-logit).exp());
            let y = if p.is_correct_class { 1.0 } else { 0.0 };
            let r = y - prob;
            let wgt = prob * (1.0 - prob);
            // d logit / d theta: [1, -x at 1+b]
            grad[0] += r;
            grad[1 + b] -= r * x;
            hess[(0, 0)] += wgt;
            hess[(0, 1 + b)] -= wgt * x;
            hess[(1 + b, 0)] -= wgt * x;
            hess[(1 + b, 1 + b)] += wgt * x * x;
        }
        for j in 1..dim {
            grad[j] -= ridge * theta[j];
            hess[(j, j)] += ridge;
        }
        hess[(0, 0)] += 1e-12;
        let g = nalgebra::DVector::from_vec(grad.clone());
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => break,
        };
        let mut max_step: f64 = 0.0;
        for j in 0..dim {
            theta[j] += step[j];
            max_step = max_step.max(step[j].abs());
        }
        if max_step < 1e-10 {
            break;
        }
    }

    let slopes: Vec<f64> = (0..LOGISTIC_BUCKETS)
        .map(|b| theta[1 + b].max(0.0) / scale[b])
        .collect();
    let max_slope = slopes.iter().cloned().fold(0.0, f64::max);
    let weights: Vec<f64> = if max_slope <= 1e-9 {
        vec![1.0; LOGISTIC_BUCKETS]
    } else {
        let floor = 1e-3 * max_slope;
        let raw: Vec<f64> = slopes.iter().map(|s| s + floor).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        raw.iter().map(|w| w / mean).collect()
    };
    Ok(WeightingStrategy::LogisticLearned {
        bucket_weights: weights,
    })
}
