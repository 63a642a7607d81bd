//! Variance schedules for the forward diffusion process.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Parametric family a schedule is built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// beta_t linearly spaced from `beta_start` to `beta_end`, alpha_t = 1 - beta_t.
    LinearBeta { beta_start: f64, beta_end: f64 },
    /// Cosine alpha-bar curve with offset `s`; betas clipped at 0.999.
    Cosine { s: f64 },
    /// Every step uses the same alpha.
    ConstantAlpha { alpha: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::LinearBeta {
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleKind {
    /// Parses a schedule name as used in config files. Parameters take their
    /// usual defaults.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear_beta" | "linear" => Ok(ScheduleKind::default()),
            "cosine" => Ok(ScheduleKind::Cosine { s: 0.008 }),
            "constant_alpha" => Ok(ScheduleKind::ConstantAlpha { alpha: 0.99 }),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::LinearBeta { .. } => "linear_beta",
            ScheduleKind::Cosine { .. } => "cosine",
            ScheduleKind::ConstantAlpha { .. } => "constant_alpha",
        }
    }
}

/// Per-step alphas and their cumulative products. Timesteps are 1-based:
/// `alpha(1)` is the first forward step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        let alpha: Vec<f64> = match kind {
            ScheduleKind::LinearBeta {
                beta_start,
                beta_end,
            } => (0..steps)
                .map(|i| {
                    let frac = if steps == 1 {
                        0.0
                    } else {
                        i as f64 / (steps - 1) as f64
                    };
                    1.0 - (beta_start + (beta_end - beta_start) * frac)
                })
                .collect(),
            ScheduleKind::Cosine { s } => {
                if !(s > 0.0) {
                    return Err(invalid("cosine offset must be positive"));
                }
                let f = |t: f64| {
                    let x = (t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=steps)
                    .map(|t| {
                        let beta = (1.0 - f(t as f64) / f((t - 1) as f64)).min(0.999);
                        1.0 - beta
                    })
                    .collect()
            }
            ScheduleKind::ConstantAlpha { alpha } => vec![alpha; steps],
        };
        Self::from_alphas(kind, alpha)
    }

    fn from_alphas(kind: ScheduleKind, alpha: Vec<f64>) -> Result<Self> {
        if let Some((i, a)) = alpha
            .iter()
            .enumerate()
            .find(|(_, a)| !(**a > 0.0 && **a < 1.0))
        {
            return Err(invalid(format!(
                "alpha at step {} is {a}, must lie in (0, 1)",
                i + 1
            )));
        }
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        if alpha_bar.last().is_some_and(|&ab| ab <= 0.0) {
            return Err(invalid("cumulative alpha underflows to zero"));
        }
        Ok(Self {
            kind,
            alpha,
            alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    /// Signal-to-noise ratio alpha_bar / (1 - alpha_bar).
    pub fn snr(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(snr_from_alpha_bar(ab))
    }

    /// Min-SNR loss weight min{5 / SNR(t), 1}.
    pub fn training_weight(&self, t: usize) -> Result<f64> {
        Ok(min_snr_weight(self.snr(t)?))
    }
}

pub fn snr_from_alpha_bar(alpha_bar: f64) -> f64 {
    alpha_bar / (1.0 - alpha_bar)
}

pub fn min_snr_weight(snr: f64) -> f64 {
    (5.0 / snr).min(1.0)
}
