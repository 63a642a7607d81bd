use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Two-sided 95% standard normal quantile.
pub const Z_95: f64 = 1.959963984540054;

/// Wilson score interval for `successes` out of `n`.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> Result<(f64, f64)> {
    if n == 0 || successes > n {
        return Err(invalid("Wilson interval needs 0 <= successes <= n and n > 0"));
    }
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    Ok(((centre - half).max(0.0), (centre + half).min(1.0)))
}

/// One real-vs-synthetic judgment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub item_id: String,
    #[serde(default)]
    pub rater_id: Option<String>,
    pub truth_is_real: Option<bool>,
    pub guessed_real: bool,
    #[serde(default)]
    pub intended_class: Option<String>,
    #[serde(default)]
    pub guessed_class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterBreakdown {
    pub n: u64,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuringReport {
    pub n: u64,
    pub n_real: u64,
    pub n_synthetic: u64,
    pub n_correct: u64,
    pub accuracy: f64,
    /// P(guessed real | real); `None` without real items.
    pub sensitivity: Option<f64>,
    /// P(guessed synthetic | synthetic); `None` without synthetic items.
    pub specificity: Option<f64>,
    pub ci95: (f64, f64),
    /// P(guessed class = intended class | synthetic), over synthetic items
    /// that carry both labels.
    pub agreement_rate: Option<f64>,
    pub per_rater: BTreeMap<String, RaterBreakdown>,
}

struct Counts {
    tp: u64,
    n_real: u64,
    tn: u64,
    n_synth: u64,
}

impl Counts {
    fn add(&mut self, truth: bool, guess: bool) {
        if truth {
            self.n_real += 1;
            self.tp += guess as u64;
        } else {
            self.n_synth += 1;
            self.tn += !guess as u64;
        }
    }

    fn ratio(a: u64, b: u64) -> Option<f64> {
        (b > 0).then(|| a as f64 / b as f64)
    }
}

pub fn turing_metrics(judgments: &[Judgment]) -> Result<TuringReport> {
    if judgments.is_empty() {
        return Err(invalid("no judgments"));
    }
    let mut all = Counts {
        tp: 0,
        n_real: 0,
        tn: 0,
        n_synth: 0,
    };
    let mut raters: BTreeMap<String, Counts> = BTreeMap::new();
    let (mut agree, mut agree_n) = (0u64, 0u64);
    for j in judgments {
        let truth = j
            .truth_is_real
            .ok_or_else(|| invalid(format!("item {} has no truth label", j.item_id)))?;
        all.add(truth, j.guessed_real);
        if let Some(r) = &j.rater_id {
            raters
                .entry(r.clone())
                .or_insert(Counts {
                    tp: 0,
                    n_real: 0,
                    tn: 0,
                    n_synth: 0,
                })
                .add(truth, j.guessed_real);
        }
        if !truth {
            if let (Some(a), Some(b)) = (&j.intended_class, &j.guessed_class) {
                agree_n += 1;
                agree += (a == b) as u64;
            }
        }
    }
    let n = all.n_real + all.n_synth;
    let n_correct = all.tp + all.tn;
    Ok(TuringReport {
        n,
        n_real: all.n_real,
        n_synthetic: all.n_synth,
        n_correct,
        accuracy: n_correct as f64 / n as f64,
        sensitivity: Counts::ratio(all.tp, all.n_real),
        specificity: Counts::ratio(all.tn, all.n_synth),
        ci95: wilson_interval(n_correct, n, Z_95)?,
        agreement_rate: Counts::ratio(agree, agree_n),
        per_rater: raters
            .into_iter()
            .map(|(id, c)| {
                let n = c.n_real + c.n_synth;
                (
                    id,
                    RaterBreakdown {
                        n,
                        accuracy: (c.tp + c.tn) as f64 / n as f64,
                        sensitivity: Counts::ratio(c.tp, c.n_real),
                        specificity: Counts::ratio(c.tn, c.n_synth),
                    },
                )
            })
            .collect(),
    })
}
