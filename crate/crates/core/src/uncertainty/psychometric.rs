//! Psychometric function fitting by grid-based Bayesian inference.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous};

use crate::error::{invalid, Error, Result};

/// Logistic steepness for a width measured between S = 0.05 and S = 0.95.
fn slope(w: f64) -> f64 {
    2.0 * 19f64.ln() / w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsychometricParams {
    /// Threshold: S(m) = 0.5.
    pub m: f64,
    /// Width between S = 0.05 and S = 0.95.
    pub w: f64,
    /// Guess rate (lower asymptote).
    pub gamma: f64,
    /// Lapse rate (1 - upper asymptote).
    pub lambda: f64,
}

impl PsychometricParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0) || self.gamma < 0.0 || self.lambda < 0.0 || self.gamma + self.lambda >= 1.0 {
            return Err(invalid("psychometric parameters need w > 0, gamma, lambda >= 0 and gamma + lambda < 1"));
        }
        Ok(())
    }

    /// Unscaled logistic sigmoid S(x; m, w).
    pub fn sigmoid(&self, x: f64) -> f64 {
        1.0 / (1.0 + (-slope(self.w) * (x - self.m)).exp())
    }

    /// psi(x) = gamma + (1 - gamma - lambda) S(x).
    pub fn value(&self, x: f64) -> f64 {
        self.gamma + (1.0 - self.gamma - self.lambda) * self.sigmoid(x)
    }

    /// Stimulus where the unscaled sigmoid reaches 0.8.
    pub fn threshold80(&self) -> f64 {
        threshold80(self.m, self.w)
    }
}

fn threshold80(m: f64, w: f64) -> f64 {
    m + w * 4f64.ln() / (2.0 * 19f64.ln())
}

/// Per-bin trial counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub center: f64,
    pub n_trials: u64,
    pub n_correct: u64,
}

/// Equal-width bins over [0, 1]; values outside are clamped to the end
/// bins. Empty bins are omitted.
pub fn bin_performance(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<Vec<Bin>> {
    if confidences.len() != correct.len() {
        return Err(invalid("confidences and correctness flags differ in length"));
    }
    if n_bins < 2 {
        return Err(invalid("need at least two bins"));
    }
    let mut trials = vec![0u64; n_bins];
    let mut hits = vec![0u64; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !c.is_finite() {
            return Err(invalid("confidence is not finite"));
        }
        let b = ((c.clamp(0.0, 1.0) * n_bins as f64) as usize).min(n_bins - 1);
        trials[b] += 1;
        hits[b] += ok as u64;
    }
    Ok((0..n_bins)
        .filter(|&b| trials[b] > 0)
        .map(|b| Bin {
            center: (b as f64 + 0.5) / n_bins as f64,
            n_trials: trials[b],
            n_correct: hits[b],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub grid_m: usize,
    pub grid_w: usize,
    pub grid_lambda: usize,
    pub lambda_max: f64,
    /// Beta prior parameters for the lapse rate.
    pub lambda_beta: (f64, f64),
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            grid_m: 60,
            grid_w: 60,
            grid_lambda: 30,
            lambda_max: 0.5,
            lambda_beta: (1.0, 10.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CredibleInterval {
    pub lo: f64,
    pub hi: f64,
}

impl CredibleInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsychometricPosterior {
    pub m_grid: Vec<f64>,
    pub w_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub gamma: f64,
    /// Normalized posterior mass, indexed [m][w][lambda] flattened.
    pub posterior: Vec<f64>,
    /// Prior mass on the same grid (normalized).
    pub prior: Vec<f64>,
    pub marginal_m: Vec<f64>,
    pub marginal_w: Vec<f64>,
    pub marginal_lambda: Vec<f64>,
    pub ci95_m: CredibleInterval,
    pub ci95_w: CredibleInterval,
    pub ci95_lambda: CredibleInterval,
    pub ci95_threshold80: CredibleInterval,
    pub map_estimate: PsychometricParams,
    pub bins: Vec<Bin>,
    /// Every bin is all-correct or all-wrong, so the width is not identified.
    pub width_unidentifiable: bool,
    kl_from_prior: f64,
}

impl PsychometricPosterior {
    /// KL divergence of the posterior from the prior (nats), measured on
    /// the full-support coarse grid.
    pub fn kl_from_prior(&self) -> f64 {
        self.kl_from_prior
    }

    pub fn threshold80_map(&self) -> f64 {
        self.map_estimate.threshold80()
    }
}

/// Sum of p log(p/q) over cells with p > 0.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Flat on [lo, hi], raised-cosine falloff to 0 at `lo - fall_lo` and
/// `hi + fall_hi`.
fn plateau(x: f64, lo: f64, hi: f64, fall_lo: f64, fall_hi: f64) -> f64 {
    if x >= lo && x <= hi {
        1.0
    } else if x < lo {
        let d = (lo - x) / fall_lo;
        if d >= 1.0 || fall_lo <= 0.0 {
            0.0
        } else {
            0.5 * (1.0 + (std::f64::consts::PI * d).cos())
        }
    } else {
        let d = (x - hi) / fall_hi;
        if d >= 1.0 || fall_hi <= 0.0 {
            0.0
        } else {
            0.5 * (1.0 + (std::f64::consts::PI * d).cos())
        }
    }
}

/// Equal-tail interval for point masses at sorted `values`, taking the
/// first value whose cumulative mass reaches each tail.
fn equal_tail_points(values: &[f64], mass: &[f64], level: f64) -> CredibleInterval {
    let tail = (1.0 - level) / 2.0;
    let mut cum = 0.0;
    let mut lo = values[0];
    for (v, p) in values.iter().zip(mass) {
        cum += p;
        if cum >= tail {
            lo = *v;
            break;
        }
    }
    cum = 0.0;
    let mut hi = values[values.len() - 1];
    for (v, p) in values.iter().zip(mass).rev() {
        cum += p;
        if cum >= tail {
            hi = *v;
            break;
        }
    }
    CredibleInterval { lo, hi }
}

/// Equal-tail interval on a uniform grid, treating each grid point's mass
/// as spread evenly over its cell. Bounds are clamped to the grid range.
fn equal_tail_cells(grid: &[f64], mass: &[f64], level: f64) -> CredibleInterval {
    let step = grid[1] - grid[0];
    let tail = (1.0 - level) / 2.0;
    let quantile = |q: f64| {
        let mut cum = 0.0;
        for (g, p) in grid.iter().zip(mass) {
            if *p > 0.0 && cum + p >= q {
                let frac = (q - cum) / p;
                return g - step / 2.0 + step * frac;
            }
            cum += p;
        }
        grid[grid.len() - 1]
    };
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    CredibleInterval {
        lo: quantile(tail).clamp(lo, hi),
        hi: quantile(1.0 - tail).clamp(lo, hi),
    }
}

/// Range of grid points carrying non-negligible marginal mass, padded by
/// one grid step.
fn support(grid: &[f64], mass: &[f64]) -> (f64, f64) {
    const EPS: f64 = 1e-6;
    let mut cum = 0.0;
    let mut first = 0;
    for (i, p) in mass.iter().enumerate() {
        cum += p;
        if cum > EPS {
            first = i;
            break;
        }
    }
    cum = 0.0;
    let mut last = grid.len() - 1;
    for (i, p) in mass.iter().enumerate().rev() {
        cum += p;
        if cum > EPS {
            last = i;
            break;
        }
    }
    let lo = first.saturating_sub(1);
    let hi = (last + 1).min(grid.len() - 1);
    if hi <= lo {
        return (grid[0], grid[grid.len() - 1]);
    }
    (grid[lo], grid[hi])
}

/// Grid posterior over (m, w, lambda) with gamma fixed and a binomial
/// likelihood per bin.
pub fn fit_psychometric(bins: &[Bin], gamma: f64, priors: &PriorSpec) -> Result<PsychometricPosterior> {
    let mut sorted = bins.to_vec();
    sorted.sort_by(|a, b| {
        a.center
            .total_cmp(&b.center)
            .then(a.n_trials.cmp(&b.n_trials))
            .then(a.n_correct.cmp(&b.n_correct))
    });
    let bins = sorted.as_slice();
    if bins.len() < 2 {
        return Err(Error::InsufficientData("psychometric fit needs at least two occupied bins".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid("gamma must lie in [0, 1)"));
    }
    if bins.iter().any(|b| b.n_correct > b.n_trials || !b.center.is_finite()) {
        return Err(invalid("bin has more correct answers than trials"));
    }
    if priors.grid_m < 2 || priors.grid_w < 2 || priors.grid_lambda < 1 {
        return Err(invalid("grid too small"));
    }
    if !(0.0..1.0 - gamma).contains(&priors.lambda_max) {
        return Err(invalid("lambda_max must keep gamma + lambda below 1"));
    }
    let mut xs: Vec<f64> = bins.iter().map(|b| b.center).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 2 {
        return Err(Error::InsufficientData("bins must cover at least two stimulus levels".into()));
    }
    let (xmin, xmax) = (xs[0], xs[xs.len() - 1]);
    let range = xmax - xmin;
    let spacing = xs.windows(2).map(|p| p[1] - p[0]).fold(f64::INFINITY, f64::min);

    let beta = Beta::new(priors.lambda_beta.0, priors.lambda_beta.1).map_err(|e| invalid(e.to_string()))?;
    let w_lo = (2.0 * spacing).min(range);
    let prior_fns = PriorFns {
        m: Box::new(move |m| plateau(m, xmin, xmax, range / 2.0, range / 2.0)),
        w: Box::new(move |w| plateau(w, w_lo, range, w_lo - spacing, 2.0 * range)),
        lambda: Box::new(move |l| {
            let d = beta.pdf(l);
            if d.is_finite() {
                d
            } else {
                0.0
            }
        }),
    };

    // Coarse pass over the full prior support, then a pass of the same
    // resolution restricted to where the coarse posterior has mass.
    let coarse = GridEval::run(
        bins,
        gamma,
        &prior_fns,
        linspace(xmin - range / 2.0, xmax + range / 2.0, priors.grid_m),
        linspace(spacing, 3.0 * range, priors.grid_w),
        linspace(0.0, priors.lambda_max, priors.grid_lambda),
    )?;
    let (m_lo, m_hi) = support(&coarse.m_grid, &coarse.marginal_m);
    let (w_lo, w_hi) = support(&coarse.w_grid, &coarse.marginal_w);
    let (l_lo, l_hi) = support(&coarse.lambda_grid, &coarse.marginal_lambda);
    let g = GridEval::run(
        bins,
        gamma,
        &prior_fns,
        linspace(m_lo, m_hi, priors.grid_m),
        linspace(w_lo, w_hi, priors.grid_w),
        linspace(l_lo, l_hi, priors.grid_lambda),
    )?;

    let width_unidentifiable = bins.iter().all(|b| b.n_correct == 0 || b.n_correct == b.n_trials);
    if width_unidentifiable {
        log::warn!("every bin is all-correct or all-wrong; width is not identified");
    }
    let cells = |grid: &[f64], mass: &[f64]| {
        if grid.len() > 1 && grid[1] > grid[0] {
            equal_tail_cells(grid, mass, 0.95)
        } else {
            equal_tail_points(grid, mass, 0.95)
        }
    };
    Ok(PsychometricPosterior {
        ci95_m: cells(&g.m_grid, &g.marginal_m),
        ci95_w: cells(&g.w_grid, &g.marginal_w),
        ci95_lambda: cells(&g.lambda_grid, &g.marginal_lambda),
        ci95_threshold80: equal_tail_points(&g.t80_values, &g.t80_mass, 0.95),
        map_estimate: PsychometricParams {
            m: g.m_grid[g.map.0],
            w: g.w_grid[g.map.1],
            gamma,
            lambda: g.lambda_grid[g.map.2],
        },
        m_grid: g.m_grid,
        w_grid: g.w_grid,
        lambda_grid: g.lambda_grid,
        gamma,
        posterior: g.posterior,
        prior: g.prior,
        marginal_m: g.marginal_m,
        marginal_w: g.marginal_w,
        marginal_lambda: g.marginal_lambda,
        bins: bins.to_vec(),
        width_unidentifiable,
        kl_from_prior: kl(&coarse.posterior, &coarse.prior),
    })
}

type PriorFn = Box<dyn Fn(f64) -> f64>;

struct PriorFns {
    m: PriorFn,
    w: PriorFn,
    lambda: PriorFn,
}

/// Normalized posterior and prior on one (m, w, lambda) grid.
struct GridEval {
    m_grid: Vec<f64>,
    w_grid: Vec<f64>,
    lambda_grid: Vec<f64>,
    posterior: Vec<f64>,
    prior: Vec<f64>,
    marginal_m: Vec<f64>,
    marginal_w: Vec<f64>,
    marginal_lambda: Vec<f64>,
    map: (usize, usize, usize),
    t80_values: Vec<f64>,
    t80_mass: Vec<f64>,
}

impl GridEval {
    fn run(
        bins: &[Bin],
        gamma: f64,
        priors: &PriorFns,
        m_grid: Vec<f64>,
        w_grid: Vec<f64>,
        lambda_grid: Vec<f64>,
    ) -> Result<Self> {
        let m_prior: Vec<f64> = m_grid.iter().map(|&m| (priors.m)(m)).collect();
        let w_prior: Vec<f64> = w_grid.iter().map(|&w| (priors.w)(w)).collect();
        let l_prior: Vec<f64> = lambda_grid.iter().map(|&l| (priors.lambda)(l)).collect();
        let (nm, nw, nl) = (m_grid.len(), w_grid.len(), lambda_grid.len());
        let idx = |i: usize, j: usize, k: usize| (i * nw + j) * nl + k;
        let mut log_post = vec![f64::NEG_INFINITY; nm * nw * nl];
        let mut prior = vec![0.0; nm * nw * nl];
        for (i, &m) in m_grid.iter().enumerate() {
            for (j, &w) in w_grid.iter().enumerate() {
                let curve = PsychometricParams {
                    m,
                    w,
                    gamma,
                    lambda: 0.0,
                };
                let sig: Vec<f64> = bins.iter().map(|b| curve.sigmoid(b.center)).collect();
                for (k, &l) in lambda_grid.iter().enumerate() {
                    let p0 = m_prior[i] * w_prior[j] * l_prior[k];
                    prior[idx(i, j, k)] = p0;
                    if p0 <= 0.0 {
                        continue;
                    }
                    let mut ll = 0.0;
                    for (b, s) in bins.iter().zip(&sig) {
                        let psi = (gamma + (1.0 - gamma - l) * s).clamp(1e-300, 1.0);
                        let q = (1.0 - psi).max(0.0);
                        let miss = b.n_trials - b.n_correct;
                        if b.n_correct > 0 {
                            ll += b.n_correct as f64 * psi.ln();
                        }
                        if miss > 0 {
                            ll += if q > 0.0 { miss as f64 * q.ln() } else { f64::NEG_INFINITY };
                        }
                    }
                    log_post[idx(i, j, k)] = ll + p0.ln();
                }
            }
        }
        let max = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InsufficientData("posterior has no support on the grid".into()));
        }
        let mut posterior: Vec<f64> = log_post.iter().map(|lp| (lp - max).exp()).collect();
        let z: f64 = posterior.iter().sum();
        posterior.iter_mut().for_each(|p| *p /= z);
        let zp: f64 = prior.iter().sum();
        prior.iter_mut().for_each(|p| *p /= zp);

        let mut marginal_m = vec![0.0; nm];
        let mut marginal_w = vec![0.0; nw];
        let mut marginal_lambda = vec![0.0; nl];
        let mut map = (0, 0, 0);
        let mut best = -1.0;
        let mut t80: Vec<(f64, f64)> = Vec::with_capacity(nm * nw);
        for i in 0..nm {
            for j in 0..nw {
                let mut cell = 0.0;
                for k in 0..nl {
                    let p = posterior[idx(i, j, k)];
                    marginal_m[i] += p;
                    marginal_w[j] += p;
                    marginal_lambda[k] += p;
                    cell += p;
                    if p > best {
                        best = p;
                        map = (i, j, k);
                    }
                }
                t80.push((threshold80(m_grid[i], w_grid[j]), cell));
            }
        }
        t80.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (t80_values, t80_mass): (Vec<f64>, Vec<f64>) = t80.into_iter().unzip();
        Ok(Self {
            m_grid,
            w_grid,
            lambda_grid,
            posterior,
            prior,
            marginal_m,
            marginal_w,
            marginal_lambda,
            map,
            t80_values,
            t80_mass,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_limits() {
        let p = PsychometricParams {
            m: 0.4,
            w: 0.2,
            gamma: 0.1,
            lambda: 0.0,
        };
        assert!((p.value(0.4) - 0.55).abs() < 1e-15);
        assert!((p.value(-1e3) - 0.1).abs() < 1e-12);
        let q = PsychometricParams { lambda: 0.05, ..p };
        assert!((q.value(1e3) - 0.95).abs() < 1e-12);
        assert!((p.sigmoid(0.3) - 0.05).abs() < 1e-12);
        assert!((p.sigmoid(0.5) - 0.95).abs() < 1e-12);
        assert!((p.sigmoid(p.threshold80()) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn binning() {
        let bins = bin_performance(&[1.0; 10], &[true; 10], 25).unwrap();
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].n_trials, 10);
        assert!(bin_performance(&[0.5], &[], 5).is_err());
        assert!(bin_performance(&[0.5], &[true], 1).is_err());
    }

    #[test]
    fn map_inside_interval_and_reorder_invariant() {
        let truth = PsychometricParams {
            m: 0.5,
            w: 0.3,
            gamma: 0.1,
            lambda: 0.02,
        };
        let bins: Vec<Bin> = (0..10)
            .map(|i| {
                let x = (i as f64 + 0.5) / 10.0;
                let n = 50;
                Bin {
                    center: x,
                    n_trials: n,
                    n_correct: (truth.value(x) * n as f64).round() as u64,
                }
            })
            .collect();
        let prior = PriorSpec {
            grid_m: 30,
            grid_w: 30,
            grid_lambda: 10,
            ..PriorSpec::default()
        };
        let fit = fit_psychometric(&bins, 0.1, &prior).unwrap();
        assert!(fit.ci95_m.contains(fit.map_estimate.m));
        assert!(fit.ci95_w.contains(fit.map_estimate.w));
        assert!(fit.ci95_lambda.contains(fit.map_estimate.lambda));
        assert!((fit.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut rev = bins.clone();
        rev.reverse();
        let fit2 = fit_psychometric(&rev, 0.1, &prior).unwrap();
        assert_eq!(fit.map_estimate, fit2.map_estimate);
        assert_eq!(fit.ci95_m, fit2.ci95_m);
    }
}
