use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

/// ROC analysis with normals as the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub auc: f64,
    /// (fpr, tpr) from (0, 0) to (1, 1).
    pub roc: Vec<(f64, f64)>,
    pub kde_normal: KdeCurve,
    pub kde_abnormal: KdeCurve,
    pub n_normal: usize,
    pub n_abnormal: usize,
}

/// Twice the Mann-Whitney count: 2 per (pos > neg) pair, 1 per tie.
fn doubled_wins_sorted(pos: &[f64], neg: &[f64]) -> u128 {
    let mut neg_sorted = neg.to_vec();
    neg_sorted.sort_by(f64::total_cmp);
    let mut total: u128 = 0;
    for &p in pos {
        let below = neg_sorted.partition_point(|&n| n < p);
        let not_above = neg_sorted.partition_point(|&n| n <= p);
        total += 2 * below as u128 + (not_above - below) as u128;
    }
    total
}

/// O(n²) pairwise AUC, used as an oracle.
pub fn auc_pairwise(pos: &[f64], neg: &[f64]) -> f64 {
    let mut total: u128 = 0;
    for &p in pos {
        for &n in neg {
            total += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    total as f64 / (2 * pos.len() * neg.len()) as f64
}

/// Silverman's rule of thumb: 0.9 min(sd, IQR/1.34) n^(-1/5).
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 1.0;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (n - 1.0) * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        s[lo] + (h - lo as f64) * (s[hi] - s[lo])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1e-3
    }
}

/// Gaussian KDE evaluated on `points` equally spaced values covering the
/// data ±4 bandwidths.
pub fn kde(xs: &[f64], points: usize) -> Result<KdeCurve> {
    if xs.is_empty() || points < 2 {
        return Err(invalid("KDE needs data and at least two evaluation points"));
    }
    let h = silverman_bandwidth(xs);
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min) - 4.0 * h;
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;
    let norm = 1.0 / (xs.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let x: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let density = x
        .iter()
        .map(|&g| xs.iter().map(|&v| (-0.5 * ((g - v) / h).powi(2)).exp()).sum::<f64>() * norm)
        .collect();
    Ok(KdeCurve { bandwidth: h, x, density })
}

/// AUC (Mann-Whitney with ties counted ½), threshold-sweep ROC and KDEs.
/// `scores_pos` are the normal items.
pub fn roc_auc(scores_pos: &[f64], scores_neg: &[f64]) -> Result<AnomalyReport> {
    if scores_pos.is_empty() || scores_neg.is_empty() {
        return Err(invalid("ROC needs at least one score in each group"));
    }
    if scores_pos.iter().chain(scores_neg).any(|v| v.is_nan()) {
        return Err(invalid("scores contain NaN"));
    }
    let auc = doubled_wins_sorted(scores_pos, scores_neg) as f64 / (2 * scores_pos.len() * scores_neg.len()) as f64;

    let mut all: Vec<(f64, bool)> = scores_pos
        .iter()
        .map(|&v| (v, true))
        .chain(scores_neg.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (scores_pos.len() as f64, scores_neg.len() as f64);
    let mut roc = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push((fp as f64 / nn, tp as f64 / np));
    }
    Ok(AnomalyReport {
        auc,
        roc,
        kde_normal: kde(scores_pos, 200)?,
        kde_abnormal: kde(scores_neg, 200)?,
        n_normal: scores_pos.len(),
        n_abnormal: scores_neg.len(),
    })
}

/// Trapezoid area under a ROC polyline.
pub fn trapezoid_auc(roc: &[(f64, f64)]) -> f64 {
    roc.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}
