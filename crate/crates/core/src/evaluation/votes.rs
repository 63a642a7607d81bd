use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::manifest::{Annotation, ConfidenceLevel};
use crate::error::{invalid, Result};

/// Modal label; ties go to the most senior rater's label among the tied
/// classes (then to the first such rater in input order).
pub fn majority_vote(labels: &[(String, f64)]) -> Result<String> {
    if labels.is_empty() {
        return Err(invalid("majority vote needs at least one label"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (l, _) in labels {
        *counts.entry(l.as_str()).or_default() += 1;
    }
    let top = *counts.values().max().expect("non-empty");
    let tied: Vec<&str> = counts.iter().filter(|(_, &c)| c == top).map(|(l, _)| *l).collect();
    if tied.len() == 1 {
        return Ok(tied[0].to_string());
    }
    let mut best: Option<&(String, f64)> = None;
    for entry in labels.iter().filter(|(l, _)| tied.contains(&l.as_str())) {
        if best.is_none_or(|b| entry.1 > b.1) {
            best = Some(entry);
        }
    }
    Ok(best.expect("tied label present").0.clone())
}

/// 4×4 agreement counts over confidence levels, ordered High, Moderate,
/// Low, None.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfidenceMatrix {
    pub levels: [ConfidenceLevel; 4],
    /// Each unordered pair counted once in its (min, max) cell.
    pub counts: [[u64; 4]; 4],
    /// Symmetric display copy: off-diagonal counts mirrored.
    pub display: [[u64; 4]; 4],
    pub total: u64,
}

pub fn confidence_confusion_matrix(pairs: &[(ConfidenceLevel, ConfidenceLevel)]) -> ConfidenceMatrix {
    let mut counts = [[0u64; 4]; 4];
    for &(a, b) in pairs {
        let (i, j) = (a.index(), b.index());
        counts[i.min(j)][i.max(j)] += 1;
    }
    let mut display = counts;
    for i in 0..4 {
        for j in (i + 1)..4 {
            display[j][i] = counts[i][j];
        }
    }
    ConfidenceMatrix {
        levels: ConfidenceLevel::ALL,
        counts,
        display,
        total: pairs.len() as u64,
    }
}

/// All unordered rater pairs of confidence levels within one item.
pub fn pairwise_levels(annotations: &[Annotation]) -> Vec<(ConfidenceLevel, ConfidenceLevel)> {
    let mut out = Vec::new();
    for i in 0..annotations.len() {
        for j in (i + 1)..annotations.len() {
            out.push((annotations[i].confidence, annotations[j].confidence));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(v: &[(&str, f64)]) -> Vec<(String, f64)> {
        v.iter().map(|(a, b)| (a.to_string(), *b)).collect()
    }

    #[test]
    fn vote_examples() {
        assert_eq!(majority_vote(&l(&[("A", 1.0), ("A", 2.0)])).unwrap(), "A");
        assert_eq!(majority_vote(&l(&[("A", 1.0), ("A", 2.0), ("B", 40.0)])).unwrap(), "A");
        assert_eq!(majority_vote(&l(&[("A", 5.0), ("B", 34.0)])).unwrap(), "B");
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn pair_counting() {
        let ann: Vec<Annotation> = (0..6)
            .map(|i| Annotation {
                rater_id: format!("r{i}"),
                label: "x".into(),
                confidence: ConfidenceLevel::High,
            })
            .collect();
        let mut pairs = Vec::new();
        for _ in 0..200 {
            pairs.extend(pairwise_levels(&ann));
        }
        let m = confidence_confusion_matrix(&pairs);
        assert_eq!(m.total, 3000);
        assert_eq!(m.counts[0][0], 3000);
    }
}
