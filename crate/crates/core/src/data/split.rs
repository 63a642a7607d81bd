use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Item indices for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        m.entry(l).or_default().push(i);
    }
    m
}

/// Stratified k-fold split. Each fold's test set is one stratum slice; the
/// remaining items are divided 80/20 into train and validation per class.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(invalid("k-fold split needs k >= 2"));
    }
    if k > labels.len() {
        return Err(invalid(format!("k = {k} exceeds dataset size {}", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; labels.len()];
    let mut groups = by_class(labels);
    let mut next = 0usize;
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        for &i in idx.iter() {
            assignment[i] = next % k;
            next += 1;
        }
    }
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let mut fold = Fold {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for idx in groups.values() {
            let rest: Vec<usize> = idx.iter().copied().filter(|&i| assignment[i] != f).collect();
            fold.test.extend(idx.iter().copied().filter(|&i| assignment[i] == f));
            let n_val = (rest.len() as f64 * 0.2).round() as usize;
            fold.val.extend(&rest[..n_val]);
            fold.train.extend(&rest[n_val..]);
        }
        fold.train.sort_unstable();
        fold.val.sort_unstable();
        fold.test.sort_unstable();
        folds.push(fold);
    }
    Ok(folds)
}

/// Exactly `n` items per class, chosen uniformly without replacement from
/// `seed`. Returned indices are sorted.
pub fn subsample_per_class(labels: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (class, mut idx) in by_class(labels) {
        if idx.len() < n {
            return Err(Error::InsufficientData(format!(
                "class {class} has {} items, fewer than {n}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        out.extend(idx.into_iter().take(n));
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_items_and_tests_are_disjoint() {
        let labels: Vec<usize> = (0..53).map(|i| i % 3).collect();
        let folds = kfold_split(&labels, 5, 7).unwrap();
        let mut seen = vec![0; labels.len()];
        for f in &folds {
            for &i in &f.test {
                seen[i] += 1;
            }
            let mut all: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn subsample_is_balanced_and_deterministic() {
        let labels: Vec<usize> = (0..100).map(|i| if i < 70 { 0 } else { 1 }).collect();
        let a = subsample_per_class(&labels, 10, 1).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, subsample_per_class(&labels, 10, 1).unwrap());
        assert_eq!(a.iter().filter(|&&i| labels[i] == 0).count(), 10);
        let err = subsample_per_class(&labels, 50, 1).unwrap_err().to_string();
        assert!(err.contains("class 1"), "{err}");
    }
}
