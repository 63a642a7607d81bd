use serde::{Deserialize, Serialize};

use super::stats::paired_t_test;
use super::ClassifierConfig;

/// A class removed from the candidate set, with its mean normalized error
/// frozen at the moment of removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub draw: usize,
    pub class: usize,
    pub frozen_mean: f64,
    pub p_value: f64,
}

/// Per-class histories of normalized errors plus the surviving class set.
#[derive(Debug, Clone)]
pub struct TrialAccumulator {
    histories: Vec<Vec<f64>>,
    active: Vec<bool>,
    draws_used: usize,
    frozen: Vec<Option<f64>>,
    events: Vec<PruneEvent>,
}

impl TrialAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            histories: vec![Vec::new(); num_classes],
            active: vec![true; num_classes],
            draws_used: 0,
            frozen: vec![None; num_classes],
            events: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.histories.len()
    }

    pub fn draws_used(&self) -> usize {
        self.draws_used
    }

    pub fn active_classes(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&c| self.active[c]).collect()
    }

    pub fn is_active(&self, class: usize) -> bool {
        self.active[class]
    }

    pub fn history(&self, class: usize) -> &[f64] {
        &self.histories[class]
    }

    pub fn events(&self) -> &[PruneEvent] {
        &self.events
    }

    /// Appends one draw. `values[i]` belongs to `active_classes()[i]`.
    pub fn push(&mut self, values: &[f64]) {
        let active = self.active_classes();
        assert_eq!(values.len(), active.len(), "one value per active class");
        for (&c, &v) in active.iter().zip(values) {
            self.histories[c].push(v);
        }
        self.draws_used += 1;
    }

    /// Mean of a class's history; frozen classes report their frozen mean.
    pub fn mean(&self, class: usize) -> f64 {
        if let Some(m) = self.frozen[class] {
            return m;
        }
        let h = &self.histories[class];
        if h.is_empty() {
            return f64::INFINITY;
        }
        h.iter().sum::<f64>() / h.len() as f64
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.num_classes()).map(|c| self.mean(c)).collect()
    }

    /// Active class with the smallest mean; ties go to the lowest index.
    pub fn best_active(&self) -> usize {
        let mut best = None;
        for c in self.active_classes() {
            let m = self.mean(c);
            match best {
                None => best = Some((c, m)),
                Some((_, bm)) if m < bm => best = Some((c, m)),
                _ => {}
            }
        }
        best.expect("active set is never empty").0
    }

    /// Removes every active class whose history is significantly worse than
    /// the current best under a one-sided paired t-test. Does nothing before
    /// `min_iters` draws. Returns the removed classes.
    pub fn prune(&mut self, cfg: &ClassifierConfig) -> Vec<usize> {
        if self.draws_used < cfg.min_iters || self.draws_used < 2 {
            return Vec::new();
        }
        let best = self.best_active();
        let mut removed = Vec::new();
        for c in self.active_classes() {
            if c == best {
                continue;
            }
            let p = paired_t_test(&self.histories[c], &self.histories[best])
                .expect("active histories share the draw count");
            if p <= cfg.p_value {
                removed.push((c, p));
            }
        }
        for &(c, p) in &removed {
            let m = self.mean(c);
            self.frozen[c] = Some(m);
            self.active[c] = false;
            self.events.push(PruneEvent {
                draw: self.draws_used,
                class: c,
                frozen_mean: m,
                p_value: p,
            });
        }
        removed.into_iter().map(|(c, _)| c).collect()
    }

    /// Gap between the two smallest per-class means. With a single surviving
    /// class the runner-up is the best class removed in the final pruning
    /// step; with a single class overall the gap is 0.
    pub fn confidence_gap(&self) -> f64 {
        if self.num_classes() < 2 {
            return 0.0;
        }
        let active = self.active_classes();
        if active.len() >= 2 {
            let mut ms: Vec<f64> = active.iter().map(|&c| self.mean(c)).collect();
            ms.sort_by(f64::total_cmp);
            return ms[1] - ms[0];
        }
        let survivor = self.mean(active[0]);
        let last_draw = self.events.last().map(|e| e.draw);
        let runner_up = self
            .events
            .iter()
            .filter(|e| Some(e.draw) == last_draw)
            .map(|e| e.frozen_mean)
            .fold(f64::INFINITY, f64::min);
        if runner_up.is_finite() {
            runner_up - survivor
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cfg(p: f64) -> ClassifierConfig {
        ClassifierConfig {
            p_value: p,
            ..ClassifierConfig::default()
        }
    }

    #[test]
    fn warm_up_guard_blocks_pruning() {
        let mut acc = TrialAccumulator::new(3);
        for i in 0..19 {
            acc.push(&[0.0, 10.0 + i as f64, 20.0]);
        }
        assert!(acc.prune(&cfg(0.5)).is_empty());
        assert_eq!(acc.active_classes(), vec![0, 1, 2]);
    }

    #[test]
    fn threshold_one_prunes_all_but_best() {
        let mut acc = TrialAccumulator::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.1).unwrap();
        for _ in 0..20 {
            acc.push(&[
                1.0 + noise.sample(&mut rng),
                0.5 + noise.sample(&mut rng),
                1.5 + noise.sample(&mut rng),
                2.0 + noise.sample(&mut rng),
            ]);
        }
        let removed = acc.prune(&cfg(1.0));
        assert_eq!(removed, vec![0, 2, 3]);
        assert_eq!(acc.active_classes(), vec![1]);
        let gap = acc.confidence_gap();
        assert!((gap - (acc.mean(0) - acc.mean(1))).abs() < 1e-12);
        assert!(gap > 0.0);
    }

    #[test]
    fn clearly_worse_class_is_pruned_and_near_ties_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut acc = TrialAccumulator::new(3);
        for _ in 0..40 {
            let shared = noise.sample(&mut rng);
            acc.push(&[
                shared + 0.3 * noise.sample(&mut rng),
                shared + 0.01 + 0.3 * noise.sample(&mut rng),
                shared + 5.0 * 0.3 + 0.3 * noise.sample(&mut rng),
            ]);
        }
        let removed = acc.prune(&cfg(2e-3));
        assert_eq!(removed, vec![2]);
        assert_eq!(acc.active_classes(), vec![0, 1]);
        // pruned classes never rejoin and histories stay aligned
        for _ in 0..5 {
            acc.push(&[0.0, 0.0]);
        }
        assert_eq!(acc.history(0).len(), acc.draws_used());
        assert_eq!(acc.history(1).len(), acc.draws_used());
        assert!(!acc.is_active(2));
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let mut acc = TrialAccumulator::new(3);
        acc.push(&[1.0, 1.0, 1.0]);
        acc.push(&[2.0, 2.0, 2.0]);
        assert_eq!(acc.best_active(), 0);
        assert_eq!(acc.confidence_gap(), 0.0);
    }
}
