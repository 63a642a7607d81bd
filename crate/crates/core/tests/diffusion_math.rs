use std::collections::HashMap;

use genclass::conditioning::{ConditioningLayout, ConditioningMatrix};
use genclass::diffusion::{
    forward_marginal, forward_step, reverse_mean, reverse_step, sample_training_draws, strided_timesteps,
    training_loss_with_draws, TrainingExample,
};
use genclass::{LatentTensor, NoisePredictor, NoiseSchedule, ScheduleKind, Space};
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn reference() -> serde_json::Value {
    serde_json::from_str(include_str!("data/reference.json")).unwrap()
}

fn linear() -> NoiseSchedule {
    NoiseSchedule::build(
        1000,
        ScheduleKind::LinearBeta {
            beta_start: 1e-4,
            beta_end: 0.02,
        },
    )
    .unwrap()
}

#[test]
fn alpha_bar_matches_high_precision_product() {
    let s = linear();
    let r = reference();
    for (t, key) in [(1000, "linear_beta_1000_alpha_bar_last"), (500, "linear_beta_1000_alpha_bar_500")] {
        let want = r[key].as_f64().unwrap();
        let got = s.alpha_bar(t).unwrap();
        assert!(((got - want) / want).abs() <= 1e-12, "t={t}: {got} vs {want}");
    }
}

#[test]
fn alpha_bar_is_running_product_for_every_kind() {
    for kind in [
        ScheduleKind::default(),
        ScheduleKind::Cosine { s: 0.008 },
        ScheduleKind::ConstantAlpha { alpha: 0.995 },
    ] {
        let s = NoiseSchedule::build(1000, kind).unwrap();
        let mut prod = 1.0;
        for t in 1..=1000 {
            prod *= s.alpha(t).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            assert!(((ab - prod) / prod).abs() <= 1e-12);
            if t > 1 {
                assert!(ab < s.alpha_bar(t - 1).unwrap());
            }
        }
    }
}

#[test]
fn training_weight_is_min_snr() {
    let s = linear();
    for t in [1, 10, 100, 500, 1000] {
        let ab = s.alpha_bar(t).unwrap();
        let snr = ab / (1.0 - ab);
        assert_eq!(s.training_weight(t).unwrap(), (5.0 / snr).min(1.0));
    }
}

/// Composing t forward transitions has the marginal's mean and variance.
#[test]
fn forward_composition_matches_marginal_monte_carlo() {
    let s = linear();
    let z0 = LatentTensor::from_vec((1, 1, 3), vec![1.0, -0.5, 0.25], Space::Pixel).unwrap();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for t in [1, 20, 150] {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let mut z = z0.clone();
            for step in 1..=t {
                z = forward_step(&z, step, &s, &mut rng).unwrap();
            }
            for (i, v) in z.as_slice().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let ab = s.alpha_bar(t).unwrap();
        let var_true = 1.0 - ab;
        for i in 0..3 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let mean_true = ab.sqrt() * z0.as_slice()[i];
            let se_mean = (var_true / n as f64).sqrt();
            let se_var = var_true * (2.0 / (n - 1) as f64).sqrt();
            assert!((mean - mean_true).abs() < 3.0 * se_mean, "t={t} mean {mean} vs {mean_true}");
            assert!((var - var_true).abs() < 3.0 * se_var, "t={t} var {var} vs {var_true}");
        }
    }
}

/// Returns the exact noise used to build each z_t, looked up by the bits of
/// the noised input.
struct OraclePredictor {
    shape: (usize, usize, usize),
    layout: ConditioningLayout,
    table: HashMap<Vec<u64>, Vec<f64>>,
}

impl NoisePredictor for OraclePredictor {
    fn latent_shape(&self) -> (usize, usize, usize) {
        self.shape
    }
    fn conditioning_layout(&self) -> ConditioningLayout {
        self.layout
    }
    fn predict_batch(&self, z: ArrayView2<f64>, _t: &[usize], _cond: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(z.dim());
        for (i, row) in z.rows().into_iter().enumerate() {
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            let eps = &self.table[&key];
            out.row_mut(i).assign(&ndarray::ArrayView1::from(eps.as_slice()));
        }
        out
    }
}

#[test]
fn oracle_predictor_has_zero_loss() {
    let s = linear();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = (1, 4, 4);
    let layout = ConditioningLayout::for_classes(3);
    let batch: Vec<TrainingExample> = (0..16)
        .map(|i| TrainingExample {
            z0: LatentTensor::standard_normal(shape, Space::Pixel, &mut rng),
            condition: ConditioningMatrix::one_hot(i % 3, layout).unwrap(),
        })
        .collect();
    let draws = sample_training_draws(&batch, &s, &mut rng);
    let mut table = HashMap::new();
    for (ex, d) in batch.iter().zip(&draws) {
        let z_t = forward_marginal(&ex.z0, d.t, &d.eps, &s).unwrap();
        table.insert(
            z_t.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            d.eps.as_slice().to_vec(),
        );
    }
    let oracle = OraclePredictor { shape, layout, table };
    assert_eq!(training_loss_with_draws(&batch, &draws, &oracle, &s).unwrap(), 0.0);
}

/// With the true noise, the reverse mean equals the closed-form posterior
/// mean of q(z_{t-1} | z_t, z0).
#[test]
fn reverse_mean_with_true_noise_is_posterior_mean() {
    let s = linear();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z0 = LatentTensor::standard_normal((1, 2, 2), Space::Pixel, &mut rng);
    for t in [2, 50, 999] {
        let eps = LatentTensor::standard_normal((1, 2, 2), Space::Pixel, &mut rng);
        let z_t = forward_marginal(&z0, t, &eps, &s).unwrap();
        let (a, ab, ab_prev) = (s.alpha(t).unwrap(), s.alpha_bar(t).unwrap(), s.alpha_bar(t - 1).unwrap());
        let c0 = ab_prev.sqrt() * (1.0 - a) / (1.0 - ab);
        let ct = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let want = z0.axpby(c0, &z_t, ct).unwrap();
        let got = reverse_mean(&z_t, &eps, a, ab).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-10, "t={t}");
    }
}

struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn latent_shape(&self) -> (usize, usize, usize) {
        (1, 2, 2)
    }
    fn conditioning_layout(&self) -> ConditioningLayout {
        ConditioningLayout::for_classes(2)
    }
    fn predict_batch(&self, z: ArrayView2<f64>, _t: &[usize], _c: ArrayView2<f64>) -> Array2<f64> {
        Array2::zeros(z.dim())
    }
}

#[test]
fn final_reverse_step_is_deterministic_mean() {
    let s = linear();
    let c = ConditioningMatrix::one_hot(0, ZeroPredictor.conditioning_layout()).unwrap();
    let z = LatentTensor::from_vec((1, 2, 2), vec![0.1, 0.2, 0.3, 0.4], Space::Pixel).unwrap();
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(2);
    let a = reverse_step(&z, 1, &c, &ZeroPredictor, &s, &mut r1).unwrap();
    let b = reverse_step(&z, 1, &c, &ZeroPredictor, &s, &mut r2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, z.scale(1.0 / s.alpha(1).unwrap().sqrt()));
    let noisy = reverse_step(&z, 2, &c, &ZeroPredictor, &s, &mut r1).unwrap();
    assert_ne!(noisy, reverse_step(&z, 2, &c, &ZeroPredictor, &s, &mut r2).unwrap());
}

#[test]
fn strided_sampler_visits_expected_steps() {
    assert_eq!(strided_timesteps(1000, 4).unwrap(), vec![1000, 750, 500, 250]);
    assert_eq!(strided_timesteps(5, 5).unwrap(), vec![5, 4, 3, 2, 1]);
    assert_eq!(strided_timesteps(1000, 50).unwrap().len(), 50);
    assert!(strided_timesteps(10, 0).is_err());
    assert!(strided_timesteps(10, 11).is_err());
}
