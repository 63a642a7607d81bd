use genclass::conditioning::ConditioningLayout;
use genclass::{LatentTensor, NoisePredictor, NoiseSchedule, ScheduleKind, Space};
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Predicts noise as if the clean image were the prototype of the
/// conditioned class, scaled by `shrink`. Mixed conditions use the
/// row-0 weighted prototype.
pub struct PrototypePredictor {
    pub protos: Vec<LatentTensor>,
    pub alpha_bars: Vec<f64>,
    pub shrink: f64,
}

impl PrototypePredictor {
    pub fn new(k: usize, shape: (usize, usize, usize), seed: u64, s: &NoiseSchedule) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            protos: (0..k)
                .map(|_| LatentTensor::standard_normal(shape, Space::Pixel, &mut rng).scale(0.5))
                .collect(),
            alpha_bars: s.alpha_bars().to_vec(),
            shrink: 0.8,
        }
    }
}

impl NoisePredictor for PrototypePredictor {
    fn latent_shape(&self) -> (usize, usize, usize) {
        self.protos[0].shape()
    }
    fn conditioning_layout(&self) -> ConditioningLayout {
        ConditioningLayout::for_classes(self.protos.len())
    }
    fn predict_batch(&self, z: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Array2<f64> {
        let k = self.protos.len();
        let mut out = Array2::zeros(z.dim());
        for (i, row) in z.rows().into_iter().enumerate() {
            let ab = self.alpha_bars[t[i] - 1];
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (j, v) in row.iter().enumerate() {
                let mu: f64 = (0..k).map(|c| cond[[i, c]] * self.protos[c].as_slice()[j]).sum();
                out[[i, j]] = self.shrink * (v - a * mu) / b;
            }
        }
        out
    }
}

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::build(1000, ScheduleKind::default()).unwrap()
}

/// Prototype of `class` plus small Gaussian noise.
pub fn noisy_copy(p: &PrototypePredictor, class: usize, sd: f64, seed: u64) -> LatentTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proto = &p.protos[class];
    let n = LatentTensor::standard_normal(proto.shape(), Space::Pixel, &mut rng);
    proto.axpby(1.0, &n, sd).unwrap()
}
