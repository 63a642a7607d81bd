use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exec::derive_seed;
use crate::tensor::{LatentTensor, Space};

use super::image_io::save_image;
use super::manifest::{DatasetManifest, ManifestRecord, Split};

/// Procedural cell-like class templates. Every class is a soft disk on a
/// bright background; they differ in nucleus shape and granule texture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyClassStyle {
    /// Many small dark granules, no nucleus.
    FineGranular,
    /// Larger bright granules on a darker body, no nucleus.
    CoarseGranular,
    /// One large dark round nucleus.
    RoundNucleus,
    /// Two dark lobes on a random axis.
    Bilobed,
    /// Annular nucleus.
    Ring,
    /// Small dense body with fine texture.
    SmallDense,
}

impl ToyClassStyle {
    pub const ALL: [ToyClassStyle; 6] = [
        ToyClassStyle::FineGranular,
        ToyClassStyle::CoarseGranular,
        ToyClassStyle::RoundNucleus,
        ToyClassStyle::Bilobed,
        ToyClassStyle::Ring,
        ToyClassStyle::SmallDense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ToyClassStyle::FineGranular => "fine_granular",
            ToyClassStyle::CoarseGranular => "coarse_granular",
            ToyClassStyle::RoundNucleus => "round_nucleus",
            ToyClassStyle::Bilobed => "bilobed",
            ToyClassStyle::Ring => "ring",
            ToyClassStyle::SmallDense => "small_dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub classes: Vec<ToyClassStyle>,
    pub per_class: usize,
    pub image_size: usize,
    /// Maximum centre offset in pixels at 32×32, scaled with image size.
    pub position_jitter: f64,
    pub noise_std: f64,
    /// Train/val/test fractions per class; test gets the remainder.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl ToyDatasetSpec {
    /// The first `k` built-in class styles.
    pub fn new(k: usize, per_class: usize, seed: u64) -> Result<Self> {
        if k == 0 || k > ToyClassStyle::ALL.len() {
            return Err(invalid(format!("toy dataset supports 1..={} classes", ToyClassStyle::ALL.len())));
        }
        Ok(Self {
            classes: ToyClassStyle::ALL[..k].to_vec(),
            per_class,
            image_size: 32,
            position_jitter: 1.5,
            noise_std: 0.02,
            train_fraction: 0.7,
            val_fraction: 0.1,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.per_class == 0 {
            return Err(invalid("toy dataset needs at least one class and one image per class"));
        }
        if self.image_size < 8 {
            return Err(invalid("toy images must be at least 8×8"));
        }
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.train_fraction) || !ok(self.val_fraction) || self.train_fraction + self.val_fraction > 1.0 {
            return Err(invalid("split fractions must be in [0, 1] and sum to at most 1"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name().to_string()).collect()
    }

    /// Deterministic image `index` of class `class`.
    pub fn render(&self, class: usize, index: usize) -> LatentTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, (class as u64) << 32 | index as u64));
        render_toy_image(self.classes[class], self.image_size, self.position_jitter, self.noise_std, &mut rng)
    }

    /// Split assignment for every image index of one class.
    pub fn splits_for_class(&self, class: usize) -> Vec<Split> {
        let n = self.per_class;
        let n_train = (n as f64 * self.train_fraction).round() as usize;
        let n_val = ((n as f64 * self.val_fraction).round() as usize).min(n - n_train);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed ^ 0x5711_7000, class as u64));
        order.shuffle(&mut rng);
        let mut out = vec![Split::Test; n];
        for (rank, &i) in order.iter().enumerate() {
            out[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        out
    }
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(size: usize, fill: f64) -> Self {
        Self {
            size,
            px: vec![fill; size * size],
        }
    }

    /// Blends `value` into pixels by soft coverage of a disk.
    fn disk(&mut self, cy: f64, cx: f64, r: f64, value: f64) {
        self.paint(|y, x| r - ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() + 0.5, value);
    }

    fn annulus(&mut self, cy: f64, cx: f64, r_in: f64, r_out: f64, value: f64) {
        self.paint(
            |y, x| {
                let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                (r_out - d + 0.5).min(d - r_in + 0.5)
            },
            value,
        );
    }

    fn paint(&mut self, coverage: impl Fn(f64, f64) -> f64, value: f64) {
        for y in 0..self.size {
            for x in 0..self.size {
                let a = coverage(y as f64, x as f64).clamp(0.0, 1.0);
                if a > 0.0 {
                    let p = &mut self.px[y * self.size + x];
                    *p = (1.0 - a) * *p + a * value;
                }
            }
        }
    }

    /// Adds a Gaussian spot of peak `delta`.
    fn spot(&mut self, cy: f64, cx: f64, sigma: f64, delta: f64) {
        let reach = (3.0 * sigma).ceil() as i64;
        let (iy, ix) = (cy.round() as i64, cx.round() as i64);
        for y in (iy - reach).max(0)..=(iy + reach).min(self.size as i64 - 1) {
            for x in (ix - reach).max(0)..=(ix + reach).min(self.size as i64 - 1) {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                self.px[y as usize * self.size + x as usize] += delta * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
}

fn point_in_disk<R: Rng + ?Sized>(rng: &mut R, cy: f64, cx: f64, r: f64) -> (f64, f64) {
    let rho = r * rng.random::<f64>().sqrt();
    let th = rng.random_range(0.0..std::f64::consts::TAU);
    (cy + rho * th.sin(), cx + rho * th.cos())
}

/// Renders one grayscale toy image in [-1, 1].
pub fn render_toy_image<R: Rng + ?Sized>(
    style: ToyClassStyle,
    size: usize,
    position_jitter: f64,
    noise_std: f64,
    rng: &mut R,
) -> LatentTensor {
    let scale = size as f64 / 32.0;
    let mid = (size as f64 - 1.0) / 2.0;
    let jit = position_jitter * scale;
    let cy = mid + if jit > 0.0 { rng.random_range(-jit..=jit) } else { 0.0 };
    let cx = mid + if jit > 0.0 { rng.random_range(-jit..=jit) } else { 0.0 };
    let r = rng.random_range(9.0..10.5) * scale;
    let mut c = Canvas::new(size, 0.85);
    match style {
        ToyClassStyle::FineGranular => {
            c.disk(cy, cx, r, 0.75);
            for _ in 0..60 {
                let (y, x) = point_in_disk(rng, cy, cx, r - 1.0);
                c.spot(y, x, 0.6 * scale, -0.2);
            }
        }
        ToyClassStyle::CoarseGranular => {
            c.disk(cy, cx, r, 0.35);
            for _ in 0..25 {
                let (y, x) = point_in_disk(rng, cy, cx, r - 2.0 * scale);
                c.spot(y, x, 1.2 * scale, 0.2);
            }
        }
        ToyClassStyle::RoundNucleus => {
            c.disk(cy, cx, r, 0.6);
            let (ny, nx) = point_in_disk(rng, cy, cx, 0.15 * r);
            c.disk(ny, nx, 0.65 * r, 0.15);
        }
        ToyClassStyle::Bilobed => {
            c.disk(cy, cx, r, 0.6);
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, co) = th.sin_cos();
            let off = 0.4 * r;
            c.disk(cy + off * s, cx + off * co, 0.3 * r, 0.25);
            c.disk(cy - off * s, cx - off * co, 0.3 * r, 0.25);
            c.disk(cy, cx, 0.1 * r, 0.25);
        }
        ToyClassStyle::Ring => {
            c.disk(cy, cx, r, 0.75);
            c.annulus(cy, cx, 0.5 * r, 0.95 * r, 0.2);
        }
        ToyClassStyle::SmallDense => {
            c.disk(cy, cx, 0.55 * r, 0.3);
            for _ in 0..15 {
                let (y, x) = point_in_disk(rng, cy, cx, 0.55 * r - 1.0);
                c.spot(y, x, 0.6 * scale, 0.15);
            }
        }
    }
    if noise_std > 0.0 {
        let n = Normal::new(0.0, noise_std).expect("positive std");
        c.px.iter_mut().for_each(|p| *p += n.sample(rng));
    }
    // Quantize to the 8-bit grid so in-memory and PNG round-tripped images agree.
    let data = c
        .px
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() / 127.5 - 1.0)
        .collect();
    LatentTensor::from_vec((1, size, size), data, Space::Pixel).expect("square image")
}

/// Writes the toy images as PNGs under `out_dir/images/<class>/` plus
/// `out_dir/manifest.jsonl`, and returns the manifest.
pub fn generate_toy_dataset(spec: &ToyDatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let names = spec.class_names();
    let mut records = Vec::with_capacity(spec.classes.len() * spec.per_class);
    for (k, name) in names.iter().enumerate() {
        let splits = spec.splits_for_class(k);
        for (i, split) in splits.into_iter().enumerate() {
            let rel = format!("images/{name}/{i:05}.png");
            save_image(&spec.render(k, i), &out_dir.join(&rel))?;
            records.push(ManifestRecord {
                path: rel,
                label: name.clone(),
                split,
                annotations: Vec::new(),
            });
        }
    }
    let manifest = DatasetManifest::with_class_names(out_dir, records, names)?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let spec = ToyDatasetSpec::new(6, 4, 11).unwrap();
        for k in 0..6 {
            let a = spec.render(k, 2);
            assert_eq!(a, spec.render(k, 2));
            assert_ne!(a, spec.render(k, 3));
            assert!(a.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn split_fractions() {
        let spec = ToyDatasetSpec::new(1, 300, 0).unwrap();
        let s = spec.splits_for_class(0);
        let count = |x| s.iter().filter(|&&v| v == x).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (210, 30, 60));
    }
}
