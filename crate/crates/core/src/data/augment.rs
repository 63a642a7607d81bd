use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningMatrix;
use crate::error::{invalid, Result};
use crate::tensor::LatentTensor;

/// Maximum relative perturbation per photometric channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl ColorJitter {
    pub const NONE: ColorJitter = ColorJitter {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };

    pub fn is_none(&self) -> bool {
        *self == Self::NONE
    }
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.25,
            contrast: 0.25,
            saturation: 0.25,
            hue: 0.125,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    /// Random horizontal, vertical and diagonal flips.
    pub flips: bool,
    /// Rotation angle is drawn uniformly from [0, rotation_degrees).
    pub rotation_degrees: f64,
    pub color_jitter: ColorJitter,
    /// Beta(alpha, alpha) mixing coefficient; 0 disables mixup.
    pub mixup_alpha: f64,
    pub mixup_prob: f64,
    /// Extra randomized policy stage (two random ops per image).
    pub policy_augment: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            flips: true,
            rotation_degrees: 360.0,
            color_jitter: ColorJitter::default(),
            mixup_alpha: 0.3,
            mixup_prob: 0.5,
            policy_augment: false,
        }
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        Self {
            flips: false,
            rotation_degrees: 0.0,
            color_jitter: ColorJitter::NONE,
            mixup_alpha: 0.0,
            mixup_prob: 0.0,
            policy_augment: false,
        }
    }

    /// Flips and full rotations only.
    pub fn geometric() -> Self {
        Self {
            flips: true,
            rotation_degrees: 360.0,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = &self.color_jitter;
        if [j.brightness, j.contrast, j.saturation].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("color jitter factors must lie in [0, 1]"));
        }
        if !(0.0..=0.5).contains(&j.hue) {
            return Err(invalid("hue jitter must lie in [0, 0.5]"));
        }
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            return Err(invalid("mixup_alpha must be a non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.mixup_prob) {
            return Err(invalid("mixup_prob must lie in [0, 1]"));
        }
        if !(0.0..=360.0).contains(&self.rotation_degrees) {
            return Err(invalid("rotation_degrees must lie in [0, 360]"));
        }
        Ok(())
    }
}

/// Geometric, photometric and policy augmentation of one pixel-space image.
pub fn augment_image<R: Rng + ?Sized>(image: &LatentTensor, spec: &AugmentationSpec, rng: &mut R) -> LatentTensor {
    let mut out = image.clone();
    if spec.flips {
        if rng.random_bool(0.5) {
            out = flip(&out, false);
        }
        if rng.random_bool(0.5) {
            out = flip(&out, true);
        }
        if rng.random_bool(0.5) && out.shape().1 == out.shape().2 {
            out = transpose(&out);
        }
    }
    if spec.rotation_degrees > 0.0 {
        let angle = rng.random_range(0.0..spec.rotation_degrees).to_radians();
        out = rotate(&out, angle);
    }
    if !spec.color_jitter.is_none() {
        out = color_jitter(&out, &spec.color_jitter, rng);
    }
    if spec.policy_augment {
        for _ in 0..2 {
            out = policy_op(&out, rng);
        }
    }
    out
}

/// Full training augmentation. With a partner and probability `mixup_prob`,
/// the image and its conditioning matrix are blended with λ ~ Beta(α, α).
/// Returns the augmented image, its conditioning and the λ used (1 when no
/// mixing happened).
pub fn augment<R: Rng + ?Sized>(
    image: &LatentTensor,
    condition: &ConditioningMatrix,
    partner: Option<(&LatentTensor, &ConditioningMatrix)>,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<(LatentTensor, ConditioningMatrix, f64)> {
    let a = augment_image(image, spec, rng);
    let Some((p_img, p_cond)) = partner else {
        return Ok((a, condition.clone(), 1.0));
    };
    if spec.mixup_alpha <= 0.0 || !rng.random_bool(spec.mixup_prob) {
        return Ok((a, condition.clone(), 1.0));
    }
    let beta = Beta::new(spec.mixup_alpha, spec.mixup_alpha).map_err(|e| invalid(e.to_string()))?;
    let lambda: f64 = beta.sample(rng);
    let b = augment_image(p_img, spec, rng);
    let mixed = a.axpby(lambda, &b, 1.0 - lambda)?;
    let cond = condition.mix(p_cond, lambda)?;
    Ok((mixed, cond, lambda))
}

fn flip(t: &LatentTensor, vertical: bool) -> LatentTensor {
    let (c, h, w) = t.shape();
    let src = t.data();
    let data = ndarray::Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        if vertical {
            src[[k, h - 1 - y, x]]
        } else {
            src[[k, y, w - 1 - x]]
        }
    });
    LatentTensor::new(data, t.space())
}

fn transpose(t: &LatentTensor) -> LatentTensor {
    let (c, h, w) = t.shape();
    let src = t.data();
    let data = ndarray::Array3::from_shape_fn((c, w, h), |(k, y, x)| src[[k, x, y]]);
    LatentTensor::new(data, t.space())
}

/// Bilinear rotation about the image centre, replicating edge pixels.
fn rotate(t: &LatentTensor, angle: f64) -> LatentTensor {
    let (c, h, w) = t.shape();
    let src = t.data();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, co) = angle.sin_cos();
    let sample = |k: usize, y: f64, x: f64| {
        let y = y.clamp(0.0, h as f64 - 1.0);
        let x = x.clamp(0.0, w as f64 - 1.0);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = src[[k, y0, x0]] * (1.0 - fx) + src[[k, y0, x1]] * fx;
        let bot = src[[k, y1, x0]] * (1.0 - fx) + src[[k, y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    };
    let data = ndarray::Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let sy = co * dy - s * dx + cy;
        let sx = s * dy + co * dx + cx;
        sample(k, sy, sx)
    });
    LatentTensor::new(data, t.space())
}

fn color_jitter<R: Rng + ?Sized>(t: &LatentTensor, j: &ColorJitter, rng: &mut R) -> LatentTensor {
    let (c, h, w) = t.shape();
    let plane = h * w;
    let mut v: Vec<f64> = t.as_slice().iter().map(|x| (x + 1.0) / 2.0).collect();
    let factor = |r: &mut R, m: f64| if m > 0.0 { r.random_range(1.0 - m..=1.0 + m) } else { 1.0 };

    let b = factor(rng, j.brightness);
    v.iter_mut().for_each(|x| *x = (*x * b).clamp(0.0, 1.0));

    let cf = factor(rng, j.contrast);
    let gray = grayscale(&v, c, plane);
    let mean = gray.iter().sum::<f64>() / plane as f64;
    v.iter_mut().for_each(|x| *x = ((*x - mean) * cf + mean).clamp(0.0, 1.0));

    if c == 3 {
        let sf = factor(rng, j.saturation);
        let gray = grayscale(&v, c, plane);
        for k in 0..3 {
            for i in 0..plane {
                let x = &mut v[k * plane + i];
                *x = ((*x - gray[i]) * sf + gray[i]).clamp(0.0, 1.0);
            }
        }
        if j.hue > 0.0 {
            let shift = rng.random_range(-j.hue..=j.hue);
            for i in 0..plane {
                let (hh, ss, vv) = rgb_to_hsv(v[i], v[plane + i], v[2 * plane + i]);
                let (r, g, bb) = hsv_to_rgb((hh + shift).rem_euclid(1.0), ss, vv);
                v[i] = r;
                v[plane + i] = g;
                v[2 * plane + i] = bb;
            }
        }
    }
    let data = v.into_iter().map(|x| x * 2.0 - 1.0).collect();
    LatentTensor::from_vec((c, h, w), data, t.space()).expect("same shape")
}

fn grayscale(v: &[f64], c: usize, plane: usize) -> Vec<f64> {
    if c == 3 {
        (0..plane)
            .map(|i| 0.299 * v[i] + 0.587 * v[plane + i] + 0.114 * v[2 * plane + i])
            .collect()
    } else {
        (0..plane)
            .map(|i| (0..c).map(|k| v[k * plane + i]).sum::<f64>() / c as f64)
            .collect()
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn policy_op<R: Rng + ?Sized>(t: &LatentTensor, rng: &mut R) -> LatentTensor {
    let (c, h, w) = t.shape();
    let src = t.data();
    match rng.random_range(0..5) {
        0 => t.clone(),
        1 => {
            let dy = rng.random_range(-2i64..=2);
            let dx = rng.random_range(-2i64..=2);
            let data = ndarray::Array3::from_shape_fn((c, h, w), |(k, y, x)| {
                let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
                let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
                src[[k, sy, sx]]
            });
            LatentTensor::new(data, t.space())
        }
        2 => {
            let levels = rng.random_range(8..=32) as f64;
            let data = src.mapv(|x| ((x + 1.0) / 2.0 * levels).floor().min(levels - 1.0) / (levels - 1.0) * 2.0 - 1.0);
            LatentTensor::new(data, t.space())
        }
        3 => {
            let lo = src.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < 1e-9 {
                return t.clone();
            }
            LatentTensor::new(src.mapv(|x| (x - lo) / (hi - lo) * 2.0 - 1.0), t.space())
        }
        _ => {
            let amount = rng.random_range(0.0..0.5);
            let data = ndarray::Array3::from_shape_fn((c, h, w), |(k, y, x)| {
                let mut acc = 0.0;
                let mut n = 0.0;
                for (oy, ox) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let yy = y as i64 + oy;
                    let xx = x as i64 + ox;
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += src[[k, yy as usize, xx as usize]];
                        n += 1.0;
                    }
                }
                (1.0 - amount) * src[[k, y, x]] + amount * acc / n
            });
            LatentTensor::new(data, t.space())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::ConditioningLayout;
    use crate::tensor::Space;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, n: usize) -> LatentTensor {
        let v = (0..c * n * n).map(|i| (i % (n * n)) as f64 / (n * n) as f64 * 1.8 - 0.9).collect();
        LatentTensor::from_vec((c, n, n), v, Space::Pixel).unwrap()
    }

    #[test]
    fn zero_rotation_is_identity_and_quarter_turn_is_exact() {
        let t = ramp(1, 7);
        assert!(rotate(&t, 0.0).max_abs_diff(&t) < 1e-12);
        let r4 = (0..4).fold(t.clone(), |acc, _| rotate(&acc, std::f64::consts::FRAC_PI_2));
        assert!(r4.max_abs_diff(&t) < 1e-9);
    }

    #[test]
    fn none_spec_is_identity() {
        let t = ramp(3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment_image(&t, &AugmentationSpec::none(), &mut rng), t);
    }

    #[test]
    fn outputs_stay_in_range() {
        let t = ramp(3, 8);
        let mut spec = AugmentationSpec::default();
        spec.policy_augment = true;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = augment_image(&t, &spec, &mut rng);
            assert!(a.as_slice().iter().all(|x| (-1.0 - 1e-12..=1.0 + 1e-12).contains(x)));
        }
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() + (g - g2).abs() + (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn mixup_blends_image_and_condition_with_same_lambda() {
        let layout = ConditioningLayout::for_classes(3);
        let a = LatentTensor::from_vec((1, 2, 2), vec![1.0; 4], Space::Pixel).unwrap();
        let b = LatentTensor::from_vec((1, 2, 2), vec![-1.0; 4], Space::Pixel).unwrap();
        let ca = ConditioningMatrix::one_hot(0, layout).unwrap();
        let cb = ConditioningMatrix::one_hot(2, layout).unwrap();
        let spec = AugmentationSpec {
            mixup_alpha: 0.3,
            mixup_prob: 1.0,
            ..AugmentationSpec::none()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (img, cond, lambda) = augment(&a, &ca, Some((&b, &cb)), &spec, &mut rng).unwrap();
        assert!((0.0..=1.0).contains(&lambda));
        assert!((img.as_slice()[0] - (2.0 * lambda - 1.0)).abs() < 1e-12);
        assert!((cond.matrix()[[0, 0]] - lambda).abs() < 1e-12);
        assert!((cond.matrix()[[0, 2]] - (1.0 - lambda)).abs() < 1e-12);
    }
}
