//! Counterfactual heatmaps from class-conditional noise-prediction errors.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::LatentCodec;
use crate::conditioning::ConditioningMatrix;
use crate::denoiser::{copy_into_row, NoisePredictor};
use crate::diffusion::forward_marginal;
use crate::error::{invalid, Error, Result};
use crate::exec::derive_seed;
use crate::schedule::NoiseSchedule;
use crate::tensor::LatentTensor;

const CHUNK: usize = 32;

/// Mean of N draw-level differences eps - eps_hat(z_t, t, c).
#[derive(Debug, Clone, PartialEq)]
pub struct MeanErrorTensor {
    pub delta: LatentTensor,
    pub class_index: usize,
    pub n_draws: usize,
    /// Mean over draws of ||eps - eps_hat||².
    pub mean_squared_error: f64,
}

/// Mean error tensors for several classes. Every class sees the same
/// sequence of (t, eps) draws, derived from `seed`.
pub fn mean_error_tensors<M: NoisePredictor + ?Sized>(
    image: &LatentTensor,
    classes: &[usize],
    model: &M,
    codec: &LatentCodec,
    s: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<MeanErrorTensor>> {
    if n == 0 {
        return Err(invalid("mean error tensor needs N >= 1"));
    }
    if classes.is_empty() {
        return Err(invalid("no classes requested"));
    }
    let z0 = codec.encode(image)?;
    let shape = model.latent_shape();
    if z0.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: vec![shape.0, shape.1, shape.2],
            actual: vec![z0.shape().0, z0.shape().1, z0.shape().2],
        });
    }
    let layout = model.conditioning_layout();
    let conds: Vec<ConditioningMatrix> = classes
        .iter()
        .map(|&c| ConditioningMatrix::one_hot(c, layout))
        .collect::<Result<_>>()?;
    let p = z0.len();
    let k = classes.len();
    let mut sums = Array2::<f64>::zeros((k, p));
    let mut sq = vec![0.0; k];
    let mut start = 0;
    while start < n {
        let count = CHUNK.min(n - start);
        let rows = count * k;
        let mut z = Array2::zeros((rows, p));
        let mut cond = Array2::zeros((rows, layout.len()));
        let mut ts = Vec::with_capacity(rows);
        let mut eps_all = Vec::with_capacity(count);
        for d in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (start + d) as u64));
            let t = rng.random_range(1..=s.steps());
            let eps = LatentTensor::standard_normal(shape, z0.space(), &mut rng);
            let z_t = forward_marginal(&z0, t, &eps, s)?;
            for (ci, cm) in conds.iter().enumerate() {
                let row = d * k + ci;
                copy_into_row(&mut z, row, z_t.as_slice());
                copy_into_row(&mut cond, row, cm.as_slice());
                ts.push(t);
            }
            eps_all.push(eps);
        }
        let pred = model.predict_batch(z.view(), &ts, cond.view());
        for (d, eps) in eps_all.iter().enumerate() {
            for ci in 0..k {
                let row = pred.row(d * k + ci);
                let mut acc = sums.row_mut(ci);
                let mut e2 = 0.0;
                for ((a, &e), &y) in acc.iter_mut().zip(eps.as_slice()).zip(row.iter()) {
                    let diff = e - y;
                    *a += diff;
                    e2 += diff * diff;
                }
                sq[ci] += e2;
            }
        }
        start += count;
    }
    let inv = 1.0 / n as f64;
    Ok(classes
        .iter()
        .enumerate()
        .map(|(ci, &c)| {
            let data: Vec<f64> = sums.slice(s![ci, ..]).iter().map(|v| v * inv).collect();
            MeanErrorTensor {
                delta: LatentTensor::from_vec(shape, data, z0.space()).expect("latent shape"),
                class_index: c,
                n_draws: n,
                mean_squared_error: sq[ci] * inv,
            }
        })
        .collect())
}

/// Single-class convenience wrapper around [`mean_error_tensors`].
pub fn mean_error_tensor<M: NoisePredictor + ?Sized>(
    image: &LatentTensor,
    class: usize,
    model: &M,
    codec: &LatentCodec,
    s: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<MeanErrorTensor> {
    Ok(mean_error_tensors(image, &[class], model, codec, s, n, seed)?.remove(0))
}

/// delta_c = Delta_c - Delta_predicted for every class.
pub fn delta_adjust(
    deltas: &BTreeMap<usize, LatentTensor>,
    predicted: usize,
) -> Result<BTreeMap<usize, LatentTensor>> {
    let base = deltas
        .get(&predicted)
        .ok_or_else(|| invalid(format!("predicted class {predicted} has no mean error tensor")))?;
    deltas
        .iter()
        .map(|(&c, d)| Ok((c, d.sub(base)?)))
        .collect()
}

/// Decoded image-space counterfactual map.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: LatentTensor,
    pub source_class: usize,
    pub target_class: usize,
}

/// Decodes an adjusted delta without any post-processing.
pub fn heatmap(delta: &LatentTensor, codec: &LatentCodec, source_class: usize, target_class: usize) -> Result<Heatmap> {
    Ok(Heatmap {
        values: codec.decode_delta(delta)?,
        source_class,
        target_class,
    })
}

/// Overlay blend weight on marked pixels.
pub const OVERLAY_ALPHA: f64 = 0.6;

/// Marks the `round((1 - q) * pixels)` pixels with the largest mean |h|
/// over channels and alpha-blends them toward dark (negative h) or light
/// (positive h). Returns the composite and the number of marked pixels.
pub fn overlay(image: &LatentTensor, h: &Heatmap, threshold_quantile: f64) -> Result<(LatentTensor, usize)> {
    if !(0.0..=1.0).contains(&threshold_quantile) {
        return Err(invalid("threshold quantile must lie in [0, 1]"));
    }
    let (c, hh, ww) = image.shape();
    let (hc, h2, w2) = h.values.shape();
    if (hh, ww) != (h2, w2) {
        return Err(Error::ShapeMismatch {
            expected: vec![hh, ww],
            actual: vec![h2, w2],
        });
    }
    let hv = h.values.data();
    let n_pix = hh * ww;
    let mut mag: Vec<(f64, f64, usize)> = (0..n_pix)
        .map(|i| {
            let (y, x) = (i / ww, i % ww);
            let vals: Vec<f64> = (0..hc).map(|k| hv[[k, y, x]]).collect();
            let m = vals.iter().map(|v| v.abs()).sum::<f64>() / hc as f64;
            (m, vals.iter().sum::<f64>(), i)
        })
        .collect();
    mag.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
    let n_marked = ((1.0 - threshold_quantile) * n_pix as f64).round() as usize;
    let mut out: Array3<f64> = image.data().clone();
    for &(_, sign, i) in mag.iter().take(n_marked) {
        let (y, x) = (i / ww, i % ww);
        let target = if sign < 0.0 { -1.0 } else { 1.0 };
        for k in 0..c {
            out[[k, y, x]] = (1.0 - OVERLAY_ALPHA) * out[[k, y, x]] + OVERLAY_ALPHA * target;
        }
    }
    Ok((LatentTensor::new(out, image.space()), n_marked))
}

/// K×K grid: diagonal cells are the representative images; cell (r, c)
/// is the heatmap toward class r computed from the class-c representative,
/// with c taken as the predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub cells: Vec<Vec<LatentTensor>>,
}

impl HeatmapGrid {
    pub fn size(&self) -> usize {
        self.cells.len()
    }

    /// Tiles the grid into one image. Heatmap cells are scaled by the
    /// largest |value| across all off-diagonal cells.
    pub fn mosaic(&self) -> LatentTensor {
        let k = self.cells.len();
        let (c, h, w) = self.cells[0][0].shape();
        let mut scale: f64 = 0.0;
        for (r, row) in self.cells.iter().enumerate() {
            for (col, cell) in row.iter().enumerate() {
                if r != col {
                    scale = scale.max(cell.as_slice().iter().fold(0.0, |m, v| m.max(v.abs())));
                }
            }
        }
        let scale = if scale > 0.0 { 1.0 / scale } else { 1.0 };
        let mut out = Array3::zeros((c, k * h, k * w));
        for (r, row) in self.cells.iter().enumerate() {
            for (col, cell) in row.iter().enumerate() {
                let d = cell.data();
                let cc = cell.shape().0;
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let v = d[[ch.min(cc - 1), y, x]];
                            out[[ch, r * h + y, col * w + x]] = if r == col { v } else { v * scale };
                        }
                    }
                }
            }
        }
        LatentTensor::new(out, self.cells[0][0].space())
    }
}

pub fn heatmap_grid<M: NoisePredictor + ?Sized>(
    images: &[LatentTensor],
    model: &M,
    codec: &LatentCodec,
    s: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<HeatmapGrid> {
    let k = images.len();
    if k == 0 {
        return Err(invalid("heatmap grid needs one image per class"));
    }
    let classes: Vec<usize> = (0..k).collect();
    let mut cells: Vec<Vec<Option<LatentTensor>>> = vec![vec![None; k]; k];
    for (col, img) in images.iter().enumerate() {
        cells[col][col] = Some(img.clone());
        if k == 1 {
            break;
        }
        let means = mean_error_tensors(img, &classes, model, codec, s, n, derive_seed(seed, col as u64))?;
        let deltas: BTreeMap<usize, LatentTensor> = means.into_iter().map(|m| (m.class_index, m.delta)).collect();
        let adjusted = delta_adjust(&deltas, col)?;
        for (r, d) in adjusted {
            if r != col {
                cells[r][col] = Some(heatmap(&d, codec, col, r)?.values);
            }
        }
    }
    Ok(HeatmapGrid {
        cells: cells
            .into_iter()
            .map(|row| row.into_iter().map(|c| c.expect("every cell filled")).collect())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Space;

    fn t(v: &[f64]) -> LatentTensor {
        LatentTensor::from_vec((1, 1, v.len()), v.to_vec(), Space::Pixel).unwrap()
    }

    #[test]
    fn delta_adjust_fixture() {
        let mut m = BTreeMap::new();
        m.insert(0, t(&[1.0, 2.0]));
        m.insert(1, t(&[0.5, 0.5]));
        let d = delta_adjust(&m, 1).unwrap();
        assert_eq!(d[&0], t(&[0.5, 1.5]));
        assert_eq!(d[&1], t(&[0.0, 0.0]));
        assert!(delta_adjust(&m, 5).is_err());
    }

    #[test]
    fn identity_heatmap_is_delta() {
        let d = t(&[0.25, -3.0, 1e-300]);
        let h = heatmap(&d, &LatentCodec::Identity, 0, 1).unwrap();
        assert_eq!(h.values, d);
    }

    #[test]
    fn overlay_quantiles() {
        let img = LatentTensor::zeros((1, 10, 10), Space::Pixel);
        let v: Vec<f64> = (0..100).map(|i| i as f64 - 50.0).collect();
        let h = Heatmap {
            values: LatentTensor::from_vec((1, 10, 10), v, Space::Pixel).unwrap(),
            source_class: 0,
            target_class: 1,
        };
        let (same, n) = overlay(&img, &h, 1.0).unwrap();
        assert_eq!((same, n), (img.clone(), 0));
        let (_, n) = overlay(&img, &h, 0.0).unwrap();
        assert_eq!(n, 100);
        let (o, n) = overlay(&img, &h, 0.9).unwrap();
        assert_eq!(n, 10);
        assert_eq!(o.as_slice().iter().filter(|v| **v != 0.0).count(), 10);
        assert_eq!(o.as_slice()[0], -OVERLAY_ALPHA);
    }
}
