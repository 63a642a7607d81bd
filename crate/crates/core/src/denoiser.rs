//! Class-conditioned noise predictors.
//!
//! [`ResidualMlp`] is the trainable denoiser: a pre-activation residual MLP
//! over the flattened noisy latent, with a sinusoidal timestep embedding and
//! the flattened conditioning matrix injected into every block. Gradients are
//! computed by an explicit backward pass.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditioningLayout, ConditioningMatrix};
use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Space};

/// Anything that maps (z_t, t, c) to a noise prediction of the same shape.
///
/// Batches are row-major: each row of `z` is one flattened latent, each row of
/// `cond` one flattened conditioning matrix, `t` holds one timestep per row.
pub trait NoisePredictor: Sync {
    fn latent_shape(&self) -> (usize, usize, usize);

    fn conditioning_layout(&self) -> ConditioningLayout;

    fn predict_batch(&self, z: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Array2<f64>;

    fn predict(&self, z_t: &LatentTensor, t: usize, c: &ConditioningMatrix) -> Result<LatentTensor> {
        let shape = self.latent_shape();
        if z_t.shape() != shape {
            let s = z_t.shape();
            return Err(Error::ShapeMismatch {
                expected: vec![shape.0, shape.1, shape.2],
                actual: vec![s.0, s.1, s.2],
            });
        }
        if c.layout() != self.conditioning_layout() {
            let l = self.conditioning_layout();
            let g = c.layout();
            return Err(Error::ShapeMismatch {
                expected: vec![l.rows, l.cols],
                actual: vec![g.rows, g.cols],
            });
        }
        let z = ArrayView2::from_shape((1, z_t.len()), z_t.as_slice()).expect("contiguous");
        let cond = ArrayView2::from_shape((1, c.as_slice().len()), c.as_slice()).expect("contiguous");
        let out = self.predict_batch(z, &[t], cond);
        LatentTensor::from_vec(shape, out.into_raw_vec_and_offset().0, z_t.space())
    }
}

impl<T: NoisePredictor + ?Sized> NoisePredictor for &T {
    fn latent_shape(&self) -> (usize, usize, usize) {
        (**self).latent_shape()
    }
    fn conditioning_layout(&self) -> ConditioningLayout {
        (**self).conditioning_layout()
    }
    fn predict_batch(&self, z: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Array2<f64> {
        (**self).predict_batch(z, t, cond)
    }
}

/// Layer sizes of a [`ResidualMlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub conditioning: ConditioningLayout,
}

impl ArchConfig {
    pub fn latent_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn embed_len(&self) -> usize {
        self.time_dim + self.conditioning.len()
    }

    fn validate(&self) -> Result<()> {
        if self.latent_len() == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("empty denoiser layer".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::InvalidArgument("time_dim must be even".into()));
        }
        Ok(())
    }

    fn layout(&self) -> Vec<ParamSpec> {
        let p = self.latent_len();
        let e = self.embed_len();
        let h = self.hidden;
        let mut shapes = vec![("in.w".to_string(), p + e, h), ("in.b".to_string(), 1, h)];
        for b in 0..self.blocks {
            shapes.push((format!("block{b}.w1"), h, h));
            shapes.push((format!("block{b}.v"), e, h));
            shapes.push((format!("block{b}.b1"), 1, h));
            shapes.push((format!("block{b}.w2"), h, h));
            shapes.push((format!("block{b}.b2"), 1, h));
        }
        shapes.push(("out.w".to_string(), h, p));
        shapes.push(("out.b".to_string(), 1, p));
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let spec = ParamSpec {
                    name,
                    rows,
                    cols,
                    offset,
                };
                offset += rows * cols;
                spec
            })
            .collect()
    }
}

/// Location of one named matrix inside a flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamSpec {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

// Indices into the layout.
const IN_W: usize = 0;
const IN_B: usize = 1;
const PER_BLOCK: usize = 5;

fn block_index(block: usize, slot: usize) -> usize {
    2 + block * PER_BLOCK + slot
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding of integer timesteps, one row per timestep.
pub fn time_embedding(t: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((t.len(), dim));
    for (row, &ti) in t.iter().enumerate() {
        for k in 0..half {
            let freq = (-(1000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let arg = ti as f64 * freq;
            out[[row, k]] = arg.sin();
            out[[row, half + k]] = arg.cos();
        }
    }
    out
}

/// Trainable residual MLP noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMlp {
    arch: ArchConfig,
    specs: Vec<ParamSpec>,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for backpropagation.
struct ForwardCache {
    x0: Array2<f64>,
    emb: Array2<f64>,
    hs: Vec<Array2<f64>>,
    us: Vec<Array2<f64>>,
}

impl ResidualMlp {
    /// Random initialization: fan-in scaled normal weights, zero biases,
    /// small output projection.
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let specs = arch.layout();
        let total = specs.last().map(|s| s.offset + s.len()).unwrap_or(0);
        let mut params = vec![0.0; total];
        for spec in &specs {
            if spec.rows == 1 {
                continue;
            }
            let mut std = (1.0 / spec.rows as f64).sqrt();
            if spec.name.ends_with(".w2") {
                std *= 0.1;
            } else if spec.name == "out.w" {
                std *= 0.1;
            }
            for v in &mut params[spec.offset..spec.offset + spec.len()] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(Self {
            arch,
            specs,
            params,
        })
    }

    /// Rebuilds a model from a flat parameter vector, checking its length.
    pub fn from_params(arch: ArchConfig, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.layout();
        let total = specs.last().map(|s| s.offset + s.len()).unwrap_or(0);
        if params.len() != total {
            return Err(Error::ShapeMismatch {
                expected: vec![total],
                actual: vec![params.len()],
            });
        }
        Ok(Self {
            arch,
            specs,
            params,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn view(&self, idx: usize) -> ArrayView2<'_, f64> {
        let s = &self.specs[idx];
        ArrayView2::from_shape((s.rows, s.cols), &self.params[s.offset..s.offset + s.len()])
            .expect("layout consistent")
    }

    fn row(&self, idx: usize) -> ndarray::ArrayView1<'_, f64> {
        let s = &self.specs[idx];
        ndarray::ArrayView1::from(&self.params[s.offset..s.offset + s.len()])
    }

    fn forward_cached(&self, z: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> (Array2<f64>, ForwardCache) {
        let temb = time_embedding(t, self.arch.time_dim);
        let emb = concatenate(Axis(1), &[temb.view(), cond.view()]).expect("row counts match");
        let x0 = concatenate(Axis(1), &[z.view(), emb.view()]).expect("row counts match");

        let mut h = x0.dot(&self.view(IN_W)) + &self.row(IN_B);
        let mut hs = Vec::with_capacity(self.arch.blocks + 1);
        let mut us = Vec::with_capacity(self.arch.blocks);
        for b in 0..self.arch.blocks {
            let a = h.mapv(silu);
            let u = a.dot(&self.view(block_index(b, 0)))
                + emb.dot(&self.view(block_index(b, 1)))
                + &self.row(block_index(b, 2));
            let v = u.mapv(silu);
            let next = &h + &(v.dot(&self.view(block_index(b, 3))) + &self.row(block_index(b, 4)));
            hs.push(h);
            us.push(u);
            h = next;
        }
        let out_w = self.specs.len() - 2;
        let y = h.mapv(silu).dot(&self.view(out_w)) + &self.row(out_w + 1);
        hs.push(h);
        (y, ForwardCache { x0, emb, hs, us })
    }

    /// Weighted squared-error loss `mean_i w_i ||eps_i - f(z_i)||^2` and its
    /// gradient with respect to every parameter (same layout as `params`).
    pub fn loss_and_grad(
        &self,
        z: ArrayView2<f64>,
        t: &[usize],
        cond: ArrayView2<f64>,
        eps: ArrayView2<f64>,
        weights: &[f64],
    ) -> (f64, Vec<f64>) {
        let batch = z.nrows();
        let (y, cache) = self.forward_cached(z, t, cond);
        let diff = &y - &eps;
        let mut loss = 0.0;
        let mut dy = Array2::zeros(diff.dim());
        for (i, (drow, mut dyrow)) in diff.rows().into_iter().zip(dy.rows_mut()).enumerate() {
            let w = weights[i];
            loss += w * drow.dot(&drow);
            let k = 2.0 * w / batch as f64;
            dyrow.zip_mut_with(&drow, |g, d| *g = k * d);
        }
        loss /= batch as f64;

        let mut grad = vec![0.0; self.params.len()];
        self.backward(&cache, dy, &mut grad);
        (loss, grad)
    }

    fn grad_view<'a>(&self, grad: &'a mut [f64], idx: usize) -> ArrayViewMut2<'a, f64> {
        let s = &self.specs[idx];
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut grad[s.offset..s.offset + s.len()])
            .expect("layout consistent")
    }

    fn accumulate(&self, grad: &mut [f64], idx: usize, value: &Array2<f64>) {
        self.grad_view(grad, idx).zip_mut_with(value, |g, v| *g += v);
    }

    fn accumulate_bias(&self, grad: &mut [f64], idx: usize, upstream: &Array2<f64>) {
        let sum: Array1<f64> = upstream.sum_axis(Axis(0));
        self.grad_view(grad, idx)
            .row_mut(0)
            .zip_mut_with(&sum, |g, v| *g += v);
    }

    fn backward(&self, cache: &ForwardCache, dy: Array2<f64>, grad: &mut [f64]) {
        let out_w = self.specs.len() - 2;
        let h_last = &cache.hs[self.arch.blocks];
        let a_last = h_last.mapv(silu);
        self.accumulate(grad, out_w, &a_last.t().dot(&dy));
        self.accumulate_bias(grad, out_w + 1, &dy);
        let mut dh = dy.dot(&self.view(out_w).t());
        dh.zip_mut_with(h_last, |g, &h| *g *= silu_grad(h));

        for b in (0..self.arch.blocks).rev() {
            let h = &cache.hs[b];
            let u = &cache.us[b];
            let v = u.mapv(silu);
            self.accumulate(grad, block_index(b, 3), &v.t().dot(&dh));
            self.accumulate_bias(grad, block_index(b, 4), &dh);
            let mut du = dh.dot(&self.view(block_index(b, 3)).t());
            du.zip_mut_with(u, |g, &x| *g *= silu_grad(x));
            let a = h.mapv(silu);
            self.accumulate(grad, block_index(b, 0), &a.t().dot(&du));
            self.accumulate(grad, block_index(b, 1), &cache.emb.t().dot(&du));
            self.accumulate_bias(grad, block_index(b, 2), &du);
            let mut da = du.dot(&self.view(block_index(b, 0)).t());
            da.zip_mut_with(h, |g, &x| *g *= silu_grad(x));
            dh += &da;
        }

        self.accumulate(grad, IN_W, &cache.x0.t().dot(&dh));
        self.accumulate_bias(grad, IN_B, &dh);
    }
}

impl NoisePredictor for ResidualMlp {
    fn latent_shape(&self) -> (usize, usize, usize) {
        (self.arch.channels, self.arch.height, self.arch.width)
    }

    fn conditioning_layout(&self) -> ConditioningLayout {
        self.arch.conditioning
    }

    fn predict_batch(&self, z: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Array2<f64> {
        self.forward_cached(z, t, cond).0
    }
}

/// Stacks latents into a row-major batch matrix.
pub fn stack_latents<'a>(items: impl IntoIterator<Item = &'a LatentTensor>, len: usize) -> Array2<f64> {
    let items: Vec<&LatentTensor> = items.into_iter().collect();
    let mut out = Array2::zeros((items.len(), len));
    for (mut row, item) in out.rows_mut().into_iter().zip(items) {
        row.assign(&ndarray::ArrayView1::from(item.as_slice()));
    }
    out
}

/// Splits a batch matrix back into latents of the given shape.
pub fn unstack_latents(batch: &Array2<f64>, shape: (usize, usize, usize), space: Space) -> Vec<LatentTensor> {
    batch
        .rows()
        .into_iter()
        .map(|r| LatentTensor::from_vec(shape, r.to_vec(), space).expect("row length matches shape"))
        .collect()
}

/// Row slice helper used by callers that assemble batches in place.
pub fn copy_into_row(dst: &mut Array2<f64>, row: usize, values: &[f64]) {
    dst.slice_mut(s![row, ..]).assign(&ndarray::ArrayView1::from(values));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch(blocks: usize) -> ArchConfig {
        ArchConfig {
            channels: 1,
            height: 3,
            width: 3,
            hidden: 7,
            blocks,
            time_dim: 4,
            conditioning: ConditioningLayout { rows: 2, cols: 3 },
        }
    }

    #[test]
    fn output_shape_matches_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ResidualMlp::new(tiny_arch(2), &mut rng).unwrap();
        let z = LatentTensor::standard_normal((1, 3, 3), Space::Pixel, &mut rng);
        let c = ConditioningMatrix::one_hot(1, m.conditioning_layout()).unwrap();
        let y = m.predict(&z, 5, &c).unwrap();
        assert_eq!(y.shape(), z.shape());
        assert_eq!(y, m.predict(&z, 5, &c).unwrap());
        let wrong = LatentTensor::zeros((1, 3, 4), Space::Pixel);
        assert!(m.predict(&wrong, 5, &c).is_err());
    }

    #[test]
    fn from_params_checks_length() {
        assert!(ResidualMlp::from_params(tiny_arch(1), vec![0.0; 3]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ResidualMlp::new(tiny_arch(1), &mut rng).unwrap();
        let again = ResidualMlp::from_params(*m.arch(), m.params().to_vec()).unwrap();
        assert_eq!(m, again);
    }

    /// Central finite differences on random parameters of a 2-layer stub
    /// (input + output layer) and of a network with residual blocks.
    #[test]
    fn gradients_match_finite_differences() {
        for blocks in [0, 2] {
            let mut rng = ChaCha8Rng::seed_from_u64(11 + blocks as u64);
            let mut m = ResidualMlp::new(tiny_arch(blocks), &mut rng).unwrap();
            for p in m.params_mut() {
                *p = 0.5 * rng.sample::<f64, _>(StandardNormal);
            }
            let batch = 4;
            let z = Array2::from_shape_simple_fn((batch, 9), || rng.sample::<f64, _>(StandardNormal));
            let eps = Array2::from_shape_simple_fn((batch, 9), || rng.sample::<f64, _>(StandardNormal));
            let mut cond = Array2::zeros((batch, 6));
            for i in 0..batch {
                cond[[i, i % 3]] = 1.0;
                cond[[i, 3 + i % 3]] = 1.0;
            }
            let t = [3, 17, 250, 999];
            let w = [1.0, 0.5, 0.25, 0.8];
            let (_, grad) = m.loss_and_grad(z.view(), &t, cond.view(), eps.view(), &w);
            for _ in 0..10 {
                let i = rng.random_range(0..m.num_params());
                let h = 1e-5;
                let orig = m.params()[i];
                m.params_mut()[i] = orig + h;
                let (lp, _) = m.loss_and_grad(z.view(), &t, cond.view(), eps.view(), &w);
                m.params_mut()[i] = orig - h;
                let (lm, _) = m.loss_and_grad(z.view(), &t, cond.view(), eps.view(), &w);
                m.params_mut()[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
                assert!(rel < 1e-4, "param {i}: analytic {} vs fd {fd} (rel {rel})", grad[i]);
            }
        }
    }
}
