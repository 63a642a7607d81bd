//! Maps between image space and the space the diffusion model runs in.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{LatentTensor, Space};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Identity,
    LearnedAutoencoder,
}

/// Image codec. `Identity` runs diffusion directly on pixels; `Pca` is a
/// learned linear autoencoder onto the leading principal components.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentCodec {
    Identity,
    Pca(PcaCodec),
}

impl LatentCodec {
    pub fn kind(&self) -> CodecKind {
        match self {
            LatentCodec::Identity => CodecKind::Identity,
            LatentCodec::Pca(_) => CodecKind::LearnedAutoencoder,
        }
    }

    pub fn latent_shape(&self, image_shape: (usize, usize, usize)) -> (usize, usize, usize) {
        match self {
            LatentCodec::Identity => image_shape,
            LatentCodec::Pca(p) => (p.components.nrows(), 1, 1),
        }
    }

    pub fn encode(&self, image: &LatentTensor) -> Result<LatentTensor> {
        match self {
            LatentCodec::Identity => Ok(image.clone().with_space(Space::Pixel)),
            LatentCodec::Pca(p) => p.encode(image),
        }
    }

    pub fn decode(&self, latent: &LatentTensor) -> Result<LatentTensor> {
        match self {
            LatentCodec::Identity => Ok(latent.clone()),
            LatentCodec::Pca(p) => p.decode(latent, true),
        }
    }

    /// Decodes a difference of latents. For the linear codecs here this is
    /// the decoder without its offset, so a zero delta decodes to zero.
    pub fn decode_delta(&self, delta: &LatentTensor) -> Result<LatentTensor> {
        match self {
            LatentCodec::Identity => Ok(delta.clone()),
            LatentCodec::Pca(p) => p.decode(delta, false),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaCodec {
    image_shape: (usize, usize, usize),
    mean: Array1<f64>,
    /// One principal direction per row, unit norm.
    components: Array2<f64>,
}

impl PcaCodec {
    /// Fits `k` principal components to the given images via the Gram matrix.
    pub fn fit(images: &[LatentTensor], k: usize) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InsufficientData("no images to fit codec".into()))?;
        let shape = first.shape();
        let p = first.len();
        let n = images.len();
        if k == 0 || k > n.min(p) {
            return Err(invalid(format!("cannot fit {k} components to {n} images of {p} values")));
        }
        let mut data = Array2::zeros((n, p));
        for (mut row, img) in data.rows_mut().into_iter().zip(images) {
            img.ensure_same_shape(first)?;
            row.assign(&ArrayView1::from(img.as_slice()));
        }
        let mean = data.mean_axis(ndarray::Axis(0)).expect("non-empty");
        data -= &mean;
        let gram = data.dot(&data.t());
        let gram = DMatrix::from_fn(n, n, |i, j| gram[[i, j]]);
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = Array2::zeros((k, p));
        for (ci, &idx) in order.iter().take(k).enumerate() {
            let coeffs = Array1::from_iter(eig.eigenvectors.column(idx).iter().copied());
            let mut dir = data.t().dot(&coeffs);
            let norm = dir.dot(&dir).sqrt();
            if norm <= 1e-12 {
                return Err(Error::InsufficientData(format!(
                    "component {ci} has zero variance"
                )));
            }
            dir /= norm;
            components.row_mut(ci).assign(&dir);
        }
        Ok(Self {
            image_shape: shape,
            mean,
            components,
        })
    }

    pub fn from_parts(image_shape: (usize, usize, usize), mean: Vec<f64>, components: Array2<f64>) -> Result<Self> {
        let p = image_shape.0 * image_shape.1 * image_shape.2;
        if mean.len() != p || components.ncols() != p {
            return Err(Error::ShapeMismatch {
                expected: vec![p],
                actual: vec![mean.len(), components.ncols()],
            });
        }
        Ok(Self {
            image_shape,
            mean: Array1::from(mean),
            components,
        })
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn components(&self) -> &Array2<f64> {
        &self.components
    }

    fn encode(&self, image: &LatentTensor) -> Result<LatentTensor> {
        if image.shape() != self.image_shape {
            let s = image.shape();
            return Err(Error::ShapeMismatch {
                expected: vec![self.image_shape.0, self.image_shape.1, self.image_shape.2],
                actual: vec![s.0, s.1, s.2],
            });
        }
        let x = &ArrayView1::from(image.as_slice()) - &self.mean;
        let z = self.components.dot(&x);
        LatentTensor::from_vec((z.len(), 1, 1), z.to_vec(), Space::Latent)
    }

    fn decode(&self, latent: &LatentTensor, with_mean: bool) -> Result<LatentTensor> {
        let k = self.components.nrows();
        if latent.len() != k {
            return Err(Error::ShapeMismatch {
                expected: vec![k, 1, 1],
                actual: vec![latent.len()],
            });
        }
        let mut x = self.components.t().dot(&ArrayView1::from(latent.as_slice()));
        if with_mean {
            x += &self.mean;
        }
        LatentTensor::from_vec(self.image_shape, x.to_vec(), Space::Pixel)
    }

    /// Mean squared reconstruction error per value.
    pub fn reconstruction_error(&self, images: &[LatentTensor]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for img in images {
            let rec = self.decode(&self.encode(img)?, true)?;
            total += rec.sub(img)?.squared_norm();
            count += img.len();
        }
        Ok(total / count.max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = LatentTensor::standard_normal((3, 4, 4), Space::Pixel, &mut rng);
        let c = LatentCodec::Identity;
        assert_eq!(c.decode(&c.encode(&x).unwrap()).unwrap(), x);
    }

    #[test]
    fn pca_reconstructs_low_rank_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let basis: Vec<LatentTensor> = (0..3)
            .map(|_| LatentTensor::standard_normal((1, 4, 4), Space::Pixel, &mut rng))
            .collect();
        let images: Vec<LatentTensor> = (0..20)
            .map(|i| {
                let a = (i as f64 * 0.37).sin();
                let b = (i as f64 * 1.3).cos();
                let c = i as f64 / 20.0;
                basis[0]
                    .axpby(a, &basis[1], b)
                    .unwrap()
                    .axpby(1.0, &basis[2], c)
                    .unwrap()
            })
            .collect();
        let codec = PcaCodec::fit(&images, 3).unwrap();
        assert!(codec.reconstruction_error(&images).unwrap() < 1e-20);
        let lc = LatentCodec::Pca(codec);
        assert_eq!(lc.latent_shape((1, 4, 4)), (3, 1, 1));
        let zero = LatentTensor::zeros((3, 1, 1), Space::Latent);
        assert_eq!(lc.decode_delta(&zero).unwrap().squared_norm(), 0.0);
        assert!(PcaCodec::fit(&images, 0).is_err());
    }
}
