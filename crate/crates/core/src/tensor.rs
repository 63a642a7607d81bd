use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which space a tensor lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Pixel,
    Latent,
}

/// A (channels, height, width) real tensor: an image, a latent code, or a
/// noise sample of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    data: Array3<f64>,
    space: Space,
}

impl LatentTensor {
    pub fn new(data: Array3<f64>, space: Space) -> Self {
        Self { data, space }
    }

    pub fn zeros(shape: (usize, usize, usize), space: Space) -> Self {
        Self::new(Array3::zeros(shape), space)
    }

    pub fn from_vec(shape: (usize, usize, usize), values: Vec<f64>, space: Space) -> Result<Self> {
        let n = values.len();
        let data = Array3::from_shape_vec(shape, values).map_err(|_| Error::ShapeMismatch {
            expected: vec![shape.0, shape.1, shape.2],
            actual: vec![n],
        })?;
        Ok(Self::new(data, space))
    }

    /// Standard normal noise of the given shape.
    pub fn standard_normal<R: Rng + ?Sized>(
        shape: (usize, usize, usize),
        space: Space,
        rng: &mut R,
    ) -> Self {
        let data = Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal));
        Self::new(data, space)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn with_space(mut self, space: Space) -> Self {
        self.space = space;
        self
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Row-major contiguous values.
    pub fn as_slice(&self) -> &[f64] {
        self.data
            .as_slice()
            .expect("latent tensors are always standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.data
            .as_slice_mut()
            .expect("latent tensors are always standard layout")
    }

    pub fn ensure_same_shape(&self, other: &LatentTensor) -> Result<()> {
        if self.shape() != other.shape() {
            let (a, b) = (self.shape(), other.shape());
            return Err(Error::ShapeMismatch {
                expected: vec![a.0, a.1, a.2],
                actual: vec![b.0, b.1, b.2],
            });
        }
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    pub fn axpby(&self, a: f64, other: &LatentTensor, b: f64) -> Result<LatentTensor> {
        self.ensure_same_shape(other)?;
        let mut out = Array3::zeros(self.shape());
        Zip::from(&mut out)
            .and(&self.data)
            .and(&other.data)
            .for_each(|o, &x, &y| *o = a * x + b * y);
        Ok(LatentTensor::new(out, self.space))
    }

    pub fn sub(&self, other: &LatentTensor) -> Result<LatentTensor> {
        self.axpby(1.0, other, -1.0)
    }

    pub fn scale(&self, k: f64) -> LatentTensor {
        LatentTensor::new(self.data.mapv(|x| k * x), self.space)
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(LatentTensor::from_vec((1, 2, 2), vec![0.0; 3], Space::Pixel).is_err());
        let t = LatentTensor::from_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0], Space::Pixel).unwrap();
        assert_eq!(t.squared_norm(), 30.0);
    }

    #[test]
    fn axpby_checks_shape() {
        let a = LatentTensor::zeros((1, 2, 2), Space::Pixel);
        let b = LatentTensor::zeros((1, 2, 3), Space::Pixel);
        assert!(matches!(a.axpby(1.0, &b, 1.0), Err(Error::ShapeMismatch { .. })));
    }
}
