use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Row/column layout of the class-conditioning matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningLayout {
    pub rows: usize,
    pub cols: usize,
}

impl ConditioningLayout {
    /// Default layout for `num_classes`: 8 rows, `max(K, 8)` columns.
    pub fn for_classes(num_classes: usize) -> Self {
        Self {
            rows: 8,
            cols: num_classes.max(8),
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Class condition fed to the denoiser: the one-hot class vector replicated
/// down the rows and zero-padded across the columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningMatrix {
    matrix: Array2<f64>,
    class_index: Option<usize>,
}

impl ConditioningMatrix {
    pub fn one_hot(class: usize, layout: ConditioningLayout) -> Result<Self> {
        if class >= layout.cols {
            return Err(invalid(format!(
                "class {class} does not fit a conditioning matrix with {} columns",
                layout.cols
            )));
        }
        let mut matrix = Array2::zeros((layout.rows, layout.cols));
        matrix.column_mut(class).fill(1.0);
        Ok(Self {
            matrix,
            class_index: Some(class),
        })
    }

    /// Convex blend `lambda * self + (1 - lambda) * other`.
    pub fn mix(&self, other: &ConditioningMatrix, lambda: f64) -> Result<Self> {
        if self.matrix.dim() != other.matrix.dim() {
            return Err(invalid("conditioning matrices differ in shape"));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(invalid(format!("mix weight {lambda} outside [0, 1]")));
        }
        let matrix = &self.matrix * lambda + &other.matrix * (1.0 - lambda);
        let class_index = if lambda == 1.0 {
            self.class_index
        } else if lambda == 0.0 {
            other.class_index
        } else {
            None
        };
        Ok(Self {
            matrix,
            class_index,
        })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn class_index(&self) -> Option<usize> {
        self.class_index
    }

    pub fn layout(&self) -> ConditioningLayout {
        let (rows, cols) = self.matrix.dim();
        ConditioningLayout { rows, cols }
    }

    pub fn as_slice(&self) -> &[f64] {
        self.matrix.as_slice().expect("standard layout")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_replicates_rows() {
        let layout = ConditioningLayout::for_classes(3);
        assert_eq!(layout, ConditioningLayout { rows: 8, cols: 8 });
        let c = ConditioningMatrix::one_hot(2, layout).unwrap();
        for row in c.matrix().rows() {
            assert_eq!(row.sum(), 1.0);
            assert_eq!(row[2], 1.0);
        }
        assert!(ConditioningMatrix::one_hot(8, layout).is_err());
        assert_eq!(ConditioningLayout::for_classes(12).cols, 12);
    }

    #[test]
    fn mixed_rows_are_convex() {
        let layout = ConditioningLayout::for_classes(4);
        let a = ConditioningMatrix::one_hot(0, layout).unwrap();
        let b = ConditioningMatrix::one_hot(3, layout).unwrap();
        let m = a.mix(&b, 0.3).unwrap();
        assert_eq!(m.class_index(), None);
        for row in m.matrix().rows() {
            assert!((row.iter().filter(|v| **v > 0.0).sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert_eq!(a.mix(&b, 1.0).unwrap(), a);
    }
}
