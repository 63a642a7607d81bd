use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Result};

/// One-sided paired t-test of H1: mean(a - b) > 0, i.e. `a` is systematically
/// larger (worse) than `b`.
///
/// Zero-variance differences are resolved directly: p = 0 for a positive mean
/// difference, p = 1 otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(invalid("paired t-test needs at least two pairs"));
    }
    let nf = n as f64;
    let mean = a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>() / nf;
    let ss = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y - mean;
            d * d
        })
        .sum::<f64>();
    let var = ss / (nf - 1.0);
    if var <= 0.0 || !var.is_finite() {
        return Ok(if mean > 0.0 { 0.0 } else { 1.0 });
    }
    let t = mean / (var / nf).sqrt();
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| invalid(e.to_string()))?;
    Ok(dist.sf(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_give_one() {
        let a = [1.0, 2.0, 3.5];
        assert_eq!(paired_t_test(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn constant_positive_shift_gives_zero() {
        assert_eq!(paired_t_test(&[3.0, 4.0, 5.0, 6.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(paired_t_test(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0]).unwrap(), 1.0);
    }

    #[test]
    fn swapping_flips_across_one_half() {
        let a = [3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 2.5, 3.0, 4.2];
        let p = paired_t_test(&a, &b).unwrap();
        let q = paired_t_test(&b, &a).unwrap();
        assert!(p < 0.5 && q > 0.5);
        assert!((p + q - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_short_or_unequal_input() {
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }
}
