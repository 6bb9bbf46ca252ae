//! Trajectory error and summary statistics.

use thiserror::Error;

use crate::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trajectories differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Root mean square of position differences, no alignment. Empty input
/// gives 0.
pub fn compute_ate(estimated: &[Vec3], reference: &[Vec3]) -> Result<f64, MetricsError> {
    if estimated.len() != reference.len() {
        return Err(MetricsError::LengthMismatch(estimated.len(), reference.len()));
    }
    if estimated.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = estimated.iter().zip(reference).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok((sum / estimated.len() as f64).sqrt())
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Nearest-rank percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_is_zero() {
        let a = vec![Vec3::new(1.0, 2.0, 3.0); 5];
        assert_eq!(compute_ate(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset() {
        let a: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let b: Vec<Vec3> = a.iter().map(|p| p + Vec3::new(0.0, 0.02, 0.0)).collect();
        assert!((compute_ate(&b, &a).unwrap() - 0.02).abs() < 1e-12);
    }

    #[test]
    fn matches_independent_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<Vec3> = (0..100).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let b: Vec<Vec3> = (0..100).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let mut acc = 0.0;
        for i in 0..100 {
            for axis in 0..3 {
                acc += (a[i][axis] - b[i][axis]).powi(2);
            }
        }
        let expect = (acc / 100.0).sqrt();
        assert!((compute_ate(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(compute_ate(&[Vec3::zeros()], &[]), Err(MetricsError::LengthMismatch(1, 0)));
    }

    #[test]
    fn percentile_nearest_rank() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(percentile(&v, 50.0), Some(3.0));
        assert_eq!(percentile(&v, 95.0), Some(5.0));
        assert_eq!(percentile(&[], 50.0), None);
    }
}
