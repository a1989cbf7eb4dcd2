//! Analytic-versus-finite-difference gradient checks over seeded samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{dpo_gradient, finite_diff_gradient, GradientVec, LossParams, RatioPoint};

/// Sampling box for gradient checks.
pub const CHECK_DOMAIN: (f64, f64) = (0.01, 2.0);

pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// `n` points drawn uniformly from `[lo, hi]^2`, reproducible from `seed`.
pub fn sample_points(n: usize, seed: u64, (lo, hi): (f64, f64)) -> Result<Vec<RatioPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| RatioPoint::new(rng.random_range(lo..=hi), rng.random_range(lo..=hi)))
        .collect()
}

/// Largest componentwise `|analytic - numeric| / |analytic|`.
pub fn relative_error(analytic: &GradientVec, numeric: &GradientVec) -> f64 {
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs();
    rel(analytic.d_x1, numeric.d_x1).max(rel(analytic.d_x2, numeric.d_x2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub samples: usize,
    pub beta: f64,
    pub h: f64,
    pub max_rel_err: f64,
    pub worst_point: RatioPoint,
}

pub fn check_gradients(points: &[RatioPoint], params: &LossParams, h: f64) -> Result<GradCheckReport> {
    let first = *points
        .first()
        .ok_or_else(|| Error::Config("gradient check needs at least one sample".into()))?;
    let mut worst = (0.0, first);
    for p in points {
        let err = relative_error(&dpo_gradient(p, params)?, &finite_diff_gradient(p, params, h)?);
        if err > worst.0 || err.is_nan() {
            worst = (err, *p);
        }
    }
    Ok(GradCheckReport {
        samples: points.len(),
        beta: params.beta(),
        h,
        max_rel_err: worst.0,
        worst_point: worst.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_point_is_nearly_exact() {
        let p = [RatioPoint::new(1.0, 1.0).unwrap()];
        let r = check_gradients(&p, &LossParams::new(0.5).unwrap(), DEFAULT_FD_STEP).unwrap();
        assert!(r.max_rel_err < 1e-9, "{}", r.max_rel_err);
    }

    #[test]
    fn seeded_samples_are_reproducible_and_in_range() {
        let a = sample_points(100, 42, CHECK_DOMAIN).unwrap();
        let b = sample_points(100, 42, CHECK_DOMAIN).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_points(100, 43, CHECK_DOMAIN).unwrap());
        assert!(a.iter().all(|p| (0.01..=2.0).contains(&p.x1()) && (0.01..=2.0).contains(&p.x2())));
    }

    #[test]
    fn thousand_samples_pass() {
        let pts = sample_points(1000, 42, CHECK_DOMAIN).unwrap();
        let r = check_gradients(&pts, &LossParams::new(0.1).unwrap(), DEFAULT_FD_STEP).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn empty_sample_is_error() {
        assert!(check_gradients(&[], &LossParams::default(), 1e-6).is_err());
    }
}
