//! DPO loss in probability-ratio coordinates.
//!
//! With `x1 = pi(y_w|x) / pi_ref(y_w|x)` and `x2 = pi(y_l|x) / pi_ref(y_l|x)` the
//! loss is `-log(x1^b / (x1^b + x2^b))`, i.e. `softplus(-m)` for the margin
//! `m = b * (ln x1 - ln x2)`. Everything here is evaluated through the margin so
//! that large `x^b` never materializes.

use serde::Serialize;

use crate::error::{Error, Result};

/// Smallest admissible ratio value. Inputs below it are rejected.
pub const DOMAIN_FLOOR: f64 = 1e-8;

/// Gradient components larger than this are reported as a singular region.
pub const GRADIENT_GUARD: f64 = 1.0 / DOMAIN_FLOOR;

pub const DEFAULT_BETA: f64 = 0.1;

/// Range of `beta` accepted by the command line front end.
pub const BETA_RANGE: (f64, f64) = (0.01, 2.0);

/// Default relative tolerance for [`dominance`].
pub const DEFAULT_DOMINANCE_TOL: f64 = 1e-9;

fn check_ratio(what: &'static str, value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::domain(what, value, "must be finite"));
    }
    if value < DOMAIN_FLOOR {
        return Err(Error::domain(what, value, "below the domain floor 1e-8"));
    }
    Ok(value)
}

fn check_probability(what: &'static str, value: f64) -> Result<f64> {
    if !(value > 0.0 && value <= 1.0) {
        return Err(Error::domain(what, value, "must lie in (0, 1]"));
    }
    Ok(value)
}

/// A point `(x1, x2)` in probability-ratio space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RatioPoint {
    x1: f64,
    x2: f64,
}

impl RatioPoint {
    pub fn new(x1: f64, x2: f64) -> Result<Self> {
        Ok(Self {
            x1: check_ratio("x1", x1)?,
            x2: check_ratio("x2", x2)?,
        })
    }

    /// Ratio point implied by policy and reference probabilities.
    pub fn from_probabilities(pi_w: f64, pi_l: f64, refs: ReferencePair) -> Result<Self> {
        let pi_w = check_probability("pi_w", pi_w)?;
        let pi_l = check_probability("pi_l", pi_l)?;
        Self::new(pi_w / refs.ref_w, pi_l / refs.ref_l)
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }

    #[inline]
    pub fn x2(&self) -> f64 {
        self.x2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossParams {
    beta: f64,
}

impl LossParams {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::domain("beta", beta, "must be positive and finite"));
        }
        Ok(Self { beta })
    }

    #[inline]
    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl Default for LossParams {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA }
    }
}

/// Reference-model probabilities of the preferred and dispreferred response.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReferencePair {
    ref_w: f64,
    ref_l: f64,
}

impl ReferencePair {
    pub fn new(ref_w: f64, ref_l: f64) -> Result<Self> {
        Ok(Self {
            ref_w: check_probability("ref_w", ref_w)?,
            ref_l: check_probability("ref_l", ref_l)?,
        })
    }

    pub fn ref_w(&self) -> f64 {
        self.ref_w
    }

    pub fn ref_l(&self) -> f64 {
        self.ref_l
    }
}

/// Both references equal to one: the reference model is absent.
impl Default for ReferencePair {
    fn default() -> Self {
        Self {
            ref_w: 1.0,
            ref_l: 1.0,
        }
    }
}

/// `(dL/dx1, dL/dx2)` at a point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradientVec {
    pub d_x1: f64,
    pub d_x2: f64,
}

impl GradientVec {
    pub fn norm(&self) -> f64 {
        self.d_x1.hypot(self.d_x2)
    }

    /// Unit descent direction `-grad / |grad|`; `None` for a zero gradient.
    pub fn descent_direction(&self) -> Option<(f64, f64)> {
        let n = self.norm();
        (n > 0.0).then(|| (-self.d_x1 / n, -self.d_x2 / n))
    }
}

/// Which coordinate the loss acts on more strongly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Dominance {
    /// `|dL/dx2| > |dL/dx1|`, equivalently `x2 < x1`.
    X2Dominant,
    X1Dominant,
    Balanced,
}

/// `ln(1 + e^t)` without overflow.
#[inline]
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Logistic function, evaluated on the side that cannot overflow.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `b * (ln x1 - ln x2)`.
#[inline]
pub fn margin(p: &RatioPoint, params: &LossParams) -> f64 {
    params.beta * (p.x1.ln() - p.x2.ln())
}

/// `-log(x1^b / (x1^b + x2^b))`.
pub fn dpo_loss(p: &RatioPoint, params: &LossParams) -> f64 {
    softplus(-margin(p, params))
}

/// `-log sigmoid(b log(pi_w/ref_w) - b log(pi_l/ref_l))`, evaluated directly from
/// the four probabilities.
pub fn dpo_loss_sigmoid_form(
    pi_w: f64,
    pi_l: f64,
    refs: &ReferencePair,
    params: &LossParams,
) -> Result<f64> {
    let pi_w = check_probability("pi_w", pi_w)?;
    let pi_l = check_probability("pi_l", pi_l)?;
    let z = params.beta * ((pi_w.ln() - refs.ref_w.ln()) - (pi_l.ln() - refs.ref_l.ln()));
    Ok(-log_sigmoid(z))
}

#[inline]
fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// Analytic gradient.
///
/// Both partials share the factor `b * x2^b / (x1^b + x2^b) = b * sigmoid(-m)`,
/// giving `dL/dx1 = -b*s/x1` and `dL/dx2 = b*s/x2`.
pub fn dpo_gradient(p: &RatioPoint, params: &LossParams) -> Result<GradientVec> {
    let bs = params.beta * sigmoid(-margin(p, params));
    let grad = GradientVec {
        d_x1: -bs / p.x1,
        d_x2: bs / p.x2,
    };
    let magnitude = grad.d_x1.abs().max(grad.d_x2.abs());
    if !magnitude.is_finite() || magnitude > GRADIENT_GUARD {
        return Err(Error::SingularRegion {
            x1: p.x1,
            x2: p.x2,
            magnitude,
        });
    }
    Ok(grad)
}

/// Central finite differences of [`dpo_loss`] with stencil half-width `h`.
pub fn finite_diff_gradient(p: &RatioPoint, params: &LossParams, h: f64) -> Result<GradientVec> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::domain("h", h, "must be positive and finite"));
    }
    let loss = |x1: f64, x2: f64| -> Result<f64> {
        Ok(dpo_loss(&RatioPoint::new(x1, x2)?, params))
    };
    let (x1, x2) = (p.x1, p.x2);
    Ok(GradientVec {
        d_x1: (loss(x1 + h, x2)? - loss(x1 - h, x2)?) / (2.0 * h),
        d_x2: (loss(x1, x2 + h)? - loss(x1, x2 - h)?) / (2.0 * h),
    })
}

/// `x2 / x1`: how fast x1 rises relative to how fast x2 falls.
pub fn update_rate(p: &RatioPoint) -> f64 {
    p.x2 / p.x1
}

pub fn dominance(p: &RatioPoint, tol: f64) -> Dominance {
    let rate = update_rate(p);
    if rate < 1.0 - tol {
        Dominance::X2Dominant
    } else if rate > 1.0 + tol {
        Dominance::X1Dominant
    } else {
        Dominance::Balanced
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn pt(x1: f64, x2: f64) -> RatioPoint {
        RatioPoint::new(x1, x2).unwrap()
    }

    fn beta(b: f64) -> LossParams {
        LossParams::new(b).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn loss_examples() {
        assert_eq!(dpo_loss(&pt(1.0, 1.0), &beta(0.3)), LN_2);
        assert!(rel(dpo_loss(&pt(2.0, 1.0), &beta(1.0)), -(2.0f64 / 3.0).ln()) < 1e-15);
        // 40-digit evaluation of the closed form.
        assert!(rel(dpo_loss(&pt(2.0, 0.5), &beta(0.1)), 0.626_232_806_408_696) < 1e-14);
    }

    #[test]
    fn loss_large_ratios_do_not_overflow() {
        let l = dpo_loss(&pt(1e300, 1e-8), &beta(2.0));
        assert!(l.is_finite() && l >= 0.0);
        let l = dpo_loss(&pt(1e-8, 1e300), &beta(2.0));
        assert!(l.is_finite() && l > 1000.0);
    }

    #[test]
    fn sigmoid_form_examples() {
        let refs = ReferencePair::new(0.5, 0.5).unwrap();
        let l = dpo_loss_sigmoid_form(0.5, 0.5, &refs, &beta(0.2)).unwrap();
        assert_eq!(l, LN_2);

        let l = dpo_loss_sigmoid_form(0.8, 0.2, &ReferencePair::default(), &beta(1.0)).unwrap();
        assert!(rel(l, 0.223_143_551_314_209_76) < 1e-14);

        let refs = ReferencePair::new(0.4, 0.5).unwrap();
        let a = dpo_loss_sigmoid_form(0.3, 0.6, &refs, &beta(0.5)).unwrap();
        let b = dpo_loss(&pt(0.75, 1.2), &beta(0.5));
        assert!(rel(a, b) < 1e-12);
        assert!(rel(a, 0.817_535_492_851_667_3) < 1e-14);
    }

    #[test]
    fn sigmoid_form_rejects_bad_probabilities() {
        let refs = ReferencePair::default();
        assert!(dpo_loss_sigmoid_form(0.0, 0.5, &refs, &beta(0.1)).is_err());
        assert!(dpo_loss_sigmoid_form(0.5, 1.5, &refs, &beta(0.1)).is_err());
        assert!(ReferencePair::new(0.0, 1.0).is_err());
    }

    #[test]
    fn gradient_examples() {
        let g = dpo_gradient(&pt(1.0, 1.0), &beta(0.5)).unwrap();
        assert_eq!((g.d_x1, g.d_x2), (-0.25, 0.25));
        let g = dpo_gradient(&pt(1.0, 1.0), &beta(0.1)).unwrap();
        assert_eq!((g.d_x1, g.d_x2), (-0.05, 0.05));

        let g = dpo_gradient(&pt(2.0, 0.5), &beta(0.1)).unwrap();
        assert!(rel(g.d_x1, -0.023_269_901_930_961_824) < 1e-13);
        assert!(rel(g.d_x2, 0.093_079_607_723_847_3) < 1e-13);
        assert!(rel(g.d_x1.abs() / g.d_x2, 0.25) < 1e-15);
    }

    #[test]
    fn gradient_singular_region_is_flagged() {
        // b*s/x2 with s close to one and x2 at the floor.
        let p = pt(1e-8, 1e-8);
        match dpo_gradient(&p, &beta(2.0 + 1e-3)) {
            Err(Error::SingularRegion { .. }) => {}
            other => panic!("expected singular region, got {other:?}"),
        }
    }

    #[test]
    fn finite_difference_examples() {
        let fd = finite_diff_gradient(&pt(1.0, 1.0), &beta(0.5), 1e-5).unwrap();
        assert!((fd.d_x1 + 0.25).abs() < 1e-9 && (fd.d_x2 - 0.25).abs() < 1e-9);

        for (x1, x2, b, h, tol) in [(2.0, 0.5, 0.1, 1e-6, 1e-6), (0.05, 0.95, 0.3, 1e-7, 1e-5)] {
            let p = pt(x1, x2);
            let fd = finite_diff_gradient(&p, &beta(b), h).unwrap();
            let an = dpo_gradient(&p, &beta(b)).unwrap();
            assert!(rel(fd.d_x1, an.d_x1) < tol, "{fd:?} vs {an:?}");
            assert!(rel(fd.d_x2, an.d_x2) < tol, "{fd:?} vs {an:?}");
        }
    }

    #[test]
    fn finite_difference_stencil_must_stay_in_domain() {
        let err = finite_diff_gradient(&pt(1.0, 1e-7), &beta(0.1), 1e-6).unwrap_err();
        assert!(matches!(err, Error::Domain { what: "x2", .. }));
        assert!(finite_diff_gradient(&pt(1.0, 1.0), &beta(0.1), 0.0).is_err());
    }

    #[test]
    fn update_rate_and_dominance() {
        assert_eq!(update_rate(&pt(1.0, 1.0)), 1.0);
        assert_eq!(update_rate(&pt(2.0, 0.5)), 0.25);
        assert!(rel(update_rate(&pt(0.1, 0.9)), 9.0) < 1e-15);

        assert_eq!(dominance(&pt(2.0, 0.5), 0.0), Dominance::X2Dominant);
        assert_eq!(dominance(&pt(1.0, 1.0), 0.01), Dominance::Balanced);
        assert_eq!(dominance(&pt(0.05, 0.95), 0.0), Dominance::X1Dominant);
    }

    #[test]
    fn constructors_validate() {
        assert!(RatioPoint::new(0.0, 1.0).is_err());
        assert!(RatioPoint::new(1.0, -1.0).is_err());
        assert!(RatioPoint::new(1.0, f64::INFINITY).is_err());
        assert!(RatioPoint::new(1.0, 5e-9).is_err());
        assert!(LossParams::new(0.0).is_err());
        assert!(LossParams::new(-0.5).is_err());
        assert!(LossParams::new(f64::NAN).is_err());
        assert_eq!(LossParams::default().beta(), DEFAULT_BETA);
    }

    #[test]
    fn stable_helpers() {
        assert_eq!(softplus(0.0), LN_2);
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
    }
}
