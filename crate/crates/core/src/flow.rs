//! Gradient-flow dynamics `d(x1, x2)/dt = -grad L`.
//!
//! Along the flow `dx1/dx2 = -x2/x1`, so `x1^2 + x2^2` is conserved: every
//! trajectory is an arc of a circle about the origin. The integrators do not
//! use this; tests do.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::export::{Cell, TableRow};
use crate::field::{classify_region, GridSpec, RegionLabel, Thresholds};
use crate::loss::{
    dpo_gradient, dpo_loss, update_rate, GradientVec, LossParams, RatioPoint, DOMAIN_FLOOR,
};

/// Number of times a rejected step is halved before the floor is declared hit.
const MAX_HALVINGS: u32 = 48;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum Method {
    Euler,
    #[default]
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub step: f64,
    pub max_steps: usize,
    /// Stop once the loss is at or below this value.
    pub stop_loss: f64,
    /// Smallest admissible x2; reaching it ends the run.
    pub floor: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            step: 1e-3,
            max_steps: 1_000_000,
            stop_loss: 1e-4,
            floor: DOMAIN_FLOOR,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::domain("step", self.step, "must be positive and finite"));
        }
        if !(self.stop_loss.is_finite() && self.stop_loss >= 0.0) {
            return Err(Error::domain("stop_loss", self.stop_loss, "must be nonnegative"));
        }
        if !(self.floor.is_finite() && self.floor >= DOMAIN_FLOOR) {
            return Err(Error::domain("floor", self.floor, "must be >= 1e-8"));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Termination {
    LossReached,
    FloorHit,
    MaxSteps,
    SingularRegion,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::LossReached => "LossReached",
            Termination::FloorHit => "FloorHit",
            Termination::MaxSteps => "MaxSteps",
            Termination::SingularRegion => "SingularRegion",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrajectoryStep {
    pub t: f64,
    pub point: RatioPoint,
    pub loss: f64,
    pub grad: GradientVec,
    pub ratio: f64,
}

impl TrajectoryStep {
    fn at(t: f64, point: RatioPoint, params: &LossParams) -> Result<Self> {
        Ok(Self {
            t,
            point,
            loss: dpo_loss(&point, params),
            grad: dpo_gradient(&point, params)?,
            ratio: update_rate(&point),
        })
    }
}

impl TableRow for TrajectoryStep {
    const HEADER: &'static [&'static str] =
        &["t", "x1", "x2", "loss", "g_x1", "g_x2", "grad_norm", "ratio"];

    fn cells(&self) -> Vec<Cell> {
        vec![
            self.t.into(),
            self.point.x1().into(),
            self.point.x2().into(),
            self.loss.into(),
            self.grad.d_x1.into(),
            self.grad.d_x2.into(),
            self.grad.norm().into(),
            self.ratio.into(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub params: LossParams,
    pub config: IntegratorConfig,
    pub steps: Vec<TrajectoryStep>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn last(&self) -> &TrajectoryStep {
        self.steps.last().expect("trajectory holds the initial state")
    }

    /// Number of integration steps taken (records minus the initial one).
    pub fn step_count(&self) -> usize {
        self.steps.len() - 1
    }

    /// Index of the first record whose x1 is at least twice the initial x1.
    pub fn steps_to_x1_double(&self) -> Option<usize> {
        let target = 2.0 * self.steps[0].point.x1();
        self.steps.iter().position(|s| s.point.x1() >= target)
    }

    /// Checks x1 non-decreasing, x2 non-increasing, loss non-increasing (each up
    /// to `tol`), strictly increasing time and strictly decreasing `x2/x1`.
    /// Returns a description of every violation.
    pub fn monotonicity_violations(&self, tol: f64) -> Vec<String> {
        let mut out = Vec::new();
        for (k, w) in self.steps.windows(2).enumerate() {
            let (a, b) = (&w[0], &w[1]);
            if b.t <= a.t {
                out.push(format!("step {k}: time {} -> {}", a.t, b.t));
            }
            if b.point.x1() < a.point.x1() - tol {
                out.push(format!("step {k}: x1 {} -> {}", a.point.x1(), b.point.x1()));
            }
            if b.point.x2() > a.point.x2() + tol {
                out.push(format!("step {k}: x2 {} -> {}", a.point.x2(), b.point.x2()));
            }
            if b.loss > a.loss + tol {
                out.push(format!("step {k}: loss {} -> {}", a.loss, b.loss));
            }
            if b.ratio >= a.ratio {
                out.push(format!("step {k}: ratio {} -> {}", a.ratio, b.ratio));
            }
        }
        out
    }

    /// Steps that start with `x2 < x1` but move x1 at least as much as x2.
    pub fn speed_asymmetry_violations(&self) -> Vec<usize> {
        self.steps
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0].point.x2() < w[0].point.x1())
            .filter(|(_, w)| {
                let dx1 = w[1].point.x1() - w[0].point.x1();
                let dx2 = w[1].point.x2() - w[0].point.x2();
                dx2.abs() <= dx1
            })
            .map(|(k, _)| k)
            .collect()
    }
}

/// Flow velocity `-grad L`, or `None` outside the admissible region.
fn velocity(x1: f64, x2: f64, params: &LossParams, floor: f64) -> Option<(f64, f64)> {
    if !(x1.is_finite() && x2.is_finite()) || x2 < floor || x1 < floor {
        return None;
    }
    let p = RatioPoint::new(x1, x2).ok()?;
    let g = dpo_gradient(&p, params).ok()?;
    Some((-g.d_x1, -g.d_x2))
}

fn advance(
    method: Method,
    (x1, x2): (f64, f64),
    h: f64,
    params: &LossParams,
    floor: f64,
) -> Option<(f64, f64)> {
    let f = |a: f64, b: f64| velocity(a, b, params, floor);
    let next = match method {
        Method::Euler => {
            let k1 = f(x1, x2)?;
            (x1 + h * k1.0, x2 + h * k1.1)
        }
        Method::Rk4 => {
            let k1 = f(x1, x2)?;
            let k2 = f(x1 + 0.5 * h * k1.0, x2 + 0.5 * h * k1.1)?;
            let k3 = f(x1 + 0.5 * h * k2.0, x2 + 0.5 * h * k2.1)?;
            let k4 = f(x1 + h * k3.0, x2 + h * k3.1)?;
            (
                x1 + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
                x2 + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
            )
        }
    };
    // Rejected if it lands below the floor or fails to move x2 down.
    (next.1 >= floor && next.1 < x2 && next.0.is_finite()).then_some(next)
}

/// Integrate the flow from `init`.
///
/// A step that would take x2 below `config.floor` is retried at half the size
/// (and the smaller step is kept); after `MAX_HALVINGS` rejections x2 is
/// clamped to the floor and the run ends with [`Termination::FloorHit`].
pub fn integrate_flow(
    init: RatioPoint,
    params: &LossParams,
    config: &IntegratorConfig,
) -> Result<Trajectory> {
    config.validate()?;
    if init.x2() < config.floor || init.x1() < config.floor {
        return Err(Error::domain("init", init.x2().min(init.x1()), "initial point below the floor"));
    }
    let singular_limit = 1.0 / config.floor;
    let min_step = config.step * 0.5f64.powi(MAX_HALVINGS as i32);

    let mut steps = vec![TrajectoryStep::at(0.0, init, params)?];
    let mut h = config.step;
    let termination = loop {
        let cur = *steps.last().expect("nonempty");
        if cur.loss <= config.stop_loss {
            break Termination::LossReached;
        }
        if cur.grad.d_x2.abs() > singular_limit {
            break Termination::SingularRegion;
        }
        if steps.len() > config.max_steps {
            break Termination::MaxSteps;
        }
        if cur.point.x2() <= config.floor {
            break Termination::FloorHit;
        }
        let t_next = cur.t + h;
        // Halving stops at MAX_HALVINGS or once the step no longer advances time.
        let exhausted = h <= min_step || (h < config.step && t_next <= cur.t);
        let next = if exhausted {
            None
        } else {
            advance(config.method, (cur.point.x1(), cur.point.x2()), h, params, config.floor)
        };
        let (p, t, done) = match next {
            Some((x1, x2)) => (RatioPoint::new(x1, x2)?, t_next, false),
            None if !exhausted => {
                h *= 0.5;
                continue;
            }
            None => (
                RatioPoint::new(cur.point.x1(), config.floor)?,
                t_next.max(cur.t.next_up()),
                true,
            ),
        };
        match TrajectoryStep::at(t, p, params) {
            Ok(s) => steps.push(s),
            Err(Error::SingularRegion { .. }) => break Termination::SingularRegion,
            Err(e) => return Err(e),
        }
        if done {
            break Termination::FloorHit;
        }
    };

    Ok(Trajectory {
        params: *params,
        config: *config,
        steps,
        termination,
    })
}

/// A maximal run of records with gradient norm below a threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SlowInterval {
    pub t_start: f64,
    /// Time of the first record after the run, or of the last record when the
    /// run reaches the end of the trajectory.
    pub t_end: f64,
    pub min_grad_norm: f64,
}

impl SlowInterval {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

impl TableRow for SlowInterval {
    const HEADER: &'static [&'static str] = &["t_start", "t_end", "min_grad_norm"];

    fn cells(&self) -> Vec<Cell> {
        vec![self.t_start.into(), self.t_end.into(), self.min_grad_norm.into()]
    }
}

pub fn detect_slow_regions(traj: &Trajectory, eps: f64) -> Vec<SlowInterval> {
    let mut out = Vec::new();
    let mut open: Option<SlowInterval> = None;
    for s in &traj.steps {
        let norm = s.grad.norm();
        if norm < eps {
            match open.as_mut() {
                Some(iv) => iv.min_grad_norm = iv.min_grad_norm.min(norm),
                None => {
                    open = Some(SlowInterval {
                        t_start: s.t,
                        t_end: s.t,
                        min_grad_norm: norm,
                    })
                }
            }
        } else if let Some(mut iv) = open.take() {
            iv.t_end = s.t;
            out.push(iv);
        }
    }
    if let Some(mut iv) = open {
        iv.t_end = traj.last().t;
        out.push(iv);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepOptions {
    pub thresholds: Thresholds,
    /// Gradient-norm threshold for slow-region time.
    pub slow_eps: f64,
}

impl SweepOptions {
    pub fn for_grid(grid: &GridSpec) -> Self {
        Self {
            thresholds: Thresholds::for_grid(grid),
            slow_eps: DEFAULT_SLOW_EPS,
        }
    }
}

pub const DEFAULT_SLOW_EPS: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRecord {
    pub init: RatioPoint,
    pub region: RegionLabel,
    /// `None` when the cell failed; see `error`.
    pub termination: Option<Termination>,
    pub steps_to_stop: usize,
    pub final_point: Option<RatioPoint>,
    pub slow_time: f64,
    pub steps_to_x1_double: Option<usize>,
    pub error: Option<String>,
}

impl TableRow for SweepRecord {
    const HEADER: &'static [&'static str] = &[
        "x1_0",
        "x2_0",
        "region",
        "steps_to_stop",
        "termination",
        "final_x1",
        "final_x2",
        "slow_time",
    ];

    fn cells(&self) -> Vec<Cell> {
        let (fx1, fx2) = self
            .final_point
            .map_or((f64::NAN, f64::NAN), |p| (p.x1(), p.x2()));
        vec![
            self.init.x1().into(),
            self.init.x2().into(),
            self.region.as_str().into(),
            self.steps_to_stop.into(),
            self.termination.map_or("Error", |t| t.as_str()).into(),
            fx1.into(),
            fx2.into(),
            self.slow_time.into(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub params: LossParams,
    pub config: IntegratorConfig,
    pub options: SweepOptions,
    /// One record per grid node, row-major.
    pub records: Vec<SweepRecord>,
}

pub fn sweep_cell(
    init: RatioPoint,
    params: &LossParams,
    config: &IntegratorConfig,
    options: &SweepOptions,
) -> SweepRecord {
    let region = classify_region(&init, &options.thresholds);
    match integrate_flow(init, params, config) {
        Ok(traj) => SweepRecord {
            init,
            region,
            termination: Some(traj.termination),
            steps_to_stop: traj.step_count(),
            final_point: Some(traj.last().point),
            slow_time: detect_slow_regions(&traj, options.slow_eps)
                .iter()
                .map(SlowInterval::duration)
                .fold(0.0, |a, d| a + d),
            steps_to_x1_double: traj.steps_to_x1_double(),
            error: None,
        },
        Err(e) => SweepRecord {
            init,
            region,
            termination: None,
            steps_to_stop: 0,
            final_point: None,
            slow_time: 0.0,
            steps_to_x1_double: None,
            error: Some(e.to_string()),
        },
    }
}

pub fn sweep_initial_conditions(
    grid: &GridSpec,
    params: &LossParams,
    config: &IntegratorConfig,
    options: &SweepOptions,
) -> Result<SweepReport> {
    config.validate()?;
    let records = grid
        .nodes()
        .into_par_iter()
        .map(|p| sweep_cell(p, params, config, options))
        .collect();
    Ok(SweepReport {
        params: *params,
        config: *config,
        options: *options,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Axis, Spacing};

    fn pt(x1: f64, x2: f64) -> RatioPoint {
        RatioPoint::new(x1, x2).unwrap()
    }

    fn beta(b: f64) -> LossParams {
        LossParams::new(b).unwrap()
    }

    #[test]
    fn initial_velocity_is_symmetric() {
        let v = velocity(1.0, 1.0, &beta(0.5), DOMAIN_FLOOR).unwrap();
        assert_eq!(v, (0.25, -0.25));
    }

    #[test]
    fn single_euler_step() {
        let cfg = IntegratorConfig {
            method: Method::Euler,
            step: 0.1,
            max_steps: 1,
            ..Default::default()
        };
        let tr = integrate_flow(pt(1.0, 1.0), &beta(0.5), &cfg).unwrap();
        assert_eq!(tr.termination, Termination::MaxSteps);
        assert_eq!(tr.steps.len(), 2);
        let p = tr.last().point;
        assert!((p.x1() - 1.025).abs() < 1e-15 && (p.x2() - 0.975).abs() < 1e-15);
        assert!((tr.last().t - 0.1).abs() < 1e-15);
    }

    #[test]
    fn x2_goes_extinct_in_finite_time() {
        let tr = integrate_flow(pt(0.5, 0.5), &beta(0.1), &IntegratorConfig::default()).unwrap();
        assert_eq!(tr.termination, Termination::FloorHit);
        let end = tr.last().point;
        assert_eq!(end.x2(), 1e-8);
        // x1^2 + x2^2 is conserved: x1 -> sqrt(0.5 - 1e-16)
        assert!((end.x1() - 0.707_106_781_186_547_5).abs() < 1e-8, "{}", end.x1());
        assert!(end.x1() < 2.0 * 0.5);
        assert!(tr.monotonicity_violations(1e-9).is_empty());
    }

    #[test]
    fn config_validation() {
        let bad = IntegratorConfig {
            step: 0.0,
            ..Default::default()
        };
        assert!(integrate_flow(pt(1.0, 1.0), &beta(0.1), &bad).is_err());
        let bad = IntegratorConfig {
            floor: 1e-9,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let cfg = IntegratorConfig {
            floor: 1e-3,
            ..Default::default()
        };
        assert!(integrate_flow(pt(1.0, 1e-4), &beta(0.1), &cfg).is_err());
    }

    #[test]
    fn loss_stop_is_reached_for_large_beta() {
        // With beta = 2 the x2 decay is exponential, so the loss stop fires first.
        let tr = integrate_flow(pt(1.0, 1.0), &beta(2.0), &IntegratorConfig::default()).unwrap();
        assert_eq!(tr.termination, Termination::LossReached);
        assert!(tr.last().loss <= 1e-4);
        assert!(tr.monotonicity_violations(1e-9).is_empty());
    }

    #[test]
    fn slow_regions() {
        let cfg = IntegratorConfig::default();
        let tr = integrate_flow(pt(1.9, 1.9), &beta(0.1), &cfg).unwrap();
        let slow = detect_slow_regions(&tr, 0.05);
        assert!(!slow.is_empty());
        assert_eq!(slow[0].t_start, 0.0);
        assert!(slow[0].t_end > 0.0);
        // 0.05 * sqrt(2) / 1.9 at the start
        assert!((tr.steps[0].grad.norm() - 0.037_216_146_378_239_36).abs() < 1e-15);
        assert!(slow[0].min_grad_norm <= tr.steps[0].grad.norm());

        let tr = integrate_flow(pt(0.05, 0.95), &beta(0.5), &cfg).unwrap();
        let slow = detect_slow_regions(&tr, 0.01);
        assert!(slow.iter().all(|iv| iv.t_start > 0.0));
        assert!(tr.steps[0].grad.norm() > 1.0);

        assert!(detect_slow_regions(&tr, 0.0).is_empty());
    }

    #[test]
    fn degenerate_sweep_matches_single_run() {
        let grid = GridSpec::new(Axis::single(1.0).unwrap(), Axis::single(1.0).unwrap(), Spacing::Linear);
        let params = beta(0.3);
        let cfg = IntegratorConfig::default();
        let opts = SweepOptions {
            thresholds: Thresholds::new(0.25, 0.75).unwrap(),
            slow_eps: 0.05,
        };
        let report = sweep_initial_conditions(&grid, &params, &cfg, &opts).unwrap();
        assert_eq!(report.records.len(), 1);
        let tr = integrate_flow(pt(1.0, 1.0), &params, &cfg).unwrap();
        let r = &report.records[0];
        assert_eq!(r.termination, Some(tr.termination));
        assert_eq!(r.steps_to_stop, tr.step_count());
        assert_eq!(r.final_point, Some(tr.last().point));
        assert_eq!(r.region, RegionLabel::TopRight);
    }

    #[test]
    fn swapped_initial_conditions_are_not_mirror_images() {
        let params = beta(0.1);
        let cfg = IntegratorConfig {
            max_steps: 500,
            ..Default::default()
        };
        let a = integrate_flow(pt(0.3, 1.2), &params, &cfg).unwrap();
        let b = integrate_flow(pt(1.2, 0.3), &params, &cfg).unwrap();
        let (pa, pb) = (a.last().point, b.last().point);
        // Mirror would mean pb == (pa.x2, pa.x1).
        assert!((pb.x1() - pa.x2()).abs() > 1e-3 || (pb.x2() - pa.x1()).abs() > 1e-3);
        // x1 always rises and x2 always falls, in both runs.
        assert!(pa.x1() > 0.3 && pb.x1() > 1.2 && pa.x2() < 1.2 && pb.x2() < 0.3);
    }

    #[test]
    fn failed_cells_are_recorded() {
        let grid = GridSpec::square(1e-4, 1.0, 2, Spacing::Linear).unwrap();
        let cfg = IntegratorConfig {
            floor: 1e-3,
            max_steps: 10,
            ..Default::default()
        };
        let opts = SweepOptions::for_grid(&grid);
        let report = sweep_initial_conditions(&grid, &beta(0.1), &cfg, &opts).unwrap();
        assert_eq!(report.records.len(), 4);
        assert!(report.records[0].error.is_some());
        assert_eq!(report.records[0].cells()[4], Cell::Text("Error".into()));
        assert!(report.records[3].error.is_none());
    }
}
