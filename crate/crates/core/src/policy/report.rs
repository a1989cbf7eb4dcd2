use serde::Serialize;

use super::train::TrainingTrace;
use crate::error::{Error, Result};
use crate::export::{Cell, TableRow};

/// Movement of the tracked triple during one update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateStep {
    /// Update index: state `step - 1` to state `step`.
    pub step: usize,
    pub d_pi_w: f64,
    pub d_pi_l: f64,
    pub dlog_x1: f64,
    pub dlog_x2: f64,
    /// Running sum of `d_pi_w`.
    pub cum_gain_w: f64,
    /// Running sum of `-d_pi_l`.
    pub cum_loss_l: f64,
    /// Whether the update started from a state with `x2 < x1`.
    pub x2_below_x1: bool,
}

impl TableRow for RateStep {
    const HEADER: &'static [&'static str] = &[
        "step",
        "d_pi_w",
        "d_pi_l",
        "dlog_x1",
        "dlog_x2",
        "cum_gain_w",
        "cum_loss_l",
        "x2_below_x1",
    ];

    fn cells(&self) -> Vec<Cell> {
        vec![
            self.step.into(),
            self.d_pi_w.into(),
            self.d_pi_l.into(),
            self.dlog_x1.into(),
            self.dlog_x2.into(),
            self.cum_gain_w.into(),
            self.cum_loss_l.into(),
            (self.x2_below_x1 as u64).into(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateAsymmetryReport {
    pub steps: Vec<RateStep>,
    pub cum_gain_w: f64,
    pub cum_loss_l: f64,
    /// Fraction of updates where `|dlog x2| > |dlog x1|`.
    pub dispreferred_faster_fraction: f64,
    /// Discretization allowance, `lr^2`.
    pub slack: f64,
    /// Updates starting from `x2 < x1` with `|dlog x2| < |dlog x1| - slack`.
    pub violations: Vec<usize>,
    /// Every recorded movement is exactly zero.
    pub degenerate: bool,
}

impl RateAsymmetryReport {
    /// No update that started below the diagonal moved x1 faster than x2.
    pub fn asymmetry_holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Compare how fast the preferred and dispreferred sides move along a trace.
pub fn rate_asymmetry_report(trace: &TrainingTrace) -> Result<RateAsymmetryReport> {
    if trace.records.len() < 2 {
        return Err(Error::Config(format!(
            "rate report needs at least 2 trace records, got {}",
            trace.records.len()
        )));
    }
    let slack = trace.config.lr * trace.config.lr;
    let mut steps = Vec::with_capacity(trace.records.len() - 1);
    let (mut gain, mut loss) = (0.0, 0.0);
    let mut faster = 0usize;
    let mut violations = Vec::new();
    for w in trace.records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let dlog_x1 = b.x1.ln() - a.x1.ln();
        let dlog_x2 = b.x2.ln() - a.x2.ln();
        let d_pi_w = b.pi_w - a.pi_w;
        let d_pi_l = b.pi_l - a.pi_l;
        gain += d_pi_w;
        loss -= d_pi_l;
        let x2_below_x1 = a.x2 < a.x1;
        if dlog_x2.abs() > dlog_x1.abs() {
            faster += 1;
        }
        if x2_below_x1 && dlog_x2.abs() < dlog_x1.abs() - slack {
            violations.push(b.step);
        }
        steps.push(RateStep {
            step: b.step,
            d_pi_w,
            d_pi_l,
            dlog_x1,
            dlog_x2,
            cum_gain_w: gain,
            cum_loss_l: loss,
            x2_below_x1,
        });
    }
    let degenerate = steps
        .iter()
        .all(|s| s.d_pi_w == 0.0 && s.d_pi_l == 0.0 && s.dlog_x1 == 0.0 && s.dlog_x2 == 0.0);
    Ok(RateAsymmetryReport {
        dispreferred_faster_fraction: faster as f64 / steps.len() as f64,
        steps,
        cum_gain_w: gain,
        cum_loss_l: loss,
        slack,
        violations,
        degenerate,
    })
}
