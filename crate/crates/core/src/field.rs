//! Grid sampling of the loss landscape and of the gradient vector field.
//!
//! Nodes are emitted row-major: `x2` indexes rows (outer loop) and `x1` indexes
//! columns (inner loop), so consecutive samples walk along `x1` at fixed `x2`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::export::{Cell, TableRow};
use crate::loss::{
    dominance, dpo_gradient, dpo_loss, update_rate, Dominance, GradientVec, LossParams,
    RatioPoint, DEFAULT_DOMINANCE_TOL, DOMAIN_FLOOR,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Linear,
    Logarithmic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, n: usize) -> Result<Self> {
        if !(min.is_finite() && min >= DOMAIN_FLOOR) {
            return Err(Error::domain("axis min", min, "must be finite and >= 1e-8"));
        }
        if !(max.is_finite() && max > min) {
            return Err(Error::domain("axis max", max, "must be finite and greater than min"));
        }
        if n < 2 {
            return Err(Error::domain("axis samples", n as f64, "need at least 2 samples"));
        }
        Ok(Self { min, max, n })
    }

    /// Degenerate one-node axis, used by single-point sweeps.
    pub fn single(value: f64) -> Result<Self> {
        if !(value.is_finite() && value >= DOMAIN_FLOOR) {
            return Err(Error::domain("axis value", value, "must be finite and >= 1e-8"));
        }
        Ok(Self {
            min: value,
            max: value,
            n: 1,
        })
    }

    pub fn values(&self, spacing: Spacing) -> Vec<f64> {
        if self.n == 1 {
            return vec![self.min];
        }
        let last = (self.n - 1) as f64;
        (0..self.n)
            .map(|i| {
                if i == 0 {
                    return self.min;
                }
                if i + 1 == self.n {
                    return self.max;
                }
                let t = i as f64 / last;
                match spacing {
                    Spacing::Linear => self.min + (self.max - self.min) * t,
                    Spacing::Logarithmic => {
                        (self.min.ln() + (self.max.ln() - self.min.ln()) * t).exp()
                    }
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridSpec {
    pub x1: Axis,
    pub x2: Axis,
    pub spacing: Spacing,
}

impl GridSpec {
    pub fn new(x1: Axis, x2: Axis, spacing: Spacing) -> Self {
        Self { x1, x2, spacing }
    }

    /// Same axis on both coordinates.
    pub fn square(min: f64, max: f64, n: usize, spacing: Spacing) -> Result<Self> {
        let axis = Axis::new(min, max, n)?;
        Ok(Self::new(axis, axis, spacing))
    }

    pub fn len(&self) -> usize {
        self.x1.n * self.x2.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major node list.
    pub fn nodes(&self) -> Vec<RatioPoint> {
        let xs1 = self.x1.values(self.spacing);
        let xs2 = self.x2.values(self.spacing);
        xs2.iter()
            .flat_map(|&x2| {
                xs1.iter()
                    .map(move |&x1| RatioPoint::new(x1, x2).expect("axis values validated"))
            })
            .collect()
    }
}

/// `[0.01, 2]^2`, 50 x 50, linear.
impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::square(0.01, 2.0, 50, Spacing::Linear).expect("default grid is valid")
    }
}

/// Cut-offs for "small" and "large" ratio values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Thresholds {
    pub low: f64,
    pub high: f64,
}

impl Thresholds {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low.is_finite() && high.is_finite() && low < high) {
            return Err(Error::Config(format!(
                "thresholds need low < high, got low={low}, high={high}"
            )));
        }
        Ok(Self { low, high })
    }

    /// 25% and 75% of the span covered by the grid.
    pub fn for_grid(grid: &GridSpec) -> Self {
        let lo = grid.x1.min.min(grid.x2.min);
        let hi = grid.x1.max.max(grid.x2.max);
        Self {
            low: lo + 0.25 * (hi - lo),
            high: lo + 0.75 * (hi - lo),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum RegionLabel {
    /// Small x1, large x2.
    TopLeft,
    /// Both large.
    TopRight,
    /// Small x2 with x2 below x1.
    BottomLowX2,
    Interior,
}

impl RegionLabel {
    pub const ALL: [RegionLabel; 4] = [
        RegionLabel::TopLeft,
        RegionLabel::TopRight,
        RegionLabel::BottomLowX2,
        RegionLabel::Interior,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RegionLabel::TopLeft => "TopLeft",
            RegionLabel::TopRight => "TopRight",
            RegionLabel::BottomLowX2 => "BottomLowX2",
            RegionLabel::Interior => "Interior",
        }
    }
}

impl std::fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// First match wins: TopLeft, TopRight, BottomLowX2, Interior.
///
/// BottomLowX2 also requires `x2 < x1`. Low-x2 nodes on or above the diagonal
/// (the lower-left corner) fall through to Interior.
pub fn classify_region(p: &RatioPoint, t: &Thresholds) -> RegionLabel {
    let (x1, x2) = (p.x1(), p.x2());
    if x1 <= t.low && x2 >= t.high {
        RegionLabel::TopLeft
    } else if x1 >= t.high && x2 >= t.high {
        RegionLabel::TopRight
    } else if x2 <= t.low && x2 < x1 {
        RegionLabel::BottomLowX2
    } else {
        RegionLabel::Interior
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LandscapeSample {
    pub point: RatioPoint,
    pub loss: f64,
}

impl TableRow for LandscapeSample {
    const HEADER: &'static [&'static str] = &["x1", "x2", "loss"];

    fn cells(&self) -> Vec<Cell> {
        vec![self.point.x1().into(), self.point.x2().into(), self.loss.into()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FieldSample {
    pub point: RatioPoint,
    pub loss: f64,
    pub grad: GradientVec,
    pub grad_norm: f64,
    /// Unit descent direction `-grad / |grad|`.
    pub unit_dir: (f64, f64),
    pub ratio: f64,
    pub region: RegionLabel,
}

impl FieldSample {
    pub fn at(p: RatioPoint, params: &LossParams, thresholds: &Thresholds) -> Result<Self> {
        let grad = dpo_gradient(&p, params)?;
        Ok(Self {
            point: p,
            loss: dpo_loss(&p, params),
            grad,
            grad_norm: grad.norm(),
            unit_dir: grad.descent_direction().unwrap_or((0.0, 0.0)),
            ratio: update_rate(&p),
            region: classify_region(&p, thresholds),
        })
    }

    pub fn dominance(&self) -> Dominance {
        dominance(&self.point, DEFAULT_DOMINANCE_TOL)
    }
}

impl TableRow for FieldSample {
    const HEADER: &'static [&'static str] = &[
        "x1", "x2", "loss", "g_x1", "g_x2", "grad_norm", "dir_x1", "dir_x2", "ratio", "region",
    ];

    fn cells(&self) -> Vec<Cell> {
        vec![
            self.point.x1().into(),
            self.point.x2().into(),
            self.loss.into(),
            self.grad.d_x1.into(),
            self.grad.d_x2.into(),
            self.grad_norm.into(),
            self.unit_dir.0.into(),
            self.unit_dir.1.into(),
            self.ratio.into(),
            self.region.as_str().into(),
        ]
    }
}

pub fn sample_landscape(grid: &GridSpec, params: &LossParams) -> Vec<LandscapeSample> {
    grid.nodes()
        .into_par_iter()
        .map(|point| LandscapeSample {
            point,
            loss: dpo_loss(&point, params),
        })
        .collect()
}

/// Field samples with the default thresholds for `grid`.
pub fn sample_field(grid: &GridSpec, params: &LossParams) -> Result<Vec<FieldSample>> {
    sample_field_with(grid, params, &Thresholds::for_grid(grid))
}

pub fn sample_field_with(
    grid: &GridSpec,
    params: &LossParams,
    thresholds: &Thresholds,
) -> Result<Vec<FieldSample>> {
    grid.nodes()
        .into_par_iter()
        .map(|p| FieldSample::at(p, params, thresholds))
        .collect()
}

/// Point reflected through (1, 1) in log coordinates: `(1/x1, 1/x2)`.
pub fn reflect_low_corner(p: &RatioPoint) -> Result<RatioPoint> {
    RatioPoint::new(1.0 / p.x1(), 1.0 / p.x2())
}

/// Aggregate region statistics over a sampled field.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RegionSummary {
    pub top_left: usize,
    pub top_right: usize,
    pub bottom_low_x2: usize,
    pub interior: usize,
    pub top_left_x1_dominant: usize,
    pub bottom_low_x2_x2_dominant: usize,
    /// Mean gradient norm over TopRight nodes.
    pub top_right_mean_norm: f64,
    /// Mean gradient norm at the reflections `(1/x1, 1/x2)` of the TopRight nodes.
    pub reflected_mean_norm: f64,
}

pub fn summarize_regions(samples: &[FieldSample], params: &LossParams) -> Result<RegionSummary> {
    let mut s = RegionSummary::default();
    let mut tr_sum = 0.0;
    let mut refl_sum = 0.0;
    for sample in samples {
        match sample.region {
            RegionLabel::TopLeft => {
                s.top_left += 1;
                if sample.dominance() == Dominance::X1Dominant {
                    s.top_left_x1_dominant += 1;
                }
            }
            RegionLabel::TopRight => {
                s.top_right += 1;
                tr_sum += sample.grad_norm;
                let reflected = reflect_low_corner(&sample.point)?;
                refl_sum += dpo_gradient(&reflected, params)?.norm();
            }
            RegionLabel::BottomLowX2 => {
                s.bottom_low_x2 += 1;
                if sample.dominance() == Dominance::X2Dominant {
                    s.bottom_low_x2_x2_dominant += 1;
                }
            }
            RegionLabel::Interior => s.interior += 1,
        }
    }
    if s.top_right > 0 {
        s.top_right_mean_norm = tr_sum / s.top_right as f64;
        s.reflected_mean_norm = refl_sum / s.top_right as f64;
    }
    Ok(s)
}
