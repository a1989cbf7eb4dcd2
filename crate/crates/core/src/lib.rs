//! Numerical laboratory for the DPO loss in probability-ratio coordinates.
//!
//! * [`loss`]: closed-form loss, analytic gradient, update rate, finite differences.
//! * [`field`]: landscape and gradient-field sampling on grids, region labels.
//! * [`flow`]: gradient-flow integration, initial-condition sweeps, slow regions.
//! * [`policy`]: tabular softmax policies trained with the full DPO loss.
//! * [`export`]: CSV / JSON tables.

pub mod error;
pub mod export;
pub mod field;
pub mod flow;
pub mod loss;
pub mod policy;
pub mod verify;

pub use error::{Error, Result};
pub use export::{export_table, ExportFormat, TableRow};
pub use field::{
    classify_region, sample_field, sample_field_with, sample_landscape, Axis, FieldSample,
    GridSpec, LandscapeSample, RegionLabel, Spacing, Thresholds,
};
pub use flow::{
    detect_slow_regions, integrate_flow, sweep_initial_conditions, IntegratorConfig, Method,
    SlowInterval, SweepOptions, SweepRecord, SweepReport, Termination, Trajectory,
    TrajectoryStep,
};
pub use loss::{
    dominance, dpo_gradient, dpo_loss, dpo_loss_sigmoid_form, finite_diff_gradient, update_rate,
    Dominance, GradientVec, LossParams, RatioPoint, ReferencePair,
};
pub use policy::{
    PolicyMode, PreferenceTriple, Preset, Response, TabularPolicy, TrainConfig, TrainingTrace,
};

/// Version of the emitted table schemas.
pub const SCHEMA_VERSION: u32 = 1;
