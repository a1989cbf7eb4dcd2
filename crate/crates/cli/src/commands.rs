use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use dpo_lab::field::summarize_regions;
use dpo_lab::policy::{
    default_dataset, parse_dataset, rate_asymmetry_report, train, PolicyMode, Preset,
    TabularPolicy, TrainConfig,
};
use dpo_lab::verify::{check_gradients, sample_points, CHECK_DOMAIN};
use dpo_lab::{
    detect_slow_regions, export_table, integrate_flow, sample_field_with, sample_landscape,
    sweep_initial_conditions, Error, ExportFormat, GridSpec, IntegratorConfig, LossParams,
    RatioPoint, SweepOptions, TableRow, Thresholds, SCHEMA_VERSION,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{
    CheckGradCmd, Command, Common, FieldCmd, FlowCmd, GridArgs, GridCmd, IntegratorArgs,
    ReferenceArg, SweepCmd, ThresholdArgs, TrainCmd,
};

/// Gradient checks pass below this relative error.
const GRAD_TOL: f64 = 1e-6;

#[derive(Debug)]
pub enum Failure {
    /// Arguments parsed but do not form a valid configuration.
    Usage(String),
    /// The output directory or a file in it could not be written.
    Output(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn report(&self) -> ExitCode {
        match self {
            Failure::Usage(msg) => {
                eprintln!("usage error: {msg}");
                ExitCode::from(2)
            }
            Failure::Output(e) => {
                eprintln!("output error: {e:#}");
                ExitCode::from(1)
            }
            Failure::Runtime(e) => {
                eprintln!("runtime error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}

fn usage(flag: &str, e: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("{flag}: {e}"))
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e.into())
}

type Outcome = Result<ExitCode, Failure>;

/// Collects the files of one run and writes them under the output directory.
struct Output {
    dir: PathBuf,
    format: ExportFormat,
    written: Vec<String>,
    started: Instant,
}

impl Output {
    fn create(common: &Common) -> Result<Self, Failure> {
        fs::create_dir_all(&common.out)
            .with_context(|| format!("cannot create {}", common.out.display()))
            .map_err(Failure::Output)?;
        Ok(Self {
            dir: common.out.clone(),
            format: common.format.into(),
            written: Vec::new(),
            started: Instant::now(),
        })
    }

    fn table<R: TableRow>(&mut self, stem: &str, rows: &[R]) -> Result<PathBuf, Failure> {
        let name = format!("{stem}.{}", self.format.extension());
        let path = self.dir.join(&name);
        export_table(rows, self.format, &path).map_err(|e| match e {
            Error::Io { .. } | Error::Csv { .. } | Error::Json { .. } => Failure::Output(e.into()),
            other => runtime(other),
        })?;
        self.written.push(name);
        Ok(path)
    }

    fn finish(self, command: &str, params: Value) -> Result<(), Failure> {
        #[derive(Serialize)]
        struct Meta<'a> {
            command: &'a str,
            params: Value,
            schema_version: u32,
            artifact_version: &'static str,
            outputs: Vec<String>,
            wall_clock_s: f64,
        }
        let meta = Meta {
            command,
            params,
            schema_version: SCHEMA_VERSION,
            artifact_version: env!("CARGO_PKG_VERSION"),
            outputs: self.written,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        let path = self.dir.join("meta.json");
        let mut text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        text.push('\n');
        fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(Failure::Output)
    }
}

pub fn run(command: Command) -> Outcome {
    let name = command.name();
    match command {
        Command::Landscape(c) => landscape(name, c),
        Command::Field(c) => field(name, c),
        Command::Flow(c) => flow(name, c),
        Command::Sweep(c) => sweep(name, c),
        Command::Train(c) => train_cmd(name, c),
        Command::CheckGrad(c) => check_grad(name, c),
    }
}

fn loss_params(common: &Common) -> Result<LossParams, Failure> {
    LossParams::new(common.beta).map_err(|e| usage("--beta", e))
}

fn grid_spec(g: &GridArgs) -> GridSpec {
    GridSpec::new(g.grid, g.grid2.unwrap_or(g.grid), g.spacing.into())
}

fn thresholds(t: &ThresholdArgs, grid: &GridSpec) -> Result<Thresholds, Failure> {
    let d = Thresholds::for_grid(grid);
    Thresholds::new(t.low.unwrap_or(d.low), t.high.unwrap_or(d.high)).map_err(|e| usage("--low/--high", e))
}

fn integrator(i: &IntegratorArgs) -> Result<IntegratorConfig, Failure> {
    let cfg = IntegratorConfig {
        method: i.method.into(),
        step: i.step,
        max_steps: i.max_steps,
        stop_loss: i.stop_loss,
        floor: i.floor,
    };
    cfg.validate().map_err(|e| usage("integrator", e))?;
    Ok(cfg)
}

fn landscape(name: &str, c: GridCmd) -> Outcome {
    let params = loss_params(&c.common)?;
    let grid = grid_spec(&c.grid);
    let mut out = Output::create(&c.common)?;
    let samples = sample_landscape(&grid, &params);
    let path = out.table("landscape", &samples)?;
    println!("{} samples -> {}", samples.len(), path.display());
    out.finish(name, json!({ "beta": params.beta(), "grid": grid }))?;
    Ok(ExitCode::SUCCESS)
}

fn field(name: &str, c: FieldCmd) -> Outcome {
    let params = loss_params(&c.common)?;
    let grid = grid_spec(&c.grid);
    let th = thresholds(&c.thresholds, &grid)?;
    let mut out = Output::create(&c.common)?;
    let samples = sample_field_with(&grid, &params, &th).map_err(runtime)?;
    let path = out.table("field", &samples)?;
    let s = summarize_regions(&samples, &params).map_err(runtime)?;
    println!("{} samples -> {}", samples.len(), path.display());
    println!(
        "TopLeft {} ({} X1Dominant), TopRight {}, BottomLowX2 {} ({} X2Dominant), Interior {}",
        s.top_left, s.top_left_x1_dominant, s.top_right, s.bottom_low_x2, s.bottom_low_x2_x2_dominant, s.interior
    );
    out.finish(name, json!({ "beta": params.beta(), "grid": grid, "thresholds": th }))?;
    Ok(ExitCode::SUCCESS)
}

fn flow(name: &str, c: FlowCmd) -> Outcome {
    let params = loss_params(&c.common)?;
    let init = RatioPoint::new(c.init.0, c.init.1).map_err(|e| usage("--init", e))?;
    let cfg = integrator(&c.integrator)?;
    if init.x2() < cfg.floor {
        return Err(usage("--init", format!("x2 = {} lies below --floor {}", init.x2(), cfg.floor)));
    }
    let mut out = Output::create(&c.common)?;
    let traj = integrate_flow(init, &params, &cfg).map_err(runtime)?;
    let path = out.table("trajectory", &traj.steps)?;
    let slow = detect_slow_regions(&traj, c.integrator.slow_eps);
    if !slow.is_empty() {
        out.table("slow_regions", &slow)?;
    }
    let last = traj.last();
    println!("{} steps -> {}", traj.step_count(), path.display());
    println!(
        "{} at t = {} with (x1, x2) = ({}, {}), loss {}; {} slow interval(s)",
        traj.termination.as_str(),
        last.t,
        last.point.x1(),
        last.point.x2(),
        last.loss,
        slow.len()
    );
    out.finish(
        name,
        json!({ "beta": params.beta(), "init": init, "integrator": cfg, "slow_eps": c.integrator.slow_eps }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn sweep(name: &str, c: SweepCmd) -> Outcome {
    let params = loss_params(&c.common)?;
    let grid = grid_spec(&c.grid);
    let options = SweepOptions {
        thresholds: thresholds(&c.thresholds, &grid)?,
        slow_eps: c.integrator.slow_eps,
    };
    let cfg = integrator(&c.integrator)?;
    let mut out = Output::create(&c.common)?;
    let rep = sweep_initial_conditions(&grid, &params, &cfg, &options).map_err(runtime)?;
    let path = out.table("sweep", &rep.records)?;
    let failed = rep.records.iter().filter(|r| r.error.is_some()).count();
    println!("{} cells ({failed} failed) -> {}", rep.records.len(), path.display());
    out.finish(
        name,
        json!({ "beta": params.beta(), "grid": grid, "integrator": cfg, "options": options }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(name: &str, c: TrainCmd) -> Outcome {
    let params = loss_params(&c.common)?;
    let mode: PolicyMode = c.mode.into();
    let dataset = match &c.dataset {
        Some(path) => load_dataset(path)?,
        None => default_dataset(mode, c.max_len),
    };
    let width = match mode {
        PolicyMode::Atomic => c.k,
        PolicyMode::Autoregressive => c.vocab,
    };
    let mut policy = TabularPolicy::for_dataset(mode, &dataset, width, c.max_len).map_err(|e| usage("policy", e))?;
    for (i, t) in dataset.iter().enumerate() {
        for r in [&t.y_w, &t.y_l] {
            policy
                .response_prob(&t.prompt, r)
                .map_err(|e| usage("--dataset", format!("triple {i}: {e}")))?;
        }
    }
    let preset: Option<Preset> = match (c.preset, c.preset_probs) {
        (Some(p), _) => Some(p.into()),
        (None, Some((pi_w, pi_l))) => Some(Preset::Custom { pi_w, pi_l }),
        (None, None) => None,
    };
    let initial = policy.clone();
    if let Some(p) = preset {
        p.apply(&mut policy, &dataset).map_err(|e| usage("--preset", e))?;
    }
    let reference = match c.reference {
        ReferenceArg::Init => policy.clone(),
        ReferenceArg::Uniform => initial,
    };
    if c.tracked >= dataset.len() {
        return Err(usage(
            "--tracked",
            format!("index {} out of range for {} triple(s)", c.tracked, dataset.len()),
        ));
    }
    let cfg = TrainConfig {
        lr: c.lr,
        steps: c.steps,
        params,
        tracked: c.tracked,
    };

    let mut out = Output::create(&c.common)?;
    let trace = train(&policy, &reference, &dataset, &cfg).map_err(runtime)?;
    let path = out.table("trace", &trace.records)?;
    let last = trace.records.last().expect("trace has the initial record");
    println!("{} steps -> {}", cfg.steps, path.display());
    println!(
        "pi_w {} -> {}, pi_l {} -> {}, loss {} -> {}",
        trace.records[0].pi_w, last.pi_w, trace.records[0].pi_l, last.pi_l, trace.records[0].loss, last.loss
    );
    let mut violations = Vec::new();
    if trace.records.len() >= 2 {
        let rep = rate_asymmetry_report(&trace).map_err(runtime)?;
        out.table("asymmetry", &rep.steps)?;
        println!(
            "cumulative pi_w gain {}, pi_l loss {}; dispreferred side faster on {:.1}% of steps",
            rep.cum_gain_w,
            rep.cum_loss_l,
            100.0 * rep.dispreferred_faster_fraction
        );
        violations = rep.violations;
    }
    out.finish(
        name,
        json!({
            "beta": params.beta(),
            "mode": mode,
            "width": width,
            "max_len": policy.max_len(),
            "preset": preset,
            "reference": format!("{:?}", c.reference).to_lowercase(),
            "dataset": c.dataset,
            "triples": dataset.len(),
            "lr": cfg.lr,
            "steps": cfg.steps,
            "tracked": cfg.tracked,
        }),
    )?;
    if !violations.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "rate asymmetry violated at steps {violations:?}"
        )));
    }
    Ok(ExitCode::SUCCESS)
}

fn load_dataset(path: &Path) -> Result<Vec<dpo_lab::PreferenceTriple>, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::Runtime)?;
    let ds = parse_dataset(&text).map_err(|e| usage("--dataset", e))?;
    if ds.is_empty() {
        return Err(usage("--dataset", format!("{} holds no triples", path.display())));
    }
    Ok(ds)
}

fn check_grad(name: &str, c: CheckGradCmd) -> Outcome {
    let params = loss_params(&c.common)?;
    let points = match c.point {
        Some((x1, x2)) => vec![RatioPoint::new(x1, x2).map_err(|e| usage("--point", e))?],
        None => sample_points(c.samples, c.seed, CHECK_DOMAIN).map_err(runtime)?,
    };
    let out = Output::create(&c.common)?;
    let rep = check_gradients(&points, &params, c.h).map_err(runtime)?;
    let pass = rep.max_rel_err < GRAD_TOL;
    println!("max_rel_err {:e}", rep.max_rel_err);
    println!("worst_point {},{}", rep.worst_point.x1(), rep.worst_point.x2());
    println!("{}", if pass { "PASS" } else { "FAIL" });
    out.finish(
        name,
        json!({
            "beta": params.beta(),
            "samples": points.len(),
            "seed": c.seed,
            "point": c.point,
            "h": c.h,
            "report": rep,
            "tolerance": GRAD_TOL,
        }),
    )?;
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
