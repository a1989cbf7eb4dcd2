use serde::Serialize;

use super::gradient::{dataset_loss_and_gradient, dpo_policy_loss, triple_margin};
use super::{PolicyMode, PreferenceTriple, Response, TabularPolicy};
use crate::error::{Error, Result};
use crate::export::{Cell, TableRow};
use crate::loss::LossParams;

/// Consecutive loss increases tolerated before training aborts.
pub const DIVERGENCE_PATIENCE: usize = 10;

/// Largest response universe enumerated for the rest-mass column.
const MAX_ENUMERATED: usize = 1 << 16;

/// Starting probabilities `(pi_w, pi_l)` for an atomic policy. The named
/// presets sit in the corners of the ratio plane when the reference is absent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Preset {
    /// Preferred response unlikely, dispreferred likely.
    TopLeft,
    /// Both likely.
    TopRight,
    BottomRight,
    /// Both unlikely.
    BottomLeft,
    Custom { pi_w: f64, pi_l: f64 },
}

impl Preset {
    pub fn targets(&self) -> (f64, f64) {
        match *self {
            Preset::TopLeft => (0.05, 0.80),
            Preset::TopRight => (0.45, 0.45),
            Preset::BottomRight => (0.80, 0.05),
            Preset::BottomLeft => (0.05, 0.05),
            Preset::Custom { pi_w, pi_l } => (pi_w, pi_l),
        }
    }

    /// Targets that put the policy at ratio point `(x1, x2)` against `reference`.
    pub fn from_ratios(
        reference: &TabularPolicy,
        triple: &PreferenceTriple,
        x1: f64,
        x2: f64,
    ) -> Result<Self> {
        let ref_w = reference.response_prob(&triple.prompt, &triple.y_w)?;
        let ref_l = reference.response_prob(&triple.prompt, &triple.y_l)?;
        Ok(Preset::Custom {
            pi_w: x1 * ref_w,
            pi_l: x2 * ref_l,
        })
    }

    /// Apply to the prompt row of every triple (first triple per prompt wins).
    pub fn apply(&self, policy: &mut TabularPolicy, dataset: &[PreferenceTriple]) -> Result<()> {
        let (pi_w, pi_l) = self.targets();
        let mut done: Vec<&str> = Vec::new();
        for t in dataset {
            if done.contains(&t.prompt.as_str()) {
                continue;
            }
            policy.set_atomic_targets(t, pi_w, pi_l)?;
            done.push(&t.prompt);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub params: LossParams,
    /// Index of the triple whose probabilities are traced.
    pub tracked: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            steps: 200,
            params: LossParams::default(),
            tracked: 0,
        }
    }
}

/// State after `step` updates. Probabilities refer to the tracked triple.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    /// Loss of the tracked triple.
    pub loss: f64,
    /// Summed loss over the dataset.
    pub total_loss: f64,
    pub pi_w: f64,
    pub pi_l: f64,
    pub x1: f64,
    pub x2: f64,
    pub margin: f64,
    pub rest_mass: f64,
    /// Norm of the full-batch logit gradient at this state.
    pub grad_norm: f64,
    pub d_pi_w: f64,
    pub d_pi_l: f64,
}

impl TableRow for TraceRecord {
    const HEADER: &'static [&'static str] = &[
        "step", "loss", "pi_w", "pi_l", "x1", "x2", "margin", "rest_mass", "grad_norm", "d_pi_w",
        "d_pi_l",
    ];

    fn cells(&self) -> Vec<Cell> {
        vec![
            self.step.into(),
            self.loss.into(),
            self.pi_w.into(),
            self.pi_l.into(),
            self.x1.into(),
            self.x2.into(),
            self.margin.into(),
            self.rest_mass.into(),
            self.grad_norm.into(),
            self.d_pi_w.into(),
            self.d_pi_l.into(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingTrace {
    pub config: TrainConfig,
    pub records: Vec<TraceRecord>,
    #[serde(skip)]
    pub final_policy: TabularPolicy,
}

/// Probability mass on every response of the tracked universe other than
/// `y_w` and `y_l`, summed explicitly. The universe is all responses of the
/// same length as `y_w`; it is undefined (NaN) when the two lengths differ.
fn rest_mass(policy: &TabularPolicy, triple: &PreferenceTriple) -> Result<f64> {
    if policy.mode() == PolicyMode::Autoregressive
        && (triple.y_w.len() != triple.y_l.len()
            || policy.vocab().checked_pow(triple.y_w.len() as u32).is_none_or(|n| n > MAX_ENUMERATED))
    {
        return Ok(f64::NAN);
    }
    let mut sum = 0.0;
    for r in policy.responses_of_len(triple.y_w.len()) {
        if r != triple.y_w && r != triple.y_l {
            sum += policy.response_prob(&triple.prompt, &r)?;
        }
    }
    Ok(sum)
}

fn record(
    step: usize,
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    dataset: &[PreferenceTriple],
    config: &TrainConfig,
    prev: Option<&TraceRecord>,
) -> Result<(TraceRecord, Vec<f64>)> {
    let t = &dataset[config.tracked];
    let (total_loss, grad) = dataset_loss_and_gradient(policy, reference, dataset, &config.params)?;
    let pi_w = policy.response_prob(&t.prompt, &t.y_w)?;
    let pi_l = policy.response_prob(&t.prompt, &t.y_l)?;
    let x1 = pi_w / reference.response_prob(&t.prompt, &t.y_w)?;
    let x2 = pi_l / reference.response_prob(&t.prompt, &t.y_l)?;
    let rec = TraceRecord {
        step,
        loss: dpo_policy_loss(policy, reference, t, &config.params)?,
        total_loss,
        pi_w,
        pi_l,
        x1,
        x2,
        margin: triple_margin(policy, reference, t, &config.params)?,
        rest_mass: rest_mass(policy, t)?,
        grad_norm: grad.norm(),
        d_pi_w: prev.map_or(0.0, |p| pi_w - p.pi_w),
        d_pi_l: prev.map_or(0.0, |p| pi_l - p.pi_l),
    };
    Ok((rec, grad.0))
}

/// Counts consecutive loss increases.
#[derive(Clone, Copy, Debug, Default)]
struct DivergenceGuard {
    rising: usize,
}

impl DivergenceGuard {
    fn observe(&mut self, prev: f64, next: f64) -> Result<()> {
        self.rising = if next > prev { self.rising + 1 } else { 0 };
        if self.rising >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged(self.rising));
        }
        Ok(())
    }
}

/// Full-batch gradient descent on the summed DPO loss.
///
/// `lr = 0` is accepted and yields a trace that never moves. Training stops with
/// [`Error::Diverged`] once the summed loss has risen for
/// [`DIVERGENCE_PATIENCE`] consecutive steps.
pub fn train(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    dataset: &[PreferenceTriple],
    config: &TrainConfig,
) -> Result<TrainingTrace> {
    if !(config.lr.is_finite() && config.lr >= 0.0) {
        return Err(Error::domain("lr", config.lr, "must be finite and nonnegative"));
    }
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    if config.tracked >= dataset.len() {
        return Err(Error::Config(format!(
            "tracked triple {} out of range for {} triples",
            config.tracked,
            dataset.len()
        )));
    }
    if !policy.same_shape(reference) {
        return Err(Error::Config("policy and reference policy differ in shape".into()));
    }

    let mut theta = policy.clone();
    let (first, mut grad) = record(0, &theta, reference, dataset, config, None)?;
    let mut records = Vec::with_capacity(config.steps + 1);
    records.push(first);
    let mut guard = DivergenceGuard::default();
    for step in 1..=config.steps {
        for (w, g) in theta.logits_mut().iter_mut().zip(&grad) {
            *w -= config.lr * g;
        }
        let prev = records.last().expect("nonempty");
        let (rec, next_grad) = record(step, &theta, reference, dataset, config, Some(prev))?;
        guard.observe(prev.total_loss, rec.total_loss)?;
        records.push(rec);
        grad = next_grad;
    }
    Ok(TrainingTrace {
        config: *config,
        records,
        final_policy: theta,
    })
}

/// A single-prompt dataset used when none is supplied.
pub fn default_dataset(mode: PolicyMode, max_len: usize) -> Vec<PreferenceTriple> {
    let (y_w, y_l) = match mode {
        PolicyMode::Atomic => (Response::atomic(0), Response::atomic(1)),
        PolicyMode::Autoregressive => {
            // Identical except for the final token.
            let w: Vec<u32> = (0..max_len.max(1) as u32).map(|i| i % 2).collect();
            let mut l = w.clone();
            let last = l.len() - 1;
            l[last] = 1 - w[last];
            (Response(w), Response(l))
        }
    };
    vec![PreferenceTriple {
        prompt: "p0".into(),
        y_w,
        y_l,
    }]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atomic_setup() -> (TabularPolicy, Vec<PreferenceTriple>) {
        let ds = default_dataset(PolicyMode::Atomic, 1);
        (TabularPolicy::for_dataset(PolicyMode::Atomic, &ds, 4, 1).unwrap(), ds)
    }

    #[test]
    fn zero_steps_gives_initial_record() {
        let (pol, ds) = atomic_setup();
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let tr = train(&pol, &pol, &ds, &cfg).unwrap();
        assert_eq!(tr.records.len(), 1);
        let r = tr.records[0];
        assert_eq!((r.pi_w, r.pi_l, r.x1, r.x2), (0.25, 0.25, 1.0, 1.0));
        assert_eq!(r.loss, std::f64::consts::LN_2);
        assert_eq!(r.rest_mass, 0.5);
    }

    #[test]
    fn uniform_training_improves_monotonically() {
        let (pol, ds) = atomic_setup();
        let tr = train(&pol, &pol, &ds, &TrainConfig::default()).unwrap();
        assert_eq!(tr.records.len(), 201);
        for w in tr.records.windows(2) {
            assert!(w[1].margin > w[0].margin);
            assert!(w[1].loss < w[0].loss);
            assert!(w[1].x2 / w[1].x1 < w[0].x2 / w[0].x1);
        }
        for r in &tr.records {
            assert!((r.pi_w + r.pi_l + r.rest_mass - 1.0).abs() < 1e-10);
            let dual = crate::loss::softplus(-r.margin);
            assert!((r.loss - dual).abs() < 1e-12);
        }
    }

    #[test]
    fn presets() {
        let (mut pol, ds) = atomic_setup();
        let reference = pol.clone();
        Preset::from_ratios(&reference, &ds[0], 1.5, 0.5).unwrap().apply(&mut pol, &ds).unwrap();
        let tr = train(&pol, &reference, &ds, &TrainConfig { steps: 0, ..Default::default() }).unwrap();
        assert!((tr.records[0].x1 - 1.5).abs() < 1e-14);
        assert!((tr.records[0].x2 - 0.5).abs() < 1e-14);

        for p in [Preset::TopLeft, Preset::TopRight, Preset::BottomRight, Preset::BottomLeft] {
            let mut q = reference.clone();
            p.apply(&mut q, &ds).unwrap();
            let (w, l) = p.targets();
            assert!((q.response_prob("p0", &ds[0].y_w).unwrap() - w).abs() < 1e-14);
            assert!((q.response_prob("p0", &ds[0].y_l).unwrap() - l).abs() < 1e-14);
        }
    }

    #[test]
    fn divergence_guard() {
        let mut g = DivergenceGuard::default();
        for i in 0..9 {
            g.observe(i as f64, i as f64 + 1.0).unwrap();
        }
        g.observe(5.0, 4.0).unwrap();
        for i in 0..9 {
            g.observe(i as f64, i as f64 + 1.0).unwrap();
        }
        assert!(matches!(g.observe(0.0, 1.0), Err(Error::Diverged(10))));
    }

    #[test]
    fn negative_learning_rate_is_rejected() {
        let (pol, ds) = atomic_setup();
        let cfg = TrainConfig {
            lr: -1.0,
            ..Default::default()
        };
        assert!(train(&pol, &pol, &ds, &cfg).is_err());
    }

    #[test]
    fn zero_learning_rate_never_moves() {
        let (pol, ds) = atomic_setup();
        let cfg = TrainConfig {
            lr: 0.0,
            steps: 3,
            ..Default::default()
        };
        let tr = train(&pol, &pol, &ds, &cfg).unwrap();
        assert!(tr.records.iter().all(|r| r.d_pi_w == 0.0 && r.d_pi_l == 0.0));
    }

    #[test]
    fn bad_inputs() {
        let (pol, ds) = atomic_setup();
        assert!(train(&pol, &pol, &[], &TrainConfig::default()).is_err());
        let cfg = TrainConfig {
            tracked: 5,
            ..Default::default()
        };
        assert!(train(&pol, &pol, &ds, &cfg).is_err());
    }
}
