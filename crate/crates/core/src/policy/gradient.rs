use std::collections::BTreeMap;

use super::{PreferenceTriple, TabularPolicy};
use crate::error::{Error, Result};
use crate::loss::{dpo_loss_sigmoid_form, sigmoid, LossParams, ReferencePair};

/// Gradient of a loss with respect to every logit, in the policy's layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitGradient(pub Vec<f64>);

impl LogitGradient {
    pub fn zeros_like(policy: &TabularPolicy) -> Self {
        LogitGradient(vec![0.0; policy.logits().len()])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn check_pair(policy: &TabularPolicy, reference: &TabularPolicy) -> Result<()> {
    if !policy.same_shape(reference) {
        return Err(Error::Config("policy and reference policy differ in shape".into()));
    }
    Ok(())
}

fn probabilities(policy: &TabularPolicy, triple: &PreferenceTriple) -> Result<(f64, f64)> {
    let pi_w = policy.response_prob(&triple.prompt, &triple.y_w)?;
    let pi_l = policy.response_prob(&triple.prompt, &triple.y_l)?;
    for (what, v) in [("pi(y_w)", pi_w), ("pi(y_l)", pi_l)] {
        if v <= 0.0 {
            return Err(Error::domain(what, v, "response has zero probability"));
        }
    }
    Ok((pi_w, pi_l))
}

/// `b * (log pi(y_w)/ref(y_w) - log pi(y_l)/ref(y_l))`.
pub fn triple_margin(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    triple: &PreferenceTriple,
    params: &LossParams,
) -> Result<f64> {
    check_pair(policy, reference)?;
    let lw = policy.response_log_prob(&triple.prompt, &triple.y_w)?;
    let ll = policy.response_log_prob(&triple.prompt, &triple.y_l)?;
    let rw = reference.response_log_prob(&triple.prompt, &triple.y_w)?;
    let rl = reference.response_log_prob(&triple.prompt, &triple.y_l)?;
    Ok(params.beta() * ((lw - rw) - (ll - rl)))
}

pub fn dpo_policy_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    triple: &PreferenceTriple,
    params: &LossParams,
) -> Result<f64> {
    check_pair(policy, reference)?;
    let (pi_w, pi_l) = probabilities(policy, triple)?;
    let (ref_w, ref_l) = probabilities(reference, triple)?;
    dpo_loss_sigmoid_form(pi_w, pi_l, &ReferencePair::new(ref_w, ref_l)?, params)
}

/// Adds the gradient of one triple's loss into `grad`.
///
/// `dL/dtheta = -b * sigmoid(-z) * (grad log pi(y_w) - grad log pi(y_l))`. The
/// two score functions are combined per row before touching `grad`: a row that
/// both responses visit with the same token contributes exactly nothing.
fn accumulate_triple(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    triple: &PreferenceTriple,
    params: &LossParams,
    grad: &mut [f64],
) -> Result<()> {
    let z = triple_margin(policy, reference, triple, params)?;
    let coeff = -params.beta() * sigmoid(-z);
    let prompt = policy.prompt_index(&triple.prompt)?;
    let vocab = policy.vocab();

    // row -> (indicator difference, visit-count difference)
    let mut rows: BTreeMap<usize, (Vec<f64>, i32)> = BTreeMap::new();
    for (sign, response) in [(1.0, &triple.y_w), (-1.0, &triple.y_l)] {
        for (row, tok) in policy.path(prompt, response) {
            let entry = rows.entry(row).or_insert_with(|| (vec![0.0; vocab], 0));
            entry.0[tok as usize] += sign;
            entry.1 += sign as i32;
        }
    }
    for (row, (indicator, visits)) in rows {
        if visits == 0 && indicator.iter().all(|&v| v == 0.0) {
            continue;
        }
        let probs = policy.row_probs(row);
        let out = &mut grad[row * vocab..(row + 1) * vocab];
        for ((g, ind), p) in out.iter_mut().zip(&indicator).zip(&probs) {
            *g += coeff * (ind - visits as f64 * p);
        }
    }
    Ok(())
}

/// Analytic logit gradient of a single triple's loss.
pub fn dpo_policy_gradient(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    triple: &PreferenceTriple,
    params: &LossParams,
) -> Result<LogitGradient> {
    let mut grad = LogitGradient::zeros_like(policy);
    accumulate_triple(policy, reference, triple, params, &mut grad.0)?;
    Ok(grad)
}

/// Summed loss and gradient over a dataset.
pub fn dataset_loss_and_gradient(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    dataset: &[PreferenceTriple],
    params: &LossParams,
) -> Result<(f64, LogitGradient)> {
    let mut grad = LogitGradient::zeros_like(policy);
    let mut loss = 0.0;
    for triple in dataset {
        loss += dpo_policy_loss(policy, reference, triple, params)?;
        accumulate_triple(policy, reference, triple, params, &mut grad.0)?;
    }
    Ok((loss, grad))
}
