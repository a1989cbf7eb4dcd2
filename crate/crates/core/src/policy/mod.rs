//! Tabular softmax policies trained with the full DPO loss.
//!
//! Logits live in one flat vector. Each prompt owns `rows_per_prompt` rows of
//! `vocab` logits:
//!
//! * `Atomic`: one row per prompt; a response is a single id in `0..vocab`.
//! * `Autoregressive`: one row per token prefix of length `0..max_len`, so a
//!   response of length `n` reads the conditional rows for its `n` prefixes.

mod gradient;
mod report;
mod train;

pub use gradient::{
    dataset_loss_and_gradient, dpo_policy_gradient, dpo_policy_loss, triple_margin, LogitGradient,
};
pub use report::{rate_asymmetry_report, RateAsymmetryReport, RateStep};
pub use train::{default_dataset, train, Preset, TraceRecord, TrainConfig, TrainingTrace, DIVERGENCE_PATIENCE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyMode {
    Atomic,
    Autoregressive,
}

/// Token sequence; atomic responses are a single id.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Response(pub Vec<u32>);

impl Response {
    pub fn atomic(id: u32) -> Self {
        Response(vec![id])
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Length of the common prefix with `other`.
    pub fn shared_prefix_len(&self, other: &Response) -> usize {
        self.0.iter().zip(&other.0).take_while(|(a, b)| a == b).count()
    }
}

/// One line of a dataset file:
/// `{"prompt": "...", "y_w": [..], "y_l": [..]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub prompt: String,
    pub y_w: Response,
    pub y_l: Response,
}

impl PreferenceTriple {
    pub fn new(prompt: impl Into<String>, y_w: Response, y_l: Response) -> Result<Self> {
        let t = Self {
            prompt: prompt.into(),
            y_w,
            y_l,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.y_w == self.y_l {
            return Err(Error::Config(format!(
                "prompt '{}': preferred and dispreferred responses are identical",
                self.prompt
            )));
        }
        if self.y_w.is_empty() || self.y_l.is_empty() {
            return Err(Error::Config(format!("prompt '{}': empty response", self.prompt)));
        }
        Ok(())
    }
}

/// Parse line-delimited JSON triples. Blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<PreferenceTriple>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let t: PreferenceTriple = serde_json::from_str(line)
                .map_err(|e| Error::Config(format!("dataset line {}: {e}", i + 1)))?;
            t.validate()?;
            Ok(t)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TabularPolicy {
    mode: PolicyMode,
    prompts: Vec<String>,
    vocab: usize,
    max_len: usize,
    rows_per_prompt: usize,
    logits: Vec<f64>,
}

impl TabularPolicy {
    /// Uniform atomic policy with `k` responses per prompt.
    pub fn atomic(prompts: Vec<String>, k: usize) -> Result<Self> {
        Self::build(PolicyMode::Atomic, prompts, k, 1)
    }

    /// Uniform autoregressive policy over `vocab` tokens, responses up to `max_len`.
    pub fn autoregressive(prompts: Vec<String>, vocab: usize, max_len: usize) -> Result<Self> {
        Self::build(PolicyMode::Autoregressive, prompts, vocab, max_len)
    }

    fn build(mode: PolicyMode, prompts: Vec<String>, vocab: usize, max_len: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::Config(format!("need at least 2 responses/tokens, got {vocab}")));
        }
        if max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if prompts.is_empty() {
            return Err(Error::Config("policy needs at least one prompt".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = prompts.iter().find(|p| !seen.insert(p.as_str())) {
            return Err(Error::Config(format!("duplicate prompt '{dup}'")));
        }
        let rows_per_prompt = (0..max_len)
            .try_fold(0usize, |acc, l| {
                vocab.checked_pow(l as u32).and_then(|r| acc.checked_add(r))
            })
            .filter(|&r| r.saturating_mul(vocab).saturating_mul(prompts.len()) <= 1 << 26)
            .ok_or_else(|| Error::Config(format!("table for vocab {vocab}, length {max_len} is too large")))?;
        let logits = vec![0.0; prompts.len() * rows_per_prompt * vocab];
        Ok(Self {
            mode,
            prompts,
            vocab,
            max_len,
            rows_per_prompt,
            logits,
        })
    }

    /// Policy shaped to cover every prompt of `dataset`, in first-seen order.
    pub fn for_dataset(
        mode: PolicyMode,
        dataset: &[PreferenceTriple],
        vocab: usize,
        max_len: usize,
    ) -> Result<Self> {
        let mut prompts: Vec<String> = Vec::new();
        for t in dataset {
            if !prompts.contains(&t.prompt) {
                prompts.push(t.prompt.clone());
            }
        }
        match mode {
            PolicyMode::Atomic => Self::atomic(prompts, vocab),
            PolicyMode::Autoregressive => Self::autoregressive(prompts, vocab, max_len),
        }
    }

    pub fn mode(&self) -> PolicyMode {
        self.mode
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn same_shape(&self, other: &TabularPolicy) -> bool {
        self.mode == other.mode
            && self.vocab == other.vocab
            && self.max_len == other.max_len
            && self.prompts == other.prompts
    }

    /// Uniform policy with the same shape.
    pub fn uniform_like(&self) -> Self {
        Self {
            logits: vec![0.0; self.logits.len()],
            ..self.clone()
        }
    }

    pub fn prompt_index(&self, prompt: &str) -> Result<usize> {
        self.prompts
            .iter()
            .position(|p| p == prompt)
            .ok_or_else(|| Error::Lookup(format!("unknown prompt '{prompt}'")))
    }

    fn prefix_offset(&self, len: usize) -> usize {
        (0..len).map(|l| self.vocab.pow(l as u32)).sum()
    }

    /// Global row index of the conditional distribution after `prefix`.
    pub fn row_index(&self, prompt_idx: usize, prefix: &[u32]) -> usize {
        let local = self.prefix_offset(prefix.len())
            + prefix
                .iter()
                .fold(0usize, |acc, &t| acc * self.vocab + t as usize);
        prompt_idx * self.rows_per_prompt + local
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.logits[row * self.vocab..(row + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.logits[row * self.vocab..(row + 1) * self.vocab]
    }

    pub fn row_probs(&self, row: usize) -> Vec<f64> {
        softmax(self.row(row))
    }

    fn check_response(&self, response: &Response) -> Result<()> {
        let len_ok = match self.mode {
            PolicyMode::Atomic => response.len() == 1,
            PolicyMode::Autoregressive => (1..=self.max_len).contains(&response.len()),
        };
        if !len_ok {
            return Err(Error::Lookup(format!(
                "response of length {} is outside the response universe",
                response.len()
            )));
        }
        if let Some(&t) = response.tokens().iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::Lookup(format!("token/response id {t} >= {}", self.vocab)));
        }
        Ok(())
    }

    /// `(row, token)` for every position of `response`.
    pub fn path(&self, prompt_idx: usize, response: &Response) -> Vec<(usize, u32)> {
        let toks = response.tokens();
        (0..toks.len())
            .map(|i| (self.row_index(prompt_idx, &toks[..i]), toks[i]))
            .collect()
    }

    pub fn response_log_prob(&self, prompt: &str, response: &Response) -> Result<f64> {
        let pi = self.prompt_index(prompt)?;
        self.check_response(response)?;
        Ok(self
            .path(pi, response)
            .into_iter()
            .map(|(row, tok)| log_softmax_at(self.row(row), tok as usize))
            .sum())
    }

    /// Probability of `response` (for a shorter-than-max autoregressive response,
    /// the probability that generation starts with it).
    pub fn response_prob(&self, prompt: &str, response: &Response) -> Result<f64> {
        self.response_log_prob(prompt, response).map(f64::exp)
    }

    /// Every response of length `len` in lexicographic order. Atomic mode ignores `len`.
    pub fn responses_of_len(&self, len: usize) -> Vec<Response> {
        match self.mode {
            PolicyMode::Atomic => (0..self.vocab as u32).map(Response::atomic).collect(),
            PolicyMode::Autoregressive => {
                let total = self.vocab.pow(len as u32);
                (0..total)
                    .map(|mut code| {
                        let mut toks = vec![0u32; len];
                        for slot in toks.iter_mut().rev() {
                            *slot = (code % self.vocab) as u32;
                            code /= self.vocab;
                        }
                        Response(toks)
                    })
                    .collect()
            }
        }
    }

    /// Set the two logits of an atomic prompt row so that `pi(y_w) = pi_w` and
    /// `pi(y_l) = pi_l`, all other logits zero.
    pub fn set_atomic_targets(&mut self, triple: &PreferenceTriple, pi_w: f64, pi_l: f64) -> Result<()> {
        if self.mode != PolicyMode::Atomic {
            return Err(Error::Config("probability presets need an atomic policy".into()));
        }
        self.check_response(&triple.y_w)?;
        self.check_response(&triple.y_l)?;
        let row = self.row_index(self.prompt_index(&triple.prompt)?, &[]);
        let logits = atomic_logits_for(self.vocab, pi_w, pi_l)?;
        let (w, l) = (triple.y_w.0[0] as usize, triple.y_l.0[0] as usize);
        let r = self.row_mut(row);
        r.fill(0.0);
        r[w] = logits.0;
        r[l] = logits.1;
        Ok(())
    }
}

/// Logits `(a, b)` for two slots of a `k`-way softmax whose other slots hold 0.
fn atomic_logits_for(k: usize, pi_w: f64, pi_l: f64) -> Result<(f64, f64)> {
    for (what, v) in [("pi_w", pi_w), ("pi_l", pi_l)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::domain(what, v, "target probability must lie in (0, 1)"));
        }
    }
    let rest = 1.0 - pi_w - pi_l;
    if k == 2 {
        if rest.abs() > 1e-12 {
            return Err(Error::Config(format!(
                "with two responses the targets must sum to 1, got {}",
                pi_w + pi_l
            )));
        }
        return Ok(((pi_w / pi_l).ln(), 0.0));
    }
    if rest <= 0.0 {
        return Err(Error::Config(format!(
            "targets leave no mass for the other {} responses",
            k - 2
        )));
    }
    let per_other = rest / (k - 2) as f64;
    Ok(((pi_w / per_other).ln(), (pi_l / per_other).ln()))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits[i] - lse
}
