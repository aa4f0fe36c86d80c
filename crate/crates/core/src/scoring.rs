//! Posterior sharpening, weighted prompt scores and the exploration reward.
//!
//! Every score here uses length-normalized log-probabilities and sums over
//! examples. The exact, unnormalized quantities live in [`crate::oracle`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layer::LayerStack;
use crate::lm::{LanguageModel, LmError, ToyLm};
use crate::math::{argmax, log_sum_exp};
use crate::oracle::{self, EnumerableSpace, OracleError};
use crate::template::{Binding, Template, TemplateError};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("nothing to score")]
    Empty,
    #[error("entry {index} is not finite")]
    NonFinite { index: usize },
    #[error("sharpening temperature must be finite and non-negative, got {0}")]
    InvalidTemperature(f64),
    #[error("weights must be in [0, 1] and sum to 1 (sum is {sum})")]
    NotNormalized { sum: f64 },
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("exploration coefficient must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// `softmax(alpha_sharp · (alpha + beta))`, computed in log space.
///
/// ```
/// let w = dln::scoring::sharpen(&[(-1.0, -1.0), (-2.0, -1.0)], 1.0).unwrap();
/// let e = std::f64::consts::E;
/// assert!((w[0] - e / (1.0 + e)).abs() < 1e-12);
/// ```
pub fn sharpen(raw: &[(f64, f64)], alpha_sharp: f64) -> Result<Vec<f64>, ScoringError> {
    if raw.is_empty() {
        return Err(ScoringError::Empty);
    }
    if !(alpha_sharp.is_finite() && alpha_sharp >= 0.0) {
        return Err(ScoringError::InvalidTemperature(alpha_sharp));
    }
    if let Some(index) = raw.iter().position(|(a, b)| !(a + b).is_finite()) {
        return Err(ScoringError::NonFinite { index });
    }
    // Shift before scaling so the largest logit is exactly 0 even when
    // `alpha_sharp · (alpha + beta)` alone would overflow.
    let joint: Vec<f64> = raw.iter().map(|(a, b)| a + b).collect();
    let max = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let logits: Vec<f64> = joint.iter().map(|j| alpha_sharp * (j - max)).collect();
    let lse = log_sum_exp(&logits);
    Ok(logits.iter().map(|l| (l - lse).exp()).collect())
}

/// A candidate hidden string with its prior log-prob `alpha` and the
/// log-likelihood `beta` of the next layer's target given it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub hidden: String,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSampleSet {
    samples: Vec<PosteriorSample>,
    alpha_sharp: f64,
    weights: Vec<f64>,
}

impl WeightedSampleSet {
    /// Weights from [`sharpen`].
    pub fn new(samples: Vec<PosteriorSample>, alpha_sharp: f64) -> Result<Self, ScoringError> {
        let raw: Vec<(f64, f64)> = samples.iter().map(|s| (s.alpha, s.beta)).collect();
        let weights = sharpen(&raw, alpha_sharp)?;
        Ok(Self {
            samples,
            alpha_sharp,
            weights,
        })
    }

    /// Explicit weights, checked for normalization.
    pub fn with_weights(samples: Vec<PosteriorSample>, weights: Vec<f64>) -> Result<Self, ScoringError> {
        if samples.is_empty() {
            return Err(ScoringError::Empty);
        }
        if weights.len() != samples.len() {
            return Err(ScoringError::LengthMismatch {
                what: "weights",
                expected: samples.len(),
                got: weights.len(),
            });
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) || (sum - 1.0).abs() > 1e-9 {
            return Err(ScoringError::NotNormalized { sum });
        }
        Ok(Self {
            samples,
            alpha_sharp: 1.0,
            weights,
        })
    }

    /// A single known string with weight 1, e.g. the label at the top layer.
    pub fn point(hidden: impl Into<String>) -> Self {
        Self {
            samples: vec![PosteriorSample {
                hidden: hidden.into(),
                alpha: 0.0,
                beta: 0.0,
            }],
            alpha_sharp: 1.0,
            weights: vec![1.0],
        }
    }

    pub fn samples(&self) -> &[PosteriorSample] {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn alpha_sharp(&self) -> f64 {
        self.alpha_sharp
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Index of the heaviest sample; ties go to the lowest index.
    pub fn best_index(&self) -> usize {
        argmax(&self.weights).unwrap_or(0)
    }

    pub fn best(&self) -> &PosteriorSample {
        &self.samples[self.best_index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.samples.iter().map(|s| s.hidden.as_str()).zip(self.weights.iter().copied())
    }
}

/// `Σ weight · normalized log p(continuation | context)` over `terms`, summed
/// in the given order. Identical (context, continuation) pairs are scored
/// once.
pub fn weighted_logprob_sum<L: LanguageModel + ?Sized>(
    lm: &L,
    terms: &[(String, String, f64)],
) -> Result<f64, ScoringError> {
    if terms.is_empty() {
        return Ok(0.0);
    }
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    let mut unique: Vec<(String, String)> = Vec::new();
    let slots: Vec<usize> = terms
        .iter()
        .map(|(c, y, _)| {
            *index.entry((c.as_str(), y.as_str())).or_insert_with(|| {
                unique.push((c.clone(), y.clone()));
                unique.len() - 1
            })
        })
        .collect();
    let scored = lm.batch_logprob(&unique)?;
    let mut total = 0.0;
    for ((_, _, w), slot) in terms.iter().zip(slots) {
        total += w * scored[slot].normalized_logprob;
    }
    Ok(total)
}

fn forward_context(t: &Template, prompt: &str, x: &str) -> Result<String, TemplateError> {
    t.render_fixed(&Binding::new().set("prompt", prompt).set("input", x))
}

fn residual_context(t: &Template, prompt: &str, x: &str, h: &str) -> Result<String, TemplateError> {
    t.render_fixed(&Binding::new().set("prompt", prompt).set("input", x).set("h", h))
}

/// `Σ_x Σ_k q^k log p(h^k | T(x, candidate))`.
pub fn prompt_score_first_layer<L: LanguageModel + ?Sized>(
    candidate: &str,
    inputs: &[&str],
    samples: &[WeightedSampleSet],
    lm: &L,
    forward_template: &Template,
) -> Result<f64, ScoringError> {
    if inputs.len() != samples.len() {
        return Err(ScoringError::LengthMismatch {
            what: "sample sets",
            expected: inputs.len(),
            got: samples.len(),
        });
    }
    let mut terms = Vec::new();
    for (x, set) in inputs.iter().zip(samples) {
        let ctx = forward_context(forward_template, candidate, x)?;
        for (h, w) in set.iter() {
            terms.push((ctx.clone(), h.to_string(), w));
        }
    }
    weighted_logprob_sum(lm, &terms)
}

/// `Σ_(x,y) Σ_k q^k log p(y | T_r(h^k, x, candidate))`.
pub fn prompt_score_second_layer<L: LanguageModel + ?Sized>(
    candidate: &str,
    triples: &[(&str, &WeightedSampleSet, &str)],
    lm: &L,
    residual_template: &Template,
) -> Result<f64, ScoringError> {
    let mut terms = Vec::new();
    for (x, set, y) in triples {
        for (h, w) in set.iter() {
            let ctx = residual_context(residual_template, candidate, x, h)?;
            terms.push((ctx, y.to_string(), w));
        }
    }
    weighted_logprob_sum(lm, &terms)
}

/// `-λ Σ log p(ĥ | context)` over pre-rendered (context, ĥ) pairs of wrongly
/// answered examples.
pub fn exploration_reward_contexts<L: LanguageModel + ?Sized>(
    lm: &L,
    wrong: &[(String, String)],
    lambda: f64,
) -> Result<f64, ScoringError> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(ScoringError::InvalidLambda(lambda));
    }
    if lambda == 0.0 || wrong.is_empty() {
        return Ok(0.0);
    }
    let terms: Vec<(String, String, f64)> =
        wrong.iter().map(|(c, h)| (c.clone(), h.clone(), 1.0)).collect();
    Ok(-lambda * weighted_logprob_sum(lm, &terms)?)
}

/// Reward for a first-layer candidate that makes the forward hidden strings
/// of wrongly answered examples unlikely.
pub fn exploration_reward<L: LanguageModel + ?Sized>(
    candidate: &str,
    wrong_cases: &[(&str, &str)],
    lm: &L,
    forward_template: &Template,
    lambda: f64,
) -> Result<f64, ScoringError> {
    let pairs = wrong_cases
        .iter()
        .map(|(x, h)| Ok((forward_context(forward_template, candidate, x)?, h.to_string())))
        .collect::<Result<Vec<_>, TemplateError>>()?;
    exploration_reward_contexts(lm, &pairs, lambda)
}

/// ELBO of `q` over an enumerable hidden space next to the exact log
/// marginal, both with total log-probs and the ELBO including `H[q]`.
pub fn elbo_lower_bounds_marginal_check(
    x: &str,
    y: &str,
    stack: &LayerStack,
    lm: &ToyLm,
    space: &EnumerableSpace,
    q: &[f64],
) -> Result<(f64, f64), ScoringError> {
    let joints = oracle::log_joints(x, y, stack, lm, space)?;
    let elbo = oracle::elbo(q, &joints)?;
    Ok((elbo, log_sum_exp(&joints)))
}
