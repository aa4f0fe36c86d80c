//! Training hyperparameters. Field names follow the usual search-grid keys
//! (`bh_tpl`, `tolerance`, `use_memory`, `held_out_prompt_ranking`,
//! `logp_penalty`, `num_h_samples`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layer::GenerationLimits;
use crate::template::{ShippedTemplate, Template};

#[derive(Debug, Error, PartialEq)]
#[error("invalid `{field}`: {message}")]
pub struct HyperError {
    pub field: &'static str,
    pub message: String,
}

fn bad(field: &'static str, message: impl Into<String>) -> HyperError {
    HyperError {
        field,
        message: message.into(),
    }
}

/// Weights of the three hidden proposal families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosteriorMixture {
    /// The forward hidden template itself.
    pub pri: f64,
    /// The hidden template conditioned on the label.
    pub pri_plus: f64,
    /// An edit of the forward hidden string.
    pub edit: f64,
}

impl Default for PosteriorMixture {
    fn default() -> Self {
        Self {
            pri: 0.5,
            pri_plus: 0.5,
            edit: 0.0,
        }
    }
}

impl PosteriorMixture {
    pub fn as_array(&self) -> [f64; 3] {
        [self.pri, self.pri_plus, self.edit]
    }

    pub fn validate(&self) -> Result<(), HyperError> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(bad("posterior_mixture", "weights must be finite and non-negative"));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(bad("posterior_mixture", format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorConfig {
    pub k: usize,
    pub mixture: PosteriorMixture,
    pub alpha_sharp: f64,
    pub temperature: f64,
}

impl PosteriorConfig {
    pub fn validate(&self) -> Result<(), HyperError> {
        if self.k == 0 {
            return Err(bad("num_h_samples", "must be at least 1"));
        }
        if !(self.alpha_sharp.is_finite() && self.alpha_sharp >= 0.0) {
            return Err(bad("alpha_sharp", "must be finite and non-negative"));
        }
        self.mixture.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub batch_size: usize,
    pub iterations: usize,
    pub eval_every: usize,
    /// Prompt proposals per layer and step.
    pub num_prompts: usize,
    pub num_h_samples: usize,
    pub memory_size: usize,
    /// Prompt proposal template: `q_action_prompt:v3.5` or
    /// `q_action_prompt:v3.0`.
    pub bh_tpl: String,
    /// Consecutive below-best validations tolerated before reloading the best
    /// memory entry; `-1` never reloads.
    pub tolerance: i64,
    /// How many of the best memory entries join every candidate pool.
    pub use_memory: usize,
    pub held_out_prompt_ranking: bool,
    /// Initial exploration reward coefficient, decayed linearly to 0.
    pub logp_penalty: f64,
    pub alpha_sharp: f64,
    pub posterior_mixture: PosteriorMixture,
    pub proposal_temperature: f64,
    pub posterior_temperature: f64,
    /// Layers whose prompts keep their initial value.
    pub fixed_layers: Vec<usize>,
    pub limits: GenerationLimits,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            batch_size: 20,
            iterations: 20,
            eval_every: 2,
            num_prompts: 20,
            num_h_samples: 5,
            memory_size: 5,
            bh_tpl: "q_action_prompt:v3.5".into(),
            tolerance: 2,
            use_memory: 2,
            held_out_prompt_ranking: true,
            logp_penalty: 0.5,
            alpha_sharp: 1.0,
            posterior_mixture: PosteriorMixture::default(),
            proposal_temperature: 0.7,
            posterior_temperature: 0.7,
            fixed_layers: Vec::new(),
            limits: GenerationLimits::default(),
        }
    }
}

impl Hyper {
    pub fn validate(&self, depth: usize) -> Result<(), HyperError> {
        if depth == 0 {
            return Err(bad("layers", "need at least one layer"));
        }
        if self.iterations == 0 {
            return Err(bad("iterations", "must be at least 1"));
        }
        if self.num_prompts == 0 {
            return Err(bad("num_prompts", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if self.held_out_prompt_ranking && self.batch_size < 2 {
            return Err(bad("batch_size", "held-out prompt ranking needs at least 2 examples"));
        }
        if self.eval_every == 0 {
            return Err(bad("eval_every", "must be at least 1"));
        }
        if self.memory_size == 0 {
            return Err(bad("memory_size", "must be at least 1"));
        }
        if self.tolerance < -1 {
            return Err(bad("tolerance", "must be -1 or non-negative"));
        }
        if !(self.logp_penalty.is_finite() && self.logp_penalty >= 0.0) {
            return Err(bad("logp_penalty", "must be finite and non-negative"));
        }
        for (field, t) in [
            ("proposal_temperature", self.proposal_temperature),
            ("posterior_temperature", self.posterior_temperature),
        ] {
            if !(t.is_finite() && t >= 0.0) {
                return Err(bad(field, "must be finite and non-negative"));
            }
        }
        if ShippedTemplate::proposal_by_version(&self.bh_tpl).is_none() {
            return Err(bad(
                "bh_tpl",
                format!("unknown template {:?}; use q_action_prompt:v3.5 or q_action_prompt:v3.0", self.bh_tpl),
            ));
        }
        if let Some(l) = self.fixed_layers.iter().find(|&&l| l >= depth) {
            return Err(bad("fixed_layers", format!("layer {l} does not exist in a {depth}-layer network")));
        }
        if depth >= 2 {
            self.posterior().validate()?;
        }
        Ok(())
    }

    pub fn posterior(&self) -> PosteriorConfig {
        PosteriorConfig {
            k: self.num_h_samples,
            mixture: self.posterior_mixture,
            alpha_sharp: self.alpha_sharp,
            temperature: self.posterior_temperature,
        }
    }

    /// Exploration coefficient at 0-based iteration `i`:
    /// `logp_penalty · (1 - i / iterations)`.
    pub fn lambda_at(&self, i: usize) -> f64 {
        self.logp_penalty * (1.0 - i as f64 / self.iterations as f64)
    }

    /// Number of validation passes over a full run.
    pub fn eval_count(&self) -> usize {
        self.iterations / self.eval_every
    }

    pub fn is_fixed(&self, layer: usize) -> bool {
        self.fixed_layers.contains(&layer)
    }

    pub fn proposal_template(&self) -> Result<Template, HyperError> {
        ShippedTemplate::proposal_by_version(&self.bh_tpl)
            .map(ShippedTemplate::load)
            .ok_or_else(|| bad("bh_tpl", format!("unknown template {:?}", self.bh_tpl)))
    }
}

/// Templates used on the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardTemplates {
    pub prompt_proposal: Template,
    pub given_answer: Template,
    pub edit: Template,
}

impl BackwardTemplates {
    pub fn shipped(hyper: &Hyper) -> Result<Self, HyperError> {
        Ok(Self {
            prompt_proposal: hyper.proposal_template()?,
            given_answer: ShippedTemplate::HiddenGivenAnswer.load(),
            edit: ShippedTemplate::HiddenEdit.load(),
        })
    }
}
