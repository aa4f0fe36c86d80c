//! The outer training loop shared by every depth: minibatches, validation,
//! prompt memory, backtracking and checkpoints.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate, DataError, EvalError, Example, SplitDataset};
use crate::hyper::{Hyper, HyperError};
use crate::layer::{LayerError, LayerStack};
use crate::lm::{LanguageModel, LmError, TokenLedger};
use crate::math::{argmax, derive_seed};
use crate::prompt::{Prompt, PromptMemory, PromptOrigin};
use crate::scoring::ScoringError;
use crate::template::TemplateError;

/// Labels for derived RNG streams.
pub(crate) mod stream {
    pub const SAMPLER: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const PROPOSE: u64 = 3;
    pub const POSTERIOR: u64 = 4;
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("{0}")]
    Invalid(String),
}

impl From<LayerError> for StepError {
    fn from(e: LayerError) -> Self {
        match e {
            LayerError::Lm(e) => StepError::Lm(e),
            LayerError::Template(e) => StepError::Template(e),
            LayerError::Empty => StepError::Invalid(e.to_string()),
        }
    }
}

impl From<EvalError> for StepError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Backend { source, .. } => StepError::Lm(source),
            EvalError::Data(d) => StepError::Invalid(d.to_string()),
        }
    }
}

impl StepError {
    /// The backend error at the root, if any.
    pub fn lm_error(&self) -> Option<&LmError> {
        match self {
            StepError::Lm(e) => Some(e),
            StepError::Scoring(ScoringError::Lm(e)) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] HyperError),
    #[error(transparent)]
    Data(#[from] DataError),
    /// The run stopped; `state` holds everything up to the failure.
    #[error("training stopped at iteration {}: {source}", state.iteration)]
    Aborted {
        state: Box<TrainState>,
        #[source]
        source: StepError,
    },
}

/// What one step did to one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUpdate {
    pub selected: String,
    pub selected_origin: PromptOrigin,
    pub candidates: usize,
    pub incumbent_score: f64,
    pub selected_score: f64,
    /// The layer is listed in `fixed_layers` and was left unchanged.
    #[serde(default)]
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub lambda: f64,
    /// Accuracy of the forward pass on the examples used for proposals.
    pub batch_accuracy: f64,
    /// One entry per layer, first layer first.
    pub layers: Vec<LayerUpdate>,
}

impl StepRecord {
    pub fn selected(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.selected.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Iterations completed when the evaluation ran.
    pub iteration: usize,
    pub val_accuracy: f64,
    pub best_val_accuracy: f64,
    pub reloaded: bool,
}

/// Position of the minibatch sampler, enough to reproduce it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub epoch: u64,
    pub position: usize,
}

/// Draws minibatches without replacement within an epoch and reshuffles
/// between epochs. A batch never straddles two epochs.
#[derive(Debug, Clone)]
pub struct MinibatchSampler {
    n: usize,
    state: SamplerState,
    order: Vec<usize>,
}

impl MinibatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            n,
            state: SamplerState {
                seed,
                epoch: 0,
                position: 0,
            },
            order: Vec::new(),
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.state.seed, &[self.state.epoch]));
        self.order.shuffle(&mut rng);
        self.state.position = 0;
    }

    /// Indices of the next batch. Asking for more than the dataset holds
    /// returns the whole (shuffled) dataset.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.n);
        if self.state.position + size > self.n {
            self.state.epoch += 1;
            self.shuffle();
        }
        let out = self.order[self.state.position..self.state.position + size].to_vec();
        self.state.position += size;
        out
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }
}

/// Splits a batch into a proposal half and a scoring half by a seeded
/// shuffle. An odd example goes to the scoring half.
pub fn split_halves(batch: &[Example], seed: u64) -> (Vec<Example>, Vec<Example>) {
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let cut = batch.len() / 2;
    let pick = |ix: &[usize]| ix.iter().map(|&i| batch[i].clone()).collect::<Vec<_>>();
    (pick(&idx[..cut]), pick(&idx[cut..]))
}

/// Everything a run accumulates; written out at every evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    /// Iterations completed.
    pub iteration: usize,
    pub prompts: Vec<Prompt>,
    pub best_prompts: Vec<Prompt>,
    pub best_val_accuracy: Option<f64>,
    pub memory: PromptMemory,
    pub history: Vec<EvalRecord>,
    pub steps: Vec<StepRecord>,
    pub below_best: usize,
    pub lambda: f64,
    pub sampler: SamplerState,
    pub ledger: TokenLedger,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("train state serializes");
        std::fs::write(path, json)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Prompt texts selected at every step, first layer first.
    pub fn selections(&self) -> Vec<Vec<String>> {
        self.steps
            .iter()
            .map(|s| s.layers.iter().map(|l| l.selected.clone()).collect())
            .collect()
    }
}

/// Inputs to one training step.
pub struct StepInput<'a> {
    pub iteration: usize,
    pub batch: &'a [Example],
    pub lambda: f64,
    pub memory: &'a PromptMemory,
    pub seed: u64,
}

/// Result of scoring a candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub scores: Vec<f64>,
    pub incumbent: usize,
}

impl Selection {
    pub fn selected_score(&self) -> f64 {
        self.scores[self.index]
    }

    pub fn incumbent_score(&self) -> f64 {
        self.scores[self.incumbent]
    }
}

/// Scores every distinct candidate text once and picks the best; the
/// incumbent wins ties, then the lowest index.
pub fn select_best(
    candidates: &[Prompt],
    incumbent: usize,
    mut score: impl FnMut(&str) -> Result<f64, StepError>,
) -> Result<Selection, StepError> {
    if candidates.is_empty() {
        return Err(StepError::Invalid("no candidates to select from".into()));
    }
    if incumbent >= candidates.len() {
        return Err(StepError::Invalid("incumbent index out of range".into()));
    }
    let mut cache: HashMap<&str, f64> = HashMap::new();
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        let s = match cache.get(c.text.as_str()) {
            Some(s) => *s,
            None => {
                let s = score(&c.text)?;
                cache.insert(&c.text, s);
                s
            }
        };
        scores.push(s);
    }
    let best = argmax(&scores).unwrap_or(incumbent);
    let index = if scores[incumbent] >= scores[best] || scores[best].is_nan() {
        incumbent
    } else {
        best
    };
    Ok(Selection {
        index,
        scores,
        incumbent,
    })
}

/// Candidate pool for one layer: proposals, then memory prompts, then the
/// incumbent last. Returns the pool and the incumbent's index.
pub(crate) fn candidate_pool(
    proposals: Vec<Prompt>,
    memory: &PromptMemory,
    layer: usize,
    use_memory: usize,
    incumbent: &Prompt,
) -> (Vec<Prompt>, usize) {
    let mut pool = proposals;
    pool.extend(memory.top_prompts(layer, use_memory));
    pool.push(incumbent.clone());
    let idx = pool.len() - 1;
    (pool, idx)
}

pub(crate) fn layer_update(pool: &[Prompt], sel: &Selection) -> LayerUpdate {
    LayerUpdate {
        selected: pool[sel.index].text.clone(),
        selected_origin: pool[sel.index].origin,
        candidates: pool.len(),
        incumbent_score: sel.incumbent_score(),
        selected_score: sel.selected_score(),
        fixed: false,
    }
}

pub(crate) fn fixed_update(prompt: &Prompt) -> LayerUpdate {
    LayerUpdate {
        selected: prompt.text.clone(),
        selected_origin: prompt.origin,
        candidates: 1,
        incumbent_score: 0.0,
        selected_score: 0.0,
        fixed: true,
    }
}

/// One training step: returns the new prompts and a record of the step.
pub trait Step {
    fn step(
        &mut self,
        stack: &LayerStack,
        input: &StepInput<'_>,
    ) -> Result<(Vec<Prompt>, StepRecord), StepError>;
}

impl<F> Step for F
where
    F: FnMut(&LayerStack, &StepInput<'_>) -> Result<(Vec<Prompt>, StepRecord), StepError>,
{
    fn step(
        &mut self,
        stack: &LayerStack,
        input: &StepInput<'_>,
    ) -> Result<(Vec<Prompt>, StepRecord), StepError> {
        self(stack, input)
    }
}

/// Runs `hyper.iterations` steps with validation every `eval_every`
/// iterations. `observer` sees the state after every evaluation.
pub fn run<L: LanguageModel + ?Sized>(
    data: &SplitDataset,
    stack: &mut LayerStack,
    hyper: &Hyper,
    lm: &L,
    seed: u64,
    step: &mut dyn Step,
    observer: &mut dyn FnMut(&TrainState),
) -> Result<TrainState, TrainError> {
    hyper.validate(stack.depth())?;
    if data.train.is_empty() {
        return Err(DataError::Empty.into());
    }
    if data.valid.is_empty() {
        return Err(DataError::Empty.into());
    }
    let ledger_start = lm.ledger();
    let mut sampler = MinibatchSampler::new(data.train.len(), derive_seed(seed, &[stream::SAMPLER]));
    let mut state = TrainState {
        seed,
        iteration: 0,
        prompts: stack.prompts(),
        best_prompts: stack.prompts(),
        best_val_accuracy: None,
        memory: PromptMemory::new(hyper.memory_size),
        history: Vec::new(),
        steps: Vec::new(),
        below_best: 0,
        lambda: hyper.lambda_at(0),
        sampler: sampler.state().clone(),
        ledger: TokenLedger::default(),
    };
    for i in 0..hyper.iterations {
        let idx = sampler.next_batch(hyper.batch_size);
        let batch: Vec<Example> = idx.iter().map(|&j| data.train[j].clone()).collect();
        let lambda = hyper.lambda_at(i);
        state.lambda = lambda;
        let input = StepInput {
            iteration: i,
            batch: &batch,
            lambda,
            memory: &state.memory,
            seed,
        };
        let (prompts, record) = match step.step(stack, &input) {
            Ok(r) => r,
            Err(source) => {
                state.ledger = lm.ledger().since(&ledger_start);
                return Err(TrainError::Aborted {
                    state: Box::new(state),
                    source,
                });
            }
        };
        stack.set_prompts(&prompts);
        state.steps.push(record);
        state.iteration = i + 1;
        state.prompts = stack.prompts();
        state.sampler = sampler.state().clone();

        if (i + 1) % hyper.eval_every == 0 {
            let acc = match evaluate(stack, &data.valid, lm, &hyper.limits) {
                Ok(a) => a,
                Err(e) => {
                    state.ledger = lm.ledger().since(&ledger_start);
                    return Err(TrainError::Aborted {
                        state: Box::new(state),
                        source: e.into(),
                    });
                }
            };
            let prior_best = state.best_val_accuracy;
            state.memory.insert(&state.prompts, acc, i + 1);
            if prior_best.is_none_or(|b| acc > b) {
                state.best_val_accuracy = Some(acc);
                state.best_prompts = state.memory.best().map(|e| e.prompts.clone()).unwrap_or_default();
            }
            let mut reloaded = false;
            if prior_best.is_some_and(|b| acc < b) {
                state.below_best += 1;
                if hyper.tolerance >= 0 && state.below_best as i64 > hyper.tolerance {
                    if let Some(best) = state.memory.best() {
                        let restored: Vec<Prompt> = best
                            .prompts
                            .iter()
                            .map(|p| Prompt {
                                origin: PromptOrigin::Memory,
                                ..p.clone()
                            })
                            .collect();
                        stack.set_prompts(&restored);
                        state.prompts = restored;
                        reloaded = true;
                    }
                    state.below_best = 0;
                }
            } else {
                state.below_best = 0;
            }
            state.history.push(EvalRecord {
                iteration: i + 1,
                val_accuracy: acc,
                best_val_accuracy: state.best_val_accuracy.unwrap_or(acc),
                reloaded,
            });
            state.ledger = lm.ledger().since(&ledger_start);
            observer(&state);
        }
    }
    if let Some(best) = state.memory.best() {
        state.best_prompts = best.prompts.clone();
        state.best_val_accuracy = Some(best.val_accuracy);
    } else {
        state.best_prompts = state.prompts.clone();
    }
    state.ledger = lm.ledger().since(&ledger_start);
    Ok(state)
}
