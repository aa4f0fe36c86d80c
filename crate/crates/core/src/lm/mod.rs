//! Language-model backends.
//!
//! Every layer of a network talks to its model through [`LanguageModel`]:
//! sampling continuations at a temperature and scoring the log-probability
//! of a given continuation. Two implementations ship with the crate: an
//! OpenAI-compatible completions client ([`http::CompletionsClient`]) and a
//! deterministic toy model with exact, enumerable probabilities
//! ([`toy::ToyLm`]).

pub mod http;
pub mod toy;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{CompletionsClient, HttpConfig};
pub use toy::{ToyLm, ToyLmConfig};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("backend unreachable after {attempts} attempt(s): {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("context too long ({units} units, limit {limit}) for request starting {preview:?}")]
    ContextTooLong {
        units: usize,
        limit: usize,
        preview: String,
    },
    #[error("continuation cannot be scored: {0}")]
    Unscoreable(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("batch aborted, {} request(s) failed (indices {failed:?}): {source}", failed.len())]
    BatchFailed {
        failed: Vec<usize>,
        #[source]
        source: Box<LmError>,
    },
}

impl LmError {
    /// Transient failures worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            LmError::Unreachable { .. } => true,
            LmError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// A request to sample continuations of `context`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub context: String,
    pub temperature: f64,
    pub n_samples: usize,
    pub max_new_units: usize,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    /// Sampling seed. Ignored at temperature 0.
    #[serde(default)]
    pub seed: u64,
}

impl GenerationRequest {
    pub fn greedy(context: impl Into<String>, max_new_units: usize) -> Self {
        Self {
            context: context.into(),
            temperature: 0.0,
            n_samples: 1,
            max_new_units,
            stop_sequences: Vec::new(),
            seed: 0,
        }
    }

    pub fn sampled(
        context: impl Into<String>,
        temperature: f64,
        n_samples: usize,
        max_new_units: usize,
        seed: u64,
    ) -> Self {
        Self {
            context: context.into(),
            temperature,
            n_samples,
            max_new_units,
            stop_sequences: Vec::new(),
            seed,
        }
    }

    pub fn with_stop(mut self, stop: &[String]) -> Self {
        self.stop_sequences = stop.to_vec();
        self
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.context.is_empty() {
            return Err(LmError::InvalidRequest("context is empty".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LmError::InvalidRequest(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        if self.n_samples == 0 {
            return Err(LmError::InvalidRequest("n_samples must be at least 1".into()));
        }
        if self.max_new_units == 0 {
            return Err(LmError::InvalidRequest(
                "max_new_units must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Cuts `text` at the earliest occurrence of any stop sequence.
pub fn truncate_at_stop(text: &str, stops: &[String]) -> String {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    match cut {
        Some(i) => text[..i].to_string(),
        None => text.to_string(),
    }
}

/// Log-probability of a continuation, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredContinuation {
    pub total_logprob: f64,
    pub unit_count: usize,
    pub normalized_logprob: f64,
}

impl ScoredContinuation {
    pub fn new(total_logprob: f64, unit_count: usize) -> Self {
        let unit_count = unit_count.max(1);
        Self {
            total_logprob,
            unit_count,
            normalized_logprob: total_logprob / unit_count as f64,
        }
    }
}

/// Snapshot of the units exchanged with a backend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub prompt_units: u64,
    pub completion_units: u64,
    pub call_count: u64,
}

impl TokenLedger {
    pub fn total_units(&self) -> u64 {
        self.prompt_units + self.completion_units
    }

    /// Cost at `price_per_1k` currency units per thousand units.
    pub fn estimated_cost(&self, price_per_1k: f64) -> f64 {
        self.total_units() as f64 / 1000.0 * price_per_1k
    }

    pub fn since(&self, earlier: &TokenLedger) -> TokenLedger {
        TokenLedger {
            prompt_units: self.prompt_units - earlier.prompt_units,
            completion_units: self.completion_units - earlier.completion_units,
            call_count: self.call_count - earlier.call_count,
        }
    }

    pub fn report(&self, price_per_1k: f64) -> LedgerReport {
        LedgerReport {
            prompt_units: self.prompt_units,
            completion_units: self.completion_units,
            call_count: self.call_count,
            estimated_cost: self.estimated_cost(price_per_1k),
        }
    }
}

impl std::ops::Add for TokenLedger {
    type Output = TokenLedger;

    fn add(self, rhs: TokenLedger) -> TokenLedger {
        TokenLedger {
            prompt_units: self.prompt_units + rhs.prompt_units,
            completion_units: self.completion_units + rhs.completion_units,
            call_count: self.call_count + rhs.call_count,
        }
    }
}

/// JSON shape of an exported ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub prompt_units: u64,
    pub completion_units: u64,
    pub call_count: u64,
    pub estimated_cost: f64,
}

/// Thread-safe running counters behind a backend.
#[derive(Debug, Default)]
pub struct LedgerCounter {
    prompt_units: AtomicU64,
    completion_units: AtomicU64,
    call_count: AtomicU64,
}

impl LedgerCounter {
    pub fn record(&self, prompt_units: u64, completion_units: u64) {
        self.prompt_units.fetch_add(prompt_units, Ordering::Relaxed);
        self.completion_units
            .fetch_add(completion_units, Ordering::Relaxed);
        self.call_count.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> TokenLedger {
        TokenLedger {
            prompt_units: self.prompt_units.load(Ordering::Relaxed),
            completion_units: self.completion_units.load(Ordering::Relaxed),
            call_count: self.call_count.load(Ordering::Relaxed),
        }
    }
}

/// Whitespace-delimited word count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Uniform interface over sampling and scoring backends.
///
/// Implementations must be safe to call from several workers at once. Batch
/// methods preserve input order and abort as a whole when any element fails.
pub trait LanguageModel: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, LmError>;

    fn logprob(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, LmError>;

    fn ledger(&self) -> TokenLedger;

    fn batch_generate(&self, requests: &[GenerationRequest]) -> Result<Vec<Vec<String>>, LmError> {
        collect_batch(requests.iter().map(|r| self.generate(r)))
    }

    fn batch_logprob(
        &self,
        pairs: &[(String, String)],
    ) -> Result<Vec<ScoredContinuation>, LmError> {
        if pairs.is_empty() {
            return Err(LmError::InvalidRequest("empty logprob batch".into()));
        }
        collect_batch(pairs.iter().map(|(c, y)| self.logprob(c, y)))
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, LmError> {
        (**self).generate(request)
    }
    fn logprob(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, LmError> {
        (**self).logprob(context, continuation)
    }
    fn ledger(&self) -> TokenLedger {
        (**self).ledger()
    }
    fn batch_generate(&self, requests: &[GenerationRequest]) -> Result<Vec<Vec<String>>, LmError> {
        (**self).batch_generate(requests)
    }
    fn batch_logprob(
        &self,
        pairs: &[(String, String)],
    ) -> Result<Vec<ScoredContinuation>, LmError> {
        (**self).batch_logprob(pairs)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, LmError> {
        (**self).generate(request)
    }
    fn logprob(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, LmError> {
        (**self).logprob(context, continuation)
    }
    fn ledger(&self) -> TokenLedger {
        (**self).ledger()
    }
    fn batch_generate(&self, requests: &[GenerationRequest]) -> Result<Vec<Vec<String>>, LmError> {
        (**self).batch_generate(requests)
    }
    fn batch_logprob(
        &self,
        pairs: &[(String, String)],
    ) -> Result<Vec<ScoredContinuation>, LmError> {
        (**self).batch_logprob(pairs)
    }
}

/// Gathers per-element results, turning any failure into a [`LmError::BatchFailed`]
/// that lists every failed index.
pub(crate) fn collect_batch<T>(
    results: impl IntoIterator<Item = Result<T, LmError>>,
) -> Result<Vec<T>, LmError> {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    let mut first = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failed.push(i);
                first.get_or_insert(e);
            }
        }
    }
    match first {
        None => Ok(ok),
        Some(e) => Err(LmError::BatchFailed {
            failed,
            source: Box::new(e),
        }),
    }
}
