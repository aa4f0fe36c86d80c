//! A seeded finite-order Markov language model with exact probabilities.
//!
//! The model emits whitespace-separated symbols from a small vocabulary
//! (at most 31 symbols plus a reserved end-of-sequence marker). The
//! conditional distribution over the next symbol is a softmax over logits
//! drawn from a ChaCha stream keyed by
//!
//! * the model seed,
//! * a SHA-256 fingerprint of the full context string, and
//! * the last `order` generated symbols (padded with a begin marker).
//!
//! Outputs are complete strings of `min_len..=max_len` symbols: the end
//! marker is unavailable before `min_len` and forced at `max_len`, so the
//! distribution over outputs is proper and its support is finite.
//! [`ToyLm::logprob`] scores a continuation as a complete output, end marker
//! included, and normalizes by its word count.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    truncate_at_stop, word_count, GenerationRequest, LanguageModel, LedgerCounter, LmError,
    ScoredContinuation, TokenLedger,
};
use crate::math::{argmax, log_sum_exp, mix64};

/// Largest vocabulary including the end marker.
pub const MAX_SYMBOLS: usize = 32;

/// Printable name of the end marker in published tables.
pub const EOS: &str = "</s>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyLmConfig {
    pub vocab: Vec<String>,
    pub seed: u64,
    /// Number of previously generated symbols the conditional depends on.
    pub order: usize,
    /// Logit scale. 0 gives uniform conditionals.
    pub sharpness: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Added to the end marker's logit whenever it is allowed.
    pub eos_bias: f64,
    /// Contexts longer than this many words are rejected.
    pub context_limit: usize,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            vocab: ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot"]
                .map(String::from)
                .to_vec(),
            seed: 0,
            order: 2,
            sharpness: 3.0,
            min_len: 1,
            max_len: 3,
            eos_bias: 0.0,
            context_limit: 16_384,
        }
    }
}

/// Deterministic toy backend. Shareable read-only across threads; sampling
/// takes its randomness from the per-request seed.
#[derive(Debug)]
pub struct ToyLm {
    config: ToyLmConfig,
    index: HashMap<String, usize>,
    ledger: LedgerCounter,
}

impl Clone for ToyLm {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            index: self.index.clone(),
            ledger: LedgerCounter::default(),
        }
    }
}

impl ToyLm {
    pub fn new(config: ToyLmConfig) -> Result<Self, LmError> {
        let bad = |m: String| Err(LmError::InvalidRequest(format!("toy model config: {m}")));
        if config.vocab.is_empty() {
            return bad("vocabulary is empty".into());
        }
        if config.vocab.len() + 1 > MAX_SYMBOLS {
            return bad(format!(
                "vocabulary has {} symbols, at most {} allowed",
                config.vocab.len(),
                MAX_SYMBOLS - 1
            ));
        }
        if config.min_len > config.max_len || config.max_len == 0 {
            return bad(format!(
                "length bounds {}..={} are empty",
                config.min_len, config.max_len
            ));
        }
        if !config.sharpness.is_finite() || !config.eos_bias.is_finite() {
            return bad("sharpness and eos_bias must be finite".into());
        }
        let mut index = HashMap::new();
        for (i, sym) in config.vocab.iter().enumerate() {
            if sym.is_empty() || sym.chars().any(char::is_whitespace) || sym == EOS {
                return bad(format!("invalid symbol {sym:?}"));
            }
            if index.insert(sym.clone(), i).is_some() {
                return bad(format!("duplicate symbol {sym:?}"));
            }
        }
        Ok(Self {
            config,
            index,
            ledger: LedgerCounter::default(),
        })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &[String] {
        &self.config.vocab
    }

    /// Index of the end marker in distributions returned by this model.
    pub fn eos_index(&self) -> usize {
        self.config.vocab.len()
    }

    pub fn context_fingerprint(context: &str) -> u64 {
        let digest = Sha256::digest(context.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    /// The published conditional table: probabilities of every symbol (end
    /// marker last) after `context` followed by the generated `history`.
    pub fn next_distribution(&self, context: &str, history: &[&str]) -> Result<Vec<f64>, LmError> {
        let ids = self.encode(history)?;
        let fp = Self::context_fingerprint(context);
        let logits = self.logits(fp, &ids);
        Ok(softmax_masked(&logits))
    }

    /// Every complete output the model can produce, shortest first, in
    /// vocabulary order. Fails when there would be more than `limit`.
    pub fn enumerate_outputs(&self, limit: usize) -> Result<Vec<String>, LmError> {
        let v = self.config.vocab.len();
        let mut total: usize = 0;
        for len in self.config.min_len..=self.config.max_len {
            let count = (v as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
            total = total.saturating_add(count.min(usize::MAX as u128) as usize);
        }
        if total > limit {
            return Err(LmError::InvalidRequest(format!(
                "output space has {total} strings, limit {limit}"
            )));
        }
        let mut out = Vec::with_capacity(total);
        for len in self.config.min_len..=self.config.max_len {
            let count = v.pow(len as u32);
            for code in 0..count {
                let mut rest = code;
                let mut digits = vec![0usize; len];
                for d in digits.iter_mut().rev() {
                    *d = rest % v;
                    rest /= v;
                }
                let words: Vec<&str> = digits.iter().map(|&d| self.config.vocab[d].as_str()).collect();
                out.push(words.join(" "));
            }
        }
        Ok(out)
    }

    fn encode(&self, units: &[&str]) -> Result<Vec<usize>, LmError> {
        units
            .iter()
            .map(|u| {
                self.index.get(*u).copied().ok_or_else(|| {
                    LmError::Unscoreable(format!("unit {u:?} is not in the toy vocabulary"))
                })
            })
            .collect()
    }

    /// Raw logits for the next symbol, `-inf` where the length bounds forbid it.
    fn logits(&self, fp: u64, history: &[usize]) -> Vec<f64> {
        let n = self.config.vocab.len() + 1;
        let eos = n - 1;
        let len = history.len();
        if len >= self.config.max_len {
            let mut l = vec![f64::NEG_INFINITY; n];
            l[eos] = 0.0;
            return l;
        }

        let begin = MAX_SYMBOLS as u64;
        let mut window: u64 = 0;
        for j in 0..self.config.order {
            let sym = if len + j >= self.config.order {
                history[len + j - self.config.order] as u64
            } else {
                begin
            };
            window = window.wrapping_mul(MAX_SYMBOLS as u64 + 1).wrapping_add(sym);
        }
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.config.seed.to_le_bytes());
        key[8..16].copy_from_slice(&fp.to_le_bytes());
        key[16..24].copy_from_slice(&window.to_le_bytes());
        key[24..].copy_from_slice(&(self.config.order as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);

        let mut logits: Vec<f64> = (0..n)
            .map(|_| self.config.sharpness * (2.0 * rng.gen::<f64>() - 1.0))
            .collect();
        if len < self.config.min_len {
            logits[eos] = f64::NEG_INFINITY;
        } else {
            logits[eos] += self.config.eos_bias;
        }
        logits
    }

    fn sample_one(&self, fp: u64, request: &GenerationRequest, rng: &mut ChaCha8Rng) -> String {
        let eos = self.eos_index();
        let mut history = Vec::new();
        while history.len() < request.max_new_units {
            let logits = self.logits(fp, &history);
            let next = if request.temperature == 0.0 {
                argmax(&logits).unwrap_or(eos)
            } else {
                let scaled: Vec<f64> = logits.iter().map(|l| l / request.temperature).collect();
                let probs = softmax_masked(&scaled);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc && *p > 0.0 {
                        pick = i;
                        break;
                    }
                }
                // Guard against round-off leaving `pick` on a forbidden symbol.
                if probs[pick] == 0.0 {
                    pick = argmax(&probs).unwrap_or(eos);
                }
                pick
            };
            if next == eos {
                break;
            }
            history.push(next);
        }
        let words: Vec<&str> = history
            .iter()
            .map(|&i| self.config.vocab[i].as_str())
            .collect();
        words.join(" ")
    }

    fn check_context(&self, context: &str) -> Result<usize, LmError> {
        let units = word_count(context);
        if units > self.config.context_limit {
            return Err(LmError::ContextTooLong {
                units,
                limit: self.config.context_limit,
                preview: context.chars().take(60).collect(),
            });
        }
        Ok(units)
    }
}

fn softmax_masked(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits
        .iter()
        .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - lse).exp() })
        .collect()
}

impl LanguageModel for ToyLm {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, LmError> {
        request.validate()?;
        let ctx_units = self.check_context(&request.context)?;
        let fp = Self::context_fingerprint(&request.context);
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(request.seed ^ mix64(fp ^ self.config.seed)));
        let outputs: Vec<String> = (0..request.n_samples)
            .map(|_| {
                let text = self.sample_one(fp, request, &mut rng);
                truncate_at_stop(&text, &request.stop_sequences)
            })
            .collect();
        let completion: usize = outputs.iter().map(|o| word_count(o)).sum();
        self.ledger.record(ctx_units as u64, completion as u64);
        Ok(outputs)
    }

    fn logprob(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, LmError> {
        let units: Vec<&str> = continuation.split_whitespace().collect();
        if units.is_empty() {
            return Err(LmError::InvalidRequest("continuation is empty".into()));
        }
        let ctx_units = self.check_context(context)?;
        let ids = self.encode(&units)?;
        if ids.len() < self.config.min_len || ids.len() > self.config.max_len {
            return Err(LmError::Unscoreable(format!(
                "continuation has {} units, toy outputs have {}..={}",
                ids.len(),
                self.config.min_len,
                self.config.max_len
            )));
        }
        let fp = Self::context_fingerprint(context);
        let mut total = 0.0;
        for step in 0..=ids.len() {
            let logits = self.logits(fp, &ids[..step]);
            let target = if step < ids.len() { ids[step] } else { self.eos_index() };
            total += logits[target] - log_sum_exp(&logits);
        }
        self.ledger
            .record((ctx_units + units.len()) as u64, 0);
        Ok(ScoredContinuation::new(total, units.len()))
    }

    fn ledger(&self) -> TokenLedger {
        self.ledger.snapshot()
    }
}
