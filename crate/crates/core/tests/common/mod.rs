//! Independent reference computations for integration tests. Contexts are
//! written out by hand and log-probs are rebuilt from the toy model's
//! published conditional table, so nothing here goes through the template
//! renderer or `ToyLm::logprob`.
#![allow(dead_code)]

use dln::lm::ToyLm;

pub fn classify_ctx(prompt: &str, x: &str) -> String {
    format!("{prompt}\n\n{x}\n\nAnswer:")
}

pub fn residual_ctx(prompt: &str, x: &str, h: &str) -> String {
    format!("{prompt}\n\n{x}\nYour thoughts were:\n{h}\n\nAnswer:")
}

pub fn hidden_ctx(prompt: &str, x: &str) -> String {
    format!("{x}\n\n{prompt} Let's think step by step.")
}

/// Total log-prob of `cont` as a complete output, end marker included.
pub fn total_logprob(lm: &ToyLm, ctx: &str, cont: &str) -> f64 {
    let words: Vec<&str> = cont.split_whitespace().collect();
    let mut total = 0.0;
    for step in 0..=words.len() {
        let p = lm.next_distribution(ctx, &words[..step]).unwrap();
        let target = if step < words.len() {
            lm.vocab().iter().position(|v| v == words[step]).unwrap()
        } else {
            lm.eos_index()
        };
        total += p[target].ln();
    }
    total
}

pub fn normalized_logprob(lm: &ToyLm, ctx: &str, cont: &str) -> f64 {
    total_logprob(lm, ctx, cont) / cont.split_whitespace().count() as f64
}

/// Softmax with plain exponentials, for inputs small enough not to overflow.
pub fn naive_softmax(xs: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

use std::sync::Mutex;

use dln::lm::{GenerationRequest, LanguageModel, LmError, ScoredContinuation, TokenLedger};

/// Wraps a backend and records every generation request.
pub struct Recorder<L> {
    pub inner: L,
    pub requests: Mutex<Vec<GenerationRequest>>,
}

impl<L> Recorder<L> {
    pub fn new(inner: L) -> Self {
        Self { inner, requests: Mutex::new(Vec::new()) }
    }

    pub fn contexts(&self) -> Vec<String> {
        self.requests.lock().unwrap().iter().map(|r| r.context.clone()).collect()
    }
}

impl<L: LanguageModel> LanguageModel for Recorder<L> {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, LmError> {
        self.requests.lock().unwrap().push(request.clone());
        self.inner.generate(request)
    }

    fn logprob(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, LmError> {
        self.inner.logprob(context, continuation)
    }

    fn ledger(&self) -> TokenLedger {
        self.inner.ledger()
    }
}
