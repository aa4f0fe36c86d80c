//! OpenAI-compatible `/completions` client.
//!
//! Sampling uses the plain completions call. Scoring sends
//! `context + continuation` with `echo: true, logprobs: 0, max_tokens: 0` and
//! sums the echoed log-probs of the tokens that start at or after the end of
//! the context.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    truncate_at_stop, word_count, GenerationRequest, LanguageModel, LedgerCounter, LmError,
    ScoredContinuation, TokenLedger,
};

/// Hard ceiling on attempts per request.
pub const MAX_ATTEMPTS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`. `/completions` is appended.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key. The key itself
    /// never appears in configuration files.
    pub api_key_env: Option<String>,
    pub max_in_flight: usize,
    /// Total attempts per request, clamped to `1..=5`.
    pub retry_limit: u32,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
    /// Reported in context-length errors when the server does not say.
    pub context_limit: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            model: "text-davinci-003".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            max_in_flight: 8,
            retry_limit: MAX_ATTEMPTS,
            initial_backoff_ms: 500,
            timeout_secs: 120,
            context_limit: 4096,
        }
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    index: usize,
    #[serde(default)]
    text: String,
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub struct CompletionsClient {
    config: HttpConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    ledger: LedgerCounter,
}

impl std::fmt::Debug for CompletionsClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompletionsClient")
            .field("endpoint", &self.config.endpoint)
            .field("model", &self.config.model)
            .finish_non_exhaustive()
    }
}

impl CompletionsClient {
    /// Builds a client, reading the key from `config.api_key_env` if set.
    pub fn new(config: HttpConfig) -> Result<Self, LmError> {
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|k| !k.is_empty());
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: HttpConfig, api_key: Option<String>) -> Result<Self, LmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| LmError::InvalidRequest(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            config,
            api_key,
            client,
            ledger: LedgerCounter::default(),
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/completions", self.config.endpoint.trim_end_matches('/'))
    }

    fn attempts(&self) -> u32 {
        self.config.retry_limit.clamp(1, MAX_ATTEMPTS)
    }

    fn post_once(&self, body: &serde_json::Value, context: &str) -> Result<CompletionResponse, LmError> {
        let mut req = self.client.post(self.url()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LmError::Unreachable {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| LmError::Unreachable {
            attempts: 1,
            message: e.to_string(),
        })?;
        if status == 400
            && (text.contains("context_length_exceeded") || text.contains("maximum context length"))
        {
            return Err(LmError::ContextTooLong {
                units: word_count(context),
                limit: self.config.context_limit,
                preview: context.chars().take(60).collect(),
            });
        }
        if !(200..300).contains(&status) {
            return Err(LmError::Http { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| LmError::MalformedResponse(e.to_string()))
    }

    /// Posts with exponential backoff on transient failures.
    fn post(&self, body: &serde_json::Value, context: &str) -> Result<CompletionResponse, LmError> {
        let attempts = self.attempts();
        let mut delay = Duration::from_millis(self.config.initial_backoff_ms);
        let mut last = None;
        for attempt in 1..=attempts {
            match self.post_once(body, context) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retryable() => {
                    log::warn!("completions attempt {attempt}/{attempts} failed: {e}");
                    last = Some(e);
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(LmError::Unreachable {
            attempts,
            message: last.map(|e| e.to_string()).unwrap_or_default(),
        })
    }

    /// Runs `f` over `items` with at most `max_in_flight` concurrent calls,
    /// preserving order.
    fn fan_out<I: Sync, T: Send>(
        &self,
        items: &[I],
        f: impl Fn(&I) -> Result<T, LmError> + Sync,
    ) -> Result<Vec<T>, LmError> {
        let workers = self.config.max_in_flight.clamp(1, items.len().max(1));
        if workers == 1 {
            return super::collect_batch(items.iter().map(&f));
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<T, LmError>>>> =
            items.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= items.len() {
                        break;
                    }
                    let r = f(&items[i]);
                    *slots[i].lock().expect("slot lock poisoned") = Some(r);
                });
            }
        });
        super::collect_batch(slots.into_iter().map(|m| {
            m.into_inner()
                .expect("slot lock poisoned")
                .expect("every slot is filled")
        }))
    }
}

impl LanguageModel for CompletionsClient {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, LmError> {
        request.validate()?;
        let mut body = json!({
            "model": self.config.model,
            "prompt": request.context,
            "temperature": request.temperature,
            "n": request.n_samples,
            "max_tokens": request.max_new_units,
        });
        if !request.stop_sequences.is_empty() {
            body["stop"] = json!(request.stop_sequences);
        }
        if request.temperature > 0.0 {
            body["seed"] = json!(request.seed);
        }
        let resp = self.post(&body, &request.context)?;
        let mut choices = resp.choices;
        choices.sort_by_key(|c| c.index);
        if choices.len() != request.n_samples {
            return Err(LmError::MalformedResponse(format!(
                "asked for {} samples, got {}",
                request.n_samples,
                choices.len()
            )));
        }
        let outputs: Vec<String> = choices
            .into_iter()
            .map(|c| truncate_at_stop(&c.text, &request.stop_sequences))
            .collect();
        let (p, c) = match resp.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (
                word_count(&request.context) as u64,
                outputs.iter().map(|o| word_count(o) as u64).sum(),
            ),
        };
        self.ledger.record(p, c);
        Ok(outputs)
    }

    fn logprob(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, LmError> {
        if continuation.is_empty() {
            return Err(LmError::InvalidRequest("continuation is empty".into()));
        }
        let full = format!("{context}{continuation}");
        let body = json!({
            "model": self.config.model,
            "prompt": full,
            "max_tokens": 0,
            "temperature": 0,
            "echo": true,
            "logprobs": 0,
        });
        let resp = self.post(&body, context)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LmError::MalformedResponse("no choices".into()))?;
        let lp = choice.logprobs.ok_or_else(|| {
            LmError::Unscoreable("endpoint did not echo log-probs; is it a completions endpoint?".into())
        })?;
        if lp.token_logprobs.len() != lp.text_offset.len() {
            return Err(LmError::MalformedResponse(
                "token_logprobs and text_offset differ in length".into(),
            ));
        }
        let boundary = context.chars().count();
        let mut total = 0.0;
        let mut units = 0;
        for (i, (&offset, logprob)) in lp.text_offset.iter().zip(&lp.token_logprobs).enumerate() {
            if offset < boundary {
                continue;
            }
            let value = logprob.ok_or_else(|| {
                LmError::Unscoreable(format!(
                    "missing log-prob for continuation token {:?}",
                    lp.tokens.get(i)
                ))
            })?;
            total += value;
            units += 1;
        }
        if units == 0 {
            return Err(LmError::Unscoreable(
                "no echoed tokens fall inside the continuation".into(),
            ));
        }
        let prompt_units = resp
            .usage
            .map(|u| u.prompt_tokens)
            .unwrap_or(lp.tokens.len() as u64);
        self.ledger.record(prompt_units, 0);
        Ok(ScoredContinuation::new(total, units))
    }

    fn ledger(&self) -> TokenLedger {
        self.ledger.snapshot()
    }

    fn batch_generate(&self, requests: &[GenerationRequest]) -> Result<Vec<Vec<String>>, LmError> {
        self.fan_out(requests, |r| self.generate(r))
    }

    fn batch_logprob(
        &self,
        pairs: &[(String, String)],
    ) -> Result<Vec<ScoredContinuation>, LmError> {
        if pairs.is_empty() {
            return Err(LmError::InvalidRequest("empty logprob batch".into()));
        }
        self.fan_out(pairs, |(c, y)| self.logprob(c, y))
    }
}
