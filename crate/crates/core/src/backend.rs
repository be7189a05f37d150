//! Conditional log-probability backends.
//!
//! Every scoring quantity in the crate is built from one primitive:
//! `log P(continuation | context)` in natural-log units, returned per token.
//! Backends in this module:
//!
//! - [`MockBackend`]: a lookup table, errors on any pair it does not know.
//! - [`UnigramBackend`]: a whitespace-token unigram model, optionally mixed
//!   with an in-context token cache so that the context can matter.
//! - [`HttpBackend`]: JSON-over-HTTP client for a model server.
//! - [`CachedBackend`] and [`CountingBackend`]: wrappers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use lru::LruCache;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-token log-probabilities of a continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub total: f64,
}

impl TokenLogProbs {
    pub fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            logprobs: Vec::new(),
            total: 0.0,
        }
    }

    pub fn new(tokens: Vec<String>, logprobs: Vec<f64>) -> Result<Self> {
        if tokens.len() != logprobs.len() {
            return Err(Error::Protocol(format!(
                "{} tokens but {} log-probabilities",
                tokens.len(),
                logprobs.len()
            )));
        }
        if let Some(bad) = logprobs.iter().find(|lp| !lp.is_finite() || **lp > 0.0) {
            return Err(Error::Protocol(format!("invalid log-probability {bad}")));
        }
        let total = logprobs.iter().sum();
        Ok(Self {
            tokens,
            logprobs,
            total,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Log-probability under the given normalization.
    pub fn normalized(&self, normalization: Normalization) -> f64 {
        match normalization {
            Normalization::Sum => self.total,
            Normalization::PerToken if self.is_empty() => 0.0,
            Normalization::PerToken => self.total / self.len() as f64,
        }
    }
}

/// How a continuation's token log-probabilities collapse to one number.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Sum,
    PerToken,
}

/// Source of `log P(continuation | context)` and greedy generation.
pub trait LogProbBackend: Send + Sync {
    fn name(&self) -> &str;

    fn conditional_logprob(&self, context: &str, continuation: &str) -> Result<TokenLogProbs>;

    /// Greedy continuation of `prompt`, cut at the first stop sequence or
    /// after `max_tokens` tokens.
    fn generate(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String>;
}

impl<T: LogProbBackend + ?Sized> LogProbBackend for &T {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn conditional_logprob(&self, context: &str, continuation: &str) -> Result<TokenLogProbs> {
        (**self).conditional_logprob(context, continuation)
    }
    fn generate(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String> {
        (**self).generate(prompt, max_tokens, stop)
    }
}

impl<T: LogProbBackend + ?Sized> LogProbBackend for Box<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn conditional_logprob(&self, context: &str, continuation: &str) -> Result<TokenLogProbs> {
        (**self).conditional_logprob(context, continuation)
    }
    fn generate(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String> {
        (**self).generate(prompt, max_tokens, stop)
    }
}

impl<T: LogProbBackend + ?Sized> LogProbBackend for Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn conditional_logprob(&self, context: &str, continuation: &str) -> Result<TokenLogProbs> {
        (**self).conditional_logprob(context, continuation)
    }
    fn generate(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String> {
        (**self).generate(prompt, max_tokens, stop)
    }
}

/// Cuts `text` at the earliest occurrence of any stop sequence.
pub fn truncate_at_stop(text: &str, stop: &[String]) -> String {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].to_string()
}

fn check_max_tokens(max_tokens: usize) -> Result<()> {
    if max_tokens == 0 {
        return Err(Error::Config("max_tokens must be at least 1".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Mock
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockEntry {
    pub context: String,
    pub continuation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockGeneration {
    pub prompt: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockFile {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub logprobs: Vec<MockEntry>,
    #[serde(default)]
    pub generations: Vec<MockGeneration>,
}

/// Table-driven backend. Any lookup miss is an error, which pins the exact
/// set of model calls an algorithm is allowed to make.
#[derive(Debug, Default)]
pub struct MockBackend {
    name: String,
    table: HashMap<(String, String), TokenLogProbs>,
    generations: HashMap<String, String>,
    touched: Mutex<BTreeSet<(String, String)>>,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new() -> Self {
        Self {
            name: "mock".into(),
            ..Default::default()
        }
    }

    pub fn from_file(file: MockFile) -> Result<Self> {
        let mut mock = Self::new();
        if let Some(name) = file.name {
            mock.name = name;
        }
        for e in file.logprobs {
            let tokens = e
                .tokens
                .unwrap_or_else(|| (0..e.logprobs.len()).map(|i| format!("<{i}>")).collect());
            mock.insert_tokens(e.context, e.continuation, tokens, e.logprobs)?;
        }
        for g in file.generations {
            mock.generations.insert(g.prompt, g.text);
        }
        Ok(mock)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file(serde_json::from_str(&text)?)
    }

    pub fn with_entry(
        mut self,
        context: impl Into<String>,
        continuation: impl Into<String>,
        logprobs: Vec<f64>,
    ) -> Result<Self> {
        let tokens = (0..logprobs.len()).map(|i| format!("<{i}>")).collect();
        self.insert_tokens(context.into(), continuation.into(), tokens, logprobs)?;
        Ok(self)
    }

    pub fn with_generation(mut self, prompt: impl Into<String>, text: impl Into<String>) -> Self {
        self.generations.insert(prompt.into(), text.into());
        self
    }

    pub fn insert(
        &mut self,
        context: impl Into<String>,
        continuation: impl Into<String>,
        logprobs: Vec<f64>,
    ) -> Result<()> {
        let tokens = (0..logprobs.len()).map(|i| format!("<{i}>")).collect();
        self.insert_tokens(context.into(), continuation.into(), tokens, logprobs)
    }

    pub fn insert_tokens(
        &mut self,
        context: String,
        continuation: String,
        tokens: Vec<String>,
        logprobs: Vec<f64>,
    ) -> Result<()> {
        let entry = TokenLogProbs::new(tokens, logprobs)?;
        self.table.insert((context, continuation), entry);
        Ok(())
    }

    /// Every (context, continuation) pair looked up so far.
    pub fn touched(&self) -> BTreeSet<(String, String)> {
        self.touched.lock().unwrap().clone()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl LogProbBackend for MockBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn conditional_logprob(&self, context: &str, continuation: &str) -> Result<TokenLogProbs> {
        if continuation.is_empty() {
            return Ok(TokenLogProbs::empty());
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let key = (context.to_string(), continuation.to_string());
        self.touched.lock().unwrap().insert(key.clone());
        self.table.get(&key).cloned().ok_or(Error::MockMiss {
            context: key.0,
            continuation: key.1,
        })
    }

    fn generate(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String> {
        check_max_tokens(max_tokens)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let text = self
            .generations
            .get(prompt)
            .ok_or_else(|| Error::MockMiss {
                context: prompt.to_string(),
                continuation: String::new(),
            })?;
        Ok(truncate_at_stop(text, stop))
    }
}

// ---------------------------------------------------------------------------
// Unigram
// ---------------------------------------------------------------------------

/// Log-probabilities are held in fixed point with this many fractional bits,
/// which makes totals exactly additive across any split of a continuation.
const FIXED_POINT_BITS: i32 = 32;

fn to_fixed(x: f64) -> i64 {
    (x * 2f64.powi(FIXED_POINT_BITS)).round() as i64
}

fn from_fixed(q: i64) -> f64 {
    q as f64 / 2f64.powi(FIXED_POINT_BITS)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnigramFile {
    pub vocab: BTreeMap<String, f64>,
    /// Vocabulary entry used for out-of-vocabulary tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unk: Option<String>,
    /// Weight of the in-context cache component; 0 gives a pure unigram.
    #[serde(default)]
    pub context_weight: f64,
}

/// Whitespace-tokenized unigram model.
///
/// With `context_weight = α > 0` the token distribution becomes
/// `(1 − α)·p(t) + α·c(t)/|w|`, where `w` is the token window made of the
/// context followed by the continuation tokens scored so far and `c(t)` counts
/// `t` in it. With `α = 0` the context is ignored entirely.
#[derive(Debug, Clone)]
pub struct UnigramBackend {
    vocab: BTreeMap<String, f64>,
    unk: Option<String>,
    context_weight: f64,
}

impl UnigramBackend {
    pub fn new(vocab: BTreeMap<String, f64>) -> Result<Self> {
        Self::from_file(UnigramFile {
            vocab,
            unk: None,
            context_weight: 0.0,
        })
    }

    pub fn from_file(file: UnigramFile) -> Result<Self> {
        if file.vocab.is_empty() {
            return Err(Error::Config("unigram vocabulary is empty".into()));
        }
        if let Some((tok, p)) = file
            .vocab
            .iter()
            .find(|(_, p)| !(**p > 0.0 && p.is_finite()))
        {
            return Err(Error::Config(format!(
                "unigram probability for {tok:?} must be positive, got {p}"
            )));
        }
        let sum: f64 = file.vocab.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "unigram probabilities sum to {sum}, expected 1"
            )));
        }
        if let Some(unk) = &file.unk {
            if !file.vocab.contains_key(unk) {
                return Err(Error::Config(format!(
                    "unk token {unk:?} is not in the vocabulary"
                )));
            }
        }
        if !(0.0..1.0).contains(&file.context_weight) {
            return Err(Error::Config(format!(
                "context_weight must be in [0, 1), got {}",
                file.context_weight
            )));
        }
        Ok(Self {
            vocab: file.vocab,
            unk: file.unk,
            context_weight: file.context_weight,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file(serde_json::from_str(&text)?)
    }

    pub fn with_unk(mut self, unk: impl Into<String>) -> Result<Self> {
        let unk = unk.into();
        if !self.vocab.contains_key(&unk) {
            return Err(Error::Config(format!(
                "unk token {unk:?} is not in the vocabulary"
            )));
        }
        self.unk = Some(unk);
        Ok(self)
    }

    pub fn with_context_weight(mut self, weight: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&weight) {
            return Err(Error::Config(format!(
                "context_weight must be in [0, 1), got {weight}"
            )));
        }
        self.context_weight = weight;
        Ok(self)
    }

    pub fn to_file(&self) -> UnigramFile {
        UnigramFile {
            vocab: self.vocab.clone(),
            unk: self.unk.clone(),
            context_weight: self.context_weight,
        }
    }

    pub fn context_weight(&self) -> f64 {
        self.context_weight
    }

    /// Maps a raw token to its vocabulary entry.
    fn resolve<'a>(&'a self, token: &str) -> Result<&'a str> {
        if let Some((k, _)) = self.vocab.get_key_value(token) {
            return Ok(k);
        }
        self.unk.as_deref().ok_or_else(|| {
            Error::TokenizerRejection(format!("token {token:?} is not in the vocabulary"))
        })
    }

    /// Context tokens outside the vocabulary (and without `<unk>`) still
    /// count toward the window length.
    fn window<'a>(&'a self, context: &str) -> (HashMap<&'a str, usize>, usize) {
        let mut counts = HashMap::new();
        let mut len = 0;
        for tok in context.split_whitespace() {
            if let Ok(resolved) = self.resolve(tok) {
                *counts.entry(resolved).or_insert(0) += 1;
            }
            len += 1;
        }
        (counts, len)
    }

    fn prob(&self, token: &str, counts: &HashMap<&str, usize>, window_len: usize) -> f64 {
        let base = self.vocab[token];
        if self.context_weight == 0.0 || window_len == 0 {
            return base;
        }
        let cached = counts.get(token).copied().unwrap_or(0) as f64 / window_len as f64;
        (1.0 - self.context_weight) * base + self.context_weight * cached
    }
}

impl LogProbBackend for UnigramBackend {
    fn name(&self) -> &str {
        "unigram"
    }

    fn conditional_logprob(&self, context: &str, continuation: &str) -> Result<TokenLogProbs> {
        let (mut counts, mut window_len) = self.window(context);
        let mut tokens = Vec::new();
        let mut fixed = Vec::new();
        for raw in continuation.split_whitespace() {
            let tok = self.resolve(raw)?;
            fixed.push(to_fixed(self.prob(tok, &counts, window_len).ln()));
            tokens.push(raw.to_string());
            *counts.entry(tok).or_insert(0) += 1;
            window_len += 1;
        }
        let total = from_fixed(fixed.iter().sum());
        Ok(TokenLogProbs {
            tokens,
            logprobs: fixed.into_iter().map(from_fixed).collect(),
            total,
        })
    }

    fn generate(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String> {
        check_max_tokens(max_tokens)?;
        let (mut counts, mut window_len) = self.window(prompt);
        let mut out = String::new();
        for _ in 0..max_tokens {
            // BTreeMap iteration makes ties resolve to the smallest token.
            let mut best: Option<(&str, f64)> = None;
            for tok in self.vocab.keys() {
                let p = self.prob(tok, &counts, window_len);
                if best.is_none_or(|(_, bp)| p > bp) {
                    best = Some((tok, p));
                }
            }
            let (tok, _) = best.expect("vocabulary is non-empty");
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
            let cut = truncate_at_stop(&out, stop);
            if cut.len() < out.len() {
                return Ok(cut);
            }
            *counts.entry(tok).or_insert(0) += 1;
            window_len += 1;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Wrappers
// ---------------------------------------------------------------------------

/// Counts requests that pass through to the wrapped backend.
#[derive(Debug)]
pub struct CountingBackend<B> {
    inner: B,
    logprob_calls: AtomicUsize,
    generate_calls: AtomicUsize,
}

impl<B: LogProbBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            logprob_calls: AtomicUsize::new(0),
            generate_calls: AtomicUsize::new(0),
        }
    }

    pub fn logprob_calls(&self) -> usize {
        self.logprob_calls.load(Ordering::Relaxed)
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls.load(Ordering::Relaxed)
    }

    pub fn total_calls(&self) -> usize {
        self.logprob_calls() + self.generate_calls()
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: LogProbBackend> LogProbBackend for CountingBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn conditional_logprob(&self, context: &str, continuation: &str) -> Result<TokenLogProbs> {
        self.logprob_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.conditional_logprob(context, continuation)
    }

    fn generate(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String> {
        self.generate_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.generate(prompt, max_tokens, stop)
    }
}

type LogprobKey = (String, String, String);
type GenerateKey = (String, String, usize, Vec<String>);

#[derive(Serialize, Deserialize)]
struct CacheLine {
    backend: String,
    context: String,
    continuation: String,
    result: TokenLogProbs,
}

/// Bounded LRU cache in front of another backend, keyed by
/// (backend name, context, continuation).
pub struct CachedBackend<B> {
    inner: B,
    logprobs: Mutex<LruCache<LogprobKey, TokenLogProbs>>,
    generations: Mutex<LruCache<GenerateKey, String>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

pub const DEFAULT_CACHE_CAPACITY: usize = 1 << 20;

impl<B: LogProbBackend> CachedBackend<B> {
    pub fn new(inner: B) -> Self {
        Self::with_capacity(inner, DEFAULT_CACHE_CAPACITY)
    }

    pub fn with_capacity(inner: B, capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).unwrap();
        Self {
            inner,
            logprobs: Mutex::new(LruCache::new(cap)),
            generations: Mutex::new(LruCache::new(cap)),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    /// Seeds the cache from a JSONL file written by [`persist`](Self::persist).
    /// Entries for other backends are ignored. A missing file is not an error.
    pub fn preload(&self, path: &Path) -> Result<usize> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut cache = self.logprobs.lock().unwrap();
        let mut loaded = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let entry: CacheLine = serde_json::from_str(line)?;
            if entry.backend == self.inner.name() {
                cache.put(
                    (entry.backend, entry.context, entry.continuation),
                    entry.result,
                );
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    /// Writes cached log-probabilities as JSONL sorted by key.
    pub fn persist(&self, path: &Path) -> Result<()> {
        let cache = self.logprobs.lock().unwrap();
        let mut entries: Vec<_> = cache.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for ((backend, context, continuation), result) in entries {
            let line = serde_json::to_string(&CacheLine {
                backend: backend.clone(),
                context: context.clone(),
                continuation: continuation.clone(),
                result: result.clone(),
            })?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

impl<B: LogProbBackend> LogProbBackend for CachedBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn conditional_logprob(&self, context: &str, continuation: &str) -> Result<TokenLogProbs> {
        let key = (
            self.inner.name().to_string(),
            context.to_string(),
            continuation.to_string(),
        );
        if let Some(hit) = self.logprobs.lock().unwrap().get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit.clone());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let result = self.inner.conditional_logprob(context, continuation)?;
        self.logprobs.lock().unwrap().put(key, result.clone());
        Ok(result)
    }

    fn generate(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String> {
        let key = (
            self.inner.name().to_string(),
            prompt.to_string(),
            max_tokens,
            stop.to_vec(),
        );
        if let Some(hit) = self.generations.lock().unwrap().get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit.clone());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let result = self.inner.generate(prompt, max_tokens, stop)?;
        self.generations.lock().unwrap().put(key, result.clone());
        Ok(result)
    }
}

// ---------------------------------------------------------------------------
// HTTP
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct LogprobRequest {
    pub model: String,
    pub context: String,
    pub continuation: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LogprobResponse {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: usize,
    pub stop: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub model: String,
    pub ok: bool,
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: String,
}

impl LogprobResponse {
    /// Checks alignment and consistency of a server reply.
    pub fn into_token_logprobs(self) -> Result<TokenLogProbs> {
        let result = TokenLogProbs::new(self.tokens, self.logprobs)?;
        let tolerance = 1e-6 * (1.0 + result.total.abs());
        if (result.total - self.total).abs() > tolerance {
            return Err(Error::Protocol(format!(
                "total {} disagrees with the sum of log-probabilities {}",
                self.total, result.total
            )));
        }
        Ok(TokenLogProbs {
            total: self.total,
            ..result
        })
    }
}

/// Caps the number of requests in flight.
#[derive(Debug)]
struct Gate {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
    pub max_in_flight: usize,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            timeout: Duration::from_secs(60),
            retries: 3,
            backoff: Duration::from_millis(200),
            max_in_flight: 8,
        }
    }
}

/// Client for the `/v1/logprob`, `/v1/generate` and `/v1/health` protocol.
#[derive(Debug)]
pub struct HttpBackend {
    config: HttpConfig,
    name: String,
    client: reqwest::blocking::Client,
    gate: Gate,
    retries_performed: AtomicU64,
}

enum Attempt<T> {
    Done(T),
    Retry(Error),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            name: format!("http:{}", config.model),
            gate: Gate::new(config.max_in_flight),
            config,
            client,
            retries_performed: AtomicU64::new(0),
        })
    }

    pub fn retries_performed(&self) -> u64 {
        self.retries_performed.load(Ordering::Relaxed)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn with_retries<T>(&self, what: &str, mut attempt: impl FnMut() -> Attempt<T>) -> Result<T> {
        let mut delay = self.config.backoff;
        let mut tries = 0;
        loop {
            match attempt() {
                Attempt::Done(v) => return Ok(v),
                Attempt::Retry(err) if tries < self.config.retries => {
                    tries += 1;
                    self.retries_performed.fetch_add(1, Ordering::Relaxed);
                    log::warn!(
                        "{what}: {err}; retry {tries}/{} in {delay:?}",
                        self.config.retries
                    );
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                Attempt::Retry(err) => return Err(err),
            }
        }
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp> {
        let _slot = self.gate.acquire();
        let url = self.url(path);

        self.with_retries(path, || {
            let response = match self.client.post(&url).json(body).send() {
                Ok(r) => r,
                Err(e) => return Attempt::Retry(Error::Transport(e.to_string())),
            };
            Self::read_response(response)
        })?
    }

    fn read_response<Resp: for<'de> Deserialize<'de>>(
        response: reqwest::blocking::Response,
    ) -> Attempt<Result<Resp>> {
        let status = response.status();
        let body = match response.text() {
            Ok(b) => b,
            Err(e) => return Attempt::Retry(Error::Transport(e.to_string())),
        };
        if status.is_success() {
            return Attempt::Done(
                serde_json::from_str(&body)
                    .map_err(|e| Error::Protocol(format!("malformed response: {e}"))),
            );
        }
        let message = serde_json::from_str::<ErrorBody>(&body)
            .map(|b| b.error)
            .unwrap_or(body);
        let err = Error::Status {
            status: status.as_u16(),
            message,
        };
        if status.is_server_error() {
            Attempt::Retry(err)
        } else if status.as_u16() == 422 {
            Attempt::Done(Err(Error::TokenizerRejection(err.to_string())))
        } else {
            Attempt::Done(Err(err))
        }
    }

    pub fn health(&self) -> Result<HealthResponse> {
        let url = self.url("/v1/health");

        self.with_retries("/v1/health", || match self.client.get(&url).send() {
            Ok(r) => Self::read_response(r),
            Err(e) => Attempt::Retry(Error::Transport(e.to_string())),
        })?
    }
}

impl LogProbBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn conditional_logprob(&self, context: &str, continuation: &str) -> Result<TokenLogProbs> {
        if continuation.is_empty() {
            return Ok(TokenLogProbs::empty());
        }
        let response: LogprobResponse = self.post(
            "/v1/logprob",
            &LogprobRequest {
                model: self.config.model.clone(),
                context: context.to_string(),
                continuation: continuation.to_string(),
            },
        )?;
        response.into_token_logprobs()
    }

    fn generate(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String> {
        check_max_tokens(max_tokens)?;
        let response: GenerateResponse = self.post(
            "/v1/generate",
            &GenerateRequest {
                model: self.config.model.clone(),
                prompt: prompt.to_string(),
                max_tokens,
                stop: stop.to_vec(),
            },
        )?;
        Ok(truncate_at_stop(&response.text, stop))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> UnigramBackend {
        UnigramBackend::new(BTreeMap::from([
            ("a".to_string(), 0.5),
            ("b".to_string(), 0.25),
            ("c".to_string(), 0.25),
        ]))
        .unwrap()
    }

    #[test]
    fn unigram_hand_computed_total() {
        let got = abc().conditional_logprob("", "a b").unwrap();
        let expected = 0.5f64.ln() + 0.25f64.ln();
        assert!((got.total - expected).abs() < 1e-9);
        assert!((got.total - (-2.07944)).abs() < 1e-5);
        assert_eq!(got.tokens, ["a", "b"]);
    }

    #[test]
    fn unigram_ignores_context_without_cache_weight() {
        let b = abc();
        assert_eq!(
            b.conditional_logprob("c c c", "a").unwrap().total,
            b.conditional_logprob("", "a").unwrap().total
        );
    }

    #[test]
    fn empty_continuation_is_zero() {
        let mock = MockBackend::new();
        for backend in [&abc() as &dyn LogProbBackend, &mock] {
            let r = backend.conditional_logprob("anything", "").unwrap();
            assert_eq!(r.total, 0.0);
            assert!(r.is_empty());
        }
    }

    #[test]
    fn mock_sums_table_entries() {
        let mock = MockBackend::new()
            .with_entry("ctx", " yes", vec![-0.4, -0.3])
            .unwrap();
        let r = mock.conditional_logprob("ctx", " yes").unwrap();
        assert!((r.total - (-0.7)).abs() < 1e-12);
        assert!(matches!(
            mock.conditional_logprob("ctx", " no"),
            Err(Error::MockMiss { .. })
        ));
    }

    #[test]
    fn mock_rejects_misaligned_entries() {
        let file = MockFile {
            name: None,
            logprobs: vec![MockEntry {
                context: "c".into(),
                continuation: "x".into(),
                tokens: Some(vec!["x".into()]),
                logprobs: vec![-1.0, -2.0],
            }],
            generations: vec![],
        };
        assert!(matches!(
            MockBackend::from_file(file),
            Err(Error::Protocol(_))
        ));
        assert!(MockBackend::new().with_entry("c", "x", vec![0.5]).is_err());
    }

    #[test]
    fn unigram_greedy_generation() {
        assert_eq!(abc().generate("", 3, &[]).unwrap(), "a a a");
        assert_eq!(abc().generate("", 3, &["a".into()]).unwrap(), "");
    }

    #[test]
    fn mock_generation_and_stop() {
        let mock = MockBackend::new()
            .with_generation("Q: 2+2 A:", " 4")
            .with_generation("Q:", "\nmore");
        assert_eq!(mock.generate("Q: 2+2 A:", 5, &[]).unwrap(), " 4");
        assert_eq!(mock.generate("Q:", 5, &["\n".into()]).unwrap(), "");
        assert!(mock.generate("Q:", 0, &[]).is_err());
    }

    #[test]
    fn unigram_validation() {
        assert!(UnigramBackend::new(BTreeMap::from([("a".into(), 0.5)])).is_err());
        assert!(
            UnigramBackend::new(BTreeMap::from([("a".into(), 1.0), ("b".into(), 0.0)])).is_err()
        );
        assert!(matches!(
            abc().conditional_logprob("", "zzz"),
            Err(Error::TokenizerRejection(_))
        ));
    }

    #[test]
    fn unigram_cache_component_uses_context() {
        let b = abc().with_context_weight(0.5).unwrap();
        // window "c c" -> p(c) = 0.5*0.25 + 0.5*1 = 0.625
        let r = b.conditional_logprob("c c", "c").unwrap();
        assert!((r.total - 0.625f64.ln()).abs() < 1e-9);
        // window grows with the continuation: second "a" sees "c c a"
        let r = b.conditional_logprob("c c", "a a").unwrap();
        let expected = (0.5f64 * 0.5).ln() + (0.5f64 * 0.5 + 0.5 / 3.0).ln();
        assert!((r.total - expected).abs() < 1e-9);
    }

    #[test]
    fn per_token_normalization() {
        let r = TokenLogProbs::new(vec!["a".into(), "b".into()], vec![-1.0, -3.0]).unwrap();
        assert_eq!(r.normalized(Normalization::Sum), -4.0);
        assert_eq!(r.normalized(Normalization::PerToken), -2.0);
        assert_eq!(
            TokenLogProbs::empty().normalized(Normalization::PerToken),
            0.0
        );
    }

    #[test]
    fn cache_serves_repeats() {
        let counted = CountingBackend::new(abc());
        let cached = CachedBackend::new(&counted);
        for _ in 0..3 {
            cached.conditional_logprob("x", "a b").unwrap();
        }
        assert_eq!(counted.logprob_calls(), 1);
        assert_eq!(cached.hits(), 2);
    }

    #[test]
    fn cache_persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cached = CachedBackend::new(abc());
        cached.conditional_logprob("", "a").unwrap();
        cached.persist(&path).unwrap();

        let counted = CountingBackend::new(abc());
        let fresh = CachedBackend::new(&counted);
        assert_eq!(fresh.preload(&path).unwrap(), 1);
        fresh.conditional_logprob("", "a").unwrap();
        assert_eq!(counted.logprob_calls(), 0);
    }

    #[test]
    fn stop_truncation_picks_earliest() {
        assert_eq!(
            truncate_at_stop("ab\ncd.ef", &[".".into(), "\n".into()]),
            "ab"
        );
        assert_eq!(truncate_at_stop("abc", &[]), "abc");
    }

    #[test]
    fn response_validation() {
        let ok = LogprobResponse {
            tokens: vec![" a".into()],
            logprobs: vec![-1.0],
            total: -1.0,
        };
        assert_eq!(ok.into_token_logprobs().unwrap().total, -1.0);
        let mismatched = LogprobResponse {
            tokens: vec![" a".into(), " b".into()],
            logprobs: vec![-1.0],
            total: -1.0,
        };
        assert!(matches!(
            mismatched.into_token_logprobs(),
            Err(Error::Protocol(_))
        ));
        let bad_total = LogprobResponse {
            tokens: vec![" a".into()],
            logprobs: vec![-1.0],
            total: -2.0,
        };
        assert!(matches!(
            bad_total.into_token_logprobs(),
            Err(Error::Protocol(_))
        ));
    }
}
