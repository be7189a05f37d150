//! Demonstration selection.
//!
//! The validation-based strategy works per test input:
//!
//! 1. retrieve K candidates and hold one out as the validation example
//!    (by default the most similar one);
//! 2. for every remaining candidate `d`, measure the validation loss
//!    `L_v = −log P(y_v | d, x_v)` and the calibration remainder
//!    `ε = log P(x_v | d) − log P(x_t | d)`;
//! 3. score `(1 − λ)·L_v + λ·ε`, keep the `n` lowest scores and order them
//!    for the prompt.
//!
//! `L_v` and `ε` do not depend on λ, so [`MeasuredInstance`] keeps them and
//! re-ranks for any λ without touching the backend again.
//!
//! Ties are broken by retrieval rank everywhere.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{LogProbBackend, Normalization};
use crate::corpus::{Example, TaskTemplate};
use crate::error::{Error, Result};
use crate::retrieval::{retrieve_top_k, SimilarityProvider};

pub const DEFAULT_K: usize = 30;
pub const DEFAULT_N_SHOT: usize = 8;
pub const DEFAULT_LAMBDA: f64 = 0.6;

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text $(| $alias)* => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} `{s}`, expected one of: {}",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Bm25,
    Topk,
    Cone,
    Dva,
    Oracle,
}

string_enum!(Strategy {
    Random => "random",
    Bm25 => "bm25",
    Topk => "topk",
    Cone => "cone",
    Dva => "dva",
    Oracle => "oracle",
});

impl Strategy {
    /// Whether the strategy issues language-model calls during selection.
    pub fn uses_model(&self) -> bool {
        matches!(self, Strategy::Cone | Strategy::Dva | Strategy::Oracle)
    }

    pub fn uses_retrieval(&self) -> bool {
        !matches!(self, Strategy::Random)
    }
}

/// Prompt order of the selected demonstrations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoOrdering {
    /// Highest selected score first, best (lowest) score next to the query.
    #[default]
    Descending,
    Ascending,
    Shuffled,
}

string_enum!(DemoOrdering {
    Descending => "descending",
    Ascending => "ascending",
    Shuffled => "shuffled" | "random",
});

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationPolicy {
    #[default]
    Nearest,
    Random,
    Furthest,
}

string_enum!(ValidationPolicy {
    Nearest => "nearest",
    Random => "random",
    Furthest => "furthest",
});

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Normalization::Sum),
            "per_token" => Ok(Normalization::PerToken),
            _ => Err(Error::Config(format!(
                "unknown normalization `{s}`, expected sum or per_token"
            ))),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Sum => "sum",
            Normalization::PerToken => "per_token",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub n_shot: usize,
    pub lambda: f64,
    pub ordering: DemoOrdering,
    pub validation_policy: ValidationPolicy,
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Dva,
            k: DEFAULT_K,
            n_shot: DEFAULT_N_SHOT,
            lambda: DEFAULT_LAMBDA,
            ordering: DemoOrdering::Descending,
            validation_policy: ValidationPolicy::Nearest,
            normalization: Normalization::Sum,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.n_shot == 0 {
            return Ok(());
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        match self.strategy {
            Strategy::Dva if self.n_shot + 1 > self.k => Err(Error::Config(format!(
                "n_shot ({}) must be at most k - 1 ({}) when a validation example is held out",
                self.n_shot,
                self.k - 1
            ))),
            Strategy::Bm25 | Strategy::Topk | Strategy::Cone | Strategy::Oracle
                if self.n_shot > self.k =>
            {
                Err(Error::Config(format!(
                    "n_shot ({}) must be at most k ({})",
                    self.n_shot, self.k
                )))
            }
            _ => Ok(()),
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    Ok(())
}

/// Stable 64-bit FNV-1a, used to derive per-instance seeds.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Deterministic generator for one (run seed, test instance, purpose).
pub fn instance_rng(seed: u64, test_id: &str, purpose: &str) -> ChaCha8Rng {
    let mixed = seed.wrapping_mul(0x9e3779b97f4a7c15)
        ^ fnv1a(test_id.as_bytes())
        ^ fnv1a(purpose.as_bytes()).rotate_left(17);
    ChaCha8Rng::seed_from_u64(mixed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub example: Example,
    pub demo_text: String,
    /// 0 is the most similar.
    pub retrieval_rank: usize,
    pub retrieval_similarity: f64,
}

impl Candidate {
    pub fn id(&self) -> &str {
        &self.example.id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub test_id: String,
    pub candidates: Vec<Candidate>,
    pub k: usize,
}

impl CandidateSet {
    /// Builds a set from retrieval output already in rank order.
    pub fn from_ranked(
        test_id: impl Into<String>,
        ranked: Vec<(Example, f64)>,
        template: &TaskTemplate,
        k: usize,
    ) -> Result<Self> {
        let candidates = ranked
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(rank, (example, sim))| {
                Ok(Candidate {
                    demo_text: template.render_demo(&example)?,
                    example,
                    retrieval_rank: rank,
                    retrieval_similarity: sim,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            test_id: test_id.into(),
            candidates,
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSplit {
    pub validation: Candidate,
    pub remaining: Vec<Candidate>,
}

pub fn split_validation(
    set: &CandidateSet,
    policy: ValidationPolicy,
    seed: u64,
) -> Result<ValidationSplit> {
    if set.len() < 2 {
        return Err(Error::InsufficientCandidates {
            needed: 2,
            available: set.len(),
        });
    }
    let held_out = match policy {
        ValidationPolicy::Nearest => 0,
        ValidationPolicy::Furthest => set.len() - 1,
        ValidationPolicy::Random => {
            use rand::Rng;
            instance_rng(seed, &set.test_id, "validation").random_range(0..set.len())
        }
    };
    let mut remaining = set.candidates.clone();
    let validation = remaining.remove(held_out);
    Ok(ValidationSplit {
        validation,
        remaining,
    })
}

/// `(1 − λ)·L_v + λ·ε`.
pub fn dva_score(l_v: f64, epsilon: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok((1.0 - lambda) * l_v + lambda * epsilon)
}

/// Preference of the model for the test query over the validation query,
/// given a demonstration, as a Bradley-Terry probability. Held in log space:
/// `log_p = log P(x_v ≺ x_t | d)` and `log_q = log(1 − P(x_v ≺ x_t | d))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preference {
    pub log_p: f64,
    pub log_q: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Preference {
    /// From `log P(x_t | d)` and `log P(x_v | d)`:
    /// `p = P(x_t|d) / (P(x_t|d) + P(x_v|d)) = sigmoid(lp_t − lp_v)`.
    pub fn from_logprobs(lp_test: f64, lp_validation: f64) -> Self {
        let logit = lp_test - lp_validation;
        Self {
            log_p: -softplus(-logit),
            log_q: -softplus(logit),
        }
    }

    pub fn probability(&self) -> f64 {
        self.log_p.exp()
    }

    /// `−log(p / (1 − p))`, which equals the calibration remainder.
    pub fn neg_log_odds(&self) -> f64 {
        self.log_q - self.log_p
    }
}

/// Computes the model-based quantities for one task template.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub backend: &'a dyn LogProbBackend,
    pub template: &'a TaskTemplate,
    pub normalization: Normalization,
}

impl<'a> Scorer<'a> {
    pub fn new(backend: &'a dyn LogProbBackend, template: &'a TaskTemplate) -> Self {
        Self {
            backend,
            template,
            normalization: Normalization::Sum,
        }
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    fn logprob(
        &self,
        context: &str,
        continuation: &str,
        normalization: Normalization,
    ) -> Result<f64> {
        Ok(self
            .backend
            .conditional_logprob(context, continuation)?
            .normalized(normalization))
    }

    fn demo_context(&self, d: &Candidate) -> String {
        format!("{}{}", d.demo_text, self.template.separator())
    }

    /// `−log P(answer(x) | d, query(x))`, the loss shared by `L_v` and `L_t`.
    fn answer_loss(&self, d: &Candidate, x: &Example) -> Result<f64> {
        if x.label.is_none() {
            return Err(Error::MissingLabel { id: x.id.clone() });
        }
        let (query, answer) = self.template.render_query(x)?;
        if answer.is_empty() {
            log::warn!("example `{}` has an empty answer; its loss is 0", x.id);
            return Ok(0.0);
        }
        let context = format!("{}{}", self.demo_context(d), query);
        Ok(-self.logprob(&context, &answer, self.normalization)?)
    }

    /// `L_v = −log P(y_v | d, x_v)`.
    pub fn validation_loss(&self, d: &Candidate, validation: &Example) -> Result<f64> {
        self.answer_loss(d, validation)
    }

    /// `L_t = −log P(y_t | d, x_t)`; needs the gold label.
    pub fn test_loss(&self, d: &Candidate, test: &Example) -> Result<f64> {
        self.answer_loss(d, test)
    }

    /// `log P(query(x) | d)`.
    pub fn query_logprob(&self, d: &Candidate, x: &Example) -> Result<f64> {
        self.query_logprob_with(d, x, self.normalization)
    }

    fn query_logprob_with(&self, d: &Candidate, x: &Example, norm: Normalization) -> Result<f64> {
        let (query, _) = self.template.render_query(x)?;
        self.logprob(&self.demo_context(d), &query, norm)
    }

    /// `ε = −log(P(x_t | d) / P(x_v | d))`. Negative when the model finds the
    /// test query more likely than the validation query.
    pub fn calibration_remainder(
        &self,
        d: &Candidate,
        test: &Example,
        validation: &Example,
    ) -> Result<f64> {
        let lp_test = self.query_logprob(d, test)?;
        let lp_validation = self.query_logprob(d, validation)?;
        Ok(lp_validation - lp_test)
    }

    /// Bradley-Terry preference for the test query over the validation query.
    /// Always uses unnormalized sums.
    pub fn bt_preference(
        &self,
        d: &Candidate,
        test: &Example,
        validation: &Example,
    ) -> Result<Preference> {
        let lp_test = self.query_logprob_with(d, test, Normalization::Sum)?;
        let lp_validation = self.query_logprob_with(d, validation, Normalization::Sum)?;
        Ok(Preference::from_logprobs(lp_test, lp_validation))
    }
}

/// λ-independent measurements of one remaining candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMeasurement {
    pub candidate: Candidate,
    pub l_v: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: Candidate,
    pub l_v: f64,
    pub epsilon: f64,
    pub score: f64,
    /// Position in the prompt when selected (0 is first).
    pub selected_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleScore {
    pub candidate: Candidate,
    pub l_t: f64,
}

/// Measures every remaining candidate against the held-out validation
/// example. Results keep the order of `split.remaining`.
pub fn measure_candidates(
    scorer: &Scorer<'_>,
    split: &ValidationSplit,
    test: &Example,
) -> Result<Vec<CandidateMeasurement>> {
    let validation = &split.validation.example;
    split
        .remaining
        .par_iter()
        .map(|d| {
            Ok(CandidateMeasurement {
                candidate: d.clone(),
                l_v: scorer.validation_loss(d, validation)?,
                epsilon: scorer.calibration_remainder(d, test, validation)?,
            })
        })
        .collect()
}

/// Indices of the `n` smallest keys, ties broken by retrieval rank, in
/// ascending key order.
fn smallest_n<T>(items: &[T], n: usize, key: impl Fn(&T) -> (f64, usize)) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        let (ka, ra) = key(&items[a]);
        let (kb, rb) = key(&items[b]);
        ka.total_cmp(&kb).then(ra.cmp(&rb))
    });
    order.truncate(n);
    order
}

/// Reorders a best-first selection for the prompt.
fn arrange<T>(mut best_first: Vec<T>, ordering: DemoOrdering, seed: u64, test_id: &str) -> Vec<T> {
    match ordering {
        DemoOrdering::Descending => best_first.reverse(),
        DemoOrdering::Ascending => {}
        DemoOrdering::Shuffled => best_first.shuffle(&mut instance_rng(seed, test_id, "order")),
    }
    best_first
}

/// Scores measured candidates for `lambda` and marks the `n_shot` lowest
/// with their prompt positions. Output keeps the measurement order.
pub fn rank_measurements(
    measurements: &[CandidateMeasurement],
    lambda: f64,
    n_shot: usize,
    ordering: DemoOrdering,
    seed: u64,
    test_id: &str,
) -> Result<Vec<ScoredCandidate>> {
    let mut scored: Vec<ScoredCandidate> = measurements
        .iter()
        .map(|m| {
            Ok(ScoredCandidate {
                candidate: m.candidate.clone(),
                l_v: m.l_v,
                epsilon: m.epsilon,
                score: dva_score(m.l_v, m.epsilon, lambda)?,
                selected_rank: None,
            })
        })
        .collect::<Result<_>>()?;
    let chosen = smallest_n(&scored, n_shot, |s| (s.score, s.candidate.retrieval_rank));
    for (pos, idx) in arrange(chosen, ordering, seed, test_id)
        .into_iter()
        .enumerate()
    {
        scored[idx].selected_rank = Some(pos);
    }
    Ok(scored)
}

/// Outcome of the validation-based strategy for one test input.
#[derive(Debug, Clone, PartialEq)]
pub struct DvaSelection {
    pub validation: Candidate,
    /// Every remaining candidate, in retrieval order.
    pub scored: Vec<ScoredCandidate>,
}

impl DvaSelection {
    /// Selected candidates in prompt order.
    pub fn prompt_order(&self) -> Vec<&ScoredCandidate> {
        let mut selected: Vec<&ScoredCandidate> = self
            .scored
            .iter()
            .filter(|s| s.selected_rank.is_some())
            .collect();
        selected.sort_by_key(|s| s.selected_rank);
        selected
    }
}

pub fn select_dva(
    scorer: &Scorer<'_>,
    set: &CandidateSet,
    test: &Example,
    cfg: &SelectionConfig,
) -> Result<DvaSelection> {
    MeasuredInstance::measure(scorer, set, test, cfg)?.select(cfg.lambda, cfg)
}

/// Candidates of the validation-based strategy with their λ-independent
/// measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredInstance {
    pub test_id: String,
    pub validation: Candidate,
    pub measurements: Vec<CandidateMeasurement>,
}

impl MeasuredInstance {
    pub fn measure(
        scorer: &Scorer<'_>,
        set: &CandidateSet,
        test: &Example,
        cfg: &SelectionConfig,
    ) -> Result<Self> {
        if set.len() < cfg.n_shot + 1 {
            return Err(Error::InsufficientCandidates {
                needed: cfg.n_shot + 1,
                available: set.len(),
            });
        }
        let split = split_validation(set, cfg.validation_policy, cfg.seed)?;
        let measurements = measure_candidates(scorer, &split, test)?;
        Ok(Self {
            test_id: set.test_id.clone(),
            validation: split.validation,
            measurements,
        })
    }

    pub fn select(&self, lambda: f64, cfg: &SelectionConfig) -> Result<DvaSelection> {
        Ok(DvaSelection {
            validation: self.validation.clone(),
            scored: rank_measurements(
                &self.measurements,
                lambda,
                cfg.n_shot,
                cfg.ordering,
                cfg.seed,
                &self.test_id,
            )?,
        })
    }
}

/// Ranks every candidate by `L_t` ascending and returns the best `n`. Uses the
/// gold label of `test`; for diagnostics and upper bounds only.
pub fn oracle_select(
    scorer: &Scorer<'_>,
    set: &CandidateSet,
    test: &Example,
    n: usize,
) -> Result<Vec<OracleScore>> {
    if test.label.is_none() {
        return Err(Error::MissingLabel {
            id: test.id.clone(),
        });
    }
    let scores: Vec<OracleScore> = set
        .candidates
        .par_iter()
        .map(|d| {
            Ok(OracleScore {
                candidate: d.clone(),
                l_t: scorer.test_loss(d, test)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(
        smallest_n(&scores, n, |s| (s.l_t, s.candidate.retrieval_rank))
            .into_iter()
            .map(|i| scores[i].clone())
            .collect(),
    )
}

/// The `n` most similar candidates with the most similar placed last.
pub fn select_similar(set: &CandidateSet, n: usize) -> Vec<Candidate> {
    let mut picked: Vec<Candidate> = set.candidates.iter().take(n).cloned().collect();
    picked.reverse();
    picked
}

/// Candidates minimizing `−log P(x_t | d)`, highest of the selected first.
/// Returns each selected candidate with its score.
pub fn select_cone(
    scorer: &Scorer<'_>,
    set: &CandidateSet,
    test: &Example,
    n: usize,
) -> Result<Vec<(Candidate, f64)>> {
    let scores: Vec<f64> = set
        .candidates
        .par_iter()
        .map(|d| Ok(-scorer.query_logprob(d, test)?))
        .collect::<Result<_>>()?;
    let keyed: Vec<(f64, usize)> = scores
        .iter()
        .zip(&set.candidates)
        .map(|(&s, c)| (s, c.retrieval_rank))
        .collect();
    let chosen = smallest_n(&keyed, n, |&k| k);
    let mut out: Vec<(Candidate, f64)> = chosen
        .into_iter()
        .map(|i| (set.candidates[i].clone(), scores[i]))
        .collect();
    out.reverse();
    Ok(out)
}

/// `n` uniform draws without replacement from `pool`, excluding the test
/// example itself, in draw order.
pub fn select_random(
    pool: &[Example],
    template: &TaskTemplate,
    test: &Example,
    n: usize,
    seed: u64,
) -> Result<Vec<Candidate>> {
    let eligible: Vec<&Example> = pool.iter().filter(|e| e.id != test.id).collect();
    if eligible.len() < n {
        return Err(Error::InsufficientCandidates {
            needed: n,
            available: eligible.len(),
        });
    }
    let mut rng = instance_rng(seed, &test.id, "random");
    index::sample(&mut rng, eligible.len(), n)
        .into_iter()
        .enumerate()
        .map(|(draw, i)| {
            let example = eligible[i].clone();
            Ok(Candidate {
                demo_text: template.render_demo(&example)?,
                example,
                retrieval_rank: draw,
                retrieval_similarity: 0.0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub id: String,
    pub l_v: f64,
    pub epsilon: f64,
    pub score: f64,
    pub retrieval_rank: usize,
}

/// One line of the selection trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub test_id: String,
    pub strategy: Strategy,
    pub lambda: f64,
    pub validation_id: Option<String>,
    pub scored: Vec<TraceEntry>,
    /// Ids in prompt order.
    pub selected: Vec<String>,
}

/// Selected demonstrations for one test input.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub trace: SelectionTrace,
    /// Rendered demonstrations in prompt order.
    pub demos: Vec<String>,
}

impl Selection {
    fn from_candidates(test_id: &str, cfg: &SelectionConfig, picked: Vec<Candidate>) -> Self {
        Self {
            trace: SelectionTrace {
                test_id: test_id.to_string(),
                strategy: cfg.strategy,
                lambda: cfg.lambda,
                validation_id: None,
                scored: Vec::new(),
                selected: picked.iter().map(|c| c.id().to_string()).collect(),
            },
            demos: picked.into_iter().map(|c| c.demo_text).collect(),
        }
    }

    pub fn from_dva(test_id: &str, cfg: &SelectionConfig, lambda: f64, sel: &DvaSelection) -> Self {
        let prompt = sel.prompt_order();
        Self {
            trace: SelectionTrace {
                test_id: test_id.to_string(),
                strategy: Strategy::Dva,
                lambda,
                validation_id: Some(sel.validation.id().to_string()),
                scored: sel
                    .scored
                    .iter()
                    .map(|s| TraceEntry {
                        id: s.candidate.id().to_string(),
                        l_v: s.l_v,
                        epsilon: s.epsilon,
                        score: s.score,
                        retrieval_rank: s.candidate.retrieval_rank,
                    })
                    .collect(),
                selected: prompt
                    .iter()
                    .map(|s| s.candidate.id().to_string())
                    .collect(),
            },
            demos: prompt
                .iter()
                .map(|s| s.candidate.demo_text.clone())
                .collect(),
        }
        .with_strategy(cfg.strategy)
    }

    fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.trace.strategy = strategy;
        self
    }
}

/// Per-instance work that does not depend on λ.
#[derive(Debug, Clone)]
pub enum Prepared {
    Measured(MeasuredInstance),
    Fixed(Selection),
}

impl Prepared {
    pub fn finish(&self, lambda: f64, cfg: &SelectionConfig) -> Result<Selection> {
        match self {
            Prepared::Measured(m) => Ok(Selection::from_dva(
                &m.test_id,
                cfg,
                lambda,
                &m.select(lambda, cfg)?,
            )),
            Prepared::Fixed(sel) => {
                let mut sel = sel.clone();
                sel.trace.lambda = lambda;
                Ok(sel)
            }
        }
    }
}

/// Everything needed to select demonstrations for any test input of one
/// dataset.
pub struct Selector<'a> {
    pub backend: &'a dyn LogProbBackend,
    pub template: &'a TaskTemplate,
    pub provider: Option<&'a dyn SimilarityProvider>,
    pub train: &'a [Example],
    by_id: HashMap<&'a str, &'a Example>,
}

impl<'a> Selector<'a> {
    pub fn new(
        backend: &'a dyn LogProbBackend,
        template: &'a TaskTemplate,
        provider: Option<&'a dyn SimilarityProvider>,
        train: &'a [Example],
    ) -> Self {
        Self {
            backend,
            template,
            provider,
            train,
            by_id: train.iter().map(|e| (e.id.as_str(), e)).collect(),
        }
    }

    pub fn scorer(&self, cfg: &SelectionConfig) -> Scorer<'a> {
        Scorer::new(self.backend, self.template).with_normalization(cfg.normalization)
    }

    pub fn candidates(&self, test: &Example, k: usize) -> Result<CandidateSet> {
        let provider = self
            .provider
            .ok_or_else(|| Error::Config("strategy needs a retriever".into()))?;
        let ranked = retrieve_top_k(provider, test, k)?
            .into_iter()
            .map(|(id, sim)| {
                let ex = self
                    .by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::UnknownId(id.clone()))?;
                Ok(((*ex).clone(), sim))
            })
            .collect::<Result<Vec<_>>>()?;
        CandidateSet::from_ranked(test.id.clone(), ranked, self.template, k)
    }

    /// Runs retrieval and every model call the strategy needs.
    pub fn prepare(&self, test: &Example, cfg: &SelectionConfig) -> Result<Prepared> {
        if cfg.n_shot == 0 {
            return Ok(Prepared::Fixed(Selection::from_candidates(
                &test.id,
                cfg,
                Vec::new(),
            )));
        }
        let picked = match cfg.strategy {
            Strategy::Random => {
                select_random(self.train, self.template, test, cfg.n_shot, cfg.seed)?
            }
            Strategy::Bm25 | Strategy::Topk => {
                select_similar(&self.candidates(test, cfg.k)?, cfg.n_shot)
            }
            Strategy::Cone => {
                let set = self.candidates(test, cfg.k)?;
                select_cone(&self.scorer(cfg), &set, test, cfg.n_shot)?
                    .into_iter()
                    .map(|(c, _)| c)
                    .collect()
            }
            Strategy::Oracle => {
                let set = self.candidates(test, cfg.k)?;
                let mut best = oracle_select(&self.scorer(cfg), &set, test, cfg.n_shot)?;
                best.reverse();
                best.into_iter().map(|o| o.candidate).collect()
            }
            Strategy::Dva => {
                let set = self.candidates(test, cfg.k)?;
                return Ok(Prepared::Measured(MeasuredInstance::measure(
                    &self.scorer(cfg),
                    &set,
                    test,
                    cfg,
                )?));
            }
        };
        Ok(Prepared::Fixed(Selection::from_candidates(
            &test.id, cfg, picked,
        )))
    }

    pub fn select(&self, test: &Example, cfg: &SelectionConfig) -> Result<Selection> {
        self.prepare(test, cfg)?.finish(cfg.lambda, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;

    fn template() -> TaskTemplate {
        TaskTemplate::builtin("sst2").unwrap()
    }

    fn example(id: &str, text: &str, label: &str) -> Example {
        Example::new(id)
            .with_field("sentence", text)
            .with_label(label)
    }

    fn set_with_sims(sims: &[f64]) -> CandidateSet {
        let ranked = sims
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                (
                    example(&format!("c{i}"), &format!("text {i}"), "positive"),
                    s,
                )
            })
            .collect();
        CandidateSet::from_ranked("t", ranked, &template(), sims.len()).unwrap()
    }

    #[test]
    fn nearest_and_furthest_validation() {
        let set = set_with_sims(&[0.9, 0.5, 0.3]);
        let near = split_validation(&set, ValidationPolicy::Nearest, 0).unwrap();
        assert_eq!(near.validation.retrieval_rank, 0);
        let ranks: Vec<_> = near.remaining.iter().map(|c| c.retrieval_rank).collect();
        assert_eq!(ranks, [1, 2]);
        let far = split_validation(&set, ValidationPolicy::Furthest, 0).unwrap();
        assert_eq!(far.validation.retrieval_rank, 2);
    }

    #[test]
    fn thirty_candidates_leave_twenty_nine() {
        let set = set_with_sims(&[0.5; 30]);
        let split = split_validation(&set, ValidationPolicy::Nearest, 0).unwrap();
        assert_eq!(split.remaining.len(), 29);
    }

    #[test]
    fn random_validation_is_seeded() {
        let set = set_with_sims(&[0.5; 30]);
        let a = split_validation(&set, ValidationPolicy::Random, 7).unwrap();
        let b = split_validation(&set, ValidationPolicy::Random, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.remaining.len(), 29);
        assert!(a.remaining.iter().all(|c| c.id() != a.validation.id()));
    }

    #[test]
    fn split_needs_two() {
        let set = set_with_sims(&[0.5]);
        assert!(split_validation(&set, ValidationPolicy::Nearest, 0).is_err());
    }

    #[test]
    fn score_formula_and_bounds() {
        assert!((dva_score(2.0, 1.0, 0.6).unwrap() - 1.4).abs() < 1e-12);
        assert_eq!(dva_score(2.0, 1.0, 0.0).unwrap(), 2.0);
        assert_eq!(dva_score(2.0, 1.0, 1.0).unwrap(), 1.0);
        assert!(dva_score(2.0, 1.0, 1.5).is_err());
        assert!(dva_score(2.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn preference_examples() {
        let even = Preference::from_logprobs(-3.0, -3.0);
        assert!((even.probability() - 0.5).abs() < 1e-15);
        assert_eq!(even.neg_log_odds(), 0.0);

        // p = 0.75 <=> lp_t - lp_v = ln 3
        let p = Preference::from_logprobs(3f64.ln(), 0.0);
        assert!((p.probability() - 0.75).abs() < 1e-12);
        assert!((p.neg_log_odds() - (-1.09861)).abs() < 1e-5);
    }

    #[test]
    fn selection_orders_descending_by_score() {
        let set = set_with_sims(&[0.9, 0.8, 0.7, 0.6]);
        let split = split_validation(&set, ValidationPolicy::Nearest, 0).unwrap();
        // λ = 1 makes the score equal ε.
        let measurements: Vec<_> = split
            .remaining
            .iter()
            .zip([1.4, 0.2, 0.9])
            .map(|(c, eps)| CandidateMeasurement {
                candidate: c.clone(),
                l_v: 0.0,
                epsilon: eps,
            })
            .collect();
        let scored =
            rank_measurements(&measurements, 1.0, 2, DemoOrdering::Descending, 0, "t").unwrap();
        let sel = DvaSelection {
            validation: split.validation,
            scored,
        };
        let order: Vec<f64> = sel.prompt_order().iter().map(|s| s.score).collect();
        assert_eq!(order, [0.9, 0.2]);

        let asc =
            rank_measurements(&measurements, 1.0, 2, DemoOrdering::Ascending, 0, "t").unwrap();
        let mut picked: Vec<_> = asc
            .iter()
            .filter_map(|s| s.selected_rank.map(|r| (r, s.score)))
            .collect();
        picked.sort_by_key(|p| p.0);
        assert_eq!(picked, [(0, 0.2), (1, 0.9)]);
    }

    #[test]
    fn ties_break_by_retrieval_rank() {
        let set = set_with_sims(&[0.9, 0.8, 0.7, 0.6, 0.5]);
        let measurements: Vec<_> = set.candidates[1..]
            .iter()
            .map(|c| CandidateMeasurement {
                candidate: c.clone(),
                l_v: 1.0,
                epsilon: 1.0,
            })
            .collect();
        let scored =
            rank_measurements(&measurements, 0.6, 2, DemoOrdering::Ascending, 0, "t").unwrap();
        let chosen: Vec<_> = scored
            .iter()
            .filter(|s| s.selected_rank.is_some())
            .map(|s| s.candidate.retrieval_rank)
            .collect();
        assert_eq!(chosen, [1, 2]);
    }

    #[test]
    fn similar_baseline_puts_best_last() {
        let set = set_with_sims(&[0.9, 0.8, 0.7]);
        let ranks: Vec<_> = select_similar(&set, 2)
            .iter()
            .map(|c| c.retrieval_rank)
            .collect();
        assert_eq!(ranks, [1, 0]);
    }

    #[test]
    fn random_baseline_is_deterministic() {
        let pool: Vec<_> = (0..20)
            .map(|i| example(&format!("e{i}"), "x", "positive"))
            .collect();
        let test = example("e3", "x", "negative");
        let a = select_random(&pool, &template(), &test, 5, 11).unwrap();
        let b = select_random(&pool, &template(), &test, 5, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|c| c.id() != "e3"));
        let c = select_random(&pool, &template(), &test, 5, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn validation_loss_negates_backend_total() {
        let t = template();
        let d = set_with_sims(&[0.9]).candidates.remove(0);
        let v = example("v", "fine", "positive");
        let mock = MockBackend::new()
            .with_entry(
                "Review: text 0 Sentiment: positive\nReview: fine Sentiment:",
                " positive",
                vec![-1.0, -0.7],
            )
            .unwrap();
        let scorer = Scorer::new(&mock, &t);
        assert!((scorer.validation_loss(&d, &v).unwrap() - 1.7).abs() < 1e-12);
    }

    #[test]
    fn oracle_requires_label() {
        let t = template();
        let mock = MockBackend::new();
        let set = set_with_sims(&[0.9, 0.8]);
        let test = Example::new("t").with_field("sentence", "x");
        assert!(matches!(
            oracle_select(&Scorer::new(&mock, &t), &set, &test, 1),
            Err(Error::MissingLabel { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SelectionConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lambda = 1.5;
        assert!(cfg.validate().is_err());
        cfg.lambda = 0.6;
        cfg.n_shot = 30;
        assert!(cfg.validate().is_err());
        cfg.strategy = Strategy::Topk;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn enums_parse_and_print() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), *s);
        }
        assert!("mdl".parse::<Strategy>().is_err());
        assert_eq!(
            "random".parse::<DemoOrdering>().unwrap(),
            DemoOrdering::Shuffled
        );
        assert_eq!(
            "per_token".parse::<Normalization>().unwrap(),
            Normalization::PerToken
        );
    }
}
