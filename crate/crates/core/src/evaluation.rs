//! Prompt assembly, prediction, metrics and experiment reports.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{CountingBackend, LogProbBackend};
use crate::corpus::{Dataset, Example, TaskKind, TaskTemplate};
use crate::error::{Error, Result};
use crate::retrieval::SimilarityProvider;
use crate::selection::{Prepared, SelectionConfig, SelectionTrace, Selector, Strategy};

pub const DEFAULT_MAX_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub demos: Vec<String>,
    pub query_context: String,
    pub full_text: String,
}

/// Joins demonstrations and the unanswered query with the template separator.
pub fn assemble_prompt(
    demos: &[String],
    test: &Example,
    template: &TaskTemplate,
) -> Result<Prompt> {
    let (query_context, _) = template.render_query(test)?;
    let sep = template.separator();
    let mut full_text = String::new();
    for demo in demos {
        full_text.push_str(demo);
        full_text.push_str(sep);
    }
    full_text.push_str(&query_context);
    Ok(Prompt {
        demos: demos.to_vec(),
        query_context,
        full_text,
    })
}

/// Label whose verbalization has the lowest negative log-likelihood after the
/// prompt. Ties go to the earliest declared label.
pub fn classify(
    backend: &dyn LogProbBackend,
    prompt: &Prompt,
    verbs: &[(String, String)],
) -> Result<String> {
    if verbs.len() < 2 {
        return Err(Error::Config(format!(
            "classification needs at least 2 verbalizations, got {}",
            verbs.len()
        )));
    }
    let mut best: Option<(&str, f64)> = None;
    for (label, text) in verbs {
        let nll = -backend.conditional_logprob(&prompt.full_text, text)?.total;
        if best.is_none_or(|(_, b)| nll < b) {
            best = Some((label, nll));
        }
    }
    Ok(best.expect("at least two labels").0.to_string())
}

/// Articles dropped by [`normalize_answer`]. The single letter `a` is kept:
/// it is as often an answer token (option letters, variables) as an article.
pub const ARTICLES: &[&str] = &["an", "the"];

fn remove_articles(text: &str) -> String {
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if ARTICLES.contains(&word.as_str()) {
            out.push(' ');
        } else {
            out.push_str(word);
        }
        word.clear();
    };
    for c in text.chars() {
        if is_word(c) {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(c);
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Lowercase, drop ASCII punctuation, drop [`ARTICLES`] and collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String = lower
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    remove_articles(&no_punct)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> f64 {
    (normalize_answer(pred) == normalize_answer(gold)) as u8 as f64
}

pub fn f1_token(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return (p == g) as u8 as f64;
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *gold_counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = gold_counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn ngram_counts<'a, 'b>(tokens: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_default() += 1;
    }
    counts
}

/// Corpus BLEU-4 with brevity penalty on whitespace tokens, scaled to 0..100.
pub fn corpus_bleu(preds: &[String], golds: &[String]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch(preds.len(), golds.len()));
    }
    if preds.is_empty() {
        return Err(Error::Config("BLEU needs at least one sentence".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut pred_len, mut gold_len) = (0usize, 0usize);
    for (pred, gold) in preds.iter().zip(golds) {
        let p: Vec<&str> = pred.split_whitespace().collect();
        let g: Vec<&str> = gold.split_whitespace().collect();
        pred_len += p.len();
        gold_len += g.len();
        for n in 1..=4 {
            let gold_grams = ngram_counts(&g, n);
            for (gram, count) in ngram_counts(&p, n) {
                matches[n - 1] += count.min(gold_grams.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += p.len().saturating_sub(n - 1);
        }
    }
    if matches.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / 4.0;
    let brevity = if pred_len > gold_len {
        0.0
    } else {
        1.0 - gold_len as f64 / pred_len as f64
    };
    Ok(100.0 * (log_precision + brevity).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub test_id: String,
    pub predicted: String,
    pub gold: String,
    pub correct: Option<bool>,
    pub metric_values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub config: SelectionConfig,
    pub aggregates: BTreeMap<String, f64>,
    pub failures: Vec<String>,
    pub per_instance: Vec<Prediction>,
}

impl Report {
    pub fn accuracy(&self) -> Option<f64> {
        self.aggregates.get("accuracy").copied()
    }

    pub fn all_failed(&self) -> bool {
        self.per_instance.is_empty() && !self.failures.is_empty()
    }
}

/// Backend requests issued by each phase of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallStats {
    pub selection_calls: usize,
    pub prediction_calls: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub traces: Vec<SelectionTrace>,
    pub stats: CallStats,
}

fn predict(
    backend: &dyn LogProbBackend,
    dataset: &Dataset,
    test: &Example,
    demos: &[String],
) -> Result<Prediction> {
    let gold = test.label.clone().ok_or_else(|| Error::MissingLabel {
        id: test.id.clone(),
    })?;
    let prompt = assemble_prompt(demos, test, &dataset.template)?;
    let mut metric_values = BTreeMap::new();
    let (predicted, correct) = match dataset.task_kind {
        TaskKind::Classification => {
            let verbs = dataset.template.verbalizations_for(test)?;
            let label = classify(backend, &prompt, &verbs)?;
            let correct = label == gold;
            metric_values.insert("accuracy".to_string(), correct as u8 as f64);
            (label, Some(correct))
        }
        TaskKind::Generation => {
            let stop = [dataset.template.separator().to_string()];
            let max_tokens = dataset.max_tokens.unwrap_or(DEFAULT_MAX_TOKENS);
            let text = backend.generate(&prompt.full_text, max_tokens, &stop)?;
            let text = text.trim().to_string();
            metric_values.insert("exact_match".to_string(), exact_match(&text, &gold));
            metric_values.insert("f1".to_string(), f1_token(&text, &gold));
            (text, None)
        }
    };
    Ok(Prediction {
        test_id: test.id.clone(),
        predicted,
        gold,
        correct,
        metric_values,
    })
}

fn aggregate(kind: TaskKind, predictions: &[Prediction]) -> Result<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for p in predictions {
        for (k, v) in &p.metric_values {
            *sums.entry(k.clone()).or_default() += v;
        }
    }
    let n = predictions.len() as f64;
    let mut aggregates: BTreeMap<String, f64> = sums.into_iter().map(|(k, s)| (k, s / n)).collect();
    if kind == TaskKind::Generation && !predictions.is_empty() {
        let preds: Vec<String> = predictions.iter().map(|p| p.predicted.clone()).collect();
        let golds: Vec<String> = predictions.iter().map(|p| p.gold.clone()).collect();
        aggregates.insert("bleu".to_string(), corpus_bleu(&preds, &golds)? / 100.0);
    }
    Ok(aggregates)
}

/// Evaluates one configuration over every test instance of `dataset`.
pub fn run_experiment(
    dataset: &Dataset,
    cfg: &SelectionConfig,
    backend: &dyn LogProbBackend,
    provider: Option<&dyn SimilarityProvider>,
) -> Result<RunOutput> {
    let mut runs = run_lambda_sweep(dataset, cfg, &[cfg.lambda], backend, provider)?;
    Ok(runs.remove(0))
}

/// Evaluates `cfg` once per λ. Retrieval and every λ-independent model call
/// happen once; each λ only re-ranks and predicts. `stats.selection_calls`
/// is the shared selection cost and is the same in every output.
pub fn run_lambda_sweep(
    dataset: &Dataset,
    cfg: &SelectionConfig,
    lambdas: &[f64],
    backend: &dyn LogProbBackend,
    provider: Option<&dyn SimilarityProvider>,
) -> Result<Vec<RunOutput>> {
    cfg.validate()?;
    for &lambda in lambdas {
        SelectionConfig {
            lambda,
            ..cfg.clone()
        }
        .validate()?;
    }
    let selection_backend = CountingBackend::new(backend);
    let selector = Selector::new(
        &selection_backend,
        &dataset.template,
        provider,
        &dataset.train,
    );
    let prepared: Vec<Result<Prepared>> = dataset
        .test
        .par_iter()
        .map(|test| selector.prepare(test, cfg))
        .collect();
    let selection_calls = selection_backend.total_calls();

    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = SelectionConfig {
                lambda,
                ..cfg.clone()
            };
            let prediction_backend = CountingBackend::new(backend);
            let outcomes: Vec<(
                Option<SelectionTrace>,
                std::result::Result<Prediction, String>,
            )> = dataset
                .test
                .par_iter()
                .zip(prepared.par_iter())
                .map(|(test, prep)| {
                    let selection = match prep {
                        Ok(p) => p.finish(lambda, &cfg).map_err(|e| e.to_string()),
                        Err(e) => Err(e.to_string()),
                    };
                    match selection {
                        Ok(sel) => {
                            let pred = predict(&prediction_backend, dataset, test, &sel.demos)
                                .map_err(|e| e.to_string());
                            (Some(sel.trace), pred)
                        }
                        Err(e) => (None, Err(e)),
                    }
                })
                .collect();

            let mut traces = Vec::new();
            let mut per_instance = Vec::new();
            let mut failures = Vec::new();
            for (test, (trace, pred)) in dataset.test.iter().zip(outcomes) {
                traces.extend(trace);
                match pred {
                    Ok(p) => per_instance.push(p),
                    Err(e) => {
                        log::warn!("test instance `{}` failed: {e}", test.id);
                        failures.push(test.id.clone());
                    }
                }
            }
            let aggregates = aggregate(dataset.task_kind, &per_instance)?;
            Ok(RunOutput {
                report: Report {
                    dataset: dataset.name.clone(),
                    strategy: cfg.strategy,
                    seed: cfg.seed,
                    config: cfg,
                    aggregates,
                    failures,
                    per_instance,
                },
                traces,
                stats: CallStats {
                    selection_calls,
                    prediction_calls: prediction_backend.total_calls(),
                },
            })
        })
        .collect()
}

/// Mean of each aggregate over several reports (metrics missing from any
/// report are left out).
pub fn mean_aggregates(reports: &[Report]) -> BTreeMap<String, f64> {
    let Some(first) = reports.first() else {
        return BTreeMap::new();
    };
    first
        .aggregates
        .keys()
        .filter(|k| reports.iter().all(|r| r.aggregates.contains_key(*k)))
        .map(|k| {
            let sum: f64 = reports.iter().map(|r| r.aggregates[k]).sum();
            (k.clone(), sum / reports.len() as f64)
        })
        .collect()
}
