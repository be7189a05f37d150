use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use icl_core::backend::{
    CachedBackend, CountingBackend, HttpBackend, HttpConfig, LogProbBackend, MockBackend,
    UnigramBackend,
};
use icl_core::corpus::Dataset;
use icl_core::evaluation::{mean_aggregates, run_experiment, run_lambda_sweep, Report, RunOutput};
use icl_core::retrieval::{Bm25Index, DenseRetriever, EmbeddingStore, SimilarityProvider};
use icl_core::selection::{
    DemoOrdering, SelectionConfig, SelectionTrace, Selector, Strategy, ValidationPolicy,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BackendSpec, RetrieverSpec, RunConfig, CACHE_DIR_ENV};
use crate::{io_failure, report_path, trace_path, Axis, Failure};

pub const INDEX_FILE: &str = "bm25_index.json";
pub const EMBEDDINGS_SUMMARY_FILE: &str = "embeddings_summary.json";
pub const SELECT_TRACE_FILE: &str = "selection_trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

type Cached = CachedBackend<Box<dyn LogProbBackend>>;

/// Backend wrapped in a cache that is optionally persisted under
/// `ICL_CACHE_DIR`.
pub struct BackendHandle {
    pub backend: Cached,
    cache_file: Option<PathBuf>,
}

impl BackendHandle {
    pub fn open(cfg: &RunConfig) -> Result<Self, Failure> {
        let inner: Box<dyn LogProbBackend> = match &cfg.backend {
            BackendSpec::Mock(p) => Box::new(MockBackend::load(p)?),
            BackendSpec::Unigram(p) => Box::new(UnigramBackend::load(p)?),
            BackendSpec::Http(url) => {
                let backend = HttpBackend::new(HttpConfig {
                    base_url: url.clone(),
                    model: cfg.model.clone(),
                    timeout: Duration::from_secs(cfg.timeout_secs),
                    retries: cfg.retries,
                    backoff: Duration::from_millis(200),
                    max_in_flight: cfg.concurrency,
                })?;
                let health = backend
                    .health()
                    .map_err(|e| Failure::Unreachable(format!("{url}: {e}")))?;
                if !health.ok {
                    return Err(Failure::Unreachable(format!(
                        "{url}: server reports not ok"
                    )));
                }
                Box::new(backend)
            }
        };
        let cache_file = std::env::var_os(CACHE_DIR_ENV).map(|dir| {
            let name: String = inner
                .name()
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || c == '-' {
                        c
                    } else {
                        '_'
                    }
                })
                .collect();
            PathBuf::from(dir).join(format!("{name}.jsonl"))
        });
        let backend = CachedBackend::new(inner);
        if let Some(path) = &cache_file {
            let n = backend.preload(path)?;
            log::info!(
                "loaded {n} cached log-probabilities from {}",
                path.display()
            );
        }
        Ok(Self {
            backend,
            cache_file,
        })
    }

    pub fn persist(&self) -> Result<(), Failure> {
        if let Some(path) = &self.cache_file {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            }
            self.backend.persist(path)?;
        }
        Ok(())
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let dataset = Dataset::load(&cfg.dataset)?;
    dataset.validate()?;
    Ok(dataset)
}

/// Selection settings with the dataset's default shot count applied.
fn selection_for(cfg: &RunConfig, dataset: &Dataset) -> Result<SelectionConfig, Failure> {
    let mut selection = cfg.selection.clone();
    if !cfg.n_explicit {
        if let Some(n) = dataset.n_shot {
            selection.n_shot = n;
        }
    }
    selection.validate()?;
    Ok(selection)
}

fn needs_provider(selection: &SelectionConfig) -> bool {
    selection.n_shot > 0 && selection.strategy.uses_retrieval()
}

fn load_provider(
    cfg: &RunConfig,
    dataset: &Dataset,
    selection: &SelectionConfig,
) -> Result<Option<Box<dyn SimilarityProvider>>, Failure> {
    if !needs_provider(selection) {
        return Ok(None);
    }
    let spec = if selection.strategy == Strategy::Bm25 {
        match &cfg.retriever {
            RetrieverSpec::Embeddings(_) => &RetrieverSpec::Bm25,
            other => other,
        }
    } else {
        &cfg.retriever
    };
    Ok(Some(match spec {
        RetrieverSpec::Bm25 => Box::new(Bm25Index::from_examples(&dataset.train)?),
        RetrieverSpec::Bm25Index(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            let index = Bm25Index::from_json(&text)?;
            let indexed: HashSet<&str> = index.doc_ids().iter().map(String::as_str).collect();
            let train: HashSet<&str> = dataset.train.iter().map(|e| e.id.as_str()).collect();
            if indexed != train {
                return Err(Failure::Config(format!(
                    "{} does not index this dataset's train split; re-run `index`",
                    path.display()
                )));
            }
            Box::new(index)
        }
        RetrieverSpec::Embeddings(path) => Box::new(load_dense(path, dataset)?),
    }))
}

fn load_dense(path: &Path, dataset: &Dataset) -> Result<DenseRetriever, Failure> {
    let store = EmbeddingStore::load(path)?;
    for ex in &dataset.test {
        store.get(&ex.id).map_err(|_| {
            Failure::Config(format!(
                "{}: no vector for test id `{}`",
                path.display(),
                ex.id
            ))
        })?;
    }
    let train = dataset.train.iter().map(|e| e.id.clone()).collect();
    Ok(DenseRetriever::new(store, train)?)
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency)
        .build()
        .map_err(|e| Failure::Config(format!("cannot start worker pool: {e}")))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::Config(format!("serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

fn traces_jsonl(traces: &[SelectionTrace]) -> Result<String, Failure> {
    let mut out = String::new();
    for t in traces {
        let line = serde_json::to_string(t)
            .map_err(|e| Failure::Config(format!("serialization failed: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Serialize)]
struct EmbeddingsSummary {
    path: String,
    dim: usize,
    count: usize,
}

/// Writes the BM25 index and validates the embedding store, if configured.
pub fn cmd_index(cfg: &RunConfig) -> Result<(), Failure> {
    let dataset = load_dataset(cfg)?;
    create_dir(&cfg.out)?;
    let index = Bm25Index::from_examples(&dataset.train)?;
    let path = cfg.out.join(INDEX_FILE);
    write_file(&path, &index.to_json()?)?;
    println!(
        "indexed {} documents (avg length {:.2}) -> {}",
        index.corpus_size(),
        index.avg_doc_length(),
        path.display()
    );
    if let RetrieverSpec::Embeddings(emb) = &cfg.retriever {
        let dense = load_dense(emb, &dataset)?;
        let summary = EmbeddingsSummary {
            path: emb.display().to_string(),
            dim: dense.store().dim(),
            count: dense.store().len(),
        };
        let path = cfg.out.join(EMBEDDINGS_SUMMARY_FILE);
        write_file(&path, &to_json(&summary)?)?;
        println!(
            "validated {} embeddings of dimension {} -> {}",
            summary.count,
            summary.dim,
            path.display()
        );
    }
    Ok(())
}

fn explain(trace: &SelectionTrace) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "test {}  strategy {}  lambda {}  validation {}",
        trace.test_id,
        trace.strategy,
        trace.lambda,
        trace.validation_id.as_deref().unwrap_or("-")
    );
    if trace.scored.is_empty() {
        let _ = writeln!(
            out,
            "  selected (prompt order): {}",
            trace.selected.join(", ")
        );
        return out;
    }
    let _ = writeln!(
        out,
        "  {:<16} {:>4} {:>12} {:>12} {:>12} {:>6}",
        "id", "rank", "L_v", "epsilon", "score", "pos"
    );
    let mut rows: Vec<_> = trace.scored.iter().collect();
    rows.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.retrieval_rank.cmp(&b.retrieval_rank))
    });
    for e in rows {
        let pos = trace
            .selected
            .iter()
            .position(|id| *id == e.id)
            .map_or("-".to_string(), |p| p.to_string());
        let _ = writeln!(
            out,
            "  {:<16} {:>4} {:>12.4} {:>12.4} {:>12.4} {:>6}",
            e.id, e.retrieval_rank, e.l_v, e.epsilon, e.score, pos
        );
    }
    out
}

/// Selects demonstrations for one test id (or all) and writes their traces.
pub fn cmd_select(cfg: &RunConfig, test_id: Option<&str>, show_table: bool) -> Result<(), Failure> {
    let dataset = load_dataset(cfg)?;
    let selection = selection_for(cfg, &dataset)?;
    let tests: Vec<_> = match test_id {
        Some(id) => vec![dataset
            .test
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Failure::Config(format!("unknown test id `{id}`")))?],
        None => dataset.test.iter().collect(),
    };
    let provider = load_provider(cfg, &dataset, &selection)?;
    let handle = BackendHandle::open(cfg)?;
    let counted = CountingBackend::new(&handle.backend);
    let selector = Selector::new(
        &counted,
        &dataset.template,
        provider.as_deref(),
        &dataset.train,
    );

    let results: Vec<_> = pool(cfg)?.install(|| {
        tests
            .par_iter()
            .map(|t| selector.select(t, &selection))
            .collect()
    });
    let traces = results
        .into_iter()
        .map(|r| r.map(|s| s.trace))
        .collect::<Result<Vec<_>, _>>()?;
    handle.persist()?;

    create_dir(&cfg.out)?;
    let jsonl = traces_jsonl(&traces)?;
    write_file(&cfg.out.join(SELECT_TRACE_FILE), &jsonl)?;
    if show_table {
        for t in &traces {
            println!("{}", explain(t));
        }
    } else {
        print!("{jsonl}");
    }
    eprintln!("selection backend calls: {}", counted.total_calls());
    Ok(())
}

fn percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn describe(aggregates: &BTreeMap<String, f64>) -> String {
    aggregates
        .iter()
        .map(|(k, v)| format!("{k} {}", percent(*v)))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    aggregates: BTreeMap<String, f64>,
    evaluated: usize,
    failures: usize,
}

#[derive(Serialize)]
struct Summary {
    dataset: String,
    strategy: Strategy,
    seeds: Vec<u64>,
    mean: BTreeMap<String, f64>,
    per_seed: Vec<SeedSummary>,
}

fn check_total(report: &Report) -> Result<(), Failure> {
    if report.all_failed() {
        return Err(Failure::Total(format!(
            "all {} test instances failed (seed {})",
            report.failures.len(),
            report.seed
        )));
    }
    Ok(())
}

/// Runs the full evaluation for every configured seed.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<Report>, Failure> {
    let dataset = load_dataset(cfg)?;
    let selection = selection_for(cfg, &dataset)?;
    let provider = load_provider(cfg, &dataset, &selection)?;
    let handle = BackendHandle::open(cfg)?;
    let workers = pool(cfg)?;
    create_dir(&cfg.out)?;

    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let seeded = SelectionConfig {
            seed,
            ..selection.clone()
        };
        let out: RunOutput = workers
            .install(|| run_experiment(&dataset, &seeded, &handle.backend, provider.as_deref()))?;
        write_file(&report_path(&cfg.out, seed), &to_json(&out.report)?)?;
        write_file(&trace_path(&cfg.out, seed), &traces_jsonl(&out.traces)?)?;
        println!(
            "seed {seed}: {} ({} evaluated, {} failed)",
            describe(&out.report.aggregates),
            out.report.per_instance.len(),
            out.report.failures.len()
        );
        eprintln!(
            "seed {seed}: backend calls: selection {}, prediction {}",
            out.stats.selection_calls, out.stats.prediction_calls
        );
        check_total(&out.report)?;
        reports.push(out.report);
    }
    handle.persist()?;

    let summary = Summary {
        dataset: dataset.name.clone(),
        strategy: selection.strategy,
        seeds: cfg.seeds.clone(),
        mean: mean_aggregates(&reports),
        per_seed: reports
            .iter()
            .map(|r| SeedSummary {
                seed: r.seed,
                aggregates: r.aggregates.clone(),
                evaluated: r.per_instance.len(),
                failures: r.failures.len(),
            })
            .collect(),
    };
    write_file(&cfg.out.join(SUMMARY_FILE), &to_json(&summary)?)?;
    if reports.len() > 1 {
        println!(
            "mean over {} seeds: {}",
            reports.len(),
            describe(&summary.mean)
        );
    }
    Ok(reports)
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub aggregates: BTreeMap<String, f64>,
    pub selection_calls: usize,
    pub prediction_calls: usize,
}

fn axis_configs(
    base: &SelectionConfig,
    axis: Axis,
    values: &[String],
) -> Result<Vec<SelectionConfig>, Failure> {
    let parse_err =
        |v: &str, e: String| Failure::Config(format!("invalid {} value `{v}`: {e}", axis.as_str()));
    values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            match axis {
                Axis::Lambda => {
                    c.lambda = v
                        .parse()
                        .map_err(|e: std::num::ParseFloatError| parse_err(v, e.to_string()))?
                }
                Axis::K => {
                    c.k = v
                        .parse()
                        .map_err(|e: std::num::ParseIntError| parse_err(v, e.to_string()))?;
                    let cap = if c.strategy == Strategy::Dva {
                        c.k.saturating_sub(1)
                    } else {
                        c.k
                    };
                    if c.n_shot > cap {
                        log::warn!(
                            "k = {}: using {cap} demonstrations instead of {}",
                            c.k,
                            c.n_shot
                        );
                        c.n_shot = cap;
                    }
                }
                Axis::NShot => {
                    c.n_shot = v
                        .parse()
                        .map_err(|e: std::num::ParseIntError| parse_err(v, e.to_string()))?
                }
                Axis::Ordering => {
                    c.ordering = v
                        .parse::<DemoOrdering>()
                        .map_err(|e| parse_err(v, e.to_string()))?
                }
                Axis::ValidationPolicy => {
                    c.validation_policy = v
                        .parse::<ValidationPolicy>()
                        .map_err(|e| parse_err(v, e.to_string()))?
                }
            }
            c.validate()?;
            Ok(c)
        })
        .collect()
}

/// Evaluates each axis value (averaged over seeds) and writes a CSV table.
pub fn cmd_sweep(cfg: &RunConfig, axis: Axis, values: &[String]) -> Result<Vec<SweepRow>, Failure> {
    if values.is_empty() {
        return Err(Failure::Config("a sweep needs at least one value".into()));
    }
    let dataset = load_dataset(cfg)?;
    let selection = selection_for(cfg, &dataset)?;
    let configs = axis_configs(&selection, axis, values)?;
    let needs_retrieval = configs.iter().any(needs_provider);
    let provider = if needs_retrieval {
        let probe = configs.iter().find(|c| needs_provider(c)).unwrap();
        load_provider(cfg, &dataset, probe)?
    } else {
        None
    };
    let handle = BackendHandle::open(cfg)?;
    let workers = pool(cfg)?;

    // outputs[value][seed]
    let mut outputs: Vec<Vec<RunOutput>> = vec![Vec::new(); configs.len()];
    for &seed in &cfg.seeds {
        let seeded: Vec<SelectionConfig> = configs
            .iter()
            .map(|c| SelectionConfig { seed, ..c.clone() })
            .collect();
        let runs = workers.install(|| -> Result<Vec<RunOutput>, Failure> {
            if axis == Axis::Lambda {
                let lambdas: Vec<f64> = seeded.iter().map(|c| c.lambda).collect();
                Ok(run_lambda_sweep(
                    &dataset,
                    &seeded[0],
                    &lambdas,
                    &handle.backend,
                    provider.as_deref(),
                )?)
            } else {
                seeded
                    .iter()
                    .map(|c| {
                        Ok(run_experiment(
                            &dataset,
                            c,
                            &handle.backend,
                            provider.as_deref(),
                        )?)
                    })
                    .collect()
            }
        })?;
        for (slot, run) in outputs.iter_mut().zip(runs) {
            check_total(&run.report)?;
            slot.push(run);
        }
    }
    handle.persist()?;

    let rows: Vec<SweepRow> = values
        .iter()
        .zip(&outputs)
        .map(|(value, runs)| {
            let reports: Vec<Report> = runs.iter().map(|r| r.report.clone()).collect();
            SweepRow {
                value: value.clone(),
                aggregates: mean_aggregates(&reports),
                selection_calls: runs.iter().map(|r| r.stats.selection_calls).sum(),
                prediction_calls: runs.iter().map(|r| r.stats.prediction_calls).sum(),
            }
        })
        .collect();

    let metrics: Vec<String> = rows[0].aggregates.keys().cloned().collect();
    let mut csv = format!(
        "{},{},selection_calls,prediction_calls\n",
        axis.as_str(),
        metrics.join(",")
    );
    for row in &rows {
        let cells: Vec<String> = metrics
            .iter()
            .map(|m| row.aggregates.get(m).map_or(String::new(), |v| percent(*v)))
            .collect();
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            row.value,
            cells.join(","),
            row.selection_calls,
            row.prediction_calls
        );
    }
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(format!("sweep_{}.csv", axis.as_str())), &csv)?;
    print!("{csv}");
    Ok(rows)
}
