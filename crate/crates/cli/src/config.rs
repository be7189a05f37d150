//! Run configuration: TOML file values overridden by command-line flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use icl_core::backend::Normalization;
use icl_core::selection::{DemoOrdering, SelectionConfig, Strategy, ValidationPolicy};
use serde::Deserialize;

use crate::Failure;

pub const BACKEND_URL_ENV: &str = "ICL_BACKEND_URL";
pub const CACHE_DIR_ENV: &str = "ICL_CACHE_DIR";

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML config file; relative paths inside it resolve against its directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset descriptor (JSON).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// `bm25`, `bm25:<index.json>` or `embeddings:<path>`.
    #[arg(long)]
    pub retriever: Option<String>,
    /// `mock:<path>`, `unigram:<path>`, `http:<url>` or `http` (uses ICL_BACKEND_URL).
    #[arg(long)]
    pub backend: Option<String>,
    /// Model name sent to an HTTP backend.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of retrieved candidates.
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of demonstrations in the prompt.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub ordering: Option<DemoOrdering>,
    /// Validation example policy: nearest, random or furthest.
    #[arg(long)]
    pub validation: Option<ValidationPolicy>,
    /// `sum` or `per_token`.
    #[arg(long)]
    pub normalization: Option<Normalization>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seeds; one report per seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (and HTTP requests in flight).
    #[arg(long)]
    pub concurrency: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    dataset: Option<PathBuf>,
    retriever: Option<String>,
    backend: Option<String>,
    model: Option<String>,
    strategy: Option<String>,
    lambda: Option<f64>,
    k: Option<usize>,
    n: Option<usize>,
    ordering: Option<String>,
    validation: Option<String>,
    normalization: Option<String>,
    seed: Option<u64>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
    concurrency: Option<usize>,
    timeout_secs: Option<u64>,
    retries: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RetrieverSpec {
    Bm25,
    Bm25Index(PathBuf),
    Embeddings(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Mock(PathBuf),
    Unigram(PathBuf),
    Http(String),
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Mock(p) => write!(f, "mock:{}", p.display()),
            BackendSpec::Unigram(p) => write!(f, "unigram:{}", p.display()),
            BackendSpec::Http(u) => write!(f, "http:{u}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub retriever: RetrieverSpec,
    pub backend: BackendSpec,
    pub model: String,
    pub selection: SelectionConfig,
    /// Whether `n` was given explicitly (otherwise the dataset default applies).
    pub n_explicit: bool,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub concurrency: usize,
    pub timeout_secs: u64,
    pub retries: u32,
}

fn parse<T: FromStr>(what: &str, value: &str) -> Result<T, Failure>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Failure::Config(format!("invalid {what} `{value}`: {e}")))
}

fn resolve(base: &Path, path: PathBuf) -> PathBuf {
    if path.is_relative() {
        base.join(path)
    } else {
        path
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Config(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

impl RetrieverSpec {
    pub fn parse(text: &str, base: &Path) -> Result<Self, Failure> {
        match text.split_once(':') {
            None if text == "bm25" => Ok(Self::Bm25),
            Some(("bm25", p)) => Ok(Self::Bm25Index(resolve(base, p.into()))),
            Some(("embeddings", p)) => Ok(Self::Embeddings(resolve(base, p.into()))),
            _ => Err(Failure::Config(format!(
                "invalid retriever `{text}`, expected bm25, bm25:<path> or embeddings:<path>"
            ))),
        }
    }
}

impl BackendSpec {
    pub fn parse(text: &str, base: &Path) -> Result<Self, Failure> {
        let env_url = || {
            std::env::var(BACKEND_URL_ENV).map_err(|_| {
                Failure::Config(format!("backend `http` needs a URL or {BACKEND_URL_ENV}"))
            })
        };
        match text.split_once(':') {
            None if text == "http" => Ok(Self::Http(env_url()?)),
            Some(("mock", p)) => Ok(Self::Mock(resolve(base, p.into()))),
            Some(("unigram", p)) => Ok(Self::Unigram(resolve(base, p.into()))),
            Some(("http", "")) => Ok(Self::Http(env_url()?)),
            Some(("http", url)) => Ok(Self::Http(url.to_string())),
            _ => Err(Failure::Config(format!(
                "invalid backend `{text}`, expected mock:<path>, unigram:<path> or http:<url>"
            ))),
        }
    }
}

impl RunConfig {
    /// Merges the config file (if any) with flags; flags win.
    pub fn from_args(args: &CommonArgs) -> Result<Self, Failure> {
        let (file, base) = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Failure::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                let file: FileConfig = toml::from_str(&text).map_err(|e| {
                    Failure::Config(format!("invalid config {}: {e}", path.display()))
                })?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (file, base)
            }
            None => (FileConfig::default(), PathBuf::new()),
        };
        let cwd = PathBuf::new();

        let mut selection = SelectionConfig::default();
        if let Some(s) = &args.strategy {
            selection.strategy = *s;
        } else if let Some(s) = &file.strategy {
            selection.strategy = parse("strategy", s)?;
        }
        if let Some(o) = args.ordering {
            selection.ordering = o;
        } else if let Some(o) = &file.ordering {
            selection.ordering = parse("ordering", o)?;
        }
        if let Some(v) = args.validation {
            selection.validation_policy = v;
        } else if let Some(v) = &file.validation {
            selection.validation_policy = parse("validation policy", v)?;
        }
        if let Some(n) = args.normalization {
            selection.normalization = n;
        } else if let Some(n) = &file.normalization {
            selection.normalization = parse("normalization", n)?;
        }
        selection.lambda = args.lambda.or(file.lambda).unwrap_or(selection.lambda);
        selection.k = args.k.or(file.k).unwrap_or(selection.k);
        let n = args.n.or(file.n);
        selection.n_shot = n.unwrap_or(selection.n_shot);

        let seeds = match (&args.seeds, args.seed) {
            (Some(s), _) => s.clone(),
            (None, Some(s)) => vec![s],
            (None, None) => match (&file.seeds, file.seed) {
                (Some(s), _) => s.clone(),
                (None, Some(s)) => vec![s],
                (None, None) => vec![0],
            },
        };
        if seeds.is_empty() {
            return Err(Failure::Config("at least one seed is required".into()));
        }
        selection.seed = seeds[0];

        let dataset = match (&args.dataset, &file.dataset) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => resolve(&base, p.clone()),
            (None, None) => return Err(Failure::Config("no dataset given (--dataset)".into())),
        };
        let retriever = match (&args.retriever, &file.retriever) {
            (Some(r), _) => RetrieverSpec::parse(r, &cwd)?,
            (None, Some(r)) => RetrieverSpec::parse(r, &base)?,
            (None, None) => RetrieverSpec::Bm25,
        };
        let backend = match (&args.backend, &file.backend) {
            (Some(b), _) => BackendSpec::parse(b, &cwd)?,
            (None, Some(b)) => BackendSpec::parse(b, &base)?,
            (None, None) => return Err(Failure::Config("no backend given (--backend)".into())),
        };
        let out = match (&args.out, &file.out) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => resolve(&base, p.clone()),
            (None, None) => PathBuf::from("runs"),
        };
        let concurrency = args
            .concurrency
            .or(file.concurrency)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

        let config = Self {
            dataset,
            retriever,
            backend,
            model: args
                .model
                .clone()
                .or(file.model)
                .unwrap_or_else(|| "default".into()),
            selection,
            n_explicit: n.is_some(),
            seeds,
            out,
            concurrency,
            timeout_secs: file.timeout_secs.unwrap_or(60),
            retries: file.retries.unwrap_or(3),
        };
        config.validate()?;
        Ok(config)
    }

    /// Checks ranges and that every referenced file exists.
    pub fn validate(&self) -> Result<(), Failure> {
        self.selection.validate().map_err(Failure::from)?;
        if self.concurrency == 0 {
            return Err(Failure::Config("concurrency must be at least 1".into()));
        }
        require_file(&self.dataset, "dataset descriptor")?;
        match &self.retriever {
            RetrieverSpec::Bm25 => {}
            RetrieverSpec::Bm25Index(p) => require_file(p, "BM25 index")?,
            RetrieverSpec::Embeddings(p) => require_file(p, "embeddings file")?,
        }
        match &self.backend {
            BackendSpec::Mock(p) => require_file(p, "mock backend table")?,
            BackendSpec::Unigram(p) => require_file(p, "unigram model")?,
            BackendSpec::Http(_) => {}
        }
        Ok(())
    }
}
