//! Synthetic topic-classification task with a matching unigram model.
//!
//! Every label owns a small set of topic words. An example mixes a few
//! topic words of its own label, one topic word of another label and some
//! shared noise words. Demonstrations that share the test input's label are
//! label-informative under a [`UnigramBackend`] with a positive context
//! weight: each demonstration carries its label word, and the cache component
//! raises the probability of label words already present in the prompt.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{UnigramBackend, UnigramFile};
use crate::corpus::{write_jsonl, Dataset, Descriptor, Example, Splits, TaskKind, TaskTemplate};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub labels: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub topic_words_per_label: usize,
    pub own_topic_words: usize,
    pub foreign_topic_words: usize,
    pub noise_vocab: usize,
    pub noise_words: usize,
    pub context_weight: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            labels: ["alpha", "beta", "gamma", "delta"]
                .map(String::from)
                .to_vec(),
            n_train: 120,
            n_test: 80,
            topic_words_per_label: 8,
            own_topic_words: 3,
            foreign_topic_words: 1,
            noise_vocab: 24,
            noise_words: 3,
            context_weight: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub dataset: Dataset,
    pub backend: UnigramBackend,
}

fn topic_word(label: usize, j: usize) -> String {
    format!("t{label}w{j}")
}

fn template(labels: &[String]) -> Result<TaskTemplate> {
    let verbalizer: IndexMap<String, String> = labels
        .iter()
        .map(|l| (l.clone(), format!(" {l}")))
        .collect();
    TaskTemplate::new(
        "Input: {text} Type:{answer}",
        "Input: {text} Type:",
        Some(verbalizer),
        "\n",
    )
}

/// Builds the task and a uniform unigram model over its vocabulary.
pub fn topic_classification(cfg: &ToyConfig) -> Result<ToyTask> {
    if cfg.labels.len() < 2 {
        return Err(Error::Config("toy task needs at least two labels".into()));
    }
    if cfg.own_topic_words > cfg.topic_words_per_label || cfg.noise_words > cfg.noise_vocab {
        return Err(Error::Config("toy task draws more words than exist".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_labels = cfg.labels.len();
    let noise: Vec<String> = (0..cfg.noise_vocab).map(|j| format!("n{j}")).collect();

    let mut examples = Vec::with_capacity(cfg.n_train + cfg.n_test);
    for i in 0..cfg.n_train + cfg.n_test {
        let label = i % n_labels;
        let own: Vec<usize> = (0..cfg.topic_words_per_label).collect();
        let mut words: Vec<String> = own
            .choose_multiple(&mut rng, cfg.own_topic_words)
            .map(|&j| topic_word(label, j))
            .collect();
        for _ in 0..cfg.foreign_topic_words {
            let other = (label + rng.random_range(1..n_labels)) % n_labels;
            words.push(topic_word(
                other,
                rng.random_range(0..cfg.topic_words_per_label),
            ));
        }
        words.extend(noise.choose_multiple(&mut rng, cfg.noise_words).cloned());
        words.shuffle(&mut rng);
        examples.push(
            Example::new(format!("ex{i:04}"))
                .with_field("text", words.join(" "))
                .with_label(cfg.labels[label].clone()),
        );
    }
    examples.shuffle(&mut rng);
    let test = examples.split_off(cfg.n_train);

    let mut vocab_words: Vec<String> = vec!["Input:".into(), "Type:".into()];
    vocab_words.extend(cfg.labels.iter().cloned());
    for label in 0..n_labels {
        vocab_words.extend((0..cfg.topic_words_per_label).map(|j| topic_word(label, j)));
    }
    vocab_words.extend(noise);
    let p = 1.0 / vocab_words.len() as f64;
    let vocab: BTreeMap<String, f64> = vocab_words.into_iter().map(|w| (w, p)).collect();
    let backend = UnigramBackend::new(vocab)?.with_context_weight(cfg.context_weight)?;

    let dataset = Dataset {
        name: "toy-topics".into(),
        task_kind: TaskKind::Classification,
        labels: cfg.labels.clone(),
        train: examples,
        test,
        template: template(&cfg.labels)?,
        n_shot: None,
        max_tokens: None,
    };
    dataset.validate()?;
    Ok(ToyTask { dataset, backend })
}

impl ToyTask {
    /// Writes descriptor, splits, template and unigram model into `dir`.
    /// Returns the descriptor path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write_jsonl(&dir.join("train.jsonl"), &self.dataset.train)?;
        write_jsonl(&dir.join("test.jsonl"), &self.dataset.test)?;
        write(
            "template.json",
            serde_json::to_string_pretty(&self.dataset.template)?,
        )?;
        let unigram: UnigramFile = self.backend.to_file();
        write("unigram.json", serde_json::to_string_pretty(&unigram)?)?;
        let descriptor = Descriptor {
            name: self.dataset.name.clone(),
            task_kind: self.dataset.task_kind,
            template: "template.json".into(),
            labels: self.dataset.labels.clone(),
            splits: Splits {
                train: "train.jsonl".into(),
                test: "test.jsonl".into(),
            },
            n_shot: self.dataset.n_shot,
            max_tokens: self.dataset.max_tokens,
        };
        write("dataset.json", serde_json::to_string_pretty(&descriptor)?)?;
        Ok(dir.join("dataset.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_task_shape() {
        let task = topic_classification(&ToyConfig::default()).unwrap();
        assert_eq!(task.dataset.train.len() + task.dataset.test.len(), 200);
        assert!(task.dataset.test.iter().all(|e| e.label.is_some()));
        let words = task.dataset.train[0]
            .field("text")
            .unwrap()
            .split(' ')
            .count();
        assert_eq!(words, 7);
    }

    #[test]
    fn generation_is_seeded() {
        let a = topic_classification(&ToyConfig::default()).unwrap();
        let b = topic_classification(&ToyConfig::default()).unwrap();
        assert_eq!(a.dataset.test, b.dataset.test);
        let c = topic_classification(&ToyConfig {
            seed: 1,
            ..ToyConfig::default()
        })
        .unwrap();
        assert_ne!(a.dataset.test, c.dataset.test);
    }

    #[test]
    fn written_task_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let task = topic_classification(&ToyConfig::default()).unwrap();
        let path = task.write(dir.path()).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(loaded.train, task.dataset.train);
        assert_eq!(loaded.test, task.dataset.test);
        UnigramBackend::load(&dir.path().join("unigram.json")).unwrap();
    }
}
