//! Lexical and dense similarity providers and top-K candidate retrieval.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Lowercases and splits on every character that is not alphanumeric, so
/// whitespace and punctuation both act as separators.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Okapi BM25 over a fixed document collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    doc_ids: Vec<String>,
    doc_term_freqs: Vec<BTreeMap<String, u32>>,
    doc_lengths: Vec<usize>,
    avg_doc_length: f64,
    doc_freqs: BTreeMap<String, usize>,
    k1: f64,
    b: f64,
    #[serde(skip)]
    positions: HashMap<String, usize>,
}

impl Bm25Index {
    pub fn build<I, S, T>(corpus: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        Self::build_with(corpus, DEFAULT_K1, DEFAULT_B)
    }

    pub fn build_with<I, S, T>(corpus: I, k1: f64, b: f64) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        let mut doc_ids = Vec::new();
        let mut doc_term_freqs = Vec::new();
        let mut doc_lengths = Vec::new();
        let mut doc_freqs: BTreeMap<String, usize> = BTreeMap::new();
        for (id, text) in corpus {
            let terms = tokenize(text.as_ref());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &terms {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freqs.entry(t.clone()).or_default() += 1;
            }
            doc_ids.push(id.into());
            doc_lengths.push(terms.len());
            doc_term_freqs.push(tf);
        }
        if doc_ids.is_empty() {
            return Err(Error::Index("cannot index an empty corpus".into()));
        }
        let avg_doc_length = doc_lengths.iter().sum::<usize>() as f64 / doc_ids.len() as f64;
        let mut index = Self {
            doc_ids,
            doc_term_freqs,
            doc_lengths,
            avg_doc_length,
            doc_freqs,
            k1,
            b,
            positions: HashMap::new(),
        };
        index.rebuild_positions()?;
        Ok(index)
    }

    /// Index over the input text of each example.
    pub fn from_examples(examples: &[Example]) -> Result<Self> {
        Self::build(examples.iter().map(|e| (e.id.clone(), e.input_text())))
    }

    fn rebuild_positions(&mut self) -> Result<()> {
        self.positions.clear();
        for (i, id) in self.doc_ids.iter().enumerate() {
            if self.positions.insert(id.clone(), i).is_some() {
                return Err(Error::Index(format!("duplicate document id `{id}`")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut index: Self = serde_json::from_str(text)?;
        index.rebuild_positions()?;
        Ok(index)
    }

    pub fn corpus_size(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freqs.get(term).copied().unwrap_or(0)
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.corpus_size() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    pub fn score(&self, query_terms: &[String], doc_id: &str) -> Result<f64> {
        let pos = *self
            .positions
            .get(doc_id)
            .ok_or_else(|| Error::UnknownId(doc_id.to_string()))?;
        Ok(self.score_at(query_terms, pos))
    }

    fn score_at(&self, query_terms: &[String], pos: usize) -> f64 {
        let tf = &self.doc_term_freqs[pos];
        // An all-empty corpus has avgdl 0; no term can match, so the length
        // ratio is irrelevant.
        let length_ratio = if self.avg_doc_length > 0.0 {
            self.doc_lengths[pos] as f64 / self.avg_doc_length
        } else {
            0.0
        };
        let norm = self.k1 * (1.0 - self.b + self.b * length_ratio);
        query_terms
            .iter()
            .map(|t| match tf.get(t) {
                Some(&f) => {
                    let f = f as f64;
                    self.idf(t) * f * (self.k1 + 1.0) / (f + norm)
                }
                None => 0.0,
            })
            .sum()
    }
}

/// Precomputed dense vectors keyed by example id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    positions: HashMap<String, usize>,
}

const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Deserialize)]
struct EmbeddingLine {
    id: String,
    vec: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(entries: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let dim = entries.first().map(|(_, v)| v.len()).unwrap_or(0);
        let mut store = Self {
            dim,
            ids: Vec::with_capacity(entries.len()),
            vectors: Vec::with_capacity(entries.len()),
            positions: HashMap::new(),
        };
        for (id, vec) in entries {
            if vec.len() != dim {
                return Err(Error::Embedding(format!(
                    "vector `{id}` has dimension {} but the store has {dim}",
                    vec.len()
                )));
            }
            if let Some(bad) = vec.iter().find(|x| !x.is_finite()) {
                return Err(Error::Embedding(format!(
                    "vector `{id}` has non-finite component {bad}"
                )));
            }
            if store
                .positions
                .insert(id.clone(), store.ids.len())
                .is_some()
            {
                return Err(Error::Embedding(format!("duplicate id `{id}`")));
            }
            store.ids.push(id);
            store.vectors.push(vec);
        }
        Ok(store)
    }

    /// Reads the binary `EMB1` layout, or JSONL `{"id", "vec"}` lines when
    /// the file does not start with the magic.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(EMBEDDING_MAGIC) {
            Self::decode_binary(&bytes)
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Embedding("file is neither EMB1 nor UTF-8 JSONL".into()))?;
            let mut entries = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: EmbeddingLine = serde_json::from_str(line).map_err(|e| Error::Record {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                entries.push((rec.id, rec.vec));
            }
            Self::new(entries)
        }
    }

    fn decode_binary(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 4 };
        let dim = cursor.u32()? as usize;
        let count = cursor.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cursor.u16()? as usize;
            let id = std::str::from_utf8(cursor.take(len)?)
                .map_err(|_| Error::Embedding("id is not valid UTF-8".into()))?
                .to_string();
            let mut vec = Vec::with_capacity(dim);
            for _ in 0..dim {
                vec.push(f32::from_le_bytes(cursor.take(4)?.try_into().unwrap()));
            }
            entries.push((id, vec));
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Embedding("trailing bytes after last record".into()));
        }
        let store = Self::new(entries)?;
        Ok(Self { dim, ..store })
    }

    pub fn encode_binary(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        for (id, vec) in self.ids.iter().zip(&self.vectors) {
            let len = u16::try_from(id.len())
                .map_err(|_| Error::Embedding(format!("id `{id}` is too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in vec {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_binary()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&[f32]> {
        self.positions
            .get(id)
            .map(|&i| self.vectors[i].as_slice())
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Embedding("truncated embedding file".into()))?;
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Similarity between a query example and indexed train examples.
pub trait SimilarityProvider: Send + Sync {
    /// Ids of the indexed corpus, in index order.
    fn corpus_ids(&self) -> &[String];

    fn similarity(&self, query: &Example, candidate_id: &str) -> Result<f64>;

    /// Similarity of `query` to every indexed document, in index order.
    fn similarities(&self, query: &Example) -> Result<Vec<f64>> {
        self.corpus_ids()
            .iter()
            .map(|id| self.similarity(query, id))
            .collect()
    }
}

impl SimilarityProvider for Bm25Index {
    fn corpus_ids(&self) -> &[String] {
        &self.doc_ids
    }

    fn similarity(&self, query: &Example, candidate_id: &str) -> Result<f64> {
        self.score(&tokenize(&query.input_text()), candidate_id)
    }

    fn similarities(&self, query: &Example) -> Result<Vec<f64>> {
        let terms = tokenize(&query.input_text());
        Ok((0..self.corpus_size())
            .map(|pos| self.score_at(&terms, pos))
            .collect())
    }
}

/// Cosine similarity against the train subset of an [`EmbeddingStore`]. Query
/// vectors are looked up by the query's id.
#[derive(Debug, Clone)]
pub struct DenseRetriever {
    store: EmbeddingStore,
    corpus: Vec<String>,
}

impl DenseRetriever {
    pub fn new(store: EmbeddingStore, corpus: Vec<String>) -> Result<Self> {
        for id in &corpus {
            store.get(id)?;
        }
        Ok(Self { store, corpus })
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }
}

impl SimilarityProvider for DenseRetriever {
    fn corpus_ids(&self) -> &[String] {
        &self.corpus
    }

    fn similarity(&self, query: &Example, candidate_id: &str) -> Result<f64> {
        cosine(self.store.get(&query.id)?, self.store.get(candidate_id)?)
    }
}

/// Orders by similarity descending, then id ascending.
pub fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// The `k` most similar indexed documents, never including the query itself.
pub fn retrieve_top_k(
    provider: &dyn SimilarityProvider,
    query: &Example,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let sims = provider.similarities(query)?;
    let mut ranked: Vec<(String, f64)> = provider
        .corpus_ids()
        .iter()
        .zip(sims)
        .filter(|(id, _)| **id != query.id)
        .map(|(id, s)| (id.clone(), s))
        .collect();
    let k = k.min(ranked.len());
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k, rank_order);
        ranked.truncate(k);
    }
    ranked.sort_by(rank_order);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("The cat, the hat."), ["the", "cat", "the", "hat"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Don't stop"), ["don", "t", "stop"]);
    }

    #[test]
    fn small_index_statistics() {
        let idx = Bm25Index::build([("1", "a b"), ("2", "a"), ("3", "c")]).unwrap();
        assert_eq!(idx.corpus_size(), 3);
        assert!((idx.avg_doc_length() - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(idx.doc_freq("a"), 2);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: Vec<(String, String)> = Vec::new();
        assert!(Bm25Index::build(empty).is_err());
    }

    #[test]
    fn absent_terms_score_zero() {
        let idx = Bm25Index::build([("1", "a b"), ("2", "c")]).unwrap();
        assert_eq!(idx.score(&["z".into()], "1").unwrap(), 0.0);
        assert!(matches!(
            idx.score(&["a".into()], "nope"),
            Err(Error::UnknownId(_))
        ));
    }

    #[test]
    fn single_doc_closed_form() {
        // N=1, df=1: idf = ln(0.5/1.5 + 1) = ln(4/3); |d| = avgdl so the
        // denominator is f + k1. Query "x y" against doc "x y x".
        let idx = Bm25Index::build([("d", "x y x")]).unwrap();
        let idf = (4.0f64 / 3.0).ln();
        let expected = idf * 2.0 * 2.2 / (2.0 + 1.2) + idf * 1.0 * 2.2 / (1.0 + 1.2);
        let got = idx.score(&tokenize("x y"), "d").unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn serialized_index_round_trips() {
        let idx = Bm25Index::build([("1", "a b"), ("2", "a")]).unwrap();
        let back = Bm25Index::from_json(&idx.to_json().unwrap()).unwrap();
        assert_eq!(
            back.score(&["a".into()], "2").unwrap(),
            idx.score(&["a".into()], "2").unwrap()
        );
        assert_eq!(idx.to_json().unwrap(), back.to_json().unwrap());
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3f32, -1.2, 4.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(
            (cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs()
                < 1e-8
        );
        assert!(matches!(
            cosine(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 2.0]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn embedding_store_validation() {
        let ok = EmbeddingStore::new(vec![
            ("a".into(), vec![1.0, 2.0, 3.0, 4.0]),
            ("b".into(), vec![0.0, 1.0, 0.0, 1.0]),
        ])
        .unwrap();
        assert_eq!(ok.dim(), 4);
        assert!(
            EmbeddingStore::new(vec![("a".into(), vec![1.0; 4]), ("b".into(), vec![1.0; 5]),])
                .is_err()
        );
        assert!(EmbeddingStore::new(vec![("a".into(), vec![1.0, f32::NAN])]).is_err());
    }

    #[test]
    fn embedding_binary_and_jsonl_load() {
        let dir = tempfile::tempdir().unwrap();
        let store = EmbeddingStore::new(vec![
            ("a".into(), vec![1.0, 2.0, 3.0, 4.0]),
            ("é".into(), vec![0.5, -1.0, 0.0, 2.0]),
        ])
        .unwrap();
        let bin = dir.path().join("e.bin");
        store.save(&bin).unwrap();
        assert_eq!(EmbeddingStore::load(&bin).unwrap(), store);

        let jsonl = dir.path().join("e.jsonl");
        fs::write(
            &jsonl,
            "{\"id\":\"a\",\"vec\":[1,2,3,4]}\n{\"id\":\"é\",\"vec\":[0.5,-1,0,2]}\n",
        )
        .unwrap();
        assert_eq!(EmbeddingStore::load(&jsonl).unwrap(), store);

        fs::write(
            &jsonl,
            "{\"id\":\"a\",\"vec\":[1,2]}\n{\"id\":\"b\",\"vec\":[1,2,3]}\n",
        )
        .unwrap();
        assert!(EmbeddingStore::load(&jsonl).is_err());
    }

    #[test]
    fn top_k_clamps_and_excludes_self() {
        let idx = Bm25Index::build([("q", "a a"), ("1", "a"), ("2", "a b"), ("3", "c")]).unwrap();
        let query = Example::new("q").with_field("text", "a");
        let all = retrieve_top_k(&idx, &query, 100).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.iter().all(|(id, _)| id != "q"));
        assert_eq!(all[0].0, "1");
        assert_eq!(all[2].0, "3");
    }

    #[test]
    fn ties_break_by_id() {
        let idx = Bm25Index::build([("b", "x"), ("a", "x"), ("c", "x")]).unwrap();
        let query = Example::new("q").with_field("text", "x");
        let ids: Vec<_> = retrieve_top_k(&idx, &query, 2)
            .unwrap()
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        assert_eq!(ids, ["a", "b"]);
    }
}
