use std::collections::HashMap;

use icl_core::corpus::Example;
use icl_core::retrieval::{
    cosine, retrieve_top_k, tokenize, Bm25Index, DenseRetriever, EmbeddingStore, SimilarityProvider,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Okapi BM25 evaluated directly from raw token lists.
fn reference_bm25(docs: &[Vec<String>], query: &[String], doc: usize) -> f64 {
    let (k1, b) = (1.2, 0.75);
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
    let mut total = 0.0;
    for q in query {
        let df = docs.iter().filter(|d| d.contains(q)).count() as f64;
        let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
        let tf = docs[doc].iter().filter(|t| *t == q).count() as f64;
        let len = docs[doc].len() as f64;
        let norm = if avgdl > 0.0 { len / avgdl } else { 0.0 };
        total += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm));
    }
    total
}

fn random_corpus(rng: &mut ChaCha8Rng, docs: usize) -> Vec<Example> {
    let vocab: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    (0..docs)
        .map(|i| {
            let len = rng.random_range(0..15);
            let text: Vec<&str> = (0..len)
                .map(|_| vocab[rng.random_range(0..vocab.len())].as_str())
                .collect();
            Example::new(format!("d{i:03}")).with_field("text", text.join(" "))
        })
        .collect()
}

#[test]
fn bm25_matches_reference_on_random_corpora() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..10 {
        let n = rng.random_range(1..120);
        let corpus = random_corpus(&mut rng, n);
        let index = Bm25Index::from_examples(&corpus).unwrap();
        let docs: Vec<Vec<String>> = corpus.iter().map(|e| tokenize(&e.input_text())).collect();
        let query = random_corpus(&mut rng, 1).remove(0);
        let terms = tokenize(&query.input_text());
        for (i, ex) in corpus.iter().enumerate() {
            let got = index.score(&terms, &ex.id).unwrap();
            assert!((got - reference_bm25(&docs, &terms, i)).abs() < 1e-9);
        }
    }
}

#[test]
fn bm25_index_survives_serialization() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let corpus = random_corpus(&mut rng, 30);
    let index = Bm25Index::from_examples(&corpus).unwrap();
    let back = Bm25Index::from_json(&index.to_json().unwrap()).unwrap();
    let query = random_corpus(&mut rng, 1).remove(0);
    assert_eq!(
        index.similarities(&query).unwrap(),
        back.similarities(&query).unwrap()
    );
    assert_eq!(index.to_json().unwrap(), back.to_json().unwrap());
}

#[test]
fn dense_retrieval_ranks_by_cosine() {
    let store = EmbeddingStore::new(vec![
        ("q".into(), vec![1.0, 0.0]),
        ("a".into(), vec![0.9, 0.1]),
        ("b".into(), vec![0.0, 1.0]),
        ("c".into(), vec![1.0, 1.0]),
    ])
    .unwrap();
    let retriever = DenseRetriever::new(store, vec!["a".into(), "b".into(), "c".into()]).unwrap();
    let top = retrieve_top_k(&retriever, &Example::new("q"), 2).unwrap();
    let ids: Vec<&str> = top.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(ids, ["a", "c"]);
}

#[test]
fn dense_retriever_rejects_missing_train_vectors() {
    let store = EmbeddingStore::new(vec![("a".into(), vec![1.0])]).unwrap();
    assert!(DenseRetriever::new(store, vec!["a".into(), "b".into()]).is_err());
}

fn vector(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-10.0f32..10.0, dim)
        .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #[test]
    fn top_k_is_prefix_of_full_sort(
        sims in prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0, 1.5, 2.0]), 1..40),
        k in 0usize..45,
    ) {
        struct Fixed(Vec<String>, HashMap<String, f64>);
        impl SimilarityProvider for Fixed {
            fn corpus_ids(&self) -> &[String] { &self.0 }
            fn similarity(&self, _: &Example, id: &str) -> icl_core::Result<f64> { Ok(self.1[id]) }
        }
        let ids: Vec<String> = (0..sims.len()).map(|i| format!("d{i:02}")).collect();
        let provider = Fixed(ids.clone(), ids.iter().cloned().zip(sims.iter().copied()).collect());
        let top = retrieve_top_k(&provider, &Example::new("query"), k).unwrap();

        let mut full: Vec<(String, f64)> = ids.into_iter().zip(sims).collect();
        full.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        full.truncate(k);
        prop_assert_eq!(top, full);
    }

    #[test]
    fn cosine_is_symmetric_and_scale_free(u in vector(6), v in vector(6), s in 0.1f32..50.0) {
        let uv = cosine(&u, &v).unwrap();
        prop_assert!((uv - cosine(&v, &u).unwrap()).abs() < 1e-12);
        let scaled: Vec<f32> = u.iter().map(|x| x * s).collect();
        prop_assert!((uv - cosine(&scaled, &v).unwrap()).abs() < 1e-5);
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&uv));
    }

    #[test]
    fn bm25_grows_with_term_frequency(extra in 1usize..6, filler in 1usize..8) {
        // Same-length documents; `more` replaces filler with query terms.
        let len = extra + filler + 1;
        let fewer = std::iter::once("q").chain(std::iter::repeat_n("x", len - 1)).collect::<Vec<_>>();
        let more = std::iter::repeat_n("q", extra + 1)
            .chain(std::iter::repeat_n("x", filler))
            .collect::<Vec<_>>();
        let index = Bm25Index::build([
            ("fewer", fewer.join(" ")),
            ("more", more.join(" ")),
            ("other", "y z".to_string()),
        ])
        .unwrap();
        let q = vec!["q".to_string()];
        prop_assert!(index.score(&q, "more").unwrap() > index.score(&q, "fewer").unwrap());
    }

    #[test]
    fn self_is_never_retrieved(n in 2usize..30, k in 1usize..40, pick in 0usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let corpus = random_corpus(&mut rng, n);
        let index = Bm25Index::from_examples(&corpus).unwrap();
        let query = &corpus[pick % n];
        let top = retrieve_top_k(&index, query, k).unwrap();
        prop_assert_eq!(top.len(), k.min(n - 1));
        prop_assert!(top.iter().all(|(id, _)| *id != query.id));
    }
}
