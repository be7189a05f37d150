use icl_core::backend::{LogProbBackend, MockBackend, UnigramBackend};
use icl_core::corpus::{Example, TaskTemplate};
use icl_core::selection::{
    oracle_select, rank_measurements, select_cone, select_dva, CandidateMeasurement, CandidateSet,
    DemoOrdering, Preference, Scorer, SelectionConfig, Strategy as Method,
};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn template() -> TaskTemplate {
    TaskTemplate::builtin("sst2").unwrap()
}

fn candidates(n: usize) -> CandidateSet {
    let ranked = (0..n)
        .map(|i| {
            let ex = Example::new(format!("c{i:02}"))
                .with_field("sentence", format!("text {i}"))
                .with_label(if i % 2 == 0 { "positive" } else { "negative" });
            (ex, 1.0 - i as f64 / 100.0)
        })
        .collect();
    CandidateSet::from_ranked("t", ranked, &template(), n).unwrap()
}

fn measurements(values: &[(f64, f64)]) -> Vec<CandidateMeasurement> {
    let set = candidates(values.len() + 1);
    set.candidates[1..]
        .iter()
        .zip(values)
        .map(|(c, &(l_v, epsilon))| CandidateMeasurement {
            candidate: c.clone(),
            l_v,
            epsilon,
        })
        .collect()
}

fn selected(values: &[(f64, f64)], lambda: f64, n: usize) -> Vec<usize> {
    let scored = rank_measurements(
        &measurements(values),
        lambda,
        n,
        DemoOrdering::Descending,
        0,
        "t",
    )
    .unwrap();
    let mut picked: Vec<(usize, usize)> = scored
        .iter()
        .filter_map(|s| s.selected_rank.map(|r| (r, s.candidate.retrieval_rank)))
        .collect();
    picked.sort();
    picked.into_iter().map(|(_, rank)| rank).collect()
}

fn value() -> impl Strategy<Value = f64> {
    // Coarse grid so ties are common.
    (-8i32..8).prop_map(|x| x as f64 * 0.25)
}

proptest! {
    #[test]
    fn selection_is_the_n_smallest_scores(
        values in prop::collection::vec((value(), value()), 1..50),
        lambda in prop::sample::select(vec![0.0, 0.3, 0.6, 1.0]),
        n in 0usize..12,
    ) {
        let n = n.min(values.len());
        let picked = selected(&values, lambda, n);
        prop_assert_eq!(picked.len(), n);

        let scores: Vec<f64> = values.iter().map(|&(l, e)| (1.0 - lambda) * l + lambda * e).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let mut chosen: Vec<f64> = picked.iter().map(|&rank| scores[rank - 1]).collect();
        chosen.sort_by(f64::total_cmp);
        prop_assert_eq!(&chosen[..], &sorted[..n]);

        // Prompt order is descending by score.
        let in_prompt: Vec<f64> = picked.iter().map(|&rank| scores[rank - 1]).collect();
        prop_assert!(in_prompt.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn shifting_and_scaling_keeps_the_selection(
        values in prop::collection::vec((value(), value()), 1..30),
        shift in value(),
        scale in prop::sample::select(vec![0.5, 2.0, 4.0]),
        lambda in prop::sample::select(vec![0.25, 0.5, 0.75]),
        n in 1usize..8,
    ) {
        // Dyadic λ and grid values keep every score exact, so ties survive.
        let n = n.min(values.len());
        let moved: Vec<(f64, f64)> = values.iter().map(|&(l, e)| (scale * l + shift, scale * e + shift)).collect();
        prop_assert_eq!(selected(&values, lambda, n), selected(&moved, lambda, n));
    }

    #[test]
    fn remainder_is_negative_log_odds(lp_t in -500.0f64..0.0, lp_v in -500.0f64..0.0) {
        let pref = Preference::from_logprobs(lp_t, lp_v);
        prop_assert!((pref.neg_log_odds() - (lp_v - lp_t)).abs() < 1e-9);
        prop_assert!((pref.log_p.exp() + pref.log_q.exp() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn lambda_endpoints_pick_one_term() {
    let values: Vec<(f64, f64)> = (0..29)
        .map(|i| ((i * 7 % 29) as f64, (i * 11 % 29) as f64))
        .collect();
    let by = |key: fn(&(f64, f64)) -> f64| {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| key(&values[a]).total_cmp(&key(&values[b])).then(a.cmp(&b)));
        idx.truncate(8);
        idx.reverse();
        idx.into_iter().map(|i| i + 1).collect::<Vec<_>>()
    };
    assert_eq!(selected(&values, 0.0, 8), by(|v| v.0));
    assert_eq!(selected(&values, 1.0, 8), by(|v| v.1));
}

fn toy_lm() -> UnigramBackend {
    let words = [
        "Review:",
        "Sentiment:",
        "positive",
        "negative",
        "text",
        "fun",
        "dull",
    ];
    let digits: Vec<String> = (0..40).map(|i| i.to_string()).collect();
    let all: Vec<String> = words.iter().map(|w| w.to_string()).chain(digits).collect();
    let p = 1.0 / all.len() as f64;
    let vocab: BTreeMap<String, f64> = all.into_iter().map(|w| (w, p)).collect();
    UnigramBackend::new(vocab)
        .unwrap()
        .with_context_weight(0.4)
        .unwrap()
}

#[test]
fn oracle_ranking_matches_brute_force() {
    let lm = toy_lm();
    let t = template();
    let set = candidates(20);
    let test = Example::new("t")
        .with_field("sentence", "text 3 fun")
        .with_label("negative");
    let best = oracle_select(&Scorer::new(&lm, &t), &set, &test, 20).unwrap();

    let mut brute: Vec<(f64, usize)> = set
        .candidates
        .iter()
        .map(|c| {
            let ctx = format!("{}\nReview: text 3 fun Sentiment:", c.demo_text);
            (
                -lm.conditional_logprob(&ctx, " negative").unwrap().total,
                c.retrieval_rank,
            )
        })
        .collect();
    brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let got: Vec<(f64, usize)> = best
        .iter()
        .map(|o| (o.l_t, o.candidate.retrieval_rank))
        .collect();
    assert_eq!(got, brute);
}

#[test]
fn cone_picks_highest_query_likelihood() {
    let lm = toy_lm();
    let t = template();
    let set = candidates(10);
    let test = Example::new("t").with_field("sentence", "text 7 fun");
    let picked = select_cone(&Scorer::new(&lm, &t), &set, &test, 3).unwrap();
    // The demo mentioning "7" primes the query best and sits last.
    assert_eq!(picked.last().unwrap().0.id(), "c07");
    assert!(picked.windows(2).all(|w| w[0].1 >= w[1].1));
}

#[test]
fn dva_touches_exactly_the_needed_entries() {
    let t = template();
    let set = candidates(4);
    let test = Example::new("t").with_field("sentence", "query");
    let validation = &set.candidates[0];
    let mut mock = MockBackend::new();
    let q_t = "Review: query Sentiment:";
    let q_v = "Review: text 0 Sentiment:";
    for (i, d) in set.candidates[1..].iter().enumerate() {
        let ctx = format!("{}\n", d.demo_text);
        mock.insert(format!("{ctx}{q_v}"), " positive", vec![-(i as f64) - 0.5])
            .unwrap();
        mock.insert(ctx.clone(), q_t, vec![-2.0]).unwrap();
        mock.insert(ctx, q_v, vec![-1.0 - i as f64]).unwrap();
    }
    let cfg = SelectionConfig {
        strategy: Method::Dva,
        k: 4,
        n_shot: 2,
        ..SelectionConfig::default()
    };
    let sel = select_dva(&Scorer::new(&mock, &t), &set, &test, &cfg).unwrap();
    assert_eq!(sel.validation.id(), validation.id());
    assert_eq!(mock.touched().len(), 9);
    // L_v = i + 0.5, ε = (-1 - i) - (-2) = 1 - i, score = 0.4 L_v + 0.6 ε = 0.8 - 0.2 i.
    let scores: Vec<f64> = sel.scored.iter().map(|s| s.score).collect();
    for (i, s) in scores.iter().enumerate() {
        assert!((s - (0.8 - 0.2 * i as f64)).abs() < 1e-12);
    }
    let order: Vec<&str> = sel
        .prompt_order()
        .iter()
        .map(|s| s.candidate.id())
        .collect();
    assert_eq!(order, ["c02", "c03"]);
}

#[test]
fn dva_needs_enough_candidates() {
    let t = template();
    let mock = MockBackend::new();
    let cfg = SelectionConfig::default();
    let test = Example::new("t").with_field("sentence", "x");
    assert!(select_dva(&Scorer::new(&mock, &t), &candidates(8), &test, &cfg).is_err());
}
