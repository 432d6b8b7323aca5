mod common;

use common::*;
use fusionrl_core::textmetrics::{
    bleu_corpus, evaluate_pairs, lcs_len, meteor, rouge_l, rouge_n, BleuOptions, EvalOptions, TokenSequence,
};
use proptest::prelude::*;

#[test]
fn random_corpus_matches_oracles() {
    for seed in 0..5 {
        for (name, diff) in metric_oracle_diffs(seed, 50, 20) {
            assert!(diff <= METRIC_TOL, "seed {seed} {name}: diff {diff:e}");
        }
    }
}

#[test]
fn small_vocabulary_exercises_higher_orders() {
    // with 3 words, 4-gram matches are common so BLEU-4 is rarely zero
    let corpus = random_corpus(7, 50, 3);
    assert!(oracle_bleu(&corpus, 4) > 0.0);
    for (name, diff) in metric_oracle_diffs(7, 50, 3) {
        assert!(diff <= METRIC_TOL, "{name}: diff {diff:e}");
    }
}

#[test]
fn worked_examples_reproduce() {
    for (name, got, want) in hand_examples() {
        assert!((got - want).abs() < 1e-12, "{name}: {got} vs {want}");
    }
}

#[test]
fn identical_corpus_scores_one() {
    let corpus: Vec<_> = random_corpus(3, 20, 20)
        .into_iter()
        .map(|(c, _)| (c.clone(), vec![c]))
        .collect();
    let report = evaluate_pairs(&to_pairs(&corpus), EvalOptions::default()).unwrap();
    assert!((report.rouge1 - 1.0).abs() < 1e-12);
    assert!((report.rouge_l - 1.0).abs() < 1e-12);
    // corpus BLEU-4 is 1 once every order has at least one gram
    assert!((report.bleu - 1.0).abs() < 1e-12);
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec((0..6u8).prop_map(|w| format!("w{w}")), 1..=12)
}

fn seq_of(v: &[String]) -> TokenSequence {
    TokenSequence::from_tokens(v.iter().cloned())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lcs_matches_exhaustive_search(a in sentence(), b in sentence()) {
        prop_assert_eq!(lcs_len(&a, &b), oracle_lcs(&a, &b));
        prop_assert_eq!(lcs_len(&a, &b), lcs_len(&b, &a));
    }

    #[test]
    fn scores_are_bounded(c in sentence(), refs in prop::collection::vec(sentence(), 1..3)) {
        let cand = seq_of(&c);
        let rs: Vec<_> = refs.iter().map(|r| seq_of(r)).collect();
        for v in [rouge_n(&cand, &rs, 1), rouge_n(&cand, &rs, 2), rouge_l(&cand, &rs), meteor(&cand, &rs)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let pair = fusionrl_core::textmetrics::CaptionPair::new(cand, rs);
        let b = bleu_corpus(&[pair], BleuOptions::default()).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
    }

    #[test]
    fn adding_a_reference_never_lowers_best_of_scores(c in sentence(), r1 in sentence(), r2 in sentence()) {
        let cand = seq_of(&c);
        let one = vec![seq_of(&r1)];
        let two = vec![seq_of(&r1), seq_of(&r2)];
        prop_assert!(rouge_l(&cand, &two) >= rouge_l(&cand, &one));
        prop_assert!(meteor(&cand, &two) >= meteor(&cand, &one));
        prop_assert!(rouge_n(&cand, &two, 1) >= rouge_n(&cand, &one, 1));
    }

    #[test]
    fn single_pair_oracles_agree(c in sentence(), refs in prop::collection::vec(sentence(), 1..3)) {
        let corpus = vec![(c.clone(), refs.clone())];
        let pairs = to_pairs(&corpus);
        for max_n in 1..=4 {
            let got = bleu_corpus(&pairs, BleuOptions { max_n, smoothing: false }).unwrap();
            prop_assert!((got - oracle_bleu(&corpus, max_n)).abs() <= METRIC_TOL);
        }
        prop_assert!((rouge_l(&pairs[0].candidate, &pairs[0].references) - oracle_rouge_l(&c, &refs)).abs() <= METRIC_TOL);
        prop_assert!((meteor(&pairs[0].candidate, &pairs[0].references) - oracle_meteor(&c, &refs)).abs() <= METRIC_TOL);
    }
}
