mod common;

use common::oracle_bleu;
use doss_core::eval::corpus_bleu;
use proptest::prelude::*;

#[test]
fn identical_corpus_scores_100() {
    let h = vec![vec![5, 6, 7, 8, 9], vec![4, 4], vec![10, 11, 12, 13, 14, 15, 16]];
    assert!((corpus_bleu(&h, &h, 4).unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn hand_example_matches_oracle() {
    // "the cat sat on the mat" style example with ids.
    let refs = vec![vec![4, 5, 6, 7, 4, 8], vec![9, 10, 11]];
    let hyps = vec![vec![4, 5, 7, 4, 8], vec![9, 11]];
    let got = corpus_bleu(&hyps, &refs, 4).unwrap();
    let want = oracle_bleu(&hyps, &refs);
    // By hand: c = 7, r = 9; p1 = 7/7, p2 = (3+1)/(5+1), p3 = (1+1)/(3+1),
    // p4 = (0+1)/(2+1).
    let hand = 100.0 * (1.0 - 9.0 / 7.0f64).exp() * (1.0 * (4.0 / 6.0) * 0.5 * (1.0 / 3.0f64)).powf(0.25);
    assert!((want - hand).abs() < 1e-9, "oracle {want} vs hand {hand}");
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

proptest! {
    #[test]
    fn random_corpora_match_oracle(
        pairs in proptest::collection::vec(
            (proptest::collection::vec(4usize..9, 0..10), proptest::collection::vec(4usize..9, 1..10)),
            1..8,
        )
    ) {
        let hyps: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
        let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
        let got = corpus_bleu(&hyps, &refs, 4).unwrap();
        prop_assert!((got - oracle_bleu(&hyps, &refs)).abs() < 1e-9);
    }
}
