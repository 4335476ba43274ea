mod common;

use petgrid_core::metrics::{
    bleu4, bleu4_pair, cider, cider_pairs, meteor_pair, meteor_simple, rouge_l, rouge_l_pair, CiderOptions, EvalPair,
};
use proptest::prelude::*;

#[test]
fn matches_reference_values() {
    let (pairs, exp) = common::metrics_fixture();
    assert_eq!(pairs.len(), 10);
    let o = CiderOptions::default();
    assert!((bleu4(&pairs).unwrap() - exp.bleu4).abs() < 1e-4);
    assert!((rouge_l(&pairs).unwrap() - exp.rouge_l).abs() < 1e-4);
    assert!((meteor_simple(&pairs).unwrap() - exp.meteor).abs() < 1e-4);
    assert!((cider(&pairs, &o).unwrap() - exp.cider).abs() < 1e-4);
    let c = cider_pairs(&pairs, &o).unwrap();
    for (k, (p, e)) in pairs.iter().zip(&exp.per_pair).enumerate() {
        assert!((rouge_l_pair(p) - e.rouge_l).abs() < 1e-9, "rouge pair {k}");
        assert!((meteor_pair(p) - e.meteor).abs() < 1e-9, "meteor pair {k}");
        assert!((c[k] - e.cider).abs() < 1e-9, "cider pair {k}");
    }
}

#[test]
fn identity_corpus_is_perfect() {
    let (pairs, _) = common::metrics_fixture();
    let same: Vec<EvalPair> = pairs
        .iter()
        .map(|p| EvalPair {
            candidate: p.references[0].clone(),
            ..p.clone()
        })
        .collect();
    assert_eq!(bleu4(&same).unwrap(), 1.0);
    assert_eq!(rouge_l(&same).unwrap(), 1.0);
    assert_eq!(meteor_simple(&same).unwrap(), 1.0);
    assert!((cider(&same, &CiderOptions::default()).unwrap() - 1.0).abs() < 1e-12);
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "uptake", "node", "8.4"]), 0..8)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn pair(id: usize, c: Vec<String>, r: Vec<String>) -> EvalPair {
    EvalPair {
        id: id.to_string(),
        candidate: c,
        references: vec![r],
        human_score: None,
    }
}

proptest! {
    #[test]
    fn corpus_scores_ignore_order(raw in prop::collection::vec((words(), words()), 1..8), shift in 0usize..8) {
        let pairs: Vec<EvalPair> = raw.into_iter().enumerate().map(|(i, (c, r))| pair(i, c, r)).collect();
        let mut rotated = pairs.clone();
        rotated.rotate_left(shift % pairs.len());
        rotated.reverse();
        let o = CiderOptions::default();
        prop_assert_eq!(bleu4(&pairs).unwrap(), bleu4(&rotated).unwrap());
        prop_assert!((rouge_l(&pairs).unwrap() - rouge_l(&rotated).unwrap()).abs() < 1e-12);
        prop_assert!((meteor_simple(&pairs).unwrap() - meteor_simple(&rotated).unwrap()).abs() < 1e-12);
        prop_assert!((cider(&pairs, &o).unwrap() - cider(&rotated, &o).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn scores_stay_in_range(c in words(), r in words()) {
        let p = pair(0, c, r);
        for s in [bleu4_pair(&p), rouge_l_pair(&p), meteor_pair(&p)] {
            prop_assert!((0.0..=1.0).contains(&s));
        }
        let ci = cider(std::slice::from_ref(&p), &CiderOptions::default()).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ci));
    }

    #[test]
    fn padding_a_perfect_candidate_never_helps(r in words().prop_filter("nonempty", |v| !v.is_empty()), extra in words()) {
        let perfect = pair(0, r.clone(), r.clone());
        let mut padded = r.clone();
        padded.extend(extra.iter().map(|w| format!("zz{w}")));
        let worse = pair(0, padded, r);
        prop_assert!(bleu4_pair(&worse) <= bleu4_pair(&perfect));
        prop_assert!(rouge_l_pair(&worse) <= rouge_l_pair(&perfect));
        prop_assert!(bleu4(std::slice::from_ref(&worse)).unwrap() <= bleu4(std::slice::from_ref(&perfect)).unwrap());
    }
}
