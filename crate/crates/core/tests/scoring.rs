mod common;

use common::*;
use jmie_core::corpus::{Assertion, AssertionType, ConceptSpan, ConceptType, Document, Relation, RelationType};
use jmie_core::evaluation::{evaluate, score_assertions, score_concepts, score_relations, Counts, Protocol};
use jmie_core::EvalError;

fn doc(id: &str) -> Document {
    Document::new(id, vec![(0..8).map(|i| format!("t{i}")).collect()])
}

fn counts(c: Counts) -> (usize, usize, usize) {
    (c.tp, c.fp, c.fn_)
}

#[test]
fn two_gold_three_pred_one_match() {
    let mut gold = doc("d");
    gold.concepts = vec![
        ConceptSpan::new(0, 0, 1, ConceptType::Problem),
        ConceptSpan::new(0, 4, 4, ConceptType::Test),
    ];
    let mut pred = doc("d");
    pred.concepts = vec![
        ConceptSpan::new(0, 0, 1, ConceptType::Problem),
        ConceptSpan::new(0, 4, 5, ConceptType::Test),
        ConceptSpan::new(0, 7, 7, ConceptType::Treatment),
    ];
    let s = score_concepts(&[gold.clone()], &[pred.clone()]).score();
    assert_eq!(counts(s.counts), (1, 2, 1));
    assert_eq!(s.f1, 0.4);
    let r = evaluate(&[pred], &[gold], Protocol::Joint).unwrap();
    assert_eq!(r.concept.f1, 0.4);
    assert!(r.assertion.undefined && r.relation.undefined);
}

#[test]
fn wrong_assertion_and_wrong_label_cost_fp_and_fn() {
    let p = ConceptSpan::new(0, 2, 2, ConceptType::Problem);
    let t = ConceptSpan::new(0, 0, 0, ConceptType::Treatment);
    let mut gold = doc("d");
    gold.concepts = vec![t, p];
    gold.assertions = vec![Assertion { concept: p, label: AssertionType::Present }];
    gold.relations = vec![Relation { subject: t, label: RelationType::TrAP, object: p }];
    let mut pred = gold.clone();
    pred.assertions[0].label = AssertionType::Absent;
    pred.relations[0].label = RelationType::TrIP;
    assert_eq!(counts(score_assertions(&[gold.clone()], &[pred.clone()])), (0, 1, 1));
    assert_eq!(counts(score_relations(&[gold.clone()], &[pred.clone()])), (0, 1, 1));
    assert_eq!(counts(score_concepts(&[gold.clone()], &[pred])), (2, 0, 0));
    let perfect = evaluate(&[gold.clone()], &[gold], Protocol::Independent).unwrap();
    assert_eq!((perfect.concept.f1, perfect.assertion.f1, perfect.relation.f1), (1.0, 1.0, 1.0));
}

#[test]
fn mismatched_document_ids_are_rejected() {
    let err = evaluate(&[doc("a")], &[doc("b")], Protocol::Joint).unwrap_err();
    assert!(matches!(err, EvalError::CorpusMismatch(_)));
}

#[test]
fn counts_agree_with_set_oracle_on_random_corpora() {
    let mut r = rng(2024);
    for case in 0..100 {
        let gold = random_corpus(&mut r, 1 + case % 4);
        let pred = perturbed(&mut r, &gold);
        let c = score_concepts(&gold, &pred);
        assert_eq!(counts(c), oracle_counts(&concept_items(&gold), &concept_items(&pred)), "case {case}");
        let a = score_assertions(&gold, &pred);
        assert_eq!(counts(a), oracle_counts(&assertion_items(&gold), &assertion_items(&pred)), "case {case}");
        let rel = score_relations(&gold, &pred);
        assert_eq!(counts(rel), oracle_counts(&relation_items(&gold), &relation_items(&pred)), "case {case}");
        // Document order does not matter.
        let mut shuffled = pred.clone();
        shuffled.reverse();
        assert_eq!(evaluate(&shuffled, &gold, Protocol::Joint).unwrap(), evaluate(&pred, &gold, Protocol::Joint).unwrap());
    }
}

#[test]
fn adding_a_true_positive_never_lowers_scores() {
    for tp in 0..5 {
        for fp in 0..5 {
            for fn_ in 0..5 {
                let a = Counts { tp, fp, fn_ }.score();
                let b = Counts { tp: tp + 1, fp, fn_ }.score();
                assert!(b.precision >= a.precision && b.recall >= a.recall && b.f1 >= a.f1);
            }
        }
    }
}
