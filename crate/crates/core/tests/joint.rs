mod common;

use common::*;
use jmie_autodiff::gradcheck::check_gradients;
use jmie_autodiff::{Axis, Graph, ParamStore, Tensor};
use jmie_core::corpus::{ConceptSpan, ConceptType, Document, RelationType};
use jmie_core::decoders::{
    softmax_mask, AssertionHead, Feed, RelationHead, RelationMode, SentenceLabels, TokenRelation, WordInit,
    NUM_ASSERTIONS, NUM_RELATION_LABELS,
};
use jmie_core::encoder::SentenceRef;
use jmie_core::pipeline::GoldInjection;
use jmie_core::trainer::{Arch, Resources, TrainConfig, TrainedModel};

fn sentence(doc: &Document) -> [SentenceRef<'_>; 1] {
    [SentenceRef {
        doc_id: &doc.id,
        sent: 0,
        tokens: &doc.sentences[0],
    }]
}

#[test]
fn zero_relation_params_give_uniform_selection() {
    let doc = toy_document();
    let (model, mut store) = tiny_joint(3, doc.sentences[0].clone());
    for id in [model.relation.u, model.relation.v, model.relation.labels] {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(shape[0], shape[1])).unwrap();
    }
    let labels = vec![SentenceLabels::from_document(&doc, 0).unwrap()];
    let mut g = Graph::new();
    let out = model
        .forward(&mut g, &store, &sentence(&doc), Some(&labels), Feed::TEACHER_FORCING, false, 0, 0)
        .unwrap();
    let n = 3;
    // Every real label at every j, plus nolink at j = i only.
    let support = n * (NUM_RELATION_LABELS - 1) + 1;
    assert_eq!(support, 25);

    let scores = g.input(out.sentences[0].relation_scores.clone());
    let mask = softmax_mask(n);
    let p = g.softmax(scores, Axis::Cols, Some(&mask)).unwrap();
    let p = g.value(p);
    for i in 0..n {
        for c in 0..n * NUM_RELATION_LABELS {
            let want = if mask[i * n * NUM_RELATION_LABELS + c] { 1.0 / support as f64 } else { 0.0 };
            assert!((p.get(i, c) - want).abs() < 1e-15, "row {i} cell {c}");
        }
    }
    let loss = out.loss.unwrap().values(&g);
    assert!((loss.relation - (support as f64).ln()).abs() < 1e-12);
}

#[test]
fn assertion_logits_match_matrix_product() {
    let mut r = rng(11);
    let (d, c) = (4, 2);
    let mut store = ParamStore::new();
    let head = AssertionHead::new(&mut store, "a", d + c, &mut r).unwrap();
    store.set_value(head.bias, uniform(&mut r, 1, NUM_ASSERTIONS)).unwrap();
    let x = uniform(&mut r, 5, d);
    let ce = uniform(&mut r, 2, c);
    let heads = [1, 4];

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let cv = g.input(ce.clone());
    let logits = head.logits(&mut g, &store, xv, &heads, cv).unwrap();
    let got = g.value(logits).clone();

    let w = store.value(head.weights);
    let b = store.value(head.bias);
    for (row, &h) in heads.iter().enumerate() {
        let input: Vec<f64> = x.row(h).iter().chain(ce.row(row)).copied().collect();
        for label in 0..NUM_ASSERTIONS {
            let want = b.get(0, label) + input.iter().enumerate().map(|(k, v)| v * w.get(k, label)).sum::<f64>();
            assert!((got.get(row, label) - want).abs() < 1e-10);
        }
    }
}

#[test]
fn relation_loss_gradients() {
    for mode in [RelationMode::Softmax, RelationMode::Sigmoid] {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let head = RelationHead::new(&mut store, "rel", 4, 3, mode, &mut r).unwrap();
        let f = store.add("features", uniform(&mut r, 3, 4)).unwrap();
        let gold = [
            TokenRelation {
                subject: 2,
                label: RelationType::TrIP,
                object: 0,
            },
            TokenRelation {
                subject: 0,
                label: RelationType::PIP,
                object: 1,
            },
        ];
        let report = check_gradients(&mut store, 1e-5, None, |g, s| {
            let fv = g.param(s, f);
            let (uf, vf) = head.project(g, s, fv).map_err(|e| jmie_autodiff::AutodiffError::ShapeMismatch(e.to_string()))?;
            let scores = head.scores(g, s, uf, vf).map_err(|e| jmie_autodiff::AutodiffError::ShapeMismatch(e.to_string()))?;
            head.loss(g, scores, 3, &gold)
                .map_err(|e| jmie_autodiff::AutodiffError::ShapeMismatch(e.to_string()))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{mode}: {:?}", report.worst);
    }
}

#[test]
fn joint_loss_gradients() {
    for seed in 0..3 {
        let report = joint_loss_gradcheck(seed);
        assert!(report.checked > 100);
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {:?}", report.worst);
    }
}

#[test]
fn loss_is_additive_and_assertion_free_without_annotations() {
    let annotated = toy_document();
    let bare = annotated.unannotated();
    let (model, store) = tiny_joint(9, annotated.sentences[0].clone());
    for doc in [&annotated, &bare] {
        let labels = vec![SentenceLabels::from_document(doc, 0).unwrap()];
        let mut g = Graph::new();
        let out = model
            .forward(&mut g, &store, &sentence(doc), Some(&labels), Feed::TEACHER_FORCING, false, 0, 0)
            .unwrap();
        let v = out.loss.unwrap().values(&g);
        assert_eq!(v.total.to_bits(), (v.concept + v.assertion + v.relation).to_bits());
        assert!(v.concept > 0.0 && v.relation > 0.0);
        if doc.concepts.is_empty() {
            assert_eq!(v.assertion, 0.0);
        } else {
            assert!(v.assertion > 0.0);
        }
    }
}

#[test]
fn single_token_concept_loss_with_flat_scores_is_log_seven() {
    let doc = Document::new("one", vec![vec!["pain".into()]]);
    let (model, mut store) = tiny_joint(2, doc.sentences[0].clone());
    let crf: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("concept.crf")).collect();
    assert!(!crf.is_empty());
    for id in crf {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(shape[0], shape[1])).unwrap();
    }
    let labels = vec![SentenceLabels::from_document(&doc, 0).unwrap()];
    let mut g = Graph::new();
    let out = model
        .forward(&mut g, &store, &sentence(&doc), Some(&labels), Feed::TEACHER_FORCING, false, 0, 0)
        .unwrap();
    let v = out.loss.unwrap().values(&g);
    assert!((v.concept - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn joint_and_pipeline_concept_models_start_identical() {
    let words = toy_document().sentences[0].clone();
    let mut config = TrainConfig {
        seed: 42,
        ..TrainConfig::default()
    };
    config.model = tiny_config();
    let joint = TrainedModel::init(&config, WordInit::Random(words.clone()), &Resources::default()).unwrap();
    config.arch = Arch::Pipeline;
    let pipe = TrainedModel::init(&config, WordInit::Random(words), &Resources::default()).unwrap();
    let (TrainedModel::Joint { store: js, .. }, TrainedModel::Pipeline(p)) = (joint, pipe) else {
        unreachable!()
    };
    let mut compared = 0;
    for (name, value) in p.concept_store.named_values() {
        let id = js.id(name).unwrap();
        assert_eq!(js.value(id), value, "{name}");
        compared += 1;
    }
    assert_eq!(compared, p.concept_store.len());
    assert!(compared >= 5);
}

#[test]
fn gold_injection_passes_reference_labels_through() {
    let doc = toy_document();
    let mut config = TrainConfig {
        model: tiny_config(),
        ..TrainConfig::default()
    };
    for arch in [Arch::Joint, Arch::Pipeline] {
        config.arch = arch;
        let model = TrainedModel::init(&config, WordInit::Random(doc.sentences[0].clone()), &Resources::default()).unwrap();
        let docs = [doc.clone()];

        let pred = model.predict(&docs, GoldInjection::Concept, |_, _, _| {}).unwrap();
        assert_eq!(pred[0].concepts, doc.concepts, "{arch}");

        let pred = model.predict(&docs, GoldInjection::Assertion, |_, _, _| {}).unwrap();
        assert_eq!(pred[0].concepts, doc.concepts, "{arch}");
        assert_eq!(pred[0].assertions, doc.assertions, "{arch}");
        for r in &pred[0].relations {
            assert!(r.label.admits(r.subject.ctype, r.object.ctype));
        }
    }
}

#[test]
fn decoded_relations_respect_categories() {
    let doc = toy_document();
    let (model, store) = tiny_joint(4, doc.sentences[0].clone());
    let labels = vec![SentenceLabels::from_document(&doc, 0).unwrap()];
    let mut g = Graph::new();
    let out = model
        .forward(&mut g, &store, &sentence(&doc), Some(&labels), Feed::TEACHER_FORCING, false, 0, 0)
        .unwrap();
    let s = &out.sentences[0];
    assert_eq!(s.relation_scores.shape(), &[3, 3 * NUM_RELATION_LABELS]);
    let problem = ConceptSpan::new(0, 0, 0, ConceptType::Problem);
    assert!(s.concepts.contains(&problem));
    for r in &s.relations {
        assert!(r.label.admits(r.subject.ctype, r.object.ctype));
        assert_ne!(r.subject, r.object);
    }
}
