//! Brute-force oracles and small fixtures shared by the integration tests.
#![allow(dead_code)]

use jmie_autodiff::gradcheck::{check_gradients, GradCheckReport};
use jmie_autodiff::{AutodiffError, Graph, ParamStore, Tensor};
use jmie_core::corpus::{
    Assertion, AssertionType, ConceptSpan, ConceptType, Document, Relation, RelationType,
};
use jmie_core::decoders::{
    log_partition, CrfScores, CrfVars, Feed, JointConfig, JointModel, RelationMode, SentenceLabels, WordInit,
};
use jmie_core::encoder::{EncoderConfig, EncoderMode, SentenceRef};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub struct CrfInstance {
    pub emissions: Tensor,
    pub scores: CrfScores,
}

pub fn crf_instance(rng: &mut impl Rng, n: usize, t: usize) -> CrfInstance {
    let emissions = uniform(rng, n, t);
    let transitions = uniform(rng, t, t);
    let start = uniform(rng, 1, t).into_data();
    let stop = uniform(rng, 1, t).into_data();
    CrfInstance {
        emissions,
        scores: CrfScores {
            transitions,
            start,
            stop,
        },
    }
}

/// Every tag sequence of length `n` over `t` tags, in lexicographic order.
pub fn all_sequences(n: usize, t: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..t).map(move |j| {
                    let mut q = p.clone();
                    q.push(j);
                    q
                })
            })
            .collect();
    }
    out
}

/// `(log Z, max score)` by enumeration, summing in a stable way.
pub fn enumerate(inst: &CrfInstance) -> (f64, f64) {
    let (n, t) = (inst.emissions.rows(), inst.emissions.cols());
    let scores: Vec<f64> = all_sequences(n, t).iter().map(|s| inst.scores.score(&inst.emissions, s)).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    (z, max)
}

/// The forward-algorithm partition on a fresh tape.
pub fn forward_log_partition(inst: &CrfInstance) -> f64 {
    let t = inst.emissions.cols();
    let mut g = Graph::new();
    let em = g.input(inst.emissions.clone());
    let vars = CrfVars {
        transitions: g.input(inst.scores.transitions.clone()),
        start: g.input(Tensor::matrix(1, t, inst.scores.start.clone()).unwrap()),
        stop: g.input(Tensor::matrix(1, t, inst.scores.stop.clone()).unwrap()),
    };
    let z = log_partition(&mut g, em, &vars).unwrap();
    g.value(z).item()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Micro counts by nested loops over deduplicated lists, independent of the
/// set-based scorer.
pub fn oracle_counts<T: PartialEq + Clone>(gold: &[T], pred: &[T]) -> (usize, usize, usize) {
    let dedup = |xs: &[T]| {
        let mut out: Vec<T> = Vec::new();
        for x in xs {
            if !out.contains(x) {
                out.push(x.clone());
            }
        }
        out
    };
    let (g, p) = (dedup(gold), dedup(pred));
    let tp = p.iter().filter(|x| g.contains(x)).count();
    (tp, p.len() - tp, g.len() - tp)
}

pub fn concept_items(docs: &[Document]) -> Vec<(String, usize, usize, usize, ConceptType)> {
    docs.iter()
        .flat_map(|d| d.concepts.iter().map(move |c| (d.id.clone(), c.sent, c.start, c.end, c.ctype)))
        .collect()
}

pub fn assertion_items(docs: &[Document]) -> Vec<(String, ConceptSpan, AssertionType)> {
    docs.iter()
        .flat_map(|d| d.assertions.iter().map(move |a| (d.id.clone(), a.concept, a.label)))
        .collect()
}

pub fn relation_items(docs: &[Document]) -> Vec<(String, usize, usize, usize, RelationType, usize, usize)> {
    docs.iter()
        .flat_map(|d| {
            d.relations.iter().map(move |r| {
                (d.id.clone(), r.subject.sent, r.subject.start, r.subject.end, r.label, r.object.start, r.object.end)
            })
        })
        .collect()
}

/// A small random annotated document over a tiny span inventory, so that
/// gold and predictions overlap often.
pub fn random_document(rng: &mut impl Rng, id: &str) -> Document {
    let sentences: Vec<Vec<String>> = (0..rng.gen_range(1..3))
        .map(|_| (0..6).map(|i| format!("w{i}")).collect())
        .collect();
    let mut doc = Document::new(id, sentences);
    let slots = [(0, 0), (1, 2), (3, 3), (4, 5)];
    for s in 0..doc.sentences.len() {
        for &(a, b) in &slots {
            if rng.gen_bool(0.6) {
                let ctype = *ConceptType::ALL.choose(rng).unwrap();
                doc.concepts.push(ConceptSpan::new(s, a, b, ctype));
            }
        }
    }
    for c in doc.concepts.clone() {
        if c.ctype == ConceptType::Problem {
            let label = AssertionType::from_index(rng.gen_range(0..2)).unwrap();
            doc.assertions.push(Assertion { concept: c, label });
        }
    }
    let concepts = doc.concepts.clone();
    for x in &concepts {
        for y in &concepts {
            if x.sent != y.sent || x == y || !rng.gen_bool(0.3) {
                continue;
            }
            let fits: Vec<RelationType> = RelationType::ALL.iter().copied().filter(|l| l.admits(x.ctype, y.ctype)).collect();
            if let Some(&label) = fits.choose(rng) {
                doc.relations.push(Relation {
                    subject: *x,
                    label,
                    object: *y,
                });
            }
        }
    }
    doc
}

pub fn random_corpus(rng: &mut impl Rng, docs: usize) -> Vec<Document> {
    (0..docs).map(|i| random_document(rng, &format!("doc{i}"))).collect()
}

/// Same documents with independently drawn annotations, keeping the text.
pub fn perturbed(rng: &mut impl Rng, gold: &[Document]) -> Vec<Document> {
    gold.iter()
        .map(|d| {
            let mut p = random_document(rng, &d.id);
            p.sentences = d.sentences.clone();
            let n = d.sentences.len();
            p.concepts.retain(|c| c.sent < n);
            p.assertions.retain(|a| a.concept.sent < n);
            p.relations.retain(|r| r.subject.sent < n);
            if rng.gen_bool(0.5) {
                // Duplicate predictions must not count twice.
                p.concepts.extend(p.concepts.clone());
                p.relations.extend(p.relations.clone());
            }
            p
        })
        .collect()
}

/// A store holding one parameter per tensor, for gradient checks.
pub fn store_with(params: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in params {
        s.add(*name, t.clone()).unwrap();
    }
    s
}

/// Small dimensions so finite differences over every parameter stay cheap.
pub fn tiny_config() -> JointConfig {
    JointConfig {
        encoder: EncoderConfig {
            mode: EncoderMode::TrainableLstm,
            word_dim: 3,
            hidden: 2,
            dropout: 0.0,
            freeze_embeddings: false,
        },
        concept_dim: 2,
        assertion_dim: 2,
        relation_hidden: 3,
        relation_mode: RelationMode::Softmax,
        constrain_bio: true,
    }
}

/// "pain after aspirin": a problem, a treatment and one relation.
pub fn toy_document() -> Document {
    let mut doc = Document::new("toy", vec![vec!["pain".into(), "after".into(), "aspirin".into()]]);
    let pain = ConceptSpan::new(0, 0, 0, ConceptType::Problem);
    let aspirin = ConceptSpan::new(0, 2, 2, ConceptType::Treatment);
    doc.concepts = vec![pain, aspirin];
    doc.assertions = vec![Assertion {
        concept: pain,
        label: AssertionType::Absent,
    }];
    doc.relations = vec![Relation {
        subject: aspirin,
        label: RelationType::TrIP,
        object: pain,
    }];
    doc
}

pub fn tiny_joint(seed: u64, words: Vec<String>) -> (JointModel, ParamStore) {
    let mut store = ParamStore::new();
    let model = JointModel::new(&mut store, tiny_config(), WordInit::Random(words), None, &mut rng(seed)).unwrap();
    (model, store)
}

/// Finite-difference check of the full joint loss on the toy sentence,
/// under teacher forcing and without dropout.
pub fn joint_loss_gradcheck(seed: u64) -> GradCheckReport {
    let doc = toy_document();
    let (model, mut store) = tiny_joint(seed, doc.sentences[0].clone());
    let labels = vec![SentenceLabels::from_document(&doc, 0).unwrap()];
    let batch = [SentenceRef {
        doc_id: &doc.id,
        sent: 0,
        tokens: &doc.sentences[0],
    }];
    check_gradients(&mut store, 1e-5, None, |g, s| {
        let out = model
            .forward(g, s, &batch, Some(&labels), Feed::TEACHER_FORCING, false, 0, 0)
            .map_err(|e| AutodiffError::ShapeMismatch(e.to_string()))?;
        Ok(out.loss.unwrap().total)
    })
    .unwrap()
}
