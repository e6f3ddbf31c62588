//! Synthetic corpora whose annotations are deterministic functions of the
//! surface tokens, so a correct learner can reach near-perfect scores.
//!
//! A sentence is a run of clauses separated by filler words. A clause is a
//! lone concept or a relation template `<subject> <connector> <problem>`.
//! Problems are `[modifier] word` and may be preceded by an assertion cue;
//! treatments and tests may carry a fixed suffix token.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Assertion, AssertionType, ConceptSpan, ConceptType, Document, Relation, RelationType};
use crate::error::CorpusError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTemplate {
    pub connector: String,
    pub label: RelationType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub sentences: usize,
    pub sentences_per_doc: usize,
    pub filler: Vec<String>,
    pub problems: Vec<String>,
    pub problem_modifiers: Vec<String>,
    pub treatments: Vec<String>,
    pub treatment_suffix: String,
    pub tests: Vec<String>,
    pub test_suffix: String,
    pub assertion_cues: Vec<(String, AssertionType)>,
    pub relation_templates: Vec<RelationTemplate>,
    /// Inclusive range of clauses per sentence.
    pub clauses: (usize, usize),
    /// Inclusive range of filler words before each clause and at the end.
    pub filler_gap: (usize, usize),
    pub relation_rate: f64,
    /// Cap on relation clauses per sentence. With several, the relation
    /// head must bind each object to the right subject, which needs far
    /// more than a few hundred sentences to learn.
    pub max_relation_clauses: usize,
    pub cue_rate: f64,
    pub multi_token_rate: f64,
}

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for SynthSpec {
    fn default() -> Self {
        use AssertionType::*;
        use RelationType::*;
        let templates = [
            ("improved", TrIP),
            ("worsened", TrWP),
            ("caused", TrCP),
            ("for", TrAP),
            ("avoided", TrNAP),
            ("revealed", TeRP),
            ("investigating", TeCP),
            ("with", PIP),
        ];
        SynthSpec {
            sentences: 200,
            sentences_per_doc: 5,
            filler: strings(&[
                "the", "patient", "was", "seen", "today", "and", "noted", "on", "exam", "after", "admission",
                "reports", "stable", "overnight", "plan", "continue",
            ]),
            problems: words("pain", 8),
            problem_modifiers: strings(&["acute", "chronic"]),
            treatments: words("rx", 6),
            treatment_suffix: "therapy".into(),
            tests: words("lab", 6),
            test_suffix: "panel".into(),
            assertion_cues: vec![
                ("no".into(), Absent),
                ("possible".into(), Possible),
                ("upon".into(), Conditional),
                ("if".into(), Hypothetical),
                ("family".into(), AssociatedWithSomeoneElse),
            ],
            relation_templates: templates
                .iter()
                .map(|(c, l)| RelationTemplate {
                    connector: c.to_string(),
                    label: *l,
                })
                .collect(),
            clauses: (1, 3),
            filler_gap: (1, 3),
            relation_rate: 0.8,
            max_relation_clauses: 1,
            cue_rate: 0.4,
            multi_token_rate: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_string()));
        if self.sentences == 0 || self.sentences_per_doc == 0 {
            return bad("sentence counts must be positive");
        }
        if self.problems.is_empty() || self.treatments.is_empty() || self.tests.is_empty() {
            return bad("every concept type needs at least one word");
        }
        if self.clauses.0 > self.clauses.1 || self.clauses.1 == 0 || self.filler_gap.0 > self.filler_gap.1 {
            return bad("ranges must be non-empty with min <= max");
        }
        if self.filler_gap.1 > 0 && self.filler.is_empty() {
            return bad("filler gaps need filler words");
        }
        for p in [self.relation_rate, self.cue_rate, self.multi_token_rate] {
            if !(0.0..=1.0).contains(&p) {
                return bad("rates must lie in [0, 1]");
            }
        }
        // each surface word may play exactly one role
        let mut seen = HashSet::new();
        let all = self
            .filler
            .iter()
            .chain(&self.problems)
            .chain(&self.problem_modifiers)
            .chain(&self.treatments)
            .chain(&self.tests)
            .chain(self.assertion_cues.iter().map(|(c, _)| c))
            .chain(self.relation_templates.iter().map(|t| &t.connector))
            .chain([&self.treatment_suffix, &self.test_suffix]);
        for w in all {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return bad("words must be non-empty and contain no whitespace");
            }
            if !seen.insert(w.as_str()) {
                return Err(CorpusError::InvalidSpec(format!("word `{w}` has more than one role")));
            }
        }
        Ok(())
    }
}

struct SentenceBuilder<'a> {
    spec: &'a SynthSpec,
    sent: usize,
    tokens: Vec<String>,
    concepts: Vec<ConceptSpan>,
    assertions: Vec<Assertion>,
    relations: Vec<Relation>,
}

impl SentenceBuilder<'_> {
    fn push(&mut self, w: &str) {
        self.tokens.push(w.to_string());
    }

    fn filler(&mut self, rng: &mut ChaCha8Rng) {
        let n = rng.gen_range(self.spec.filler_gap.0..=self.spec.filler_gap.1);
        for _ in 0..n {
            let w = self.spec.filler.choose(rng).expect("validated").clone();
            self.push(&w);
        }
    }

    fn concept(&mut self, rng: &mut ChaCha8Rng, ctype: ConceptType) -> ConceptSpan {
        let spec = self.spec;
        let multi = rng.gen_bool(spec.multi_token_rate);
        let mut assertion = AssertionType::Present;
        if ctype == ConceptType::Problem && !spec.assertion_cues.is_empty() && rng.gen_bool(spec.cue_rate) {
            let (cue, label) = spec.assertion_cues.choose(rng).expect("non-empty").clone();
            self.push(&cue);
            assertion = label;
        }
        let start = self.tokens.len();
        match ctype {
            ConceptType::Problem => {
                if multi && !spec.problem_modifiers.is_empty() {
                    let m = spec.problem_modifiers.choose(rng).expect("non-empty").clone();
                    self.push(&m);
                }
                let w = spec.problems.choose(rng).expect("validated").clone();
                self.push(&w);
            }
            ConceptType::Treatment | ConceptType::Test => {
                let (pool, suffix) = if ctype == ConceptType::Treatment {
                    (&spec.treatments, &spec.treatment_suffix)
                } else {
                    (&spec.tests, &spec.test_suffix)
                };
                let w = pool.choose(rng).expect("validated").clone();
                self.push(&w);
                if multi {
                    self.push(suffix);
                }
            }
        }
        let span = ConceptSpan::new(self.sent, start, self.tokens.len() - 1, ctype);
        self.concepts.push(span);
        if ctype == ConceptType::Problem {
            self.assertions.push(Assertion {
                concept: span,
                label: assertion,
            });
        }
        span
    }
}

/// Generate a corpus from `spec`; identical `(spec, seed)` give identical
/// documents.
pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64) -> Result<Vec<Document>, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_docs = spec.sentences.div_ceil(spec.sentences_per_doc);
    let mut docs = Vec::with_capacity(n_docs);
    let mut remaining = spec.sentences;
    for d in 0..n_docs {
        let mut doc = Document::new(format!("synth{d:04}"), Vec::new());
        for sent in 0..spec.sentences_per_doc.min(remaining) {
            let mut b = SentenceBuilder {
                spec,
                sent,
                tokens: Vec::new(),
                concepts: Vec::new(),
                assertions: Vec::new(),
                relations: Vec::new(),
            };
            let clauses = rng.gen_range(spec.clauses.0..=spec.clauses.1);
            for _ in 0..clauses {
                b.filler(&mut rng);
                let room = b.relations.len() < spec.max_relation_clauses;
                if room && !spec.relation_templates.is_empty() && rng.gen_bool(spec.relation_rate) {
                    let t = spec.relation_templates.choose(&mut rng).expect("non-empty").clone();
                    let (subj_type, _) = t.label.category();
                    let subject = b.concept(&mut rng, subj_type);
                    b.push(&t.connector);
                    let object = b.concept(&mut rng, ConceptType::Problem);
                    b.relations.push(Relation {
                        subject,
                        label: t.label,
                        object,
                    });
                } else {
                    let ctype = *ConceptType::ALL.choose(&mut rng).expect("non-empty");
                    b.concept(&mut rng, ctype);
                }
            }
            b.filler(&mut rng);
            if b.tokens.is_empty() {
                let w = spec.problems[0].clone();
                b.push(&w);
            }
            doc.sentences.push(b.tokens);
            doc.concepts.extend(b.concepts);
            doc.assertions.extend(b.assertions);
            doc.relations.extend(b.relations);
        }
        remaining -= doc.sentences.len();
        doc.normalize();
        docs.push(doc);
    }
    Ok(docs)
}

/// Relabel each concept with probability `rate` to a different random type.
/// Assertions and relations are repaired so the document invariants hold:
/// new problems are asserted `present`, demoted problems lose their
/// assertion, and relations whose label no longer fits are dropped.
pub fn inject_concept_noise(docs: &[Document], rate: f64, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    docs.iter()
        .map(|doc| {
            let mut remap = BTreeMap::new();
            let concepts: Vec<ConceptSpan> = doc
                .concepts
                .iter()
                .map(|c| {
                    let mut n = *c;
                    if rng.gen_bool(rate) {
                        let others: Vec<ConceptType> =
                            ConceptType::ALL.iter().copied().filter(|t| *t != c.ctype).collect();
                        n.ctype = *others.choose(&mut rng).expect("two other types");
                    }
                    remap.insert(*c, n);
                    n
                })
                .collect();
            let assertions = concepts
                .iter()
                .filter(|c| c.ctype == ConceptType::Problem)
                .map(|c| {
                    let old = doc
                        .assertions
                        .iter()
                        .find(|a| a.concept.same_extent(c))
                        .map(|a| a.label);
                    Assertion {
                        concept: *c,
                        label: old.unwrap_or(AssertionType::Present),
                    }
                })
                .collect();
            let relations = doc
                .relations
                .iter()
                .filter_map(|r| {
                    let subject = remap[&r.subject];
                    let object = remap[&r.object];
                    r.label.admits(subject.ctype, object.ctype).then_some(Relation {
                        subject,
                        label: r.label,
                        object,
                    })
                })
                .collect();
            let mut out = Document {
                id: doc.id.clone(),
                sentences: doc.sentences.clone(),
                concepts,
                assertions,
                relations,
            };
            out.normalize();
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_corpus_satisfies_invariants() {
        let docs = generate_synthetic_corpus(&SynthSpec::default(), 7).unwrap();
        assert_eq!(docs.iter().map(|d| d.sentences.len()).sum::<usize>(), 200);
        let mut n_rel = 0;
        for d in &docs {
            d.validate(true).unwrap();
            for r in &d.relations {
                n_rel += 1;
                assert_eq!(r.object.ctype, ConceptType::Problem);
                assert!(r.label.admits(r.subject.ctype, r.object.ctype));
                assert_eq!(r.subject.sent, r.object.sent);
            }
        }
        assert!(n_rel > 50);
    }

    #[test]
    fn zero_templates_gives_zero_relations() {
        let spec = SynthSpec {
            relation_templates: vec![],
            ..Default::default()
        };
        let docs = generate_synthetic_corpus(&spec, 1).unwrap();
        assert!(docs.iter().all(|d| d.relations.is_empty()));
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_corpus(&SynthSpec::default(), 3).unwrap();
        let b = generate_synthetic_corpus(&SynthSpec::default(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&SynthSpec::default(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs() {
        let spec = SynthSpec {
            problems: vec![],
            ..Default::default()
        };
        assert!(matches!(generate_synthetic_corpus(&spec, 0), Err(CorpusError::InvalidSpec(_))));
        let mut spec = SynthSpec::default();
        spec.filler.push("pain0".into());
        assert!(matches!(generate_synthetic_corpus(&spec, 0), Err(CorpusError::InvalidSpec(_))));
    }

    #[test]
    fn noise_keeps_invariants() {
        let docs = generate_synthetic_corpus(&SynthSpec::default(), 7).unwrap();
        let noisy = inject_concept_noise(&docs, 0.15, 1);
        let mut changed = 0;
        let mut total = 0;
        for (d, n) in docs.iter().zip(&noisy) {
            n.validate(true).unwrap();
            total += d.concepts.len();
            changed += d.concepts.iter().zip(&n.concepts).filter(|(a, b)| a.ctype != b.ctype).count();
        }
        let frac = changed as f64 / total as f64;
        assert!((0.08..0.22).contains(&frac), "{frac}");
        assert_eq!(inject_concept_noise(&docs, 0.0, 1), docs);
    }
}
