//! Micro-averaged precision, recall and F1 for the three stages.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{AssertionType, ConceptType, Document, RelationType};
use crate::error::EvalError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    /// Counts from a gold and a predicted set.
    pub fn from_sets<T: Ord>(gold: &BTreeSet<T>, pred: &BTreeSet<T>) -> Counts {
        let tp = gold.intersection(pred).count();
        Counts {
            tp,
            fp: pred.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    pub fn score(self) -> StageScore {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        // Same as 2PR / (P + R), with a single rounding.
        let f1 = ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_);
        StageScore {
            counts: self,
            precision,
            recall,
            f1,
            undefined: self.tp + self.fp + self.fn_ == 0,
        }
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageScore {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Nothing to score: no gold and no predicted items. F1 is reported as 0.
    pub undefined: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Each stage consumes the previous stage's predictions.
    #[default]
    Joint,
    /// Each stage consumes reference inputs.
    Independent,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Joint => "joint",
            Protocol::Independent => "independent",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Protocol::Joint),
            "independent" => Ok(Protocol::Independent),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub concept: StageScore,
    pub assertion: StageScore,
    pub relation: StageScore,
}

impl EvalReport {
    pub fn mean_f1(&self) -> f64 {
        (self.concept.f1 + self.assertion.f1 + self.relation.f1) / 3.0
    }

    pub fn stages(&self) -> [(&'static str, &StageScore); 3] {
        [
            ("Concept", &self.concept),
            ("Assertion", &self.assertion),
            ("Relation", &self.relation),
        ]
    }

    /// Aligned plain-text table, percentages to one decimal.
    pub fn table(&self) -> String {
        let mut out = format!("protocol: {}\n", self.protocol);
        out.push_str(&format!(
            "{:<10} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
            "stage", "P", "R", "F1", "TP", "FP", "FN"
        ));
        for (name, s) in self.stages() {
            out.push_str(&format!(
                "{:<10} {:>6.1} {:>6.1} {:>6.1} {:>6} {:>6} {:>6}{}\n",
                name,
                100.0 * s.precision,
                100.0 * s.recall,
                100.0 * s.f1,
                s.counts.tp,
                s.counts.fp,
                s.counts.fn_,
                if s.undefined { "  (undefined)" } else { "" }
            ));
        }
        out
    }
}

/// Signed F1 differences `a - b` per stage in points, e.g. `+3.1`.
pub fn compare(a: &EvalReport, b: &EvalReport) -> String {
    let mut out = String::new();
    for ((name, x), (_, y)) in a.stages().into_iter().zip(b.stages()) {
        out.push_str(&format!("{:<10} {:+.1}\n", name, 100.0 * (x.f1 - y.f1)));
    }
    out
}

type ConceptKey = (String, usize, usize, usize, ConceptType);
type AssertionKey = (String, usize, usize, usize, ConceptType, AssertionType);
type RelationKey = (String, usize, usize, usize, RelationType, usize, usize);

fn concept_set(docs: &[Document]) -> BTreeSet<ConceptKey> {
    docs.iter()
        .flat_map(|d| d.concepts.iter().map(move |c| (d.id.clone(), c.sent, c.start, c.end, c.ctype)))
        .collect()
}

fn assertion_set(docs: &[Document]) -> BTreeSet<AssertionKey> {
    docs.iter()
        .flat_map(|d| {
            d.assertions.iter().map(move |a| {
                let c = a.concept;
                (d.id.clone(), c.sent, c.start, c.end, c.ctype, a.label)
            })
        })
        .collect()
}

/// Relations match on both spans' boundaries and the label; direction
/// follows the subject/object order.
fn relation_set(docs: &[Document]) -> BTreeSet<RelationKey> {
    docs.iter()
        .flat_map(|d| {
            d.relations.iter().map(move |r| {
                (
                    d.id.clone(),
                    r.subject.sent,
                    r.subject.start,
                    r.subject.end,
                    r.label,
                    r.object.start,
                    r.object.end,
                )
            })
        })
        .collect()
}

pub fn score_concepts(gold: &[Document], pred: &[Document]) -> Counts {
    Counts::from_sets(&concept_set(gold), &concept_set(pred))
}

pub fn score_assertions(gold: &[Document], pred: &[Document]) -> Counts {
    Counts::from_sets(&assertion_set(gold), &assertion_set(pred))
}

pub fn score_relations(gold: &[Document], pred: &[Document]) -> Counts {
    Counts::from_sets(&relation_set(gold), &relation_set(pred))
}

fn ids(docs: &[Document]) -> BTreeSet<&str> {
    docs.iter().map(|d| d.id.as_str()).collect()
}

/// Score `pred` against `gold`; both must cover the same document ids.
pub fn evaluate(pred: &[Document], gold: &[Document], protocol: Protocol) -> Result<EvalReport, EvalError> {
    let (g, p) = (ids(gold), ids(pred));
    if g != p {
        let missing: Vec<_> = g.difference(&p).take(3).collect();
        let extra: Vec<_> = p.difference(&g).take(3).collect();
        return Err(EvalError::CorpusMismatch(format!(
            "missing predictions for {missing:?}, unexpected documents {extra:?}"
        )));
    }
    if g.len() != gold.len() || p.len() != pred.len() {
        return Err(EvalError::CorpusMismatch("duplicate document ids".into()));
    }
    let texts: HashMap<&str, &Vec<Vec<String>>> = gold.iter().map(|d| (d.id.as_str(), &d.sentences)).collect();
    if let Some(d) = pred.iter().find(|d| texts[d.id.as_str()] != &d.sentences) {
        return Err(EvalError::CorpusMismatch(format!("document `{}` has different text", d.id)));
    }
    Ok(EvalReport {
        protocol,
        concept: score_concepts(gold, pred).score(),
        assertion: score_assertions(gold, pred).score(),
        relation: score_relations(gold, pred).score(),
    })
}

/// Per-stage arithmetic mean of several reports.
pub fn average_reports(reports: &[EvalReport]) -> Option<EvalReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let mean = |f: fn(&EvalReport) -> &StageScore| {
        let mut s = StageScore::default();
        for r in reports {
            let x = f(r);
            s.counts = s.counts + x.counts;
            s.precision += x.precision / n;
            s.recall += x.recall / n;
            s.f1 += x.f1 / n;
            s.undefined |= x.undefined;
        }
        s
    };
    Some(EvalReport {
        protocol: first.protocol,
        concept: mean(|r| &r.concept),
        assertion: mean(|r| &r.assertion),
        relation: mean(|r| &r.relation),
    })
}
