//! Annotated clinical reports: data model, i2b2-style file I/O, BIO
//! conversion, dataset splitting and synthetic corpus generation.

mod annotations;
mod bio;
mod split;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CorpusError;

pub use annotations::{load_corpus, parse_document, serialize_document, write_corpus, AnnotationFiles};
pub use bio::{bio_to_spans, spans_to_bio, Tag, TagSequence, NUM_TAGS};
pub use split::split_train_dev;
pub use synth::{generate_synthetic_corpus, inject_concept_noise, RelationTemplate, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConceptType {
    Problem,
    Treatment,
    Test,
}

impl ConceptType {
    pub const ALL: [ConceptType; 3] = [ConceptType::Problem, ConceptType::Treatment, ConceptType::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            ConceptType::Problem => "problem",
            ConceptType::Treatment => "treatment",
            ConceptType::Test => "test",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AssertionType {
    Present,
    Absent,
    Possible,
    Conditional,
    Hypothetical,
    AssociatedWithSomeoneElse,
}

impl AssertionType {
    pub const ALL: [AssertionType; 6] = [
        AssertionType::Present,
        AssertionType::Absent,
        AssertionType::Possible,
        AssertionType::Conditional,
        AssertionType::Hypothetical,
        AssertionType::AssociatedWithSomeoneElse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AssertionType::Present => "present",
            AssertionType::Absent => "absent",
            AssertionType::Possible => "possible",
            AssertionType::Conditional => "conditional",
            AssertionType::Hypothetical => "hypothetical",
            AssertionType::AssociatedWithSomeoneElse => "associated_with_someone_else",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationType {
    TrIP,
    TrWP,
    TrCP,
    TrAP,
    TrNAP,
    TeRP,
    TeCP,
    PIP,
}

impl RelationType {
    pub const ALL: [RelationType; 8] = [
        RelationType::TrIP,
        RelationType::TrWP,
        RelationType::TrCP,
        RelationType::TrAP,
        RelationType::TrNAP,
        RelationType::TeRP,
        RelationType::TeCP,
        RelationType::PIP,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationType::TrIP => "TrIP",
            RelationType::TrWP => "TrWP",
            RelationType::TrCP => "TrCP",
            RelationType::TrAP => "TrAP",
            RelationType::TrNAP => "TrNAP",
            RelationType::TeRP => "TeRP",
            RelationType::TeCP => "TeCP",
            RelationType::PIP => "PIP",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// The `(subject, object)` concept types this label links.
    pub fn category(self) -> (ConceptType, ConceptType) {
        match self {
            RelationType::TrIP
            | RelationType::TrWP
            | RelationType::TrCP
            | RelationType::TrAP
            | RelationType::TrNAP => (ConceptType::Treatment, ConceptType::Problem),
            RelationType::TeRP | RelationType::TeCP => (ConceptType::Test, ConceptType::Problem),
            RelationType::PIP => (ConceptType::Problem, ConceptType::Problem),
        }
    }

    pub fn admits(self, subject: ConceptType, object: ConceptType) -> bool {
        self.category() == (subject, object)
    }
}

macro_rules! impl_label_text {
    ($ty:ident, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = CorpusError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| CorpusError::UnknownLabel {
                        kind: $what,
                        value: s.to_string(),
                    })
            }
        }
    };
}

impl_label_text!(ConceptType, "concept type");
impl_label_text!(AssertionType, "assertion");
impl_label_text!(RelationType, "relation");

/// A token with its position in the document.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Token<'a> {
    pub text: &'a str,
    pub sent_index: usize,
    pub tok_index: usize,
}

/// A contiguous, typed token span within one sentence; `end` is inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConceptSpan {
    pub sent: usize,
    pub start: usize,
    pub end: usize,
    pub ctype: ConceptType,
}

impl ConceptSpan {
    pub fn new(sent: usize, start: usize, end: usize, ctype: ConceptType) -> Self {
        ConceptSpan {
            sent,
            start,
            end,
            ctype,
        }
    }

    /// The rightmost token represents the span.
    pub fn head(&self) -> usize {
        self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn same_extent(&self, other: &ConceptSpan) -> bool {
        (self.sent, self.start, self.end) == (other.sent, other.start, other.end)
    }

    pub fn overlaps(&self, other: &ConceptSpan) -> bool {
        self.sent == other.sent && self.start <= other.end && other.start <= self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Assertion {
    pub concept: ConceptSpan,
    pub label: AssertionType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub subject: ConceptSpan,
    pub label: RelationType,
    pub object: ConceptSpan,
}

/// A tokenized report with its (gold or predicted) annotations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<Vec<String>>,
    pub concepts: Vec<ConceptSpan>,
    pub assertions: Vec<Assertion>,
    pub relations: Vec<Relation>,
}

impl Document {
    pub fn new(id: impl Into<String>, sentences: Vec<Vec<String>>) -> Self {
        Document {
            id: id.into(),
            sentences,
            ..Default::default()
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token<'_>> {
        self.sentences.iter().enumerate().flat_map(|(s, toks)| {
            toks.iter().enumerate().map(move |(t, text)| Token {
                text,
                sent_index: s,
                tok_index: t,
            })
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// Same text, no annotations.
    pub fn unannotated(&self) -> Document {
        Document::new(self.id.clone(), self.sentences.clone())
    }

    pub fn concepts_in(&self, sent: usize) -> impl Iterator<Item = &ConceptSpan> {
        self.concepts.iter().filter(move |c| c.sent == sent)
    }

    pub fn assertion_of(&self, span: &ConceptSpan) -> Option<AssertionType> {
        self.assertions
            .iter()
            .find(|a| a.concept == *span)
            .map(|a| a.label)
    }

    /// Sort every annotation list into serialization order.
    pub fn normalize(&mut self) {
        self.concepts.sort();
        self.assertions.sort();
        self.relations.sort();
    }

    /// Check the structural invariants. Gold data additionally requires an
    /// assertion on every problem concept (`require_assertions`).
    pub fn validate(&self, require_assertions: bool) -> Result<(), CorpusError> {
        let in_range = |c: &ConceptSpan| -> Result<(), CorpusError> {
            let len = self.sentences.get(c.sent).map(Vec::len).ok_or(CorpusError::IndexOutOfRange {
                doc: self.id.clone(),
                detail: format!("sentence {} of {}", c.sent, self.sentences.len()),
            })?;
            if c.start > c.end || c.end >= len {
                return Err(CorpusError::IndexOutOfRange {
                    doc: self.id.clone(),
                    detail: format!(
                        "tokens {}..={} in sentence {} of length {len}",
                        c.start, c.end, c.sent
                    ),
                });
            }
            Ok(())
        };
        let mut sorted = self.concepts.clone();
        sorted.sort();
        for c in &sorted {
            in_range(c)?;
        }
        for w in sorted.windows(2) {
            if w[0].overlaps(&w[1]) {
                return Err(CorpusError::OverlappingSpans {
                    doc: self.id.clone(),
                    detail: format!("{:?} and {:?}", w[0], w[1]),
                });
            }
        }
        let known = |c: &ConceptSpan| sorted.binary_search(c).is_ok();
        let mut asserted = Vec::new();
        for a in &self.assertions {
            if !known(&a.concept) {
                return Err(CorpusError::DanglingAnnotation {
                    doc: self.id.clone(),
                    detail: format!("assertion on unknown concept {:?}", a.concept),
                });
            }
            if a.concept.ctype != ConceptType::Problem {
                return Err(CorpusError::AssertionOnNonProblem {
                    doc: self.id.clone(),
                    detail: format!("{:?}", a.concept),
                });
            }
            asserted.push(a.concept);
        }
        asserted.sort();
        if let Some(w) = asserted.windows(2).find(|w| w[0] == w[1]) {
            return Err(CorpusError::DuplicateAssertion {
                doc: self.id.clone(),
                detail: format!("{:?}", w[0]),
            });
        }
        if require_assertions {
            if let Some(c) = sorted
                .iter()
                .find(|c| c.ctype == ConceptType::Problem && asserted.binary_search(c).is_err())
            {
                return Err(CorpusError::MissingAssertion {
                    doc: self.id.clone(),
                    detail: format!("{c:?}"),
                });
            }
        }
        for r in &self.relations {
            for c in [&r.subject, &r.object] {
                if !known(c) {
                    return Err(CorpusError::DanglingAnnotation {
                        doc: self.id.clone(),
                        detail: format!("relation endpoint {c:?} is not a concept"),
                    });
                }
            }
            if r.subject.sent != r.object.sent || r.subject == r.object {
                return Err(CorpusError::InvalidRelation {
                    doc: self.id.clone(),
                    detail: format!("{r:?}"),
                });
            }
            if !r.label.admits(r.subject.ctype, r.object.ctype) {
                return Err(CorpusError::RelationCategoryMismatch {
                    doc: self.id.clone(),
                    detail: format!(
                        "{} between {} and {}",
                        r.label, r.subject.ctype, r.object.ctype
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Corpus-level totals in the layout of the dataset statistics table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub concepts: usize,
    pub assertions: usize,
    pub relations: usize,
}

impl CorpusStats {
    pub fn of(docs: &[Document]) -> Self {
        CorpusStats {
            documents: docs.len(),
            concepts: docs.iter().map(|d| d.concepts.len()).sum(),
            assertions: docs.iter().map(|d| d.assertions.len()).sum(),
            relations: docs.iter().map(|d| d.relations.len()).sum(),
        }
    }
}
