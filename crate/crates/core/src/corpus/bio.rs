use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ConceptSpan, ConceptType};
use crate::error::CorpusError;

pub const NUM_TAGS: usize = 7;

/// A BIO tag. Index order: `O`, then `B`/`I` for problem, treatment, test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    O,
    B(ConceptType),
    I(ConceptType),
}

impl Tag {
    pub const ALL: [Tag; NUM_TAGS] = [
        Tag::O,
        Tag::B(ConceptType::Problem),
        Tag::I(ConceptType::Problem),
        Tag::B(ConceptType::Treatment),
        Tag::I(ConceptType::Treatment),
        Tag::B(ConceptType::Test),
        Tag::I(ConceptType::Test),
    ];

    pub fn index(self) -> usize {
        match self {
            Tag::O => 0,
            Tag::B(t) => 1 + 2 * t.index(),
            Tag::I(t) => 2 + 2 * t.index(),
        }
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        Self::ALL.get(i).copied()
    }

    /// Whether `next` may follow `self` in well-formed BIO. `None` stands
    /// for the sequence start.
    pub fn may_precede(prev: Option<Tag>, next: Tag) -> bool {
        match next {
            Tag::I(t) => matches!(prev, Some(Tag::B(s)) | Some(Tag::I(s)) if s == t),
            _ => true,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(t) => write!(f, "B-{t}"),
            Tag::I(t) => write!(f, "I-{t}"),
        }
    }
}

/// Per-token tags of one sentence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TagSequence(pub Vec<Tag>);

impl TagSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().map(|t| t.index()).collect()
    }

    pub fn from_indices(indices: &[usize]) -> Option<TagSequence> {
        indices.iter().map(|&i| Tag::from_index(i)).collect::<Option<Vec<_>>>().map(TagSequence)
    }

    pub fn is_valid_bio(&self) -> bool {
        let mut prev = None;
        for &t in &self.0 {
            if !Tag::may_precede(prev, t) {
                return false;
            }
            prev = Some(t);
        }
        true
    }
}

/// Encode the spans of one sentence as BIO tags. The `sent` field of the
/// spans is ignored.
pub fn spans_to_bio(sentence_len: usize, concepts: &[ConceptSpan]) -> Result<TagSequence, CorpusError> {
    let mut tags = vec![Tag::O; sentence_len];
    let mut taken = vec![false; sentence_len];
    for c in concepts {
        if c.start > c.end || c.end >= sentence_len {
            return Err(CorpusError::IndexOutOfRange {
                doc: String::new(),
                detail: format!("span {}..={} in sentence of length {sentence_len}", c.start, c.end),
            });
        }
        for i in c.start..=c.end {
            if taken[i] {
                return Err(CorpusError::OverlappingSpans {
                    doc: String::new(),
                    detail: format!("token {i} covered twice"),
                });
            }
            taken[i] = true;
            tags[i] = if i == c.start { Tag::B(c.ctype) } else { Tag::I(c.ctype) };
        }
    }
    Ok(TagSequence(tags))
}

/// Decode BIO tags into spans of sentence `sent`. Total: an `I-t` that does
/// not continue a `t` span opens a new one, as if it were `B-t`.
pub fn bio_to_spans(tags: &TagSequence, sent: usize) -> Vec<ConceptSpan> {
    let mut spans = Vec::new();
    let mut open: Option<ConceptSpan> = None;
    for (i, &tag) in tags.0.iter().enumerate() {
        match tag {
            Tag::O => spans.extend(open.take()),
            Tag::B(t) => {
                spans.extend(open.take());
                open = Some(ConceptSpan::new(sent, i, i, t));
            }
            Tag::I(t) => match open.as_mut() {
                Some(span) if span.ctype == t => span.end = i,
                _ => {
                    spans.extend(open.take());
                    open = Some(ConceptSpan::new(sent, i, i, t));
                }
            },
        }
    }
    spans.extend(open);
    spans
}
