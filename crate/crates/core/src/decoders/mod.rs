//! Concept CRF, assertion classifier and relation selector, stacked into
//! one jointly trained model.

mod assertion;
mod crf;
mod joint;
mod relation;

use std::rc::Rc;

use jmie_autodiff::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

pub use assertion::{argmax_labels, AssertionHead, NUM_ASSERTIONS};
pub use crf::{log_partition, nll, sequence_score, BioConstraint, Crf, CrfScores, CrfVars};
pub use joint::{
    predict_documents, Feed, JointConfig, JointLoss, JointLossVars, JointModel, JointOutput, SentencePrediction,
};
pub use relation::{
    softmax_mask, softmax_targets, RelationHead, RelationMode, TokenRelation, NOLINK, NUM_RELATION_LABELS,
};

pub(crate) use assertion::argmax;

use crate::corpus::{
    spans_to_bio, AssertionType, ConceptSpan, ConceptType, Document, NUM_TAGS,
};
use crate::encoder::{EmbeddingTable, Encoder, EncoderConfig, EncoderMode, PrecomputedEmbeddings, SentenceRef, Vocab};
use crate::error::ModelError;

/// Row of the assertion-label table used for tokens without an assertion.
pub const NO_ASSERTION: usize = NUM_ASSERTIONS;

/// Glorot-uniform `r x c` matrix.
pub(crate) fn xavier(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    let bound = (6.0 / (r + c) as f64).sqrt();
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect()).expect("sized buffer")
}

/// Gold labels of one sentence in token coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SentenceLabels {
    pub tags: Vec<usize>,
    pub spans: Vec<ConceptSpan>,
    pub assertions: Vec<(ConceptSpan, AssertionType)>,
    pub relations: Vec<TokenRelation>,
}

impl SentenceLabels {
    pub fn from_document(doc: &Document, sent: usize) -> Result<Self, ModelError> {
        let n = doc.sentences.get(sent).map_or(0, Vec::len);
        let mut spans: Vec<ConceptSpan> = doc.concepts_in(sent).copied().collect();
        spans.sort();
        let tags = spans_to_bio(n, &spans)
            .map_err(|e| with_doc(e, &doc.id))?
            .indices();
        let mut assertions: Vec<(ConceptSpan, AssertionType)> = doc
            .assertions
            .iter()
            .filter(|a| a.concept.sent == sent)
            .map(|a| (a.concept, a.label))
            .collect();
        assertions.sort();
        let relations = doc
            .relations
            .iter()
            .filter(|r| r.object.sent == sent && r.subject.sent == sent)
            .map(|r| TokenRelation {
                subject: r.subject.head(),
                label: r.label,
                object: r.object.head(),
            })
            .collect();
        Ok(SentenceLabels {
            tags,
            spans,
            assertions,
            relations,
        })
    }

    pub fn assertion_for(&self, span: &ConceptSpan) -> Option<AssertionType> {
        self.assertions
            .iter()
            .find(|(c, _)| c.same_extent(span) && c.ctype == ConceptType::Problem)
            .map(|(_, a)| *a)
    }
}

fn with_doc(e: crate::error::CorpusError, doc: &str) -> ModelError {
    use crate::error::CorpusError::*;
    ModelError::Corpus(match e {
        IndexOutOfRange { detail, .. } => IndexOutOfRange {
            doc: doc.to_string(),
            detail,
        },
        OverlappingSpans { detail, .. } => OverlappingSpans {
            doc: doc.to_string(),
            detail,
        },
        other => other,
    })
}

/// Where the word-embedding table comes from.
#[derive(Clone, Debug)]
pub enum WordInit {
    /// Random rows for these words, drawn from the model RNG.
    Random(Vec<String>),
    /// Pretrained vectors (already restricted to the wanted words).
    Pretrained(EmbeddingTable),
    /// A stored vocabulary whose values arrive with a checkpoint.
    Restored(Vocab),
}

impl WordInit {
    fn table(self, dim: usize, rng: &mut impl Rng) -> EmbeddingTable {
        match self {
            WordInit::Random(words) => EmbeddingTable::random(words, dim, rng),
            WordInit::Pretrained(t) => t,
            WordInit::Restored(vocab) => {
                let matrix = Tensor::zeros(vocab.len(), dim);
                EmbeddingTable { vocab, matrix }
            }
        }
    }
}

/// Encoder followed by the concept CRF. The joint model and the pipeline's
/// concept model both start from this, registered first with the same RNG,
/// so equal seeds give equal initial parameters.
#[derive(Clone, Debug)]
pub struct ConceptTagger {
    pub encoder: Encoder,
    pub crf: Crf,
}

impl ConceptTagger {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &EncoderConfig,
        words: WordInit,
        precomputed: Option<Rc<PrecomputedEmbeddings>>,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let encoder = new_encoder(store, &format!("{prefix}.encoder"), config, words, precomputed, rng)?;
        let crf = Crf::new(store, &format!("{prefix}.crf"), encoder.output_dim(), NUM_TAGS, rng)?;
        Ok(ConceptTagger { encoder, crf })
    }
}

pub(crate) fn new_encoder(
    store: &mut ParamStore,
    prefix: &str,
    config: &EncoderConfig,
    words: WordInit,
    precomputed: Option<Rc<PrecomputedEmbeddings>>,
    rng: &mut impl Rng,
) -> Result<Encoder, ModelError> {
    let table = (config.mode == EncoderMode::TrainableLstm).then(|| words.table(config.word_dim, rng));
    Encoder::new(store, prefix, config.clone(), table, precomputed, rng)
}

/// Packed row offsets of a batch.
pub(crate) fn offsets(batch: &[SentenceRef]) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch.len());
    let mut acc = 0;
    for s in batch {
        out.push(acc);
        acc += s.tokens.len();
    }
    out
}

/// `sum_i w_i * x_i` over scalar vars; an empty list gives 0.
pub(crate) fn weighted_sum(g: &mut Graph, terms: &[(Var, f64)]) -> Result<Var, ModelError> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let t = g.scale(v, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => g.input(Tensor::scalar(0.0)),
    })
}
