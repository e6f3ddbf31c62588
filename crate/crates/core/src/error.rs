use std::path::PathBuf;

use jmie_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: malformed annotation: {reason}")]
    MalformedLine {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("{doc}: index out of range: {detail}")]
    IndexOutOfRange { doc: String, detail: String },
    #[error("{doc}: concept text `{quoted}` does not match tokens `{found}`")]
    ConceptTextMismatch {
        doc: String,
        quoted: String,
        found: String,
    },
    #[error("{doc}: dangling annotation: {detail}")]
    DanglingAnnotation { doc: String, detail: String },
    #[error("{doc}: overlapping concept spans: {detail}")]
    OverlappingSpans { doc: String, detail: String },
    #[error("{doc}: assertion on a non-problem concept: {detail}")]
    AssertionOnNonProblem { doc: String, detail: String },
    #[error("{doc}: problem concept without an assertion: {detail}")]
    MissingAssertion { doc: String, detail: String },
    #[error("{doc}: concept asserted twice: {detail}")]
    DuplicateAssertion { doc: String, detail: String },
    #[error("{doc}: invalid relation: {detail}")]
    InvalidRelation { doc: String, detail: String },
    #[error("{doc}: relation label does not fit its concept types: {detail}")]
    RelationCategoryMismatch { doc: String, detail: String },
    #[error("unknown {kind} `{value}`")]
    UnknownLabel { kind: &'static str, value: String },
    #[error("need at least 10 documents to split, got {0}")]
    TooFewDocuments(usize),
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("no precomputed embedding for document `{doc}` sentence {sent}")]
    MissingEmbeddingEntry { doc: String, sent: usize },
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("document `{doc}` sentence {sent}: {found} embedding rows for {expected} tokens")]
    TokenCountMismatch {
        doc: String,
        sent: usize,
        expected: usize,
        found: usize,
    },
    #[error("word vector file line {line}: expected {expected} values, found {found}")]
    RaggedLine {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("word vector file line {line}: {reason}")]
    BadVectorLine { line: usize, reason: String },
    #[error("word vector file is empty")]
    EmptyFile,
    #[error("not a JEMB1 file")]
    BadMagic,
    #[error("embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("tag sequence of length {tags} for {rows} encoded tokens")]
    LengthMismatch { tags: usize, rows: usize },
    #[error("head token {head} outside sentence of length {len}")]
    HeadOutOfRange { head: usize, len: usize },
    #[error("relation features have width {found}, scorer expects {expected}")]
    FeatureDimMismatch { expected: usize, found: usize },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold and predicted corpora differ: {0}")]
    CorpusMismatch(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged (non-finite) at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(ModelError::Autodiff(e))
    }
}

impl From<CorpusError> for TrainError {
    fn from(e: CorpusError) -> Self {
        TrainError::Model(ModelError::Corpus(e))
    }
}

impl From<EncoderError> for TrainError {
    fn from(e: EncoderError) -> Self {
        TrainError::Model(ModelError::Encoder(e))
    }
}
