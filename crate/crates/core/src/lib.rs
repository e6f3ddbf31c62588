pub mod corpus;
pub mod decoders;
pub mod encoder;
pub mod evaluation;
pub mod pipeline;
pub mod trainer;
mod error;

pub use error::{CorpusError, EncoderError, EvalError, ModelError, TrainError};
