use jmie_autodiff::{Axis, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use super::xavier;
use crate::corpus::AssertionType;
use crate::error::ModelError;

pub const NUM_ASSERTIONS: usize = 6;

/// `softmax(W [X_i ; CE(tag_i)] + b)` at problem head tokens.
#[derive(Clone, Copy, Debug)]
pub struct AssertionHead {
    pub input_dim: usize,
    pub weights: ParamId,
    pub bias: ParamId,
}

impl AssertionHead {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, rng: &mut impl Rng) -> Result<Self, ModelError> {
        Ok(AssertionHead {
            input_dim,
            weights: store.add(format!("{prefix}.w"), xavier(rng, input_dim, NUM_ASSERTIONS))?,
            bias: store.add(format!("{prefix}.b"), Tensor::zeros(1, NUM_ASSERTIONS))?,
        })
    }

    /// Logits for the rows `heads` of `x` (packed token rows) and
    /// `concept_emb` (the matching concept-label embedding rows, one per
    /// head).
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        heads: &[usize],
        concept_emb: Var,
    ) -> Result<Var, ModelError> {
        let rows = g.shape(x)[0];
        if let Some(&h) = heads.iter().find(|&&h| h >= rows) {
            return Err(ModelError::HeadOutOfRange { head: h, len: rows });
        }
        let xh = g.embedding_lookup(x, heads)?;
        let input = g.concat(&[xh, concept_emb], Axis::Cols)?;
        let width = g.shape(input)[1];
        if width != self.input_dim {
            return Err(ModelError::FeatureDimMismatch {
                expected: self.input_dim,
                found: width,
            });
        }
        let w = g.param(store, self.weights);
        let b = g.param(store, self.bias);
        let z = g.matmul(input, w)?;
        Ok(g.add_row(z, b)?)
    }
}

/// Argmax label per row; ties go to the lower index.
pub fn argmax_labels(logits: &Tensor) -> Vec<AssertionType> {
    (0..logits.rows())
        .map(|r| AssertionType::from_index(argmax(logits.row(r))).expect("six columns"))
        .collect()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
