//! Multi-head selection: each token picks a (head token, relation) cell.

use std::fmt;
use std::str::FromStr;

use jmie_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::xavier;
use crate::corpus::RelationType;
use crate::error::ModelError;

/// Eight relation labels plus `nolink`.
pub const NUM_RELATION_LABELS: usize = 9;
pub const NOLINK: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationMode {
    /// One distribution per token over all `(j, k)` cells plus `(i, nolink)`.
    #[default]
    Softmax,
    /// Independent sigmoid per `(i, j, k)`.
    Sigmoid,
}

impl fmt::Display for RelationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelationMode::Softmax => "softmax",
            RelationMode::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for RelationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(RelationMode::Softmax),
            "sigmoid" => Ok(RelationMode::Sigmoid),
            other => Err(format!("unknown relation mode `{other}`")),
        }
    }
}

/// A relation between token positions of one sentence: `subject` is the
/// selected head, `object` the selecting token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenRelation {
    pub subject: usize,
    pub label: RelationType,
    pub object: usize,
}

/// `s(x_j, r_k, x_i) = u_k . tanh(U f_j + V f_i)`.
#[derive(Clone, Copy, Debug)]
pub struct RelationHead {
    pub feature_dim: usize,
    pub hidden: usize,
    pub mode: RelationMode,
    pub u: ParamId,
    pub v: ParamId,
    /// `hidden x K`; column `k` is `u_k`.
    pub labels: ParamId,
}

impl RelationHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        hidden: usize,
        mode: RelationMode,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        Ok(RelationHead {
            feature_dim,
            hidden,
            mode,
            u: store.add(format!("{prefix}.u"), xavier(rng, feature_dim, hidden))?,
            v: store.add(format!("{prefix}.v"), xavier(rng, feature_dim, hidden))?,
            labels: store.add(format!("{prefix}.labels"), xavier(rng, hidden, NUM_RELATION_LABELS))?,
        })
    }

    /// Project packed features once: returns `(U f, V f)`.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<(Var, Var), ModelError> {
        let width = g.shape(features)[1];
        if width != self.feature_dim {
            return Err(ModelError::FeatureDimMismatch {
                expected: self.feature_dim,
                found: width,
            });
        }
        let u = g.param(store, self.u);
        let v = g.param(store, self.v);
        Ok((g.matmul(features, u)?, g.matmul(features, v)?))
    }

    /// Scores of one sentence as an `n x (n*K)` matrix: row `i`, column
    /// `j*K + k` holds `s(x_j, r_k, x_i)`. `uf` and `vf` are the sentence's
    /// rows of [`RelationHead::project`].
    pub fn scores(&self, g: &mut Graph, store: &ParamStore, uf: Var, vf: Var) -> Result<Var, ModelError> {
        let n = g.shape(uf)[0];
        let pairs = g.pairwise_add(vf, uf)?;
        let act = g.tanh(pairs)?;
        let labels = g.param(store, self.labels);
        let flat = g.matmul(act, labels)?;
        Ok(g.reshape(flat, vec![n, n * NUM_RELATION_LABELS])?)
    }

    /// Mean loss of one sentence against gold token relations.
    pub fn loss(&self, g: &mut Graph, scores: Var, n: usize, gold: &[TokenRelation]) -> Result<Var, ModelError> {
        let k = NUM_RELATION_LABELS;
        match self.mode {
            RelationMode::Softmax => {
                let targets = softmax_targets(n, gold).0;
                let mask = softmax_mask(n);
                Ok(g.cross_entropy(scores, &targets, Some(&mask))?)
            }
            RelationMode::Sigmoid => {
                let mut targets = vec![0.0; n * n * k];
                for r in gold {
                    targets[r.object * n * k + r.subject * k + r.label.index()] = 1.0;
                }
                let weights: Vec<f64> = (0..n * n * k).map(|c| if c % k == NOLINK { 0.0 } else { 1.0 }).collect();
                Ok(g.bce_with_logits(scores, &targets, &weights)?)
            }
        }
    }

    /// Decoded token relations from plain scores (`n x n*K`).
    pub fn decode(&self, scores: &Tensor) -> Vec<TokenRelation> {
        let n = scores.rows();
        let k = NUM_RELATION_LABELS;
        let mut out = Vec::new();
        match self.mode {
            RelationMode::Softmax => {
                let mask = softmax_mask(n);
                for i in 0..n {
                    let row = scores.row(i);
                    let mut best: Option<usize> = None;
                    for c in 0..n * k {
                        if mask[i * n * k + c] && best.is_none_or(|b| row[c] > row[b]) {
                            best = Some(c);
                        }
                    }
                    let c = best.expect("the nolink cell is always admissible");
                    let (j, label) = (c / k, c % k);
                    if label != NOLINK {
                        out.push(TokenRelation {
                            subject: j,
                            label: RelationType::from_index(label).expect("label below nolink"),
                            object: i,
                        });
                    }
                }
            }
            RelationMode::Sigmoid => {
                for i in 0..n {
                    for j in 0..n {
                        for label in 0..NOLINK {
                            if scores.get(i, j * k + label) > 0.0 {
                                out.push(TokenRelation {
                                    subject: j,
                                    label: RelationType::from_index(label).expect("label below nolink"),
                                    object: i,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Admissible cells of the softmax: every `(j, k)` with a real relation,
/// and `nolink` only at `j = i`.
pub fn softmax_mask(n: usize) -> Vec<bool> {
    let k = NUM_RELATION_LABELS;
    let mut mask = vec![false; n * n * k];
    for i in 0..n {
        for j in 0..n {
            for label in 0..k {
                mask[i * n * k + j * k + label] = label != NOLINK || j == i;
            }
        }
    }
    mask
}

/// Softmax target cell per token and the number of gold relations that had
/// to be dropped because their object token already had a smaller cell.
pub fn softmax_targets(n: usize, gold: &[TokenRelation]) -> (Vec<Option<usize>>, usize) {
    let k = NUM_RELATION_LABELS;
    let mut targets: Vec<Option<usize>> = (0..n).map(|i| Some(i * k + NOLINK)).collect();
    let mut claimed = vec![false; n];
    let mut dropped = 0;
    let mut sorted = gold.to_vec();
    sorted.sort_by_key(|r| (r.object, r.subject, r.label.index()));
    for r in sorted {
        if claimed[r.object] {
            dropped += 1;
            continue;
        }
        claimed[r.object] = true;
        targets[r.object] = Some(r.subject * k + r.label.index());
    }
    (targets, dropped)
}
