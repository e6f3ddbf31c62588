//! Linear-chain CRF over BIO tags.

use jmie_autodiff::{Axis, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use super::xavier;
use crate::corpus::Tag;
use crate::error::ModelError;

/// Emission projection plus transition, start and stop scores.
#[derive(Clone, Copy, Debug)]
pub struct Crf {
    pub num_tags: usize,
    pub emit_weights: ParamId,
    pub emit_bias: ParamId,
    pub transitions: ParamId,
    pub start: ParamId,
    pub stop: ParamId,
}

/// The transition-side parameters placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CrfVars {
    pub transitions: Var,
    pub start: Var,
    pub stop: Var,
}

impl Crf {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        num_tags: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        Ok(Crf {
            num_tags,
            emit_weights: store.add(format!("{prefix}.emit_w"), xavier(rng, input_dim, num_tags))?,
            emit_bias: store.add(format!("{prefix}.emit_b"), Tensor::zeros(1, num_tags))?,
            transitions: store.add(format!("{prefix}.transitions"), Tensor::zeros(num_tags, num_tags))?,
            start: store.add(format!("{prefix}.start"), Tensor::zeros(1, num_tags))?,
            stop: store.add(format!("{prefix}.stop"), Tensor::zeros(1, num_tags))?,
        })
    }

    /// `X W_e + b_e`, one row of tag scores per token.
    pub fn emissions(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let w = g.param(store, self.emit_weights);
        let b = g.param(store, self.emit_bias);
        let e = g.matmul(x, w)?;
        Ok(g.add_row(e, b)?)
    }

    pub fn vars(&self, g: &mut Graph, store: &ParamStore) -> CrfVars {
        CrfVars {
            transitions: g.param(store, self.transitions),
            start: g.param(store, self.start),
            stop: g.param(store, self.stop),
        }
    }
}

fn check_len(g: &Graph, emissions: Var, tags: &[usize]) -> Result<(), ModelError> {
    let rows = g.shape(emissions)[0];
    if tags.len() != rows || rows == 0 {
        return Err(ModelError::LengthMismatch { tags: tags.len(), rows });
    }
    Ok(())
}

/// `start[y_0] + sum_i E[i, y_i] + sum_i A[y_{i-1}, y_i] + stop[y_n]`.
pub fn sequence_score(g: &mut Graph, emissions: Var, crf: &CrfVars, tags: &[usize]) -> Result<Var, ModelError> {
    check_len(g, emissions, tags)?;
    let cells: Vec<(usize, usize)> = tags.iter().copied().enumerate().collect();
    let emit = g.pick(emissions, &cells)?;
    let mut score = g.sum(emit)?;
    let first = g.pick(crf.start, &[(0, tags[0])])?;
    let last = g.pick(crf.stop, &[(0, tags[tags.len() - 1])])?;
    score = g.add(score, first)?;
    score = g.add(score, last)?;
    if tags.len() > 1 {
        let moves: Vec<(usize, usize)> = tags.windows(2).map(|w| (w[0], w[1])).collect();
        let trans = g.pick(crf.transitions, &moves)?;
        let trans = g.sum(trans)?;
        score = g.add(score, trans)?;
    }
    Ok(score)
}

/// Log of the sum over all tag sequences of `exp(score)`, by the forward
/// algorithm.
pub fn log_partition(g: &mut Graph, emissions: Var, crf: &CrfVars) -> Result<Var, ModelError> {
    let n = g.shape(emissions)[0];
    if n == 0 {
        return Err(ModelError::LengthMismatch { tags: 0, rows: 0 });
    }
    let e0 = g.slice(emissions, Axis::Rows, 0, 1)?;
    let mut alpha = g.add(crf.start, e0)?;
    for t in 1..n {
        // cell (i, j) = alpha[i] + A[i, j]; reduce over the previous tag i
        let col = g.transpose(alpha)?;
        let paths = g.add_col(crf.transitions, col)?;
        let reduced = g.logsumexp(paths, Axis::Rows)?;
        let et = g.slice(emissions, Axis::Rows, t, 1)?;
        alpha = g.add(reduced, et)?;
    }
    let end = g.add(alpha, crf.stop)?;
    Ok(g.logsumexp(end, Axis::Cols)?)
}

/// Negative log-likelihood of `tags`.
pub fn nll(g: &mut Graph, emissions: Var, crf: &CrfVars, tags: &[usize]) -> Result<Var, ModelError> {
    let gold = sequence_score(g, emissions, crf, tags)?;
    let z = log_partition(g, emissions, crf)?;
    Ok(g.sub(z, gold)?)
}

/// Hard BIO constraints for the seven-tag inventory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BioConstraint {
    pub start: Vec<bool>,
    /// `allowed[i * T + j]`: tag `j` may follow tag `i`.
    pub allowed: Vec<bool>,
}

impl BioConstraint {
    pub fn new() -> Self {
        let start = Tag::ALL.iter().map(|&t| Tag::may_precede(None, t)).collect();
        let allowed = Tag::ALL
            .iter()
            .flat_map(|&p| Tag::ALL.iter().map(move |&n| Tag::may_precede(Some(p), n)))
            .collect();
        BioConstraint { start, allowed }
    }
}

impl Default for BioConstraint {
    fn default() -> Self {
        Self::new()
    }
}

/// Plain-value CRF scores, for decoding outside a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfScores {
    pub transitions: Tensor,
    pub start: Vec<f64>,
    pub stop: Vec<f64>,
}

impl CrfScores {
    pub fn from_store(crf: &Crf, store: &ParamStore) -> Self {
        CrfScores {
            transitions: store.value(crf.transitions).clone(),
            start: store.value(crf.start).data().to_vec(),
            stop: store.value(crf.stop).data().to_vec(),
        }
    }

    pub fn score(&self, emissions: &Tensor, tags: &[usize]) -> f64 {
        let mut s = self.start[tags[0]] + self.stop[tags[tags.len() - 1]];
        for (i, &t) in tags.iter().enumerate() {
            s += emissions.get(i, t);
        }
        for w in tags.windows(2) {
            s += self.transitions.get(w[0], w[1]);
        }
        s
    }

    /// Highest-scoring tag sequence and its score. Ties go to the lowest tag
    /// index, both for the final tag and at every backtrack step.
    /// `constraint` must match the tag count when given.
    pub fn viterbi(&self, emissions: &Tensor, constraint: Option<&BioConstraint>) -> (Vec<usize>, f64) {
        let (n, t) = (emissions.rows(), emissions.cols());
        if n == 0 {
            return (Vec::new(), 0.0);
        }
        let start_ok = |j: usize| constraint.is_none_or(|c| c.start[j]);
        let move_ok = |i: usize, j: usize| constraint.is_none_or(|c| c.allowed[i * t + j]);
        let mut best: Vec<f64> = (0..t)
            .map(|j| if start_ok(j) { self.start[j] + emissions.get(0, j) } else { f64::NEG_INFINITY })
            .collect();
        let mut back = vec![0usize; n * t];
        for pos in 1..n {
            let mut next = vec![f64::NEG_INFINITY; t];
            for j in 0..t {
                let mut arg = 0;
                let mut top = f64::NEG_INFINITY;
                for (i, &b) in best.iter().enumerate() {
                    if !move_ok(i, j) {
                        continue;
                    }
                    let s = b + self.transitions.get(i, j);
                    if s > top {
                        top = s;
                        arg = i;
                    }
                }
                back[pos * t + j] = arg;
                next[j] = top + emissions.get(pos, j);
            }
            best = next;
        }
        let mut last = 0;
        let mut top = f64::NEG_INFINITY;
        for (j, &b) in best.iter().enumerate() {
            let s = b + self.stop[j];
            if s > top {
                top = s;
                last = j;
            }
        }
        let mut tags = vec![0; n];
        tags[n - 1] = last;
        for pos in (1..n).rev() {
            tags[pos - 1] = back[pos * t + tags[pos]];
        }
        (tags, top)
    }
}
