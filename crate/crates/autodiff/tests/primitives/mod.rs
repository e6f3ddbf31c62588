//! Finite-difference cases for every primitive. Shared with the core
//! acceptance suite, which includes this file by path.
#![allow(dead_code)]

use jmie_autodiff::gradcheck::check_gradients;
use jmie_autodiff::{Axis, Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-6;

pub type LossFn = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>;
pub type Build = fn(&mut ChaCha8Rng, &mut ParamStore) -> LossFn;

pub struct Case {
    pub name: &'static str,
    pub trials: u64,
    pub build: Build,
}

pub fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduce an arbitrary output to a scalar with fixed random weights so that
/// every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = random(&mut rng, shape[0], shape[1]);
    let w = g.input(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

pub fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

pub fn random_mask(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..r * c).map(|_| rng.gen_bool(0.7)).collect();
    for i in 0..r {
        m[i * c + rng.gen_range(0..c)] = true;
    }
    m
}

/// Largest relative error over all trials of `case`, with where it occurred.
pub fn worst_error(case: &Case) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for trial in 0..case.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + case.name.len() as u64);
        let mut store = ParamStore::new();
        let f = (case.build)(&mut rng, &mut store);
        let report = check_gradients(&mut store, H, None, |g, s| f(g, s)).unwrap();
        if report.max_rel_err >= worst.0 {
            worst = (report.max_rel_err, format!("trial {trial}: {:?}", report.worst));
        }
    }
    worst
}

pub fn cases() -> Vec<Case> {
    vec![
        Case { name: "matmul", trials: 10, build: matmul },
        Case { name: "add", trials: 8, build: add },
        Case { name: "sub", trials: 8, build: sub },
        Case { name: "mul", trials: 8, build: mul },
        Case { name: "bias", trials: 8, build: bias },
        Case { name: "concat", trials: 8, build: concat },
        Case { name: "activations", trials: 10, build: activations },
        Case { name: "softmax_cols", trials: 10, build: softmax_cols },
        Case { name: "softmax_rows", trials: 10, build: softmax_rows },
        Case { name: "masked_log_softmax", trials: 10, build: masked_log_softmax },
        Case { name: "structural", trials: 10, build: structural },
        Case { name: "dropout", trials: 6, build: dropout },
        Case { name: "losses", trials: 10, build: losses },
    ]
}

fn matmul(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> LossFn {
    let (r, k, c) = (dim(rng), dim(rng), dim(rng));
    let a = store.add("a", random(rng, r, k)).unwrap();
    let b = store.add("b", random(rng, k, c)).unwrap();
    Box::new(move |g, s| {
        let (x, y) = (g.param(s, a), g.param(s, b));
        let o = g.matmul(x, y)?;
        weighted_sum(g, o, 1)
    })
}

fn binary(rng: &mut ChaCha8Rng, store: &mut ParamStore, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> LossFn {
    let (r, c) = (dim(rng), dim(rng));
    let a = store.add("a", random(rng, r, c)).unwrap();
    let b = store.add("b", random(rng, r, c)).unwrap();
    Box::new(move |g, s| {
        let (x, y) = (g.param(s, a), g.param(s, b));
        let o = op(g, x, y)?;
        weighted_sum(g, o, 2)
    })
}

fn add(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> LossFn {
    binary(rng, store, |g, x, y| g.add(x, y))
}

fn sub(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> LossFn {
    binary(rng, store, |g, x, y| g.sub(x, y))
}

fn mul(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> LossFn {
    binary(rng, store, |g, x, y| g.mul(x, y))
}

fn bias(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> LossFn {
    let (r, c) = (dim(rng), dim(rng));
    let a = store.add("a", random(rng, r, c)).unwrap();
    let row = store.add("row", random(rng, 1, c)).unwrap();
    let col = store.add("col", random(rng, r, 1)).unwrap();
    Box::new(move |g, s| {
        let x = g.param(s, a);
        let x = g.scale(x, -1.7)?;
        let rv = g.param(s, row);
        let x = g.add_row(x, rv)?;
        let cv = g.param(s, col);
        let x = g.add_col(x, cv)?;
        weighted_sum(g, x, 3)
    })
}

fn concat(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> LossFn {
    let (r, c1, c2) = (dim(rng), dim(rng), dim(rng));
    let a = store.add("a", random(rng, r, c1)).unwrap();
    let b = store.add("b", random(rng, r, c2)).unwrap();
    Box::new(move |g, s| {
        let (x, y) = (g.param(s, a), g.param(s, b));
        let wide = g.concat(&[x, y, x], Axis::Cols)?;
        let t = g.transpose(wide)?;
        let tall = g.concat(&[t, t], Axis::Rows)?;
        weighted_sum(g, tall, 4)
    })
}

fn activations(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> LossFn {
    let (r, c) = (dim(rng), dim(rng));
    let a = store.add("a", random(rng, r, c)).unwrap();
    Box::new(move |g, s| {
        let x = g.param(s, a);
        let t = g.tanh(x)?;
        let sg = g.sigmoid(x)?;
        let o = g.mul(t, sg)?;
        weighted_sum(g, o, 5)
    })
}

fn softmax_family(rng: &mut ChaCha8Rng, store: &mut ParamStore, axis: Axis) -> LossFn {
    let (r, c) = (dim(rng), dim(rng));
    let a = store.add("a", random(rng, r, c)).unwrap();
    let mask = match axis {
        Axis::Cols => random_mask(rng, r, c),
        Axis::Rows => {
            let t = random_mask(rng, c, r);
            let mut m = vec![false; r * c];
            for i in 0..c {
                for j in 0..r {
                    m[j * c + i] = t[i * r + j];
                }
            }
            m
        }
    };
    Box::new(move |g, s| {
        let x = g.param(s, a);
        let p = g.softmax(x, axis, None)?;
        let pm = g.softmax(x, axis, Some(&mask))?;
        let l = g.log_softmax(x, axis, None)?;
        let lse = g.logsumexp(x, axis)?;
        let a1 = weighted_sum(g, p, 6)?;
        let a2 = weighted_sum(g, pm, 7)?;
        let a3 = weighted_sum(g, l, 8)?;
        let a4 = weighted_sum(g, lse, 9)?;
        let s1 = g.add(a1, a2)?;
        let s2 = g.add(a3, a4)?;
        g.add(s1, s2)
    })
}

fn softmax_cols(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> LossFn {
    softmax_family(rng, store, Axis::Cols)
}

fn softmax_rows(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> LossFn {
    softmax_family(rng, store, Axis::Rows)
}

fn masked_log_softmax(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> LossFn {
    let (r, c) = (dim(rng), dim(rng));
    let a = store.add("a", random(rng, r, c)).unwrap();
    let mask = random_mask(rng, r, c);
    let cells: Vec<(usize, usize)> = (0..r)
        .map(|i| (i, (0..c).find(|&j| mask[i * c + j]).unwrap()))
        .collect();
    Box::new(move |g, s| {
        let x = g.param(s, a);
        let l = g.log_softmax(x, Axis::Cols, Some(&mask))?;
        let p = g.pick(l, &cells)?;
        g.sum(p)
    })
}

fn structural(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> LossFn {
    let (r, c) = (dim(rng), dim(rng));
    let table = store.add("table", random(rng, r, c)).unwrap();
    let q = dim(rng);
    let other = store.add("other", random(rng, q, c)).unwrap();
    let idx: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..r)).collect();
    let start = rng.gen_range(0..c);
    let len = rng.gen_range(1..=c - start);
    Box::new(move |g, s| {
        let t = g.param(s, table);
        let o = g.param(s, other);
        let rows = g.embedding_lookup(t, &idx)?;
        let pw = g.pairwise_add(rows, o)?;
        let sl = g.slice(pw, Axis::Cols, start, len)?;
        let n = g.shape(sl)[0];
        let sr = g.slice(sl, Axis::Rows, n / 2, n - n / 2)?;
        let shape = g.shape(sr).to_vec();
        let flat = g.reshape(sr, vec![1, shape[0] * shape[1]])?;
        let tanh = g.tanh(flat)?;
        weighted_sum(g, tanh, 10)
    })
}

fn dropout(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> LossFn {
    let (r, c) = (dim(rng), dim(rng));
    let a = store.add("a", random(rng, r, c)).unwrap();
    Box::new(move |g, s| {
        let x = g.param(s, a);
        // the node id keys the mask, so build the same tape every call
        let d = g.dropout(x, 0.3, true, 11, 4)?;
        weighted_sum(g, d, 12)
    })
}

fn losses(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> LossFn {
    let (r, c) = (dim(rng), dim(rng));
    let a = store.add("a", random(rng, r, c)).unwrap();
    let mask = random_mask(rng, r, c);
    let targets: Vec<Option<usize>> = (0..r)
        .map(|i| {
            if rng.gen_bool(0.8) {
                (0..c).rev().find(|&j| mask[i * c + j])
            } else {
                None
            }
        })
        .collect();
    let bce_t: Vec<f64> = (0..r * c).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let bce_w: Vec<f64> = (0..r * c).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();
    Box::new(move |g, s| {
        let x = g.param(s, a);
        let ce = g.cross_entropy(x, &targets, None)?;
        let cem = g.cross_entropy(x, &targets, Some(&mask))?;
        let bce = g.bce_with_logits(x, &bce_t, &bce_w)?;
        let s1 = g.add(ce, cem)?;
        g.add(s1, bce)
    })
}
