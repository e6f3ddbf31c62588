mod common;

use common::*;
use jmie_autodiff::{Graph, ParamStore, Tensor};
use jmie_core::encoder::{BiLstm, PrecomputedEmbeddings};
use std::collections::BTreeMap;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One direction of a width-1 LSTM by hand. `w`, `u`, `b` hold the input,
/// forget, cell and output gate coefficients in that order.
fn scalar_lstm(xs: &[f64], w: [f64; 4], u: [f64; 4], b: [f64; 4]) -> Vec<f64> {
    let (mut h, mut c) = (0.0, 0.0);
    xs.iter()
        .map(|&x| {
            let z: Vec<f64> = (0..4).map(|k| w[k] * x + u[k] * h + b[k]).collect();
            let (i, f, g, o) = (sigmoid(z[0]), sigmoid(z[1]), z[2].tanh(), sigmoid(z[3]));
            c = f * c + i * g;
            h = o * c.tanh();
            h
        })
        .collect()
}

fn set(store: &mut ParamStore, id: jmie_autodiff::ParamId, v: [f64; 4]) {
    store.set_value(id, Tensor::matrix(1, 4, v.to_vec()).unwrap()).unwrap();
}

fn run(lstm: &BiLstm, store: &ParamStore, rows: &[Vec<f64>], lengths: &[usize]) -> Tensor {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_rows(rows).unwrap());
    let out = lstm.forward(&mut g, store, x, lengths).unwrap();
    g.value(out).clone()
}

#[test]
fn width_one_lstm_matches_hand_recurrence() {
    let mut store = ParamStore::new();
    let lstm = BiLstm::new(&mut store, "l", 1, 1, &mut rng(1)).unwrap();
    let (wf, uf, bf) = ([0.5, -0.3, 0.8, 0.1], [0.2, 0.4, -0.6, 0.3], [0.0, 1.0, 0.1, -0.2]);
    let (wb, ub, bb) = ([-0.7, 0.2, 0.3, 0.9], [0.1, -0.5, 0.4, 0.2], [0.3, 0.0, -0.1, 0.4]);
    for (d, (w, u, b)) in [(lstm.forward, (wf, uf, bf)), (lstm.backward, (wb, ub, bb))] {
        set(&mut store, d.input_weights, w);
        set(&mut store, d.hidden_weights, u);
        set(&mut store, d.bias, b);
    }
    let xs = [0.3, -1.2, 0.7, 2.0];
    let out = run(&lstm, &store, &xs.iter().map(|&x| vec![x]).collect::<Vec<_>>(), &[4]);
    let fwd = scalar_lstm(&xs, wf, uf, bf);
    let rev: Vec<f64> = xs.iter().rev().copied().collect();
    let mut bwd = scalar_lstm(&rev, wb, ub, bb);
    bwd.reverse();
    for t in 0..4 {
        assert!((out.get(t, 0) - fwd[t]).abs() < 1e-12);
        assert!((out.get(t, 1) - bwd[t]).abs() < 1e-12);
    }
    // Frozen value of the first forward state.
    assert!((out.get(0, 0) - 0.079_714_838_0).abs() < 1e-9, "{}", out.get(0, 0));
}

#[test]
fn backward_direction_is_forward_on_reversed_input() {
    let mut store = ParamStore::new();
    let lstm = BiLstm::new(&mut store, "l", 3, 4, &mut rng(2)).unwrap();
    for (name, v) in [("w_input", 3), ("w_hidden", 4), ("bias", 1)] {
        let f = store.id(&format!("l.fwd.{name}")).unwrap();
        let b = store.id(&format!("l.bwd.{name}")).unwrap();
        let t = uniform(&mut rng(v as u64), store.value(f).rows(), store.value(f).cols());
        store.set_value(f, t.clone()).unwrap();
        store.set_value(b, t).unwrap();
    }
    let rows: Vec<Vec<f64>> = (0..5).map(|_| uniform(&mut rng(9), 1, 3).into_data()).collect();
    let rows: Vec<Vec<f64>> = rows.iter().enumerate().map(|(i, r)| r.iter().map(|v| v * (i as f64 + 1.0)).collect()).collect();
    let out = run(&lstm, &store, &rows, &[5]);
    let rev: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
    let out_rev = run(&lstm, &store, &rev, &[5]);
    for t in 0..5 {
        for k in 0..4 {
            assert!((out.get(t, 4 + k) - out_rev.get(4 - t, k)).abs() < 1e-12);
        }
    }
}

#[test]
fn batching_with_padding_leaves_each_sentence_unchanged() {
    let mut store = ParamStore::new();
    let lstm = BiLstm::new(&mut store, "l", 3, 5, &mut rng(3)).unwrap();
    let mut r = rng(4);
    let lengths = [4, 1, 6, 3];
    let sents: Vec<Vec<Vec<f64>>> = lengths
        .iter()
        .map(|&n| (0..n).map(|_| uniform(&mut r, 1, 3).into_data()).collect())
        .collect();
    let packed: Vec<Vec<f64>> = sents.iter().flatten().cloned().collect();
    let batched = run(&lstm, &store, &packed, &lengths);
    let mut row = 0;
    for s in &sents {
        let alone = run(&lstm, &store, s, &[s.len()]);
        for t in 0..s.len() {
            for k in 0..10 {
                assert!((alone.get(t, k) - batched.get(row + t, k)).abs() < 1e-9);
            }
        }
        row += s.len();
    }
}

#[test]
fn jemb_round_trip_is_exact() {
    let mut docs = BTreeMap::new();
    docs.insert(
        "a".to_string(),
        vec![Some(Tensor::from_rows(&[vec![0.5, -1.25], vec![3.0, 0.0]]).unwrap()), None],
    );
    docs.insert("b".to_string(), vec![Some(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap())]);
    let emb = PrecomputedEmbeddings { dim: 2, docs };
    let mut bytes = Vec::new();
    emb.write(&mut bytes).unwrap();
    assert_eq!(&bytes[..5], b"JEMB1");
    let back = PrecomputedEmbeddings::read(&bytes[..]).unwrap();
    assert_eq!(back, emb);
    let mut again = Vec::new();
    back.write(&mut again).unwrap();
    assert_eq!(again, bytes);
    assert!(PrecomputedEmbeddings::read(&b"JEMB2xxxx"[..]).is_err());
    assert!(PrecomputedEmbeddings::read(&bytes[..bytes.len() - 1]).is_err());
}
