//! Every primitive's backward pass against central finite differences.

mod primitives;

use jmie_autodiff::{Axis, Graph};
use primitives::{cases, dim, random, random_mask, worst_error, TOL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn primitive_gradients() {
    for case in cases() {
        let (err, at) = worst_error(&case);
        assert!(err <= TOL, "{}: rel err {err} at {at}", case.name);
    }
}

#[test]
fn every_case_checks_something() {
    let names: Vec<&str> = cases().iter().map(|c| c.name).collect();
    for n in ["matmul", "softmax_rows", "losses", "dropout"] {
        assert!(names.contains(&n));
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (r, c) = (dim(&mut rng), dim(&mut rng));
        let mask = random_mask(&mut rng, r, c);
        let mut g = Graph::new();
        let x = g.input(random(&mut rng, r, c).map(|v| 5.0 * v));
        let p = g.softmax(x, Axis::Cols, Some(&mask)).unwrap();
        let v = g.value(p);
        for i in 0..r {
            let s: f64 = v.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(v.row(i).iter().all(|&p| p >= 0.0));
            for j in 0..c {
                if !mask[i * c + j] {
                    assert_eq!(v.get(i, j), 0.0);
                }
            }
        }
    }
}
