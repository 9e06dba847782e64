mod common;

use std::collections::BTreeSet;

use common::gradcheck::{self, BLOCKS, CHECKED_SCHEMES, TOL};
use irl_core::autodiff::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..3 {
        for (name, err) in gradcheck::per_op(seed) {
            assert!(err < TOL, "{name} (seed {seed}): relative error {err:e}");
        }
    }
}

#[test]
fn fifty_random_graphs_match_finite_differences() {
    let mut seen = BTreeSet::new();
    for seed in 0..50 {
        let (ops, err) = gradcheck::random_graph(seed);
        assert!(err < TOL, "graph {seed} {ops:?}: relative error {err:e}");
        seen.extend(ops);
    }
    assert!(seen.len() > BLOCKS.len() / 2, "random graphs exercised only {seen:?}");
}

#[test]
fn scheme_losses_match_finite_differences() {
    let errs: Vec<_> = CHECKED_SCHEMES.iter().map(|&k| (k, gradcheck::scheme_check(k, 4))).collect();
    for (kind, err) in errs {
        assert!(err < TOL, "{kind}: relative error {err:e}");
    }
}

#[test]
fn gradient_reversal_contract() {
    for (seed, beta) in [(1, 1.0), (2, 0.5), (3, 2.0)] {
        let err = gradcheck::reversal_check(seed, beta);
        assert!(err < TOL, "beta {beta}: relative error {err:e}");
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let (m, k, n) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..6));
        let a: Vec<f64> = (0..m * k).map(|_| r.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let av = g.constant(Tensor::matrix(m, k, a.clone()).unwrap());
        let bv = g.constant(Tensor::matrix(k, n, b.clone()).unwrap());
        let c = g.matmul(av, bv).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                assert!((g.data(c)[i * n + j] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let (_, err) = gradcheck::random_graph(7);
        err.to_bits()
    };
    assert_eq!(run(), run());
}

