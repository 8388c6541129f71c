//! Shared helpers for the integration tests: a deterministic RNG, a central
//! finite-difference gradient checker, and tolerance assertions.

#![allow(dead_code)]

use glvm_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn assert_close(got: f64, want: f64, tol: f64, what: &str) {
    assert!(
        (got - want).abs() <= tol,
        "{what}: got {got}, want {want} (tol {tol})"
    );
}

pub fn assert_all_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol,
            "{what}[{i}]: got {g}, want {w} (tol {tol})"
        );
    }
}

/// Central finite-difference gradient check in f64.
///
/// `build` constructs the scalar loss from leaf tensors created from
/// `inputs`; it is called once with a recording graph for the analytic
/// gradients and 2*numel times with inference graphs for the differences.
/// Per element the check is |ga - gn| <= tol * max(|ga|, |gn|, floor).
pub fn gradcheck(
    build: &dyn Fn(&Graph<f64>, &[Tensor<f64>]) -> Tensor<f64>,
    inputs: &[(Vec<usize>, Vec<f64>)],
    h: f64,
    tol: f64,
    what: &str,
) {
    let g = Graph::new();
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| Tensor::param(shape.clone(), data.clone()))
        .collect();
    let loss = build(&g, &leaves);
    assert_eq!(loss.numel(), 1, "{what}: loss must be scalar");
    g.backward(&loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|t| t.grad_or_zeros()).collect();

    let eval = |datas: &[Vec<f64>]| -> f64 {
        let g = Graph::inference();
        let leaves: Vec<Tensor<f64>> = inputs
            .iter()
            .zip(datas)
            .map(|((shape, _), data)| Tensor::from_vec(shape.clone(), data.clone()))
            .collect();
        build(&g, &leaves).item()
    };

    let floor = 1e-6;
    for (pi, (_, data)) in inputs.iter().enumerate() {
        for ei in 0..data.len() {
            let mut plus: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
            let mut minus = plus.clone();
            plus[pi][ei] += h;
            minus[pi][ei] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ga = analytic[pi][ei];
            let scale = ga.abs().max(numeric.abs()).max(floor);
            assert!(
                (ga - numeric).abs() <= tol * scale,
                "{what}: input {pi} elem {ei}: analytic {ga} vs numeric {numeric} (rel {})",
                (ga - numeric).abs() / scale
            );
        }
    }
}
