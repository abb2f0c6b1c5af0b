//! Shared helpers for the integration tests.
#![allow(dead_code)]

use rainsar::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step size for central finite differences (f64).
pub const FD_STEP: f64 = 1e-4;
/// Maximum allowed relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Seeds checked per operation.
pub const FD_SEEDS: u64 = 20;

/// One differentiable (or constant) input to a gradient check.
pub struct CheckInput {
    pub value: Tensor<f64>,
    /// Verify gradients for this input (constants such as masks set false).
    pub check: bool,
}

impl CheckInput {
    pub fn grad(value: Tensor<f64>) -> Self {
        CheckInput { value, check: true }
    }
    pub fn constant(value: Tensor<f64>) -> Self {
        CheckInput {
            value,
            check: false,
        }
    }
}

/// Verify reverse-mode gradients of `build` against central finite
/// differences, over `FD_SEEDS` random input draws.
///
/// `build` must leaf nothing itself: it receives one `Var` per input (leafed
/// with `requires_grad` = `check`) and returns a scalar loss node. Relative
/// error uses `|a − n| / max(1, |a|, |n|)` so that near-zero gradients are
/// compared absolutely.
pub fn check_gradients(
    name: &str,
    make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<CheckInput>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) {
    for seed in 0..FD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0x51AD_0000 + seed);
        let inputs = make_inputs(&mut rng);

        // Analytic gradients.
        let mut g: Graph<f64> = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|i| g.leaf(i.value.clone(), i.check))
            .collect();
        let loss = build(&mut g, &vars);
        assert_eq!(
            g.value(loss).numel(),
            1,
            "{name}: build must return a scalar loss"
        );
        g.backward(loss).expect("backward");
        let analytic: Vec<Option<Vec<f64>>> = vars
            .iter()
            .map(|v| g.grad(*v).map(|t| t.data().to_vec()))
            .collect();

        let eval = |tensors: &[Tensor<f64>]| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let vars: Vec<Var> = tensors
                .iter()
                .zip(&inputs)
                .map(|(t, i)| g.leaf(t.clone(), i.check))
                .collect();
            let loss = build(&mut g, &vars);
            g.value(loss).item()
        };

        let base: Vec<Tensor<f64>> = inputs.iter().map(|i| i.value.clone()).collect();
        for (ii, input) in inputs.iter().enumerate() {
            if !input.check {
                continue;
            }
            let grad = analytic[ii]
                .as_ref()
                .unwrap_or_else(|| panic!("{name}: no gradient for input {ii} (seed {seed})"));
            for j in 0..input.value.numel() {
                let mut plus = base.clone();
                plus[ii].data_mut()[j] += FD_STEP;
                let mut minus = base.clone();
                minus[ii].data_mut()[j] -= FD_STEP;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
                let a = grad[j];
                let denom = 1.0f64.max(a.abs()).max(numeric.abs());
                let rel = (a - numeric).abs() / denom;
                assert!(
                    rel < FD_TOLERANCE,
                    "{name}: input {ii} element {j} seed {seed}: \
                     analytic {a:.10e} vs numeric {numeric:.10e} (rel {rel:.3e})"
                );
            }
        }
    }
}

/// Random values in ±[lo, hi] — bounded away from zero so kinked ops
/// (relu, abs, sqrt) are never probed across their corner.
pub fn signed_away_from_zero(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Random positive values in [lo, hi].
pub fn positive(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// A shuffled grid of mutually well-separated values (pairwise gaps well
/// above the finite-difference step), so max-taking ops keep a stable
/// argmax under perturbation.
pub fn well_separated(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    let mut vals: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0) * 0.05 * scale + rng.gen_range(-0.01..0.01) * scale)
        .collect();
    // Fisher–Yates shuffle.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    vals
}

/// Random 0/1 mask with at least one 1 (so masked reductions have support).
pub fn mask_with_support(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut m: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(0.6) { 1.0 } else { 0.0 })
        .collect();
    if m.iter().all(|v| *v == 0.0) {
        let k = rng.gen_range(0..n);
        m[k] = 1.0;
    }
    m
}

pub fn assert_close(actual: f64, expected: f64, tol: f64, what: &str) {
    assert!(
        (actual - expected).abs() <= tol,
        "{what}: got {actual:.12e}, expected {expected:.12e} (tol {tol:.1e})"
    );
}

pub fn assert_rel_close(actual: f64, expected: f64, rel_tol: f64, what: &str) {
    let denom = expected.abs().max(1e-300);
    let rel = (actual - expected).abs() / denom;
    assert!(
        rel <= rel_tol,
        "{what}: got {actual:.12e}, expected {expected:.12e} (rel {rel:.3e})"
    );
}
