//! Finite-difference verification of every differentiable operation.
//!
//! Each op's reverse-mode gradient is compared against central differences
//! (f64, step 1e-4, relative tolerance 1e-4) over 20 random seeds. Inputs
//! are drawn away from kinks so subgradient choices never collide with the
//! numeric probe.

mod common;

use common::{
    check_gradients, mask_with_support, positive, signed_away_from_zero, well_separated,
    CheckInput,
};
use rainsar::tensor::{Graph, Tensor, Var};

fn scalarize(g: &mut Graph<f64>, v: Var) -> Var {
    g.mean_all(v).unwrap()
}

#[test]
fn unary_smooth_ops_match_finite_differences() {
    let cases: &[(&str, fn(&mut Graph<f64>, Var) -> Var)] = &[
        ("neg", |g, v| g.neg(v)),
        ("exp", |g, v| g.exp(v)),
        ("expm1", |g, v| g.expm1(v)),
        ("square", |g, v| g.square(v)),
        ("sigmoid", |g, v| g.sigmoid(v)),
        ("softplus", |g, v| g.softplus(v)),
    ];
    for (name, op) in cases {
        check_gradients(
            name,
            |rng| {
                vec![CheckInput::grad(Tensor::from_vec(
                    &[2, 3],
                    signed_away_from_zero(rng, 6, 0.1, 1.5),
                ))]
            },
            |g, vars| {
                let y = op(g, vars[0]);
                scalarize(g, y)
            },
        );
    }
}

#[test]
fn unary_positive_domain_ops_match_finite_differences() {
    let cases: &[(&str, fn(&mut Graph<f64>, Var) -> Var)] = &[
        ("log", |g, v| g.log(v)),
        ("sqrt", |g, v| g.sqrt(v)),
    ];
    for (name, op) in cases {
        check_gradients(
            name,
            |rng| {
                vec![CheckInput::grad(Tensor::from_vec(
                    &[7],
                    positive(rng, 7, 0.3, 3.0),
                ))]
            },
            |g, vars| {
                let y = op(g, vars[0]);
                scalarize(g, y)
            },
        );
    }
}

#[test]
fn unary_kinked_ops_match_finite_differences_away_from_kink() {
    let cases: &[(&str, fn(&mut Graph<f64>, Var) -> Var)] = &[
        ("abs", |g, v| g.abs(v)),
        ("relu", |g, v| g.relu(v)),
    ];
    for (name, op) in cases {
        check_gradients(
            name,
            |rng| {
                vec![CheckInput::grad(Tensor::from_vec(
                    &[3, 3],
                    signed_away_from_zero(rng, 9, 0.2, 2.0),
                ))]
            },
            |g, vars| {
                let y = op(g, vars[0]);
                scalarize(g, y)
            },
        );
    }
}

#[test]
fn binary_ops_match_finite_differences() {
    check_gradients(
        "add/sub/mul chain",
        |rng| {
            vec![
                CheckInput::grad(Tensor::from_vec(
                    &[2, 2],
                    signed_away_from_zero(rng, 4, 0.1, 2.0),
                )),
                CheckInput::grad(Tensor::from_vec(
                    &[2, 2],
                    signed_away_from_zero(rng, 4, 0.1, 2.0),
                )),
            ]
        },
        |g, vars| {
            let s = g.add(vars[0], vars[1]).unwrap();
            let d = g.sub(vars[0], vars[1]).unwrap();
            let p = g.mul(s, d).unwrap();
            scalarize(g, p)
        },
    );
    check_gradients(
        "div",
        |rng| {
            vec![
                CheckInput::grad(Tensor::from_vec(
                    &[5],
                    signed_away_from_zero(rng, 5, 0.1, 2.0),
                )),
                // Denominator well away from zero.
                CheckInput::grad(Tensor::from_vec(
                    &[5],
                    signed_away_from_zero(rng, 5, 0.6, 2.5),
                )),
            ]
        },
        |g, vars| {
            let q = g.div(vars[0], vars[1]).unwrap();
            scalarize(g, q)
        },
    );
}

#[test]
fn scalar_ops_match_finite_differences() {
    check_gradients(
        "add_scalar/mul_scalar",
        |rng| {
            vec![CheckInput::grad(Tensor::from_vec(
                &[6],
                signed_away_from_zero(rng, 6, 0.1, 2.0),
            ))]
        },
        |g, vars| {
            let a = g.add_scalar(vars[0], 0.7);
            let b = g.mul_scalar(a, -1.3);
            scalarize(g, b)
        },
    );
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    check_gradients(
        "conv2d stride 1 pad 1 with bias",
        |rng| {
            vec![
                CheckInput::grad(Tensor::from_vec(
                    &[1, 2, 5, 5],
                    signed_away_from_zero(rng, 50, 0.05, 1.0),
                )),
                CheckInput::grad(Tensor::from_vec(
                    &[2, 2, 3, 3],
                    signed_away_from_zero(rng, 36, 0.05, 0.6),
                )),
                CheckInput::grad(Tensor::from_vec(
                    &[2],
                    signed_away_from_zero(rng, 2, 0.05, 0.4),
                )),
            ]
        },
        |g, vars| {
            let y = g.conv2d(vars[0], vars[1], Some(vars[2]), 1, 1).unwrap();
            let sq = g.square(y);
            scalarize(g, sq)
        },
    );
    check_gradients(
        "conv2d stride 2 pad 0",
        |rng| {
            vec![
                CheckInput::grad(Tensor::from_vec(
                    &[2, 1, 6, 6],
                    signed_away_from_zero(rng, 72, 0.05, 1.0),
                )),
                CheckInput::grad(Tensor::from_vec(
                    &[3, 1, 2, 2],
                    signed_away_from_zero(rng, 12, 0.05, 0.6),
                )),
            ]
        },
        |g, vars| {
            let y = g.conv2d(vars[0], vars[1], None, 2, 0).unwrap();
            let sq = g.square(y);
            scalarize(g, sq)
        },
    );
}

#[test]
fn transposed_conv_gradients_match_finite_differences() {
    check_gradients(
        "conv2d_transposed k2 s2 with bias",
        |rng| {
            vec![
                CheckInput::grad(Tensor::from_vec(
                    &[1, 3, 3, 3],
                    signed_away_from_zero(rng, 27, 0.05, 1.0),
                )),
                CheckInput::grad(Tensor::from_vec(
                    &[3, 2, 2, 2],
                    signed_away_from_zero(rng, 24, 0.05, 0.6),
                )),
                CheckInput::grad(Tensor::from_vec(
                    &[2],
                    signed_away_from_zero(rng, 2, 0.05, 0.4),
                )),
            ]
        },
        |g, vars| {
            let y = g.conv2d_transposed(vars[0], vars[1], Some(vars[2]), 2).unwrap();
            let sq = g.square(y);
            scalarize(g, sq)
        },
    );
}

#[test]
fn max_pool_gradients_match_finite_differences() {
    check_gradients(
        "max_pool2d 2x2",
        |rng| {
            vec![CheckInput::grad(Tensor::from_vec(
                &[1, 2, 4, 4],
                well_separated(rng, 32, 1.0),
            ))]
        },
        |g, vars| {
            let y = g.max_pool2d(vars[0], 2, 2).unwrap();
            let sq = g.square(y);
            scalarize(g, sq)
        },
    );
}

#[test]
fn concat_and_broadcast_gradients_match_finite_differences() {
    check_gradients(
        "concat_channels + broadcast_scalar_to_map",
        |rng| {
            vec![
                CheckInput::grad(Tensor::from_vec(
                    &[2, 2, 3, 3],
                    signed_away_from_zero(rng, 36, 0.05, 1.0),
                )),
                CheckInput::grad(Tensor::from_vec(
                    &[2, 3],
                    signed_away_from_zero(rng, 6, 0.05, 1.0),
                )),
            ]
        },
        |g, vars| {
            let maps = g.broadcast_scalar_to_map(vars[1], 3, 3).unwrap();
            let cat = g.concat_channels(&[vars[0], maps]).unwrap();
            let sq = g.square(cat);
            scalarize(g, sq)
        },
    );
}

#[test]
fn masked_reductions_match_finite_differences() {
    check_gradients(
        "masked_mean_per_sample",
        |rng| {
            vec![
                CheckInput::grad(Tensor::from_vec(
                    &[3, 1, 3, 3],
                    signed_away_from_zero(rng, 27, 0.05, 1.5),
                )),
                CheckInput::constant(Tensor::from_vec(&[3, 1, 3, 3], mask_with_support(rng, 27))),
            ]
        },
        |g, vars| {
            let m = g.masked_mean_per_sample(vars[0], vars[1]).unwrap();
            let sq = g.square(m);
            scalarize(g, sq)
        },
    );
    check_gradients(
        "masked_max_per_sample",
        |rng| {
            vec![
                CheckInput::grad(Tensor::from_vec(
                    &[2, 1, 3, 3],
                    well_separated(rng, 18, 1.0),
                )),
                CheckInput::constant(Tensor::from_vec(&[2, 1, 3, 3], mask_with_support(rng, 18))),
            ]
        },
        |g, vars| {
            let m = g.masked_max_per_sample(vars[0], vars[1]).unwrap();
            let sq = g.square(m);
            scalarize(g, sq)
        },
    );
}

#[test]
fn composite_loss_expression_matches_finite_differences() {
    // The shape of the regression loss: sqrt of a masked mean of squared
    // residuals, averaged over the batch — the deepest chain the trainer
    // differentiates.
    check_gradients(
        "sqrt(masked mean of squared residual)",
        |rng| {
            vec![
                CheckInput::grad(Tensor::from_vec(
                    &[2, 1, 4, 4],
                    signed_away_from_zero(rng, 32, 0.1, 1.5),
                )),
                CheckInput::constant(Tensor::from_vec(
                    &[2, 1, 4, 4],
                    positive(rng, 32, 0.0, 1.0),
                )),
                CheckInput::constant(Tensor::from_vec(&[2, 1, 4, 4], mask_with_support(rng, 32))),
            ]
        },
        |g, vars| {
            let resid = g.sub(vars[0], vars[1]).unwrap();
            let sq = g.square(resid);
            let mse = g.masked_mean_per_sample(sq, vars[2]).unwrap();
            let rmse = g.sqrt(mse);
            scalarize(g, rmse)
        },
    );
}

#[test]
fn full_conv_stack_matches_finite_differences() {
    // Encoder/decoder in miniature: conv → relu → pool → transposed conv →
    // concat skip → conv 1×1 → sigmoid.
    check_gradients(
        "conv stack",
        |rng| {
            vec![
                CheckInput::grad(Tensor::from_vec(
                    &[1, 2, 4, 4],
                    well_separated(rng, 32, 0.7),
                )),
                CheckInput::grad(Tensor::from_vec(
                    &[3, 2, 3, 3],
                    signed_away_from_zero(rng, 54, 0.05, 0.5),
                )),
                CheckInput::grad(Tensor::from_vec(
                    &[3, 3, 2, 2],
                    signed_away_from_zero(rng, 36, 0.05, 0.5),
                )),
                CheckInput::grad(Tensor::from_vec(
                    &[1, 5, 1, 1],
                    signed_away_from_zero(rng, 5, 0.05, 0.5),
                )),
            ]
        },
        |g, vars| {
            let c1 = g.conv2d(vars[0], vars[1], None, 1, 1).unwrap();
            let a1 = g.relu(c1);
            let p = g.max_pool2d(a1, 2, 2).unwrap();
            let up = g.conv2d_transposed(p, vars[2], None, 2).unwrap();
            let cat = g.concat_channels(&[up, vars[0]]).unwrap();
            let head = g.conv2d(cat, vars[3], None, 1, 0).unwrap();
            let y = g.sigmoid(head);
            scalarize(g, y)
        },
    );
}
