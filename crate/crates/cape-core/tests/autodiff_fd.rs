//! Finite-difference verification of every differentiable primitive.
//!
//! Random conforming inputs, scalar-reduced outputs, central differences at
//! step 1e-5, relative error below 1e-6. Inputs avoid relu kinks so the
//! difference quotient stays on one side of the subgradient.

use std::sync::Arc;

use cape_core::autodiff::{GatherPlan, Tape, Tensor, Var, grad_check};
use cape_core::rng::stream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let values: Vec<f64> = (0..rows * cols)
        .map(|_| {
            // keep magnitudes in [0.05, 2] so kinks and cancellation stay away
            let mag = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) { mag } else { -mag }
        })
        .collect();
    Tensor::new(vec![rows, cols], values).unwrap()
}

fn check<F>(name: &str, point: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> cape_core::Result<Var>,
{
    let report = grad_check(f, point, STEP, TOL).expect("grad_check ran");
    assert!(
        report.ok(),
        "{name}: max relative error {} exceeds {TOL}",
        report.max_rel_err()
    );
}

#[test]
fn matmul_matches_finite_differences() {
    let mut rng = stream(100, &[0]);
    for trial in 0..3 {
        let (m, k, n) = (2 + trial, 3, 2 + (trial % 2));
        let point = vec![random_tensor(&mut rng, m, k), random_tensor(&mut rng, k, n)];
        check("matmul", &point, |tape, v| {
            let y = tape.matmul(v[0], v[1])?;
            tape.sum_all(y)
        });
    }
}

#[test]
fn add_and_mul_match_finite_differences() {
    let mut rng = stream(100, &[1]);
    let point = vec![random_tensor(&mut rng, 3, 4), random_tensor(&mut rng, 3, 4)];
    check("add", &point, |tape, v| {
        let y = tape.add(v[0], v[1])?;
        tape.sum_all(y)
    });
    check("mul", &point, |tape, v| {
        let y = tape.mul(v[0], v[1])?;
        tape.sum_all(y)
    });
}

#[test]
fn affine_matches_finite_differences() {
    let mut rng = stream(100, &[2]);
    let point = vec![
        random_tensor(&mut rng, 4, 3),
        random_tensor(&mut rng, 3, 5),
        random_tensor(&mut rng, 1, 5),
    ];
    check("affine", &point, |tape, v| {
        let y = tape.affine(v[0], v[1], v[2])?;
        let y = tape.sigmoid(y)?;
        tape.sum_all(y)
    });
}

#[test]
fn relu_matches_finite_differences() {
    let mut rng = stream(100, &[3]);
    let point = vec![random_tensor(&mut rng, 3, 5)];
    check("relu", &point, |tape, v| {
        let y = tape.relu(v[0])?;
        // square so the gradient is value-dependent, not all-ones
        let y2 = tape.mul(y, y)?;
        tape.sum_all(y2)
    });
}

#[test]
fn sigmoid_matches_finite_differences() {
    let mut rng = stream(100, &[4]);
    let point = vec![random_tensor(&mut rng, 2, 6)];
    check("sigmoid", &point, |tape, v| {
        let y = tape.sigmoid(v[0])?;
        let y2 = tape.mul(y, y)?;
        tape.sum_all(y2)
    });
}

#[test]
fn softmax_masked_matches_finite_differences() {
    let mut rng = stream(100, &[5]);
    let point = vec![random_tensor(&mut rng, 3, 6)];
    let mask: Vec<bool> = (0..18).map(|i| i % 5 == 0).collect();
    let weights = random_tensor(&mut rng, 3, 6);
    check("softmax_masked", &point, move |tape, v| {
        let p = tape.softmax_masked(v[0], Arc::new(mask.clone()))?;
        // weighted sum so every probability has a distinct gradient path
        let w = tape.mul_const(p, weights.clone())?;
        tape.sum_all(w)
    });
}

#[test]
fn layer_norm_matches_finite_differences() {
    let mut rng = stream(100, &[6]);
    let point = vec![
        random_tensor(&mut rng, 3, 8),
        random_tensor(&mut rng, 1, 8),
        random_tensor(&mut rng, 1, 8),
    ];
    check("layer_norm", &point, |tape, v| {
        let y = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let y2 = tape.mul(y, y)?;
        tape.sum_all(y2)
    });
}

#[test]
fn concat_and_split_match_finite_differences() {
    let mut rng = stream(100, &[7]);
    let point = vec![random_tensor(&mut rng, 2, 4), random_tensor(&mut rng, 3, 4)];
    check("concat_rows", &point, |tape, v| {
        let y = tape.concat_rows(&[v[0], v[1]])?;
        let y2 = tape.mul(y, y)?;
        tape.sum_all(y2)
    });
    let point = vec![random_tensor(&mut rng, 5, 3)];
    check("split_rows", &point, |tape, v| {
        let (a, b) = tape.split_rows(v[0], 2)?;
        let a2 = tape.mul(a, a)?;
        let sa = tape.sum_all(a2)?;
        let b2 = tape.mul(b, b)?;
        let sb = tape.sum_all(b2)?;
        let sb3 = tape.scale(sb, 3.0)?;
        tape.add(sa, sb3)
    });
}

#[test]
fn mean_rows_matches_finite_differences() {
    let mut rng = stream(100, &[8]);
    let point = vec![random_tensor(&mut rng, 4, 3)];
    check("mean_rows", &point, |tape, v| {
        let y = tape.mean_rows(v[0])?;
        let y2 = tape.mul(y, y)?;
        tape.sum_all(y2)
    });
}

#[test]
fn transpose_matches_finite_differences() {
    let mut rng = stream(100, &[9]);
    let point = vec![random_tensor(&mut rng, 3, 5), random_tensor(&mut rng, 3, 5)];
    check("transpose", &point, |tape, v| {
        let t = tape.transpose(v[0])?;
        let y = tape.matmul(v[1], t)?;
        let y2 = tape.mul(y, y)?;
        tape.sum_all(y2)
    });
}

#[test]
fn gather_rows_matches_finite_differences() {
    let mut rng = stream(100, &[10]);
    let point = vec![random_tensor(&mut rng, 6, 3)];
    let plan = Arc::new(
        GatherPlan::new(
            3,
            vec![
                Some(0),
                Some(2),
                None,
                Some(2),
                Some(2),
                Some(5),
                None,
                Some(1),
                Some(4),
            ],
        )
        .unwrap(),
    );
    check("gather_rows", &point, move |tape, v| {
        let y = tape.gather_rows(v[0], plan.clone())?;
        let y2 = tape.mul(y, y)?;
        tape.sum_all(y2)
    });
}

#[test]
fn sum_all_matches_finite_differences() {
    let mut rng = stream(100, &[11]);
    let point = vec![random_tensor(&mut rng, 3, 3)];
    check("sum_all", &point, |tape, v| {
        let y = tape.mul(v[0], v[0])?;
        tape.sum_all(y)
    });
}

#[test]
fn composite_relu_matmul_matches_finite_differences() {
    let mut rng = stream(100, &[12]);
    let point = vec![random_tensor(&mut rng, 4, 4), random_tensor(&mut rng, 4, 4)];
    check("sum(relu(A·B))", &point, |tape, v| {
        let y = tape.matmul(v[0], v[1])?;
        let r = tape.relu(y)?;
        tape.sum_all(r)
    });
}

#[test]
fn logit_matches_finite_differences() {
    let mut rng = stream(100, &[13]);
    let values: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..0.95)).collect();
    let point = vec![Tensor::new(vec![4, 2], values).unwrap()];
    check("logit", &point, |tape, v| {
        let y = tape.logit(v[0], 1e-3)?;
        let y2 = tape.mul(y, y)?;
        tape.sum_all(y2)
    });
}

#[test]
fn sine_embed_matches_finite_differences() {
    let mut rng = stream(100, &[14]);
    let values: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..0.9)).collect();
    let point = vec![Tensor::new(vec![3, 2], values).unwrap()];
    let weights = random_tensor(&mut rng, 3, 16);
    check("sine_embed", &point, move |tape, v| {
        let e = tape.sine_embed(v[0], 16)?;
        let w = tape.mul_const(e, weights.clone())?;
        tape.sum_all(w)
    });
}
