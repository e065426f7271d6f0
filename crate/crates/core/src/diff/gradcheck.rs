//! Central finite-difference checks of every differentiable op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-8;

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Reduces an arbitrary output to a scalar with fixed random weights so that
/// every output element contributes to the checked gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(&out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
    let m = tape.mul(&out, &w).unwrap();
    tape.sum(&m)
}

fn eval(inputs: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let root = project(&mut tape, out, 99);
    tape.value(&root).item()
}

fn check(inputs: Vec<Tensor>, build: &Build) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let root = project(&mut tape, out, 99);
    let grads = tape.backward(root).unwrap();

    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, &inputs[k]);
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            assert!(
                diff <= ABS_FLOOR || diff <= REL_TOL * scale,
                "input {k} element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -2.0, 2.0, &mut rng)
}

#[test]
fn matmul_gradient() {
    check(vec![rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)], &|t, v| {
        t.matmul(&v[0], &v[1]).unwrap()
    });
}

#[test]
fn matmul_t_gradient() {
    check(vec![rand_t(&[3, 4], 3), rand_t(&[5, 4], 4)], &|t, v| {
        t.matmul_t(&v[0], &v[1]).unwrap()
    });
}

#[test]
fn elementwise_binary_gradients() {
    let a = rand_t(&[2, 3], 5);
    let b = rand_t(&[2, 3], 6);
    check(vec![a.clone(), b.clone()], &|t, v| t.add(&v[0], &v[1]).unwrap());
    check(vec![a.clone(), b.clone()], &|t, v| t.sub(&v[0], &v[1]).unwrap());
    check(vec![a, b], &|t, v| t.mul(&v[0], &v[1]).unwrap());
}

#[test]
fn add_row_gradient() {
    check(vec![rand_t(&[4, 3], 7), rand_t(&[3], 8)], &|t, v| {
        t.add_row(&v[0], &v[1]).unwrap()
    });
}

#[test]
fn unary_gradients() {
    let a = rand_t(&[3, 3], 9);
    check(vec![a.clone()], &|t, v| t.scale(&v[0], -1.7));
    check(vec![a.clone()], &|t, v| t.gelu(&v[0]));
    check(vec![a.clone()], &|t, v| t.exp(&v[0]));
    check(vec![a.clone()], &|t, v| t.softplus(&v[0]));
    check(vec![a], &|t, v| t.log_softmax(&v[0]));
}

#[test]
fn layer_norm_gradient() {
    check(
        vec![rand_t(&[3, 5], 10), rand_t(&[5], 11), rand_t(&[5], 12)],
        &|t, v| t.layer_norm(&v[0], &v[1], &v[2]).unwrap(),
    );
}

#[test]
fn embedding_gradient() {
    check(vec![rand_t(&[4, 3], 13)], &|t, v| {
        t.embedding(&v[0], &[2, 0, 2, 3, 1]).unwrap()
    });
}

#[test]
fn causal_softmax_gradient() {
    check(vec![rand_t(&[4, 4], 14)], &|t, v| t.causal_softmax(&v[0]).unwrap());
}

#[test]
fn column_ops_gradient() {
    check(vec![rand_t(&[3, 6], 15)], &|t, v| t.cols(&v[0], 2, 3).unwrap());
    check(vec![rand_t(&[3, 2], 16), rand_t(&[3, 4], 17)], &|t, v| {
        t.concat_cols(&[v[1], v[0], v[1]]).unwrap()
    });
}

#[test]
fn reductions_gradient() {
    check(vec![rand_t(&[4, 3], 18)], &|t, v| t.gather(&v[0], &[2, 0, 1, 2]).unwrap());
    check(vec![rand_t(&[4, 3], 19)], &|t, v| t.row_sum(&v[0]).unwrap());
    check(vec![rand_t(&[5], 20)], &|t, v| {
        t.masked_sum(&v[0], &[true, false, true, true, false]).unwrap()
    });
}

#[test]
fn cross_entropy_gradient() {
    check(vec![rand_t(&[4, 5], 21)], &|t, v| {
        let lp = t.log_softmax(&v[0]);
        t.cross_entropy(&lp, &[1, 4, 0, 2], &[false, true, true, true])
            .unwrap()
    });
}

#[test]
fn log_softmax_rows_sum_to_one() {
    let x = rand_t(&[1, 7], 22);
    let lp = kernels::log_softmax(&x);
    let total: f64 = lp.data().iter().map(|v| v.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}
