#![allow(dead_code)]

use depthmotion::diff::gradcheck::{central_diff, rel_err};
use depthmotion::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Denominator floor for relative gradient errors.
pub const FLOOR: f64 = 1e-6;
pub const STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform in [-2,2] but at least `gap` away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(gap..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Input to a gradient check: a shape and its values.
#[derive(Debug, Clone)]
pub struct Input {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn input(shape: &[usize], values: Vec<f64>) -> Input {
    assert_eq!(shape.iter().product::<usize>(), values.len());
    Input {
        shape: shape.to_vec(),
        values,
    }
}

/// Largest relative error between the tape's gradient of the scalar `f` and
/// central differences, over every element of every input.
pub fn max_grad_error(inputs: &[Input], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|i| tape.variable(&i.shape, i.values.clone())).collect();
    let root = f(&tape, &vars);
    let grads = tape.backward(root).expect("scalar root");
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |which: usize, values: &[f64]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .enumerate()
            .map(|(k, i)| {
                let v = if k == which { values.to_vec() } else { i.values.clone() };
                tape.constant(&i.shape, v)
            })
            .collect();
        f(&tape, &vars).item()
    };
    let mut worst = 0.0f64;
    for (k, inp) in inputs.iter().enumerate() {
        for j in 0..inp.values.len() {
            let numeric = central_diff(&mut |x| eval(k, x), &inp.values, j, STEP);
            worst = worst.max(rel_err(analytic[k][j], numeric, FLOOR));
        }
    }
    worst
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct amount.
pub fn weighted_sum<'t>(v: Var<'t>) -> Var<'t> {
    let n = v.len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 101) as f64 / 101.0).collect();
    (v.reshape(&[n]) * v.tape().constant(&[n], w)).sum()
}
