#![allow(dead_code)]

use drgrade_core::autograd::{Tape, Var};
use drgrade_core::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).unwrap()
}

pub fn random_tensor(s: Shape, r: &mut impl Rng) -> Tensor {
    Tensor::from_vec(s, (0..s.numel()).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error with a 1e-3 floor on the denominator, i.e. tiny gradients
/// are compared with an absolute tolerance of 1e-6 at the 1e-3 threshold.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central finite-difference check of every element of every input.
/// `f` builds a scalar on a fresh tape from the given input variables.
/// Returns the largest relative error seen.
pub fn grad_check(inputs: &[Tensor], step: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).values()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[j] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Reduces any tensor to a scalar through a fixed random weighting, so that
/// every output element carries a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let s = tape.shape(x);
    let w = random_tensor(s, &mut rng(seed ^ 0xABCD));
    let wv = tape.constant(w);
    let prod = tape.broadcast_mul(x, wv).unwrap();
    tape.sum(prod)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random tensor whose entries within each plane are pairwise at least 0.02
/// apart and at least 0.01 away from zero, so finite differences with steps
/// up to 1e-3 never cross a max tie or a relu kink.
pub fn separated_tensor(s: Shape, r: &mut impl Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let hw = s.plane();
    let mut values = Vec::with_capacity(s.numel());
    for _ in 0..s.n() * s.c() {
        let mut plane: Vec<f64> = (0..hw).map(|i| -1.0 + 0.015 + 2.0 * i as f64 / hw as f64).collect();
        plane.shuffle(r);
        values.extend(plane);
    }
    Tensor::from_vec(s, values).unwrap()
}
pub mod model_check;
pub mod oracles;
