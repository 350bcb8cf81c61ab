//! Finite-difference check of a whole model's parameter gradients.

use drgrade_core::autograd::Tape;
use drgrade_core::backbone::{model_loss, ModelAssembly};
use drgrade_core::tensor::Tensor;

pub const AUX_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default)]
pub struct ModelCheck {
    /// Elements checked.
    pub total: usize,
    /// Worst relative error where both perturbed evaluations stayed on the
    /// base point's smooth piece.
    pub worst_smooth: f64,
    /// Elements whose perturbation crossed a relu or max kink.
    pub kinked: usize,
    /// Worst relative error of the kinked elements, re-checked with a step
    /// small enough to stay on one piece.
    pub worst_kinked: f64,
}

impl ModelCheck {
    pub fn worst(&self) -> f64 {
        self.worst_smooth.max(self.worst_kinked)
    }
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn eval(model: &ModelAssembly, images: &Tensor, labels: &[usize], seed: u64) -> (f64, Vec<usize>) {
    let mut tape = Tape::new();
    let (loss, _) = model_loss(&mut tape, images, labels, model, true, seed, AUX_WEIGHT).unwrap();
    (tape.value(loss).values()[0], tape.branch_pattern())
}

/// Central differences with `step` on every parameter element. Training-mode
/// forward with a fixed dropout seed, so the mask is identical across
/// evaluations.
pub fn model_grad_check(model: &ModelAssembly, images: &Tensor, labels: &[usize], seed: u64, step: f64) -> ModelCheck {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let (loss, _) = model_loss(&mut tape, images, labels, &m, true, seed, AUX_WEIGHT).unwrap();
    tape.backward(loss).unwrap();
    let base = tape.branch_pattern();
    m.collect_grads(&tape);
    let mut out = ModelCheck::default();
    let central = |pi: usize, j: usize, h: f64| {
        let mut plus = m.clone();
        plus.params_mut()[pi].tensor.values_mut()[j] += h;
        let mut minus = m.clone();
        minus.params_mut()[pi].tensor.values_mut()[j] -= h;
        let (fp, pp) = eval(&plus, images, labels, seed);
        let (fm, pm) = eval(&minus, images, labels, seed);
        ((fp - fm) / (2.0 * h), pp == base && pm == base)
    };
    for pi in 0..m.params().len() {
        let analytic = m.params()[pi].tensor.grad.clone().unwrap();
        for (j, &a) in analytic.iter().enumerate() {
            out.total += 1;
            let (numeric, smooth) = central(pi, j, step);
            if smooth {
                out.worst_smooth = out.worst_smooth.max(rel(a, numeric));
                continue;
            }
            out.kinked += 1;
            let mut h = step;
            let err = loop {
                h /= 10.0;
                let (numeric, smooth) = central(pi, j, h);
                if smooth || h < 1e-9 {
                    break rel(a, numeric);
                }
            };
            out.worst_kinked = out.worst_kinked.max(err);
        }
    }
    out
}
