//! Naive loop implementations of the attention equations and evaluation
//! metrics, written directly from their definitions without the tape or the
//! library code paths. Shared by the unit tests and the acceptance suite.
#![allow(dead_code)]

use drgrade_core::tensor::{Shape, Tensor};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain 1x1 conv: `w` is row-major `c_out x c_in`.
pub fn conv1x1(x: &Tensor, w: &[f64], b: &[f64]) -> Tensor {
    let s = x.shape();
    let c_out = b.len();
    Tensor::from_fn(Shape::new(s.n(), c_out, s.h(), s.w()).unwrap(), |n, o, y, xx| {
        let mut acc = b[o];
        for i in 0..s.c() {
            acc += w[o * s.c() + i] * x.at(n, i, y, xx);
        }
        acc
    })
}

/// Channel attention followed by spatial attention.
pub fn gab(x: &Tensor, wa: &[f64], ba: &[f64], wb: &[f64], bb: &[f64]) -> Tensor {
    let s = x.shape();
    let (c, hidden) = (s.c(), ba.len());
    let hw = (s.h() * s.w()) as f64;
    let mut ch = x.clone();
    for n in 0..s.n() {
        let mut gap = vec![0.0; c];
        for (ci, g) in gap.iter_mut().enumerate() {
            for y in 0..s.h() {
                for xx in 0..s.w() {
                    *g += x.at(n, ci, y, xx);
                }
            }
            *g /= hw;
        }
        let mut hid = vec![0.0; hidden];
        for j in 0..hidden {
            let mut acc = ba[j];
            for ci in 0..c {
                acc += wa[j * c + ci] * gap[ci];
            }
            hid[j] = acc.max(0.0);
        }
        for ci in 0..c {
            let mut acc = bb[ci];
            for j in 0..hidden {
                acc += wb[ci * hidden + j] * hid[j];
            }
            let a = sig(acc);
            for y in 0..s.h() {
                for xx in 0..s.w() {
                    let idx = s.index(n, ci, y, xx);
                    ch.values_mut()[idx] = a * x.at(n, ci, y, xx);
                }
            }
        }
    }
    let mut out = ch.clone();
    for n in 0..s.n() {
        for y in 0..s.h() {
            for xx in 0..s.w() {
                let mut m = 0.0;
                for ci in 0..c {
                    m += ch.at(n, ci, y, xx);
                }
                let a = sig(m / c as f64);
                for ci in 0..c {
                    let idx = s.index(n, ci, y, xx);
                    out.values_mut()[idx] = ch.at(n, ci, y, xx) * a;
                }
            }
        }
    }
    out
}

pub struct CabOracle {
    pub out: Tensor,
    /// `scores[n][i]`
    pub scores: Vec<Vec<f64>>,
    pub class_maps: Tensor,
    pub attention: Tensor,
}

/// Category attention on an already projected `f_prime` (n, kL, h, w).
pub fn cab_from_projection(x: &Tensor, f_prime: &Tensor, k: usize, classes: usize) -> CabOracle {
    let s = f_prime.shape();
    let (h, w) = (s.h(), s.w());
    let mut scores = vec![vec![0.0; classes]; s.n()];
    let class_maps = Tensor::from_fn(Shape::new(s.n(), classes, h, w).unwrap(), |n, i, y, xx| {
        let mut acc = 0.0;
        for j in 0..k {
            acc += f_prime.at(n, i * k + j, y, xx);
        }
        acc / k as f64
    });
    for (n, row) in scores.iter_mut().enumerate() {
        for (i, sc) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..k {
                let mut m = f64::NEG_INFINITY;
                for y in 0..h {
                    for xx in 0..w {
                        m = m.max(f_prime.at(n, i * k + j, y, xx));
                    }
                }
                acc += m;
            }
            *sc = acc / k as f64;
        }
    }
    let attention = Tensor::from_fn(Shape::new(s.n(), 1, h, w).unwrap(), |n, _, y, xx| {
        let mut acc = 0.0;
        for i in 0..classes {
            acc += class_maps.at(n, i, y, xx);
        }
        acc / classes as f64
    });
    let out = Tensor::from_fn(x.shape(), |n, c, y, xx| x.at(n, c, y, xx) * attention.at(n, 0, y, xx));
    CabOracle {
        out,
        scores,
        class_maps,
        attention,
    }
}

pub fn cab(x: &Tensor, wk: &[f64], bk: &[f64], k: usize, classes: usize) -> CabOracle {
    cab_from_projection(x, &conv1x1(x, wk, bk), k, classes)
}

/// Per-class rates computed by walking raw (truth, prediction) pairs.
#[derive(Debug)]
pub struct PairMetrics {
    pub accuracy: f64,
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
    pub precision: Vec<f64>,
    pub f1: Vec<f64>,
}

pub fn pair_metrics(truths: &[usize], preds: &[usize], classes: usize) -> PairMetrics {
    let n = truths.len();
    let correct = truths.iter().zip(preds).filter(|(t, p)| t == p).count();
    let div = |a: usize, b: f64| if b == 0.0 { 0.0 } else { a as f64 / b };
    let mut out = PairMetrics {
        accuracy: div(correct, n as f64),
        sensitivity: vec![],
        specificity: vec![],
        precision: vec![],
        f1: vec![],
    };
    for c in 0..classes {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&t, &p) in truths.iter().zip(preds) {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        out.sensitivity.push(div(tp, (tp + fn_) as f64));
        out.specificity.push(div(tn, (tn + fp) as f64));
        out.precision.push(div(tp, (tp + fp) as f64));
        out.f1.push(div(tp, tp as f64 + 0.5 * (fn_ + fp) as f64));
    }
    out
}

/// Expands a confusion matrix into (truth, prediction) pairs.
pub fn pairs_of(rows: &[Vec<u64>]) -> (Vec<usize>, Vec<usize>) {
    let (mut t, mut p) = (vec![], vec![]);
    for (i, row) in rows.iter().enumerate() {
        for (j, &n) in row.iter().enumerate() {
            for _ in 0..n {
                t.push(i);
                p.push(j);
            }
        }
    }
    (t, p)
}

/// Quadratic weighted kappa from explicit W, O and E matrices.
pub fn qwk_cells(rows: &[Vec<u64>]) -> f64 {
    let l = rows.len();
    let total: u64 = rows.iter().flatten().sum();
    let mut w = vec![vec![0.0; l]; l];
    let mut o = vec![vec![0.0; l]; l];
    let mut e = vec![vec![0.0; l]; l];
    let hist_true: Vec<f64> = (0..l).map(|i| rows[i].iter().sum::<u64>() as f64).collect();
    let hist_pred: Vec<f64> = (0..l).map(|j| rows.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    for i in 0..l {
        for j in 0..l {
            w[i][j] = ((i as f64 - j as f64) / (l as f64 - 1.0)).powi(2);
            o[i][j] = rows[i][j] as f64 / total as f64;
            e[i][j] = hist_true[i] * hist_pred[j] / (total as f64 * total as f64);
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..l {
        for j in 0..l {
            num += w[i][j] * o[i][j];
            den += w[i][j] * e[i][j];
        }
    }
    1.0 - num / den
}
