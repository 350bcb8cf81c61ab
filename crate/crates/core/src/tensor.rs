//! Dense rank-4 tensors in row-major `(n, c, h, w)` layout.

use std::fmt;

use crate::error::{Error, Result};

/// Dimensions `(batch, channels, height, width)`, all at least 1.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape([usize; 4]);

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "all dims must be >= 1, got ({n}, {c}, {h}, {w})"
            )));
        }
        Ok(Shape([n, c, h, w]))
    }

    pub fn dims(&self) -> [usize; 4] {
        self.0
    }
    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Flat offset of element `(n, c, y, x)`.
    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.0[1] + c) * self.0[2] + y) * self.0[3] + x
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

/// A dense tensor of `f64` values with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "{} values do not fill shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            values: vec![value; shape.numel()],
            grad: None,
        }
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every position.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [n, c, h, w] = shape.dims();
        let mut values = Vec::with_capacity(shape.numel());
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        values.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Tensor {
            shape,
            values,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.shape.index(n, c, y, x)]
    }

    /// One `h x w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c() + c) * p;
        &self.values[start..start + p]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Copies batch items `indices` into a new tensor, in order.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let [_, c, h, w] = self.shape.dims();
        let item = c * h * w;
        let mut values = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            if i >= self.shape.n() {
                return Err(Error::Shape(format!("batch index {i} out of range")));
            }
            values.extend_from_slice(&self.values[i * item..(i + 1) * item]);
        }
        Tensor::from_vec(Shape::new(indices.len(), c, h, w)?, values)
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape.dims();
        let mut values = Vec::new();
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.shape.dims();
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += tn;
            values.extend_from_slice(&t.values);
        }
        Tensor::from_vec(Shape::new(n, c, h, w)?, values)
    }
}
