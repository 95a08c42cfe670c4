//! Dense 4-D tensors in (batch, channel, height, width) order.
//!
//! Data is a flat row-major `Vec<f64>`; the optional `grad` slot mirrors it
//! element for element. All computation is 64-bit; only checkpoint files
//! narrow to 32-bit.

use crate::error::{Error, Result};

/// Dimensions of a 4-D tensor. Every axis is at least 1.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Shape> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "all dimensions must be >= 1, got ({n},{c},{h},{w})"
            )));
        }
        n.checked_mul(c)
            .and_then(|x| x.checked_mul(h))
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| Error::Shape(format!("element count overflows ({n},{c},{h},{w})")))?;
        Ok(Shape { n, c, h, w })
    }

    /// Total element count `n * c * h * w`.
    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat row-major offset of (n, c, h, w).
    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Spatial extent `h * w`.
    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// A dense 4-D array of f64 values with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != shape.count() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.count()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor { shape, data: vec![0.0; shape.count()], grad: None }
    }

    pub fn filled(shape: Shape, value: f64) -> Tensor {
        Tensor { shape, data: vec![value; shape.count()], grad: None }
    }

    /// A (1,1,1,1) tensor holding one value.
    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: Shape { n: 1, c: 1, h: 1, w: 1 }, data: vec![value], grad: None }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Tensor {
        let mut data = Vec::with_capacity(shape.count());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data, grad: None }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.offset(n, c, h, w)]
    }

    /// True when the tensor is (1,1,1,1).
    pub fn is_scalar(&self) -> bool {
        self.shape.count() == 1
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Allocate the gradient slot (zeroed) if not present, and return it.
    pub fn ensure_grad(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.fill(0.0);
        }
    }

    /// Add `delta` into the gradient slot, allocating it when absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self.ensure_grad();
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Error if any value is NaN or infinite. `context` names the producing op.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        check_finite_slice(&self.data, context)
    }
}

pub(crate) fn check_finite_slice(values: &[f64], context: &str) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "{context} produced non-finite value {v} at flat index {i}"
            )));
        }
    }
    Ok(())
}
