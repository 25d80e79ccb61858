//! Dense row-major tensors.
//!
//! Data is reference-counted so taping a forward pass never copies parameter
//! storage. Tensors are immutable once built; gradients are produced by
//! [`crate::graph::Graph::backward`] and attached via [`Tensor::set_grad`].

use alloc::sync::Arc;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::math::{self, Real};

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<Real>>,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
}

impl Tensor {
    /// Builds a tensor, checking that the extents multiply out to the data
    /// length and that every value is finite.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<Real>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err("tensor", "zero extent"));
        }
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                alloc::format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            ));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    /// Like [`Tensor::from_vec`] without the finiteness scan. For op outputs
    /// whose inputs were already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<Real>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![0.0; numel]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: Real) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![value; numel]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: Real) -> Self {
        Self::full(Vec::new(), value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Arc<Vec<Real>> {
        Arc::clone(&self.data)
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty() || self.numel() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Real {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    /// Attaches a gradient; the accumulator must match the tensor's shape.
    pub fn set_grad(&mut self, grad: Vec<Real>) {
        assert_eq!(grad.len(), self.numel(), "gradient shape mismatch");
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Returns a copy of the data with fresh (non-shared) storage.
    pub fn to_vec(&self) -> Vec<Real> {
        self.data.as_ref().clone()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::EmptySupport)?;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.shape() != first.shape() {
                return Err(shape_err(
                    "stack",
                    alloc::format!("mixed shapes {:?} and {:?}", first.shape(), t.shape()),
                ));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = Vec::with_capacity(first.shape.len() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, Arc::new(data)))
    }

    /// Rotates a square `[C,H,W]` (or `[H,W]`) image 90 degrees
    /// counter-clockwise, `quarter_turns` times.
    pub fn rotate90(&self, quarter_turns: u32) -> Result<Tensor> {
        let (c, h, w) = match self.shape.as_slice() {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(shape_err(
                    "rotate90",
                    alloc::format!("expected [H,W] or [C,H,W], got {other:?}"),
                ))
            }
        };
        if h != w {
            return Err(shape_err("rotate90", "image is not square".to_string()));
        }
        let turns = (quarter_turns % 4) as usize;
        let mut src = self.to_vec();
        let mut dst = vec![0.0; src.len()];
        let n = h;
        for _ in 0..turns {
            for ch in 0..c {
                let base = ch * n * n;
                // (y, x) <- (x, n-1-y): column x becomes row (n-1-x).
                for y in 0..n {
                    for x in 0..n {
                        dst[base + (n - 1 - x) * n + y] = src[base + y * n + x];
                    }
                }
            }
            core::mem::swap(&mut src, &mut dst);
        }
        Ok(Tensor::from_parts(self.shape.clone(), Arc::new(src)))
    }

    /// Downsamples `[C,H,W]` by exact area averaging: each output pixel is
    /// the mean of its source rectangle, with fractional edge rows and
    /// columns weighted by coverage.
    pub fn area_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (c, h, w) = match self.shape.as_slice() {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(shape_err(
                    "area_resize",
                    alloc::format!("expected [H,W] or [C,H,W], got {other:?}"),
                ))
            }
        };
        if out_h == 0 || out_w == 0 {
            return Err(shape_err("area_resize", "zero output extent"));
        }
        let sy = h as Real / out_h as Real;
        let sx = w as Real / out_w as Real;
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let src = &self.data[ch * h * w..(ch + 1) * h * w];
            for oy in 0..out_h {
                let y0 = oy as Real * sy;
                let y1 = (oy + 1) as Real * sy;
                for ox in 0..out_w {
                    let x0 = ox as Real * sx;
                    let x1 = (ox + 1) as Real * sx;
                    let mut acc = 0.0;
                    let mut area = 0.0;
                    let mut y = y0;
                    while y < y1 - 1e-12 {
                        let iy = math::floor(y) as usize;
                        let wy = (y1.min((iy + 1) as Real) - y).min(y1 - y0);
                        let mut x = x0;
                        while x < x1 - 1e-12 {
                            let ix = math::floor(x) as usize;
                            let wx = (x1.min((ix + 1) as Real) - x).min(x1 - x0);
                            acc += src[iy.min(h - 1) * w + ix.min(w - 1)] * wy * wx;
                            area += wy * wx;
                            x = (ix + 1) as Real;
                        }
                        y = (iy + 1) as Real;
                    }
                    out[ch * out_h * out_w + oy * out_w + ox] = acc / area;
                }
            }
        }
        let shape = if self.shape.len() == 2 {
            vec![out_h, out_w]
        } else {
            vec![c, out_h, out_w]
        };
        Ok(Tensor::from_parts(shape, Arc::new(out)))
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
