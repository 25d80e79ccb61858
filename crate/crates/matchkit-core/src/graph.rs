//! Dynamic reverse-mode differentiation tape.
//!
//! Each forward pass builds its own [`Graph`]: operations append nodes that
//! hold the forward value plus a closure producing gradient contributions
//! for their inputs. [`Graph::backward`] walks the tape once in reverse and
//! may be called at most once per graph. Node values are reference-counted,
//! so saving forward context never copies tensor storage.
//!
//! A graph is single-threaded by contract; independent graphs may run
//! concurrently.

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{shape_err, Error, Result};
use crate::math::{self, Real, LOG_CLAMP, NORM_EPS};
use crate::tensor::Tensor;

/// Gradient contributions flowing to parent nodes: `(node id, d loss / d parent)`.
type BackwardFn = Box<dyn Fn(&[Real]) -> Vec<(usize, Vec<Real>)>>;

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<Real>>,
    /// Whether gradients flow through this node (some tracked leaf below it).
    tracked: bool,
    backward: Option<BackwardFn>,
}

struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    clamp_events: u64,
    /// Multiplier applied inside the softmax backward rule. Exactly 1.0 in
    /// normal operation; the gradient-check negative control sets it off.
    softmax_fault: Real,
}

/// A taped computation. Cloning shares the underlying tape.
#[derive(Clone)]
pub struct Graph {
    tape: Rc<RefCell<Tape>>,
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
    shape: Vec<usize>,
}

impl core::fmt::Debug for Var {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Var(id={}, shape={:?})", self.id, self.shape)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            tape: Rc::new(RefCell::new(Tape {
                nodes: Vec::new(),
                consumed: false,
                clamp_events: 0,
                softmax_fault: 1.0,
            })),
        }
    }

    /// Number of times the episode loss clamped a zero probability.
    pub fn clamp_events(&self) -> u64 {
        self.tape.borrow().clamp_events
    }

    /// Negative-control hook: scales the softmax backward rule so gradient
    /// checks must fail. Set before building the forward pass; softmax sits
    /// on every training path, so the broken rule is always exercised.
    pub fn inject_softmax_backward_fault(&self, scale: Real) {
        self.tape.borrow_mut().softmax_fault = scale;
    }

    fn softmax_fault(&self) -> Real {
        self.tape.borrow().softmax_fault
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Arc<Vec<Real>>,
        tracked: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite forward value");
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            shape: shape.clone(),
            value,
            tracked,
            backward,
        });
        Var {
            graph: self.clone(),
            id,
            shape,
        }
    }

    /// Inserts a tensor as a leaf; gradients accumulate here when the tensor
    /// has `requires_grad` set.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(t.shape().into(), t.data_rc(), t.requires_grad(), None)
    }

    /// Inserts a tensor that never receives gradients.
    pub fn constant(&self, t: &Tensor) -> Var {
        self.push(t.shape().into(), t.data_rc(), false, None)
    }

    /// Reverse pass from a scalar loss. Consumes the graph: a second call
    /// returns [`Error::GraphConsumed`].
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !Rc::ptr_eq(&self.tape, &loss.graph.tape) {
            return Err(Error::GraphMismatch);
        }
        let mut tape = self.tape.borrow_mut();
        if tape.consumed {
            return Err(Error::GraphConsumed);
        }
        if tape.nodes[loss.id].value.len() != 1 {
            return Err(Error::NotScalar {
                shape: tape.nodes[loss.id].shape.clone(),
            });
        }
        tape.consumed = true;

        let mut grads: Vec<Option<Vec<Real>>> = vec![None; tape.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if grads[id].is_none() || !tape.nodes[id].tracked {
                continue;
            }
            let Some(back) = tape.nodes[id].backward.as_ref() else {
                continue; // leaf: keep the accumulated gradient
            };
            let out_grad = grads[id].take().expect("checked above");
            for (parent, contrib) in back(&out_grad) {
                debug_assert!(parent < id, "tape must be topological");
                if !tape.nodes[parent].tracked {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
            grads[id] = Some(out_grad);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one backward pass, addressed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
}

impl core::fmt::Debug for Gradients {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let filled = self.grads.iter().filter(|g| g.is_some()).count();
        write!(f, "Gradients({filled}/{} nodes)", self.grads.len())
    }
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<Tensor> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::from_parts(var.shape.clone(), Arc::new(g.clone())))
    }

    /// Gradient as a flat vector, zeros when nothing flowed to the node.
    pub fn flat(&self, var: &Var) -> Vec<Real> {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => vec![0.0; var.numel()],
        }
    }
}

impl Var {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Snapshot of the forward value (shares storage).
    pub fn value(&self) -> Tensor {
        let tape = self.graph.tape.borrow();
        Tensor::from_parts(self.shape.clone(), Arc::clone(&tape.nodes[self.id].value))
    }

    /// Scalar forward value.
    pub fn item(&self) -> Real {
        let tape = self.graph.tape.borrow();
        debug_assert_eq!(tape.nodes[self.id].value.len(), 1);
        tape.nodes[self.id].value[0]
    }

    fn data(&self) -> Arc<Vec<Real>> {
        Arc::clone(&self.graph.tape.borrow().nodes[self.id].value)
    }

    fn tracked(&self) -> bool {
        self.graph.tape.borrow().nodes[self.id].tracked
    }

    fn check_same_graph(&self, other: &Var, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.graph.tape, &other.graph.tape) {
            Ok(())
        } else {
            let _ = op;
            Err(Error::GraphMismatch)
        }
    }

    fn check_same_shape(&self, other: &Var, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(shape_err(
                op,
                alloc::format!("{:?} vs {:?}", self.shape, other.shape),
            ))
        }
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.check_same_graph(other, "add")?;
        self.check_same_shape(other, "add")?;
        let (a, b) = (self.data(), other.data());
        let out: Vec<Real> = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        let tracked = self.tracked() || other.tracked();
        let (ia, ib) = (self.id, other.id);
        let back: Option<BackwardFn> = tracked.then(|| {
            Box::new(move |g: &[Real]| vec![(ia, g.to_vec()), (ib, g.to_vec())]) as BackwardFn
        });
        Ok(self.graph.push(self.shape.clone(), Arc::new(out), tracked, back))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.check_same_graph(other, "sub")?;
        self.check_same_shape(other, "sub")?;
        let (a, b) = (self.data(), other.data());
        let out: Vec<Real> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
        let tracked = self.tracked() || other.tracked();
        let (ia, ib) = (self.id, other.id);
        let back: Option<BackwardFn> = tracked.then(|| {
            Box::new(move |g: &[Real]| {
                vec![
                    (ia, g.to_vec()),
                    (ib, g.iter().map(|x| -x).collect()),
                ]
            }) as BackwardFn
        });
        Ok(self.graph.push(self.shape.clone(), Arc::new(out), tracked, back))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.check_same_graph(other, "mul")?;
        self.check_same_shape(other, "mul")?;
        let (a, b) = (self.data(), other.data());
        let out: Vec<Real> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        let tracked = self.tracked() || other.tracked();
        let (ia, ib) = (self.id, other.id);
        let back: Option<BackwardFn> = tracked.then(|| {
            let (a, b) = (Arc::clone(&a), Arc::clone(&b));
            Box::new(move |g: &[Real]| {
                vec![
                    (ia, g.iter().zip(b.iter()).map(|(g, y)| g * y).collect()),
                    (ib, g.iter().zip(a.iter()).map(|(g, x)| g * x).collect()),
                ]
            }) as BackwardFn
        });
        Ok(self.graph.push(self.shape.clone(), Arc::new(out), tracked, back))
    }

    pub fn scale(&self, c: Real) -> Var {
        let a = self.data();
        let out: Vec<Real> = a.iter().map(|x| x * c).collect();
        let tracked = self.tracked();
        let ia = self.id;
        let back: Option<BackwardFn> = tracked.then(|| {
            Box::new(move |g: &[Real]| vec![(ia, g.iter().map(|x| x * c).collect())])
                as BackwardFn
        });
        self.graph.push(self.shape.clone(), Arc::new(out), tracked, back)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    /// Adds a `[C]` bias to every row of a `[R,C]` matrix.
    pub fn add_bias(&self, bias: &Var) -> Result<Var> {
        self.check_same_graph(bias, "add_bias")?;
        let [r, c] = self.shape[..] else {
            return Err(shape_err("add_bias", "left operand must be 2-d"));
        };
        if bias.shape != [c] {
            return Err(shape_err(
                "add_bias",
                alloc::format!("bias {:?} vs columns {c}", bias.shape),
            ));
        }
        let (a, b) = (self.data(), bias.data());
        let mut out = Vec::with_capacity(r * c);
        for row in 0..r {
            for col in 0..c {
                out.push(a[row * c + col] + b[col]);
            }
        }
        let tracked = self.tracked() || bias.tracked();
        let (ia, ib) = (self.id, bias.id);
        let back: Option<BackwardFn> = tracked.then(|| {
            Box::new(move |g: &[Real]| {
                let mut db = vec![0.0; c];
                for row in 0..r {
                    for col in 0..c {
                        db[col] += g[row * c + col];
                    }
                }
                vec![(ia, g.to_vec()), (ib, db)]
            }) as BackwardFn
        });
        Ok(self.graph.push(self.shape.clone(), Arc::new(out), tracked, back))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_same_graph(other, "matmul")?;
        let ([m, k], [k2, n]) = (&self.shape[..], &other.shape[..]) else {
            return Err(shape_err("matmul", "operands must be 2-d"));
        };
        let (m, k, k2, n) = (*m, *k, *k2, *n);
        if k != k2 {
            return Err(shape_err(
                "matmul",
                alloc::format!("inner extents {k} vs {k2}"),
            ));
        }
        let (a, b) = (self.data(), other.data());
        let out = matmul_raw(&a, &b, m, k, n);
        let tracked = self.tracked() || other.tracked();
        let (ia, ib) = (self.id, other.id);
        let back: Option<BackwardFn> = tracked.then(|| {
            let (a, b) = (Arc::clone(&a), Arc::clone(&b));
            Box::new(move |g: &[Real]| {
                // dA = G B^T, dB = A^T G
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for p in 0..k {
                            da[i * k + p] += gij * b[p * n + j];
                        }
                    }
                }
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = a[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                vec![(ia, da), (ib, db)]
            }) as BackwardFn
        });
        Ok(self.graph.push(vec![m, n], Arc::new(out), tracked, back))
    }

    pub fn relu(&self) -> Var {
        let a = self.data();
        let out: Vec<Real> = a.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let tracked = self.tracked();
        let ia = self.id;
        let back: Option<BackwardFn> = tracked.then(|| {
            let a = Arc::clone(&a);
            Box::new(move |g: &[Real]| {
                vec![(
                    ia,
                    g.iter()
                        .zip(a.iter())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }) as BackwardFn
        });
        self.graph.push(self.shape.clone(), Arc::new(out), tracked, back)
    }

    pub fn tanh(&self) -> Var {
        let a = self.data();
        let out: Arc<Vec<Real>> = Arc::new(a.iter().map(|&x| math::tanh(x)).collect());
        let tracked = self.tracked();
        let ia = self.id;
        let back: Option<BackwardFn> = tracked.then(|| {
            let y = Arc::clone(&out);
            Box::new(move |g: &[Real]| {
                vec![(
                    ia,
                    g.iter()
                        .zip(y.iter())
                        .map(|(g, &y)| g * (1.0 - y * y))
                        .collect(),
                )]
            }) as BackwardFn
        });
        self.graph.push(self.shape.clone(), out, tracked, back)
    }

    pub fn sigmoid(&self) -> Var {
        let a = self.data();
        let out: Arc<Vec<Real>> = Arc::new(a.iter().map(|&x| math::sigmoid(x)).collect());
        let tracked = self.tracked();
        let ia = self.id;
        let back: Option<BackwardFn> = tracked.then(|| {
            let y = Arc::clone(&out);
            Box::new(move |g: &[Real]| {
                vec![(
                    ia,
                    g.iter()
                        .zip(y.iter())
                        .map(|(g, &y)| g * y * (1.0 - y))
                        .collect(),
                )]
            }) as BackwardFn
        });
        self.graph.push(self.shape.clone(), out, tracked, back)
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&self) -> Result<Var> {
        let a = self.data();
        if a.iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        let out: Vec<Real> = a.iter().map(|&x| math::ln(x)).collect();
        let tracked = self.tracked();
        let ia = self.id;
        let back: Option<BackwardFn> = tracked.then(|| {
            let a = Arc::clone(&a);
            Box::new(move |g: &[Real]| {
                vec![(ia, g.iter().zip(a.iter()).map(|(g, &x)| g / x).collect())]
            }) as BackwardFn
        });
        Ok(self.graph.push(self.shape.clone(), Arc::new(out), tracked, back))
    }

    pub fn exp(&self) -> Var {
        let a = self.data();
        let out: Arc<Vec<Real>> = Arc::new(a.iter().map(|&x| math::exp(x)).collect());
        let tracked = self.tracked();
        let ia = self.id;
        let back: Option<BackwardFn> = tracked.then(|| {
            let y = Arc::clone(&out);
            Box::new(move |g: &[Real]| {
                vec![(ia, g.iter().zip(y.iter()).map(|(g, &y)| g * y).collect())]
            }) as BackwardFn
        });
        self.graph.push(self.shape.clone(), out, tracked, back)
    }

    pub fn sum_all(&self) -> Var {
        let a = self.data();
        let total: Real = a.iter().sum();
        let n = a.len();
        let tracked = self.tracked();
        let ia = self.id;
        let back: Option<BackwardFn> = tracked.then(|| {
            Box::new(move |g: &[Real]| vec![(ia, vec![g[0]; n])]) as BackwardFn
        });
        self.graph.push(Vec::new(), Arc::new(vec![total]), tracked, back)
    }

    pub fn mean_all(&self) -> Var {
        let n = self.numel() as Real;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum along one axis; the output drops that axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        if axis >= self.shape.len() {
            return Err(shape_err(
                "sum_axis",
                alloc::format!("axis {axis} of shape {:?}", self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let a = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    out[o * inner + i] += a[(o * mid + m) * inner + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let tracked = self.tracked();
        let ia = self.id;
        let back: Option<BackwardFn> = tracked.then(|| {
            Box::new(move |g: &[Real]| {
                let mut da = vec![0.0; outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            da[(o * mid + m) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                vec![(ia, da)]
            }) as BackwardFn
        });
        Ok(self.graph.push(shape, Arc::new(out), tracked, back))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let mid = *self
            .shape
            .get(axis)
            .ok_or_else(|| shape_err("mean_axis", "axis out of range"))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / mid as Real))
    }

    /// Extracts row `r` of a `[R,C]` matrix as a `[C]` vector.
    pub fn row(&self, r: usize) -> Result<Var> {
        let [rows, cols] = self.shape[..] else {
            return Err(shape_err("row", "operand must be 2-d"));
        };
        if r >= rows {
            return Err(shape_err("row", alloc::format!("row {r} of {rows}")));
        }
        let a = self.data();
        let out = a[r * cols..(r + 1) * cols].to_vec();
        let tracked = self.tracked();
        let ia = self.id;
        let back: Option<BackwardFn> = tracked.then(|| {
            Box::new(move |g: &[Real]| {
                let mut da = vec![0.0; rows * cols];
                da[r * cols..(r + 1) * cols].copy_from_slice(g);
                vec![(ia, da)]
            }) as BackwardFn
        });
        Ok(self.graph.push(vec![cols], Arc::new(out), tracked, back))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err(
                "reshape",
                alloc::format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        let tracked = self.tracked();
        let ia = self.id;
        let back: Option<BackwardFn> =
            tracked.then(|| Box::new(move |g: &[Real]| vec![(ia, g.to_vec())]) as BackwardFn);
        Ok(self.graph.push(shape, self.data(), tracked, back))
    }

    /// Stable softmax over a vector.
    pub fn softmax(&self) -> Result<Var> {
        if self.shape.len() != 1 {
            return Err(shape_err("softmax", "operand must be 1-d"));
        }
        let a = self.data();
        let mut out = a.as_ref().clone();
        math::softmax_in_place(&mut out);
        let out = Arc::new(out);
        let tracked = self.tracked();
        let ia = self.id;
        let fault = self.graph.softmax_fault();
        let back: Option<BackwardFn> = tracked.then(|| {
            let s = Arc::clone(&out);
            Box::new(move |g: &[Real]| {
                let gs: Real = g.iter().zip(s.iter()).map(|(g, s)| g * s).sum();
                vec![(
                    ia,
                    g.iter()
                        .zip(s.iter())
                        .map(|(g, s)| fault * s * (g - gs))
                        .collect(),
                )]
            }) as BackwardFn
        });
        Ok(self.graph.push(self.shape.clone(), out, tracked, back))
    }

    /// Dot product of two vectors.
    pub fn dot(&self, other: &Var) -> Result<Var> {
        self.check_same_graph(other, "dot")?;
        self.check_same_shape(other, "dot")?;
        if self.shape.len() != 1 {
            return Err(shape_err("dot", "operands must be 1-d"));
        }
        let (a, b) = (self.data(), other.data());
        let out = math::dot(&a, &b);
        let tracked = self.tracked() || other.tracked();
        let (ia, ib) = (self.id, other.id);
        let back: Option<BackwardFn> = tracked.then(|| {
            let (a, b) = (Arc::clone(&a), Arc::clone(&b));
            Box::new(move |g: &[Real]| {
                vec![
                    (ia, b.iter().map(|&y| g[0] * y).collect()),
                    (ib, a.iter().map(|&x| g[0] * x).collect()),
                ]
            }) as BackwardFn
        });
        Ok(self.graph.push(Vec::new(), Arc::new(vec![out]), tracked, back))
    }

    /// Cosine similarity of two vectors with norms floored at `NORM_EPS`,
    /// so a zero vector yields 0 rather than NaN.
    pub fn cosine_sim(&self, other: &Var) -> Result<Var> {
        self.check_same_graph(other, "cosine_sim")?;
        self.check_same_shape(other, "cosine_sim")?;
        if self.shape.len() != 1 {
            return Err(shape_err("cosine_sim", "operands must be 1-d"));
        }
        let (a, b) = (self.data(), other.data());
        let na = math::l2_norm(&a);
        let nb = math::l2_norm(&b);
        let fa = na.max(NORM_EPS);
        let fb = nb.max(NORM_EPS);
        let c = math::dot(&a, &b) / (fa * fb);
        let tracked = self.tracked() || other.tracked();
        let (ia, ib) = (self.id, other.id);
        let back: Option<BackwardFn> = tracked.then(|| {
            let (a, b) = (Arc::clone(&a), Arc::clone(&b));
            Box::new(move |g: &[Real]| {
                // d c / d a = b/(fa fb) - c a/na^2, norm term dropped on the
                // floored branch where the denominator is constant.
                let da: Vec<Real> = a
                    .iter()
                    .zip(b.iter())
                    .map(|(&x, &y)| {
                        let mut d = y / (fa * fb);
                        if na > NORM_EPS {
                            d -= c * x / (na * na);
                        }
                        g[0] * d
                    })
                    .collect();
                let db: Vec<Real> = a
                    .iter()
                    .zip(b.iter())
                    .map(|(&x, &y)| {
                        let mut d = x / (fa * fb);
                        if nb > NORM_EPS {
                            d -= c * y / (nb * nb);
                        }
                        g[0] * d
                    })
                    .collect();
                vec![(ia, da), (ib, db)]
            }) as BackwardFn
        });
        Ok(self.graph.push(Vec::new(), Arc::new(vec![c]), tracked, back))
    }

    /// Negative log of `probs[index]`, clamped at `LOG_CLAMP`. A clamp
    /// bumps the graph's clamp counter and stops the gradient.
    pub fn nll_at(&self, index: usize) -> Result<Var> {
        if self.shape.len() != 1 {
            return Err(shape_err("nll_at", "operand must be 1-d"));
        }
        if index >= self.numel() {
            return Err(shape_err(
                "nll_at",
                alloc::format!("index {index} of {}", self.numel()),
            ));
        }
        let a = self.data();
        let p = a[index];
        let clamped = p < LOG_CLAMP;
        if clamped {
            self.tape_mut(|t| t.clamp_events += 1);
        }
        let loss = -math::ln(p.max(LOG_CLAMP));
        let n = a.len();
        let tracked = self.tracked();
        let ia = self.id;
        let back: Option<BackwardFn> = tracked.then(|| {
            Box::new(move |g: &[Real]| {
                let mut da = vec![0.0; n];
                if !clamped {
                    da[index] = -g[0] / p;
                }
                vec![(ia, da)]
            }) as BackwardFn
        });
        Ok(self.graph.push(Vec::new(), Arc::new(vec![loss]), tracked, back))
    }

    fn tape_mut(&self, f: impl FnOnce(&mut Tape)) {
        f(&mut self.graph.tape.borrow_mut())
    }
}

/// Concatenates vectors (and scalars, treated as length-1) into one vector.
pub fn concat(parts: &[Var]) -> Result<Var> {
    let first = parts.first().ok_or(Error::EmptySupport)?;
    let graph = first.graph.clone();
    let mut out = Vec::new();
    let mut spans = Vec::with_capacity(parts.len());
    let mut tracked = false;
    for p in parts {
        p.check_same_graph(first, "concat")?;
        if p.shape.len() > 1 {
            return Err(shape_err("concat", "operands must be scalars or vectors"));
        }
        let start = out.len();
        out.extend_from_slice(&p.data());
        spans.push((p.id, start, out.len()));
        tracked |= p.tracked();
    }
    let len = out.len();
    let back: Option<BackwardFn> = tracked.then(|| {
        let spans = spans.clone();
        Box::new(move |g: &[Real]| {
            spans
                .iter()
                .map(|&(id, s, e)| (id, g[s..e].to_vec()))
                .collect()
        }) as BackwardFn
    });
    Ok(graph.push(vec![len], Arc::new(out), tracked, back))
}

pub(crate) fn matmul_raw(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Spatial operations
// ---------------------------------------------------------------------------

/// Per-channel batch statistics captured by a training-mode batchnorm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    /// Population (biased) variance used for normalization.
    pub var_biased: Vec<Real>,
    /// Sample variance used for the running-average update.
    pub var_unbiased: Vec<Real>,
}

pub const BN_EPS: Real = 1e-5;

impl Var {
    /// Stride-1 same-padding convolution: `[N,C,H,W] * [F,C,kh,kw] -> [N,F,H,W]`.
    /// Kernel extents must be odd.
    pub fn conv2d(&self, kernel: &Var) -> Result<Var> {
        self.check_same_graph(kernel, "conv2d")?;
        let [n, c, h, w] = self.shape[..] else {
            return Err(shape_err("conv2d", "input must be [N,C,H,W]"));
        };
        let [f, ck, kh, kw] = kernel.shape[..] else {
            return Err(shape_err("conv2d", "kernel must be [F,C,kh,kw]"));
        };
        if ck != c {
            return Err(shape_err(
                "conv2d",
                alloc::format!("input channels {c} vs kernel channels {ck}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err("conv2d", "same padding needs odd kernel extents"));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let (a, k) = (self.data(), kernel.data());
        let mut out = vec![0.0; n * f * h * w];
        for in_ in 0..n {
            for cf in 0..f {
                for ci in 0..c {
                    let kbase = ((cf * c + ci) * kh) * kw;
                    let ibase = (in_ * c + ci) * h * w;
                    let obase = (in_ * f + cf) * h * w;
                    for oy in 0..h {
                        for dy in 0..kh {
                            let iy = oy + dy;
                            if iy < ph || iy - ph >= h {
                                continue;
                            }
                            let iy = iy - ph;
                            for dx in 0..kw {
                                let kv = k[kbase + dy * kw + dx];
                                if kv == 0.0 {
                                    continue;
                                }
                                let (x0, x1) = (pw.saturating_sub(dx), (w + pw - dx).min(w));
                                for ox in x0..x1 {
                                    out[obase + oy * w + ox] +=
                                        kv * a[ibase + iy * w + (ox + dx - pw)];
                                }
                            }
                        }
                    }
                }
            }
        }
        let tracked = self.tracked() || kernel.tracked();
        let (ia, ik) = (self.id, kernel.id);
        let back: Option<BackwardFn> = tracked.then(|| {
            let (a, k) = (Arc::clone(&a), Arc::clone(&k));
            Box::new(move |g: &[Real]| {
                let mut da = vec![0.0; n * c * h * w];
                let mut dk = vec![0.0; f * c * kh * kw];
                for in_ in 0..n {
                    for cf in 0..f {
                        let obase = (in_ * f + cf) * h * w;
                        for ci in 0..c {
                            let kbase = ((cf * c + ci) * kh) * kw;
                            let ibase = (in_ * c + ci) * h * w;
                            for oy in 0..h {
                                for dy in 0..kh {
                                    let iy = oy + dy;
                                    if iy < ph || iy - ph >= h {
                                        continue;
                                    }
                                    let iy = iy - ph;
                                    for dx in 0..kw {
                                        let (x0, x1) =
                                            (pw.saturating_sub(dx), (w + pw - dx).min(w));
                                        let kv = k[kbase + dy * kw + dx];
                                        let mut dkv = 0.0;
                                        for ox in x0..x1 {
                                            let go = g[obase + oy * w + ox];
                                            let ii = ibase + iy * w + (ox + dx - pw);
                                            da[ii] += go * kv;
                                            dkv += go * a[ii];
                                        }
                                        dk[kbase + dy * kw + dx] += dkv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(ia, da), (ik, dk)]
            }) as BackwardFn
        });
        Ok(self.graph.push(vec![n, f, h, w], Arc::new(out), tracked, back))
    }

    /// 2x2 max pooling with stride 2 and ceiling output extents; border
    /// windows are clipped. Gradient routes to the window maximum, first
    /// element in row-major order on ties.
    pub fn maxpool2x2(&self) -> Result<Var> {
        self.maxpool2x2_impl(false)
    }

    /// 2x2 max pooling with floor output extents: a trailing odd row or
    /// column is dropped. This is the variant the convolutional encoder
    /// stacks, so four blocks collapse 28x28 down to 1x1.
    pub fn maxpool2x2_floor(&self) -> Result<Var> {
        self.maxpool2x2_impl(true)
    }

    fn maxpool2x2_impl(&self, floor: bool) -> Result<Var> {
        let [n, c, h, w] = self.shape[..] else {
            return Err(shape_err("maxpool2x2", "input must be [N,C,H,W]"));
        };
        let (oh, ow) = if floor {
            ((h / 2).max(1), (w / 2).max(1))
        } else {
            (h.div_ceil(2), w.div_ceil(2))
        };
        let a = self.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for nc in 0..n * c {
            let ibase = nc * h * w;
            let obase = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = Real::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..2 {
                        let iy = oy * 2 + dy;
                        if iy >= h {
                            continue;
                        }
                        for dx in 0..2 {
                            let ix = ox * 2 + dx;
                            if ix >= w {
                                continue;
                            }
                            let idx = ibase + iy * w + ix;
                            if a[idx] > best {
                                best = a[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    argmax[obase + oy * ow + ox] = best_i;
                }
            }
        }
        let tracked = self.tracked();
        let ia = self.id;
        let total_in = n * c * h * w;
        let back: Option<BackwardFn> = tracked.then(|| {
            Box::new(move |g: &[Real]| {
                let mut da = vec![0.0; total_in];
                for (o, &src) in argmax.iter().enumerate() {
                    da[src] += g[o];
                }
                vec![(ia, da)]
            }) as BackwardFn
        });
        Ok(self.graph.push(vec![n, c, oh, ow], Arc::new(out), tracked, back))
    }

    /// Training-mode batch normalization over `[N,C,H,W]`, normalizing each
    /// channel by the batch statistics. Returns the output and the batch
    /// statistics so the caller can fold them into its running averages.
    /// The batch must hold at least two items.
    pub fn batchnorm_train(&self, gamma: &Var, beta: &Var) -> Result<(Var, BatchStats)> {
        self.check_same_graph(gamma, "batchnorm")?;
        self.check_same_graph(beta, "batchnorm")?;
        let [n, c, h, w] = self.shape[..] else {
            return Err(shape_err("batchnorm", "input must be [N,C,H,W]"));
        };
        if n < 2 {
            return Err(Error::InvalidArg {
                what: "batch size",
                detail: alloc::format!("train-mode batchnorm needs N >= 2, got {n}"),
            });
        }
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(shape_err("batchnorm", "gamma/beta must be [C]"));
        }
        let m = (n * h * w) as Real;
        let a = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for in_ in 0..n {
                let base = (in_ * c + ci) * h * w;
                for i in 0..h * w {
                    s += a[base + i];
                }
            }
            mean[ci] = s / m;
            let mut v = 0.0;
            for in_ in 0..n {
                let base = (in_ * c + ci) * h * w;
                for i in 0..h * w {
                    let d = a[base + i] - mean[ci];
                    v += d * d;
                }
            }
            var[ci] = v / m;
        }
        let mut out = vec![0.0; a.len()];
        let mut xhat = vec![0.0; a.len()];
        for in_ in 0..n {
            for ci in 0..c {
                let inv = 1.0 / math::sqrt(var[ci] + BN_EPS);
                let base = (in_ * c + ci) * h * w;
                for i in 0..h * w {
                    let xh = (a[base + i] - mean[ci]) * inv;
                    xhat[base + i] = xh;
                    out[base + i] = gm[ci] * xh + bt[ci];
                }
            }
        }
        let stats = BatchStats {
            mean,
            var_biased: var.clone(),
            var_unbiased: var.iter().map(|&v| v * m / (m - 1.0)).collect(),
        };
        let tracked = self.tracked() || gamma.tracked() || beta.tracked();
        let (ia, ig, ib) = (self.id, gamma.id, beta.id);
        let back: Option<BackwardFn> = tracked.then(|| {
            let xhat = Arc::new(xhat);
            let var = stats.var_biased.clone();
            let gm = Arc::clone(&gm);
            Box::new(move |g: &[Real]| {
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for in_ in 0..n {
                    for ci in 0..c {
                        let base = (in_ * c + ci) * h * w;
                        for i in 0..h * w {
                            dgamma[ci] += g[base + i] * xhat[base + i];
                            dbeta[ci] += g[base + i];
                        }
                    }
                }
                // dx = gamma/sqrt(var+eps) * (g - mean(g) - xhat * mean(g*xhat))
                let mut da = vec![0.0; g.len()];
                for ci in 0..c {
                    let inv = 1.0 / math::sqrt(var[ci] + BN_EPS);
                    let g_mean = dbeta[ci] / m;
                    let gx_mean = dgamma[ci] / m;
                    for in_ in 0..n {
                        let base = (in_ * c + ci) * h * w;
                        for i in 0..h * w {
                            da[base + i] = gm[ci]
                                * inv
                                * (g[base + i] - g_mean - xhat[base + i] * gx_mean);
                        }
                    }
                }
                vec![(ia, da), (ig, dgamma), (ib, dbeta)]
            }) as BackwardFn
        });
        let out = self
            .graph
            .push(self.shape.clone(), Arc::new(out), tracked, back);
        Ok((out, stats))
    }

    /// Evaluation-mode batch normalization: a per-channel affine map using
    /// the provided running statistics. Deterministic and batch-independent.
    pub fn batchnorm_eval(
        &self,
        gamma: &Var,
        beta: &Var,
        running_mean: &[Real],
        running_var: &[Real],
    ) -> Result<Var> {
        self.check_same_graph(gamma, "batchnorm")?;
        self.check_same_graph(beta, "batchnorm")?;
        let [n, c, h, w] = self.shape[..] else {
            return Err(shape_err("batchnorm", "input must be [N,C,H,W]"));
        };
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(shape_err("batchnorm", "gamma/beta must be [C]"));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batchnorm", "running stats must be [C]"));
        }
        let a = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let inv: Vec<Real> = running_var
            .iter()
            .map(|&v| 1.0 / math::sqrt(v + BN_EPS))
            .collect();
        let mut out = vec![0.0; a.len()];
        let mut xhat = vec![0.0; a.len()];
        for in_ in 0..n {
            for ci in 0..c {
                let base = (in_ * c + ci) * h * w;
                for i in 0..h * w {
                    let xh = (a[base + i] - running_mean[ci]) * inv[ci];
                    xhat[base + i] = xh;
                    out[base + i] = gm[ci] * xh + bt[ci];
                }
            }
        }
        let tracked = self.tracked() || gamma.tracked() || beta.tracked();
        let (ia, ig, ib) = (self.id, gamma.id, beta.id);
        let back: Option<BackwardFn> = tracked.then(|| {
            let xhat = Arc::new(xhat);
            let gm = Arc::clone(&gm);
            let inv = inv.clone();
            Box::new(move |g: &[Real]| {
                let mut da = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for in_ in 0..n {
                    for ci in 0..c {
                        let base = (in_ * c + ci) * h * w;
                        for i in 0..h * w {
                            da[base + i] = g[base + i] * gm[ci] * inv[ci];
                            dgamma[ci] += g[base + i] * xhat[base + i];
                            dbeta[ci] += g[base + i];
                        }
                    }
                }
                vec![(ia, da), (ig, dgamma), (ib, dbeta)]
            }) as BackwardFn
        });
        Ok(self.graph.push(self.shape.clone(), Arc::new(out), tracked, back))
    }
}
