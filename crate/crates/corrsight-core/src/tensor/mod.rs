//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Every op builds a node in a dynamically grown graph. A node owns its
//! forward value; calling [`Tensor::backward`] on a scalar walks the graph in
//! reverse topological order and accumulates `d loss / d node` into every
//! node that requires gradients. Gradients keep accumulating across backward
//! calls until the caller zeroes them, which is what minibatch training
//! wants.
//!
//! Shapes are row-major `Vec<usize>`. Elementwise ops broadcast like numpy:
//! shapes are right-aligned and a dimension of 1 stretches to match. The
//! backward pass of a broadcast op sums gradients over the stretched
//! dimensions.
//!
//! All ops validate shapes up front and scan their output for NaN or
//! infinity, so numeric blowups surface at the op that caused them.

mod conv;

pub use conv::Padding;

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Gradient closure: maps the node's output gradient to one gradient per
/// parent (`None` for parents that get nothing, e.g. non-differentiable
/// inputs).
type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

/// What a gradient closure gets to see.
pub struct BackwardCtx<'a> {
    /// d loss / d output of this node.
    pub out_grad: &'a [f64],
    /// The node's forward value.
    pub out_data: &'a [f64],
    /// The node's inputs, in the order the op received them.
    pub parents: &'a [Tensor],
}

/// One node of the autodiff graph.
pub struct TapeNode {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    op: &'static str,
}

/// Shared handle to a graph node. Cloning is cheap and aliases the node.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<TapeNode>>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.0.borrow();
        f.debug_struct("Tensor")
            .field("op", &n.op)
            .field("shape", &n.shape)
            .field("requires_grad", &n.requires_grad)
            .finish()
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::invalid(op, "empty shape; scalars are shape [1]"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(op, format!("zero-sized dimension in {shape:?}")));
    }
    Ok(())
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

impl Tensor {
    // ---- construction ------------------------------------------------

    fn make(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Result<Tensor> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        check_finite(op, &data)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Ok(Tensor(Rc::new(RefCell::new(TapeNode {
            data,
            shape,
            grad: None,
            requires_grad,
            parents,
            backward: if requires_grad { backward } else { None },
            op,
        }))))
    }

    /// A constant leaf. No gradient is ever tracked for it.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape("constant", shape)?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::invalid(
                "constant",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Self::make("constant", shape.to_vec(), data, Vec::new(), None)
    }

    /// A trainable leaf: gradients accumulate here.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Self::constant(shape, data)?;
        t.0.borrow_mut().requires_grad = true;
        t.0.borrow_mut().op = "param";
        Ok(t)
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Self::constant(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        check_shape("zeros", shape)?;
        Self::constant(shape, vec![0.0; shape.iter().product()])
    }

    /// Constant copy of this tensor, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        let n = self.0.borrow();
        Tensor(Rc::new(RefCell::new(TapeNode {
            data: n.data.clone(),
            shape: n.shape.clone(),
            grad: None,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
            op: "detach",
        })))
    }

    // ---- inspection --------------------------------------------------

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// The op that produced this node, for diagnostics.
    pub fn op_name(&self) -> &'static str {
        self.0.borrow().op
    }

    /// Copies the forward value out.
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        let n = self.0.borrow();
        if n.data.len() != 1 {
            return Err(Error::invalid(
                "item",
                format!("tensor has shape {:?}", n.shape),
            ));
        }
        Ok(n.data[0])
    }

    /// Copies the accumulated gradient out, if any has arrived.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Multiplies the stored gradient in place. Used by global norm clipping.
    pub fn scale_grad(&self, s: f64) {
        if let Some(g) = self.0.borrow_mut().grad.as_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    /// Replaces the stored value. Shape must match; values must be finite.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        check_finite("set_data", &data)?;
        let mut n = self.0.borrow_mut();
        if data.len() != n.data.len() {
            return Err(Error::invalid(
                "set_data",
                format!("{} values for shape {:?}", data.len(), n.shape),
            ));
        }
        n.data = data;
        Ok(())
    }

    /// Hands mutable value and read-only gradient to `f` in one borrow.
    /// Optimizers use this to apply an update step in place.
    pub fn apply_update(&self, f: impl FnOnce(&mut [f64], Option<&[f64]>)) -> Result<()> {
        {
            let n = &mut *self.0.borrow_mut();
            f(&mut n.data, n.grad.as_deref());
        }
        check_finite("apply_update", &self.0.borrow().data)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut n = self.0.borrow_mut();
        debug_assert_eq!(g.len(), n.data.len(), "gradient size mismatch on {}", n.op);
        match n.grad.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => n.grad = Some(g.to_vec()),
        }
    }

    // ---- backward engine ---------------------------------------------

    /// Runs backpropagation from a scalar. Errors if this tensor has more
    /// than one element. Gradients accumulate into every reachable node
    /// with `requires_grad`, on top of whatever is already stored.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Err(Error::invalid(
                "backward",
                "loss does not depend on any tracked parameter",
            ));
        }

        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);

        for node in order.iter().rev() {
            let (grads, parents) = {
                let n = node.0.borrow();
                let Some(bf) = n.backward.as_ref() else { continue };
                let Some(out_grad) = n.grad.as_ref() else { continue };
                let ctx = BackwardCtx {
                    out_grad,
                    out_data: &n.data,
                    parents: &n.parents,
                };
                (bf(&ctx), n.parents.clone())
            };
            debug_assert_eq!(grads.len(), parents.len());
            for (parent, grad) in parents.iter().zip(grads) {
                if let Some(g) = grad {
                    if parent.requires_grad() {
                        parent.accumulate_grad(&g);
                    }
                }
            }
        }
        Ok(())
    }

    /// Iterative post-order DFS over the grad-requiring subgraph. Parents
    /// come before children, so the reverse is the backprop order.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const RefCell<TapeNode>> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.borrow().parents.iter() {
                if p.requires_grad() {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    // ---- elementwise arithmetic --------------------------------------

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("add", rhs, |a, b| a + b, |_, _, _| (1.0, 1.0))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("sub", rhs, |a, b| a - b, |_, _, _| (1.0, -1.0))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("mul", rhs, |a, b| a * b, |a, b, _| (b, a))
    }

    /// `c * x` elementwise.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary("scale", |x| c * x, move |_, _| c)
    }

    /// `x + c` elementwise.
    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary("add_scalar", |x| x + c, |_, _| 1.0)
    }

    /// `1 - x` elementwise. Gate complement in the coupled cell update.
    pub fn one_minus(&self) -> Result<Tensor> {
        self.unary("one_minus", |x| 1.0 - x, |_, _| -1.0)
    }

    pub fn abs(&self) -> Result<Tensor> {
        self.unary("abs", |x| x.abs(), |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Elementwise square root. Negative inputs surface as a non-finite
    /// output error.
    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| 0.5 / y)
    }

    /// Elementwise unary op. `df(x, y)` is the local derivative given input
    /// x and output y.
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let n = self.0.borrow();
        let data: Vec<f64> = n.data.iter().map(|&x| f(x)).collect();
        let shape = n.shape.clone();
        drop(n);
        let backward: BackwardFn = Box::new(move |ctx| {
            let x = ctx.parents[0].0.borrow();
            let g = ctx
                .out_grad
                .iter()
                .zip(x.data.iter().zip(ctx.out_data))
                .map(|(&go, (&xi, &yi))| go * df(xi, yi))
                .collect();
            vec![Some(g)]
        });
        Self::make(op, shape, data, vec![self.clone()], Some(backward))
    }

    /// Elementwise binary op with numpy-style broadcasting. `df(a, b, y)`
    /// returns the two local derivatives.
    fn zip_broadcast(
        &self,
        op: &'static str,
        rhs: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let out_shape = broadcast_shape(&ls, &rs).ok_or_else(|| Error::ShapeMismatch {
            op,
            lhs: ls.clone(),
            rhs: rs.clone(),
        })?;
        let la = self.0.borrow();
        let ra = rhs.0.borrow();
        let data = if ls == rs {
            la.data
                .iter()
                .zip(ra.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect()
        } else {
            let sa = broadcast_strides(&ls, &out_shape);
            let sb = broadcast_strides(&rs, &out_shape);
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for idx in MultiIndex::new(&out_shape) {
                out.push(f(la.data[offset(&idx, &sa)], ra.data[offset(&idx, &sb)]));
            }
            out
        };
        drop(la);
        drop(ra);

        let (lsc, rsc, osc) = (ls.clone(), rs.clone(), out_shape.clone());
        let backward: BackwardFn = Box::new(move |ctx| {
            let a = ctx.parents[0].0.borrow();
            let b = ctx.parents[1].0.borrow();
            let mut ga = vec![0.0; a.data.len()];
            let mut gb = vec![0.0; b.data.len()];
            if lsc == rsc {
                for i in 0..ctx.out_grad.len() {
                    let (da, db) = df(a.data[i], b.data[i], ctx.out_data[i]);
                    ga[i] += ctx.out_grad[i] * da;
                    gb[i] += ctx.out_grad[i] * db;
                }
            } else {
                let sa = broadcast_strides(&lsc, &osc);
                let sb = broadcast_strides(&rsc, &osc);
                for (i, idx) in MultiIndex::new(&osc).enumerate() {
                    let (oa, ob) = (offset(&idx, &sa), offset(&idx, &sb));
                    let (da, db) = df(a.data[oa], b.data[ob], ctx.out_data[i]);
                    ga[oa] += ctx.out_grad[i] * da;
                    gb[ob] += ctx.out_grad[i] * db;
                }
            }
            vec![Some(ga), Some(gb)]
        });
        Self::make(op, out_shape, data, vec![self.clone(), rhs.clone()], Some(backward))
    }

    // ---- linear algebra ----------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls,
                rhs: rs,
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let a = self.0.borrow();
        let b = rhs.0.borrow();
        let data = raw_matmul(&a.data, &b.data, m, k, n);
        drop(a);
        drop(b);

        let backward: BackwardFn = Box::new(move |ctx| {
            let a = ctx.parents[0].0.borrow();
            let b = ctx.parents[1].0.borrow();
            // dA = dY . B^T, dB = A^T . dY
            let bt = raw_transpose(&b.data, k, n);
            let at = raw_transpose(&a.data, m, k);
            let ga = raw_matmul(ctx.out_grad, &bt, m, n, k);
            let gb = raw_matmul(&at, ctx.out_grad, k, m, n);
            vec![Some(ga), Some(gb)]
        });
        Self::make(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), rhs.clone()],
            Some(backward),
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("expects a matrix, got shape {s:?}"),
            ));
        }
        let (m, n) = (s[0], s[1]);
        let data = raw_transpose(&self.0.borrow().data, m, n);
        let backward: BackwardFn = Box::new(move |ctx| {
            vec![Some(raw_transpose(ctx.out_grad, n, m))]
        });
        Self::make(
            "transpose",
            vec![n, m],
            data,
            vec![self.clone()],
            Some(backward),
        )
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.0.borrow().data.iter().sum();
        let n = self.numel();
        let backward: BackwardFn = Box::new(move |ctx| {
            vec![Some(vec![ctx.out_grad[0]; n])]
        });
        Self::make("sum", vec![1], vec![total], vec![self.clone()], Some(backward))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        let avg: f64 = self.0.borrow().data.iter().sum::<f64>() / n as f64;
        let backward: BackwardFn = Box::new(move |ctx| {
            vec![Some(vec![ctx.out_grad[0] / n as f64; n])]
        });
        Self::make("mean", vec![1], vec![avg], vec![self.clone()], Some(backward))
    }

    // ---- shape plumbing -----------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape("reshape", shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.to_vec();
        let backward: BackwardFn = Box::new(|ctx| vec![Some(ctx.out_grad.to_vec())]);
        Self::make(
            "reshape",
            shape.to_vec(),
            data,
            vec![self.clone()],
            Some(backward),
        )
    }

    /// Flattens to a column vector `[n, 1]`.
    pub fn flatten_col(&self) -> Result<Tensor> {
        let n = self.numel();
        self.reshape(&[n, 1])
    }

    /// Concatenates tensors along `axis`. All other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no tensors given"));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        let mut axis_total = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s,
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;

        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let axis_sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();

        let mut data = vec![0.0; out_shape.iter().product()];
        let out_row = axis_total * inner;
        let mut base = 0usize;
        for (p, &asz) in parts.iter().zip(&axis_sizes) {
            let pd = p.0.borrow();
            let part_row = asz * inner;
            for o in 0..outer {
                let src = &pd.data[o * part_row..(o + 1) * part_row];
                let dst = o * out_row + base;
                data[dst..dst + part_row].copy_from_slice(src);
            }
            base += part_row;
        }

        let sizes = axis_sizes.clone();
        let backward: BackwardFn = Box::new(move |ctx| {
            let mut grads = Vec::with_capacity(sizes.len());
            let mut base = 0usize;
            for &asz in &sizes {
                let part_row = asz * inner;
                let mut g = vec![0.0; outer * part_row];
                for o in 0..outer {
                    let src = o * out_row + base;
                    g[o * part_row..(o + 1) * part_row]
                        .copy_from_slice(&ctx.out_grad[src..src + part_row]);
                }
                grads.push(Some(g));
                base += part_row;
            }
            grads
        });
        Self::make(
            "concat",
            out_shape,
            data,
            parts.iter().map(|p| (*p).clone()).collect(),
            Some(backward),
        )
    }

    /// Picks row `i` of a matrix as a `[1, n]` tensor. The backward pass
    /// scatters into just that row, which is what an embedding lookup needs.
    pub fn select_row(&self, i: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::invalid(
                "select_row",
                format!("expects a matrix, got shape {s:?}"),
            ));
        }
        let (rows, cols) = (s[0], s[1]);
        if i >= rows {
            return Err(Error::invalid(
                "select_row",
                format!("row {i} out of range for {rows} rows"),
            ));
        }
        let data = self.0.borrow().data[i * cols..(i + 1) * cols].to_vec();
        let backward: BackwardFn = Box::new(move |ctx| {
            let mut g = vec![0.0; rows * cols];
            g[i * cols..(i + 1) * cols].copy_from_slice(ctx.out_grad);
            vec![Some(g)]
        });
        Self::make(
            "select_row",
            vec![1, cols],
            data,
            vec![self.clone()],
            Some(backward),
        )
    }

    // ---- activations ---------------------------------------------------

    pub fn activation(&self, kind: Activation) -> Result<Tensor> {
        self.unary(kind.op_name(), move |x| kind.apply(x), move |x, y| {
            kind.derivative(x, y)
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.activation(Activation::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.activation(Activation::Tanh)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.activation(Activation::Relu)
    }

    /// Softmax over all elements, shape preserved. Max-shifted for
    /// stability.
    pub fn softmax(&self) -> Result<Tensor> {
        let n = self.0.borrow();
        let max = n.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = n.data.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|&e| e / z).collect();
        let shape = n.shape.clone();
        drop(n);
        let backward: BackwardFn = Box::new(|ctx| {
            // dx_i = y_i * (g_i - sum_j g_j y_j)
            let dot: f64 = ctx
                .out_grad
                .iter()
                .zip(ctx.out_data)
                .map(|(&g, &y)| g * y)
                .sum();
            let g = ctx
                .out_grad
                .iter()
                .zip(ctx.out_data)
                .map(|(&g, &y)| y * (g - dot))
                .collect();
            vec![Some(g)]
        });
        Self::make("softmax", shape, data, vec![self.clone()], Some(backward))
    }
}

/// The pointwise nonlinearities the cells and the search grid know about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu,
    Elu,
    Selu,
}

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const ELU_ALPHA: f64 = 1.0;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Elu => "elu",
            Activation::Selu => "selu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            "elu" => Ok(Activation::Elu),
            "selu" => Ok(Activation::Selu),
            other => Err(Error::invalid(
                "activation",
                format!(
                    "unknown activation {other:?} \
                     (sigmoid, tanh, relu, leaky_relu, elu, selu)"
                ),
            )),
        }
    }

    pub fn op_name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Elu => "elu",
            Activation::Selu => "selu",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_RELU_SLOPE * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    ELU_ALPHA * (x.exp() - 1.0)
                }
            }
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
                }
            }
        }
    }

    /// d out / d in, given input `x` and output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + ELU_ALPHA
                }
            }
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    y + SELU_LAMBDA * SELU_ALPHA
                }
            }
        }
    }
}

// ---- broadcasting helpers ---------------------------------------------

/// Right-aligned numpy broadcast of two shapes, or `None` if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
    }
    Some(out)
}

/// Row-major strides of `shape` against broadcast target `out`, with zero
/// stride on stretched dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - shape.len();
    let mut real = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        real[i] = acc;
        acc *= shape[i];
    }
    (0..rank)
        .map(|i| {
            if i < pad || (shape[i - pad] == 1 && out[i] > 1) {
                0
            } else {
                real[i - pad]
            }
        })
        .collect()
}

fn offset(idx: &[usize], strides: &[usize]) -> usize {
    idx.iter().zip(strides).map(|(i, s)| i * s).sum()
}

/// Odometer over a shape's multi-indices in row-major order.
struct MultiIndex {
    shape: Vec<usize>,
    next: Option<Vec<usize>>,
}

impl MultiIndex {
    fn new(shape: &[usize]) -> Self {
        MultiIndex {
            shape: shape.to_vec(),
            next: Some(vec![0; shape.len()]),
        }
    }
}

impl Iterator for MultiIndex {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut step = current.clone();
        for i in (0..step.len()).rev() {
            step[i] += 1;
            if step[i] < self.shape[i] {
                self.next = Some(step);
                break;
            }
            step[i] = 0;
        }
        Some(current)
    }
}

// ---- raw kernels shared by forward and backward -----------------------

fn raw_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn raw_transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit;

    #[test]
    fn scalar_chain_gradients() {
        // y = (a * b + a).mean() with scalars: dy/da = b + 1, dy/db = a
        let a = Tensor::param(&[1], vec![2.0]).unwrap();
        let b = Tensor::param(&[1], vec![-3.0]).unwrap();
        let y = a.mul(&b).unwrap().add(&a).unwrap().mean().unwrap();
        assert!((y.item().unwrap() - (-4.0)).abs() < 1e-12);
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![-2.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x*x; dy/dx = 4x
        let x = Tensor::param(&[1], vec![1.5]).unwrap();
        let sq = x.mul(&x).unwrap();
        let y = sq.add(&sq).unwrap().sum().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let make_loss = |x: &Tensor| x.mul(x).unwrap().sum().unwrap();
        make_loss(&x).backward().unwrap();
        make_loss(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
        make_loss(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(&[2, 2], vec![1.0; 4]).unwrap();
        let y = x.scale(2.0).unwrap();
        assert!(matches!(y.backward(), Err(Error::Invalid { op: "backward", .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let x = Tensor::constant(&[2], vec![1.0e308, 1.0e308]).unwrap();
        let doubled = x.add(&x);
        assert!(matches!(doubled, Err(Error::NonFinite { op: "add" })));
        let neg = Tensor::constant(&[1], vec![-1.0]).unwrap();
        assert!(matches!(neg.sqrt(), Err(Error::NonFinite { op: "sqrt" })));
    }

    #[test]
    fn constant_leaf_rejects_non_finite_input() {
        assert!(Tensor::constant(&[1], vec![f64::NAN]).is_err());
        assert!(Tensor::constant(&[1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn broadcasting_shapes() {
        assert_eq!(broadcast_shape(&[3, 4], &[3, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[4], &[3, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[1], &[2, 3, 4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }

    #[test]
    fn broadcast_add_values_and_grads() {
        let a = Tensor::param(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::param(&[1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        let y = a.add(&b).unwrap();
        assert_eq!(y.shape(), vec![2, 3]);
        assert_eq!(y.to_vec(), vec![11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        y.sum().unwrap().backward().unwrap();
        // each a element is used 3 times, each b element 2 times
        assert_eq!(a.grad().unwrap(), vec![3.0, 3.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_matches_hand_result() {
        let a = Tensor::constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::constant(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 2]).unwrap();
        assert!(matches!(
            a.matmul(&b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn softmax_sums_to_one_and_orders() {
        let x = Tensor::constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.softmax().unwrap().to_vec();
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(y[0] < y[1] && y[1] < y[2]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = Tensor::constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let shifted = Tensor::constant(&[3], vec![1001.0, 1002.0, 1003.0]).unwrap();
        let a = x.softmax().unwrap().to_vec();
        let b = shifted.softmax().unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_rows_and_cols_round_out() {
        let a = Tensor::constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::constant(&[1, 2], vec![3.0, 4.0]).unwrap();
        let rows = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(rows.shape(), vec![2, 2]);
        assert_eq!(rows.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);

        let c = Tensor::constant(&[2, 1], vec![9.0, 10.0]).unwrap();
        let cols = Tensor::concat(&[&rows, &c], 1).unwrap();
        assert_eq!(cols.shape(), vec![2, 3]);
        assert_eq!(cols.to_vec(), vec![1.0, 2.0, 9.0, 3.0, 4.0, 10.0]);
    }

    #[test]
    fn concat_backward_routes_slices() {
        let a = Tensor::param(&[2, 2], vec![1.0; 4]).unwrap();
        let b = Tensor::param(&[1, 2], vec![1.0; 2]).unwrap();
        let y = Tensor::concat(&[&a, &b], 0).unwrap();
        let w = Tensor::constant(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        y.mul(&w).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![5.0, 6.0]);
    }

    #[test]
    fn select_row_scatters_gradient() {
        let w = Tensor::param(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let row = w.select_row(1).unwrap();
        assert_eq!(row.to_vec(), vec![3.0, 4.0]);
        row.scale(2.0).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        let d = x.mul(&x).unwrap().detach();
        assert!(!d.requires_grad());
        let y = d.mul(&x).unwrap().sum().unwrap();
        y.backward().unwrap();
        // only the direct factor contributes: dy/dx = detach(x^2) = 4
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn finite_difference_elementwise_ops() {
        let mut rng = crate::rng::seeded(11);
        for op in ["add", "sub", "mul"] {
            let a = testkit::random_param(&[3, 4], &mut rng);
            let b = testkit::random_param(&[3, 4], &mut rng);
            let f = |inputs: &[Tensor]| -> Tensor {
                let r = match op {
                    "add" => inputs[0].add(&inputs[1]),
                    "sub" => inputs[0].sub(&inputs[1]),
                    _ => inputs[0].mul(&inputs[1]),
                };
                r.unwrap().sum().unwrap()
            };
            testkit::assert_grads_match(&[a, b], f, 1e-4, &format!("elementwise {op}"));
        }
    }

    #[test]
    fn finite_difference_broadcast_mul() {
        let mut rng = crate::rng::seeded(12);
        let a = testkit::random_param(&[2, 3, 4], &mut rng);
        let b = testkit::random_param(&[3, 1], &mut rng);
        testkit::assert_grads_match(
            &[a, b],
            |t| t[0].mul(&t[1]).unwrap().mean().unwrap(),
            1e-4,
            "broadcast mul",
        );
    }

    #[test]
    fn finite_difference_matmul_transpose() {
        let mut rng = crate::rng::seeded(13);
        let a = testkit::random_param(&[3, 5], &mut rng);
        let b = testkit::random_param(&[5, 2], &mut rng);
        testkit::assert_grads_match(
            &[a, b],
            |t| {
                t[0].matmul(&t[1])
                    .unwrap()
                    .transpose()
                    .unwrap()
                    .sum()
                    .unwrap()
            },
            1e-4,
            "matmul+transpose",
        );
    }

    #[test]
    fn finite_difference_activations() {
        let mut rng = crate::rng::seeded(14);
        for kind in [
            Activation::Sigmoid,
            Activation::Tanh,
            Activation::Relu,
            Activation::LeakyRelu,
            Activation::Elu,
            Activation::Selu,
        ] {
            let x = testkit::random_param(&[4, 4], &mut rng);
            testkit::assert_grads_match(
                &[x],
                move |t| t[0].activation(kind).unwrap().sum().unwrap(),
                1e-4,
                kind.op_name(),
            );
        }
    }

    #[test]
    fn finite_difference_softmax_reductions() {
        let mut rng = crate::rng::seeded(15);
        let x = testkit::random_param(&[6], &mut rng);
        let w = testkit::random_constant(&[6], &mut rng);
        testkit::assert_grads_match(
            &[x],
            move |t| t[0].softmax().unwrap().mul(&w).unwrap().sum().unwrap(),
            1e-4,
            "softmax",
        );

        let y = testkit::random_param(&[3, 3], &mut rng);
        testkit::assert_grads_match(
            &[y],
            |t| t[0].abs().unwrap().mean().unwrap(),
            1e-4,
            "abs+mean",
        );
    }

    #[test]
    fn finite_difference_scalar_helpers() {
        let mut rng = crate::rng::seeded(16);
        let x = testkit::random_param(&[5], &mut rng);
        testkit::assert_grads_match(
            &[x],
            |t| {
                t[0].scale(-1.7)
                    .unwrap()
                    .add_scalar(0.3)
                    .unwrap()
                    .one_minus()
                    .unwrap()
                    .mul(&t[0].sigmoid().unwrap())
                    .unwrap()
                    .sum()
                    .unwrap()
            },
            1e-4,
            "scalar helpers",
        );
    }

    #[test]
    fn finite_difference_select_and_concat() {
        let mut rng = crate::rng::seeded(17);
        let w = testkit::random_param(&[4, 3], &mut rng);
        let x = testkit::random_param(&[1, 3], &mut rng);
        testkit::assert_grads_match(
            &[w, x],
            |t| {
                let r0 = t[0].select_row(0).unwrap();
                let r2 = t[0].select_row(2).unwrap();
                let stacked = Tensor::concat(&[&r0, &r2, &t[1]], 0).unwrap();
                stacked.mul(&stacked).unwrap().sum().unwrap()
            },
            1e-4,
            "select_row+concat",
        );
    }
}
