//! Operation tape for reverse-mode differentiation.
//!
//! Forward ops append nodes in execution order; `backward` walks the nodes in
//! reverse recording order exactly once, accumulating adjoints left-to-right
//! so gradients are bit-identical across runs. A tape can run backward once;
//! a second call is rejected (record a fresh tape per step instead).

use std::sync::Arc;

use super::kernels;
use super::{Tensor, TensorError, TensorResult};
use crate::scalar::{sigmoid, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Expr<S> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    MeanAxis { x: Var, axis: usize },
    SoftmaxAxis { x: Var, axis: usize },
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Softplus(Var),
    NegSqDist(Var, Var),
    Scale { x: Var, c: S },
    AddScalar(Var),
    GatherRows { x: Var, indices: Arc<Vec<u32>> },
    SegmentMeanRows { x: Var, indices: Arc<Vec<u32>>, offsets: Arc<Vec<usize>> },
    HeadDot { a: Var, b: Var, heads: usize },
    MulHeadScalars { x: Var, w: Var, heads: usize },
    Reshape(Var),
    NarrowCols { x: Var, start: usize },
    MeanAll(Var),
}

struct Node<S> {
    value: Tensor<S>,
    expr: Expr<S>,
    requires_grad: bool,
}

/// Records forward operations and replays them in reverse for gradients.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Expr::Leaf, true)
    }

    /// Leaf treated as a constant: no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Expr::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, expr: Expr<S>, requires_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        self.debug_check_finite(&value, &expr);
        self.nodes.push(Node {
            value,
            expr,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Debug builds verify that no op manufactures NaN/Inf from finite inputs.
    #[cfg(debug_assertions)]
    fn debug_check_finite(&self, out: &Tensor<S>, expr: &Expr<S>) {
        if out.all_finite() {
            return;
        }
        let inputs_finite = expr_inputs(expr)
            .iter()
            .all(|v| self.nodes[v.0].value.all_finite());
        if inputs_finite {
            panic!("forward op produced non-finite values from finite inputs");
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- forward ops -----------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        kernels::matmul_nn_acc(av.data(), bv.data(), out.data_mut(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Expr::Matmul(a, b), rg))
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(bv.data()) {
            *o += x;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Expr::Add(a, b), rg))
    }

    /// `[m,n] + [n]`, the row vector added to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 1 || av.shape()[1] != bv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let n = bv.shape()[0];
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &x) in row.iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Expr::AddRow(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(bv.data()) {
            *o -= x;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Expr::Sub(a, b), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= x;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Expr::Mul(a, b), rg))
    }

    /// Concatenate along `axis` (0 for vectors; 0 = stack rows or 1 = widen
    /// rows for matrices).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> TensorResult<Var> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.value(parts[0]);
        let rank = first.rank();
        let bad = |lhs: &Tensor<S>, rhs: &Tensor<S>| TensorError::ShapeMismatch {
            op: "concat",
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if rank == 0 || axis >= rank {
            return Err(TensorError::BadShape {
                op: "concat",
                shape: first.shape().to_vec(),
                reason: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        for &p in &parts[1..] {
            let pv = self.value(p);
            if pv.rank() != rank {
                return Err(bad(first, pv));
            }
            for d in 0..rank {
                if d != axis && pv.shape()[d] != first.shape()[d] {
                    return Err(bad(first, pv));
                }
            }
        }
        let out = if rank == 1 || axis == 0 {
            let mut data = Vec::new();
            let mut total = 0;
            for &p in parts {
                let pv = self.value(p);
                data.extend_from_slice(pv.data());
                total += pv.shape()[0];
            }
            let mut shape = first.shape().to_vec();
            shape[0] = total;
            Tensor::new(shape, data)?
        } else {
            let m = first.shape()[0];
            let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[1]).collect();
            let total_w: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(m * total_w);
            for i in 0..m {
                for (&p, &w) in parts.iter().zip(&widths) {
                    let pv = self.value(p);
                    data.extend_from_slice(&pv.data()[i * w..(i + 1) * w]);
                }
            }
            Tensor::new(vec![m, total_w], data)?
        };
        let rg = self.any_grad(parts);
        Ok(self.push(
            out,
            Expr::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Arithmetic mean along `axis`; a vector reduces to a scalar.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> TensorResult<Var> {
        let xv = self.value(x);
        let out = match (xv.rank(), axis) {
            (1, 0) => {
                let n = xv.shape()[0];
                let mut acc = S::zero();
                for &v in xv.data() {
                    acc += v;
                }
                Tensor::scalar(acc / S::of_usize(n.max(1)))
            }
            (2, 0) => {
                let (m, n) = (xv.shape()[0], xv.shape()[1]);
                let mut data = vec![S::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        data[j] += xv.data()[i * n + j];
                    }
                }
                let inv = S::one() / S::of_usize(m.max(1));
                for v in &mut data {
                    *v *= inv;
                }
                Tensor::vector(data)
            }
            (2, 1) => {
                let (m, n) = (xv.shape()[0], xv.shape()[1]);
                let inv = S::one() / S::of_usize(n.max(1));
                let mut data = vec![S::zero(); m];
                for i in 0..m {
                    let mut acc = S::zero();
                    for j in 0..n {
                        acc += xv.data()[i * n + j];
                    }
                    data[i] = acc * inv;
                }
                Tensor::vector(data)
            }
            (r, _) => {
                return Err(TensorError::BadShape {
                    op: "mean_axis",
                    shape: xv.shape().to_vec(),
                    reason: format!("axis {axis} invalid for rank {r}"),
                })
            }
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Expr::MeanAxis { x, axis }, rg))
    }

    /// Stable softmax along `axis` of a vector or matrix.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> TensorResult<Var> {
        let xv = self.value(x);
        let (lanes, stride, lane_len) = softmax_layout(xv.shape(), axis).ok_or_else(|| {
            TensorError::BadShape {
                op: "softmax_axis",
                shape: xv.shape().to_vec(),
                reason: format!("axis {axis} invalid"),
            }
        })?;
        let mut out = xv.clone();
        for lane in 0..lanes {
            let base = lane_base(lane, stride, lane_len, axis, xv.shape());
            let mut max = S::neg_infinity();
            for l in 0..lane_len {
                max = max.max(out.data()[base + l * stride]);
            }
            let mut sum = S::zero();
            for l in 0..lane_len {
                let i = base + l * stride;
                let e = (out.data()[i] - max).exp();
                out.data_mut()[i] = e;
                sum += e;
            }
            let inv = S::one() / sum;
            for l in 0..lane_len {
                out.data_mut()[base + l * stride] *= inv;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Expr::SoftmaxAxis { x, axis }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(out, Expr::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(S::zero()));
        let rg = self.any_grad(&[x]);
        self.push(out, Expr::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        let rg = self.any_grad(&[x]);
        self.push(out, Expr::Exp(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(crate::scalar::softplus);
        let rg = self.any_grad(&[x]);
        self.push(out, Expr::Softplus(x), rg)
    }

    /// Rowwise `-(||a_i - b_i||^2)`; vectors reduce to a scalar.
    pub fn neg_sq_dist(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.rank() > 2 {
            return Err(TensorError::ShapeMismatch {
                op: "neg_sq_dist",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = if av.rank() <= 1 {
            Tensor::scalar(-kernels::sq_dist(av.data(), bv.data()))
        } else {
            let (m, n) = (av.shape()[0], av.shape()[1]);
            let mut d = vec![S::zero(); m];
            kernels::row_sq_dist(av.data(), bv.data(), &mut d, n);
            for v in &mut d {
                *v = -*v;
            }
            Tensor::vector(d)
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Expr::NegSqDist(a, b), rg))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(out, Expr::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.any_grad(&[x]);
        self.push(out, Expr::AddScalar(x), rg)
    }

    /// Select rows of a matrix by index; duplicates allowed.
    pub fn gather_rows(&mut self, x: Var, indices: Arc<Vec<u32>>) -> TensorResult<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                shape: xv.shape().to_vec(),
                reason: "expects a matrix".into(),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices.iter() {
            let i = i as usize;
            if i >= m {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    bound: m,
                });
            }
            data.extend_from_slice(&xv.data()[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![indices.len(), n], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Expr::GatherRows { x, indices }, rg))
    }

    /// Mean of the rows listed per segment; empty segments yield zero rows.
    pub fn segment_mean_rows(
        &mut self,
        x: Var,
        indices: Arc<Vec<u32>>,
        offsets: Arc<Vec<usize>>,
    ) -> TensorResult<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || offsets.is_empty() {
            return Err(TensorError::BadShape {
                op: "segment_mean_rows",
                shape: xv.shape().to_vec(),
                reason: "expects a matrix and non-empty offsets".into(),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= m) {
            return Err(TensorError::IndexOutOfBounds {
                op: "segment_mean_rows",
                index: bad as usize,
                bound: m,
            });
        }
        let segments = offsets.len() - 1;
        let mut out = Tensor::zeros(vec![segments, n]);
        kernels::segment_mean_rows(xv.data(), n, &indices, &offsets, out.data_mut());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Expr::SegmentMeanRows { x, indices, offsets }, rg))
    }

    /// Per-head rowwise dot product: `[m,d] x [m,d] -> [m,heads]`.
    pub fn head_dot(&mut self, a: Var, b: Var, heads: usize) -> TensorResult<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.rank() != 2 || av.shape()[1] % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "head_dot",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, d) = (av.shape()[0], av.shape()[1]);
        let dh = d / heads;
        let mut data = vec![S::zero(); m * heads];
        for i in 0..m {
            for h in 0..heads {
                let off = i * d + h * dh;
                data[i * heads + h] =
                    kernels::dot(&av.data()[off..off + dh], &bv.data()[off..off + dh]);
            }
        }
        let out = Tensor::new(vec![m, heads], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Expr::HeadDot { a, b, heads }, rg))
    }

    /// Scale each head block of `x` by the matching per-head weight:
    /// `out[i, h*dh+j] = x[i, h*dh+j] * w[i, h]`.
    pub fn mul_head_scalars(&mut self, x: Var, w: Var, heads: usize) -> TensorResult<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 2
            || wv.rank() != 2
            || xv.shape()[0] != wv.shape()[0]
            || wv.shape()[1] != heads
            || xv.shape()[1] % heads != 0
        {
            return Err(TensorError::ShapeMismatch {
                op: "mul_head_scalars",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (m, d) = (xv.shape()[0], xv.shape()[1]);
        let dh = d / heads;
        let mut out = xv.clone();
        for i in 0..m {
            for h in 0..heads {
                let wv_ih = wv.data()[i * heads + h];
                let off = i * d + h * dh;
                for v in &mut out.data_mut()[off..off + dh] {
                    *v *= wv_ih;
                }
            }
        }
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(out, Expr::MulHeadScalars { x, w, heads }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> TensorResult<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Expr::Reshape(x), rg))
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> TensorResult<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || start + len > xv.shape()[1] {
            return Err(TensorError::BadShape {
                op: "narrow_cols",
                shape: xv.shape().to_vec(),
                reason: format!("columns {start}..{} out of range", start + len),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv.data()[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Expr::NarrowCols { x, start }, rg))
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut acc = S::zero();
        for &v in xv.data() {
            acc += v;
        }
        let out = Tensor::scalar(acc / S::of_usize(xv.numel().max(1)));
        let rg = self.any_grad(&[x]);
        self.push(out, Expr::MeanAll(x), rg)
    }

    /// `x @ w + b` with the bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> TensorResult<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of a scalar `root` with respect to every `param` leaf.
    pub fn backward(&mut self, root: Var) -> TensorResult<Gradients<S>> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        if root.0 >= self.nodes.len() {
            return Err(TensorError::UnknownVariable);
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(
            self.nodes[root.0].value.shape().to_vec(),
            S::one(),
        ));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let expr = self.nodes[i].expr.clone();
            if matches!(expr, Expr::Leaf) {
                grads[i] = Some(g); // kept for the caller
                continue;
            }
            self.propagate(&expr, i, &g, &mut grads);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| (n.value.shape().to_vec(), matches!(n.expr, Expr::Leaf) && n.requires_grad))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, expr: &Expr<S>, out_idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let out_val = &self.nodes[out_idx].value;
        match expr {
            Expr::Leaf => {}
            Expr::Matmul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let da = grad_buf(grads, *a, av.shape());
                    kernels::matmul_nt_acc(g.data(), bv.data(), da.data_mut(), m, n, k);
                }
                if self.nodes[b.0].requires_grad {
                    let db = grad_buf(grads, *b, bv.shape());
                    kernels::matmul_tn_acc(av.data(), g.data(), db.data_mut(), m, k, n);
                }
            }
            Expr::Add(a, b) => {
                for v in [a, b] {
                    if self.nodes[v.0].requires_grad {
                        let d = grad_buf(grads, *v, g.shape());
                        add_assign(d.data_mut(), g.data());
                    }
                }
            }
            Expr::AddRow(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let d = grad_buf(grads, *a, g.shape());
                    add_assign(d.data_mut(), g.data());
                }
                if self.nodes[b.0].requires_grad {
                    let n = self.nodes[b.0].value.shape()[0];
                    let d = grad_buf(grads, *b, &[n]);
                    for row in g.data().chunks(n) {
                        add_assign(d.data_mut(), row);
                    }
                }
            }
            Expr::Sub(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let d = grad_buf(grads, *a, g.shape());
                    add_assign(d.data_mut(), g.data());
                }
                if self.nodes[b.0].requires_grad {
                    let d = grad_buf(grads, *b, g.shape());
                    for (o, &x) in d.data_mut().iter_mut().zip(g.data()) {
                        *o -= x;
                    }
                }
            }
            Expr::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data();
                    let d = grad_buf(grads, *a, g.shape());
                    for ((o, &gi), &bi) in d.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data();
                    let d = grad_buf(grads, *b, g.shape());
                    for ((o, &gi), &ai) in d.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Expr::Concat { parts, axis } => {
                if g.rank() == 1 || *axis == 0 {
                    let mut row_off = 0;
                    for &p in parts {
                        let pv = &self.nodes[p.0].value;
                        let rows = pv.shape()[0];
                        let elems = pv.numel();
                        if self.nodes[p.0].requires_grad {
                            let d = grad_buf(grads, p, pv.shape());
                            let start = if g.rank() == 1 {
                                row_off
                            } else {
                                row_off * pv.cols()
                            };
                            add_assign(d.data_mut(), &g.data()[start..start + elems]);
                        }
                        row_off += rows;
                    }
                } else {
                    let m = g.shape()[0];
                    let total_w = g.shape()[1];
                    let mut col_off = 0;
                    for &p in parts {
                        let pv = &self.nodes[p.0].value;
                        let w = pv.shape()[1];
                        if self.nodes[p.0].requires_grad {
                            let d = grad_buf(grads, p, pv.shape());
                            for i in 0..m {
                                let src = &g.data()[i * total_w + col_off..i * total_w + col_off + w];
                                add_assign(&mut d.data_mut()[i * w..(i + 1) * w], src);
                            }
                        }
                        col_off += w;
                    }
                }
            }
            Expr::MeanAxis { x, axis } => {
                if !self.nodes[x.0].requires_grad {
                    return;
                }
                let xv_shape = self.nodes[x.0].value.shape().to_vec();
                let d = grad_buf(grads, *x, &xv_shape);
                match (xv_shape.len(), *axis) {
                    (1, 0) => {
                        let inv = S::one() / S::of_usize(xv_shape[0].max(1));
                        let gs = g.item() * inv;
                        for o in d.data_mut() {
                            *o += gs;
                        }
                    }
                    (2, 0) => {
                        let (m, n) = (xv_shape[0], xv_shape[1]);
                        let inv = S::one() / S::of_usize(m.max(1));
                        for i in 0..m {
                            for j in 0..n {
                                d.data_mut()[i * n + j] += g.data()[j] * inv;
                            }
                        }
                    }
                    (2, 1) => {
                        let (m, n) = (xv_shape[0], xv_shape[1]);
                        let inv = S::one() / S::of_usize(n.max(1));
                        for i in 0..m {
                            let gi = g.data()[i] * inv;
                            for j in 0..n {
                                d.data_mut()[i * n + j] += gi;
                            }
                        }
                    }
                    _ => unreachable!("validated in forward"),
                }
            }
            Expr::SoftmaxAxis { x, axis } => {
                if !self.nodes[x.0].requires_grad {
                    return;
                }
                let y = out_val;
                let shape = y.shape().to_vec();
                let (lanes, stride, lane_len) = softmax_layout(&shape, *axis).unwrap();
                let d = grad_buf(grads, *x, &shape);
                for lane in 0..lanes {
                    let base = lane_base(lane, stride, lane_len, *axis, &shape);
                    let mut s = S::zero();
                    for l in 0..lane_len {
                        let i = base + l * stride;
                        s += g.data()[i] * y.data()[i];
                    }
                    for l in 0..lane_len {
                        let i = base + l * stride;
                        d.data_mut()[i] += y.data()[i] * (g.data()[i] - s);
                    }
                }
            }
            Expr::Sigmoid(x) => {
                if self.nodes[x.0].requires_grad {
                    let y = out_val.data();
                    let d = grad_buf(grads, *x, out_val.shape());
                    for ((o, &gi), &yi) in d.data_mut().iter_mut().zip(g.data()).zip(y) {
                        *o += gi * yi * (S::one() - yi);
                    }
                }
            }
            Expr::Relu(x) => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.nodes[x.0].value.data();
                    let d = grad_buf(grads, *x, out_val.shape());
                    for ((o, &gi), &xi) in d.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        if xi > S::zero() {
                            *o += gi;
                        }
                    }
                }
            }
            Expr::Exp(x) => {
                if self.nodes[x.0].requires_grad {
                    let y = out_val.data();
                    let d = grad_buf(grads, *x, out_val.shape());
                    for ((o, &gi), &yi) in d.data_mut().iter_mut().zip(g.data()).zip(y) {
                        *o += gi * yi;
                    }
                }
            }
            Expr::Softplus(x) => {
                if self.nodes[x.0].requires_grad {
                    let xv = self.nodes[x.0].value.data();
                    let d = grad_buf(grads, *x, out_val.shape());
                    for ((o, &gi), &xi) in d.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        *o += gi * sigmoid(xi);
                    }
                }
            }
            Expr::NegSqDist(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let width = if av.rank() <= 1 {
                    av.numel()
                } else {
                    av.shape()[1]
                };
                let rows = av.numel() / width.max(1);
                let two = S::of(2.0);
                for r in 0..rows {
                    let gr = if av.rank() <= 1 { g.item() } else { g.data()[r] };
                    if self.nodes[a.0].requires_grad {
                        let d = grad_buf(grads, *a, av.shape());
                        for j in 0..width {
                            let i = r * width + j;
                            d.data_mut()[i] -= gr * two * (av.data()[i] - bv.data()[i]);
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let d = grad_buf(grads, *b, bv.shape());
                        for j in 0..width {
                            let i = r * width + j;
                            d.data_mut()[i] += gr * two * (av.data()[i] - bv.data()[i]);
                        }
                    }
                }
            }
            Expr::Scale { x, c } => {
                if self.nodes[x.0].requires_grad {
                    let d = grad_buf(grads, *x, out_val.shape());
                    for (o, &gi) in d.data_mut().iter_mut().zip(g.data()) {
                        *o += gi * *c;
                    }
                }
            }
            Expr::AddScalar(x) => {
                if self.nodes[x.0].requires_grad {
                    let d = grad_buf(grads, *x, out_val.shape());
                    add_assign(d.data_mut(), g.data());
                }
            }
            Expr::GatherRows { x, indices } => {
                if self.nodes[x.0].requires_grad {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let n = shape[1];
                    let d = grad_buf(grads, *x, &shape);
                    for (k, &i) in indices.iter().enumerate() {
                        let dst = &mut d.data_mut()[i as usize * n..(i as usize + 1) * n];
                        add_assign(dst, &g.data()[k * n..(k + 1) * n]);
                    }
                }
            }
            Expr::SegmentMeanRows { x, indices, offsets } => {
                if self.nodes[x.0].requires_grad {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let n = shape[1];
                    let d = grad_buf(grads, *x, &shape);
                    kernels::segment_mean_rows_backward(g.data(), n, indices, offsets, d.data_mut());
                }
            }
            Expr::HeadDot { a, b, heads } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, dcols) = (av.shape()[0], av.shape()[1]);
                let dh = dcols / heads;
                if self.nodes[a.0].requires_grad {
                    let d = grad_buf(grads, *a, av.shape());
                    head_dot_backward(g.data(), bv.data(), d.data_mut(), m, dcols, dh, *heads);
                }
                if self.nodes[b.0].requires_grad {
                    let d = grad_buf(grads, *b, bv.shape());
                    head_dot_backward(g.data(), av.data(), d.data_mut(), m, dcols, dh, *heads);
                }
            }
            Expr::MulHeadScalars { x, w, heads } => {
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (m, dcols) = (xv.shape()[0], xv.shape()[1]);
                let dh = dcols / heads;
                if self.nodes[x.0].requires_grad {
                    let d = grad_buf(grads, *x, xv.shape());
                    for i in 0..m {
                        for h in 0..*heads {
                            let wi = wv.data()[i * heads + h];
                            let off = i * dcols + h * dh;
                            for j in 0..dh {
                                d.data_mut()[off + j] += g.data()[off + j] * wi;
                            }
                        }
                    }
                }
                if self.nodes[w.0].requires_grad {
                    let d = grad_buf(grads, *w, wv.shape());
                    for i in 0..m {
                        for h in 0..*heads {
                            let off = i * dcols + h * dh;
                            let mut acc = S::zero();
                            for j in 0..dh {
                                acc += g.data()[off + j] * xv.data()[off + j];
                            }
                            d.data_mut()[i * heads + h] += acc;
                        }
                    }
                }
            }
            Expr::Reshape(x) => {
                if self.nodes[x.0].requires_grad {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let d = grad_buf(grads, *x, &shape);
                    add_assign(d.data_mut(), g.data());
                }
            }
            Expr::NarrowCols { x, start } => {
                if self.nodes[x.0].requires_grad {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let (n, len) = (shape[1], g.shape()[1]);
                    let m = shape[0];
                    let d = grad_buf(grads, *x, &shape);
                    for i in 0..m {
                        let dst = &mut d.data_mut()[i * n + start..i * n + start + len];
                        add_assign(dst, &g.data()[i * len..(i + 1) * len]);
                    }
                }
            }
            Expr::MeanAll(x) => {
                if self.nodes[x.0].requires_grad {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let numel: usize = shape.iter().product();
                    let gs = g.item() / S::of_usize(numel.max(1));
                    let d = grad_buf(grads, *x, &shape);
                    for o in d.data_mut() {
                        *o += gs;
                    }
                }
            }
        }
    }
}

/// Gradient store returned by [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    /// (shape, is_param_leaf) per node, for zero-filling untouched leaves.
    shapes: Vec<(Vec<usize>, bool)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the root with respect to a param leaf. Leaves that never
    /// influenced the root get a zero gradient.
    pub fn get(&self, v: Var) -> Tensor<S> {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes[v.0].0.clone()),
        }
    }

    /// Borrowing variant of [`Gradients::get`]; `None` means untouched leaf.
    pub fn get_ref(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }
}

fn add_assign<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

fn grad_buf<'a, S: Scalar>(
    grads: &'a mut [Option<Tensor<S>>],
    v: Var,
    shape: &[usize],
) -> &'a mut Tensor<S> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}

/// (lanes, stride, lane_len) for iterating a softmax axis.
fn softmax_layout(shape: &[usize], axis: usize) -> Option<(usize, usize, usize)> {
    match (shape.len(), axis) {
        (1, 0) => Some((1, 1, shape[0])),
        (2, 0) => Some((shape[1], shape[1], shape[0])),
        (2, 1) => Some((shape[0], 1, shape[1])),
        _ => None,
    }
}

fn lane_base(lane: usize, _stride: usize, lane_len: usize, axis: usize, shape: &[usize]) -> usize {
    match (shape.len(), axis) {
        (1, 0) => 0,
        (2, 0) => lane,          // lane = column, stride = n
        (2, 1) => lane * lane_len, // lane = row
        _ => unreachable!(),
    }
}

fn head_dot_backward<S: Scalar>(
    g: &[S],
    other: &[S],
    d: &mut [S],
    m: usize,
    dcols: usize,
    dh: usize,
    heads: usize,
) {
    for i in 0..m {
        for h in 0..heads {
            let gi = g[i * heads + h];
            let off = i * dcols + h * dh;
            for j in 0..dh {
                d[off + j] += gi * other[off + j];
            }
        }
    }
}

fn expr_inputs<S>(expr: &Expr<S>) -> Vec<Var> {
    match expr {
        Expr::Leaf => vec![],
        Expr::Matmul(a, b)
        | Expr::Add(a, b)
        | Expr::AddRow(a, b)
        | Expr::Sub(a, b)
        | Expr::Mul(a, b)
        | Expr::NegSqDist(a, b)
        | Expr::HeadDot { a, b, .. } => vec![*a, *b],
        Expr::MulHeadScalars { x, w, .. } => vec![*x, *w],
        Expr::Concat { parts, .. } => parts.clone(),
        Expr::MeanAxis { x, .. }
        | Expr::SoftmaxAxis { x, .. }
        | Expr::Sigmoid(x)
        | Expr::Relu(x)
        | Expr::Exp(x)
        | Expr::Softplus(x)
        | Expr::Scale { x, .. }
        | Expr::AddScalar(x)
        | Expr::GatherRows { x, .. }
        | Expr::SegmentMeanRows { x, .. }
        | Expr::Reshape(x)
        | Expr::NarrowCols { x, .. }
        | Expr::MeanAll(x) => vec![*x],
    }
}
