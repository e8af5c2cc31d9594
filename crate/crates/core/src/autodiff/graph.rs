use std::rc::Rc;

use super::tensor::{broadcast_indices, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Marks a zero-padded slot in a gather index list.
pub const PAD: usize = usize::MAX;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Transpose(usize),
    Reshape(usize),
    SumTo(usize),
    BroadcastTo(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Abs(usize),
    MaxScalar(usize, f64),
    Clamp(usize, f64, f64),
    Sqrt(usize),
    RecipSafe(usize),
    Gather { src: usize, idx: Rc<[usize]> },
    ScatterAdd { src: usize, idx: Rc<[usize]> },
    Concat { parts: Vec<usize>, axis: usize },
}

impl Op {
    fn for_each_parent(&self, mut f: impl FnMut(usize)) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                f(*a);
                f(*b);
            }
            Op::MatMul { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SumTo(a)
            | Op::BroadcastTo(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::MaxScalar(a, _)
            | Op::Clamp(a, _, _)
            | Op::Sqrt(a)
            | Op::RecipSafe(a) => f(*a),
            Op::Gather { src, .. } | Op::ScatterAdd { src, .. } => f(*src),
            Op::Concat { parts, .. } => parts.iter().copied().for_each(f),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eagerly evaluated computation graph with reverse-mode differentiation.
///
/// Gradients returned by [`Graph::grad`] are ordinary nodes of the same graph,
/// so they can be fed into further computation and differentiated again.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut requires_grad = false;
        op.for_each_parent(|p| requires_grad |= self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        } else {
            let shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
                Error::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape()))
            })?;
            let data = if vb.numel() == 1 && shape == va.shape() {
                let y = vb.data()[0];
                va.data().iter().map(|&x| f(x, y)).collect()
            } else if va.numel() == 1 && shape == vb.shape() {
                let x = va.data()[0];
                vb.data().iter().map(|&y| f(x, y)).collect()
            } else {
                let ia = broadcast_indices(va.shape(), &shape);
                let ib = broadcast_indices(vb.shape(), &shape);
                ia.iter()
                    .zip(&ib)
                    .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                    .collect()
            };
            Tensor::from_parts(shape, data)
        };
        self.push(name, out, op)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.nodes[a.0].value.map(f);
        self.push(name, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a.0, c))
    }

    /// `a + c` for a scalar constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("shift", a, |x| x + c, Op::Shift(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a.0))
    }

    /// Elementwise `max(a, c)`.
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("max_scalar", a, |x| x.max(c), Op::MaxScalar(a.0, c))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a.0, lo, hi))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.data().iter().any(|&x| x < 0.0) {
            return Err(Error::NonFinite("sqrt"));
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a.0))
    }

    /// `1 / a`, with exact zeros mapped to zero instead of infinity.
    pub fn recip_safe(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "recip_safe",
            a,
            |x| if x == 0.0 { 0.0 } else { 1.0 / x },
            Op::RecipSafe(a.0),
        )
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        if va.ndim() != 2 || vb.ndim() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("expected 2-D operands, got {:?} and {:?}", va.shape(), vb.shape()),
            ));
        }
        let (ra, ca) = (va.shape()[0], va.shape()[1]);
        let (rb, cb) = (vb.shape()[0], vb.shape()[1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?}{} x {:?}{}", va.shape(), if ta { "^T" } else { "" }, vb.shape(), if tb { "^T" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        let (rsa, csa) = if ta { (1, ca as isize) } else { (ca as isize, 1) };
        let (rsb, csb) = if tb { (1, cb as isize) } else { (cb as isize, 1) };
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: strides describe the row-major buffers of va/vb/out with
            // the dimensions checked above.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    va.data().as_ptr(),
                    rsa,
                    csa,
                    vb.data().as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                ta,
                tb,
            },
        )
    }

    /// Transpose of a 2-D node.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.ndim() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", va.shape())));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data()[i * c + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(a.0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.nodes[a.0].value.clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a.0))
    }

    /// Sums `a` down to `shape`, the inverse of broadcasting.
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.shape() == shape {
            return Ok(a);
        }
        if broadcast_shape(shape, va.shape()).as_deref() != Some(va.shape()) {
            return Err(Error::shape(
                "sum_to",
                format!("cannot reduce {:?} to {:?}", va.shape(), shape),
            ));
        }
        let mut out = vec![0.0; shape.iter().product()];
        if out.len() == 1 {
            out[0] = va.data().iter().sum();
        } else {
            for (i, j) in broadcast_indices(shape, va.shape()).into_iter().enumerate() {
                out[j] += va.data()[i];
            }
        }
        self.push("sum_to", Tensor::from_parts(shape.to_vec(), out), Op::SumTo(a.0))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.shape() == shape {
            return Ok(a);
        }
        if broadcast_shape(va.shape(), shape).as_deref() != Some(shape) {
            return Err(Error::shape(
                "broadcast_to",
                format!("cannot broadcast {:?} to {:?}", va.shape(), shape),
            ));
        }
        let data = broadcast_indices(va.shape(), shape)
            .into_iter()
            .map(|i| va.data()[i])
            .collect();
        self.push(
            "broadcast_to",
            Tensor::from_parts(shape.to_vec(), data),
            Op::BroadcastTo(a.0),
        )
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.sum_to(a, &[])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `out[i] = a[idx[i]]`, or zero where `idx[i] == PAD`.
    pub fn gather(&mut self, a: Var, idx: Rc<[usize]>, out_shape: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if idx.len() != out_shape.iter().product::<usize>() {
            return Err(Error::shape("gather", "index count does not match output shape"));
        }
        let n = va.numel();
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            if i == PAD {
                data.push(0.0);
            } else if i < n {
                data.push(va.data()[i]);
            } else {
                return Err(Error::shape("gather", format!("index {i} out of range {n}")));
            }
        }
        self.push(
            "gather",
            Tensor::from_parts(out_shape.to_vec(), data),
            Op::Gather { src: a.0, idx },
        )
    }

    /// Adjoint of [`Graph::gather`]: `out[idx[i]] += a[i]`.
    pub fn scatter_add(&mut self, a: Var, idx: Rc<[usize]>, out_shape: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if idx.len() != va.numel() {
            return Err(Error::shape("scatter_add", "index count does not match input"));
        }
        let n: usize = out_shape.iter().product();
        let mut data = vec![0.0; n];
        for (k, &i) in idx.iter().enumerate() {
            if i == PAD {
                continue;
            }
            if i >= n {
                return Err(Error::shape("scatter_add", format!("index {i} out of range {n}")));
            }
            data[i] += va.data()[k];
        }
        self.push(
            "scatter_add",
            Tensor::from_parts(out_shape.to_vec(), data),
            Op::ScatterAdd { src: a.0, idx },
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.nodes[a.0].value.shape().to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} range {start}..{end} of {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            for j in start..end {
                let base = (o * shape[axis] + j) * inner;
                idx.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        self.gather(a, idx.into(), &out_shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?.0)
            .map(|n| n.value.shape().to_vec())
            .unwrap_or_default();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        )
    }

    /// Sliding windows of a `(B, L, C)` sequence: output `(B, L_out, K*C)`
    /// with window slot `k` reading timestep `t - pad_left + k*dilation`
    /// (zero outside the sequence).
    pub fn unfold1d(
        &mut self,
        x: Var,
        kernel: usize,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.len() != 3 || kernel == 0 || dilation == 0 {
            return Err(Error::shape("unfold1d", format!("{shape:?}, kernel {kernel}")));
        }
        let (b, l, c) = (shape[0], shape[1], shape[2]);
        let span = (kernel - 1) * dilation;
        if l + pad_left + pad_right <= span {
            return Err(Error::shape("unfold1d", format!("sequence of length {l} shorter than kernel span")));
        }
        let l_out = l + pad_left + pad_right - span;
        let mut idx = Vec::with_capacity(b * l_out * kernel * c);
        for bi in 0..b {
            for t in 0..l_out {
                for k in 0..kernel {
                    let src = (t + k * dilation) as isize - pad_left as isize;
                    if src < 0 || src as usize >= l {
                        idx.extend(std::iter::repeat_n(PAD, c));
                    } else {
                        let base = (bi * l + src as usize) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
        self.gather(x, idx.into(), &[b, l_out, kernel * c])
    }

    /// 1-D convolution over `(B, L, C_in)` with weight `(K*C_in, C_out)` and
    /// bias `(C_out)`; returns `(B, L_out, C_out)`.
    pub fn conv1d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 3 || ws.len() != 2 || xs[2] == 0 || ws[0] % xs[2] != 0 {
            return Err(Error::shape("conv1d", format!("input {xs:?}, weight {ws:?}")));
        }
        let kernel = ws[0] / xs[2];
        let cols = self.unfold1d(x, kernel, dilation, pad_left, pad_right)?;
        let cs = self.shape(cols).to_vec();
        let flat = self.reshape(cols, &[cs[0] * cs[1], cs[2]])?;
        let y = self.matmul(flat, weight)?;
        let y = self.add(y, bias)?;
        self.reshape(y, &[cs[0], cs[1], ws[1]])
    }

    /// Causal dilated convolution: output timestep `t` only sees inputs `<= t`,
    /// and the sequence length is preserved by left zero-padding.
    pub fn conv1d_causal(&mut self, x: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        let c_in = *self.shape(x).last().unwrap_or(&1);
        let kernel = self.shape(weight)[0] / c_in.max(1);
        self.conv1d(x, weight, bias, dilation, kernel.saturating_sub(1) * dilation, 0)
    }

    /// Non-overlapping max pooling along the time axis of `(B, L, C)`.
    pub fn max_pool1d(&mut self, x: Var, width: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let shape = v.shape().to_vec();
        if shape.len() != 3 || width == 0 || shape[1] < width {
            return Err(Error::shape("max_pool1d", format!("{shape:?}, width {width}")));
        }
        let (b, l, c) = (shape[0], shape[1], shape[2]);
        let l_out = l / width;
        let mut idx = Vec::with_capacity(b * l_out * c);
        for bi in 0..b {
            for t in 0..l_out {
                for ci in 0..c {
                    let mut best = (bi * l + t * width) * c + ci;
                    for w in 1..width {
                        let cand = (bi * l + t * width + w) * c + ci;
                        if v.data()[cand] > v.data()[best] {
                            best = cand;
                        }
                    }
                    idx.push(best);
                }
            }
        }
        self.gather(x, idx.into(), &[b, l_out, c])
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// The returned nodes live in this graph and are differentiable, so a
    /// second call can differentiate a function of them. A leaf that `loss`
    /// does not depend on gets an explicit zero gradient.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let end = loss.0 + 1;
        // needed[i]: node i lies on a path from some requested leaf.
        let mut needed = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needed[w.0] = true;
            }
        }
        for i in 0..end {
            if !needed[i] && self.nodes[i].requires_grad {
                let mut hit = false;
                self.nodes[i].op.for_each_parent(|p| hit |= needed[p]);
                needed[i] = hit;
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; end];
        if needed[loss.0] {
            grads[loss.0] = Some(self.constant(Tensor::ones(&loss_shape)));
        }
        for i in (0..end).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            for (parent, contrib) in self.vjp(i, g, &needed)? {
                grads[parent] = Some(match grads[parent] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.nodes[w.0].value.shape().to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    fn constant_mask(&mut self, of: usize, f: impl Fn(f64) -> bool) -> Var {
        let m = self.nodes[of].value.map(|x| if f(x) { 1.0 } else { 0.0 });
        self.constant(m)
    }

    fn vjp(&mut self, node: usize, g: Var, needed: &[bool]) -> Result<Vec<(usize, Var)>> {
        let op = self.nodes[node].op.clone();
        let out = Var(node);
        let shape_of = |s: &Self, i: usize| s.nodes[i].value.shape().to_vec();
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needed[a] {
                    let sa = shape_of(self, a);
                    res.push((a, self.sum_to(g, &sa)?));
                }
                if needed[b] {
                    let sb = shape_of(self, b);
                    res.push((b, self.sum_to(g, &sb)?));
                }
            }
            Op::Sub(a, b) => {
                if needed[a] {
                    let sa = shape_of(self, a);
                    res.push((a, self.sum_to(g, &sa)?));
                }
                if needed[b] {
                    let sb = shape_of(self, b);
                    let ng = self.neg(g)?;
                    res.push((b, self.sum_to(ng, &sb)?));
                }
            }
            Op::Mul(a, b) => {
                if needed[a] {
                    let sa = shape_of(self, a);
                    let t = self.mul(g, Var(b))?;
                    res.push((a, self.sum_to(t, &sa)?));
                }
                if needed[b] {
                    let sb = shape_of(self, b);
                    let t = self.mul(g, Var(a))?;
                    res.push((b, self.sum_to(t, &sb)?));
                }
            }
            Op::Div(a, b) => {
                if needed[a] {
                    let sa = shape_of(self, a);
                    let t = self.div(g, Var(b))?;
                    res.push((a, self.sum_to(t, &sa)?));
                }
                if needed[b] {
                    let sb = shape_of(self, b);
                    let t = self.mul(g, out)?;
                    let t = self.div(t, Var(b))?;
                    let t = self.neg(t)?;
                    res.push((b, self.sum_to(t, &sb)?));
                }
            }
            Op::Neg(a) => res.push((a, self.neg(g)?)),
            Op::Scale(a, c) => res.push((a, self.scale(g, c)?)),
            Op::Shift(a) => res.push((a, g)),
            Op::MatMul { a, b, ta, tb } => {
                if needed[a] {
                    let ga = if ta {
                        self.matmul_t(Var(b), g, tb, true)?
                    } else {
                        self.matmul_t(g, Var(b), false, !tb)?
                    };
                    res.push((a, ga));
                }
                if needed[b] {
                    let gb = if tb {
                        self.matmul_t(g, Var(a), true, ta)?
                    } else {
                        self.matmul_t(Var(a), g, !ta, false)?
                    };
                    res.push((b, gb));
                }
            }
            Op::Transpose(a) => res.push((a, self.transpose(g)?)),
            Op::Reshape(a) => {
                let sa = shape_of(self, a);
                res.push((a, self.reshape(g, &sa)?));
            }
            Op::SumTo(a) => {
                let sa = shape_of(self, a);
                res.push((a, self.broadcast_to(g, &sa)?));
            }
            Op::BroadcastTo(a) => {
                let sa = shape_of(self, a);
                res.push((a, self.sum_to(g, &sa)?));
            }
            Op::Sigmoid(a) => {
                let one_minus = self.neg(out)?;
                let one_minus = self.shift(one_minus, 1.0)?;
                let d = self.mul(out, one_minus)?;
                res.push((a, self.mul(g, d)?));
            }
            Op::Tanh(a) => {
                let sq = self.mul(out, out)?;
                let d = self.neg(sq)?;
                let d = self.shift(d, 1.0)?;
                res.push((a, self.mul(g, d)?));
            }
            Op::Relu(a) => {
                let m = self.constant_mask(a, |x| x > 0.0);
                res.push((a, self.mul(g, m)?));
            }
            Op::Abs(a) => {
                let s = self.nodes[a].value.map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let s = self.constant(s);
                res.push((a, self.mul(g, s)?));
            }
            Op::MaxScalar(a, c) => {
                let m = self.constant_mask(a, |x| x > c);
                res.push((a, self.mul(g, m)?));
            }
            Op::Clamp(a, lo, hi) => {
                let m = self.constant_mask(a, |x| x >= lo && x <= hi);
                res.push((a, self.mul(g, m)?));
            }
            Op::Sqrt(a) => {
                let r = self.recip_safe(out)?;
                let r = self.scale(r, 0.5)?;
                res.push((a, self.mul(g, r)?));
            }
            Op::RecipSafe(a) => {
                let sq = self.mul(out, out)?;
                let t = self.mul(g, sq)?;
                res.push((a, self.neg(t)?));
            }
            Op::Gather { src, idx } => {
                let s = shape_of(self, src);
                res.push((src, self.scatter_add(g, idx, &s)?));
            }
            Op::ScatterAdd { src, idx } => {
                let s = shape_of(self, src);
                res.push((src, self.gather(g, idx, &s)?));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let len = self.nodes[p].value.shape()[axis];
                    if needed[p] {
                        res.push((p, self.slice(g, axis, start, start + len)?));
                    }
                    start += len;
                }
            }
        }
        Ok(res)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

