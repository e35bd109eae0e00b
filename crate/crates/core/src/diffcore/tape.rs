//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse and accumulates vector-Jacobian products. Nodes created with
//! [`Tape::constant`] (and anything computed only from constants) are skipped
//! during the reverse sweep.

use crate::diffcore::Tensor;
use crate::error::{AnydError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddLast(Var, Var),
    MulLast(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Abs(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv3x3 { x: Var, kernel: Var, bias: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    BroadcastRows(Var),
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    Gather { x: Var, indices: Vec<usize> },
    RowNorms(Var),
    LogSumExp(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input (parameter or probe point).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn elementwise(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, what)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok(Tensor::from_parts(x.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "add", |p, q| p + q)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "sub", |p, q| p - q)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "mul", |p, q| p * q)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect());
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    fn last_axis_operand(&self, x: Var, b: Var, what: &str) -> Result<usize> {
        let n = *self.shape(x).last().unwrap();
        if self.value(b).len() != n {
            return Err(AnydError::shape(format!(
                "{what}: operand of length {} against last axis {n} of {:?}",
                self.value(b).len(),
                self.shape(x)
            )));
        }
        Ok(n)
    }

    /// `x + b` with `b` broadcast along every leading axis of `x`.
    pub fn add_last(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.last_axis_operand(x, b, "add_last")?;
        let bv = self.value(b).data();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, v)| v + bv[i % n]).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddLast(x, b), ng))
    }

    /// `x ⊙ s` with `s` broadcast along every leading axis of `x`
    /// (channel-wise multiplication).
    pub fn mul_last(&mut self, x: Var, s: Var) -> Result<Var> {
        let n = self.last_axis_operand(x, s, "mul_last")?;
        let sv = self.value(s).data();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, v)| v * sv[i % n]).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::MulLast(x, s), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AnydError::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(AnydError::shape(format!("transpose of {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x[i * n + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::Transpose(a), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect());
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v.abs()).collect());
        let ng = self.needs(a);
        self.push(out, Op::Abs(a), ng)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.shape().len() {
            return Err(AnydError::shape(format!("softmax axis {axis} of {:?}", x.shape())));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |s: usize| o * len * inner + s * inner + i;
                let max = (0..len).map(|s| xd[at(s)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in 0..len {
                    let e = (xd[at(s)] - max).exp();
                    out[at(s)] = e;
                    total += e;
                }
                for s in 0..len {
                    out[at(s)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let ng = self.needs(a);
        Ok(self.push(out, Op::Softmax { x: a, axis }, ng))
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.last_axis_operand(a, gain, "layer_norm gain")?;
        self.last_axis_operand(a, bias, "layer_norm bias")?;
        let x = self.value(a);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = x.len() / n;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let slice = &x.data()[r * n..(r + 1) * n];
            let mean = slice.iter().sum::<f64>() / n as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (slice[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let ng = self.needs(a) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { x: a, gain, bias, xhat, inv_std }, ng))
    }

    /// 3×3 convolution, stride 1, zero padding. `x` is `[h, w, cin]`,
    /// `kernel` is `[3, 3, cin, cout]`, `bias` is `[cout]`.
    pub fn conv2d_3x3(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (sx, sk, sb) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if sx.len() != 3 || sk.len() != 4 || sk[0] != 3 || sk[1] != 3 || sk[2] != sx[2] || sb != [sk[3]] {
            return Err(AnydError::shape(format!("conv2d_3x3 x {sx:?}, kernel {sk:?}, bias {sb:?}")));
        }
        let (h, w, cin, cout) = (sx[0], sx[1], sx[2], sk[3]);
        let (xd, kd, bd) = (self.value(x).data(), self.value(kernel).data(), self.value(bias).data());
        let mut out = vec![0.0; h * w * cout];
        for i in 0..h {
            for j in 0..w {
                let y = &mut out[(i * w + j) * cout..(i * w + j + 1) * cout];
                y.copy_from_slice(bd);
                for a in 0..3 {
                    let ii = i + a;
                    if ii < 1 || ii > h {
                        continue;
                    }
                    for b in 0..3 {
                        let jj = j + b;
                        if jj < 1 || jj > w {
                            continue;
                        }
                        let xs = &xd[((ii - 1) * w + jj - 1) * cin..((ii - 1) * w + jj) * cin];
                        for (c, &xv) in xs.iter().enumerate() {
                            let kr = &kd[((a * 3 + b) * cin + c) * cout..((a * 3 + b) * cin + c + 1) * cout];
                            for (yo, &kv) in y.iter_mut().zip(kr) {
                                *yo += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(Tensor::from_parts(vec![h, w, cout], out), Op::Conv3x3 { x, kernel, bias }, ng))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| AnydError::shape("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AnydError::shape(format!("concat axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (p, q))| i == axis || p == q);
            if !ok {
                return Err(AnydError::shape(format!("concat {base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, ng))
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(v));
            lifted.push(self.reshape(v, s)?);
        }
        self.concat(&lifted, 0)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(AnydError::shape(format!("slice {start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let xd = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x: a, axis, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Repeats a vector `[n]` into `rows` identical rows `[rows, n]`.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        if rows == 0 {
            return Err(AnydError::shape("broadcast to zero rows"));
        }
        let x = self.value(v).data();
        let n = x.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(x);
        }
        let ng = self.needs(v);
        Ok(self.push(Tensor::from_parts(vec![rows, n], out), Op::BroadcastRows(v), ng))
    }

    /// Mean over `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(AnydError::shape(format!("mean axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xd = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &xd[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += x;
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        let mut shape: Vec<usize> = s.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis { x: a, axis }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(total), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Picks flat elements by index into a vector `[indices.len()]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a).data();
        if indices.is_empty() || indices.iter().any(|&i| i >= x.len()) {
            return Err(AnydError::shape(format!("gather {indices:?} from {} elements", x.len())));
        }
        let out: Vec<f64> = indices.iter().map(|&i| x[i]).collect();
        let ng = self.needs(a);
        let n = out.len();
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::Gather { x: a, indices: indices.to_vec() }, ng))
    }

    /// Euclidean norm of each row of `[rows, ...]`, giving `[rows]`.
    ///
    /// The gradient at a zero row is taken as zero.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let rows = x.shape()[0];
        let out: Vec<f64> = (0..rows).map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let ng = self.needs(a);
        self.push(Tensor::from_parts(vec![rows], out), Op::RowNorms(a), ng)
    }

    /// `log Σ exp(x)` over every element.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let ng = self.needs(a);
        self.push(Tensor::scalar(lse), Op::LogSumExp(a), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AnydError::shape(format!("backward from non-scalar {:?}", lv.shape())));
        }
        lv.ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v).to_vec()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(gd).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.slot(grads, *b) {
                    d.iter_mut().zip(gd).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.slot(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += gd[i] * bv[i];
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for i in 0..d.len() {
                        d[i] += gd[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(d, g)| *d += g * c);
                }
            }
            Op::AddLast(x, b) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(gd).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.slot(grads, *b) {
                    let n = d.len();
                    for (i, g) in gd.iter().enumerate() {
                        d[i % n] += g;
                    }
                }
            }
            Op::MulLast(x, s) => {
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                let n = sv.len();
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..d.len() {
                        d[i] += gd[i] * sv[i % n];
                    }
                }
                if let Some(d) = self.slot(grads, *s) {
                    for (i, g) in gd.iter().enumerate() {
                        d[i % n] += g * xv[i];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.slot(grads, *a) {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            d[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = av[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (dv, g) in d[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dv += av * g;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                if let Some(d) = self.slot(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += gd[j * m + i];
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                if let Some(d) = self.slot(grads, *a) {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += gd[i];
                        }
                    }
                }
            }
            Op::Abs(a) => {
                let xv = self.value(*a).data();
                if let Some(d) = self.slot(grads, *a) {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += gd[i];
                        } else if xv[i] < 0.0 {
                            d[i] -= gd[i];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                if let Some(d) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |s: usize| o * len * inner + s * inner + i;
                            let dot: f64 = (0..len).map(|s| gd[at(s)] * y[at(s)]).sum();
                            for s in 0..len {
                                d[at(s)] += y[at(s)] * (gd[at(s)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                let rows = inv_std.len();
                if let Some(d) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..n {
                            d[j] += gd[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..n {
                            d[j] += gd[r * n + j];
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let v = gd[r * n + j] * gv[j];
                            dxhat[j] = v;
                            mean_d += v;
                            mean_dx += v * xhat[r * n + j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            d[r * n + j] += inv_std[r] * (dxhat[j] - mean_d - xhat[r * n + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Conv3x3 { x, kernel, bias } => {
                let (sx, sk) = (self.shape(*x), self.shape(*kernel));
                let (h, w, cin, cout) = (sx[0], sx[1], sx[2], sk[3]);
                let (xd, kd) = (self.value(*x).data(), self.value(*kernel).data());
                if let Some(d) = self.slot(grads, *bias) {
                    for cell in 0..h * w {
                        for o in 0..cout {
                            d[o] += gd[cell * cout + o];
                        }
                    }
                }
                let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for i in 0..h {
                        for j in 0..w {
                            for a in 0..3 {
                                let ii = i + a;
                                if ii < 1 || ii > h {
                                    continue;
                                }
                                for b in 0..3 {
                                    let jj = j + b;
                                    if jj < 1 || jj > w {
                                        continue;
                                    }
                                    f((i * w + j) * cout, ((ii - 1) * w + jj - 1) * cin, (a * 3 + b) * cin);
                                }
                            }
                        }
                    }
                };
                if let Some(d) = self.slot(grads, *kernel) {
                    visit(&mut |yo, xo, ko| {
                        let gy = &gd[yo..yo + cout];
                        for c in 0..cin {
                            let xv = xd[xo + c];
                            if xv == 0.0 {
                                continue;
                            }
                            let kr = &mut d[(ko + c) * cout..(ko + c + 1) * cout];
                            for (kv, g) in kr.iter_mut().zip(gy) {
                                *kv += xv * g;
                            }
                        }
                    });
                }
                if let Some(d) = self.slot(grads, *x) {
                    visit(&mut |yo, xo, ko| {
                        let gy = &gd[yo..yo + cout];
                        for c in 0..cin {
                            let kr = &kd[(ko + c) * cout..(ko + c + 1) * cout];
                            d[xo + c] += kr.iter().zip(gy).map(|(k, g)| k * g).sum::<f64>();
                        }
                    });
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if let Some(d) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &gd[o * total * inner + offset..o * total * inner + offset + chunk];
                            for (dv, g) in d[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *dv += g;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                if let Some(d) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let base = o * full * inner + start * inner;
                        let src = &gd[o * len * inner..(o + 1) * len * inner];
                        for (dv, g) in d[base..base + len * inner].iter_mut().zip(src) {
                            *dv += g;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(d, g)| *d += g);
                }
            }
            Op::BroadcastRows(v) => {
                if let Some(d) = self.slot(grads, *v) {
                    let n = d.len();
                    for (i, g) in gd.iter().enumerate() {
                        d[i % n] += g;
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                if let Some(d) = self.slot(grads, *x) {
                    let scale = 1.0 / len as f64;
                    for o in 0..outer {
                        for k in 0..len {
                            let dst = &mut d[(o * len + k) * inner..(o * len + k + 1) * inner];
                            for (dv, g) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                                *dv += g * scale;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().for_each(|d| *d += gd[0]);
                }
            }
            Op::Gather { x, indices } => {
                if let Some(d) = self.slot(grads, *x) {
                    for (k, &i) in indices.iter().enumerate() {
                        d[i] += gd[k];
                    }
                }
            }
            Op::RowNorms(a) => {
                let x = self.value(*a);
                let norms = node.value.data();
                let width = x.len() / norms.len();
                if let Some(d) = self.slot(grads, *a) {
                    for (r, &nr) in norms.iter().enumerate() {
                        if nr == 0.0 {
                            continue;
                        }
                        let scale = gd[r] / nr;
                        for j in 0..width {
                            d[r * width + j] += scale * x.data()[r * width + j];
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                let xv = self.value(*a).data();
                let lse = node.value.item();
                if let Some(d) = self.slot(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += gd[0] * (xv[i] - lse).exp();
                    }
                }
            }
        }
    }
}
