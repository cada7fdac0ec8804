//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value. [`Tape::backward`]
//! walks the nodes in reverse execution order, propagating gradients only
//! through nodes that depend on something requiring a gradient, and adds
//! parameter gradients into the owning [`ParamStore`].

use super::dense::{self, log_sum_exp, rms_inverse, sigmoid, IGNORE_ID};
use super::{DType, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Silu(Var),
    Tanh(Var),
    RmsNorm { x: Var, w: Var, eps: f64 },
    Softmax(Var),
    Rope { x: Var, positions: Vec<usize>, d_head: usize, theta: f64 },
    Embedding { table: Var, ids: Vec<u32> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<u32>, divisor: f64 },
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients for every node of a tape after a backward pass.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant or free input. `requires_grad` leaves receive gradients
    /// in the [`Grads`] returned by backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter read. Only trainable parameters require grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = dense::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = dense::matmul_bt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    fn row_broadcast(&self, x: Var, r: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let xv = self.value(x);
        let rv = self.value(r);
        let n = xv.last_dim();
        if rv.len() != n || rv.rank() != 1 {
            return Err(shape_err(op, xv, rv));
        }
        let data = xv
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(rv.data()).map(|(&a, &b)| f(a, b)))
            .collect();
        Ok(Tensor::from_parts(xv.shape().to_vec(), data, xv.dtype().promote(rv.dtype())))
    }

    /// `x[.., n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = self.row_broadcast(x, b, "add_row", |a, b| a + b)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// `x[.., n] ⊙ s[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let out = self.row_broadcast(x, s, "mul_row", |a, b| a * b)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::MulRow(x, s), rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = dense::silu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let out = dense::rms_norm(self.value(x), self.value(w), eps)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::RmsNorm { x, w, eps }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        self.masked_softmax(x, None)
    }

    /// Softmax where row `i` sees columns `0..=visible_offset + i`.
    pub fn masked_softmax(&mut self, x: Var, visible_offset: Option<usize>) -> Var {
        let out = dense::masked_softmax_rows(self.value(x), visible_offset);
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Rotary embedding on `x[seq × k·d_head]`, one position per row.
    pub fn rope(&mut self, x: Var, positions: &[usize], d_head: usize, theta: f64) -> Result<Var> {
        let out = dense::rope_rotate(self.value(x), positions, d_head, theta, false)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                d_head,
                theta,
            },
            rg,
        ))
    }

    /// Gathers rows of `table[V × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = t.dims2("embedding")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TargetOutOfRange { target: id, vocab });
            }
            data.extend_from_slice(t.row(id as usize));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data, t.dtype());
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("slice_cols")?;
        if start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: xv.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![r, len], data, xv.dtype());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (r, _) = first.dims2("concat_cols")?;
        let mut dtype = first.dtype();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            let (pr, pc) = v.dims2("concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", first, v));
            }
            dtype = dtype.promote(v.dtype());
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_parts(vec![r, total], data, dtype);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (_, c) = first.dims2("concat_rows")?;
        let mut dtype = first.dtype();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            let (pr, pc) = v.dims2("concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", first, v));
            }
            dtype = dtype.promote(v.dtype());
            rows += pr;
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_parts(vec![rows, c], data, dtype);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean next-token cross entropy over unmasked positions.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (total, count) = dense::cross_entropy_sum(self.value(logits), targets)?;
        Ok(self.cross_entropy_node(logits, targets, total, count as f64))
    }

    /// Cross entropy summed over unmasked positions and divided by
    /// `divisor`, so losses from several sequences can share one mean.
    pub fn cross_entropy_scaled(&mut self, logits: Var, targets: &[u32], divisor: f64) -> Result<Var> {
        let (total, _) = dense::cross_entropy_sum(self.value(logits), targets)?;
        Ok(self.cross_entropy_node(logits, targets, total, divisor))
    }

    fn cross_entropy_node(&mut self, logits: Var, targets: &[u32], total: f64, divisor: f64) -> Var {
        let dt = self.value(logits).dtype();
        let out = Tensor::scalar(total / divisor, dt);
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                divisor,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum(), v.dtype());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Back-propagates from a scalar `loss` and returns the per-node
    /// gradients. Gradients of trainable parameters are added into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Grads> {
        let grads = self.backward_leaves(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                let p = store.get_mut(*id);
                if p.trainable {
                    p.grad.add_assign(g)?;
                }
            }
        }
        Ok(grads)
    }

    /// Back-propagation without touching any parameter store.
    pub fn backward_leaves(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0], lv.dtype()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(existing) => existing.add_assign(&g)?,
            None => *slot = Some(g.to_dtype(self.nodes[v.0].value.dtype())),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = dense::matmul_bt(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = dense::matmul_at(self.value(*a), g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::MatMulBt(a, b) => {
                if self.requires_grad(*a) {
                    let ga = dense::matmul(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = dense::matmul_at(g, self.value(*a))?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?)?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c))?,
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.requires_grad(*b) {
                    let n = g.last_dim();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    let bv = self.value(*b);
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb, bv.dtype()))?;
                }
            }
            Op::MulRow(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let n = sv.len();
                if self.requires_grad(*x) {
                    let data = g
                        .data()
                        .chunks(n)
                        .flat_map(|row| row.iter().zip(sv.data()).map(|(a, b)| a * b))
                        .collect();
                    self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data, g.dtype()))?;
                }
                if self.requires_grad(*s) {
                    let mut gs = vec![0.0; n];
                    for (grow, xrow) in g.data().chunks(n).zip(xv.data().chunks(n)) {
                        for ((acc, &a), &b) in gs.iter_mut().zip(grow).zip(xrow) {
                            *acc += a * b;
                        }
                    }
                    self.accumulate(grads, *s, Tensor::from_parts(sv.shape().to_vec(), gs, sv.dtype()))?;
                }
            }
            Op::Silu(x) => {
                let gx = g.zip_with(self.value(*x), "silu", |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (1.0 + xv * (1.0 - s))
                })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Tanh(x) => {
                let gx = g.zip_with(&node.value, "tanh", |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::RmsNorm { x, w, eps } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let h = wv.len();
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; h];
                for ((xr, gr), gxr) in xv.data().chunks(h).zip(g.data().chunks(h)).zip(gx.chunks_mut(h)) {
                    let inv = rms_inverse(xr, *eps);
                    if !inv.is_finite() {
                        continue;
                    }
                    let mut dot = 0.0;
                    for i in 0..h {
                        gw[i] += gr[i] * xr[i] * inv;
                        dot += wv.data()[i] * gr[i] * xr[i];
                    }
                    let coef = dot * inv * inv * inv / h as f64;
                    for i in 0..h {
                        gxr[i] = wv.data()[i] * gr[i] * inv - xr[i] * coef;
                    }
                }
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx, xv.dtype()))?;
                }
                if self.requires_grad(*w) {
                    self.accumulate(grads, *w, Tensor::from_parts(wv.shape().to_vec(), gw, wv.dtype()))?;
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), gx, y.dtype()))?;
            }
            Op::Rope {
                x,
                positions,
                d_head,
                theta,
            } => {
                let gx = dense::rope_rotate(g, positions, *d_head, *theta, true)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.last_dim();
                let mut gt = vec![0.0; tv.len()];
                for (row, &id) in g.data().chunks(d).zip(ids) {
                    let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                    for (a, &b) in dst.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(tv.shape().to_vec(), gt, tv.dtype()))?;
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = xv.dims2("slice_cols")?;
                let len = g.last_dim();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![r, c], gx, xv.dtype()))?;
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2("concat_cols")?;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).last_dim();
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + pc]);
                        }
                        let dt = self.value(p).dtype();
                        self.accumulate(grads, p, Tensor::from_parts(vec![r, pc], gp, dt))?;
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if self.requires_grad(p) {
                        let gp = g.data()[offset * c..offset * c + n].to_vec();
                        let t = Tensor::from_parts(pv.shape().to_vec(), gp, pv.dtype());
                        self.accumulate(grads, p, t)?;
                    }
                    offset += n / c.max(1);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                divisor,
            } => {
                let lv = self.value(*logits);
                let v = lv.last_dim();
                let upstream = g.data()[0] / divisor;
                let mut gl = vec![0.0; lv.len()];
                for (i, &t) in targets.iter().enumerate() {
                    if t == IGNORE_ID {
                        continue;
                    }
                    let row = lv.row(i);
                    let lse = log_sum_exp(row);
                    let out = &mut gl[i * v..(i + 1) * v];
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o = (x - lse).exp() * upstream;
                    }
                    out[t as usize] -= upstream;
                }
                self.accumulate(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), gl, lv.dtype()))?;
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let gx = Tensor::full(xv.shape(), g.data()[0], xv.dtype());
                self.accumulate(grads, *x, gx)?;
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, gx)?;
            }
        }
        Ok(())
    }
}

/// Convenience for tests and checks: a 64-bit leaf requiring grad.
pub fn input64(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Result<Var> {
    Ok(tape.leaf(Tensor::new(shape, data, DType::F64)?, true))
}
