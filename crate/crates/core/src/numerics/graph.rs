//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the ids of its inputs. [`Graph::backward`] walks the tape in
//! reverse once and leaves a gradient on every node that depends on a leaf
//! created with `requires_grad = true`.
//!
//! Most operations work on rank-2 tensors. Row vectors are `1 x n`. Binary
//! elementwise operations broadcast a `1 x n` right operand over the rows of
//! an `m x n` left operand.

use super::tensor::{cmul_into, dot, log_sigmoid, sigmoid, Tensor};
use crate::error::{shape_err, Error, Result};

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
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    CMul(Var, Var),
    UnitPhase(Var),
    CdistL1(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LogSigmoid(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LogSumExpCols(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    ScaleRows(Var, Var),
    NormalizeRows(Var, Vec<bool>),
    Bilinear(Var, Var, Var),
    AtLoss(Var, Vec<bool>),
    Max(Vec<Var>),
    AddConst(Var),
    MulConst(Var, Tensor),
    Reshape(Var),
    BlockAttention(Var, Vec<(usize, usize)>, f64),
    BlockMatMul(Var, Var, Vec<(usize, usize)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn same_or_row_broadcast(a: &Tensor, b: &Tensor, what: &str) -> Result<bool> {
    if a.shape() == b.shape() {
        return Ok(false);
    }
    if a.rank() == 2 && b.rank() == 2 && b.rows() == 1 && b.cols() == a.cols() {
        return Ok(true);
    }
    shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

fn require_matrix(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 2 {
        return shape_err(format!("{what} expects a matrix, got {:?}", t.shape()));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bcast = same_or_row_broadcast(ta, tb, what)?;
        let mut out = ta.clone();
        if bcast {
            let c = ta.cols();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o = f(*o, tb.data()[i % c]);
            }
        } else {
            for (o, &y) in out.data_mut().iter_mut().zip(tb.data()) {
                *o = f(*o, y);
            }
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Complex Hadamard product over interleaved `(re, im)` columns.
    pub fn cmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bcast = same_or_row_broadcast(ta, tb, "cmul")?;
        if ta.rank() != 2 || ta.cols() % 2 != 0 {
            return Err(Error::Domain(format!(
                "cmul needs an even number of columns, got {:?}",
                ta.shape()
            )));
        }
        let mut out = Tensor::zeros(ta.shape());
        for i in 0..ta.rows() {
            let brow = if bcast { tb.row_slice(0) } else { tb.row_slice(i) };
            cmul_into(ta.row_slice(i), brow, out.row_slice_mut(i));
        }
        Ok(self.push(out, Op::CMul(a, b), &[a, b]))
    }

    /// Scale every complex coordinate to unit modulus. Zero coordinates map to `1 + 0i`.
    pub fn unit_phase(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() % 2 != 0 {
            return Err(Error::Domain("unit_phase needs an even length".into()));
        }
        let mut out = ta.clone();
        for c in out.data_mut().chunks_exact_mut(2) {
            let n = (c[0] * c[0] + c[1] * c[1]).sqrt();
            if n > 0.0 {
                c[0] /= n;
                c[1] /= n;
            } else {
                c[0] = 1.0;
                c[1] = 0.0;
            }
        }
        Ok(self.push(out, Op::UnitPhase(a), &[a]))
    }

    /// `out[i][j] = Σ_d |a[i][d] − b[j][d]|`
    pub fn cdist_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix(ta, "cdist_l1")?;
        require_matrix(tb, "cdist_l1")?;
        if ta.cols() != tb.cols() {
            return shape_err(format!("cdist_l1 {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let (m, n) = (ta.rows(), tb.rows());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let x = ta.row_slice(i);
            for j in 0..n {
                let y = tb.row_slice(j);
                let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum();
                out.set(i, j, d);
            }
        }
        Ok(self.push(out, Op::CdistL1(a, b), &[a, b]))
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        self.push(out, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// `tanh`, kept strictly inside `(-1, 1)`.
    pub fn tanh(&mut self, a: Var) -> Var {
        const CEIL: f64 = 1.0 - f64::EPSILON / 2.0;
        let out = self.value(a).map(|x| x.tanh().clamp(-CEIL, CEIL));
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        self.push(out, Op::LogSigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_matrix(ta, "softmax_rows")?;
        let out = ta.softmax(1)?;
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    /// Column-wise `log Σ exp` over the rows of `a`: `m x d -> 1 x d`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_matrix(ta, "logsumexp_cols")?;
        if ta.rows() == 0 {
            return Err(Error::Domain("logsumexp over zero rows".into()));
        }
        let (m, d) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(&[1, d]);
        for j in 0..d {
            if m == 1 {
                out.set(0, j, ta.at(0, j));
                continue;
            }
            let max = (0..m).map(|i| ta.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..m).map(|i| (ta.at(i, j) - max).exp()).sum();
            out.set(0, j, max + s.ln());
        }
        Ok(self.push(out, Op::LogSumExpCols(a), &[a]))
    }

    /// Select rows by index (repeats allowed).
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        require_matrix(ta, "gather")?;
        let c = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= ta.rows() {
                return shape_err(format!("gather row {i} of {}", ta.rows()));
            }
            data.extend_from_slice(ta.row_slice(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(out, Op::Gather(a, idx.to_vec()), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            require_matrix(t, "concat_cols")?;
            if t.rows() != rows {
                return shape_err("concat_cols row mismatch");
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                out.row_slice_mut(i)[off..off + c].copy_from_slice(t.row_slice(i));
                off += c;
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            require_matrix(t, "concat_rows")?;
            if t.cols() != cols {
                return shape_err("concat_rows column mismatch");
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// `m x n -> m x 1`
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_matrix(ta, "sum_rows")?;
        let data = (0..ta.rows()).map(|i| ta.row_slice(i).iter().sum()).collect();
        let out = Tensor::new(vec![ta.rows(), 1], data)?;
        Ok(self.push(out, Op::SumRows(a), &[a]))
    }

    /// `m x n -> 1 x n`
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_matrix(ta, "sum_cols")?;
        let mut out = Tensor::zeros(&[1, ta.cols()]);
        for i in 0..ta.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(ta.row_slice(i)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::SumCols(a), &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    /// Multiply row `i` of `a` by `z[i]`; `z` holds one value per row.
    pub fn scale_rows(&mut self, a: Var, z: Var) -> Result<Var> {
        let (ta, tz) = (self.value(a), self.value(z));
        require_matrix(ta, "scale_rows")?;
        if tz.numel() != ta.rows() {
            return shape_err(format!("scale_rows {:?} by {:?}", ta.shape(), tz.shape()));
        }
        let mut out = ta.clone();
        for i in 0..ta.rows() {
            let s = tz.data()[i];
            for v in out.row_slice_mut(i) {
                *v *= s;
            }
        }
        Ok(self.push(out, Op::ScaleRows(a, z), &[a, z]))
    }

    /// Divide each row by its sum. Rows whose sum is not positive become uniform
    /// and pass no gradient back.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_matrix(ta, "normalize_rows")?;
        let n = ta.cols();
        let mut out = ta.clone();
        let mut fallback = vec![false; ta.rows()];
        for (i, fb) in fallback.iter_mut().enumerate() {
            let s: f64 = ta.row_slice(i).iter().sum();
            let row = out.row_slice_mut(i);
            if s > 0.0 && s.is_finite() {
                for v in row.iter_mut() {
                    *v /= s;
                }
            } else {
                *fb = true;
                row.fill(1.0 / n as f64);
            }
        }
        Ok(self.push(out, Op::NormalizeRows(a, fallback), &[a]))
    }

    /// `out[p][c] = x[p] · w[c] · y[p]ᵀ` for `x, y: P x d` and `w: C x d x d`.
    pub fn bilinear(&mut self, x: Var, w: Var, y: Var) -> Result<Var> {
        let (tx, tw, ty) = (self.value(x), self.value(w), self.value(y));
        require_matrix(tx, "bilinear")?;
        if tx.shape() != ty.shape() || tw.rank() != 3 || tw.shape()[1] != tx.cols() || tw.shape()[2] != tx.cols() {
            return shape_err(format!(
                "bilinear {:?} · {:?} · {:?}",
                tx.shape(),
                tw.shape(),
                ty.shape()
            ));
        }
        let (p, d, c) = (tx.rows(), tx.cols(), tw.shape()[0]);
        let mut out = Tensor::zeros(&[p, c]);
        let mut tmp = vec![0.0; d];
        for k in 0..c {
            let wk = &tw.data()[k * d * d..(k + 1) * d * d];
            for i in 0..p {
                // tmp = w[k] · y[i]
                let yi = ty.row_slice(i);
                for (a, t) in tmp.iter_mut().enumerate() {
                    *t = wk[a * d..(a + 1) * d].iter().zip(yi).map(|(u, v)| u * v).sum();
                }
                let v: f64 = tx.row_slice(i).iter().zip(&tmp).map(|(u, v)| u * v).sum();
                out.set(i, k, v);
            }
        }
        Ok(self.push(out, Op::Bilinear(x, w, y), &[x, w, y]))
    }

    /// Adaptive-thresholding loss summed over rows of `logits` (`P x (C+1)`,
    /// last column is the threshold class). `positive` is row-major `P x C`.
    pub fn at_loss(&mut self, logits: Var, positive: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        require_matrix(t, "at_loss")?;
        let c = t.cols() - 1;
        if positive.len() != t.rows() * c {
            return shape_err(format!(
                "at_loss labels {} for logits {:?}",
                positive.len(),
                t.shape()
            ));
        }
        let mut total = 0.0;
        for i in 0..t.rows() {
            total += at_loss_row(t.row_slice(i), &positive[i * c..(i + 1) * c], None);
        }
        let out = Tensor::scalar(total);
        Ok(self.push(out, Op::AtLoss(logits, positive.to_vec()), &[logits]))
    }

    /// Elementwise maximum of same-shape inputs; ties go to the earliest input.
    pub fn max(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("max of nothing".into()))?;
        let mut out = self.value(*first).clone();
        for &p in &parts[1..] {
            let t = self.value(p);
            if t.shape() != out.shape() {
                return shape_err("max shape mismatch");
            }
            for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
                if v > *o {
                    *o = v;
                }
            }
        }
        Ok(self.push(out, Op::Max(parts.to_vec()), parts))
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return shape_err("add_const shape mismatch");
        }
        let out = ta.zip_map(c, |x, y| x + y)?;
        Ok(self.push(out, Op::AddConst(a), &[a]))
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let out = self.value(a).zip_map(&c, |x, y| x * y)?;
        Ok(self.push(out, Op::MulConst(a, c), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Row softmax of `scale · H Hᵀ` within each diagonal block `[lo, hi)`;
    /// entries between different blocks are exactly zero.
    pub fn block_attention(&mut self, h: Var, blocks: &[(usize, usize)], scale: f64) -> Result<Var> {
        let th = self.value(h);
        require_matrix(th, "block_attention")?;
        check_blocks(blocks, th.rows())?;
        let n = th.rows();
        let mut out = Tensor::zeros(&[n, n]);
        for &(lo, hi) in blocks {
            for i in lo..hi {
                let hi_row = th.row_slice(i);
                let row = &mut out.row_slice_mut(i)[lo..hi];
                for (o, j) in row.iter_mut().zip(lo..hi) {
                    *o = scale * dot(hi_row, th.row_slice(j));
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for o in row.iter_mut() {
                    *o = (*o - m).exp();
                    z += *o;
                }
                for o in row.iter_mut() {
                    *o /= z;
                }
            }
        }
        Ok(self.push(out, Op::BlockAttention(h, blocks.to_vec(), scale), &[h]))
    }

    /// `a · b` for an `a` that is zero outside the diagonal blocks. The
    /// gradient of `a` is only formed inside the blocks.
    pub fn block_matmul(&mut self, a: Var, b: Var, blocks: &[(usize, usize)]) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix(ta, "block_matmul")?;
        require_matrix(tb, "block_matmul")?;
        if ta.rows() != ta.cols() || ta.cols() != tb.rows() {
            return shape_err(format!("block_matmul {:?} x {:?}", ta.shape(), tb.shape()));
        }
        check_blocks(blocks, ta.rows())?;
        let d = tb.cols();
        let mut out = Tensor::zeros(&[ta.rows(), d]);
        for &(lo, hi) in blocks {
            for i in lo..hi {
                let arow = &ta.row_slice(i)[lo..hi];
                let orow = out.row_slice_mut(i);
                for (&x, j) in arow.iter().zip(lo..hi) {
                    for (o, &y) in orow.iter_mut().zip(tb.row_slice(j)) {
                        *o += x * y;
                    }
                }
            }
        }
        Ok(self.push(out, Op::BlockMatMul(a, b, blocks.to_vec()), &[a, b]))
    }

    /// Run reverse accumulation from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // Both products skip zero entries of g, which is often sparse.
                if need(*a) {
                    let bt = val(*b).transpose().expect("matmul grad");
                    acc(*a, g.matmul(&bt).expect("matmul grad"));
                }
                if need(*b) {
                    let gta = g.matmul_tn(val(*a)).expect("matmul grad");
                    acc(*b, gta.transpose().expect("matmul grad"));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose().expect("transpose grad")),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, g.clone());
                if need(*b) {
                    let mut gb = reduce_broadcast(g, val(*b));
                    gb.scale_assign(sign);
                    acc(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let bcast = tb.shape() != ta.shape();
                if need(*a) {
                    let mut ga = g.clone();
                    let c = ta.cols();
                    for (i, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= if bcast { tb.data()[i % c] } else { tb.data()[i] };
                    }
                    acc(*a, ga);
                }
                if need(*b) {
                    let prod = g.zip_map(ta, |x, y| x * y).expect("mul grad");
                    acc(*b, reduce_broadcast(&prod, tb));
                }
            }
            Op::CMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let bcast = tb.shape() != ta.shape();
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb_full = Tensor::zeros(ta.shape());
                for i in 0..ta.rows() {
                    let brow = if bcast { tb.row_slice(0) } else { tb.row_slice(i) };
                    let arow = ta.row_slice(i);
                    let grow = g.row_slice(i);
                    let gar = ga.row_slice_mut(i);
                    for c in 0..arow.len() / 2 {
                        let (gr, gi) = (grow[2 * c], grow[2 * c + 1]);
                        let (yr, yi) = (brow[2 * c], brow[2 * c + 1]);
                        gar[2 * c] = gr * yr + gi * yi;
                        gar[2 * c + 1] = -gr * yi + gi * yr;
                    }
                    let gbr = gb_full.row_slice_mut(i);
                    for c in 0..arow.len() / 2 {
                        let (gr, gi) = (grow[2 * c], grow[2 * c + 1]);
                        let (xr, xi) = (arow[2 * c], arow[2 * c + 1]);
                        gbr[2 * c] = gr * xr + gi * xi;
                        gbr[2 * c + 1] = -gr * xi + gi * xr;
                    }
                }
                acc(*a, ga);
                if need(*b) {
                    acc(*b, reduce_broadcast(&gb_full, tb));
                }
            }
            Op::UnitPhase(a) => {
                let ta = val(*a);
                let mut ga = Tensor::zeros(ta.shape());
                for ((x, u), (gi, go)) in ta
                    .data()
                    .chunks_exact(2)
                    .zip(out.data().chunks_exact(2))
                    .zip(g.data().chunks_exact(2).zip(ga.data_mut().chunks_exact_mut(2)))
                {
                    let n = (x[0] * x[0] + x[1] * x[1]).sqrt();
                    if n > 0.0 {
                        let dot = u[0] * gi[0] + u[1] * gi[1];
                        go[0] = (gi[0] - u[0] * dot) / n;
                        go[1] = (gi[1] - u[1] * dot) / n;
                    }
                }
                acc(*a, ga);
            }
            Op::CdistL1(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                for i in 0..ta.rows() {
                    for j in 0..tb.rows() {
                        let gij = g.at(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for d in 0..ta.cols() {
                            let s = sign(ta.at(i, d) - tb.at(j, d)) * gij;
                            ga.row_slice_mut(i)[d] += s;
                            gb.row_slice_mut(j)[d] -= s;
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Affine(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |gi, y| gi * y * (1.0 - y)).expect("sigmoid grad")),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |gi, y| gi * (1.0 - y * y)).expect("tanh grad")),
            Op::LogSigmoid(a) => {
                acc(*a, g.zip_map(val(*a), |gi, x| gi * sigmoid(-x)).expect("log_sigmoid grad"))
            }
            Op::Abs(a) => acc(*a, g.zip_map(val(*a), |gi, x| gi * sign(x)).expect("abs grad")),
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(out.shape());
                for i in 0..out.rows() {
                    let y = out.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (yy, gg)) in ga.row_slice_mut(i).iter_mut().zip(y.iter().zip(gr)) {
                        *o = yy * (gg - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSumExpCols(a) => {
                let ta = val(*a);
                let mut ga = Tensor::zeros(ta.shape());
                for i in 0..ta.rows() {
                    for j in 0..ta.cols() {
                        let w = (ta.at(i, j) - out.at(0, j)).exp();
                        ga.set(i, j, g.at(0, j) * w);
                    }
                }
                acc(*a, ga);
            }
            Op::Gather(a, idx) => {
                let ta = val(*a);
                let mut ga = Tensor::zeros(ta.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in ga.row_slice_mut(i).iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = val(p);
                    let c = t.cols();
                    if need(p) {
                        let mut gp = Tensor::zeros(t.shape());
                        for i in 0..t.rows() {
                            gp.row_slice_mut(i).copy_from_slice(&g.row_slice(i)[off..off + c]);
                        }
                        acc(p, gp);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = val(p);
                    let n = t.numel();
                    if need(p) {
                        let gp = Tensor::new(t.shape().to_vec(), g.data()[off..off + n].to_vec())
                            .expect("concat grad");
                        acc(p, gp);
                    }
                    off += n;
                }
            }
            Op::SumRows(a) => {
                let ta = val(*a);
                let mut ga = Tensor::zeros(ta.shape());
                for i in 0..ta.rows() {
                    ga.row_slice_mut(i).fill(g.data()[i]);
                }
                acc(*a, ga);
            }
            Op::SumCols(a) => {
                let ta = val(*a);
                let mut ga = Tensor::zeros(ta.shape());
                for i in 0..ta.rows() {
                    ga.row_slice_mut(i).copy_from_slice(g.data());
                }
                acc(*a, ga);
            }
            Op::SumAll(a) => acc(*a, Tensor::filled(val(*a).shape(), g.item())),
            Op::ScaleRows(a, z) => {
                let (ta, tz) = (val(*a), val(*z));
                if need(*a) {
                    let mut ga = g.clone();
                    for i in 0..ta.rows() {
                        let s = tz.data()[i];
                        for v in ga.row_slice_mut(i) {
                            *v *= s;
                        }
                    }
                    acc(*a, ga);
                }
                if need(*z) {
                    let data: Vec<f64> = (0..ta.rows())
                        .map(|i| ta.row_slice(i).iter().zip(g.row_slice(i)).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*z, Tensor::new(tz.shape().to_vec(), data).expect("scale_rows grad"));
                }
            }
            Op::NormalizeRows(a, fallback) => {
                let ta = val(*a);
                let mut ga = Tensor::zeros(ta.shape());
                for (i, &fb) in fallback.iter().enumerate() {
                    if fb {
                        continue;
                    }
                    let s: f64 = ta.row_slice(i).iter().sum();
                    let y = out.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, gg) in ga.row_slice_mut(i).iter_mut().zip(gr) {
                        *o = (gg - dot) / s;
                    }
                }
                acc(*a, ga);
            }
            Op::Bilinear(x, w, y) => {
                let (tx, tw, ty) = (val(*x), val(*w), val(*y));
                let (p, d, c) = (tx.rows(), tx.cols(), tw.shape()[0]);
                let mut gx = Tensor::zeros(tx.shape());
                let mut gy = Tensor::zeros(ty.shape());
                let mut gw = Tensor::zeros(tw.shape());
                let (nx, nw, ny) = (need(*x), need(*w), need(*y));
                for k in 0..c {
                    let wk = &tw.data()[k * d * d..(k + 1) * d * d];
                    for i in 0..p {
                        let gik = g.at(i, k);
                        if gik == 0.0 {
                            continue;
                        }
                        let xi = tx.row_slice(i);
                        let yi = ty.row_slice(i);
                        if nx {
                            let gxr = gx.row_slice_mut(i);
                            for a in 0..d {
                                let s: f64 = wk[a * d..(a + 1) * d].iter().zip(yi).map(|(u, v)| u * v).sum();
                                gxr[a] += gik * s;
                            }
                        }
                        if ny {
                            let gyr = gy.row_slice_mut(i);
                            for a in 0..d {
                                let xa = gik * xi[a];
                                if xa == 0.0 {
                                    continue;
                                }
                                for (o, u) in gyr.iter_mut().zip(&wk[a * d..(a + 1) * d]) {
                                    *o += xa * u;
                                }
                            }
                        }
                        if nw {
                            let gwk = &mut gw.data_mut()[k * d * d..(k + 1) * d * d];
                            for a in 0..d {
                                let xa = gik * xi[a];
                                if xa == 0.0 {
                                    continue;
                                }
                                for (o, v) in gwk[a * d..(a + 1) * d].iter_mut().zip(yi) {
                                    *o += xa * v;
                                }
                            }
                        }
                    }
                }
                if nx {
                    acc(*x, gx);
                }
                if nw {
                    acc(*w, gw);
                }
                if ny {
                    acc(*y, gy);
                }
            }
            Op::AtLoss(logits, positive) => {
                let t = val(*logits);
                let c = t.cols() - 1;
                let mut gl = Tensor::zeros(t.shape());
                for i in 0..t.rows() {
                    at_loss_row(
                        t.row_slice(i),
                        &positive[i * c..(i + 1) * c],
                        Some(gl.row_slice_mut(i)),
                    );
                }
                gl.scale_assign(g.item());
                acc(*logits, gl);
            }
            Op::Max(parts) => {
                let mut routed: Vec<Tensor> = parts.iter().map(|&p| Tensor::zeros(val(p).shape())).collect();
                for e in 0..out.numel() {
                    let winner = parts
                        .iter()
                        .position(|&p| val(p).data()[e] == out.data()[e])
                        .unwrap_or(0);
                    routed[winner].data_mut()[e] = g.data()[e];
                }
                for (&p, t) in parts.iter().zip(routed) {
                    acc(p, t);
                }
            }
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::MulConst(a, c) => acc(*a, g.zip_map(c, |x, y| x * y).expect("mul_const grad")),
            Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape()).expect("reshape grad")),
            Op::BlockAttention(h, blocks, scale) => {
                let th = val(*h);
                let mut gh = Tensor::zeros(th.shape());
                for &(lo, hi) in blocks {
                    for i in lo..hi {
                        let y = &out.row_slice(i)[lo..hi];
                        let gr = &g.row_slice(i)[lo..hi];
                        let inner: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        // d sim_ij = y_ij (g_ij - inner); sim_ij = scale h_i . h_j
                        let mut own = vec![0.0; th.cols()];
                        for (j, (yy, gg)) in (lo..hi).zip(y.iter().zip(gr)) {
                            let ds = scale * yy * (gg - inner);
                            if ds == 0.0 {
                                continue;
                            }
                            for (o, &x) in own.iter_mut().zip(th.row_slice(j)) {
                                *o += ds * x;
                            }
                            for (o, &x) in gh.row_slice_mut(j).iter_mut().zip(th.row_slice(i)) {
                                *o += ds * x;
                            }
                        }
                        for (o, x) in gh.row_slice_mut(i).iter_mut().zip(own) {
                            *o += x;
                        }
                    }
                }
                acc(*h, gh);
            }
            Op::BlockMatMul(a, b, blocks) => {
                let (ta, tb) = (val(*a), val(*b));
                if need(*a) {
                    let mut ga = Tensor::zeros(ta.shape());
                    for &(lo, hi) in blocks {
                        for i in lo..hi {
                            let gr = g.row_slice(i);
                            let row = &mut ga.row_slice_mut(i)[lo..hi];
                            for (o, j) in row.iter_mut().zip(lo..hi) {
                                *o = dot(gr, tb.row_slice(j));
                            }
                        }
                    }
                    acc(*a, ga);
                }
                if need(*b) {
                    let mut gb = Tensor::zeros(tb.shape());
                    for &(lo, hi) in blocks {
                        for i in lo..hi {
                            let gr = g.row_slice(i);
                            for j in lo..hi {
                                let x = ta.at(i, j);
                                if x == 0.0 {
                                    continue;
                                }
                                for (o, &y) in gb.row_slice_mut(j).iter_mut().zip(gr) {
                                    *o += x * y;
                                }
                            }
                        }
                    }
                    acc(*b, gb);
                }
            }
        }
    }
}

fn check_blocks(blocks: &[(usize, usize)], n: usize) -> Result<()> {
    let mut next = 0;
    for &(lo, hi) in blocks {
        if lo != next || hi <= lo {
            return shape_err(format!("blocks must tile 0..{n} in order, got {blocks:?}"));
        }
        next = hi;
    }
    if next != n {
        return shape_err(format!("blocks must tile 0..{n} in order, got {blocks:?}"));
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum a full-shape gradient down to a broadcast operand's shape.
fn reduce_broadcast(g: &Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        return g.clone();
    }
    let mut out = Tensor::zeros(target.shape());
    let c = target.numel();
    for (i, v) in g.data().iter().enumerate() {
        out.data_mut()[i % c] += v;
    }
    out
}

/// Adaptive-thresholding loss for one row; writes `∂loss/∂logits` into `grad` when given.
///
/// The first term is a softmax over the positive classes plus the threshold,
/// summed over positives; the second is a softmax over the negatives plus the
/// threshold, targeting the threshold.
pub(crate) fn at_loss_row(logits: &[f64], positive: &[bool], mut grad: Option<&mut [f64]>) -> f64 {
    let th = logits.len() - 1;
    let lse = |members: &mut dyn Iterator<Item = usize>| -> (f64, Vec<usize>) {
        let idx: Vec<usize> = members.collect();
        let max = idx.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = idx.iter().map(|&i| (logits[i] - max).exp()).sum();
        (max + s.ln(), idx)
    };
    let n_pos = positive.iter().filter(|&&p| p).count();
    let mut loss = 0.0;
    if n_pos > 0 {
        let (z, members) = lse(&mut (0..th).filter(|&r| positive[r]).chain(std::iter::once(th)));
        for r in (0..th).filter(|&r| positive[r]) {
            loss += z - logits[r];
        }
        if let Some(g) = grad.as_deref_mut() {
            for &m in &members {
                g[m] += n_pos as f64 * (logits[m] - z).exp();
            }
            for r in (0..th).filter(|&r| positive[r]) {
                g[r] -= 1.0;
            }
        }
    }
    let (z, members) = lse(&mut (0..th).filter(|&r| !positive[r]).chain(std::iter::once(th)));
    loss += z - logits[th];
    if let Some(g) = grad {
        for &m in &members {
            g[m] += (logits[m] - z).exp();
        }
        g[th] -= 1.0;
    }
    loss
}
