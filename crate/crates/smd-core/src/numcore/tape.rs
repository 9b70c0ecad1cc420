//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every forward op appends one node; `backward` walks the nodes in reverse
//! creation order, which is a valid topological order by construction. All
//! gradient accumulations run over ascending indices so repeated runs are
//! bit-identical.

use thiserror::Error;

use super::kernels;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got {n} elements")]
    NonScalarLoss { n: usize },
    #[error("softmax row {row} has no visible entries")]
    DegenerateRow { row: usize },
}

/// Dense row-major tensor. `grad` is populated by `Tape::backward` and
/// accumulates across calls until `zero_grads`.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_grad(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let mut t = Tensor::new(shape, data);
        t.requires_grad = true;
        t
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis; rows() * cols() == numel().
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has no dimensions")
    }

    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, f64),
    DivConst(Var, f64),
    Exp(Var),
    MinElem(Var, Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Embed { table: Var, indices: Vec<usize> },
    RmsNorm { x: Var, scale: Var, inv_rms: Vec<f64> },
    Gelu(Var),
    SoftmaxMasked { x: Var },
    LogSoftmax(Var),
    PickPerRow { x: Var, indices: Vec<usize> },
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    op: Op,
    tensor: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, tensor: Tensor) -> Var {
        self.nodes.push(Node { op, tensor });
        Var(self.nodes.len() - 1)
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.data
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
    }

    // ── Graph construction ──

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(Op::Leaf, Tensor::new(shape, data))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, Tensor::scalar(v))
    }

    /// Value-identical copy that blocks gradient flow to its ancestors.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = Tensor::new(self.tensor(x).shape.clone(), self.data(x).to_vec());
        self.push(Op::Detach, t)
    }

    fn require_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumError> {
        let (sa, sb) = (&self.tensor(a).shape, &self.tensor(b).shape);
        if sa != sb {
            return Err(NumError::ShapeMismatch { op, detail: format!("{sa:?} vs {sb:?}") });
        }
        Ok(())
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumError> {
        self.require_same_shape(op_name, a, b)?;
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        let data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let mut t = Tensor::new(ta.shape.clone(), data);
        t.requires_grad = ta.requires_grad || tb.requires_grad;
        Ok(self.push(op, t))
    }

    fn unary_elementwise(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.tensor(x);
        let data: Vec<f64> = tx.data.iter().map(|&v| f(v)).collect();
        let mut t = Tensor::new(tx.shape.clone(), data);
        t.requires_grad = tx.requires_grad;
        self.push(op, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise min; ties route gradient to the first argument.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_elementwise("min_elem", a, b, f64::min, Op::MinElem(a, b))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        self.unary_elementwise(x, |v| v * c, Op::MulConst(x, c))
    }

    /// Division is kept as division (not multiplication by a reciprocal) so
    /// tape results match the plain inference path bit-for-bit.
    pub fn div_const(&mut self, x: Var, c: f64) -> Var {
        self.unary_elementwise(x, |v| v / c, Op::DivConst(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_const(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary_elementwise(x, f64::exp, Op::Exp(x))
    }

    /// Gradient passes only strictly inside (lo, hi).
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary_elementwise(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary_elementwise(x, kernels::gelu, Op::Gelu(x))
    }

    /// C[m,n] = A[m,k] @ B[k,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        if k != kb {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {k} vs {kb}"),
            });
        }
        let data = kernels::matmul(&ta.data, m, k, &tb.data, n);
        let mut t = Tensor::new(vec![m, n], data);
        t.requires_grad = ta.requires_grad || tb.requires_grad;
        Ok(self.push(Op::MatMul(a, b), t))
    }

    /// C[m,n] = A[m,k] @ B[n,k]^T.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, kb) = (tb.rows(), tb.cols());
        if k != kb {
            return Err(NumError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("inner dims {k} vs {kb}"),
            });
        }
        let data = kernels::matmul_nt(&ta.data, m, k, &tb.data, n);
        let mut t = Tensor::new(vec![m, n], data);
        t.requires_grad = ta.requires_grad || tb.requires_grad;
        Ok(self.push(Op::MatMulNT(a, b), t))
    }

    /// Gathers rows of `table` at `indices`.
    pub fn embed(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumError> {
        let tt = self.tensor(table);
        let (rows, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(NumError::ShapeMismatch {
                op: "embed",
                detail: format!("index {bad} out of {rows} rows"),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&tt.data[i * d..(i + 1) * d]);
        }
        let mut t = Tensor::new(vec![indices.len(), d], data);
        t.requires_grad = tt.requires_grad;
        Ok(self.push(Op::Embed { table, indices: indices.to_vec() }, t))
    }

    /// Row-wise RMS normalization with a learned scale: y = x / rms(x) * s.
    pub fn rmsnorm(&mut self, x: Var, scale: Var) -> Result<Var, NumError> {
        let (tx, ts) = (self.tensor(x), self.tensor(scale));
        let (rows, d) = (tx.rows(), tx.cols());
        if ts.numel() != d {
            return Err(NumError::ShapeMismatch {
                op: "rmsnorm",
                detail: format!("scale len {} vs row width {d}", ts.numel()),
            });
        }
        let mut data = vec![0.0; rows * d];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let ir = kernels::rmsnorm_row(
                &tx.data[r * d..(r + 1) * d],
                &ts.data,
                &mut data[r * d..(r + 1) * d],
            );
            inv_rms.push(ir);
        }
        let mut t = Tensor::new(tx.shape.clone(), data);
        t.requires_grad = tx.requires_grad || ts.requires_grad;
        Ok(self.push(Op::RmsNorm { x, scale, inv_rms }, t))
    }

    /// Row-wise softmax over the visible subset of the last axis; entries
    /// with `visible == false` come out exactly 0. `visible` is row-major
    /// over the whole tensor.
    pub fn softmax_masked_last(&mut self, x: Var, visible: &[bool]) -> Result<Var, NumError> {
        let tx = self.tensor(x);
        if visible.len() != tx.numel() {
            return Err(NumError::ShapeMismatch {
                op: "softmax_masked_last",
                detail: format!("mask len {} vs {}", visible.len(), tx.numel()),
            });
        }
        let (rows, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; rows * c];
        for r in 0..rows {
            let ok = kernels::softmax_row_masked(
                &tx.data[r * c..(r + 1) * c],
                &visible[r * c..(r + 1) * c],
                &mut data[r * c..(r + 1) * c],
            );
            if !ok {
                return Err(NumError::DegenerateRow { row: r });
            }
        }
        let mut t = Tensor::new(tx.shape.clone(), data);
        t.requires_grad = tx.requires_grad;
        Ok(self.push(Op::SoftmaxMasked { x }, t))
    }

    /// Dense softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var, NumError> {
        let n = self.tensor(x).numel();
        self.softmax_masked_last(x, &vec![true; n])
    }

    /// Max-shift stabilized log-softmax over the last axis.
    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        let tx = self.tensor(x);
        let (rows, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; rows * c];
        for r in 0..rows {
            kernels::log_softmax_row(&tx.data[r * c..(r + 1) * c], &mut data[r * c..(r + 1) * c]);
        }
        let mut t = Tensor::new(tx.shape.clone(), data);
        t.requires_grad = tx.requires_grad;
        self.push(Op::LogSoftmax(x), t)
    }

    /// out[r] = x[r, indices[r]].
    pub fn pick_per_row(&mut self, x: Var, indices: &[usize]) -> Result<Var, NumError> {
        let tx = self.tensor(x);
        let (rows, c) = (tx.rows(), tx.cols());
        if indices.len() != rows {
            return Err(NumError::ShapeMismatch {
                op: "pick_per_row",
                detail: format!("{} indices for {rows} rows", indices.len()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(NumError::ShapeMismatch {
                op: "pick_per_row",
                detail: format!("index {bad} out of {c} cols"),
            });
        }
        let data: Vec<f64> = indices.iter().enumerate().map(|(r, &i)| tx.data[r * c + i]).collect();
        let mut t = Tensor::new(vec![rows], data);
        t.requires_grad = tx.requires_grad;
        Ok(self.push(Op::PickPerRow { x, indices: indices.to_vec() }, t))
    }

    /// Row range [start, start+len) of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let tx = self.tensor(x);
        let (rows, c) = (tx.rows(), tx.cols());
        if start + len > rows {
            return Err(NumError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("range {start}..{} out of {rows} rows", start + len),
            });
        }
        let data = tx.data[start * c..(start + len) * c].to_vec();
        let mut t = Tensor::new(vec![len, c], data);
        t.requires_grad = tx.requires_grad;
        Ok(self.push(Op::SliceRows { x, start, len }, t))
    }

    /// Column range [start, start+len) of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let tx = self.tensor(x);
        let (rows, c) = (tx.rows(), tx.cols());
        if start + len > c {
            return Err(NumError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("range {start}..{} out of {c} cols", start + len),
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.data[r * c + start..r * c + start + len]);
        }
        let mut t = Tensor::new(vec![rows, len], data);
        t.requires_grad = tx.requires_grad;
        Ok(self.push(Op::SliceCols { x, start, len }, t))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one input");
        let rows = self.tensor(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let tp = self.tensor(p);
            if tp.rows() != rows {
                return Err(NumError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {rows}", tp.rows()),
                });
            }
            total += tp.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let tp = self.tensor(p);
                let c = tp.cols();
                data.extend_from_slice(&tp.data[r * c..(r + 1) * c]);
            }
        }
        let mut t = Tensor::new(vec![rows, total], data);
        t.requires_grad = parts.iter().any(|&p| self.tensor(p).requires_grad);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let tx = self.tensor(x);
        let mut s = 0.0;
        for &v in &tx.data {
            s += v;
        }
        let mut t = Tensor::scalar(s);
        t.requires_grad = tx.requires_grad;
        self.push(Op::SumAll(x), t)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let tx = self.tensor(x);
        let n = tx.numel() as f64;
        let mut s = 0.0;
        for &v in &tx.data {
            s += v;
        }
        let mut t = Tensor::scalar(s / n);
        t.requires_grad = tx.requires_grad;
        self.push(Op::MeanAll(x), t)
    }

    // ── Backward ──

    /// Populates `grad` on every requires_grad ancestor of `loss`. Repeated
    /// calls without `zero_grads` accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        let n = self.tensor(loss).numel();
        if n != 1 {
            return Err(NumError::NonScalarLoss { n });
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if scratch[i].is_none() || !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let g = scratch[i].take().unwrap();
            self.propagate(i, &g, &mut scratch);
            scratch[i] = Some(g);
        }

        for (i, slot) in scratch.into_iter().enumerate() {
            if let Some(g) = slot {
                let t = &mut self.nodes[i].tensor;
                if t.requires_grad {
                    let acc = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
                    for (a, gv) in acc.iter_mut().zip(&g) {
                        *a += gv;
                    }
                }
            }
        }
        Ok(())
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    fn accumulate(scratch: &mut [Option<Vec<f64>>], v: Var, len: usize, add: impl Fn(&mut [f64])) {
        let slot = scratch[v.0].get_or_insert_with(|| vec![0.0; len]);
        add(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                if self.needs_grad(*a) {
                    Self::accumulate(scratch, *a, g.len(), |s| {
                        for j in 0..g.len() {
                            s[j] += g[j];
                        }
                    });
                }
                if self.needs_grad(*b) {
                    Self::accumulate(scratch, *b, g.len(), |s| {
                        for j in 0..g.len() {
                            s[j] += g[j];
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                if self.needs_grad(*a) {
                    Self::accumulate(scratch, *a, g.len(), |s| {
                        for j in 0..g.len() {
                            s[j] += g[j];
                        }
                    });
                }
                if self.needs_grad(*b) {
                    Self::accumulate(scratch, *b, g.len(), |s| {
                        for j in 0..g.len() {
                            s[j] -= g[j];
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (&self.nodes[a.0].tensor.data, &self.nodes[b.0].tensor.data);
                if self.needs_grad(*a) {
                    Self::accumulate(scratch, *a, g.len(), |s| {
                        for j in 0..g.len() {
                            s[j] += g[j] * db[j];
                        }
                    });
                }
                if self.needs_grad(*b) {
                    Self::accumulate(scratch, *b, g.len(), |s| {
                        for j in 0..g.len() {
                            s[j] += g[j] * da[j];
                        }
                    });
                }
            }
            Op::MulConst(a, c) => {
                if self.needs_grad(*a) {
                    let c = *c;
                    Self::accumulate(scratch, *a, g.len(), |s| {
                        for j in 0..g.len() {
                            s[j] += g[j] * c;
                        }
                    });
                }
            }
            Op::DivConst(a, c) => {
                if self.needs_grad(*a) {
                    let c = *c;
                    Self::accumulate(scratch, *a, g.len(), |s| {
                        for j in 0..g.len() {
                            s[j] += g[j] / c;
                        }
                    });
                }
            }
            Op::Exp(a) => {
                if self.needs_grad(*a) {
                    let out = &node.tensor.data;
                    Self::accumulate(scratch, *a, g.len(), |s| {
                        for j in 0..g.len() {
                            s[j] += g[j] * out[j];
                        }
                    });
                }
            }
            Op::MinElem(a, b) => {
                let (da, db) = (&self.nodes[a.0].tensor.data, &self.nodes[b.0].tensor.data);
                if self.needs_grad(*a) {
                    Self::accumulate(scratch, *a, g.len(), |s| {
                        for j in 0..g.len() {
                            if da[j] <= db[j] {
                                s[j] += g[j];
                            }
                        }
                    });
                }
                if self.needs_grad(*b) {
                    Self::accumulate(scratch, *b, g.len(), |s| {
                        for j in 0..g.len() {
                            if da[j] > db[j] {
                                s[j] += g[j];
                            }
                        }
                    });
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.needs_grad(*a) {
                    let da = &self.nodes[a.0].tensor.data;
                    let (lo, hi) = (*lo, *hi);
                    Self::accumulate(scratch, *a, g.len(), |s| {
                        for j in 0..g.len() {
                            if da[j] > lo && da[j] < hi {
                                s[j] += g[j];
                            }
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs_grad(*a) {
                    let ga = kernels::matmul_nt(g, m, n, &tb.data, k);
                    Self::accumulate(scratch, *a, m * k, |s| {
                        for j in 0..s.len() {
                            s[j] += ga[j];
                        }
                    });
                }
                if self.needs_grad(*b) {
                    let gb = kernels::matmul_tn(&ta.data, m, k, g, n);
                    Self::accumulate(scratch, *b, k * n, |s| {
                        for j in 0..s.len() {
                            s[j] += gb[j];
                        }
                    });
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.needs_grad(*a) {
                    let ga = kernels::matmul(g, m, n, &tb.data, k);
                    Self::accumulate(scratch, *a, m * k, |s| {
                        for j in 0..s.len() {
                            s[j] += ga[j];
                        }
                    });
                }
                if self.needs_grad(*b) {
                    let gb = kernels::matmul_tn(g, m, n, &ta.data, k);
                    Self::accumulate(scratch, *b, n * k, |s| {
                        for j in 0..s.len() {
                            s[j] += gb[j];
                        }
                    });
                }
            }
            Op::Embed { table, indices } => {
                if self.needs_grad(*table) {
                    let tt = &self.nodes[table.0].tensor;
                    let d = tt.cols();
                    let len = tt.numel();
                    Self::accumulate(scratch, *table, len, |s| {
                        for (t, &row) in indices.iter().enumerate() {
                            for j in 0..d {
                                s[row * d + j] += g[t * d + j];
                            }
                        }
                    });
                }
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let (tx, ts) = (&self.nodes[x.0].tensor, &self.nodes[scale.0].tensor);
                let (rows, d) = (tx.rows(), tx.cols());
                if self.needs_grad(*x) {
                    let mut gx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let xr = &tx.data[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let ir = inv_rms[r];
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += gr[j] * ts.data[j] * xr[j];
                        }
                        let coef = ir * ir * ir * dot / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = gr[j] * ts.data[j] * ir - xr[j] * coef;
                        }
                    }
                    Self::accumulate(scratch, *x, rows * d, |s| {
                        for j in 0..s.len() {
                            s[j] += gx[j];
                        }
                    });
                }
                if self.needs_grad(*scale) {
                    let mut gs = vec![0.0; d];
                    for r in 0..rows {
                        let ir = inv_rms[r];
                        for j in 0..d {
                            gs[j] += g[r * d + j] * tx.data[r * d + j] * ir;
                        }
                    }
                    Self::accumulate(scratch, *scale, d, |s| {
                        for j in 0..d {
                            s[j] += gs[j];
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if self.needs_grad(*a) {
                    let da = &self.nodes[a.0].tensor.data;
                    Self::accumulate(scratch, *a, g.len(), |s| {
                        for j in 0..g.len() {
                            s[j] += g[j] * kernels::gelu_deriv(da[j]);
                        }
                    });
                }
            }
            Op::SoftmaxMasked { x } => {
                if self.needs_grad(*x) {
                    let p = &node.tensor.data;
                    let c = node.tensor.cols();
                    let rows = node.tensor.rows();
                    let mut gx = vec![0.0; p.len()];
                    for r in 0..rows {
                        let (pr, gr) = (&p[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += gr[j] * pr[j];
                        }
                        // invisible entries have p == 0, hence zero gradient
                        for j in 0..c {
                            gx[r * c + j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    Self::accumulate(scratch, *x, gx.len(), |s| {
                        for j in 0..s.len() {
                            s[j] += gx[j];
                        }
                    });
                }
            }
            Op::LogSoftmax(x) => {
                if self.needs_grad(*x) {
                    let out = &node.tensor.data;
                    let c = node.tensor.cols();
                    let rows = node.tensor.rows();
                    let mut gx = vec![0.0; out.len()];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let mut sum = 0.0;
                        for j in 0..c {
                            sum += gr[j];
                        }
                        for j in 0..c {
                            gx[r * c + j] = gr[j] - out[r * c + j].exp() * sum;
                        }
                    }
                    Self::accumulate(scratch, *x, gx.len(), |s| {
                        for j in 0..s.len() {
                            s[j] += gx[j];
                        }
                    });
                }
            }
            Op::PickPerRow { x, indices } => {
                if self.needs_grad(*x) {
                    let tx = &self.nodes[x.0].tensor;
                    let c = tx.cols();
                    Self::accumulate(scratch, *x, tx.numel(), |s| {
                        for (r, &idx) in indices.iter().enumerate() {
                            s[r * c + idx] += g[r];
                        }
                    });
                }
            }
            Op::SliceRows { x, start, len } => {
                if self.needs_grad(*x) {
                    let tx = &self.nodes[x.0].tensor;
                    let c = tx.cols();
                    let (start, len) = (*start, *len);
                    Self::accumulate(scratch, *x, tx.numel(), |s| {
                        for j in 0..len * c {
                            s[start * c + j] += g[j];
                        }
                    });
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs_grad(*x) {
                    let tx = &self.nodes[x.0].tensor;
                    let (rows, c) = (tx.rows(), tx.cols());
                    let (start, len) = (*start, *len);
                    Self::accumulate(scratch, *x, rows * c, |s| {
                        for r in 0..rows {
                            for j in 0..len {
                                s[r * c + start + j] += g[r * len + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.tensor.rows();
                let total = node.tensor.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].tensor.cols();
                    if self.needs_grad(p) {
                        let off = offset;
                        Self::accumulate(scratch, p, rows * c, |s| {
                            for r in 0..rows {
                                for j in 0..c {
                                    s[r * c + j] += g[r * total + off + j];
                                }
                            }
                        });
                    }
                    offset += c;
                }
            }
            Op::SumAll(a) => {
                if self.needs_grad(*a) {
                    let n = self.nodes[a.0].tensor.numel();
                    Self::accumulate(scratch, *a, n, |s| {
                        for v in s.iter_mut() {
                            *v += g[0];
                        }
                    });
                }
            }
            Op::MeanAll(a) => {
                if self.needs_grad(*a) {
                    let n = self.nodes[a.0].tensor.numel();
                    let gv = g[0] / n as f64;
                    Self::accumulate(scratch, *a, n, |s| {
                        for v in s.iter_mut() {
                            *v += gv;
                        }
                    });
                }
            }
        }
    }
}

/// Central finite-difference gradient of a scalar-valued function.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let hi = f(&xp);
        xp[i] = orig - eps;
        let lo = f(&xp);
        xp[i] = orig;
        g.push((hi - lo) / (2.0 * eps));
    }
    g
}
