use super::{DiffError, Tensor};

/// Handle to a node on a [`Tape`]. Node ids are dense and follow creation order.
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
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    AddRow(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Reshape(Var),
    Pick(Var, Vec<usize>),
    Softmax(Var),
    LogSumExp(Var, Option<Vec<bool>>),
    CosineSim(Var, Var),
    NormalizeRows(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow(a, b) | Op::CosineSim(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::Pick(a, _)
            | Op::Softmax(a)
            | Op::LogSumExp(a, _)
            | Op::NormalizeRows(a) => vec![*a],
            Op::Concat(vs) | Op::StackRows(vs) => vs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Topological order equals creation order, so the reverse pass is a single
/// backwards sweep over node ids. A tape is rebuilt for every forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    detached: Option<Detached>,
}

/// Bookkeeping for gradient checks: the values produced by
/// [`Tape::stop_gradient`] are either recorded or replayed in call order.
#[derive(Clone, Debug)]
enum Detached {
    Record(Vec<Tensor>),
    Replay(Vec<Tensor>, usize),
}

const NORM_EPS: f64 = 1e-12;

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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A trainable input: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    /// Accumulated gradient; all zeros when nothing has flowed into `v`.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Starts recording every [`Tape::stop_gradient`] value.
    pub(crate) fn record_detached(&mut self) {
        self.detached = Some(Detached::Record(Vec::new()));
    }

    pub(crate) fn take_detached(&mut self) -> Vec<Tensor> {
        match self.detached.take() {
            Some(Detached::Record(v)) | Some(Detached::Replay(v, _)) => v,
            None => Vec::new(),
        }
    }

    /// Makes the i-th [`Tape::stop_gradient`] call return `values[i]`
    /// instead of its argument's current value.
    pub(crate) fn replay_detached(&mut self, values: Vec<Tensor>) {
        self.detached = Some(Detached::Replay(values, 0));
    }

    // ── structural ops ──────────────────────────────────────────────

    /// Same value, no parents, no gradient: the node is a constant for the reverse pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        match &mut self.detached {
            None => {}
            Some(Detached::Record(seen)) => seen.push(value.clone()),
            Some(Detached::Replay(saved, next)) => {
                if let Some(v) = saved.get(*next) {
                    value = v.clone();
                }
                *next += 1;
            }
        }
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(DiffError::RankError {
                op: "transpose",
                expected: 2,
                shape: av.shape().to_vec(),
            });
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let out = transpose_data(av.data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Row lookup into a `[V × d]` table; indices may repeat.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(DiffError::RankError {
                op: "gather_rows",
                expected: 2,
                shape: tv.shape().to_vec(),
            });
        }
        if idx.is_empty() {
            return Err(DiffError::EmptyInput { op: "gather_rows" });
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(DiffError::IndexOutOfRange { index: i, len: v });
            }
            out.extend_from_slice(tv.row(i));
        }
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), d], out),
            Op::GatherRows(table, idx.to_vec()),
        ))
    }

    /// Selects flat element positions into a vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let xv = self.value(x);
        if idx.is_empty() {
            return Err(DiffError::EmptyInput { op: "pick" });
        }
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= xv.len() {
                return Err(DiffError::IndexOutOfRange {
                    index: i,
                    len: xv.len(),
                });
            }
            out.push(xv.data()[i]);
        }
        Ok(self.push(Tensor::vector(out), Op::Pick(x, idx.to_vec())))
    }

    /// Single flat element as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var, DiffError> {
        let v = self.pick(x, &[i])?;
        self.reshape(v, Vec::new())
    }

    /// Concatenation along the last axis. Scalars count as length-1 vectors;
    /// matrices must agree on row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts
            .first()
            .ok_or(DiffError::EmptyInput { op: "concat" })?;
        let rows = self.value(*first).rows();
        let matrix = self.value(*first).rank() == 2;
        for p in parts {
            let pv = self.value(*p);
            if (pv.rank() == 2) != matrix || pv.rows() != rows || pv.rank() > 2 {
                return Err(mismatch("concat", self.value(*first), pv));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let shape = if matrix {
            vec![rows, total]
        } else {
            vec![total]
        };
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec())))
    }

    /// Stacks equal-length vectors (or scalars) into a matrix.
    /// Stacks vectors (as single rows) and matrices vertically; every part
    /// must have the same column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts
            .first()
            .ok_or(DiffError::EmptyInput { op: "stack_rows" })?;
        let d = self.value(*first).cols();
        let mut out = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            if pv.rank() > 2 || pv.rank() == 0 || pv.cols() != d {
                return Err(mismatch("stack_rows", self.value(*first), pv));
            }
            out.extend_from_slice(pv.data());
        }
        let rows = out.len() / d;
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], out),
            Op::StackRows(parts.to_vec()),
        ))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary(a, |x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    /// `max(x, 0)`; the derivative at exactly zero is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(DiffError::Domain {
                op: "log",
                value: bad,
            });
        }
        let v = self.unary(a, f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.unary(a, softplus);
        self.push(v, Op::Softplus(a))
    }

    /// `m + v` with `v` repeated on every row of `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var, DiffError> {
        let (mv, vv) = (self.value(m), self.value(v));
        if mv.rank() != 2 || vv.rank() != 1 || mv.cols() != vv.len() {
            return Err(mismatch("add_row", mv, vv));
        }
        let c = mv.cols();
        let data = mv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vv.data()[i % c])
            .collect();
        let out = Tensor::from_parts(mv.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRow(m, v)))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Column-wise mean of a matrix, giving one vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(DiffError::RankError {
                op: "mean_rows",
                expected: 2,
                shape: av.shape().to_vec(),
            });
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a)))
    }

    /// Softmax of a vector, or of each row of a matrix. Max-shifted.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        if av.rank() == 0 || av.rank() > 2 {
            return Err(DiffError::RankError {
                op: "softmax",
                expected: 2,
                shape: av.shape().to_vec(),
            });
        }
        let c = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// Log-sum-exp of a vector (giving a scalar).
    pub fn logsumexp(&mut self, a: Var) -> Result<Var, DiffError> {
        if self.value(a).rank() != 1 {
            return Err(DiffError::RankError {
                op: "logsumexp",
                expected: 1,
                shape: self.value(a).shape().to_vec(),
            });
        }
        self.lse(a, None, Vec::new())
    }

    /// Row-wise log-sum-exp of a matrix, restricted to entries where `mask`
    /// is true (all entries when `mask` is `None`). Returns one value per row.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var, DiffError> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(DiffError::RankError {
                op: "logsumexp_rows",
                expected: 2,
                shape: av.shape().to_vec(),
            });
        }
        let rows = av.shape()[0];
        self.lse(a, mask, vec![rows])
    }

    fn lse(
        &mut self,
        a: Var,
        mask: Option<Vec<bool>>,
        shape: Vec<usize>,
    ) -> Result<Var, DiffError> {
        let av = self.value(a);
        if let Some(m) = &mask {
            if m.len() != av.len() {
                return Err(DiffError::ShapeMismatch {
                    op: "logsumexp_rows",
                    left: av.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let c = av.cols();
        let mut out = Vec::with_capacity(av.rows());
        for (r, row) in av.data().chunks(c).enumerate() {
            let keep = |j: usize| mask.as_ref().map_or(true, |m| m[r * c + j]);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(DiffError::EmptyInput { op: "logsumexp" });
            }
            let s: f64 = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, &x)| (x - max).exp())
                .sum();
            out.push(max + s.ln());
        }
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(t, Op::LogSumExp(a, mask)))
    }

    /// Cosine similarity of two equal-shape tensors, as a scalar.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("cosine_sim", av, bv));
        }
        let (na, nb) = (norm(av.data()), norm(bv.data()));
        if na < NORM_EPS || nb < NORM_EPS {
            return Err(DiffError::ZeroNorm);
        }
        let s = dot(av.data(), bv.data()) / (na * nb);
        Ok(self.push(Tensor::scalar(s), Op::CosineSim(a, b)))
    }

    /// Divides a vector, or each row of a matrix, by its Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = norm(row);
            if n < NORM_EPS {
                return Err(DiffError::ZeroNorm);
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        Ok(self.push(t, Op::NormalizeRows(a)))
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Propagates `d root / d node` to every node reachable from `root` and
    /// adds the result into the stored gradients. Calling it twice without
    /// [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(DiffError::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        local[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut local);
            match &mut self.grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose_data(bv.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut da, m, n, k);
                    self.accumulate(local, *a, &da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose_data(av.data(), m, k);
                    let mut db = vec![0.0; k * n];
                    matmul_into(&at, g, &mut db, k, m, n);
                    self.accumulate(local, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(local, *a, g);
                self.accumulate(local, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(local, *a, g);
                if self.needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.accumulate(local, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let da: Vec<f64> = g.iter().zip(bv).map(|(g, y)| g * y).collect();
                    self.accumulate(local, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.accumulate(local, *b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| c * x).collect();
                self.accumulate(local, *a, &da);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(local, *a, &da);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(local, *a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y).collect();
                self.accumulate(local, *a, &da);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g.iter().zip(x).map(|(g, x)| g / x).collect();
                self.accumulate(local, *a, &da);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect();
                self.accumulate(local, *a, &da);
            }
            Op::AddRow(m, v) => {
                self.accumulate(local, *m, g);
                if self.needs(*v) {
                    let c = self.value(*v).len();
                    let mut dv = vec![0.0; c];
                    for row in g.chunks(c) {
                        dv.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                    self.accumulate(local, *v, &dv);
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let da = transpose_data(g, s[0], s[1]);
                self.accumulate(local, *a, &da);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).len()];
                self.accumulate(local, *a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let da = vec![g[0] / n as f64; n];
                self.accumulate(local, *a, &da);
            }
            Op::MeanRows(a) => {
                let r = self.value(*a).rows();
                let scale = 1.0 / r as f64;
                let row: Vec<f64> = g.iter().map(|x| x * scale).collect();
                let da: Vec<f64> = row.iter().copied().cycle().take(row.len() * r).collect();
                self.accumulate(local, *a, &da);
            }
            Op::GatherRows(t, idx) => {
                if self.needs(*t) {
                    let tv = self.value(*t);
                    let d = tv.cols();
                    let slot = local[t.0].get_or_insert_with(|| vec![0.0; tv.len()]);
                    for (k, &i) in idx.iter().enumerate() {
                        for (s, x) in slot[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[k * d..(k + 1) * d])
                        {
                            *s += x;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.needs(*p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(local, *p, &dp);
                    }
                    offset += c;
                }
            }
            Op::StackRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(local, *p, &g[at..at + n]);
                    at += n;
                }
            }
            Op::Reshape(a) => self.accumulate(local, *a, g),
            Op::Pick(a, idx) => {
                if self.needs(*a) {
                    let n = self.value(*a).len();
                    let slot = local[a.0].get_or_insert_with(|| vec![0.0; n]);
                    for (k, &i) in idx.iter().enumerate() {
                        slot[i] += g[k];
                    }
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                    let inner = dot(yr, gr);
                    da.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - inner)));
                }
                self.accumulate(local, *a, &da);
            }
            Op::LogSumExp(a, mask) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut da = vec![0.0; av.len()];
                for (r, (row, out)) in av.data().chunks(c).zip(y).enumerate() {
                    for (j, &x) in row.iter().enumerate() {
                        let keep = mask.as_ref().map_or(true, |m| m[r * c + j]);
                        if keep {
                            da[r * c + j] = g[r] * (x - out).exp();
                        }
                    }
                }
                self.accumulate(local, *a, &da);
            }
            Op::CosineSim(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (norm(av), norm(bv));
                let s = y[0];
                if self.needs(*a) {
                    let da: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, z)| g[0] * (z / (na * nb) - s * x / (na * na)))
                        .collect();
                    self.accumulate(local, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, z)| g[0] * (x / (na * nb) - s * z / (nb * nb)))
                        .collect();
                    self.accumulate(local, *b, &db);
                }
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a).data();
                let c = node.value.cols();
                let mut da = Vec::with_capacity(x.len());
                for ((xr, yr), gr) in x.chunks(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let n = norm(xr);
                    let proj = dot(yr, gr);
                    da.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * proj) / n));
                }
                self.accumulate(local, *a, &da);
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, local: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.needs(v) {
            return;
        }
        match &mut local[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}

fn transpose_data(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}
