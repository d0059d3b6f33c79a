use std::borrow::Cow;
use std::collections::HashMap;

use super::tensor::{axpy, dot};
use super::{ParamId, ParamStore, Real, Tensor, TensorError};

/// Epsilon added to the variance in [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Smallest norm [`Tape::l2_normalize_rows`] divides by.
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Exp(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherSumRows { table: Var, idx: Vec<usize>, bag: usize },
    Transpose(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, rstd: Vec<T> },
    SoftmaxRows(Var),
    Gelu(Var),
    Relu(Var),
    L2NormalizeRows { x: Var, norms: Vec<T> },
    LogSumExpRows { x: Var, mask: Option<Vec<bool>> },
    SumRows(Var),
    SumAll(Var),
    MeanAll(Var),
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records differentiable operations in execution order.
///
/// Ordering is topological by construction. Parameter leaves borrow their
/// values from a [`ParamStore`]; each parameter appears at most once per tape
/// so its gradient accumulates over every use.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    param_vars: HashMap<ParamId, Var>,
    spent: bool,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    node: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to any node, if the node was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.node.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.node[*n].as_ref())
    }

    /// Gradients of every reached parameter, in first-use order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(p, n)| self.node[*n].as_ref().map(|g| (*p, g)))
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears every record so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.spent = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(value), false)
    }

    /// A leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(value), true)
    }

    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.leaf(Cow::Borrowed(store.value(id)), true);
        self.param_vars.insert(id, v);
        v
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2()?;
        let rv = self.value(row);
        if rv.dims2()? != (1, n) {
            return Err(TensorError::shape("add_row", self.value(a).shape(), rv.shape()));
        }
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (o, &b) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("elementwise_mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("elementwise_mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// Multiplies every entry by a `1 × 1` variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(TensorError::shape("scale_by", self.value(a).shape(), sv.shape()));
        }
        let c = sv.item();
        let out = self.value(a).map(|x| x * c);
        self.push("scale_by", out, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(T::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let cols = self.value(first).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            let (r, c) = v.dims2()?;
            if c != cols {
                return Err(TensorError::shape("concat_rows", self.value(first).shape(), v.shape()));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let v = self.value(a);
        let (r, c) = v.dims2()?;
        if start >= end || end > r {
            return Err(TensorError::Invalid(format!(
                "slice_rows {start}..{end} out of range for shape {:?}",
                v.shape()
            )));
        }
        let out = Tensor::matrix(end - start, c, v.data()[start * c..end * c].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows(a, start), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(a);
        let (r, c) = v.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Invalid(format!("gather index {i} out of range for {r} rows")));
            }
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        self.push("gather_rows", out, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Sums consecutive groups of `bag` gathered rows: output row `b` is
    /// `Σ_k table[idx[b·bag + k]]`.
    pub fn gather_sum_rows(&mut self, table: Var, idx: &[usize], bag: usize) -> Result<Var, TensorError> {
        let v = self.value(table);
        let (r, c) = v.dims2()?;
        if bag == 0 || idx.len() % bag != 0 {
            return Err(TensorError::Invalid(format!(
                "{} indices do not split into bags of {bag}",
                idx.len()
            )));
        }
        let bags = idx.len() / bag;
        let mut out = Tensor::zeros(&[bags, c]);
        for (b, chunk) in idx.chunks(bag).enumerate() {
            let orow = out.row_mut(b);
            for &i in chunk {
                if i >= r {
                    return Err(TensorError::Invalid(format!("gather index {i} out of range for {r} rows")));
                }
                axpy(T::one(), v.row(i), orow);
            }
        }
        self.push(
            "gather_sum_rows",
            out,
            Op::GatherSumRows {
                table,
                idx: idx.to_vec(),
                bag,
            },
            &[table],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Row-wise layer normalization with a `1 × n` affine pair.
    ///
    /// A zero-variance row normalizes to zero, so the output is `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        for p in [gamma, beta] {
            if self.value(p).dims2()? != (1, n) {
                return Err(TensorError::shape("layer_norm", xv.shape(), self.value(p).shape()));
            }
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let nf = T::lit(n as f64);
        let mut xhat = Tensor::zeros(&[m, n]);
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            for (h, &a) in xhat.row_mut(i).iter_mut().zip(row) {
                *h = (a - mean) * rs;
            }
            rstd.push(rs);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for i in 0..m {
            for ((o, &gi), &bi) in out.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let (m, _) = v.dims2()?;
        let mut out = v.clone();
        for i in 0..m {
            softmax_in_place(out.row_mut(i));
        }
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var, TensorError> {
        match act {
            Activation::Gelu => self.gelu(a),
            Activation::Relu => self.relu(a),
        }
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| gelu(x).0);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let (m, _) = v.dims2()?;
        let floor = T::lit(NORM_FLOOR);
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = out.row_mut(i);
            let n = dot(row, row).sqrt().max(floor);
            row.iter_mut().for_each(|x| *x = *x / n);
            norms.push(n);
        }
        self.push("l2_normalize_rows", out, Op::L2NormalizeRows { x: a, norms }, &[a])
    }

    /// `m × 1` column of `log Σ_j exp(a_ij)`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        self.lse(a, None)
    }

    /// Like [`Self::log_sum_exp_rows`] but entries with `mask[i·n + j] == false`
    /// are left out of the sum. Every row must keep at least one entry.
    pub fn log_sum_exp_rows_masked(&mut self, a: Var, mask: Vec<bool>) -> Result<Var, TensorError> {
        self.lse(a, Some(mask))
    }

    fn lse(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var, TensorError> {
        let v = self.value(a);
        let (m, n) = v.dims2()?;
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(TensorError::Invalid(format!("mask of {} for {m}x{n}", mk.len())));
            }
        }
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let keep = |j: usize| mask.as_ref().is_none_or(|mk| mk[i * n + j]);
            let row = v.row(i);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(TensorError::Invalid(format!("row {i} is fully masked")));
            }
            let s: T = (0..n).filter(|&j| keep(j)).map(|j| (row[j] - max).exp()).sum();
            out.push(max + s.ln());
        }
        let out = Tensor::matrix(m, 1, out)?;
        self.push("log_sum_exp_rows", out, Op::LogSumExpRows { x: a, mask }, &[a])
    }

    /// `m × 1` column of row sums.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let (m, _) = v.dims2()?;
        let data = (0..m).map(|i| v.row(i).iter().copied().sum()).collect();
        let out = Tensor::matrix(m, 1, data)?;
        self.push("sum_rows", out, Op::SumRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum_all", out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::lit(v.len() as f64));
        self.push("mean_all", out, Op::MeanAll(a), &[a])
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.backward_seeded(loss, Tensor::filled(&shape, T::one()))
    }

    /// Reverse pass from any node, given the upstream gradient of that node.
    pub fn backward_seeded(&mut self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>, TensorError> {
        if self.spent {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes.is_empty() {
            return Err(TensorError::Invalid("backward on an empty tape".into()));
        }
        if seed.shape() != self.value(root).shape() {
            return Err(TensorError::shape("backward seed", self.value(root).shape(), seed.shape()));
        }
        self.spent = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .map(|(p, v)| (*p, v.0))
            .collect::<Vec<_>>();
        let mut params = params;
        params.sort_by_key(|(_, n)| *n);
        Ok(Gradients { node: grads, params })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Tensor<T>| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_nt(self.value(*b))?);
                }
                if needs(*b) {
                    acc(*b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*row) {
                    let (m, n) = g.dims2()?;
                    let mut d = Tensor::zeros(&[1, n]);
                    for r in 0..m {
                        axpy(T::one(), g.row(r), d.data_mut());
                    }
                    acc(*row, d);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if needs(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let c = *c;
                    acc(*a, g.map(|x| x * c));
                }
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                if needs(*a) {
                    acc(*a, g.map(|x| x * c));
                }
                if needs(*s) {
                    let d = dot(g.data(), self.value(*a).data());
                    acc(*s, Tensor::filled(self.value(*s).shape(), d));
                }
            }
            Op::Exp(a) => {
                acc(*a, g.zip_map(&node.value, |x, y| x * y));
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if needs(p) {
                        let d = Tensor::matrix(r, cols, g.data()[offset * cols..(offset + r) * cols].to_vec())?;
                        acc(p, d);
                    }
                    offset += r;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let c = src.cols();
                let mut d = Tensor::zeros(src.shape());
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Tensor::zeros(self.value(*a).shape());
                for (r, &src) in idx.iter().enumerate() {
                    axpy(T::one(), g.row(r), d.row_mut(src));
                }
                acc(*a, d);
            }
            Op::GatherSumRows { table, idx, bag } => {
                let mut d = Tensor::zeros(self.value(*table).shape());
                for (b, chunk) in idx.chunks(*bag).enumerate() {
                    let gr = g.row(b);
                    for &src in chunk {
                        axpy(T::one(), gr, d.row_mut(src));
                    }
                }
                acc(*table, d);
            }
            Op::Transpose(a) => acc(*a, g.transpose()?),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = g.dims2()?;
                let gv = self.value(*gamma).data();
                if needs(*gamma) {
                    let mut d = Tensor::zeros(&[1, n]);
                    for r in 0..m {
                        for ((dj, &gj), &hj) in d.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *dj += gj * hj;
                        }
                    }
                    acc(*gamma, d);
                }
                if needs(*beta) {
                    let mut d = Tensor::zeros(&[1, n]);
                    for r in 0..m {
                        axpy(T::one(), g.row(r), d.data_mut());
                    }
                    acc(*beta, d);
                }
                if needs(*x) {
                    let nf = T::lit(n as f64);
                    let mut d = Tensor::zeros(&[m, n]);
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..m {
                        for ((dh, &gj), &gam) in dxhat.iter_mut().zip(g.row(r)).zip(gv) {
                            *dh = gj * gam;
                        }
                        let h = xhat.row(r);
                        let mean_d = dxhat.iter().copied().sum::<T>() / nf;
                        let mean_dh = dot(&dxhat, h) / nf;
                        for ((o, &dh), &hj) in d.row_mut(r).iter_mut().zip(&dxhat).zip(h) {
                            *o = rstd[r] * (dh - mean_d - hj * mean_dh);
                        }
                    }
                    acc(*x, d);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (m, _) = y.dims2()?;
                let mut d = Tensor::zeros(y.shape());
                for r in 0..m {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for ((o, &yj), &gj) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yj * (gj - s);
                    }
                }
                acc(*a, d);
            }
            Op::Gelu(a) => {
                acc(*a, g.zip_map(self.value(*a), |gi, x| gi * gelu(x).1));
            }
            Op::Relu(a) => {
                acc(*a, g.zip_map(self.value(*a), |gi, x| if x > T::zero() { gi } else { T::zero() }));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let (m, _) = y.dims2()?;
                let mut d = Tensor::zeros(y.shape());
                for r in 0..m {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for ((o, &yj), &gj) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gj - yj * s) / norms[r];
                    }
                }
                acc(*x, d);
            }
            Op::LogSumExpRows { x, mask } => {
                let xv = self.value(*x);
                let (m, n) = xv.dims2()?;
                let mut d = Tensor::zeros(xv.shape());
                for r in 0..m {
                    let lse = node.value.data()[r];
                    let gr = g.data()[r];
                    for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                        if mask.as_ref().is_none_or(|mk| mk[r * n + j]) {
                            *o = gr * (xv.row(r)[j] - lse).exp();
                        }
                    }
                }
                acc(*x, d);
            }
            Op::SumRows(a) => {
                let src = self.value(*a);
                let (m, n) = src.dims2()?;
                let mut d = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    let gr = g.data()[r];
                    d.row_mut(r).iter_mut().for_each(|o| *o = gr);
                }
                acc(*a, d);
            }
            Op::SumAll(a) => {
                acc(*a, Tensor::filled(self.value(*a).shape(), g.item()));
            }
            Op::MeanAll(a) => {
                let src = self.value(*a);
                let c = g.item() / T::lit(src.len() as f64);
                acc(*a, Tensor::filled(src.shape(), c));
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x = *x / s;
    }
}

/// `(gelu(x), gelu'(x))`.
fn gelu<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::lit(3.0) * k * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (value, deriv)
}
