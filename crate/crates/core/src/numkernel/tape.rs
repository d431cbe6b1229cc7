use std::collections::{HashMap, HashSet};

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Layer-norm variance floor. Small enough that normalized rows have unit
/// variance to within 1e-6 for any non-degenerate input.
pub const LAYER_NORM_EPS: Scalar = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Scalar),
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<Scalar>, inv_std: Vec<Scalar> },
    Relu(Var),
    Dropout { x: Var, mask: Vec<Scalar> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<Scalar> },
    Dot(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    RowDot(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations as they are evaluated and replays them in reverse to
/// compute gradients.
///
/// A tape lives for one forward/backward pass. Parameters are bound from a
/// [`ParamStore`] with [`Tape::param`]; after [`Tape::backward`] their
/// gradients are moved into the store with [`ParamStore::accumulate_grads`].
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Scalar>>>,
    grad_enabled: bool,
    bound: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
    seed: u64,
    dropout_calls: u64,
}

fn shape_err(msg: String) -> Error {
    Error::InvalidShape(msg)
}

impl Tape {
    /// A recording tape. `seed` keys the dropout streams.
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            bound: HashMap::new(),
            frozen: HashSet::new(),
            seed,
            dropout_calls: 0,
        }
    }

    /// A tape that evaluates but records nothing differentiable.
    pub fn inference() -> Self {
        let mut t = Self::new(0);
        t.grad_enabled = false;
        t
    }

    /// Parameters bound after this call are treated as constants.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
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
        self.nodes[v.0].value.requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[Scalar]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound, trainable parameter after `backward`.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[Scalar])> {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(id) => self.grads.get(i).and_then(|g| g.as_deref()).map(|g| (id, g)),
            _ => None,
        })
    }

    /// Parameters that ended up on the tape (trainable or frozen).
    pub fn bound_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.bound.keys().copied()
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.requires_grad = requires;
        value.grad = None;
        let op = if requires { op } else { Op::Constant };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// A differentiable input not owned by any parameter store.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.requires_grad = self.grad_enabled;
        value.grad = None;
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter; repeated calls return the same handle so that
    /// gradients from every use accumulate on one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let mut value = store.get(id).clone();
        value.grad = None;
        value.requires_grad = self.grad_enabled && !self.frozen.contains(&id);
        let op = if value.requires_grad { Op::Param(id) } else { Op::Constant };
        self.nodes.push(Node { value, op });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[Scalar] {
        self.nodes[v.0].value.data()
    }

    // ---- forward ops -------------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err(format!("matmul_nt [{m},{k}] x [{n},{k2}]^T")));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot_slice(arow, &bd[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(format!("{what} {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<Scalar> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<Scalar> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b), &[a, b]))
    }

    /// Adds a length-`n` row vector to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).numel() != n {
            return Err(shape_err(format!("add_row [{m},{n}] + {:?}", self.value(row).shape())));
        }
        let rd = self.data(row).to_vec();
        let mut out = self.data(a).to_vec();
        for chunk in out.chunks_mut(n) {
            chunk.iter_mut().zip(&rd).for_each(|(o, r)| *o += r);
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: Scalar) -> Var {
        let out: Vec<Scalar> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, c), &[a])
    }

    /// Rows of `table` selected by `ids`: `[V,e] -> [len(ids),e]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, e) = self.dims(table);
        if ids.is_empty() {
            return Err(shape_err("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidId { id: bad, rows });
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&td[i * e..(i + 1) * e]);
        }
        let op = Op::Embedding { table, ids: ids.to_vec() };
        Ok(self.push(Tensor::from_parts(vec![ids.len(), e], out), op, &[table]))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax over the entries where `allowed` is true; the rest
    /// get probability zero. A row with nothing allowed becomes all zeros.
    pub fn softmax_masked(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.value(x).numel() {
            return Err(shape_err(format!(
                "softmax mask of length {} for shape {:?}",
                allowed.len(),
                self.value(x).shape()
            )));
        }
        Ok(self.softmax_impl(x, Some(allowed)))
    }

    fn softmax_impl(&mut self, x: Var, allowed: Option<&[bool]>) -> Var {
        let (m, n) = self.dims(x);
        let xd = self.data(x);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let mask = allowed.map(|a| &a[r * n..(r + 1) * n]);
            softmax_row(&xd[r * n..(r + 1) * n], mask, &mut out[r * n..(r + 1) * n]);
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), &[x])
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(shape_err(format!("layer_norm over {n} columns with mismatched affine")));
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<Scalar>() / n as Scalar;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / n as Scalar;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let op = Op::LayerNorm { x, gamma, beta, xhat, inv_std };
        Ok(self.push(Tensor::from_parts(vec![m, n], out), op, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<Scalar> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Relu(x), &[x])
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    /// Each call draws from its own stream keyed by (tape seed, call index).
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let mut rng = rng_for(self.seed, &[0x6472_6f70, call]);
        let keep = (1.0 / (1.0 - rate)) as Scalar;
        let n = self.value(x).numel();
        let mask: Vec<Scalar> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let out: Vec<Scalar> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { x, mask }, &[x]))
    }

    /// Sum over rows of `-log softmax(logits[r])[targets[r]]`. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, targets, None)
    }

    /// As [`Tape::cross_entropy`], with the softmax restricted to `allowed`
    /// entries. Each target must be allowed.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.value(logits).numel() {
            return Err(shape_err("cross_entropy mask length mismatch".into()));
        }
        self.cross_entropy_impl(logits, targets, Some(allowed))
    }

    fn cross_entropy_impl(&mut self, logits: Var, targets: &[usize], allowed: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m {
            return Err(shape_err(format!("cross_entropy: {} targets for {m} rows", targets.len())));
        }
        for (r, &t) in targets.iter().enumerate() {
            let masked_out = allowed.is_some_and(|a| t < n && !a[r * n + t]);
            if t >= n || masked_out {
                return Err(Error::InvalidTarget { target: t, classes: n });
            }
        }
        let xd = self.data(logits);
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mask = allowed.map(|a| &a[r * n..(r + 1) * n]);
            let lse = log_sum_exp(row, mask);
            loss += lse - row[targets[r]];
            softmax_row(row, mask, &mut probs[r * n..(r + 1) * n]);
        }
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Sum of elementwise products of two same-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let v = dot_slice(self.data(a), self.data(b));
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), &[a, b]))
    }

    /// Per-row dot products of two `[m,n]` matrices, as an `[m,1]` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(b) != (m, n) {
            return Err(shape_err(format!("row_dot [{m},{n}] vs {:?}", self.value(b).shape())));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let out: Vec<Scalar> = (0..m).map(|r| dot_slice(&ad[r * n..(r + 1) * n], &bd[r * n..(r + 1) * n])).collect();
        Ok(self.push(Tensor::from_parts(vec![m, 1], out), Op::RowDot(a, b), &[a, b]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_rows of nothing".into()))?;
        let n = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(shape_err(format!("concat_rows: {c} columns vs {n}")));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(Tensor::from_parts(vec![rows, n], out), Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_cols of nothing".into()))?;
        let m = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(shape_err(format!("concat_cols: {r} rows vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.data(p);
            for r in 0..m {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(Tensor::from_parts(vec![m, total], out), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > m {
            return Err(shape_err(format!("slice_rows {start}..{} of {m}", start + len)));
        }
        let out = self.data(x)[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::from_parts(vec![len, n], out), Op::SliceRows { x, start }, &[x]))
    }

    /// Rows of `x` at `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if idx.is_empty() {
            return Err(shape_err("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err(format!("gather_rows index {bad} of {m}")));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&d[i * n..(i + 1) * n]);
        }
        let op = Op::GatherRows { x, idx: idx.to_vec() };
        Ok(self.push(Tensor::from_parts(vec![idx.len(), n], out), op, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(shape_err(format!("slice_cols {start}..{} of {n}", start + len)));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&d[r * n + start..r * n + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, len], out), Op::SliceCols { x, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as Scalar;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates gradients from a scalar `loss` to every differentiable
    /// value it depends on. Gradients from multiple uses add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::InvalidReduction(lv.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !lv.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<Scalar>> {
        if !self.nodes[v.0].value.requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&mut self, i: usize, g: &[Scalar]) {
        // Temporarily move the op out so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Constant);
        match &op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.requires_grad(*a) {
                    let bd = self.data(*b).to_vec();
                    let ga = self.acc(*a).unwrap();
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += dot_slice(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let ad = self.data(*a).to_vec();
                    let gb = self.acc(*b).unwrap();
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.requires_grad(*a) {
                    let bd = self.data(*b).to_vec();
                    let ga = self.acc(*a).unwrap();
                    for r in 0..m {
                        let garow = &mut ga[r * k..(r + 1) * k];
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (o, bv) in garow.iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                                *o += gv * bv;
                            }
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let ad = self.data(*a).to_vec();
                    let gb = self.acc(*b).unwrap();
                    for r in 0..m {
                        let arow = &ad[r * k..(r + 1) * k];
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (o, av) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *o += gv * av;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(*b) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(*a) {
                    add_into(ga, g);
                }
                if let Some(gr) = self.acc(*row) {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
                }
            }
            Op::Embedding { table, ids } => {
                let e = self.dims(*table).1;
                if let Some(gt) = self.acc(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                }
            }
            Op::Softmax(x) => {
                let (m, n) = self.dims(*x);
                let y = self.nodes[i].value.data().to_vec();
                if let Some(gx) = self.acc(*x) {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let s = dot_slice(yr, gr);
                        for c in 0..n {
                            gx[r * n + c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, n) = self.dims(*x);
                let gam = self.data(*gamma).to_vec();
                if let Some(gg) = self.acc(*gamma) {
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(gb) = self.acc(*beta) {
                    for chunk in g.chunks(n) {
                        add_into(gb, chunk);
                    }
                }
                if let Some(gx) = self.acc(*x) {
                    let nf = n as Scalar;
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let xh = &xhat[r * n..(r + 1) * n];
                        for c in 0..n {
                            dxhat[c] = g[r * n + c] * gam[c];
                        }
                        let s1: Scalar = dxhat.iter().sum();
                        let s2 = dot_slice(&dxhat, xh);
                        let inv = inv_std[r];
                        for c in 0..n {
                            gx[r * n + c] += inv / nf * (nf * dxhat[c] - s1 - xh[c] * s2);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x).to_vec();
                if let Some(gx) = self.acc(*x) {
                    for ((o, v), gv) in gx.iter_mut().zip(&xd).zip(g) {
                        if *v > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(*x) {
                    for ((o, m), gv) in gx.iter_mut().zip(mask).zip(g) {
                        *o += m * gv;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = self.dims(*logits).1;
                let scale = g[0];
                if let Some(gl) = self.acc(*logits) {
                    for (o, p) in gl.iter_mut().zip(probs) {
                        *o += scale * p;
                    }
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * n + t] -= scale;
                    }
                }
            }
            Op::Dot(a, b) => {
                let s = g[0];
                if self.requires_grad(*a) {
                    let bd = self.data(*b).to_vec();
                    let ga = self.acc(*a).unwrap();
                    ga.iter_mut().zip(&bd).for_each(|(o, v)| *o += s * v);
                }
                if self.requires_grad(*b) {
                    let ad = self.data(*a).to_vec();
                    let gb = self.acc(*b).unwrap();
                    gb.iter_mut().zip(&ad).for_each(|(o, v)| *o += s * v);
                }
            }
            Op::RowDot(a, b) => {
                let n = self.dims(*a).1;
                if self.requires_grad(*a) {
                    let bd = self.data(*b).to_vec();
                    let ga = self.acc(*a).unwrap();
                    for (r, gv) in g.iter().enumerate() {
                        for c in 0..n {
                            ga[r * n + c] += gv * bd[r * n + c];
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let ad = self.data(*a).to_vec();
                    let gb = self.acc(*b).unwrap();
                    for (r, gv) in g.iter().enumerate() {
                        for c in 0..n {
                            gb[r * n + c] += gv * ad[r * n + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if let Some(gp) = self.acc(*p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = self.nodes[i].value.dims2();
                let mut offset = 0;
                for p in parts {
                    let w = self.dims(*p).1;
                    if let Some(gp) = self.acc(*p) {
                        for r in 0..m {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.dims(*x).1;
                let start = *start;
                if let Some(gx) = self.acc(*x) {
                    add_into(&mut gx[start * n..start * n + g.len()], g);
                }
            }
            Op::GatherRows { x, idx } => {
                let n = self.dims(*x).1;
                if let Some(gx) = self.acc(*x) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let len = g.len() / m;
                let start = *start;
                if let Some(gx) = self.acc(*x) {
                    for r in 0..m {
                        add_into(&mut gx[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::Sum(x) => {
                let s = g[0];
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into(dst: &mut [Scalar], src: &[Scalar]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn dot_slice(a: &[Scalar], b: &[Scalar]) -> Scalar {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(row: &[Scalar], mask: Option<&[bool]>) -> Scalar {
    let ok = |c: usize| mask.map_or(true, |m| m[c]);
    let max = (0..row.len()).filter(|&c| ok(c)).map(|c| row[c]).fold(Scalar::NEG_INFINITY, Scalar::max);
    let s: Scalar = (0..row.len()).filter(|&c| ok(c)).map(|c| (row[c] - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_row(row: &[Scalar], mask: Option<&[bool]>, out: &mut [Scalar]) {
    let ok = |c: usize| mask.map_or(true, |m| m[c]);
    let max = (0..row.len()).filter(|&c| ok(c)).map(|c| row[c]).fold(Scalar::NEG_INFINITY, Scalar::max);
    if max == Scalar::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for c in 0..row.len() {
        out[c] = if ok(c) { (row[c] - max).exp() } else { 0.0 };
        total += out[c];
    }
    out.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Scalar]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_and_normalized() {
        let mut tape = Tape::new(0);
        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x);
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2, 3], &[700.0, -5.0, 3.0, 1e-3, 2.0, -800.0]));
        let y = tape.softmax(x);
        for r in 0..2 {
            let s: Scalar = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(tape.value(y).row(r).iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_and_empty_rows() {
        let mut tape = Tape::new(0);
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        let y = tape.softmax_masked(x, &[true, false, true, false, false, false]).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_two_way() {
        let mut tape = Tape::new(0);
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2 as Scalar).abs() < 1e-15);
        assert!(matches!(tape.cross_entropy(x, &[2]), Err(Error::InvalidTarget { target: 2, classes: 2 })));
    }

    #[test]
    fn dot_gradient_is_twice_x() {
        let mut tape = Tape::new(0);
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let l = tape.dot(x, x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new(0);
        let x = tape.leaf(t(&[1, 4], &[0.3, -1.0, 2.0, 0.5]));
        let y = tape.softmax(x);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new(0);
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::InvalidReduction(_))));
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let mut tape = Tape::new(0);
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 3], &[0.0; 6]));
        assert!(matches!(tape.matmul(a, b), Err(Error::InvalidShape(_))));
        let c = tape.constant(t(&[3, 2], &[0.0; 6]));
        assert!(matches!(tape.add(a, c), Err(Error::InvalidShape(_))));
        assert!(matches!(tape.embedding_lookup(a, &[2]), Err(Error::InvalidId { id: 2, rows: 2 })));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales_survivors() {
        let mut tape = Tape::new(5);
        let x = tape.leaf(t(&[1, 1000], &[1.0; 1000]));
        assert_eq!(tape.dropout(x, 0.5, false).unwrap(), x);
        let y = tape.dropout(x, 0.5, true).unwrap();
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|v| *v == 0.0 || *v == 2.0));
        let zeros = vals.iter().filter(|v| **v == 0.0).count();
        assert!((400..600).contains(&zeros), "zeros = {zeros}");
        assert!(tape.dropout(x, 1.0, true).is_err());
    }

    #[test]
    fn dropout_streams_are_reproducible() {
        let draw = |seed| {
            let mut tape = Tape::new(seed);
            let x = tape.leaf(t(&[1, 64], &[1.0; 64]));
            let a = tape.dropout(x, 0.3, true).unwrap();
            let b = tape.dropout(x, 0.3, true).unwrap();
            (tape.value(a).data().to_vec(), tape.value(b).data().to_vec())
        };
        let (a1, b1) = draw(9);
        let (a2, b2) = draw(9);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_ne!(a1, b1);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::new(0);
        let x = tape.constant(t(&[2, 5], &[1.0, 2.0, 3.0, 4.0, 10.0, -3.0, 0.5, 0.25, 8.0, 1.0]));
        let g = tape.constant(t(&[5], &[1.0; 5]));
        let b = tape.constant(t(&[5], &[0.0; 5]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for r in 0..2 {
            let row = tape.value(y).row(r);
            let mean: Scalar = row.iter().sum::<Scalar>() / 5.0;
            let var: Scalar = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / 5.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn params_bind_once_and_frozen_params_get_no_grad() {
        let mut store = ParamStore::new();
        let a = store.insert("a", t(&[2], &[1.0, 2.0])).unwrap();
        let b = store.insert("b", t(&[2], &[3.0, 4.0])).unwrap();
        let mut tape = Tape::new(0);
        tape.freeze([b]);
        let va = tape.param(&store, a);
        assert_eq!(tape.param(&store, a), va);
        let vb = tape.param(&store, b);
        let s1 = tape.dot(va, vb).unwrap();
        let s2 = tape.dot(va, va).unwrap();
        let l = tape.add(s1, s2).unwrap();
        tape.backward(l).unwrap();
        store.accumulate_grads(&tape);
        // d/da (a.b + a.a) = b + 2a
        assert_eq!(store.grad(a).unwrap(), &[5.0, 8.0]);
        assert!(store.grad(b).is_none());
    }
}
