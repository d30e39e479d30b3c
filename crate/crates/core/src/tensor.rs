//! Dense float64 tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Trainable values live in
//! a [`ParamStore`]; the first time a graph touches a parameter it takes a
//! copy of its value, and [`Graph::backward`] accumulates gradients back into
//! the store.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count and row width, treating rank-1 tensors as a single row.
    fn as_rows(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.as_rows();
        &self.data[r * c..(r + 1) * c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub trainable: bool,
}

/// Named trainable tensors. Insertion order is the canonical order used by
/// the optimizer and by checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            trainable: true,
        });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Total scalar count over parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable_with_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }
}

/// Node handle inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    RepeatRows(Var),
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    Cosine {
        a: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn rank_err(op: &'static str, expected: &'static str, t: &Tensor) -> Error {
    Error::Rank {
        op,
        expected,
        got: t.shape.clone(),
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Brings a parameter into the graph, reusing the node if it is already present.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&ta.data, &tb.data, &mut out, m, k, n);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
        ))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ta.data[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &tb.data[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMulT(a, b),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(rank_err("transpose", "rank 2", t));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data[i * c + j];
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            Op::Transpose(a),
        ))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err(op_name, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a rank-1 bias over the last axis.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() != 1 || ta.rank() == 0 || *ta.shape.last().unwrap() != tb.shape[0] {
            return Err(shape_err("add_bias", ta, tb));
        }
        let c = tb.shape[0];
        let data = ta.data.iter().enumerate().map(|(i, &x)| x + tb.data[i % c]).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::AddBias(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| x * c).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| x.max(0.0)).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Relu(a))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(rank_err("softmax", "axis < rank", t));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax"));
        }
        let (outer, n, inner) = axis_split(&t.shape, axis);
        let mut out = vec![0.0; t.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| t.data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..n {
                    let e = (t.data[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..n {
                    out[idx(k)] /= sum;
                }
            }
        }
        let shape = t.shape.clone();
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x, axis }))
    }

    /// Row softmax over `[q, k]` scores where query `i` may only see keys
    /// `j <= i + (k - q)`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape[1] < t.shape[0] {
            return Err(rank_err("causal_softmax", "[q, k] with k >= q", t));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("causal_softmax"));
        }
        let (q, k) = (t.shape[0], t.shape[1]);
        let offset = k - q;
        let mut out = vec![0.0; q * k];
        for i in 0..q {
            let visible = i + offset + 1;
            let row = &t.data[i * k..i * k + visible];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * k..i * k + visible];
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![q, k],
                data: out,
            },
            Op::MaskedSoftmax { x },
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, c) = tx.as_rows();
        if tg.shape != [c] || tb.shape != [c] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut out = vec![0.0; rows * c];
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let shape = tx.shape.clone();
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table: [V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(rank_err("embedding", "rank 2 table", t));
        }
        if ids.is_empty() {
            return Err(Error::Degenerate("embedding lookup of zero ids"));
        }
        let (v, d) = (t.shape[0], t.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Shape {
                    op: "embedding",
                    lhs: t.shape.clone(),
                    rhs: vec![id],
                });
            }
            out.extend_from_slice(&t.data[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data: out,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenates along the last axis. Inputs must share rank and row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]);
        let rank = first.rank();
        let (rows, _) = first.as_rows();
        let mut total = 0;
        for &x in xs {
            let t = self.value(x);
            if t.rank() != rank || t.as_rows().0 != rows || rank == 0 {
                return Err(shape_err("concat_cols", first, t));
            }
            total += t.as_rows().1;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        Ok(self.push(Tensor { shape, data: out }, Op::ConcatCols(xs.to_vec())))
    }

    /// Stacks inputs vertically. Rank-1 inputs count as one row each.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]);
        let (_, cols) = first.as_rows();
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let t = self.value(x);
            let (r, c) = t.as_rows();
            if c != cols || t.rank() > 2 {
                return Err(shape_err("concat_rows", first, t));
            }
            rows += r;
            out.extend_from_slice(&t.data);
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data: out,
            },
            Op::ConcatRows(xs.to_vec()),
        ))
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start >= end || end > t.shape[1] {
            return Err(rank_err("slice_cols", "rank 2 with valid range", t));
        }
        let (rows, c) = (t.shape[0], t.shape[1]);
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&t.data[r * c + start..r * c + end]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, w],
                data: out,
            },
            Op::SliceCols { x, start },
        ))
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start >= end || end > t.shape[0] {
            return Err(rank_err("slice_rows", "rank 2 with valid range", t));
        }
        let c = t.shape[1];
        let data = t.data[start * c..end * c].to_vec();
        Ok(self.push(
            Tensor {
                shape: vec![end - start, c],
                data,
            },
            Op::SliceRows { x, start },
        ))
    }

    /// Broadcasts a rank-1 `[d]` vector to `[n, d]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || n == 0 {
            return Err(rank_err("repeat_rows", "rank 1", t));
        }
        let d = t.shape[0];
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&t.data);
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, d],
                data: out,
            },
            Op::RepeatRows(x),
        ))
    }

    /// Column means of `[n, d]`, giving `[d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(rank_err("mean_rows", "rank 2", t));
        }
        let (n, d) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&t.data[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        Ok(self.push(
            Tensor {
                shape: vec![d],
                data: out,
            },
            Op::MeanRows(x),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: t.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = t.data.clone();
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape(x),
        ))
    }

    /// Mean over non-ignored rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let v = t.shape[1];
        let mut total = 0.0;
        let mut count = 0;
        let mut kept = Vec::with_capacity(targets.len());
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt == ignore {
                kept.push(None);
                continue;
            }
            if tgt >= v {
                return Err(Error::Shape {
                    op: "cross_entropy target",
                    lhs: t.shape.clone(),
                    rhs: vec![tgt],
                });
            }
            let row = &t.data[r * v..(r + 1) * v];
            total += log_sum_exp(row) - row[tgt];
            count += 1;
            kept.push(Some(tgt));
        }
        if count == 0 {
            return Err(Error::EmptyBatch("all target positions are ignored"));
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy"));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: kept,
                count,
            },
        ))
    }

    /// Cosine similarity of two same-shaped tensors, as a scalar.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("cosine", ta, tb));
        }
        let (na, nb) = (norm(&ta.data), norm(&tb.data));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Degenerate("cosine similarity of a zero-norm vector"));
        }
        let c = dot(&ta.data, &tb.data) / (na * nb);
        Ok(self.push(Tensor::scalar(c), Op::Cosine { a, b }))
    }

    /// Reverse pass from a scalar root. Gradients of parameters reachable from
    /// `loss` are added to whatever the store already holds.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(rank_err("backward", "scalar root", root));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let p = store.get_mut(*id);
                match &mut p.grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => p.grad = Some(g.to_vec()),
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                let da = self.buf(grads, *a);
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        da[i * k + p] += dot(gr, &tb.data[p * n..(p + 1) * n]);
                    }
                }
                let db = self.buf(grads, *b);
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ta.data[i * k + p];
                        if av != 0.0 {
                            axpy(av, gr, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                let da = self.buf(grads, *a);
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv != 0.0 {
                            axpy(gv, &tb.data[j * k..(j + 1) * k], &mut da[i * k..(i + 1) * k]);
                        }
                    }
                }
                let db = self.buf(grads, *b);
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv != 0.0 {
                            axpy(gv, &ta.data[i * k..(i + 1) * k], &mut db[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let da = self.buf(grads, *a);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.buf(grads, *a), g);
                add_into(self.buf(grads, *b), g);
            }
            Op::Sub(a, b) => {
                add_into(self.buf(grads, *a), g);
                let db = self.buf(grads, *b);
                db.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = self.buf(grads, *a);
                for ((d, gv), y) in da.iter_mut().zip(g).zip(&tb.data) {
                    *d += gv * y;
                }
                let db = self.buf(grads, *b);
                for ((d, gv), x) in db.iter_mut().zip(g).zip(&ta.data) {
                    *d += gv * x;
                }
            }
            Op::AddBias(a, b) => {
                add_into(self.buf(grads, *a), g);
                let c = self.value(*b).len();
                let db = self.buf(grads, *b);
                for (i, gv) in g.iter().enumerate() {
                    db[i % c] += gv;
                }
            }
            Op::Scale(a, c) => {
                let da = self.buf(grads, *a);
                da.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let da = self.buf(grads, *a);
                for ((d, gv), x) in da.iter_mut().zip(g).zip(&ta.data) {
                    if *x > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(&y.shape, *axis);
                let dx = self.buf(grads, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| o * n * inner + k * inner + i;
                        let s: f64 = (0..n).map(|k| g[idx(k)] * y.data[idx(k)]).sum();
                        for k in 0..n {
                            dx[idx(k)] += y.data[idx(k)] * (g[idx(k)] - s);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let y = &node.value;
                let k = y.shape[1];
                let dx = self.buf(grads, *x);
                for r in 0..y.shape[0] {
                    let yr = &y.data[r * k..(r + 1) * k];
                    let gr = &g[r * k..(r + 1) * k];
                    let s = dot(yr, gr);
                    for j in 0..k {
                        dx[r * k + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gain);
                let c = tg.len();
                let rows = xhat.len() / c;
                {
                    let dg = self.buf(grads, *gain);
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                {
                    let db = self.buf(grads, *bias);
                    for r in 0..rows {
                        for j in 0..c {
                            db[j] += g[r * c + j];
                        }
                    }
                }
                let dx = self.buf(grads, *x);
                let mut dxhat = vec![0.0; c];
                for r in 0..rows {
                    let xh = &xhat[r * c..(r + 1) * c];
                    for j in 0..c {
                        dxhat[j] = g[r * c + j] * tg.data[j];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dot(&dxhat, xh);
                    let scale = inv_std[r] / c as f64;
                    for j in 0..c {
                        dx[r * c + j] += scale * (c as f64 * dxhat[j] - sum_d - xh[j] * sum_dx);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape[1];
                let dt = self.buf(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = node.value.as_rows();
                let mut off = 0;
                for &x in xs {
                    let w = self.value(x).as_rows().1;
                    let dx = self.buf(grads, x);
                    for r in 0..rows {
                        add_into(&mut dx[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    add_into(self.buf(grads, x), &g[off..off + n]);
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).shape[1];
                let (rows, w) = (node.value.shape[0], node.value.shape[1]);
                let dx = self.buf(grads, *x);
                for r in 0..rows {
                    add_into(&mut dx[r * c + start..r * c + start + w], &g[r * w..(r + 1) * w]);
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.shape[1];
                let dx = self.buf(grads, *x);
                add_into(&mut dx[start * c..start * c + g.len()], g);
            }
            Op::RepeatRows(x) => {
                let d = self.value(*x).len();
                let dx = self.buf(grads, *x);
                for chunk in g.chunks(d) {
                    add_into(dx, chunk);
                }
            }
            Op::MeanRows(x) => {
                let t = self.value(*x);
                let (n, d) = (t.shape[0], t.shape[1]);
                let dx = self.buf(grads, *x);
                for r in 0..n {
                    for j in 0..d {
                        dx[r * d + j] += g[j] / n as f64;
                    }
                }
            }
            Op::Sum(x) => {
                let dx = self.buf(grads, *x);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Reshape(x) => add_into(self.buf(grads, *x), g),
            Op::CrossEntropy { logits, targets, count } => {
                let t = self.value(*logits);
                let v = t.shape[1];
                let scale = g[0] / *count as f64;
                let dl = self.buf(grads, *logits);
                for (r, tgt) in targets.iter().enumerate() {
                    let Some(tgt) = tgt else { continue };
                    let row = &t.data[r * v..(r + 1) * v];
                    let lse = log_sum_exp(row);
                    for j in 0..v {
                        let p = (row[j] - lse).exp();
                        dl[r * v + j] += scale * (p - if j == *tgt { 1.0 } else { 0.0 });
                    }
                }
            }
            Op::Cosine { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (na, nb) = (norm(&ta.data), norm(&tb.data));
                let c = node.value.data[0];
                let gv = g[0];
                let da = self.buf(grads, *a);
                for (d, (x, y)) in da.iter_mut().zip(ta.data.iter().zip(&tb.data)) {
                    *d += gv * (y / (na * nb) - c * x / (na * na));
                }
                let db = self.buf(grads, *b);
                for (d, (x, y)) in db.iter_mut().zip(ta.data.iter().zip(&tb.data)) {
                    *d += gv * (x / (na * nb) - c * y / (nb * nb));
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn m(g: &mut Graph, r: usize, c: usize, d: &[f64]) -> Var {
        g.constant(Tensor::matrix(r, c, d.to_vec()).unwrap())
    }

    #[test]
    fn matmul_identity_and_selection() {
        let mut g = Graph::new();
        let i2 = m(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let x = m(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = g.matmul(i2, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = m(&mut g, 1, 2, &[1.0, 0.0]);
        let b = m(&mut g, 2, 1, &[0.0, 5.0]);
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = m(&mut g, 2, 3, &[0.0; 6]);
        let b = m(&mut g, 2, 3, &[0.0; 6]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        for (input, expected) in [
            ([0.0, 0.0], [0.5, 0.5]),
            ([1000.0, 1000.0], [0.5, 0.5]),
            ([0.0, 3f64.ln()], [0.25, 0.75]),
        ] {
            let x = g.constant(Tensor::vector(input.to_vec()));
            let y = g.softmax(x, 0).unwrap();
            for (a, b) in g.value(y).data().iter().zip(expected) {
                assert!(close(*a, b, 1e-12));
            }
        }
    }

    #[test]
    fn softmax_rejects_non_finite_and_bad_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x, 0), Err(Error::NonFinite(_))));
        let y = g.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(g.softmax(y, 1).is_err());
    }

    #[test]
    fn softmax_middle_axis_sums_to_one() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 5.0).collect();
        let x = g.constant(Tensor::new(vec![2, 3, 4], data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|k| v[o * 12 + k * 4 + i]).sum();
                assert!(close(s, 1.0, 1e-12));
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let uniform = m(&mut g, 1, 8, &[0.3; 8]);
        let l = g.cross_entropy(uniform, &[5], usize::MAX).unwrap();
        assert!(close(g.scalar(l), 8f64.ln(), 1e-12));

        let mut row = vec![0.0; 4];
        row[2] = 1e4;
        let sat = m(&mut g, 1, 4, &row);
        let l = g.cross_entropy(sat, &[2], usize::MAX).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);

        let x = m(&mut g, 1, 2, &[1.0, 0.0]);
        let l = g.cross_entropy(x, &[1], usize::MAX).unwrap();
        let expected = -(1.0 / (1f64.exp() + 1.0)).ln();
        assert!(close(g.scalar(l), expected, 1e-12));
        assert!(close(expected, 1.3133, 1e-4));
    }

    #[test]
    fn cross_entropy_ignores_padding_and_rejects_all_ignored() {
        let mut g = Graph::new();
        let x = m(&mut g, 2, 2, &[1.0, 0.0, 50.0, -50.0]);
        let l = g.cross_entropy(x, &[1, 0], 0).unwrap();
        assert!(close(g.scalar(l), -(1.0 / (1f64.exp() + 1.0)).ln(), 1e-12));
        assert!(matches!(g.cross_entropy(x, &[0, 0], 0), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let c = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.cosine(a, a).unwrap();
        assert!(close(g.scalar(s), 1.0, 1e-15));
        let s = g.cosine(a, c).unwrap();
        assert_eq!(g.scalar(s), 0.0);
        let s = g.cosine(a, b).unwrap();
        assert!(close(g.scalar(s), std::f64::consts::FRAC_1_SQRT_2, 1e-15));
        assert!(matches!(g.cosine(a, z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn backward_simple_cases() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![1.0, -2.0, 3.0]));
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let s = g.sum(xv);
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.get(x).grad.as_deref(), Some(&[1.0, 1.0, 1.0][..]));

        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let sq = g.mul(xv, xv).unwrap();
        g.backward(sq, &mut store).unwrap();
        assert_eq!(store.get(x).grad.as_deref(), Some(&[6.0][..]));

        // no reset in between: accumulates
        g.backward(sq, &mut store).unwrap();
        assert_eq!(store.get(x).grad.as_deref(), Some(&[12.0][..]));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        assert!(matches!(g.backward(xv, &mut store), Err(Error::Rank { .. })));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = m(&mut g, 3, 3, &[1.0, 9.0, 9.0, 1.0, 2.0, 9.0, 0.0, 0.0, 0.0]);
        let y = g.causal_softmax(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(v[5], 0.0);
        for r in 0..3 {
            assert!(close(v[r * 3..r * 3 + 3].iter().sum(), 1.0, 1e-12));
        }
    }

    #[test]
    fn tensor_new_checks_product() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::scalar(1.0).len(), 1);
    }
}
