use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg;
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Softmax reduction axis for 2-D values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Normalize each column (slices run down the rows).
    Rows,
    /// Normalize each row.
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var, Axis),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Sum(Var),
    MeanRows(Var),
    MulConst(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Tape of operations for one forward pass.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order; [`Graph::backward`] walks it in reverse. Parameters
/// are read through the borrowed [`ParamStore`] and never copied.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    train: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph<'static> {
    /// A graph without a parameter store.
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::with_capacity(4096),
            param_vars: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Enables dropout, drawing masks from a stream seeded by `seed`.
    pub fn train_mode(mut self, seed: u64) -> Self {
        self.train = true;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.expect("param node without store").get(*id).data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::new(&[r, c], self.value(v).to_vec()).expect("node shape")
    }

    pub fn row_of(&self, v: Var, r: usize) -> &[f64] {
        let (_, c) = self.shape(v);
        &self.value(v)[r * c..(r + 1) * c]
    }

    // ---- leaves ----

    /// Records a tensor as a leaf. Gradient is tracked iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        let ng = t.requires_grad();
        Ok(self.push(r, c, t.into_data(), Op::Leaf, ng))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::dim("constant", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let t = store.get(id);
        let (r, c) = t.dims2().expect("parameters are rank 2");
        let v = self.push(r, c, Vec::new(), Op::Param(id), t.requires_grad());
        self.param_vars.insert(id, v);
        v
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        linalg::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = linalg::transpose(self.value(a), r, c);
        let ng = self.ng(a);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::dim(op, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        Ok(sa)
    }

    fn zip_op(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: Op) -> Result<Var> {
        let (r, c) = self.same_shape(op, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, mk, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x n` bias to every row of `a` (the only broadcast supported).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != c {
            return Err(Error::dim("add_row", &[r, c], &[br, bc]));
        }
        let b = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(r, c, out, Op::AddRow(a, bias), ng))
    }

    /// `alpha * a + beta`.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| alpha * x + beta).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Affine(a, alpha), ng)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, mk: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, mk, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        match axis {
            Axis::Cols => out.chunks_exact_mut(c).for_each(linalg::softmax_in_place),
            Axis::Rows => {
                let mut col = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        col[i] = out[i * c + j];
                    }
                    linalg::softmax_in_place(&mut col);
                    for i in 0..r {
                        out[i * c + j] = col[i];
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::Softmax(a, axis), ng)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of `logits`.
    /// `None` targets (padding) are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::dim("cross_entropy", &[r, c], &[targets.len()]));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0;
        for (row, t) in probs.chunks_exact_mut(c).zip(targets) {
            if let Some(t) = *t {
                if t >= c {
                    return Err(Error::Input(format!("target id {t} outside {c} classes")));
                }
                let lse = linalg::log_sum_exp(row);
                total += lse - row[t];
            }
            linalg::softmax_in_place(row);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            1,
            1,
            vec![total],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    // ---- structural ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let r = self.shape(*first).0;
        let mut c = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Error::dim("concat_cols", &[r], &[pr]));
            }
            c += pc;
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.row_of(p, i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(r, c, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let c = self.shape(*first).1;
        let mut r = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(Error::dim("concat_rows", &[c], &[pc]));
            }
            r += pr;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(r, c, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > r {
            return Err(Error::dim("slice_rows", &[r, c], &[start, len]));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(len, c, out, Op::SliceRows(a, start), ng))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice_rows(a, i, 1)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", &[r, c], &[start, len]));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(r, len, out, Op::SliceCols(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(Error::dim("reshape", &[r, c], &[rows, cols]));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(rows, cols, out, Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    /// Mean over rows: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; c];
        for row in self.value(a).chunks_exact(c) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let ng = self.ng(a);
        self.push(1, c, out, Op::MeanRows(a), ng)
    }

    /// Inverted dropout: identity outside train mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::MulConst(a, mask), ng))
    }

    /// Row-wise layer normalization with learned `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::dim("layer_norm", &[r, c], &[self.shape(gain).0, self.shape(gain).1]));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::Input("gather with no indices".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(Error::Input(format!("index {i} outside table of {r} rows")));
            }
            out.extend_from_slice(self.row_of(table, i));
        }
        let ng = self.ng(table);
        Ok(self.push(ids.len(), c, out, Op::Gather(table, ids.to_vec()), ng))
    }

    // ---- reverse pass ----

    /// Accumulates d`loss`/d(node) for every node that needs a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward called twice on the same forward pass".into()));
        }
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Contract(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if self.ng(*a) {
                    let bv = self.value(*b);
                    with_grad(grads, *a, m * k, |ga| linalg::matmul_bt_acc(g, bv, ga, m, n, k));
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    with_grad(grads, *b, k * n, |gb| linalg::matmul_at_acc(av, g, gb, m, k, n));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g, |_, x| x);
                self.acc(grads, *b, g, |_, x| x);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g, |_, x| x);
                self.acc(grads, *b, g, |_, x| -x);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, g, |i, x| x * bv[i]);
                self.acc(grads, *b, g, |i, x| x * av[i]);
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, g, |_, x| x);
                if self.ng(*bias) {
                    with_grad(grads, *bias, cols, |gb| {
                        for row in g.chunks_exact(cols) {
                            gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                        }
                    });
                }
            }
            Op::Affine(a, alpha) => self.acc(grads, *a, g, |_, x| alpha * x),
            Op::Tanh(a) => {
                let y = &node.value;
                self.acc(grads, *a, g, |i, x| x * (1.0 - y[i] * y[i]));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.acc(grads, *a, g, |i, x| x * y[i] * (1.0 - y[i]));
            }
            Op::Relu(a) => {
                let xv = self.value(*a);
                self.acc(grads, *a, g, |i, x| if xv[i] > 0.0 { x } else { 0.0 });
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let mut dx = vec![0.0; rows * cols];
                match axis {
                    Axis::Cols => {
                        for i in 0..rows {
                            let s = i * cols;
                            let dot: f64 = (0..cols).map(|j| g[s + j] * y[s + j]).sum();
                            for j in 0..cols {
                                dx[s + j] = y[s + j] * (g[s + j] - dot);
                            }
                        }
                    }
                    Axis::Rows => {
                        for j in 0..cols {
                            let dot: f64 = (0..rows).map(|i| g[i * cols + j] * y[i * cols + j]).sum();
                            for i in 0..rows {
                                let k = i * cols + j;
                                dx[k] = y[k] * (g[k] - dot);
                            }
                        }
                    }
                }
                self.acc(grads, *a, &dx, |_, x| x);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.shape(*logits).1;
                let scale = g[0];
                with_grad(grads, *logits, probs.len(), |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let row = &probs[r * c..(r + 1) * c];
                            let out = &mut gl[r * c..(r + 1) * c];
                            out.iter_mut().zip(row).for_each(|(o, p)| *o += scale * p);
                            out[t] -= scale;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.ng(p) {
                        with_grad(grads, p, rows * pc, |gp| {
                            for i in 0..rows {
                                let src = &g[i * cols + offset..i * cols + offset + pc];
                                gp[i * pc..(i + 1) * pc].iter_mut().zip(src).for_each(|(o, x)| *o += x);
                            }
                        });
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value_len(p);
                    if self.ng(p) {
                        let src = &g[offset..offset + n];
                        with_grad(grads, p, n, |gp| gp.iter_mut().zip(src).for_each(|(o, x)| *o += x));
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let (ar, ac) = self.shape(*a);
                with_grad(grads, *a, ar * ac, |ga| {
                    let dst = &mut ga[start * ac..start * ac + g.len()];
                    dst.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                });
            }
            Op::SliceCols(a, start) => {
                let (ar, ac) = self.shape(*a);
                with_grad(grads, *a, ar * ac, |ga| {
                    for i in 0..rows {
                        let dst = &mut ga[i * ac + start..i * ac + start + cols];
                        dst.iter_mut().zip(&g[i * cols..(i + 1) * cols]).for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::Transpose(a) => {
                let gt = linalg::transpose(g, rows, cols);
                self.acc(grads, *a, &gt, |_, x| x);
            }
            Op::Sum(a) => {
                let n = self.value_len(*a);
                let s = g[0];
                with_grad(grads, *a, n, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::MeanRows(a) => {
                let (ar, ac) = self.shape(*a);
                let inv = 1.0 / ar as f64;
                with_grad(grads, *a, ar * ac, |ga| {
                    for row in ga.chunks_exact_mut(ac) {
                        row.iter_mut().zip(g).for_each(|(o, x)| *o += x * inv);
                    }
                });
            }
            Op::MulConst(a, mask) => self.acc(grads, *a, g, |i, x| x * mask[i]),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                if self.ng(*x) {
                    let c = cols as f64;
                    with_grad(grads, *x, rows * cols, |gx| {
                        let mut dxh = vec![0.0; cols];
                        for (i, &is) in inv_std.iter().enumerate().take(rows) {
                            let s = i * cols;
                            for j in 0..cols {
                                dxh[j] = g[s + j] * gv[j];
                            }
                            let m1 = dxh.iter().sum::<f64>() / c;
                            let m2 = (0..cols).map(|j| dxh[j] * xhat[s + j]).sum::<f64>() / c;
                            for j in 0..cols {
                                gx[s + j] += is * (dxh[j] - m1 - xhat[s + j] * m2);
                            }
                        }
                    });
                }
                if self.ng(*gain) {
                    with_grad(grads, *gain, cols, |gg| {
                        for (i, x) in g.iter().enumerate() {
                            gg[i % cols] += x * xhat[i];
                        }
                    });
                }
                if self.ng(*bias) {
                    with_grad(grads, *bias, cols, |gb| {
                        for (i, x) in g.iter().enumerate() {
                            gb[i % cols] += x;
                        }
                    });
                }
            }
            Op::Gather(table, ids) => {
                let (tr, tc) = self.shape(*table);
                with_grad(grads, *table, tr * tc, |gt| {
                    for (k, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * tc..(id + 1) * tc];
                        dst.iter_mut().zip(&g[k * tc..(k + 1) * tc]).for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, g, |_, x| x),
        }
    }

    fn value_len(&self, v: Var) -> usize {
        let (r, c) = self.shape(v);
        r * c
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.ng(v) {
            return;
        }
        with_grad(grads, v, g.len(), |buf| {
            for (i, (o, &x)) in buf.iter_mut().zip(g).enumerate() {
                *o += f(i, x);
            }
        });
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Collects parameter gradients from the last backward pass.
    pub fn param_grads(&self) -> Gradients {
        let n = self.params.map(ParamStore::len).unwrap_or(0);
        let mut out = Gradients::new(n);
        let mut entries: Vec<_> = self.param_vars.iter().collect();
        entries.sort_by_key(|(id, _)| **id);
        for (id, v) in entries {
            if let Some(g) = self.grad(*v) {
                out.set(*id, g.to_vec());
            }
        }
        out
    }
}

fn with_grad(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
