use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::param::{ParamId, ParamStore};
use super::{matmul_at_into, matmul_bt_into, matmul_into, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Sparse row map: output row `r` is `Σ w · x[src]` over `entries[r]`.
/// Covers gathers, broadcasts and pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMap {
    pub in_rows: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl RowMap {
    pub fn gather(in_rows: usize, rows: &[usize]) -> Self {
        RowMap { in_rows, entries: rows.iter().map(|&r| vec![(r, 1.0)]).collect() }
    }

    /// Each output row is the mean of a group of input rows.
    pub fn mean(in_rows: usize, groups: &[Vec<usize>]) -> Self {
        let entries = groups
            .iter()
            .map(|g| {
                let w = 1.0 / g.len() as f64;
                g.iter().map(|&r| (r, w)).collect()
            })
            .collect();
        RowMap { in_rows, entries }
    }

    pub fn out_rows(&self) -> usize {
        self.entries.len()
    }
}

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Vec<f64>>),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    RowCombine(Var, Rc<RowMap>),
    Rotary { x: Var, cos: Vec<f64>, sin: Vec<f64> },
    Sum(Var),
    Transpose(Var),
    CellCrossEntropy { logits: Vec<Var>, probs: Vec<f64>, gold: Rc<Vec<u8>>, weights: Rc<Vec<f64>> },
    Custom { inputs: Vec<Var>, backward: BackwardFn },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Inverted dropout applied by [`Graph::dropout`] while training.
pub struct DropoutState {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

/// Records a forward computation so it can be differentiated in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    dropout: Option<DropoutState>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), dropout: None }
    }

    /// Graph whose [`Graph::dropout`] calls are active.
    pub fn training(rate: f64, rng: ChaCha8Rng) -> Self {
        let mut g = Graph::new();
        if rate > 0.0 {
            g.dropout = Some(DropoutState { rate, rng });
        }
        g
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input (no gradient flows into it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        Ok(self.param(store, id))
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (n, k2) = tb.dims2();
        if k != k2 {
            return Err(shape_err("matmul_bt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), ng))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (r, c) = ta.dims2();
        if tr.len() != c {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for i in 0..r {
            for (x, &b) in data[i * c..(i + 1) * c].iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, a: Var, c: Rc<Vec<f64>>) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != c.len() {
            return Err(TensorError::Length { shape: ta.shape().to_vec(), len: c.len() });
        }
        let data = ta.data().iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::MulConst(a, c), ng))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        let ng = self.needs(a);
        self.push(out, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Softmax along the last axis, max-shifted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = super::nn::softmax_values(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Row-wise layer normalization with affine `gain`/`bias` of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = tx.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xhat[i * c + j] * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            let c = t.cols();
            for i in 0..rows {
                data[i * total + off..i * total + off + c].copy_from_slice(t.row_slice(i));
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(rows, total, data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols.max(1);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if start + len > c {
            return Err(TensorError::Shape { op: "slice_cols", left: t.shape().to_vec(), right: vec![start, len] });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row_slice(i)[start..start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::matrix(r, len, data)?, Op::SliceCols(a, start), ng))
    }

    pub fn row_combine(&mut self, a: Var, map: Rc<RowMap>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if r != map.in_rows {
            return Err(TensorError::Shape { op: "row_combine", left: t.shape().to_vec(), right: vec![map.in_rows] });
        }
        let mut data = vec![0.0; map.out_rows() * c];
        for (o, entries) in map.entries.iter().enumerate() {
            let out = &mut data[o * c..(o + 1) * c];
            for &(src, w) in entries {
                for (x, &v) in out.iter_mut().zip(t.row_slice(src)) {
                    *x += w * v;
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::matrix(map.out_rows(), c, data)?, Op::RowCombine(a, map), ng))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let n = self.value(a).rows();
        self.row_combine(a, Rc::new(RowMap::gather(n, rows)))
    }

    /// Rotates coordinate pairs `(2k, 2k+1)` of row `r` by
    /// `positions[r] · base^(-2k/cols)`.
    pub fn rotary(&mut self, x: Var, positions: &[f64], base: f64) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if c % 2 != 0 {
            return Err(TensorError::OddWidth(c));
        }
        if positions.len() != r {
            return Err(TensorError::Shape { op: "rotary", left: t.shape().to_vec(), right: vec![positions.len()] });
        }
        let half = c / 2;
        let mut cos = vec![0.0; r * half];
        let mut sin = vec![0.0; r * half];
        for i in 0..r {
            for k in 0..half {
                let angle = positions[i] * rotary_frequency(base, k, c);
                cos[i * half + k] = angle.cos();
                sin[i * half + k] = angle.sin();
            }
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row_slice(i);
            for k in 0..half {
                let (cs, sn) = (cos[i * half + k], sin[i * half + k]);
                let (a, b) = (row[2 * k], row[2 * k + 1]);
                data[i * c + 2 * k] = a * cs - b * sn;
                data[i * c + 2 * k + 1] = a * sn + b * cs;
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Rotary { x, cos, sin }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Inverted dropout; identity unless the graph was built for training.
    pub fn dropout(&mut self, a: Var) -> Result<Var> {
        let Some(state) = self.dropout.as_mut() else { return Ok(a) };
        let n = self.nodes[a.0].value.len();
        let keep = 1.0 - state.rate;
        let mask: Vec<f64> = (0..n).map(|_| if state.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        self.mul_const(a, Rc::new(mask))
    }

    /// Weighted cross-entropy summed over cells. `logits[c]` holds the class-`c`
    /// score of every cell; `weights[cell]` is zero for excluded cells.
    pub fn cell_cross_entropy(&mut self, logits: &[Var], gold: Rc<Vec<u8>>, weights: Rc<Vec<f64>>) -> Result<Var> {
        let classes = logits.len();
        if classes == 0 {
            return Err(TensorError::Empty { op: "cell_cross_entropy" });
        }
        let cells = self.value(logits[0]).len();
        if gold.len() != cells || weights.len() != cells {
            return Err(TensorError::Length { shape: vec![cells], len: gold.len().min(weights.len()) });
        }
        for &l in logits {
            if self.value(l).len() != cells {
                return Err(shape_err("cell_cross_entropy", self.value(logits[0]), self.value(l)));
            }
        }
        if let Some(&bad) = gold.iter().find(|&&g| g as usize >= classes) {
            return Err(TensorError::Invalid(format!("gold class {bad} out of range for {classes} classes")));
        }
        let mut probs = vec![0.0; classes * cells];
        let mut loss = 0.0;
        for cell in 0..cells {
            let max = (0..classes).map(|c| self.value(logits[c]).data()[cell]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..classes {
                let e = (self.value(logits[c]).data()[cell] - max).exp();
                probs[c * cells + cell] = e;
                z += e;
            }
            for c in 0..classes {
                probs[c * cells + cell] /= z;
            }
            let w = weights[cell];
            if w != 0.0 {
                let g = gold[cell] as usize;
                let log_p = self.value(logits[g]).data()[cell] - max - z.ln();
                loss -= w * log_p;
            }
        }
        let ng = logits.iter().any(|&l| self.needs(l));
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CellCrossEntropy { logits: logits.to_vec(), probs, gold, weights },
            ng,
        ))
    }

    /// Operation with a caller-supplied vector-Jacobian product. `backward`
    /// maps the output gradient to one gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var {
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward: Box::new(backward) }, ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(TensorError::Invalid(format!("backward needs a scalar, got {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(out.shape(), vec![1.0])?);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(t.reshape(&shape).expect("gradient size matches value"));
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape(), data).expect("same size");
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.cols();
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_into(g.data(), tb.data(), &mut ga, m, n, k);
                    self.acc(grads, *a, like(*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_into(ta.data(), g.data(), &mut gb, m, k, n);
                    self.acc(grads, *b, like(*b, gb));
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.rows();
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g.data(), tb.data(), &mut ga, m, n, k);
                    self.acc(grads, *a, like(*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; n * k];
                    matmul_at_into(g.data(), ta.data(), &mut gb, m, n, k);
                    self.acc(grads, *b, like(*b, gb));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, like(*a, g.data().to_vec()));
                self.acc(grads, *b, like(*b, g.data().to_vec()));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, like(*a, g.data().to_vec()));
                self.acc(grads, *b, like(*b, g.data().iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                self.acc(grads, *a, like(*a, ga));
                self.acc(grads, *b, like(*b, gb));
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, like(*a, g.data().to_vec()));
                let c = self.value(*row).len();
                let mut gr = vec![0.0; c];
                for chunk in g.data().chunks(c) {
                    for (x, y) in gr.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
                self.acc(grads, *row, like(*row, gr));
            }
            Op::MulConst(a, c) => {
                let ga = g.data().iter().zip(c.iter()).map(|(x, y)| x * y).collect();
                self.acc(grads, *a, like(*a, ga));
            }
            Op::Affine(a, s) => {
                self.acc(grads, *a, like(*a, g.data().iter().map(|x| x * s).collect()));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = g.data().iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                self.acc(grads, *a, like(*a, ga));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let ga = g.data().iter().zip(y.data()).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                self.acc(grads, *a, like(*a, ga));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = g.data().iter().zip(x.data()).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect();
                self.acc(grads, *a, like(*a, ga));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut ga = vec![0.0; y.len()];
                for (i, (yr, gr)) in y.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        ga[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, like(*a, ga));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = self.value(*gain).len();
                let r = xhat.len() / c;
                let gain_v = self.value(*gain).data();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let grow = &g.data()[i * c..(i + 1) * c];
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        gg[j] += grow[j] * xh[j];
                        gb[j] += grow[j];
                        let d = grow[j] * gain_v[j];
                        sum_d += d;
                        sum_dx += d * xh[j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let d = grow[j] * gain_v[j];
                        gx[i * c + j] = inv_std[i] * (d - sum_d / cf - xh[j] * sum_dx / cf);
                    }
                }
                self.acc(grads, *x, like(*x, gx));
                self.acc(grads, *gain, like(*gain, gg));
                self.acc(grads, *bias, like(*bias, gb));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut gp = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        gp.extend_from_slice(&g.data()[i * total + off..i * total + off + c]);
                    }
                    self.acc(grads, p, like(p, gp));
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, like(p, g.data()[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).dims2();
                let len = node.value.cols();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + len].copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                self.acc(grads, *a, like(*a, ga));
            }
            Op::RowCombine(a, map) => {
                let c = node.value.cols();
                let mut ga = vec![0.0; self.value(*a).len()];
                for (o, entries) in map.entries.iter().enumerate() {
                    let grow = &g.data()[o * c..(o + 1) * c];
                    for &(src, w) in entries {
                        for (x, &v) in ga[src * c..(src + 1) * c].iter_mut().zip(grow) {
                            *x += w * v;
                        }
                    }
                }
                self.acc(grads, *a, like(*a, ga));
            }
            Op::Rotary { x, cos, sin } => {
                let (r, c) = node.value.dims2();
                let half = c / 2;
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for k in 0..half {
                        let (cs, sn) = (cos[i * half + k], sin[i * half + k]);
                        let (g0, g1) = (g.data()[i * c + 2 * k], g.data()[i * c + 2 * k + 1]);
                        gx[i * c + 2 * k] = g0 * cs + g1 * sn;
                        gx[i * c + 2 * k + 1] = -g0 * sn + g1 * cs;
                    }
                }
                self.acc(grads, *x, like(*x, gx));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, like(*a, vec![g.item(); n]));
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                self.acc(grads, *a, like(*a, gt.into_data()));
            }
            Op::CellCrossEntropy { logits, probs, gold, weights } => {
                let cells = gold.len();
                let up = g.item();
                for (c, &l) in logits.iter().enumerate() {
                    let gl = (0..cells)
                        .map(|cell| {
                            let w = weights[cell];
                            if w == 0.0 {
                                return 0.0;
                            }
                            let target = if gold[cell] as usize == c { 1.0 } else { 0.0 };
                            up * w * (probs[c * cells + cell] - target)
                        })
                        .collect();
                    self.acc(grads, l, like(l, gl));
                }
            }
            Op::Custom { inputs, backward } => {
                for (&v, t) in inputs.iter().zip(backward(g)) {
                    self.acc(grads, v, t);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn wrt(&self, g: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Angular frequency of rotary pair `k` for a vector of width `width`.
pub fn rotary_frequency(base: f64, k: usize, width: usize) -> f64 {
    base.powf(-2.0 * k as f64 / width as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::numeric_gradient;
    use rand::SeedableRng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(Σ w ⊙ f(x))/dx against central differences for a unary
    /// graph builder.
    fn check_unary(x: Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let y = f(&mut g, xv);
        let w = rand_tensor(&mut rng, 1, g.value(y).len()).reshape(g.value(y).shape()).unwrap();
        let wv = g.constant(w.clone());
        let prod = g.mul(y, wv).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.wrt(&g, xv);
        let numeric = numeric_gradient(&x, 1e-5, |t| {
            let mut g = Graph::new();
            let xv = g.constant(t.clone());
            let y = f(&mut g, xv);
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv).unwrap();
            let s = g.sum(p);
            g.value(s).item()
        });
        let err = crate::tensor::relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 3, 4);
        check_unary(x.clone(), |g, v| g.sigmoid(v));
        check_unary(x.clone(), |g, v| g.tanh(v));
        check_unary(x.clone(), |g, v| g.affine(v, -2.0, 1.0));
        check_unary(x.clone(), |g, v| g.softmax_rows(v).unwrap());
        check_unary(x.clone(), |g, v| g.transpose(v));
        check_unary(x.clone(), |g, v| g.slice_cols(v, 1, 2).unwrap());
        check_unary(x.clone(), |g, v| g.rotary(v, &[0.5, -3.0, 7.0], 100.0).unwrap());
        check_unary(x.clone(), |g, v| g.concat_cols(&[v, v]).unwrap());
        check_unary(x.clone(), |g, v| g.concat_rows(&[v, v]).unwrap());
        check_unary(x.clone(), |g, v| {
            let m = Rc::new(RowMap { in_rows: 3, entries: vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 2.0)]] });
            g.row_combine(v, m).unwrap()
        });
        check_unary(x.clone(), |g, v| {
            let gain = g.constant(Tensor::vector(&[1.0, 2.0, -1.0, 0.5]));
            let bias = g.constant(Tensor::vector(&[0.1, 0.0, 0.3, -0.2]));
            g.layer_norm(v, gain, bias, 1e-12).unwrap()
        });
        check_unary(x.map(|v| v + 0.05 * v.signum()), |g, v| g.relu(v));
    }

    #[test]
    fn binary_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = rand_tensor(&mut rng, 4, 5);
        let c = rand_tensor(&mut rng, 3, 4);
        let x = rand_tensor(&mut rng, 3, 4);
        let bb = b.clone();
        check_unary(x.clone(), move |g, v| {
            let bv = g.constant(bb.clone());
            g.matmul(v, bv).unwrap()
        });
        let cc = c.clone();
        check_unary(x.clone(), move |g, v| {
            let cv = g.constant(cc.clone());
            g.matmul_bt(v, cv).unwrap()
        });
        let cc = c.clone();
        check_unary(x.clone(), move |g, v| {
            let cv = g.constant(cc.clone());
            g.matmul_bt(cv, v).unwrap()
        });
        let cc = c.clone();
        check_unary(x.clone(), move |g, v| {
            let cv = g.constant(cc.clone());
            let p = g.mul(v, cv).unwrap();
            g.sub(p, v).unwrap()
        });
        check_unary(Tensor::vector(&[0.3, -0.2, 0.9, 0.1]), move |g, v| {
            let cv = g.constant(c.clone());
            g.add_row(cv, v).unwrap()
        });
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gold = Rc::new(vec![0u8, 2, 1, 2]);
        let weights = Rc::new(vec![1.0, 0.25, 0.0, 2.0]);
        let x = rand_tensor(&mut rng, 3, 4);
        let grad_of = |t: &Tensor| -> (f64, Tensor) {
            let mut g = Graph::new();
            let v = g.variable(t.clone());
            let rows: Vec<Var> = (0..3)
                .map(|c| {
                    let m = Rc::new(RowMap::gather(3, &[c]));
                    g.row_combine(v, m).unwrap()
                })
                .collect();
            let l = g.cell_cross_entropy(&rows, gold.clone(), weights.clone()).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(l).item(), grads.wrt(&g, v))
        };
        let (_, analytic) = grad_of(&x);
        let numeric = numeric_gradient(&x, 1e-5, |t| grad_of(t).0);
        assert!(crate::tensor::relative_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn param_leaves_are_shared() {
        let mut store = ParamStore::new(0);
        let id = store.add_tensor("w", Tensor::vector(&[1.0, 2.0]), crate::tensor::Group::Rest).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, a).data(), &[2.0, 4.0]);
    }

    #[test]
    fn dropout_is_identity_outside_training() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(&[1.0, 2.0]));
        assert_eq!(g.dropout(x).unwrap(), x);
        let mut g = Graph::training(0.5, ChaCha8Rng::seed_from_u64(1));
        let x = g.variable(Tensor::vector(&[1.0; 64]));
        let y = g.dropout(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
