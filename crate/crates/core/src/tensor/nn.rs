use super::graph::{Graph, Var};
use super::param::{Group, ParamId, ParamStore};
use super::{Result, Tensor, TensorError};

/// Max-shifted softmax along the last axis.
pub fn softmax_values(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2();
    if c == 0 {
        return Err(TensorError::Empty { op: "softmax" });
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row_slice(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[i * c + j] = e;
            z += e;
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= z;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Affine map `x · W (+ b)` with `W` stored as `in × out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, group: Group) -> Result<Self> {
        let weight = store.add_xavier(&format!("{name}.weight"), d_in, d_out, group)?;
        let bias = if bias { Some(store.add_zeros(&format!("{name}.bias"), &[d_out], group)?) } else { None };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Gated recurrent unit; gate columns are laid out `[update | reset | candidate]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParams {
    pub w_input: ParamId,
    pub w_state: ParamId,
    pub b_input: ParamId,
    pub b_state: ParamId,
    pub width: usize,
}

impl GruParams {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, width: usize, group: Group) -> Result<Self> {
        Ok(GruParams {
            w_input: store.add_xavier(&format!("{name}.w_input"), d_in, 3 * width, group)?,
            w_state: store.add_xavier(&format!("{name}.w_state"), width, 3 * width, group)?,
            b_input: store.add_zeros(&format!("{name}.b_input"), &[3 * width], group)?,
            b_state: store.add_zeros(&format!("{name}.b_state"), &[3 * width], group)?,
            width,
        })
    }
}

/// One GRU step on row-stacked inputs:
/// `z = σ(..)`, `r = σ(..)`, `h̃ = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))`,
/// `h = (1 − z) ⊙ h_prev + z ⊙ h̃`.
pub fn gru_cell(g: &mut Graph, store: &ParamStore, p: &GruParams, h_prev: Var, x: Var) -> Result<Var> {
    let d = p.width;
    if g.value(h_prev).cols() != d {
        return Err(TensorError::Shape {
            op: "gru_cell",
            left: g.value(h_prev).shape().to_vec(),
            right: vec![d],
        });
    }
    let wi = g.param(store, p.w_input);
    let ws = g.param(store, p.w_state);
    let bi = g.param(store, p.b_input);
    let bs = g.param(store, p.b_state);
    let gx = g.matmul(x, wi)?;
    let gx = g.add_row(gx, bi)?;
    let gh = g.matmul(h_prev, ws)?;
    let gh = g.add_row(gh, bs)?;

    let zx = g.slice_cols(gx, 0, d)?;
    let zh = g.slice_cols(gh, 0, d)?;
    let z = g.add(zx, zh)?;
    let z = g.sigmoid(z);

    let rx = g.slice_cols(gx, d, d)?;
    let rh = g.slice_cols(gh, d, d)?;
    let r = g.add(rx, rh)?;
    let r = g.sigmoid(r);

    let nx = g.slice_cols(gx, 2 * d, d)?;
    let nh = g.slice_cols(gh, 2 * d, d)?;
    let gated = g.mul(r, nh)?;
    let cand = g.add(nx, gated)?;
    let cand = g.tanh(cand);

    let keep = g.affine(z, -1.0, 1.0);
    let old = g.mul(keep, h_prev)?;
    let new = g.mul(z, cand)?;
    g.add(old, new)
}
