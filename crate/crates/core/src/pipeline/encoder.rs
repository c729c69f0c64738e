//! Trainable stand-in for the pretrained backbone: token embeddings plus
//! sinusoidal positions, followed by a few self-attention blocks. Each thread
//! is encoded on its own.

use crate::gnn::LN_EPS;
use crate::tensor::{Graph, Group, Linear, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln1: (ParamId, ParamId),
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ln2: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    pub embedding: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub width: usize,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, vocab: usize, width: usize, depth: usize) -> Result<Self, TensorError> {
        let grp = Group::Encoder;
        let embedding = store.add_xavier("encoder.embedding", vocab, width, grp)?;
        let mut blocks = Vec::with_capacity(depth);
        for l in 1..=depth {
            let p = format!("encoder.b{l}");
            let mut lin = |s: &str, bias: bool| Linear::new(store, &format!("{p}.{s}"), width, width, bias, grp);
            let (query, key, value) = (lin("q", true)?, lin("k", false)?, lin("v", true)?);
            let (out, ff_in, ff_out) = (lin("o", true)?, lin("ff_in", true)?, lin("ff_out", true)?);
            let mut ln = |s: &str| -> Result<(ParamId, ParamId), TensorError> {
                Ok((store.add_ones(&format!("{p}.{s}_gain"), &[width], grp)?, store.add_zeros(&format!("{p}.{s}_bias"), &[width], grp)?))
            };
            let (ln1, ln2) = (ln("ln1")?, ln("ln2")?);
            blocks.push(EncoderBlock { query, key, value, out, ln1, ff_in, ff_out, ln2 });
        }
        Ok(EncoderParams { embedding, blocks, width })
    }
}

/// `PE[p][2i] = sin(p / 10000^(2i/d))`, `PE[p][2i+1] = cos(…)`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, width]);
    for p in 0..len {
        for c in 0..width {
            let i = (c / 2) as f64;
            let angle = p as f64 / 10_000f64.powf(2.0 * i / width as f64);
            t.set(p, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

fn norm(g: &mut Graph, store: &ParamStore, x: Var, ln: (ParamId, ParamId)) -> Result<Var, TensorError> {
    let gain = g.param(store, ln.0);
    let bias = g.param(store, ln.1);
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Scaled dot-product attention `softmax(Q Kᵀ / √d) V`, returned with the
/// attention matrix.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var), TensorError> {
    let d = g.value(q).cols();
    let s = g.matmul_bt(q, k)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    let a = g.softmax_rows(s)?;
    Ok((g.matmul(a, v)?, a))
}

/// Encodes one wrapped thread given its vocabulary ids; `len × d`.
pub fn embed_encode(g: &mut Graph, store: &ParamStore, p: &EncoderParams, ids: &[usize]) -> Result<Var, TensorError> {
    if ids.is_empty() {
        return Err(TensorError::Empty { op: "embed_encode" });
    }
    let table = g.param(store, p.embedding);
    let x = g.gather_rows(table, ids)?;
    let pe = g.constant(sinusoidal_positions(ids.len(), p.width));
    let x = g.add(x, pe)?;
    let mut x = g.dropout(x)?;
    for b in &p.blocks {
        let q = b.query.forward(g, store, x)?;
        let k = b.key.forward(g, store, x)?;
        let v = b.value.forward(g, store, x)?;
        let (z, _) = attention(g, q, k, v)?;
        let z = b.out.forward(g, store, z)?;
        let z = g.dropout(z)?;
        let sum = g.add(x, z)?;
        x = norm(g, store, sum, b.ln1)?;
        let f = b.ff_in.forward(g, store, x)?;
        let f = g.relu(f);
        let f = b.ff_out.forward(g, store, f)?;
        let f = g.dropout(f)?;
        let sum = g.add(x, f)?;
        x = norm(g, store, sum, b.ln2)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_sampled;

    fn setup() -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new(11);
        let p = EncoderParams::new(&mut store, 10, 8, 2).unwrap();
        (store, p)
    }

    fn run(store: &ParamStore, p: &EncoderParams, ids: &[usize]) -> Tensor {
        let mut g = Graph::new();
        let out = embed_encode(&mut g, store, p, ids).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn positions_match_formula() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(pe.row_slice(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(2, 2) - (2.0f64 / 100.0).sin()).abs() < 1e-15);
        assert!((pe.at(1, 1) - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn deterministic_and_shaped() {
        let (store, p) = setup();
        let ids = [1, 4, 5, 2];
        let a = run(&store, &p, &ids);
        assert_eq!(a.shape(), &[4, 8]);
        assert_eq!(a, run(&store, &p, &ids));
        let (store2, p2) = setup();
        assert_eq!(a, run(&store2, &p2, &ids));
    }

    #[test]
    fn swapping_tokens_changes_output() {
        let (store, p) = setup();
        let a = run(&store, &p, &[1, 4, 5, 2]);
        let b = run(&store, &p, &[1, 5, 4, 2]);
        // The swapped rows do not simply trade places: positions matter.
        let mut traded = a.clone();
        for c in 0..8 {
            traded.set(1, c, a.at(2, c));
            traded.set(2, c, a.at(1, c));
        }
        assert!(b.max_abs_diff(&traded) > 1e-6);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, -2.0]]).unwrap());
        let k = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![3.0, 1.0], vec![-1.0, 0.2]]).unwrap());
        let v = g.constant(Tensor::identity(3).reshape(&[3, 3]).unwrap());
        let (z, a) = attention(&mut g, q, k, v).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(a).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.value(z), g.value(a));
        let expected = (3.0f64 / 2f64.sqrt()).exp() / [0.0, 3.0, -1.0].iter().map(|x: &f64| (x / 2f64.sqrt()).exp()).sum::<f64>();
        assert!((g.value(a).at(0, 1) - expected).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new(2);
        let p = EncoderParams::new(&mut store, 5, 4, 1).unwrap();
        let r = grad_check_sampled(
            &mut store,
            |g, s| {
                let h = embed_encode(g, s, &p, &[0, 3, 3, 1])?;
                let t = g.tanh(h);
                let sq = g.mul(t, t)?;
                Ok(g.sum(sq))
            },
            Some((6, 3)),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }
}
