//! Discourse-aware rotary scoring.
//!
//! Queries and keys live in two subspaces: a micro one rotated by token
//! positions at base `θ_mic` and a macro one rotated by utterance depths at
//! base `θ_mac`. Keys on a divergent thread have their positions negated, so
//! the rotary difference `p_i − p̂_j` becomes the additive path length
//! `p_i + p_j`.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialogue::TokenIndexMap;
use crate::tensor::{rotary_frequency, Graph, Result, Tensor, TensorError, Var};

pub const THETA_MIC: f64 = 10_000.0;
pub const THETA_MAC: f64 = 100.0;

/// Which positional scheme the grid heads use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RopeMode {
    /// Dual-scale rotation with thread-aware sign inversion.
    #[default]
    Dual,
    /// Single-scale rotation over flat token indices, no thread awareness.
    Standard,
}

/// Per-token coordinates consumed by the scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct Positions {
    pub p_tok: Vec<f64>,
    pub p_utt: Vec<f64>,
    /// Flattened order, for the standard-RoPE baseline.
    pub flat: Vec<f64>,
    /// `same_thread[i * n + j]` is 1.0 when tokens `i` and `j` share a path.
    pub same_thread: Rc<Vec<f64>>,
}

impl Positions {
    pub fn from_index(map: &TokenIndexMap) -> Self {
        let n = map.len();
        let mut same = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if map.same_thread(i, j) {
                    same[i * n + j] = 1.0;
                }
            }
        }
        Positions {
            p_tok: map.tokens().iter().map(|t| t.p_tok as f64).collect(),
            p_utt: map.tokens().iter().map(|t| t.p_utt as f64).collect(),
            flat: (0..n).map(|i| i as f64).collect(),
            same_thread: Rc::new(same),
        }
    }

    pub fn len(&self) -> usize {
        self.p_tok.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_tok.is_empty()
    }
}

/// `p` on the same thread, `−p` across divergent threads.
pub fn adapt_position(p: f64, same_thread: bool) -> f64 {
    if same_thread {
        p
    } else {
        -p
    }
}

/// Rotates pairs `(x_{2k}, x_{2k+1})` by `p · θ^(−2k/d')`.
pub fn rotary_rotate(x: &[f64], p: f64, base: f64) -> Result<Vec<f64>> {
    let w = x.len();
    if !w.is_multiple_of(2) {
        return Err(TensorError::OddWidth(w));
    }
    let mut out = vec![0.0; w];
    for k in 0..w / 2 {
        let (s, c) = (p * rotary_frequency(base, k, w)).sin_cos();
        out[2 * k] = x[2 * k] * c - x[2 * k + 1] * s;
        out[2 * k + 1] = x[2 * k] * s + x[2 * k + 1] * c;
    }
    Ok(out)
}

fn apply(w: &Tensor, h: &[f64]) -> Result<Vec<f64>> {
    // W is stored `in × out`; rows of h multiply from the left.
    let (din, dout) = w.dims2();
    if h.len() != din {
        return Err(TensorError::Shape { op: "project", left: w.shape().to_vec(), right: vec![h.len()] });
    }
    let mut out = vec![0.0; dout];
    for (i, &x) in h.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row_slice(i)) {
            *o += x * wv;
        }
    }
    Ok(out)
}

/// Micro and macro query/key vectors of one token.
#[derive(Debug, Clone, PartialEq)]
pub struct DualProjection {
    pub q_mic: Vec<f64>,
    pub q_mac: Vec<f64>,
    pub k_mic: Vec<f64>,
    pub k_mac: Vec<f64>,
}

/// `q_mic = k_mic = W_mic h_tok`, `q_mac = k_mac = W_mac h_utt`; weights are
/// stored `in × out`.
pub fn dual_scale_project(h_tok: &[f64], h_utt: &[f64], w_mic: &Tensor, w_mac: &Tensor) -> Result<DualProjection> {
    let mic = apply(w_mic, h_tok)?;
    let mac = apply(w_mac, h_utt)?;
    Ok(DualProjection { q_mic: mic.clone(), q_mac: mac.clone(), k_mic: mic, k_mac: mac })
}

/// Dual-scale coordinates of one token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenCoord {
    pub p_tok: f64,
    pub p_utt: f64,
}

/// Scalar score `q̃_iᵀ k̃_j` for one query/key pair.
pub fn drope_score(
    q_mic: &[f64],
    q_mac: &[f64],
    k_mic: &[f64],
    k_mac: &[f64],
    qi: TokenCoord,
    kj: TokenCoord,
    same_thread: bool,
    theta_mic: f64,
    theta_mac: f64,
) -> Result<f64> {
    if q_mic.len() != k_mic.len() || q_mac.len() != k_mac.len() {
        return Err(TensorError::Shape {
            op: "drope_score",
            left: vec![q_mic.len(), q_mac.len()],
            right: vec![k_mic.len(), k_mac.len()],
        });
    }
    let (mic, mac) = drope_parts(q_mic, q_mac, k_mic, k_mac, qi, kj, same_thread, theta_mic, theta_mac)?;
    Ok(mic + mac)
}

/// Micro and macro contributions to [`drope_score`], separately.
pub fn drope_parts(
    q_mic: &[f64],
    q_mac: &[f64],
    k_mic: &[f64],
    k_mac: &[f64],
    qi: TokenCoord,
    kj: TokenCoord,
    same_thread: bool,
    theta_mic: f64,
    theta_mac: f64,
) -> Result<(f64, f64)> {
    let qm = rotary_rotate(q_mic, qi.p_tok, theta_mic)?;
    let km = rotary_rotate(k_mic, adapt_position(kj.p_tok, same_thread), theta_mic)?;
    let qa = rotary_rotate(q_mac, qi.p_utt, theta_mac)?;
    let ka = rotary_rotate(k_mac, adapt_position(kj.p_utt, same_thread), theta_mac)?;
    Ok((dot(&qm, &km), dot(&qa, &ka)))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rotary parameters shared by every grid head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeSettings {
    pub mode: RopeMode,
    pub theta_mic: f64,
    pub theta_mac: f64,
}

impl Default for RopeSettings {
    fn default() -> Self {
        RopeSettings { mode: RopeMode::Dual, theta_mic: THETA_MIC, theta_mac: THETA_MAC }
    }
}

/// Full `n × n` score matrix on the graph.
///
/// Inputs are the projected micro/macro query and key rows. In
/// [`RopeMode::Standard`] the two halves are joined first and rotated as one
/// vector by flat index at `θ_mic`, with no sign inversion.
pub fn score_matrix(
    g: &mut Graph,
    q_mic: Var,
    q_mac: Var,
    k_mic: Var,
    k_mac: Var,
    pos: &Positions,
    rope: RopeSettings,
) -> Result<Var> {
    match rope.mode {
        RopeMode::Standard => {
            let q = g.concat_cols(&[q_mic, q_mac])?;
            let k = g.concat_cols(&[k_mic, k_mac])?;
            let q = g.rotary(q, &pos.flat, rope.theta_mic)?;
            let k = g.rotary(k, &pos.flat, rope.theta_mic)?;
            g.matmul_bt(q, k)
        }
        RopeMode::Dual => {
            let qm = g.rotary(q_mic, &pos.p_tok, rope.theta_mic)?;
            let qa = g.rotary(q_mac, &pos.p_utt, rope.theta_mac)?;
            let q = g.concat_cols(&[qm, qa])?;
            let key = |g: &mut Graph, sign: f64| -> Result<Var> {
                let pt: Vec<f64> = pos.p_tok.iter().map(|p| sign * p).collect();
                let pu: Vec<f64> = pos.p_utt.iter().map(|p| sign * p).collect();
                let km = g.rotary(k_mic, &pt, rope.theta_mic)?;
                let ka = g.rotary(k_mac, &pu, rope.theta_mac)?;
                g.concat_cols(&[km, ka])
            };
            let k_same = key(g, 1.0)?;
            let same = g.matmul_bt(q, k_same)?;
            if pos.same_thread.iter().all(|&m| m == 1.0) {
                return Ok(same);
            }
            let k_div = key(g, -1.0)?;
            let div = g.matmul_bt(q, k_div)?;
            let same = g.mul_const(same, pos.same_thread.clone())?;
            let inv: Vec<f64> = pos.same_thread.iter().map(|m| 1.0 - m).collect();
            let div = g.mul_const(div, Rc::new(inv))?;
            g.add(same, div)
        }
    }
}

/// One row of the positional decay table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayRow {
    pub distance: usize,
    /// Normalized score at this relative distance under base `θ_mic`.
    pub micro: f64,
    /// Same under base `θ_mac`.
    pub macro_: f64,
}

/// Mean normalized self-score `qᵀ𝓡(Δ)q / ‖q‖²` over random `q` of the given
/// width, for each distance `0..=max_distance`.
pub fn decay_curve(theta_mic: f64, theta_mac: f64, width: usize, max_distance: usize, samples: usize, seed: u64) -> Result<Vec<DecayRow>> {
    if !width.is_multiple_of(2) {
        return Err(TensorError::OddWidth(width));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qs: Vec<Vec<f64>> = (0..samples.max(1)).map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let corr = |base: f64, dist: f64| -> Result<f64> {
        let mut acc = 0.0;
        for q in &qs {
            let r = rotary_rotate(q, dist, base)?;
            acc += dot(q, &r) / dot(q, q).max(f64::MIN_POSITIVE);
        }
        Ok(acc / qs.len() as f64)
    };
    (0..=max_distance)
        .map(|d| {
            Ok(DecayRow { distance: d, micro: corr(theta_mic, d as f64)?, macro_: corr(theta_mac, d as f64)? })
        })
        .collect()
}

/// Plain-text columns `distance micro macro`.
pub fn format_decay_table(rows: &[DecayRow]) -> String {
    let mut s = String::from("distance\tmicro\tmacro\n");
    for r in rows {
        s.push_str(&format!("{}\t{:.6}\t{:.6}\n", r.distance, r.micro, r.macro_));
    }
    s
}
