//! Attention blocks composed from tape operations. Projection matrices carry
//! no bias terms: a query attending to all-zero keys and values must come out
//! of the block unchanged by the residual path.

use alloc::format;
use alloc::vec::Vec;

use super::tape::{Tape, Var};
use super::NumError;
use crate::fmath;

/// Projection weights for one attention application, each `[d, d]`.
#[derive(Clone, Copy)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

fn split_heads(tape: &Tape, op: &'static str, d: usize, heads: usize) -> Result<usize, NumError> {
    let _ = tape;
    if heads == 0 || d % heads != 0 {
        return Err(NumError::ShapeMismatch {
            op,
            detail: format!("width {d} not divisible into {heads} heads"),
        });
    }
    Ok(d / heads)
}

/// Multi-head scaled dot-product attention of `q` (`[nq, d]`) over `k`/`v`
/// (`[nk, d]`), heads concatenated and output-projected.
pub fn cross_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    w: &AttnWeights,
    heads: usize,
) -> Result<Var, NumError> {
    attention_inner(tape, q, k, v, w, heads, false)
}

/// Self-attention over `x` (`[t, d]`) where position `i` sees only `0..=i`.
pub fn causal_self_attention(
    tape: &mut Tape,
    x: Var,
    w: &AttnWeights,
    heads: usize,
) -> Result<Var, NumError> {
    attention_inner(tape, x, x, x, w, heads, true)
}

fn attention_inner(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    w: &AttnWeights,
    heads: usize,
    causal: bool,
) -> Result<Var, NumError> {
    let d = match tape.value(q).shape() {
        [_, d] => *d,
        s => {
            return Err(NumError::ShapeMismatch {
                op: "attention",
                detail: format!("expected 2-D query, got {s:?}"),
            })
        }
    };
    let dh = split_heads(tape, "attention", d, heads)?;
    let qp = tape.matmul(q, w.wq)?;
    let kp = tape.matmul(k, w.wk)?;
    let vp = tape.matmul(v, w.wv)?;
    let inv_sqrt_dh = 1.0 / fmath::sqrt(dh as f64);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(qp, s, e)?;
        let kh = tape.slice_cols(kp, s, e)?;
        let vh = tape.slice_cols(vp, s, e)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, inv_sqrt_dh);
        let attn = if causal {
            tape.causal_softmax_rows(scaled)?
        } else {
            tape.softmax_rows(scaled)?
        };
        outs.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, w.wo)
}

/// Weights for one pre-norm transformer block: layer norm, causal attention,
/// residual, layer norm, two-layer GELU MLP, residual.
#[derive(Clone, Copy)]
pub struct BlockWeights {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub attn: AttnWeights,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

/// One causal transformer block over `x` (`[t, d]`).
pub fn causal_block(
    tape: &mut Tape,
    x: Var,
    w: &BlockWeights,
    heads: usize,
) -> Result<Var, NumError> {
    let n1 = tape.layer_norm(x, w.ln1_gamma, w.ln1_beta)?;
    let a = causal_self_attention(tape, n1, &w.attn, heads)?;
    let h = tape.add(x, a)?;
    let n2 = tape.layer_norm(h, w.ln2_gamma, w.ln2_beta)?;
    let m1 = tape.matmul(n2, w.mlp_w1)?;
    let m1 = tape.add_row_vec(m1, w.mlp_b1)?;
    let g = tape.gelu(m1);
    let m2 = tape.matmul(g, w.mlp_w2)?;
    let m2 = tape.add_row_vec(m2, w.mlp_b2)?;
    tape.add(h, m2)
}
