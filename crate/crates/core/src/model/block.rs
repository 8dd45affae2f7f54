//! One DiT block: AdaLN self-attention, cross-attention over the condition,
//! AdaLN MLP, with optional capture of the eight proxy taps.

use super::taps::{ProxyTapSet, TapMap};
use super::types::ConditionEmbedding;
use super::weights::BlockWeights;
use crate::error::{Error, Result};
use crate::tensor::{gelu_inplace, layer_norm, modulate, multi_head_attention, FlopTally, Matrix};

const LN_EPS: f32 = 1e-6;

/// Apply one block to `tokens`.
///
/// Tap positions: block input, post-modulation self-attention input,
/// self-attention output before its gated add, post-norm cross-attention
/// input, cross-attention output before its add, post-modulation MLP input,
/// MLP output before its gated add, block output.
pub fn block_forward(
    tokens: &Matrix,
    cond: &ConditionEmbedding,
    t_emb: &[f32],
    weights: &BlockWeights,
    n_heads: usize,
    record_taps: bool,
    flops: &mut FlopTally,
) -> Result<(Matrix, Option<ProxyTapSet>)> {
    let d = tokens.cols();
    if t_emb.len() != weights.modulation.in_dim() {
        return Err(Error::dim(
            format!(
                "timestep embedding of width {}",
                weights.modulation.in_dim()
            ),
            t_emb.len(),
        ));
    }
    let modv = weights.modulation.forward_vec(t_emb, flops)?;
    let chunk = |i: usize| &modv[i * d..(i + 1) * d];
    let (shift_a, scale_a, gate_a) = (chunk(0), chunk(1), chunk(2));
    let (shift_m, scale_m, gate_m) = (chunk(3), chunk(4), chunk(5));

    let block_in = record_taps.then(|| tokens.clone());
    let mut x = tokens.clone();

    // Self-attention.
    let mut attn_in = layer_norm(&x, &weights.norm_attn, LN_EPS);
    modulate(&mut attn_in, shift_a, scale_a);
    let qkv = weights.qkv.forward(&attn_in, flops)?;
    let (q, k, v) = split_qkv(&qkv, d);
    let heads = multi_head_attention(&q, &k, &v, n_heads, flops)?;
    let attn_out = weights.attn_out.forward(&heads, flops)?;
    x.add_gated(&attn_out, gate_a)?;

    // Cross-attention: queries from tokens, keys/values from the condition.
    let cross_in = layer_norm(&x, &weights.norm_cross, LN_EPS);
    let cq = weights.cross_q.forward(&cross_in, flops)?;
    let ckv = weights.cross_kv.forward(&cond.matrix, flops)?;
    let (ck, cv) = split_kv(&ckv, d);
    let cross_heads = multi_head_attention(&cq, &ck, &cv, n_heads, flops)?;
    let cross_out = weights.cross_out.forward(&cross_heads, flops)?;
    x.add_assign(&cross_out)?;

    // MLP.
    let mut mlp_in = layer_norm(&x, &weights.norm_mlp, LN_EPS);
    modulate(&mut mlp_in, shift_m, scale_m);
    let mut hidden = weights.mlp_up.forward(&mlp_in, flops)?;
    gelu_inplace(&mut hidden);
    let mlp_out = weights.mlp_down.forward(&hidden, flops)?;
    x.add_gated(&mlp_out, gate_m)?;

    if !x.is_finite() {
        return Err(Error::Numeric {
            step: None,
            what: "non-finite block output".into(),
        });
    }

    let taps = block_in.map(|block_in| ProxyTapSet {
        taps: TapMap([
            block_in,
            attn_in,
            attn_out,
            cross_in,
            cross_out,
            mlp_in,
            mlp_out,
            x.clone(),
        ]),
    });
    Ok((x, taps))
}

fn split_qkv(qkv: &Matrix, d: usize) -> (Matrix, Matrix, Matrix) {
    let t = qkv.rows();
    let mut q = Matrix::zeros(t, d);
    let mut k = Matrix::zeros(t, d);
    let mut v = Matrix::zeros(t, d);
    for i in 0..t {
        let row = qkv.row(i);
        q.row_mut(i).copy_from_slice(&row[..d]);
        k.row_mut(i).copy_from_slice(&row[d..2 * d]);
        v.row_mut(i).copy_from_slice(&row[2 * d..]);
    }
    (q, k, v)
}

fn split_kv(kv: &Matrix, d: usize) -> (Matrix, Matrix) {
    let s = kv.rows();
    let mut k = Matrix::zeros(s, d);
    let mut v = Matrix::zeros(s, d);
    for i in 0..s {
        let row = kv.row(i);
        k.row_mut(i).copy_from_slice(&row[..d]);
        v.row_mut(i).copy_from_slice(&row[d..]);
    }
    (k, v)
}
