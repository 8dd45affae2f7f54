//! Patchify/unpatchify and the full DiT forward pass.

use super::block::block_forward;
use super::config::ModelConfig;
use super::taps::{ProxyTapSet, TapId};
use super::types::{ConditionEmbedding, LatentVideo, TokenRole, TokenSequence};
use super::weights::{init_weights, DiTWeights};
use crate::error::{Error, Result};
use crate::tensor::{FlopTally, Matrix};

/// Continuous timesteps in `(0, 1]` are scaled by this before the sinusoid.
const TIMESTEP_SCALE: f32 = 100.0;

/// Sinusoidal timestep embedding `[cos(ω_i·s), sin(ω_i·s)]`, `s = 1000·t`.
pub fn timestep_embedding(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f32.ln()) * i as f32 / half as f32).exp();
        let arg = TIMESTEP_SCALE * t * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

/// Model configuration together with its deterministic weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: DiTWeights,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let weights = init_weights(&config)?;
        Ok(Self { config, weights })
    }
}

/// Captures the tap set of block 0 during a full forward.
#[derive(Debug, Default)]
pub struct TapRecorder {
    pub captured: Vec<ProxyTapSet>,
}

/// Rearrange a latent into `(tokens × patch_dim)` without any projection.
pub fn patchify_raw(x: &LatentVideo, config: &ModelConfig) -> Result<Matrix> {
    x.check_shape(config.latent_shape)?;
    let [f, c, h, w] = config.latent_shape;
    let [pf, ph, pw] = config.patch;
    let (nf, nh, nw) = (f / pf, h / ph, w / pw);
    let mut out = Matrix::zeros(nf * nh * nw, config.patch_dim());
    let src = x.as_slice();
    for fi in 0..nf {
        for hi in 0..nh {
            for wi in 0..nw {
                let token = (fi * nh + hi) * nw + wi;
                let row = out.row_mut(token);
                let mut k = 0;
                for ci in 0..c {
                    for a in 0..pf {
                        for b in 0..ph {
                            for e in 0..pw {
                                row[k] = src[x.index(fi * pf + a, ci, hi * ph + b, wi * pw + e)];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify_raw`].
pub fn unpatchify_raw(tokens: &Matrix, config: &ModelConfig) -> Result<LatentVideo> {
    let expected = (config.token_count(), config.patch_dim());
    if tokens.shape() != expected {
        return Err(Error::dim(
            format!("{expected:?} patch rows"),
            format!("{:?}", tokens.shape()),
        ));
    }
    let [f, c, h, w] = config.latent_shape;
    let [pf, ph, pw] = config.patch;
    let (nf, nh, nw) = (f / pf, h / ph, w / pw);
    let mut out = LatentVideo::zeros(config.latent_shape);
    for fi in 0..nf {
        for hi in 0..nh {
            for wi in 0..nw {
                let row = tokens.row((fi * nh + hi) * nw + wi);
                let mut k = 0;
                for ci in 0..c {
                    for a in 0..pf {
                        for b in 0..ph {
                            for e in 0..pw {
                                let idx = out.index(fi * pf + a, ci, hi * ph + b, wi * pw + e);
                                out.as_mut_slice()[idx] = row[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    debug_assert_eq!(f * c * h * w, out.len());
    Ok(out)
}

/// Patch layout followed by the patch-embedding projection; the result is `y_in`.
pub fn patchify(x: &LatentVideo, model: &Model, flops: &mut FlopTally) -> Result<TokenSequence> {
    let raw = patchify_raw(x, &model.config)?;
    let tokens = model.weights.patch_embed.forward(&raw, flops)?;
    Ok(TokenSequence::new(tokens, TokenRole::Input))
}

/// Output projection followed by the inverse patch layout.
pub fn unpatchify(
    tokens: &TokenSequence,
    model: &Model,
    flops: &mut FlopTally,
) -> Result<LatentVideo> {
    let cfg = &model.config;
    if tokens.tokens.shape() != (cfg.token_count(), cfg.hidden_dim) {
        return Err(Error::dim(
            format!("{} x {} tokens", cfg.token_count(), cfg.hidden_dim),
            format!("{:?}", tokens.tokens.shape()),
        ));
    }
    let raw = model.weights.unpatchify.forward(&tokens.tokens, flops)?;
    unpatchify_raw(&raw, cfg)
}

/// Result of patchify + block 0 on one pass.
#[derive(Debug, Clone)]
pub struct BlockZero {
    pub y_in: TokenSequence,
    pub hidden: Matrix,
    pub taps: Option<ProxyTapSet>,
}

/// Patchify and run only the first block.
pub fn forward_block0(
    x_t: &LatentVideo,
    cond: &ConditionEmbedding,
    t: f32,
    model: &Model,
    record_taps: bool,
    flops: &mut FlopTally,
) -> Result<BlockZero> {
    let y_in = patchify(x_t, model, flops)?;
    let t_emb = timestep_embedding(t, model.config.hidden_dim);
    let (hidden, taps) = block_forward(
        &y_in.tokens,
        cond,
        &t_emb,
        &model.weights.blocks[0],
        model.config.n_heads,
        record_taps,
        flops,
    )?;
    Ok(BlockZero { y_in, hidden, taps })
}

/// Continue a pass from the block-0 output through the remaining blocks; returns `y_out`.
pub fn forward_rest(
    block0: Matrix,
    cond: &ConditionEmbedding,
    t: f32,
    model: &Model,
    flops: &mut FlopTally,
) -> Result<TokenSequence> {
    let t_emb = timestep_embedding(t, model.config.hidden_dim);
    let mut x = block0;
    for block in &model.weights.blocks[1..] {
        x = block_forward(&x, cond, &t_emb, block, model.config.n_heads, false, flops)?.0;
    }
    Ok(TokenSequence::new(x, TokenRole::Output))
}

#[derive(Debug, Clone)]
pub struct DitOutput {
    pub eps: LatentVideo,
    pub y_in: TokenSequence,
    pub y_out: TokenSequence,
}

/// Full forward at continuous time `t`. When `recorder` is given, block 0's
/// taps are appended to it.
pub fn dit_forward(
    x_t: &LatentVideo,
    cond: &ConditionEmbedding,
    t: f32,
    model: &Model,
    recorder: Option<&mut TapRecorder>,
    flops: &mut FlopTally,
) -> Result<DitOutput> {
    let b0 = forward_block0(x_t, cond, t, model, recorder.is_some(), flops)?;
    if let (Some(rec), Some(taps)) = (recorder, b0.taps) {
        rec.captured.push(taps);
    }
    let y_out = forward_rest(b0.hidden, cond, t, model, flops)?;
    let eps = unpatchify(&y_out, model, flops)?;
    Ok(DitOutput {
        eps,
        y_in: b0.y_in,
        y_out,
    })
}

/// Patchify + block 0 only, returning the requested tap.
pub fn block0_proxy(
    x_t: &LatentVideo,
    cond: &ConditionEmbedding,
    t: f32,
    tap: TapId,
    model: &Model,
    flops: &mut FlopTally,
) -> Result<Matrix> {
    let b0 = forward_block0(x_t, cond, t, model, true, flops)?;
    Ok(b0.taps.expect("recorded").into_tap(tap))
}
