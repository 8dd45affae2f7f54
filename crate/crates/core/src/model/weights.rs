use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::Result;
use crate::tensor::{Linear, Matrix};

/// RNG stream reserved for model parameters. Other consumers of the model
/// seed (condition embeddings, the frame decoder) use distinct streams.
pub(crate) const WEIGHT_STREAM: u64 = 0;

/// Number of AdaLN modulation vectors per block: shift/scale/gate for the
/// self-attention branch and for the MLP branch.
pub const MODULATION_CHUNKS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub qkv: Linear,
    pub attn_out: Linear,
    pub cross_q: Linear,
    pub cross_kv: Linear,
    pub cross_out: Linear,
    pub mlp_up: Linear,
    pub mlp_down: Linear,
    pub norm_attn: Vec<f32>,
    pub norm_cross: Vec<f32>,
    pub norm_mlp: Vec<f32>,
    /// Timestep embedding → `[shift_attn, scale_attn, gate_attn, shift_mlp, scale_mlp, gate_mlp]`.
    pub modulation: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiTWeights {
    pub patch_embed: Linear,
    pub blocks: Vec<BlockWeights>,
    pub unpatchify: Linear,
}

impl DiTWeights {
    pub fn all_finite(&self) -> bool {
        let lin = |l: &Linear| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite());
        lin(&self.patch_embed)
            && lin(&self.unpatchify)
            && self.blocks.iter().all(|b| {
                [&b.qkv, &b.attn_out, &b.cross_q, &b.cross_kv, &b.cross_out]
                    .into_iter()
                    .chain([&b.mlp_up, &b.mlp_down, &b.modulation])
                    .all(lin)
            })
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform_linear(&mut self, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let w: Vec<f32> = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        let bias = (0..fan_out)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        Linear {
            weight: Matrix::from_vec(fan_in, fan_out, w).expect("sized above"),
            bias,
        }
    }

    /// Modulation map whose bias yields shift = 0, scale = 0, gate = 1, so a
    /// zero timestep embedding leaves both branches unmodulated.
    fn modulation(&mut self, hidden: usize) -> Linear {
        let mut lin = self.uniform_linear(hidden, MODULATION_CHUNKS * hidden);
        for (i, b) in lin.bias.iter_mut().enumerate() {
            let chunk = i / hidden;
            *b = if chunk == 2 || chunk == 5 { 1.0 } else { 0.0 };
        }
        lin
    }
}

/// Deterministic parameter initialization from `(config, config.seed)`.
pub fn init_weights(config: &ModelConfig) -> Result<DiTWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(WEIGHT_STREAM);
    let mut init = Init { rng };

    let d = config.hidden_dim;
    let m = config.mlp_hidden()?;
    let patch_embed = init.uniform_linear(config.patch_dim(), d);
    let blocks = (0..config.n_blocks)
        .map(|_| BlockWeights {
            qkv: init.uniform_linear(d, 3 * d),
            attn_out: init.uniform_linear(d, d),
            cross_q: init.uniform_linear(d, d),
            cross_kv: init.uniform_linear(config.cond_dim, 2 * d),
            cross_out: init.uniform_linear(d, d),
            mlp_up: init.uniform_linear(d, m),
            mlp_down: init.uniform_linear(m, d),
            norm_attn: vec![1.0; d],
            norm_cross: vec![1.0; d],
            norm_mlp: vec![1.0; d],
            modulation: init.modulation(d),
        })
        .collect();
    let unpatchify = init.uniform_linear(d, config.patch_dim());
    Ok(DiTWeights {
        patch_embed,
        blocks,
        unpatchify,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let c = ModelConfig::default();
        let a = init_weights(&c).unwrap();
        let b = init_weights(&c).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
    }

    #[test]
    fn different_seed_differs() {
        let a = init_weights(&ModelConfig {
            seed: 0,
            ..Default::default()
        })
        .unwrap();
        let b = init_weights(&ModelConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn invalid_config_is_a_configuration_error() {
        let c = ModelConfig {
            hidden_dim: 6,
            n_heads: 4,
            ..Default::default()
        };
        assert!(matches!(init_weights(&c), Err(Error::Config(_))));
    }

    #[test]
    fn weights_respect_fan_in_bound() {
        let c = ModelConfig::default();
        let w = init_weights(&c).unwrap();
        let bound = 1.0 / (c.hidden_dim as f32).sqrt();
        assert!(w.blocks[0]
            .qkv
            .weight
            .as_slice()
            .iter()
            .all(|v| v.abs() <= bound));
    }
}
