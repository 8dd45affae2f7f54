use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy diffusion transformer and its latent video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    /// MLP expansion; `hidden_dim * mlp_ratio` must be a whole number.
    pub mlp_ratio: f64,
    /// Patch extent along (frames, height, width).
    pub patch: [usize; 3],
    /// Latent extent (frames, channels, height, width).
    pub latent_shape: [usize; 4],
    pub cond_dim: usize,
    pub cond_tokens: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 8,
            hidden_dim: 64,
            n_heads: 4,
            mlp_ratio: 4.0,
            patch: [1, 2, 2],
            latent_shape: [4, 8, 8, 8],
            cond_dim: 32,
            cond_tokens: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_blocks", self.n_blocks),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("cond_dim", self.cond_dim),
            ("cond_tokens", self.cond_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.patch.contains(&0) || self.latent_shape.contains(&0) {
            return Err(Error::Config(
                "patch and latent extents must be positive".into(),
            ));
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        let [f, _, h, w] = self.latent_shape;
        let [pf, ph, pw] = self.patch;
        if f % pf != 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::Config(format!(
                "patch {:?} does not tile latent {:?}",
                self.patch, self.latent_shape
            )));
        }
        if self.token_count() < 2 {
            return Err(Error::Config("token count must be at least 2".into()));
        }
        self.mlp_hidden()?;
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        let [f, _, h, w] = self.latent_shape;
        let [pf, ph, pw] = self.patch;
        (f / pf) * (h / ph) * (w / pw)
    }

    /// Number of latent scalars folded into one token.
    pub fn patch_dim(&self) -> usize {
        let [pf, ph, pw] = self.patch;
        self.latent_shape[1] * pf * ph * pw
    }

    pub fn latent_len(&self) -> usize {
        self.latent_shape.iter().product()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn mlp_hidden(&self) -> Result<usize> {
        let width = self.hidden_dim as f64 * self.mlp_ratio;
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 || width.fract() != 0.0 || width < 1.0 {
            return Err(Error::Config(format!(
                "mlp_ratio {} does not give a whole MLP width for hidden_dim {}",
                self.mlp_ratio, self.hidden_dim
            )));
        }
        Ok(width as usize)
    }
}
