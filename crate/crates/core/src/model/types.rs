use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Condition embeddings for prompt `p` come from stream `COND_STREAM_BASE + p`.
const COND_STREAM_BASE: u64 = 0x1000;

/// A latent video `(frames, channels, height, width)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl LatentVideo {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::dim(
                format!("{n} elements for shape {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Standard-normal draw; the initial noise of a generation.
    pub fn gaussian(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, f: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((f * cs + c) * hs + h) * ws + w
    }

    pub(crate) fn check_shape(&self, expected: [usize; 4]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::dim(
                format!("latent {expected:?}"),
                format!("{:?}", self.shape),
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Which point of the forward pass a token sequence represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    /// Patch-embedded input to the first block.
    Input,
    Intermediate,
    /// Output of the last block.
    Output,
    /// `y_out - y_in`.
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Matrix,
    pub role: TokenRole,
}

impl TokenSequence {
    pub fn new(tokens: Matrix, role: TokenRole) -> Self {
        Self { tokens, role }
    }

    pub fn rows(&self) -> usize {
        self.tokens.rows()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Text-embedding stand-in: `cond_tokens × cond_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub matrix: Matrix,
    pub is_null: bool,
}

impl ConditionEmbedding {
    /// The all-zero unconditional embedding.
    pub fn null(config: &ModelConfig) -> Self {
        Self {
            matrix: Matrix::zeros(config.cond_tokens, config.cond_dim),
            is_null: true,
        }
    }

    /// Seeded Gaussian embedding for an integer prompt id.
    pub fn for_prompt(config: &ModelConfig, prompt_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(COND_STREAM_BASE.wrapping_add(prompt_id));
        let n = config.cond_tokens * config.cond_dim;
        let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            matrix: Matrix::from_vec(config.cond_tokens, config.cond_dim, data).expect("sized"),
            is_null: false,
        }
    }
}
