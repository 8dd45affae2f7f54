//! Full-reference quality metrics between an accelerated run and its baseline.
//!
//! Latents are first mapped to RGB-like frames by a fixed seeded decoder:
//! every latent pixel becomes an `s×s` block of three channels through a
//! linear map followed by a sigmoid. PSNR uses peak 1 and caps identical
//! inputs at [`PSNR_CAP_DB`]. SSIM averages uniform 8×8 windows at stride 1
//! with population statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LatentVideo;
use crate::sampling::GenerationResult;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const RGB_CHANNELS: usize = 3;
pub const DEFAULT_UPSCALE: usize = 2;
/// Decoder seed used by the CLI, so latents from any run decode the same way.
pub const DEFAULT_DECODER_SEED: u64 = 0;

const DECODER_STREAM: u64 = 1;

/// Decoded frames, `[frames, 3, height, width]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl FrameStack {
    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::dim(
                format!("{len} values for shape {shape:?}"),
                data.len(),
            ));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument(format!(
                "frame value {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Every entry set to `value`, clamped to `[0, 1]`.
    pub fn filled(shape: [usize; 4], value: f32) -> Self {
        Self {
            shape,
            data: vec![value.clamp(0.0, 1.0); shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    fn plane(&self, idx: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        &self.data[idx * hw..(idx + 1) * hw]
    }

    fn check_same_shape(&self, other: &FrameStack) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(())
    }
}

/// Seeded stand-in for a VAE decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    latent_shape: [usize; 4],
    upscale: usize,
    /// `(3·s·s) × C`, row-major.
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Decoder {
    pub fn new(latent_shape: [usize; 4], upscale: usize, seed: u64) -> Result<Self> {
        if upscale == 0 {
            return Err(Error::Argument("decoder upscale must be at least 1".into()));
        }
        if latent_shape.contains(&0) {
            return Err(Error::Argument(format!(
                "degenerate latent shape {latent_shape:?}"
            )));
        }
        let c = latent_shape[1];
        let outputs = RGB_CHANNELS * upscale * upscale;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(DECODER_STREAM);
        let bound = 1.0 / (c as f32).sqrt();
        let weight = (0..outputs * c)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias = (0..outputs).map(|_| rng.gen_range(-0.5..0.5)).collect();
        Ok(Self {
            latent_shape,
            upscale,
            weight,
            bias,
        })
    }

    /// The decoder the CLI uses for a latent of this shape.
    pub fn standard(latent_shape: [usize; 4]) -> Result<Self> {
        Self::new(latent_shape, DEFAULT_UPSCALE, DEFAULT_DECODER_SEED)
    }

    pub fn frame_shape(&self) -> [usize; 4] {
        let [f, _, h, w] = self.latent_shape;
        [f, RGB_CHANNELS, h * self.upscale, w * self.upscale]
    }

    pub fn decode(&self, latent: &LatentVideo) -> Result<FrameStack> {
        if latent.shape() != self.latent_shape {
            return Err(Error::dim(
                format!("latent {:?}", self.latent_shape),
                format!("{:?}", latent.shape()),
            ));
        }
        let [f, c, h, w] = self.latent_shape;
        let s = self.upscale;
        let shape = self.frame_shape();
        let (oh, ow) = (shape[2], shape[3]);
        let mut data = vec![0.0f32; shape.iter().product()];
        let mut pixel = vec![0.0f32; c];
        for fi in 0..f {
            for hi in 0..h {
                for wi in 0..w {
                    for (ci, p) in pixel.iter_mut().enumerate() {
                        *p = latent.as_slice()[latent.index(fi, ci, hi, wi)];
                    }
                    for rgb in 0..RGB_CHANNELS {
                        for a in 0..s {
                            for b in 0..s {
                                let o = (rgb * s + a) * s + b;
                                let row = &self.weight[o * c..(o + 1) * c];
                                let z = self.bias[o]
                                    + row.iter().zip(&pixel).map(|(w, x)| w * x).sum::<f32>();
                                let y = hi * s + a;
                                let x = wi * s + b;
                                data[((fi * RGB_CHANNELS + rgb) * oh + y) * ow + x] = sigmoid(z);
                            }
                        }
                    }
                }
            }
        }
        Ok(FrameStack { shape, data })
    }
}

fn sigmoid(z: f32) -> f32 {
    // Clamped so saturation can never leave the unit interval through rounding.
    (1.0 / (1.0 + (-z).exp())).clamp(0.0, 1.0)
}

pub fn mse(a: &FrameStack, b: &FrameStack) -> Result<f64> {
    a.check_same_shape(b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &FrameStack, b: &FrameStack) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

pub fn ssim(a: &FrameStack, b: &FrameStack) -> Result<f64> {
    a.check_same_shape(b)?;
    let [f, c, h, w] = a.shape;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "frames of {h}x{w} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let planes = f * c;
    let total: f64 = (0..planes)
        .map(|p| plane_ssim(a.plane(p), b.plane(p), h, w))
        .sum();
    Ok(total / planes as f64)
}

fn plane_ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mu_a, mu_b) = (window_mean(a, w, y0, x0), window_mean(b, w, y0, x0));
            // Variances go through the covariance path so that identical
            // windows give bit-identical numerator and denominator.
            let var_a = window_cov(a, mu_a, a, mu_a, w, y0, x0);
            let var_b = window_cov(b, mu_b, b, mu_b, w, y0, x0);
            let cov_ab = window_cov(a, mu_a, b, mu_b, w, y0, x0);
            let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov_ab + SSIM_C2);
            let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            sum += num / den;
            count += 1;
        }
    }
    sum / count as f64
}

fn window_mean(img: &[f32], w: usize, y0: usize, x0: usize) -> f64 {
    let mut s = 0.0;
    for y in y0..y0 + SSIM_WINDOW {
        for v in &img[y * w + x0..y * w + x0 + SSIM_WINDOW] {
            s += f64::from(*v);
        }
    }
    s / (SSIM_WINDOW * SSIM_WINDOW) as f64
}

fn window_cov(p: &[f32], mp: f64, q: &[f32], mq: f64, w: usize, y0: usize, x0: usize) -> f64 {
    let mut s = 0.0;
    for y in y0..y0 + SSIM_WINDOW {
        let row = y * w + x0..y * w + x0 + SSIM_WINDOW;
        for (x, z) in p[row.clone()].iter().zip(&q[row]) {
            s += (f64::from(*x) - mp) * (f64::from(*z) - mq);
        }
    }
    s / (SSIM_WINDOW * SSIM_WINDOW) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub psnr_db: f64,
    pub ssim: f64,
    pub reuse_ratio: f64,
    /// Baseline FLOPs over accelerated FLOPs.
    pub flop_speedup: f64,
}

pub fn run_stats(
    fast: &GenerationResult,
    base: &GenerationResult,
    decoder: &Decoder,
) -> Result<RunStats> {
    if fast.prompt_id != base.prompt_id {
        return Err(Error::Argument(format!(
            "runs are for different prompts ({} vs {})",
            fast.prompt_id, base.prompt_id
        )));
    }
    if fast.n_steps != base.n_steps {
        return Err(Error::Argument(format!(
            "runs use different step counts ({} vs {})",
            fast.n_steps, base.n_steps
        )));
    }
    if fast.latent.shape() != base.latent.shape() {
        return Err(Error::Argument(format!(
            "runs have different latent shapes ({:?} vs {:?})",
            fast.latent.shape(),
            base.latent.shape()
        )));
    }
    let fast_flops = fast.flops.total();
    if fast_flops == 0 {
        return Err(Error::InvalidState(
            "accelerated run recorded no FLOPs".into(),
        ));
    }
    let fa = decoder.decode(&fast.latent)?;
    let fb = decoder.decode(&base.latent)?;
    Ok(RunStats {
        psnr_db: psnr(&fa, &fb)?,
        ssim: ssim(&fa, &fb)?,
        reuse_ratio: fast.reuse_ratio(),
        flop_speedup: base.flops.total() as f64 / fast_flops as f64,
    })
}
