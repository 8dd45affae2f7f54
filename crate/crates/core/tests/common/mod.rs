//! Shared helpers for integration tests: a from-primitives reference loop
//! that the library's `generate` is checked against.

#![allow(dead_code)]

use dit_reuse::model::{
    dit_forward, patchify, unpatchify, ConditionEmbedding, LatentVideo, Model, ModelConfig, TapId,
    TapRecorder, TokenRole, TokenSequence,
};
use dit_reuse::sampling::{cfg_combine, sampler_step, SchedulerConfig};
use dit_reuse::tensor::{FlopTally, Matrix};

pub fn model(cfg: ModelConfig) -> Model {
    Model::new(cfg).expect("valid model config")
}

pub fn default_model() -> Model {
    model(ModelConfig::default())
}

pub fn sched(n_steps: usize) -> SchedulerConfig {
    SchedulerConfig {
        n_steps,
        ..SchedulerConfig::default()
    }
}

pub fn bits(l: &LatentVideo) -> Vec<u32> {
    l.as_slice().iter().map(|v| v.to_bits()).collect()
}

/// What the reference loop observed at one step.
pub struct RefStep {
    pub proxies: Vec<Matrix>,
}

/// Denoise with full `dit_forward` passes, except on steps where `reuse(step)`
/// holds: there both passes output `unpatchify(patchify(x) + y_out_S − y_in_S)`
/// with `S` the last computed step. Returns the final latent and the
/// conditional block-0 taps requested in `taps` for every step.
pub fn reference_run(
    prompt_id: u64,
    model: &Model,
    sched: &SchedulerConfig,
    reuse: impl Fn(usize) -> bool,
    taps: &[TapId],
) -> (LatentVideo, Vec<RefStep>) {
    let ts = sched.timesteps();
    let cond = ConditionEmbedding::for_prompt(&model.config, prompt_id);
    let null = ConditionEmbedding::null(&model.config);
    let mut x = sched.initial_noise(prompt_id, model.config.latent_shape);
    let mut cached: Option<(Matrix, Matrix)> = None;
    let mut steps = Vec::new();
    let mut f = FlopTally::default();

    for step in 1..=sched.n_steps {
        let t = ts[step - 1];
        let mut rec = TapRecorder::default();
        let (eps_c, eps_u) = if reuse(step) {
            let (res_c, res_u) = cached.as_ref().expect("a computed step precedes any reuse");
            // Still run the conditional forward, only for its taps.
            dit_forward(&x, &cond, t, model, Some(&mut rec), &mut f).unwrap();
            let y_in = patchify(&x, model, &mut f).unwrap().tokens;
            let out = |res: &Matrix| {
                let sum: Vec<f32> = y_in
                    .as_slice()
                    .iter()
                    .zip(res.as_slice())
                    .map(|(a, b)| a + b)
                    .collect();
                let tokens = Matrix::from_vec(y_in.rows(), y_in.cols(), sum).unwrap();
                unpatchify(
                    &TokenSequence::new(tokens, TokenRole::Output),
                    model,
                    &mut FlopTally::default(),
                )
                .unwrap()
            };
            (out(res_c), out(res_u))
        } else {
            let c = dit_forward(&x, &cond, t, model, Some(&mut rec), &mut f).unwrap();
            let u = dit_forward(&x, &null, t, model, None, &mut f).unwrap();
            let res = |y_out: &TokenSequence, y_in: &TokenSequence| {
                let d: Vec<f32> = y_out
                    .tokens
                    .as_slice()
                    .iter()
                    .zip(y_in.tokens.as_slice())
                    .map(|(o, i)| o - i)
                    .collect();
                Matrix::from_vec(y_in.tokens.rows(), y_in.tokens.cols(), d).unwrap()
            };
            cached = Some((res(&c.y_out, &c.y_in), res(&u.y_out, &u.y_in)));
            (c.eps, u.eps)
        };
        let set = rec.captured.pop().expect("block-0 taps");
        steps.push(RefStep {
            proxies: taps.iter().map(|&tap| set.get(tap).clone()).collect(),
        });
        let eps = cfg_combine(&eps_c, &eps_u, sched.guidance_scale).unwrap();
        x = sampler_step(&eps, &x, step, sched).unwrap();
    }
    (x, steps)
}

/// `Σ|prev − curr| / max(Σ|curr|, 1e-12)` accumulated in f64.
pub fn rel_l1(prev: &Matrix, curr: &Matrix) -> f64 {
    let num: f64 = prev
        .as_slice()
        .iter()
        .zip(curr.as_slice())
        .map(|(a, b)| f64::from((a - b).abs()))
        .sum();
    let den: f64 = curr.as_slice().iter().map(|v| f64::from(v.abs())).sum();
    num / den.max(1e-12)
}
