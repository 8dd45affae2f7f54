//! Rectified-flow schedule, guidance combination, and the denoising loop
//! with proxy-driven step reuse.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::{oracle_value, FlopCounter, Phase, StepKind, StepTrace};
use crate::model::{
    dit_forward, forward_block0, forward_rest, unpatchify, ConditionEmbedding, LatentVideo, Model,
    TapId, TapMap, TokenSequence,
};
use crate::reuse::{relative_l1, Pass, ReuseConfig, ReuseMode, ReuseState, DEFAULT_NORM_EPSILON};
use crate::tensor::{FlopTally, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default = "default_guidance")]
    pub guidance_scale: f32,
    /// Seed of the initial noise; prompt `p` draws from stream `p`.
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    50
}

fn default_guidance() -> f32 {
    5.0
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            n_steps: default_steps(),
            guidance_scale: default_guidance(),
            seed: 0,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(Error::Config(format!(
                "n_steps must be >= 2, got {}",
                self.n_steps
            )));
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::Config(format!(
                "guidance_scale must be a non-negative finite number, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }

    /// `t_1 = 1 > t_2 > … > t_N > t_{N+1} = 0`, evenly spaced. Index 0 is step 1.
    pub fn timesteps(&self) -> Vec<f32> {
        let n = self.n_steps;
        (0..=n)
            .map(|i| (1.0 - i as f64 / n as f64) as f32)
            .collect()
    }

    pub fn initial_noise(&self, prompt_id: u64, shape: [usize; 4]) -> LatentVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(prompt_id);
        LatentVideo::gaussian(shape, &mut rng)
    }
}

/// Classifier-free guidance, `(1+g)·ε_c − g·ε_u`, evaluated as
/// `ε_c + g·(ε_c − ε_u)` so that `g = 0` and `ε_c = ε_u` return `ε_c` exactly.
pub fn cfg_combine(
    eps_cond: &LatentVideo,
    eps_uncond: &LatentVideo,
    g: f32,
) -> Result<LatentVideo> {
    eps_uncond.check_shape(eps_cond.shape())?;
    let data = eps_cond
        .as_slice()
        .iter()
        .zip(eps_uncond.as_slice())
        .map(|(c, u)| c + g * (c - u))
        .collect();
    LatentVideo::from_vec(eps_cond.shape(), data)
}

/// Euler step `x + (t_{S+1} − t_S)·v` for 1-based `step`.
pub fn sampler_step(
    eps_bar: &LatentVideo,
    x_t: &LatentVideo,
    step: usize,
    sched: &SchedulerConfig,
) -> Result<LatentVideo> {
    if step == 0 || step > sched.n_steps {
        return Err(Error::Argument(format!(
            "step {step} outside 1..={}",
            sched.n_steps
        )));
    }
    eps_bar.check_shape(x_t.shape())?;
    let ts = sched.timesteps();
    let dt = ts[step] - ts[step - 1];
    let data = x_t
        .as_slice()
        .iter()
        .zip(eps_bar.as_slice())
        .map(|(x, v)| x + dt * v)
        .collect();
    LatentVideo::from_vec(x_t.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Computed,
    Reused,
}

/// What happened at one denoising step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f32,
    pub cond: Decision,
    pub uncond: Decision,
    /// Accumulated reuse metric driving the conditional decision.
    pub metric_cond: Option<f64>,
    /// Independent mode only.
    pub metric_uncond: Option<f64>,
    /// Tensors retained by the (conditional) controller at the end of the step.
    pub cache_tensors: usize,
    pub cache_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub prompt_id: u64,
    pub n_steps: usize,
    pub reuse: Option<ReuseConfig>,
    pub latent: LatentVideo,
    pub steps: Vec<StepRecord>,
    pub flops: FlopCounter,
    pub traces: Option<Vec<StepTrace>>,
}

impl GenerationResult {
    pub fn cond_log(&self) -> Vec<Decision> {
        self.steps.iter().map(|s| s.cond).collect()
    }

    pub fn uncond_log(&self) -> Vec<Decision> {
        self.steps.iter().map(|s| s.uncond).collect()
    }

    /// Reused pass-steps over all pass-steps. Equals reused steps / `n_steps`
    /// when the passes are aligned.
    pub fn reuse_ratio(&self) -> f64 {
        let reused = self
            .steps
            .iter()
            .map(|s| {
                (s.cond == Decision::Reused) as usize + (s.uncond == Decision::Reused) as usize
            })
            .sum::<usize>();
        reused as f64 / (2 * self.n_steps) as f64
    }

    /// Steps where both passes were served from cache.
    pub fn reused_steps(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| s.cond == Decision::Reused && s.uncond == Decision::Reused)
            .map(|s| s.step)
            .collect()
    }
}

/// Full-compute run with no reuse.
pub fn generate_baseline(
    prompt_id: u64,
    model: &Model,
    sched: &SchedulerConfig,
) -> Result<GenerationResult> {
    run(prompt_id, model, sched, None, false)
}

/// Run the denoising loop. With `reuse = None` every step is computed.
pub fn generate(
    prompt_id: u64,
    model: &Model,
    sched: &SchedulerConfig,
    reuse: Option<&ReuseConfig>,
) -> Result<GenerationResult> {
    run(prompt_id, model, sched, reuse, false)
}

/// Full-compute run that also records oracle and candidate metrics per step.
pub fn generate_traced(
    prompt_id: u64,
    model: &Model,
    sched: &SchedulerConfig,
) -> Result<GenerationResult> {
    run(prompt_id, model, sched, None, true)
}

#[derive(Default)]
struct TraceRecorder {
    prev_residual: Option<Matrix>,
    prev_taps: Option<TapMap<Matrix>>,
    out: Vec<StepTrace>,
}

impl TraceRecorder {
    fn record(&mut self, step: usize, residual: Matrix, taps: TapMap<Matrix>) -> Result<()> {
        let eps = DEFAULT_NORM_EPSILON;
        let oracle = match &self.prev_residual {
            Some(prev) => Some(oracle_value(&residual, prev, eps)?),
            None => None,
        };
        let mut metrics = [None; 8];
        if let Some(prev) = &self.prev_taps {
            for tap in TapId::ALL {
                metrics[tap.index()] = Some(relative_l1(prev.get(tap), taps.get(tap), eps)?);
            }
        }
        self.out.push(StepTrace {
            step,
            oracle,
            candidate_metrics: TapMap(metrics),
            residual_l1: residual.l1_norm(),
            proxy_l1: TapMap::from_fn(|i| taps.0[i].l1_norm()),
        });
        self.prev_residual = Some(residual);
        self.prev_taps = Some(taps);
        Ok(())
    }
}

/// Per-pass controller for a single guidance pass.
struct PassOutcome {
    eps: LatentVideo,
    decision: Decision,
    metric: Option<f64>,
}

fn run(
    prompt_id: u64,
    model: &Model,
    sched: &SchedulerConfig,
    reuse: Option<&ReuseConfig>,
    trace: bool,
) -> Result<GenerationResult> {
    model.config.validate()?;
    sched.validate()?;
    if let Some(r) = reuse {
        r.validate()?;
        if trace {
            return Err(Error::Argument(
                "tracing requires a full-compute run".into(),
            ));
        }
    }
    let n = sched.n_steps;
    let ts = sched.timesteps();
    let cond = ConditionEmbedding::for_prompt(&model.config, prompt_id);
    let null = ConditionEmbedding::null(&model.config);
    let mut x = sched.initial_noise(prompt_id, model.config.latent_shape);

    let mut state = ReuseState::new();
    let mut state_uncond = ReuseState::new();
    let mut tracer = trace.then(TraceRecorder::default);
    let mut flops = FlopCounter::new();
    let mut steps = Vec::with_capacity(n);

    for step in 1..=n {
        let t = ts[step - 1];
        let wrap = |e: Error| e.at_step(step);

        let mut f_block0 = FlopTally::default();
        let mut f_cond = FlopTally::default();
        let mut f_uncond = FlopTally::default();
        let mut f_unpatch = FlopTally::default();

        // Conditional prefix: patchify + block 0, shared with the full pass.
        let record_taps = reuse.is_some() || trace;
        let b0 = forward_block0(&x, &cond, t, model, record_taps, &mut f_block0).map_err(wrap)?;

        let (cond_out, uncond_out) = match reuse {
            None => {
                let y_out = forward_rest(b0.hidden, &cond, t, model, &mut f_cond).map_err(wrap)?;
                let eps_c = unpatchify(&y_out, model, &mut f_cond).map_err(wrap)?;
                let out_u = dit_forward(&x, &null, t, model, None, &mut f_uncond).map_err(wrap)?;
                if let Some(tr) = tracer.as_mut() {
                    let residual = y_out.tokens.sub(&b0.y_in.tokens)?;
                    let taps = b0.taps.expect("taps recorded when tracing").taps;
                    tr.record(step, residual, taps)?;
                }
                (
                    PassOutcome {
                        eps: eps_c,
                        decision: Decision::Computed,
                        metric: None,
                    },
                    PassOutcome {
                        eps: out_u.eps,
                        decision: Decision::Computed,
                        metric: None,
                    },
                )
            }
            Some(rc) if rc.mode == ReuseMode::Aligned => {
                let proxy = b0.taps.expect("taps recorded").into_tap(rc.proxy_tap);
                state.set_current_input(b0.y_in.clone());
                let d = state.update_and_decide(proxy, step, n, rc).map_err(wrap)?;
                if d.use_cache {
                    let eps_c =
                        unpatchify(&state.cached_output(Pass::Cond)?, model, &mut f_unpatch)?;
                    let eps_u =
                        unpatchify(&state.cached_output(Pass::Uncond)?, model, &mut f_unpatch)?;
                    let metric = Some(d.metric_value);
                    (
                        PassOutcome {
                            eps: eps_c,
                            decision: Decision::Reused,
                            metric,
                        },
                        PassOutcome {
                            eps: eps_u,
                            decision: Decision::Reused,
                            metric: None,
                        },
                    )
                } else {
                    let y_out =
                        forward_rest(b0.hidden, &cond, t, model, &mut f_cond).map_err(wrap)?;
                    let eps_c = unpatchify(&y_out, model, &mut f_cond).map_err(wrap)?;
                    let out_u =
                        dit_forward(&x, &null, t, model, None, &mut f_uncond).map_err(wrap)?;
                    state.store_residuals(&b0.y_in, &y_out, &out_u.y_in, &out_u.y_out)?;
                    (
                        PassOutcome {
                            eps: eps_c,
                            decision: Decision::Computed,
                            metric: Some(d.metric_value),
                        },
                        PassOutcome {
                            eps: out_u.eps,
                            decision: Decision::Computed,
                            metric: None,
                        },
                    )
                }
            }
            Some(rc) => {
                let cond_out = independent_pass(
                    &mut state,
                    Pass::Cond,
                    b0,
                    &cond,
                    t,
                    step,
                    n,
                    rc,
                    model,
                    &mut f_cond,
                    &mut f_unpatch,
                )
                .map_err(wrap)?;
                let b0u = forward_block0(&x, &null, t, model, true, &mut f_uncond).map_err(wrap)?;
                let uncond_out = independent_pass(
                    &mut state_uncond,
                    Pass::Uncond,
                    b0u,
                    &null,
                    t,
                    step,
                    n,
                    rc,
                    model,
                    &mut f_uncond,
                    &mut f_unpatch,
                )
                .map_err(wrap)?;
                (cond_out, uncond_out)
            }
        };

        let eps_bar = cfg_combine(&cond_out.eps, &uncond_out.eps, sched.guidance_scale)?;
        x = sampler_step(&eps_bar, &x, step, sched)?;
        if !x.is_finite() {
            return Err(Error::Numeric {
                step: Some(step),
                what: "non-finite latent".into(),
            });
        }

        let kind = match (cond_out.decision, uncond_out.decision) {
            (Decision::Computed, Decision::Computed) => StepKind::Computed,
            (Decision::Reused, Decision::Reused) => StepKind::Reused,
            _ => StepKind::Mixed,
        };
        flops.record_step(
            step,
            kind,
            &[
                (Phase::Block0, f_block0),
                (Phase::FullPassCond, f_cond),
                (Phase::FullPassUncond, f_uncond),
                (Phase::Unpatchify, f_unpatch),
                (Phase::Sampler, FlopTally::default()),
            ],
        );
        steps.push(StepRecord {
            step,
            t,
            cond: cond_out.decision,
            uncond: uncond_out.decision,
            metric_cond: cond_out.metric,
            metric_uncond: uncond_out.metric,
            cache_tensors: state.retained_tensors(),
            cache_bytes: state.memory_footprint(std::mem::size_of::<f32>()),
        });
    }

    Ok(GenerationResult {
        prompt_id,
        n_steps: n,
        reuse: reuse.cloned(),
        latent: x,
        steps,
        flops,
        traces: tracer.map(|t| t.out),
    })
}

/// One guidance pass deciding on its own proxy (ablation mode).
#[allow(clippy::too_many_arguments)]
fn independent_pass(
    state: &mut ReuseState,
    pass: Pass,
    b0: crate::model::BlockZero,
    cond: &ConditionEmbedding,
    t: f32,
    step: usize,
    n: usize,
    rc: &ReuseConfig,
    model: &Model,
    f_full: &mut FlopTally,
    f_unpatch: &mut FlopTally,
) -> Result<PassOutcome> {
    let proxy = b0.taps.expect("taps recorded").into_tap(rc.proxy_tap);
    state.set_current_input(b0.y_in.clone());
    let d = state.update_and_decide(proxy, step, n, rc)?;
    if d.use_cache {
        let eps = unpatchify(&state.cached_output(pass)?, model, f_unpatch)?;
        return Ok(PassOutcome {
            eps,
            decision: Decision::Reused,
            metric: Some(d.metric_value),
        });
    }
    let y_out: TokenSequence = forward_rest(b0.hidden, cond, t, model, f_full)?;
    let eps = unpatchify(&y_out, model, f_full)?;
    state.store_residual(pass, &b0.y_in, &y_out)?;
    Ok(PassOutcome {
        eps,
        decision: Decision::Computed,
        metric: Some(d.metric_value),
    })
}
