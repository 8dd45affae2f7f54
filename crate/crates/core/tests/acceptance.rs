//! Acceptance suite. Runs without the libtest harness and prints one
//! `[PASS]`/`[FAIL]` line per criterion; exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::{bits, default_model, model, reference_run, sched};
use dit_reuse::harness::{replay_reuse_ratios, DEFAULT_PROXY_TAP, DEFAULT_THRESHOLDS};
use dit_reuse::instrument::{flops_report, record_trace, StepTrace};
use dit_reuse::model::{
    dit_forward, patchify, unpatchify, ConditionEmbedding, LatentVideo, Model, ModelConfig, TapId,
    TapMap, TokenRole, TokenSequence,
};
use dit_reuse::quality::{psnr, run_stats, ssim, Decoder, FrameStack};
use dit_reuse::reuse::{warmup_steps, Pass, ReuseConfig, ReuseMode, ReuseState};
use dit_reuse::sampling::{
    cfg_combine, generate, sampler_step, Decision, GenerationResult, SchedulerConfig,
};
use dit_reuse::selection::{select_proxy, spearman_rho};
use dit_reuse::tensor::{FlopTally, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

const PROMPTS: u64 = 8;
const N_STEPS: usize = 50;
/// Condition-dependent tap for the independent-mode half of the grid; the
/// default proxy sits before cross-attention, where both passes agree.
const INDEPENDENT_TAP: TapId = TapId::CrossAttnOut;

fn grid_thresholds() -> Vec<f64> {
    let mut t = DEFAULT_THRESHOLDS.to_vec();
    t.push(f64::INFINITY);
    t
}

struct GridRun {
    mode: ReuseMode,
    threshold: f64,
    result: GenerationResult,
}

struct PromptGrid {
    prompt: u64,
    baseline: GenerationResult,
    trace: Vec<StepTrace>,
    runs: Vec<GridRun>,
}

/// Every prompt under every threshold in both modes, plus a no-controller
/// baseline and a full-compute trace per prompt.
fn build_grid(m: &Model, s: &SchedulerConfig) -> Result<Vec<PromptGrid>, String> {
    (0..PROMPTS)
        .map(|p| {
            let baseline = ok(generate(p, m, s, None))?;
            let trace = ok(record_trace(p, m, s))?;
            let mut runs = Vec::new();
            for (mode, tap) in [
                (ReuseMode::Aligned, DEFAULT_PROXY_TAP),
                (ReuseMode::Independent, INDEPENDENT_TAP),
            ] {
                for threshold in grid_thresholds() {
                    let rc = ReuseConfig::new(threshold, tap, mode);
                    runs.push(GridRun {
                        mode,
                        threshold,
                        result: ok(generate(p, m, s, Some(&rc)))?,
                    });
                }
            }
            Ok(PromptGrid {
                prompt: p,
                baseline,
                trace,
                runs,
            })
        })
        .collect()
}

fn c1_baseline_equivalence(grid: &[PromptGrid]) -> Outcome {
    let mut checked = 0;
    for g in grid {
        for r in g.runs.iter().filter(|r| r.threshold == 0.0) {
            ensure!(
                bits(&r.result.latent) == bits(&g.baseline.latent),
                "prompt {} {} threshold 0 differs from the no-controller run",
                g.prompt,
                r.mode
            );
            ensure!(
                r.result.reused_steps().is_empty(),
                "prompt {} reused at threshold 0",
                g.prompt
            );
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} threshold-0 runs over {} prompts bitwise equal to no reuse",
        grid.len()
    ))
}

fn c2_guidance_alignment(grid: &[PromptGrid]) -> Outcome {
    let mut runs = 0;
    let mut reused = 0;
    for g in grid {
        for r in g.runs.iter().filter(|r| r.mode == ReuseMode::Aligned) {
            for st in &r.result.steps {
                ensure!(
                    st.cond == st.uncond,
                    "prompt {} threshold {}: step {} cond {:?} uncond {:?}",
                    g.prompt,
                    r.threshold,
                    st.step,
                    st.cond,
                    st.uncond
                );
            }
            reused += r.result.reused_steps().len();
            runs += 1;
        }
    }
    Ok(format!(
        "{runs} aligned runs, identical logs at every step ({reused} reused steps)"
    ))
}

fn c3_warmup_exclusion(grid: &[PromptGrid]) -> Outcome {
    let w = warmup_steps(0.2, N_STEPS);
    ensure!(w == 10, "ceil(0.2*{N_STEPS}) computed as {w}");
    let mut runs = 0;
    for g in grid {
        for r in &g.runs {
            let early = r
                .result
                .steps
                .iter()
                .filter(|st| {
                    st.step <= w && (st.cond == Decision::Reused || st.uncond == Decision::Reused)
                })
                .count();
            ensure!(
                early == 0,
                "prompt {} {} threshold {}: {early} reuses in warmup",
                g.prompt,
                r.mode,
                r.threshold
            );
            if r.threshold.is_infinite() {
                ensure!(
                    r.result
                        .steps
                        .iter()
                        .all(|st| (st.step > w) == (st.cond == Decision::Reused)),
                    "threshold inf must reuse exactly the steps after warmup"
                );
            }
            runs += 1;
        }
    }
    Ok(format!(
        "{runs} runs (both modes, thresholds incl. inf): no reuse at steps <= {w}"
    ))
}

fn c4_cache_exactness() -> Outcome {
    let m = default_model();
    let s = sched(10);
    let w = warmup_steps(0.2, s.n_steps);

    // Whole trajectory: every post-warmup step reused from the step-w residuals.
    let rc = ReuseConfig::new(f64::INFINITY, DEFAULT_PROXY_TAP, ReuseMode::Aligned);
    let lib = ok(generate(3, &m, &s, Some(&rc)))?;
    let (reference, _) = reference_run(3, &m, &s, |step| step > w, &[]);
    ensure!(
        bits(&lib.latent) == bits(&reference),
        "forced-reuse trajectory differs from the reference loop"
    );

    // Single step: controller output vs elementwise y_in + (y_out - y_in).
    let ts = s.timesteps();
    let cond = ConditionEmbedding::for_prompt(&m.config, 3);
    let null = ConditionEmbedding::null(&m.config);
    let x0 = s.initial_noise(3, m.config.latent_shape);
    let mut f = FlopTally::default();
    let c = ok(dit_forward(&x0, &cond, ts[0], &m, None, &mut f))?;
    let u = ok(dit_forward(&x0, &null, ts[0], &m, None, &mut f))?;
    let mut state = ReuseState::new();
    ok(state.store_residuals(&c.y_in, &c.y_out, &u.y_in, &u.y_out))?;
    let eps = ok(cfg_combine(&c.eps, &u.eps, s.guidance_scale))?;
    let x1 = ok(sampler_step(&eps, &x0, 1, &s))?;
    state.set_current_input(ok(patchify(&x1, &m, &mut f))?);

    let next_in = ok(dit_forward(&x1, &cond, ts[1], &m, None, &mut f))?
        .y_in
        .tokens;
    for (pass, out) in [(Pass::Cond, &c), (Pass::Uncond, &u)] {
        let got = ok(state.cached_output(pass))?;
        let got = ok(unpatchify(&got, &m, &mut f))?;
        let expect: Vec<f32> = next_in
            .as_slice()
            .iter()
            .zip(
                out.y_out
                    .tokens
                    .as_slice()
                    .iter()
                    .zip(out.y_in.tokens.as_slice()),
            )
            .map(|(x, (o, i))| x + (o - i))
            .collect();
        let expect = ok(Matrix::from_vec(next_in.rows(), next_in.cols(), expect))?;
        let expect = ok(unpatchify(
            &TokenSequence::new(expect, TokenRole::Output),
            &m,
            &mut f,
        ))?;
        ensure!(
            bits(&got) == bits(&expect),
            "{pass:?} cached output differs from unpatchify(y_in + res)"
        );
    }
    Ok(format!("{} reused steps bitwise equal to the reference loop; single-step check exact for both passes", s.n_steps - w))
}

/// Average 1-based ranks with ties sharing the mean of their positions.
fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn oracle_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn c5_spearman() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 50usize;
    let m = (n * (n * n - 1)) as i64;
    let mut max_delta: f64 = 0.0;
    let (mut tie_free, mut exact_closed, mut literal_match) = (0, 0, 0);
    for pair in 0..1000 {
        let ties = pair < 100;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if ties {
                        rng.gen_range(0..8) as f64
                    } else {
                        rng.gen_range(-1.0..1.0)
                    }
                })
                .collect()
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let (ra, rb) = (oracle_ranks(&a), oracle_ranks(&b));
        let want = oracle_pearson(&ra, &rb);
        let got = ok(spearman_rho(&a, &b))?;
        max_delta = max_delta.max((got - want).abs());
        ensure!(
            (got - want).abs() < 1e-12,
            "pair {pair}: {got} vs oracle {want}"
        );

        let has_ties = ra.iter().chain(&rb).any(|r| r.fract() != 0.0);
        ensure!(
            has_ties == ties || !ties,
            "pair {pair}: unexpected tie in continuous draw"
        );
        if !has_ties {
            tie_free += 1;
            let d: i64 = ra
                .iter()
                .zip(&rb)
                .map(|(x, y)| (*x as i64 - *y as i64).pow(2))
                .sum();
            // 1 - 6D/M with the integer numerator formed exactly, rounded once.
            let closed = (m - 6 * d) as f64 / m as f64;
            ensure!(
                got.to_bits() == closed.to_bits(),
                "pair {pair}: {got:e} vs closed form {closed:e}"
            );
            exact_closed += 1;
            let literal = 1.0 - 6.0 * d as f64 / m as f64;
            literal_match += (literal.to_bits() == got.to_bits()) as usize;
        }
    }
    Ok(format!(
        "1000 pairs (100 tied), max |delta rho| = {max_delta:.1e}; closed form exact on {exact_closed}/{tie_free} tie-free pairs \
         (naive f64 evaluation 1.0-6.0*D/M agrees bitwise on {literal_match})"
    ))
}

/// Traces whose tap 3 metric is `exp(oracle)`, tap 8 `-oracle`, others noise.
fn monotone_traces(rng: &mut ChaCha8Rng, prompts: usize, n: usize) -> Vec<Vec<StepTrace>> {
    (0..prompts)
        .map(|_| {
            (1..=n)
                .map(|step| {
                    let oracle = (step > 1).then(|| rng.gen_range(0.0..1.0));
                    let noise: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
                    let candidate_metrics = TapMap::from_fn(|k| {
                        oracle.map(|o: f64| match k {
                            2 => o.exp(),
                            7 => -o,
                            _ => noise[k],
                        })
                    });
                    StepTrace {
                        step,
                        oracle,
                        candidate_metrics,
                        residual_l1: 1.0,
                        proxy_l1: TapMap::from_fn(|_| 1.0),
                    }
                })
                .collect()
        })
        .collect()
}

fn c6_selection_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let traces = monotone_traces(&mut rng, 5, 30);
    for exclude in [false, true] {
        let r = ok(select_proxy(&traces, exclude))?;
        ensure!(
            r.selected == TapId::AttnOut,
            "selected {} (exclude_warmup {exclude})",
            r.selected
        );
        let up = r.stats(TapId::AttnOut).mean_rho;
        let down = r.stats(TapId::BlockOut).mean_rho;
        ensure!(up == Some(1.0), "monotone tap mean rho {up:?}");
        ensure!(down == Some(-1.0), "reversed tap mean rho {down:?}");
    }
    Ok("increasing transform selected with mean rho = 1.0; reversed tap -1.0 (both warmup settings)".into())
}

fn c7_warmup_effect() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 20;
    let w = warmup_steps(0.2, n);
    let traces: Vec<Vec<StepTrace>> = (0..4)
        .map(|_| {
            (1..=n)
                .map(|step| {
                    let oracle = (step > 1).then(|| {
                        if step <= w {
                            // Early steps change the most...
                            5.0 + rng.gen_range(0.0..1.0)
                        } else {
                            rng.gen_range(0.0..1.0)
                        }
                    });
                    let candidate_metrics = TapMap::from_fn(|k| {
                        oracle.map(|o| match k {
                            // ...but the affected proxy barely moves there.
                            4 if step <= w => -o,
                            4 => o,
                            _ => ((step * 7 + k * 3) % 11) as f64,
                        })
                    });
                    StepTrace {
                        step,
                        oracle,
                        candidate_metrics,
                        residual_l1: 1.0,
                        proxy_l1: TapMap::from_fn(|_| 1.0),
                    }
                })
                .collect()
        })
        .collect();
    let with = ok(select_proxy(&traces, false))?;
    let without = ok(select_proxy(&traces, true))?;
    let (a, b) = (
        with.stats(TapId::CrossAttnOut).mean_rho,
        without.stats(TapId::CrossAttnOut).mean_rho,
    );
    let (Some(a), Some(b)) = (a, b) else {
        return Err(format!("undefined rho: {a:?} {b:?}"));
    };
    ensure!(b > a, "excluding warmup did not raise rho: {a} -> {b}");
    Ok(format!(
        "cross_attn_out mean rho {a:.3} -> {b:.3} with warmup steps 1..={w} excluded"
    ))
}

fn c8_fixed_trace_monotonicity() -> Outcome {
    let m = default_model();
    let s = sched(N_STEPS);
    let taps = [DEFAULT_PROXY_TAP, INDEPENDENT_TAP, TapId::BlockOut];
    let (_, steps) = reference_run(0, &m, &s, |_| false, &taps);
    let thresholds = grid_thresholds();
    let mut sizes = Vec::new();
    for (k, tap) in taps.iter().enumerate() {
        let sets: Vec<Vec<usize>> = thresholds
            .iter()
            .map(|&t| {
                let cfg = ReuseConfig::new(t, *tap, ReuseMode::Aligned);
                let mut state = ReuseState::new();
                let mut reused = Vec::new();
                for (i, st) in steps.iter().enumerate() {
                    let d = state.update_and_decide(st.proxies[k].clone(), i + 1, N_STEPS, &cfg)?;
                    if d.use_cache {
                        reused.push(i + 1);
                    }
                }
                Ok(reused)
            })
            .collect::<dit_reuse::Result<_>>()
            .map_err(|e| e.to_string())?;
        for (i, lo) in sets.iter().enumerate() {
            for hi in &sets[i..] {
                ensure!(
                    lo.iter().all(|s| hi.contains(s)),
                    "{tap}: reused set not nested across thresholds"
                );
            }
        }
        sizes.push(format!(
            "{tap} {:?}",
            sets.iter().map(Vec::len).collect::<Vec<_>>()
        ));
    }
    Ok(format!(
        "nested reused sets over {} thresholds; sizes {}",
        thresholds.len(),
        sizes.join(", ")
    ))
}

/// Matmul FLOPs of one block, counted as 2*m*n*k per product.
fn analytic_block(c: &ModelConfig) -> f64 {
    let t = c.token_count() as f64;
    let d = c.hidden_dim as f64;
    let s = c.cond_tokens as f64;
    let hidden = d * c.mlp_ratio;
    let modulation = 2.0 * d * (6.0 * d);
    let self_attn = 2.0 * t * d * (3.0 * d) + 2.0 * (2.0 * t * t * d) + 2.0 * t * d * d;
    let cross_attn = 2.0 * t * d * d
        + 2.0 * s * c.cond_dim as f64 * (2.0 * d)
        + 2.0 * (2.0 * t * s * d)
        + 2.0 * t * d * d;
    let mlp = 2.0 * t * d * hidden * 2.0;
    modulation + self_attn + cross_attn + mlp
}

fn analytic_ratio(c: &ModelConfig) -> f64 {
    let patch = (c.patch[0] * c.patch[1] * c.patch[2] * c.latent_shape[1]) as f64;
    let io = 2.0 * c.token_count() as f64 * patch * c.hidden_dim as f64;
    let block = analytic_block(c);
    let full = io + c.n_blocks as f64 * block + io;
    (io + block + 2.0 * io) / (2.0 * full)
}

fn measured_ratio(c: ModelConfig, n_steps: usize) -> Result<f64, String> {
    let m = model(c);
    let rc = ReuseConfig::new(f64::INFINITY, DEFAULT_PROXY_TAP, ReuseMode::Aligned);
    let r = ok(generate(0, &m, &sched(n_steps), Some(&rc)))?;
    Ok(ok(flops_report(&r.flops))?.reused_to_computed)
}

fn c9_skipped_step_cost() -> Outcome {
    let shallow = ModelConfig::default();
    let deep = ModelConfig {
        n_blocks: 40,
        ..ModelConfig::default()
    };
    let mut parts = Vec::new();
    for (c, steps) in [(shallow, 10), (deep, 5)] {
        let n = c.n_blocks;
        let want = analytic_ratio(&c);
        let got = measured_ratio(c, steps)?;
        ensure!(
            (got / want - 1.0).abs() < 0.01,
            "{n} blocks: measured {got} vs analytic {want}"
        );
        let scaled = got * 2.0 * n as f64;
        ensure!(
            (scaled - 1.0).abs() < 0.15,
            "{n} blocks: ratio {got} is not near 1/{}",
            2 * n
        );
        parts.push(format!(
            "{n} blocks {got:.4} (analytic {want:.4}, 1/{} = {:.4})",
            2 * n,
            0.5 / n as f64
        ));
    }
    Ok(format!("reused/computed: {}", parts.join("; ")))
}

fn c10_memory_accounting() -> Outcome {
    let configs = [
        ModelConfig::default(),
        ModelConfig {
            n_blocks: 2,
            hidden_dim: 48,
            latent_shape: [2, 4, 8, 12],
            patch: [1, 2, 3],
            ..ModelConfig::default()
        },
    ];
    let mut parts = Vec::new();
    for c in configs {
        let [f, _, h, w] = c.latent_shape;
        let tokens = (f / c.patch[0]) * (h / c.patch[1]) * (w / c.patch[2]);
        let expect = (4 * tokens * c.hidden_dim * 4) as u64;
        let m = model(c);
        let rc = ReuseConfig::new(0.4, TapId::BlockIn, ReuseMode::Aligned);
        let r = ok(generate(1, &m, &sched(20), Some(&rc)))?;
        let reused = r.reused_steps().len();
        ensure!(reused > 0, "no reused step to exercise the cache");
        for st in &r.steps {
            ensure!(
                st.cache_tensors == 4,
                "step {}: {} tensors",
                st.step,
                st.cache_tensors
            );
            ensure!(
                st.cache_bytes == expect,
                "step {}: {} bytes, expected {expect}",
                st.step,
                st.cache_bytes
            );
        }
        parts.push(format!(
            "T={tokens} D={}: 4 tensors, {expect} bytes over 20 steps ({reused} reused)",
            m.config.hidden_dim
        ));
    }
    Ok(parts.join("; "))
}

fn c11_quality_trend(grid: &[PromptGrid], m: &Model) -> Outcome {
    let decoder = ok(Decoder::standard(m.config.latent_shape))?;
    let thresholds = grid_thresholds();
    let finite: Vec<f64> = thresholds
        .iter()
        .copied()
        .filter(|t| t.is_finite())
        .collect();
    let lo = finite
        .iter()
        .copied()
        .filter(|&t| t > 0.0)
        .fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(0.0, f64::max);

    let mut curves = Vec::new();
    for mode in [ReuseMode::Aligned, ReuseMode::Independent] {
        let mut mean = Vec::new();
        for &t in &finite {
            let mut sum = 0.0;
            for g in grid {
                let r = g
                    .runs
                    .iter()
                    .find(|r| r.mode == mode && r.threshold == t)
                    .ok_or("missing run")?;
                sum += ok(run_stats(&r.result, &g.baseline, &decoder))?.psnr_db;
            }
            mean.push(sum / grid.len() as f64);
        }
        curves.push((mode, mean));
    }
    let aligned = &curves[0].1;
    let at = |t: f64| aligned[finite.iter().position(|&x| x == t).unwrap()];
    ensure!(
        at(lo) >= at(hi),
        "mean PSNR at {lo} ({:.2}) below {hi} ({:.2})",
        at(lo),
        at(hi)
    );

    for g in grid {
        let ratios = replay_reuse_ratios(&g.trace, DEFAULT_PROXY_TAP, &thresholds, 0.2);
        ensure!(
            ratios.windows(2).all(|w| w[0] <= w[1]),
            "prompt {}: replayed reuse ratios {ratios:?}",
            g.prompt
        );
    }
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|p| format!("{p:.1}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    Ok(format!(
        "{} prompts, mean PSNR {lo}: {:.2} dB >= {hi}: {:.2} dB; replayed reuse ratio non-decreasing; \
         curves over {finite:?}: aligned {} | independent({INDEPENDENT_TAP}) {}",
        grid.len(),
        at(lo),
        at(hi),
        fmt(aligned),
        fmt(&curves[1].1)
    ))
}

fn c12_metric_self_checks() -> Outcome {
    let shape = [2, 3, 16, 16];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = ok(FrameStack::from_vec(
        shape,
        (0..2 * 3 * 16 * 16)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect(),
    ))?;
    let (zero, one) = (
        FrameStack::filled(shape, 0.0),
        FrameStack::filled(shape, 1.0),
    );
    let p_same = ok(psnr(&x, &x))?;
    let s_same = ok(ssim(&x, &x))?;
    let p_01 = ok(psnr(&zero, &one))?;
    ensure!(p_same == 100.0, "psnr(x,x) = {p_same}");
    ensure!(s_same == 1.0, "ssim(x,x) = {s_same}");
    ensure!(p_01 == 0.0, "psnr(0,1) = {p_01}");
    let decoded = ok(Decoder::standard([4, 8, 8, 8]))?;
    let l = LatentVideo::gaussian([4, 8, 8, 8], &mut rng);
    let f = ok(decoded.decode(&l))?;
    ensure!(
        ok(psnr(&f, &f))? == 100.0 && ok(ssim(&f, &f))? == 1.0,
        "decoded self-comparison"
    );
    Ok("psnr(x,x) = 100 dB, ssim(x,x) = 1, psnr(0,1) = 0 dB".into())
}

fn main() -> ExitCode {
    let started = Instant::now();
    let m = default_model();
    let s = sched(N_STEPS);
    let grid = catch_unwind(AssertUnwindSafe(|| build_grid(&m, &s)))
        .unwrap_or_else(|_| Err("grid construction panicked".into()));

    let with_grid = |f: &dyn Fn(&[PromptGrid]) -> Outcome| match &grid {
        Ok(g) => f(g),
        Err(e) => Err(format!("sweep grid unavailable: {e}")),
    };
    let criteria: Vec<(&str, Check)> = vec![
        (
            "baseline equivalence",
            Box::new(|| with_grid(&c1_baseline_equivalence)),
        ),
        (
            "guidance alignment",
            Box::new(|| with_grid(&c2_guidance_alignment)),
        ),
        (
            "warmup exclusion",
            Box::new(|| with_grid(&c3_warmup_exclusion)),
        ),
        ("cache exactness", Box::new(c4_cache_exactness)),
        ("spearman correctness", Box::new(c5_spearman)),
        ("proxy-selection sanity", Box::new(c6_selection_sanity)),
        ("warmup-exclusion effect", Box::new(c7_warmup_effect)),
        (
            "fixed-trace monotonicity",
            Box::new(c8_fixed_trace_monotonicity),
        ),
        ("skipped-step cost", Box::new(c9_skipped_step_cost)),
        ("memory accounting", Box::new(c10_memory_accounting)),
        (
            "quality trend",
            Box::new(|| with_grid(&|g| c11_quality_trend(g, &m))),
        ),
        ("metric self-checks", Box::new(c12_metric_self_checks)),
    ];

    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        criteria.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
