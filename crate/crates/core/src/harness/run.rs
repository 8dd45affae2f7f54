//! Experiment drivers behind the CLI subcommands.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::io::{write_latent, write_traces, PromptTrace};
use crate::error::{Error, Result};
use crate::instrument::{flops_report, FlopsReport, StepTrace};
use crate::model::{Model, TapId};
use crate::quality::{run_stats, Decoder, RunStats};
use crate::reuse::{replay_decisions, reuse_fraction, threshold_serde, ReuseConfig, ReuseMode};
use crate::sampling::{
    generate, generate_baseline, generate_traced, GenerationResult, SchedulerConfig, StepRecord,
};

pub const DEFAULT_THRESHOLDS: [f64; 7] = [0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6];
pub const DEFAULT_TRACE_PROMPTS: usize = 16;
/// The tap chosen by `select-proxy` on 16 traces of the default toy model.
pub const DEFAULT_PROXY_TAP: TapId = TapId::BlockIn;
pub const SWEEP_SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

/// Overrides applied on top of the config's reuse section.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReuseOverrides {
    pub threshold: Option<f64>,
    pub mode: Option<ReuseMode>,
    pub tap: Option<TapId>,
}

impl ReuseOverrides {
    /// `None` when neither the config nor the overrides ask for reuse.
    pub fn apply(&self, base: Option<&ReuseConfig>) -> Result<Option<ReuseConfig>> {
        let mut cfg = match (base, self.threshold) {
            (Some(b), _) => b.clone(),
            (None, Some(t)) => ReuseConfig::new(t, DEFAULT_PROXY_TAP, ReuseMode::default()),
            (None, None) if self.mode.is_some() || self.tap.is_some() => {
                return Err(Error::Config(
                    "--mode/--tap need a threshold (flag or config)".into(),
                ))
            }
            (None, None) => return Ok(None),
        };
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(tap) = self.tap {
            cfg.proxy_tap = tap;
        }
        cfg.validate()?;
        Ok(Some(cfg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionLog {
    pub schema_version: u32,
    pub prompt_id: u64,
    pub n_steps: usize,
    pub reuse: Option<ReuseConfig>,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub schema_version: u32,
    pub prompt_id: u64,
    pub reuse: Option<ReuseConfig>,
    pub reuse_ratio: f64,
    pub flop_speedup: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub total_flops: u64,
    pub baseline_flops: u64,
    /// Absent when no step was reused.
    pub flops: Option<FlopsReport>,
}

/// Paths written for one prompt by [`run_generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateArtifacts {
    pub prompt_id: u64,
    pub latent: PathBuf,
    pub decisions: PathBuf,
    pub stats: PathBuf,
    pub trace: Option<PathBuf>,
    pub stats_summary: RunStats,
}

/// Run every configured prompt with `reuse`, compare against a full-compute
/// baseline, and write latent, decision log and stats per prompt.
pub fn run_generate(
    cfg: &ExperimentConfig,
    reuse: Option<&ReuseConfig>,
    out_dir: &Path,
) -> Result<Vec<GenerateArtifacts>> {
    let model = Model::new(cfg.model.clone())?;
    let decoder = Decoder::standard(cfg.model.latent_shape)?;
    fs::create_dir_all(out_dir)?;
    let mut out = Vec::with_capacity(cfg.prompts.len());
    for &p in &cfg.prompts {
        let (base, trace) = if cfg.trace {
            let mut traced = generate_traced(p, &model, &cfg.scheduler)?;
            let steps = traced.traces.take().unwrap_or_default();
            (traced, Some(steps))
        } else {
            (generate_baseline(p, &model, &cfg.scheduler)?, None)
        };
        let fast = generate(p, &model, &cfg.scheduler, reuse)?;
        let stats = run_stats(&fast, &base, &decoder)?;

        let latent = out_dir.join(format!("latent_p{p}.bin"));
        write_latent(&latent, &fast.latent)?;
        let decisions = out_dir.join(format!("decisions_p{p}.json"));
        write_json(
            &decisions,
            &DecisionLog {
                schema_version: ARTIFACT_SCHEMA_VERSION,
                prompt_id: p,
                n_steps: fast.n_steps,
                reuse: fast.reuse.clone(),
                steps: fast.steps.clone(),
            },
        )?;
        let stats_path = out_dir.join(format!("stats_p{p}.json"));
        write_json(&stats_path, &stats_file(&fast, &base, stats))?;
        let trace = match trace {
            Some(steps) => {
                let path = out_dir.join(format!("trace_p{p}.jsonl"));
                let f = fs::File::create(&path)?;
                write_traces(
                    std::io::BufWriter::new(f),
                    &[PromptTrace {
                        prompt_id: p,
                        steps,
                    }],
                )?;
                Some(path)
            }
            None => None,
        };
        out.push(GenerateArtifacts {
            prompt_id: p,
            latent,
            decisions,
            stats: stats_path,
            trace,
            stats_summary: stats,
        });
    }
    Ok(out)
}

fn stats_file(fast: &GenerationResult, base: &GenerationResult, s: RunStats) -> StatsFile {
    StatsFile {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        prompt_id: fast.prompt_id,
        reuse: fast.reuse.clone(),
        reuse_ratio: s.reuse_ratio,
        flop_speedup: s.flop_speedup,
        psnr_db: s.psnr_db,
        ssim: s.ssim,
        total_flops: fast.flops.total(),
        baseline_flops: base.flops.total(),
        flops: flops_report(&fast.flops).ok(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Full-compute traces for prompts `0..k`.
pub fn collect_traces(
    model: &Model,
    sched: &SchedulerConfig,
    k: usize,
) -> Result<Vec<PromptTrace>> {
    if k == 0 {
        return Err(Error::Config("--prompts must be at least 1".into()));
    }
    (0..k as u64)
        .map(|p| {
            let r = generate_traced(p, model, sched)?;
            Ok(PromptTrace {
                prompt_id: p,
                steps: r.traces.unwrap_or_default(),
            })
        })
        .collect()
}

/// One row of the threshold sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub schema_version: u32,
    pub prompt_id: u64,
    pub mode: ReuseMode,
    #[serde(
        serialize_with = "threshold_serde::serialize",
        deserialize_with = "threshold_from_str"
    )]
    pub threshold: f64,
    pub reuse_ratio: f64,
    pub flop_speedup: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub const SWEEP_HEADER: [&str; 8] = [
    "schema_version",
    "prompt_id",
    "mode",
    "threshold",
    "reuse_ratio",
    "flop_speedup",
    "psnr_db",
    "ssim",
];

fn threshold_from_str<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<f64, D::Error> {
    let s = String::deserialize(d)?;
    threshold_serde::parse(&s).map_err(serde::de::Error::custom)
}

/// Baseline once per prompt, then one accelerated run per (mode, threshold).
/// `on_row` sees each row as soon as it exists.
pub fn run_sweep(
    model: &Model,
    sched: &SchedulerConfig,
    prompts: &[u64],
    thresholds: &[f64],
    modes: &[ReuseMode],
    tap: TapId,
    mut on_row: impl FnMut(&SweepRow) -> Result<()>,
) -> Result<Vec<SweepRow>> {
    if thresholds.is_empty() || modes.is_empty() || prompts.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one prompt, threshold and mode".into(),
        ));
    }
    let decoder = Decoder::standard(model.config.latent_shape)?;
    let mut rows = Vec::new();
    for &p in prompts {
        let base = generate_baseline(p, model, sched)?;
        for &mode in modes {
            for &threshold in thresholds {
                let rc = ReuseConfig::new(threshold, tap, mode);
                rc.validate()?;
                let fast = generate(p, model, sched, Some(&rc))?;
                let s = run_stats(&fast, &base, &decoder)?;
                let row = SweepRow {
                    schema_version: SWEEP_SCHEMA_VERSION,
                    prompt_id: p,
                    mode,
                    threshold,
                    reuse_ratio: s.reuse_ratio,
                    flop_speedup: s.flop_speedup,
                    psnr_db: s.psnr_db,
                    ssim: s.ssim,
                };
                on_row(&row)?;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn sweep_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(true).from_writer(w)
}

pub fn read_sweep<R: Read>(r: R) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != SWEEP_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected sweep header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<SweepRow>().enumerate() {
        let line = i + 2;
        let row = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if row.schema_version != SWEEP_SCHEMA_VERSION {
            return Err(Error::Parse {
                line,
                msg: format!("unsupported schema_version {}", row.schema_version),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Reuse ratio per threshold from replaying one trace's per-step metric for
/// `tap`. Step 1 contributes zero, as in a live run.
pub fn replay_reuse_ratios(
    trace: &[StepTrace],
    tap: TapId,
    thresholds: &[f64],
    warmup_fraction: f64,
) -> Vec<f64> {
    let contributions: Vec<f64> = trace
        .iter()
        .map(|s| s.candidate_metrics.get(tap).unwrap_or(0.0))
        .collect();
    thresholds
        .iter()
        .map(|&t| {
            let cfg = ReuseConfig {
                warmup_fraction,
                ..ReuseConfig::new(t, tap, ReuseMode::Aligned)
            };
            reuse_fraction(&replay_decisions(&contributions, &cfg))
        })
        .collect()
}

/// Parse a comma-separated threshold list such as `0,0.1,inf`.
pub fn parse_thresholds(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            let v = threshold_serde::parse(t).map_err(Error::Config)?;
            if v.is_nan() || v < 0.0 {
                return Err(Error::Config(format!("threshold must be >= 0, got {t:?}")));
            }
            Ok(v)
        })
        .collect()
}

pub fn parse_modes(s: &str) -> Result<Vec<ReuseMode>> {
    s.split(',').map(str::parse).collect()
}
