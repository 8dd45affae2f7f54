//! Command-line driver for the toy DiT step-reuse experiments.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use dit_reuse::harness::{
    self, collect_traces, parse_thresholds, read_latent, read_traces_file, run_generate, run_sweep,
    sweep_writer, write_traces, ExperimentConfig, ReuseOverrides, DEFAULT_PROXY_TAP,
    DEFAULT_THRESHOLDS, DEFAULT_TRACE_PROMPTS,
};
use dit_reuse::model::{Model, TapId};
use dit_reuse::quality::{psnr, ssim, Decoder};
use dit_reuse::reuse::ReuseMode;
use dit_reuse::selection::select_proxy;
use dit_reuse::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dit-reuse",
    version,
    about = "Proxy-driven step reuse on a toy video DiT"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate each configured prompt and compare it with a full-compute run.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Reuse threshold; `inf` reuses every step after warmup.
        #[arg(long, value_parser = parse_threshold)]
        threshold: Option<f64>,
        #[arg(long)]
        mode: Option<ReuseMode>,
        /// Proxy tap by name or number 1-8.
        #[arg(long)]
        tap: Option<TapId>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record oracle and proxy metrics for prompts 0..k as JSONL.
    Trace {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TRACE_PROMPTS)]
        prompts: usize,
        /// Output file; defaults to traces.jsonl in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank the eight proxy taps by Spearman correlation with the oracle.
    SelectProxy {
        traces: PathBuf,
        /// Drop the warmup steps before correlating.
        #[arg(long)]
        exclude_warmup: bool,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep thresholds and modes against per-prompt baselines.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated list, e.g. `0,0.1,inf`.
        #[arg(long, value_delimiter = ',', value_parser = parse_threshold)]
        thresholds: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "aligned,independent")]
        modes: Vec<ReuseMode>,
        #[arg(long)]
        tap: Option<TapId>,
        /// Output CSV; defaults to sweep.csv in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print PSNR and SSIM between two latent files as JSON.
    Compare { a: PathBuf, b: PathBuf },
}

fn parse_threshold(s: &str) -> std::result::Result<f64, String> {
    parse_thresholds(s)
        .map_err(|e| e.to_string())
        .and_then(|v| match v[..] {
            [t] => Ok(t),
            _ => Err("expected a single threshold".into()),
        })
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn output_file(cli: Option<PathBuf>, cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    let path = cli.unwrap_or_else(|| cfg.resolve_output_dir(None).join(name));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            config,
            threshold,
            mode,
            tap,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let reuse = ReuseOverrides {
                threshold,
                mode,
                tap,
            }
            .apply(cfg.reuse.as_ref())?;
            let dir = cfg.resolve_output_dir(out.as_deref());
            for a in run_generate(&cfg, reuse.as_ref(), &dir)? {
                let s = a.stats_summary;
                println!(
                    "prompt {}: reuse {:.3}, speedup {:.3}x, psnr {:.2} dB, ssim {:.4} -> {}",
                    a.prompt_id,
                    s.reuse_ratio,
                    s.flop_speedup,
                    s.psnr_db,
                    s.ssim,
                    a.latent.display()
                );
            }
        }
        Command::Trace {
            config,
            prompts,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = Model::new(cfg.model.clone())?;
            let traces = collect_traces(&model, &cfg.scheduler, prompts)?;
            let path = output_file(out, &cfg, "traces.jsonl")?;
            write_traces(BufWriter::new(File::create(&path)?), &traces)?;
            println!("{} prompt trace(s) -> {}", traces.len(), path.display());
        }
        Command::SelectProxy {
            traces,
            exclude_warmup,
            out,
        } => {
            let traces = read_traces_file(&traces)?;
            let steps: Vec<_> = traces.into_iter().map(|t| t.steps).collect();
            let report = select_proxy(&steps, exclude_warmup)?;
            println!("{report}");
            if let Some(path) = out {
                let mut text = serde_json::to_string_pretty(&report)?;
                text.push('\n');
                fs::write(path, text)?;
            }
        }
        Command::Sweep {
            config,
            thresholds,
            modes,
            tap,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = Model::new(cfg.model.clone())?;
            let thresholds = if thresholds.is_empty() {
                DEFAULT_THRESHOLDS.to_vec()
            } else {
                thresholds
            };
            let tap = tap
                .or(cfg.reuse.as_ref().map(|r| r.proxy_tap))
                .unwrap_or(DEFAULT_PROXY_TAP);
            let path = output_file(out, &cfg, "sweep.csv")?;
            let mut w = sweep_writer(BufWriter::new(File::create(&path)?));
            let rows = run_sweep(
                &model,
                &cfg.scheduler,
                &cfg.prompts,
                &thresholds,
                &modes,
                tap,
                |row| {
                    eprintln!(
                        "prompt {} {} threshold {}: reuse {:.3}, psnr {:.2} dB",
                        row.prompt_id,
                        row.mode,
                        fmt_threshold(row.threshold),
                        row.reuse_ratio,
                        row.psnr_db
                    );
                    w.serialize(row)?;
                    Ok(())
                },
            )?;
            w.flush()?;
            println!("{} row(s) -> {}", rows.len(), path.display());
        }
        Command::Compare { a, b } => {
            let (la, lb) = (read_latent(&a)?, read_latent(&b)?);
            if la.shape() != lb.shape() {
                return Err(Error::Argument(format!(
                    "shape mismatch: {:?} vs {:?}",
                    la.shape(),
                    lb.shape()
                )));
            }
            let decoder = Decoder::standard(la.shape())?;
            let (fa, fb) = (decoder.decode(&la)?, decoder.decode(&lb)?);
            let v = json!({ "psnr_db": psnr(&fa, &fb)?, "ssim": ssim(&fa, &fb)? });
            println!("{v}");
        }
    }
    Ok(())
}

fn fmt_threshold(t: f64) -> String {
    if t.is_infinite() {
        "inf".into()
    } else {
        t.to_string()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
