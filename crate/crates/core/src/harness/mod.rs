//! Configuration, file formats and experiment drivers used by the CLI.

pub mod config;
pub mod io;
pub mod run;

pub use config::{resolve_output_dir, ExperimentConfig, CONFIG_SCHEMA_VERSION, OUT_DIR_ENV};
pub use io::{
    decode_latent, encode_latent, read_latent, read_traces, read_traces_file, write_latent,
    write_traces, PromptTrace, TraceLine, LATENT_HEADER_LEN, LATENT_MAGIC, LATENT_VERSION,
    TRACE_SCHEMA_VERSION,
};
pub use run::{
    collect_traces, parse_modes, parse_thresholds, read_sweep, replay_reuse_ratios, run_generate,
    run_sweep, sweep_writer, DecisionLog, GenerateArtifacts, ReuseOverrides, StatsFile, SweepRow,
    DEFAULT_PROXY_TAP, DEFAULT_THRESHOLDS, DEFAULT_TRACE_PROMPTS, SWEEP_HEADER,
    SWEEP_SCHEMA_VERSION,
};

use crate::error::Error;

/// Process exit code for a failed command: 3 for numeric failures, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric { .. } => 3,
        _ => 2,
    }
}
