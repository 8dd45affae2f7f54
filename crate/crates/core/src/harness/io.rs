//! On-disk formats: binary latents and JSONL traces.
//!
//! Latent file layout, all integers little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `DRLT`                   |
//! | 4      | 4    | u32 format version (1)         |
//! | 8      | 16   | u32 × 4 shape (F, C, H, W)     |
//! | 24     | 8    | u64 element count              |
//! | 32     | 4·n  | f32 data, row-major            |

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::StepTrace;
use crate::model::{LatentVideo, TapMap};

pub const LATENT_MAGIC: [u8; 4] = *b"DRLT";
pub const LATENT_VERSION: u32 = 1;
pub const LATENT_HEADER_LEN: usize = 32;
pub const TRACE_SCHEMA_VERSION: u32 = 1;

pub fn encode_latent(latent: &LatentVideo) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(LATENT_HEADER_LEN + 4 * latent.len());
    out.extend_from_slice(&LATENT_MAGIC);
    out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
    for d in latent.shape() {
        let d =
            u32::try_from(d).map_err(|_| Error::Argument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(latent.len() as u64).to_le_bytes());
    for v in latent.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_latent(bytes: &[u8]) -> Result<LatentVideo> {
    let bad = |msg: String| Error::Config(format!("malformed latent file: {msg}"));
    if bytes.len() < LATENT_HEADER_LEN {
        return Err(bad(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if bytes[..4] != LATENT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != LATENT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let shape = [u32_at(8), u32_at(12), u32_at(16), u32_at(20)].map(|d| d as usize);
    let count = u64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes"));
    let expected: u64 = shape.iter().map(|&d| d as u64).product();
    if count != expected {
        return Err(bad(format!(
            "element count {count} does not match shape {shape:?}"
        )));
    }
    let body = &bytes[LATENT_HEADER_LEN..];
    if body.len() as u64 != count * 4 {
        return Err(bad(format!(
            "expected {} data bytes, found {}",
            count * 4,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    LatentVideo::from_vec(shape, data)
}

pub fn write_latent(path: &Path, latent: &LatentVideo) -> Result<()> {
    std::fs::write(path, encode_latent(latent)?)?;
    Ok(())
}

pub fn read_latent(path: &Path) -> Result<LatentVideo> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    decode_latent(&bytes)
}

/// One JSONL record: a [`StepTrace`] tagged with its prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceLine {
    pub schema_version: u32,
    pub prompt_id: u64,
    pub n_steps: usize,
    pub step: usize,
    pub oracle: Option<f64>,
    pub candidate_metrics: TapMap<Option<f64>>,
    pub residual_l1: f64,
    pub proxy_l1: TapMap<f64>,
}

impl TraceLine {
    pub fn new(prompt_id: u64, n_steps: usize, t: &StepTrace) -> Self {
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            prompt_id,
            n_steps,
            step: t.step,
            oracle: t.oracle,
            candidate_metrics: t.candidate_metrics.clone(),
            residual_l1: t.residual_l1,
            proxy_l1: t.proxy_l1.clone(),
        }
    }

    fn into_trace(self) -> StepTrace {
        StepTrace {
            step: self.step,
            oracle: self.oracle,
            candidate_metrics: self.candidate_metrics,
            residual_l1: self.residual_l1,
            proxy_l1: self.proxy_l1,
        }
    }
}

/// A whole-run trace for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTrace {
    pub prompt_id: u64,
    pub steps: Vec<StepTrace>,
}

pub fn write_traces<W: Write>(mut w: W, traces: &[PromptTrace]) -> Result<()> {
    for t in traces {
        let n = t.steps.len();
        for s in &t.steps {
            serde_json::to_writer(&mut w, &TraceLine::new(t.prompt_id, n, s))?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse JSONL traces. Lines for one prompt must be contiguous in step
/// order and cover `1..=n_steps`; blank lines are ignored.
pub fn read_traces<R: Read>(r: R) -> Result<Vec<PromptTrace>> {
    let mut out: Vec<PromptTrace> = Vec::new();
    let mut n_steps_of: BTreeMap<u64, usize> = BTreeMap::new();
    let mut last_line = 0;
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        last_line = lineno;
        let parse_err = |msg: String| Error::Parse { line: lineno, msg };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        match value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
        {
            Some(v) if v == u64::from(TRACE_SCHEMA_VERSION) => {}
            Some(v) => return Err(parse_err(format!("unsupported schema_version {v}"))),
            None => return Err(parse_err("missing schema_version".into())),
        }
        let rec: TraceLine = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;

        let n = *n_steps_of.entry(rec.prompt_id).or_insert(rec.n_steps);
        if n != rec.n_steps {
            return Err(parse_err(format!(
                "prompt {} changes n_steps from {n} to {}",
                rec.prompt_id, rec.n_steps
            )));
        }
        let continuing = out.last().is_some_and(|t| t.prompt_id == rec.prompt_id);
        if !continuing {
            if out.iter().any(|t| t.prompt_id == rec.prompt_id) {
                return Err(parse_err(format!(
                    "lines for prompt {} are not contiguous",
                    rec.prompt_id
                )));
            }
            out.push(PromptTrace {
                prompt_id: rec.prompt_id,
                steps: Vec::new(),
            });
        }
        let cur = out.last_mut().expect("pushed above");
        let expected = cur.steps.len() + 1;
        if rec.step != expected || rec.step > rec.n_steps {
            return Err(parse_err(format!(
                "prompt {}: expected step {expected} of {}, found {}",
                rec.prompt_id, rec.n_steps, rec.step
            )));
        }
        cur.steps.push(rec.into_trace());
    }
    if out.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "trace file contains no records".into(),
        });
    }
    for t in &out {
        let n = n_steps_of[&t.prompt_id];
        if t.steps.len() != n {
            return Err(Error::Parse {
                line: last_line,
                msg: format!("prompt {} has {} of {n} steps", t.prompt_id, t.steps.len()),
            });
        }
    }
    Ok(out)
}

pub fn read_traces_file(path: &Path) -> Result<Vec<PromptTrace>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    read_traces(f)
}
