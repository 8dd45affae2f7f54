//! Oracle values, per-step traces of every candidate proxy, and FLOP accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, TapMap};
use crate::reuse::relative_l1;
use crate::sampling::{generate_traced, SchedulerConfig};
use crate::tensor::{FlopTally, Matrix};

/// Cost bucket for FLOP attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Conditional patchify + block 0 (the proxy computation).
    Block0,
    /// Rest of the conditional pass, including its unpatchify.
    FullPassCond,
    /// The unconditional pass.
    FullPassUncond,
    /// Unpatchify of cached outputs on reused steps.
    Unpatchify,
    /// Sampler update; elementwise, so always zero under the matmul-only model.
    Sampler,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Block0,
        Phase::FullPassCond,
        Phase::FullPassUncond,
        Phase::Unpatchify,
        Phase::Sampler,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// How a step was served, from the point of view of cost accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Computed,
    Reused,
    /// Independent mode only: one pass computed, the other reused.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCost {
    pub step: usize,
    pub kind: StepKind,
    pub flops: u64,
}

/// Monotone FLOP counter with per-phase and per-step attribution.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopCounter {
    phases: [u64; 5],
    steps: Vec<StepCost>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Charge the FLOPs of one step, broken down by phase.
    pub fn record_step(&mut self, step: usize, kind: StepKind, charges: &[(Phase, FlopTally)]) {
        let mut total = 0;
        for (phase, tally) in charges {
            self.phases[phase.index()] += tally.0;
            total += tally.0;
        }
        self.steps.push(StepCost {
            step,
            kind,
            flops: total,
        });
    }

    pub fn phase(&self, phase: Phase) -> u64 {
        self.phases[phase.index()]
    }

    pub fn total(&self) -> u64 {
        self.steps.iter().map(|s| s.flops).sum()
    }

    pub fn steps(&self) -> &[StepCost] {
        &self.steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTotals {
    pub block0: u64,
    pub full_pass_cond: u64,
    pub full_pass_uncond: u64,
    pub unpatchify: u64,
    pub sampler: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub phases: PhaseTotals,
    pub total: u64,
    pub computed_steps: usize,
    pub reused_steps: usize,
    /// Mean cost of a computed step.
    pub computed_step_cost: f64,
    /// Mean cost of a reused step.
    pub reused_step_cost: f64,
    /// `reused_step_cost / computed_step_cost`.
    pub reused_to_computed: f64,
}

pub fn flops_report(counter: &FlopCounter) -> Result<FlopsReport> {
    let mean = |kind: StepKind| {
        let costs: Vec<u64> = counter
            .steps
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.flops)
            .collect();
        let n = costs.len();
        (
            n,
            if n == 0 {
                0.0
            } else {
                costs.iter().sum::<u64>() as f64 / n as f64
            },
        )
    };
    let (computed_steps, computed_step_cost) = mean(StepKind::Computed);
    let (reused_steps, reused_step_cost) = mean(StepKind::Reused);
    if computed_steps == 0 {
        return Err(Error::InvalidState("no computed step recorded".into()));
    }
    if reused_steps == 0 {
        return Err(Error::InvalidState(
            "no reused step recorded; reused/computed cost ratio is undefined".into(),
        ));
    }
    Ok(FlopsReport {
        phases: PhaseTotals {
            block0: counter.phase(Phase::Block0),
            full_pass_cond: counter.phase(Phase::FullPassCond),
            full_pass_uncond: counter.phase(Phase::FullPassUncond),
            unpatchify: counter.phase(Phase::Unpatchify),
            sampler: counter.phase(Phase::Sampler),
        },
        total: counter.total(),
        computed_steps,
        reused_steps,
        computed_step_cost,
        reused_step_cost,
        reused_to_computed: reused_step_cost / computed_step_cost,
    })
}

/// Closed-form matmul FLOPs of the toy DiT, counted as `2·m·n·k` per product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopModel {
    pub patchify: u64,
    pub block: u64,
    pub unpatchify: u64,
    pub n_blocks: u64,
}

impl FlopModel {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.token_count() as u64;
        let d = cfg.hidden_dim as u64;
        let p = cfg.patch_dim() as u64;
        let s = cfg.cond_tokens as u64;
        let cd = cfg.cond_dim as u64;
        let m = cfg.mlp_hidden()? as u64;
        let block = 2 * d * 6 * d // AdaLN modulation
            + 2 * t * d * 3 * d   // qkv
            + 2 * 2 * t * t * d   // QK^T and PV across heads
            + 2 * t * d * d       // attention output
            + 2 * t * d * d       // cross q
            + 2 * s * cd * 2 * d  // cross kv
            + 2 * 2 * t * s * d   // cross QK^T and PV
            + 2 * t * d * d       // cross output
            + 2 * 2 * t * d * m; // MLP up + down
        Ok(Self {
            patchify: 2 * t * p * d,
            block,
            unpatchify: 2 * t * d * p,
            n_blocks: cfg.n_blocks as u64,
        })
    }

    pub fn full_pass(&self) -> u64 {
        self.patchify + self.n_blocks * self.block + self.unpatchify
    }

    pub fn computed_step(&self) -> u64 {
        2 * self.full_pass()
    }

    /// Proxy (patchify + block 0) plus two cached unpatchifies.
    pub fn reused_step(&self) -> u64 {
        self.patchify + self.block + 2 * self.unpatchify
    }

    pub fn reused_to_computed(&self) -> f64 {
        self.reused_step() as f64 / self.computed_step() as f64
    }
}

/// Relative L1 change of the full-network residual between consecutive steps:
/// `‖res_curr − res_prev‖₁ / max(‖res_curr‖₁, eps)`.
pub fn oracle_value(res_curr: &Matrix, res_prev: &Matrix, eps: f64) -> Result<f64> {
    relative_l1(res_prev, res_curr, eps)
}

/// Oracle and all eight candidate reuse-metric contributions for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// Absent at step 1.
    pub oracle: Option<f64>,
    /// Per-step (not accumulated) relative L1 of each tap; absent at step 1.
    pub candidate_metrics: TapMap<Option<f64>>,
    /// `‖y_out − y_in‖₁` of the conditional pass.
    pub residual_l1: f64,
    pub proxy_l1: TapMap<f64>,
}

/// Full-compute generation that records a [`StepTrace`] per step.
pub fn record_trace(
    prompt_id: u64,
    model: &Model,
    sched: &SchedulerConfig,
) -> Result<Vec<StepTrace>> {
    Ok(generate_traced(prompt_id, model, sched)?
        .traces
        .unwrap_or_default())
}
