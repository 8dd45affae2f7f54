//! Step-reuse controller: accumulated proxy change, warmup-gated threshold
//! decision, and the residual cache shared by the conditional and
//! unconditional passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TapId, TokenRole, TokenSequence};
use crate::tensor::Matrix;

pub const DEFAULT_WARMUP_FRACTION: f64 = 0.2;
pub const DEFAULT_NORM_EPSILON: f64 = 1e-12;

/// How the two guidance passes make their reuse decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReuseMode {
    /// One decision from the conditional proxy drives both passes.
    #[default]
    Aligned,
    /// Each pass tracks its own proxy and decides on its own.
    Independent,
}

impl std::fmt::Display for ReuseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReuseMode::Aligned => "aligned",
            ReuseMode::Independent => "independent",
        })
    }
}

impl std::str::FromStr for ReuseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "aligned" => Ok(ReuseMode::Aligned),
            "independent" => Ok(ReuseMode::Independent),
            other => Err(Error::Config(format!("unknown reuse mode {other:?}"))),
        }
    }
}

/// Guidance pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Cond,
    Uncond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReuseConfig {
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    pub proxy_tap: TapId,
    #[serde(default)]
    pub mode: ReuseMode,
    #[serde(default = "default_eps")]
    pub norm_epsilon: f64,
}

fn default_warmup() -> f64 {
    DEFAULT_WARMUP_FRACTION
}

fn default_eps() -> f64 {
    DEFAULT_NORM_EPSILON
}

impl ReuseConfig {
    pub fn new(threshold: f64, proxy_tap: TapId, mode: ReuseMode) -> Self {
        Self {
            threshold,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            proxy_tap,
            mode,
            norm_epsilon: DEFAULT_NORM_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::Config(format!(
                "threshold must be >= 0, got {}",
                self.threshold
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.norm_epsilon.is_nan() || self.norm_epsilon <= 0.0 {
            return Err(Error::Config("norm_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Thresholds serialize as JSON numbers, with `"inf"` for +∞.
pub mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => parse(&s).map_err(serde::de::Error::custom),
        }
    }

    pub fn parse(s: &str) -> Result<f64, String> {
        match s.trim() {
            "inf" | "+inf" | "infinity" | "Infinity" => Ok(f64::INFINITY),
            other => other
                .parse::<f64>()
                .map_err(|e| format!("bad threshold {other:?}: {e}")),
        }
    }
}

/// Number of leading steps that are always computed: `ceil(fraction · n_steps)`.
///
/// A small slack keeps products such as `0.2 · 15 = 3.0000000000000004`
/// from rounding up past the intended integer.
pub fn warmup_steps(fraction: f64, n_steps: usize) -> usize {
    let raw = fraction * n_steps as f64;
    (raw - 1e-9).ceil().max(0.0) as usize
}

/// `‖prev − curr‖₁ / max(‖curr‖₁, eps)` over all entries.
pub fn relative_l1(prev: &Matrix, curr: &Matrix, eps: f64) -> Result<f64> {
    if prev.shape() != curr.shape() {
        return Err(Error::dim(
            format!("{:?}", curr.shape()),
            format!("{:?}", prev.shape()),
        ));
    }
    let num: f64 = prev
        .as_slice()
        .iter()
        .zip(curr.as_slice())
        .map(|(a, b)| f64::from((a - b).abs()))
        .sum();
    Ok(num / curr.l1_norm().max(eps))
}

/// `y_in + res` in token space; the caller unpatchifies.
pub fn apply_cached(y_in: &TokenSequence, res: Option<&TokenSequence>) -> Result<TokenSequence> {
    let res = res.ok_or_else(|| {
        Error::InvalidState("no cached residual: reuse requested before any computed step".into())
    })?;
    Ok(TokenSequence::new(
        y_in.tokens.add(&res.tokens)?,
        TokenRole::Output,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReuseDecision {
    pub use_cache: bool,
    /// Accumulated metric after this step's contribution.
    pub metric_value: f64,
    pub step: usize,
}

/// Per-generation controller state. Holds at most four tensors: the previous
/// proxy, both cached residuals, and the current step's `y_in`.
#[derive(Debug, Clone, Default)]
pub struct ReuseState {
    pub accumulated_metric: f64,
    pub prev_proxy: Option<Matrix>,
    pub res_cond: Option<TokenSequence>,
    pub res_uncond: Option<TokenSequence>,
    pub y_in_current: Option<TokenSequence>,
    pub log: Vec<ReuseDecision>,
}

impl ReuseState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one step's metric contribution and decide.
    pub fn accumulate(
        &mut self,
        contribution: f64,
        step: usize,
        n_steps: usize,
        cfg: &ReuseConfig,
    ) -> ReuseDecision {
        self.accumulated_metric += contribution;
        let past_warmup = step > warmup_steps(cfg.warmup_fraction, n_steps);
        let decision = ReuseDecision {
            use_cache: past_warmup && self.accumulated_metric < cfg.threshold,
            metric_value: self.accumulated_metric,
            step,
        };
        self.log.push(decision);
        decision
    }

    /// Accumulate the relative change of `proxy` against the previous step's
    /// proxy (zero on the first call) and decide whether to reuse.
    pub fn update_and_decide(
        &mut self,
        proxy: Matrix,
        step: usize,
        n_steps: usize,
        cfg: &ReuseConfig,
    ) -> Result<ReuseDecision> {
        let contribution = match &self.prev_proxy {
            Some(prev) => relative_l1(prev, &proxy, cfg.norm_epsilon)?,
            None => 0.0,
        };
        self.prev_proxy = Some(proxy);
        Ok(self.accumulate(contribution, step, n_steps, cfg))
    }

    pub fn set_current_input(&mut self, y_in: TokenSequence) {
        self.y_in_current = Some(y_in);
    }

    pub fn residual(&self, pass: Pass) -> Option<&TokenSequence> {
        match pass {
            Pass::Cond => self.res_cond.as_ref(),
            Pass::Uncond => self.res_uncond.as_ref(),
        }
    }

    /// `y_in_current + res_pass`.
    pub fn cached_output(&self, pass: Pass) -> Result<TokenSequence> {
        let y_in = self
            .y_in_current
            .as_ref()
            .ok_or_else(|| Error::InvalidState("no current input recorded".into()))?;
        apply_cached(y_in, self.residual(pass))
    }

    /// Store both residuals after a fully computed step and reset the metric.
    pub fn store_residuals(
        &mut self,
        y_in_cond: &TokenSequence,
        y_out_cond: &TokenSequence,
        y_in_uncond: &TokenSequence,
        y_out_uncond: &TokenSequence,
    ) -> Result<()> {
        self.store_residual(Pass::Cond, y_in_cond, y_out_cond)?;
        self.store_residual(Pass::Uncond, y_in_uncond, y_out_uncond)
    }

    /// Single-pass variant used when the passes decide independently.
    pub fn store_residual(
        &mut self,
        pass: Pass,
        y_in: &TokenSequence,
        y_out: &TokenSequence,
    ) -> Result<()> {
        let res = TokenSequence::new(y_out.tokens.sub(&y_in.tokens)?, TokenRole::Residual);
        match pass {
            Pass::Cond => self.res_cond = Some(res),
            Pass::Uncond => self.res_uncond = Some(res),
        }
        self.accumulated_metric = 0.0;
        Ok(())
    }

    pub fn retained_tensors(&self) -> usize {
        self.prev_proxy.is_some() as usize
            + self.res_cond.is_some() as usize
            + self.res_uncond.is_some() as usize
            + self.y_in_current.is_some() as usize
    }

    /// Bytes held by the retained tensors at `bytes_per_scalar` each.
    pub fn memory_footprint(&self, bytes_per_scalar: usize) -> u64 {
        let elems = self.prev_proxy.as_ref().map_or(0, Matrix::len)
            + self.res_cond.as_ref().map_or(0, TokenSequence::len)
            + self.res_uncond.as_ref().map_or(0, TokenSequence::len)
            + self.y_in_current.as_ref().map_or(0, TokenSequence::len);
        (elems * bytes_per_scalar) as u64
    }
}

/// Open-loop replay of a fixed sequence of per-step contributions (index 0 =
/// step 1) through the decision rule. Decisions never feed back into the
/// metric, so it accumulates over the whole trace; this is what
/// [`ReuseState::update_and_decide`] does when no residuals are stored.
/// Reused-step sets are nested in the threshold.
pub fn replay_decisions(contributions: &[f64], cfg: &ReuseConfig) -> Vec<bool> {
    let n = contributions.len();
    let mut state = ReuseState::new();
    contributions
        .iter()
        .enumerate()
        .map(|(i, &c)| state.accumulate(c, i + 1, n, cfg).use_cache)
        .collect()
}

/// Closed-loop replay: like a real generation, the metric resets after every
/// computed step. Because of the reset, a larger threshold can compute a
/// step that a smaller one reuses.
pub fn replay_with_reset(contributions: &[f64], cfg: &ReuseConfig) -> Vec<bool> {
    let n = contributions.len();
    let mut state = ReuseState::new();
    contributions
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let d = state.accumulate(c, i + 1, n, cfg);
            if !d.use_cache {
                state.accumulated_metric = 0.0;
            }
            d.use_cache
        })
        .collect()
}

/// Fraction of steps flagged for reuse.
pub fn reuse_fraction(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}
