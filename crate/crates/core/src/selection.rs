//! Rank correlation and offline proxy selection.
//!
//! Ranks use the average of tied positions. Spearman's ρ is the Pearson
//! correlation of the two rank vectors. Doubling every rank makes all
//! deviations from the mean rank integers, so the sums below are exact in
//! `f64` for any realistic length and the tie-free case reduces to
//! `(n(n²−1) − 6Σd²) / (n(n²−1))` with a single rounding.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::StepTrace;
use crate::model::{TapId, TapMap};
use crate::reuse::{warmup_steps, DEFAULT_WARMUP_FRACTION};

pub const SELECTION_SCHEMA_VERSION: u32 = 1;

/// Minimum number of steps a trace must keep after exclusions.
pub const MIN_USABLE_STEPS: usize = 3;

/// Ascending 1-based ranks, ties averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector {
    ranks: Vec<f64>,
}

impl RankVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.ranks
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.ranks
    }

    /// `2·rank − (n + 1)`; always an integer.
    fn doubled_deviations(&self) -> Vec<f64> {
        let centre = (self.ranks.len() + 1) as f64;
        self.ranks.iter().map(|r| 2.0 * r - centre).collect()
    }
}

pub fn rank(values: &[f64]) -> Result<RankVector> {
    if values.is_empty() {
        return Err(Error::Argument("cannot rank an empty vector".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Argument(format!("non-finite value at index {i}")));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start+1 ..= end share their mean.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    Ok(RankVector { ranks })
}

pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("length {}", a.len()), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 observations, got {}",
            a.len()
        )));
    }
    let da = rank(a)?.doubled_deviations();
    let db = rank(b)?.doubled_deviations();
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in da.iter().zip(&db) {
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        let which = if saa == 0.0 { "first" } else { "second" };
        return Err(Error::UndefinedCorrelation(format!(
            "{which} sequence is constant"
        )));
    }
    let rho = sab / (saa * sbb).sqrt();
    Ok(rho.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapStats {
    pub tap: TapId,
    /// Mean ρ over prompts with a defined correlation.
    pub mean_rho: Option<f64>,
    /// Sample standard deviation across prompts; needs two prompts.
    pub std_rho: Option<f64>,
    pub prompts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub schema_version: u32,
    pub prompt_count: usize,
    pub exclude_warmup: bool,
    pub taps: Vec<TapStats>,
    pub selected: TapId,
    /// (prompt, tap) pairs dropped because one sequence was constant.
    pub degenerate_pairs: usize,
}

impl SelectionReport {
    pub fn stats(&self, tap: TapId) -> &TapStats {
        &self.taps[tap.index()]
    }
}

/// Per-prompt ρ between the oracle and each tap's per-step metric.
///
/// Steps from 2 onward are used; with `exclude_warmup`, steps up to
/// `ceil(0.2·N)` are dropped as well. Ties in mean ρ go to the lowest tap
/// number.
pub fn select_proxy(traces: &[Vec<StepTrace>], exclude_warmup: bool) -> Result<SelectionReport> {
    if traces.is_empty() {
        return Err(Error::Argument("no traces to select from".into()));
    }
    let mut per_tap: TapMap<Vec<f64>> = TapMap::from_fn(|_| Vec::new());
    let mut degenerate = 0;

    for (p, trace) in traces.iter().enumerate() {
        let n_steps = trace.len();
        let first = if exclude_warmup {
            warmup_steps(DEFAULT_WARMUP_FRACTION, n_steps) + 1
        } else {
            2
        }
        .max(2);
        let usable: Vec<&StepTrace> = trace.iter().filter(|s| s.step >= first).collect();
        if usable.len() < MIN_USABLE_STEPS {
            return Err(Error::Argument(format!(
                "trace {p} has {} usable steps, need at least {MIN_USABLE_STEPS}",
                usable.len()
            )));
        }
        let oracle = usable
            .iter()
            .map(|s| s.oracle.ok_or_else(|| missing(p, s.step, "oracle")))
            .collect::<Result<Vec<f64>>>()?;
        for tap in TapId::ALL {
            let metric = usable
                .iter()
                .map(|s| {
                    s.candidate_metrics
                        .get(tap)
                        .ok_or_else(|| missing(p, s.step, tap.name()))
                })
                .collect::<Result<Vec<f64>>>()?;
            match spearman_rho(&oracle, &metric) {
                Ok(rho) => per_tap.0[tap.index()].push(rho),
                Err(Error::UndefinedCorrelation(_)) => degenerate += 1,
                Err(e) => return Err(e),
            }
        }
    }

    let taps: Vec<TapStats> = TapId::ALL
        .iter()
        .map(|&tap| {
            let rhos = per_tap.get(tap);
            let n = rhos.len();
            let mean = (n > 0).then(|| rhos.iter().sum::<f64>() / n as f64);
            let std = mean.filter(|_| n > 1).map(|m| {
                (rhos.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            });
            TapStats {
                tap,
                mean_rho: mean,
                std_rho: std,
                prompts: n,
            }
        })
        .collect();

    let mut selected: Option<(TapId, f64)> = None;
    for s in &taps {
        if let Some(m) = s.mean_rho {
            if selected.is_none_or(|(_, best)| m > best) {
                selected = Some((s.tap, m));
            }
        }
    }
    let (selected, _) = selected.ok_or_else(|| {
        Error::UndefinedCorrelation("every (prompt, tap) pair is degenerate".into())
    })?;

    Ok(SelectionReport {
        schema_version: SELECTION_SCHEMA_VERSION,
        prompt_count: traces.len(),
        exclude_warmup,
        taps,
        selected,
        degenerate_pairs: degenerate,
    })
}

fn missing(prompt: usize, step: usize, what: &str) -> Error {
    Error::InvalidState(format!("trace {prompt}, step {step}: missing {what}"))
}

impl fmt::Display for SelectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "proxy selection over {} prompt(s), warmup excluded: {}",
            self.prompt_count, self.exclude_warmup
        )?;
        writeln!(
            f,
            "{:>2}  {:<16} {:>8} {:>8} {:>7}",
            "#", "tap", "mean", "std", "prompts"
        )?;
        for s in &self.taps {
            let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
            let mark = if s.tap == self.selected { " *" } else { "" };
            writeln!(
                f,
                "{:>2}  {:<16} {:>8} {:>8} {:>7}{mark}",
                s.tap.number(),
                s.tap.name(),
                cell(s.mean_rho),
                cell(s.std_rho),
                s.prompts
            )?;
        }
        if self.degenerate_pairs > 0 {
            writeln!(
                f,
                "degenerate (prompt, tap) pairs skipped: {}",
                self.degenerate_pairs
            )?;
        }
        write!(
            f,
            "selected: {} ({})",
            self.selected.name(),
            self.selected.number()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// O(n²) average rank: 1 + #smaller + (#equal − 1)/2.
    fn brute_rank(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|x| {
                let less = v.iter().filter(|y| *y < x).count() as f64;
                let eq = v.iter().filter(|y| *y == x).count() as f64;
                1.0 + less + (eq - 1.0) / 2.0
            })
            .collect()
    }

    fn trace_from(oracle: &[f64], metric_for: impl Fn(TapId, usize) -> f64) -> Vec<StepTrace> {
        let mut out = vec![StepTrace {
            step: 1,
            oracle: None,
            candidate_metrics: TapMap::from_fn(|_| None),
            residual_l1: 1.0,
            proxy_l1: TapMap::from_fn(|_| 1.0),
        }];
        for (i, &o) in oracle.iter().enumerate() {
            out.push(StepTrace {
                step: i + 2,
                oracle: Some(o),
                candidate_metrics: TapMap::from_fn(|t| Some(metric_for(TapId::ALL[t], i))),
                residual_l1: 1.0,
                proxy_l1: TapMap::from_fn(|_| 1.0),
            });
        }
        out
    }

    #[test]
    fn rank_examples() {
        assert_eq!(
            rank(&[10.0, 30.0, 20.0]).unwrap().as_slice(),
            &[1.0, 3.0, 2.0]
        );
        assert_eq!(rank(&[5.0, 5.0, 1.0]).unwrap().as_slice(), &[2.5, 2.5, 1.0]);
        assert_eq!(rank(&[7.0]).unwrap().as_slice(), &[1.0]);
        assert!(matches!(rank(&[]), Err(Error::Argument(_))));
        assert!(matches!(rank(&[1.0, f64::NAN]), Err(Error::Argument(_))));
    }

    #[test]
    fn rho_examples() {
        assert_eq!(
            spearman_rho(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(),
            1.0
        );
        assert_eq!(
            spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            -1.0
        );
        assert!(matches!(
            spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(
            spearman_rho(&[1.0], &[1.0]),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            spearman_rho(&[1.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn selects_matching_tap_and_rejects_reversed_one() {
        let oracle: Vec<f64> = (0..12).map(|i| ((i * 7) % 12) as f64 + 0.5).collect();
        let trace = trace_from(&oracle, |tap, i| match tap {
            TapId::CrossAttnOut => oracle[i],
            TapId::AttnIn => -oracle[i],
            _ => ((i * 5) % 12) as f64,
        });
        let r = select_proxy(&[trace.clone(), trace], false).unwrap();
        assert_eq!(r.selected, TapId::CrossAttnOut);
        assert_eq!(r.stats(TapId::CrossAttnOut).mean_rho, Some(1.0));
        assert_eq!(r.stats(TapId::CrossAttnOut).std_rho, Some(0.0));
        assert_eq!(r.stats(TapId::AttnIn).mean_rho, Some(-1.0));
        assert_eq!(r.degenerate_pairs, 0);
        assert!(r.to_string().contains("selected: cross_attn_out (5)"));
    }

    #[test]
    fn equal_means_pick_the_lowest_tap() {
        let oracle: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let r = select_proxy(&[trace_from(&oracle, |_, i| oracle[i])], false).unwrap();
        assert_eq!(r.selected, TapId::BlockIn);
        assert_eq!(r.stats(TapId::BlockIn).std_rho, None);
    }

    #[test]
    fn constant_sequences_are_counted_and_skipped() {
        let oracle: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let trace = trace_from(
            &oracle,
            |tap, i| if tap == TapId::MlpOut { 3.0 } else { oracle[i] },
        );
        let r = select_proxy(&[trace], false).unwrap();
        assert_eq!(r.degenerate_pairs, 1);
        assert_eq!(r.stats(TapId::MlpOut).mean_rho, None);
        assert_eq!(r.stats(TapId::MlpOut).prompts, 0);
    }

    #[test]
    fn too_few_usable_steps_is_an_error() {
        // Five steps: warmup is 1, so steps 2..5 remain; with ten, warmup is 2.
        let short = trace_from(&[1.0, 2.0], |_, _| 0.0);
        assert!(matches!(
            select_proxy(&[short], false),
            Err(Error::Argument(_))
        ));
        assert!(matches!(select_proxy(&[], false), Err(Error::Argument(_))));
    }

    #[test]
    fn warmup_exclusion_recovers_late_agreement() {
        // N = 20, warmup = 4: steps 2..4 disagree, later steps agree.
        let oracle: Vec<f64> = (0..19).map(|i| 20.0 - i as f64).collect();
        let metric = |i: usize| if i < 3 { -oracle[i] } else { oracle[i] };
        let trace = trace_from(&oracle, |tap, i| {
            if tap == TapId::MlpIn {
                metric(i)
            } else {
                1.0 + (i % 3) as f64
            }
        });

        let with = select_proxy(std::slice::from_ref(&trace), false).unwrap();
        let without = select_proxy(&[trace], true).unwrap();
        let m: Vec<f64> = (0..19).map(metric).collect();
        let expected_with = pearson(&brute_rank(&oracle), &brute_rank(&m));
        let expected_without = pearson(&brute_rank(&oracle[3..]), &brute_rank(&m[3..]));
        let got_with = with.stats(TapId::MlpIn).mean_rho.unwrap();
        let got_without = without.stats(TapId::MlpIn).mean_rho.unwrap();
        assert!((got_with - expected_with).abs() < 1e-12);
        assert!((got_without - expected_without).abs() < 1e-12);
        assert!(got_without > got_with);
        assert!(without.exclude_warmup && !with.exclude_warmup);
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn vec_with_ties() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-20i32..20, 2..40)
            .prop_map(|v| v.into_iter().map(f64::from).collect())
    }

    proptest! {
        #[test]
        fn rank_matches_brute_force(v in vec_with_ties()) {
            let r = rank(&v).unwrap();
            prop_assert_eq!(r.as_slice().to_vec(), brute_rank(&v));
            let n = v.len() as f64;
            prop_assert_eq!(r.as_slice().iter().sum::<f64>(), n * (n + 1.0) / 2.0);
        }

        #[test]
        fn rank_is_permutation_equivariant(v in vec_with_ties(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..v.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<f64> = perm.iter().map(|&i| v[i]).collect();
            let r = rank(&v).unwrap();
            let rp = rank(&permuted).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(rp.as_slice()[k], r.as_slice()[i]);
            }
        }

        #[test]
        fn rho_is_bounded_symmetric_and_rank_invariant(
            pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..40)
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let Ok(rho) = spearman_rho(&a, &b) {
                prop_assert!((-1.0..=1.0).contains(&rho));
                prop_assert_eq!(rho, spearman_rho(&b, &a).unwrap());
                let warped: Vec<f64> = a.iter().map(|x| (x / 100.0).exp() * 3.0 + 1.0).collect();
                prop_assert_eq!(rho, spearman_rho(&warped, &b).unwrap());
                prop_assert!((rho - pearson(&brute_rank(&a), &brute_rank(&b))).abs() < 1e-12);
            }
        }

        #[test]
        fn selection_ignores_positive_rescaling(
            seqs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 10), 9),
            scales in prop::collection::vec(0.01f64..100.0, 9),
        ) {
            let oracle = &seqs[8];
            let trace = trace_from(oracle, |tap, i| seqs[tap.index()][i]);
            let scaled = trace_from(
                &oracle.iter().map(|o| o * scales[8]).collect::<Vec<_>>(),
                |tap, i| seqs[tap.index()][i] * scales[tap.index()],
            );
            if let (Ok(a), Ok(b)) = (select_proxy(&[trace], false), select_proxy(&[scaled], false)) {
                prop_assert_eq!(a.selected, b.selected);
            }
        }
    }
}
