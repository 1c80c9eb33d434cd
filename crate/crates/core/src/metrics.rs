//! Diagnostic evaluation: AUC-ROC, sensitivity/specificity under the
//! margin rule `p_pos > p_neg + tau`, sensitivity at a fixed specificity
//! via exact threshold search, and percentile-bootstrap confidence
//! intervals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ClassLabel;
use crate::seed::derive_seed;

/// Default specificity target for the fixed-specificity operating point.
pub const DEFAULT_TARGET_SP: f64 = 0.80;

/// A model output paired with the true label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub p_pos: f64,
    pub p_neg: f64,
    pub label: ClassLabel,
}

impl ScoredSample {
    pub fn new(p_neg: f64, p_pos: f64, label: ClassLabel) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&p_pos)
            && (0.0..=1.0).contains(&p_neg)
            && (p_pos + p_neg - 1.0).abs() <= 1e-9;
        if !ok {
            return Err(Error::DegenerateData(format!(
                "scores ({p_neg}, {p_pos}) are not a probability pair"
            )));
        }
        Ok(ScoredSample { p_pos, p_neg, label })
    }

    /// Decision margin `p_pos - p_neg`, in (-1, 1).
    pub fn margin(&self) -> f64 {
        self.p_pos - self.p_neg
    }
}

fn class_counts(scored: &[ScoredSample]) -> (usize, usize) {
    let pos = scored.iter().filter(|s| s.label.is_positive()).count();
    (pos, scored.len() - pos)
}

fn require_both_classes(scored: &[ScoredSample], metric: &str) -> Result<()> {
    let (pos, neg) = class_counts(scored);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{metric} needs both classes present ({pos} positive, {neg} negative)"
        )));
    }
    Ok(())
}

/// AUC-ROC as the rank-sum (Mann-Whitney) statistic on `p_pos`:
/// the probability a random positive outscores a random negative,
/// ties counted one half.
pub fn auc_roc(scored: &[ScoredSample]) -> Result<f64> {
    require_both_classes(scored, "AUC-ROC")?;
    let n = scored.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scored[a].p_pos.total_cmp(&scored[b].p_pos));

    // Average ranks over tied scores (1-based ranks).
    let mut rank = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scored[order[j]].p_pos == scored[order[i]].p_pos {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            rank[idx] = avg;
        }
        i = j;
    }

    let (pos, neg) = class_counts(scored);
    let rank_sum: f64 = scored
        .iter()
        .zip(&rank)
        .filter(|(s, _)| s.label.is_positive())
        .map(|(_, r)| r)
        .sum();
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Sensitivity and specificity under the rule: diagnose positive when
/// `p_pos > p_neg + tau`.
pub fn se_sp_at_tau(scored: &[ScoredSample], tau: f64) -> Result<(f64, f64)> {
    require_both_classes(scored, "SE/SP")?;
    let mut tp = 0usize;
    let mut fng = 0usize;
    let mut tn = 0usize;
    let mut fp = 0usize;
    for s in scored {
        let predicted_positive = s.margin() > tau;
        match (s.label.is_positive(), predicted_positive) {
            (true, true) => tp += 1,
            (true, false) => fng += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    let se = tp as f64 / (tp + fng) as f64;
    let sp = tn as f64 / (tn + fp) as f64;
    Ok((se, sp))
}

/// Sensitivity at the smallest threshold `tau` whose specificity reaches
/// `target_sp`. The search runs over the exact set of achievable decision
/// margins (plus an upper sentinel), so the returned operating point is
/// exact rather than grid-approximated. Returns `(se, tau)`.
pub fn se_at_target_sp(scored: &[ScoredSample], target_sp: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&target_sp) || target_sp == 0.0 {
        return Err(Error::InvalidConfig(format!(
            "target specificity must lie in (0, 1), got {target_sp}"
        )));
    }
    require_both_classes(scored, "SE at target SP")?;

    let mut candidates: Vec<f64> = scored.iter().map(ScoredSample::margin).collect();
    candidates.push(1.0); // sentinel: nothing diagnosed positive
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut neg_margins: Vec<f64> = scored
        .iter()
        .filter(|s| !s.label.is_positive())
        .map(ScoredSample::margin)
        .collect();
    neg_margins.sort_by(f64::total_cmp);
    let n_neg = neg_margins.len() as f64;

    for &tau in &candidates {
        // Specificity: fraction of negatives with margin <= tau.
        let below = neg_margins.partition_point(|&m| m <= tau);
        if below as f64 / n_neg >= target_sp {
            let (se, _) = se_sp_at_tau(scored, tau)?;
            return Ok((se, tau));
        }
    }
    unreachable!("the maximal margin always yields specificity 1");
}

fn percentile_interval(mut stats: Vec<f64>, level: f64) -> (f64, f64) {
    stats.sort_by(f64::total_cmp);
    let n = stats.len();
    let alpha = (1.0 - level) / 2.0;
    let idx = |q: f64| ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    (stats[idx(alpha)], stats[idx(1.0 - alpha)])
}

/// Percentile-bootstrap confidence interval for `metric` over resamples
/// of the scored samples. Resamples that come out single-class are
/// redrawn (at most 100 retries each). Each resample's RNG stream is
/// derived from `(seed, resample index)`, so the result does not depend
/// on evaluation order.
pub fn bootstrap_ci<F>(
    scored: &[ScoredSample],
    metric: F,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&[ScoredSample]) -> Result<f64>,
{
    if scored.is_empty() {
        return Err(Error::DegenerateData("cannot bootstrap an empty sample".into()));
    }
    if n_resamples == 0 {
        return Err(Error::InvalidConfig("n_resamples must be positive".into()));
    }
    if !(0.0..1.0).contains(&level) || level == 0.0 {
        return Err(Error::InvalidConfig(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }

    let n = scored.len();
    let mut stats = Vec::with_capacity(n_resamples);
    for i in 0..n_resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let mut resample = Vec::with_capacity(n);
        let mut ok = false;
        for _ in 0..100 {
            resample.clear();
            resample.extend((0..n).map(|_| scored[rng.gen_range(0..n)]));
            let (pos, neg) = class_counts(&resample);
            if pos > 0 && neg > 0 {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::DegenerateData(
                "bootstrap resamples stayed single-class after 100 retries".into(),
            ));
        }
        stats.push(metric(&resample)?);
    }
    Ok(percentile_interval(stats, level))
}

/// Percentile-bootstrap interval for the mean of a small set of values
/// (used to summarise per-seed final metrics).
pub fn bootstrap_ci_values(
    values: &[f64],
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::DegenerateData("cannot bootstrap an empty value set".into()));
    }
    let n = values.len();
    let mut stats = Vec::with_capacity(n_resamples);
    for i in 0..n_resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let mean = (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64;
        stats.push(mean);
    }
    Ok(percentile_interval(stats, level))
}

/// Point metrics of one evaluation pass (no confidence intervals);
/// what the round traces record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub auc: f64,
    pub se: f64,
    pub sp: f64,
    pub se_at_80sp: f64,
    pub tau: f64,
}

/// Evaluate all point metrics at once: AUC, SE/SP under the plain rule
/// (`tau = 0`), and SE at the default 80% specificity target.
pub fn snapshot(scored: &[ScoredSample]) -> Result<MetricsSnapshot> {
    let auc = auc_roc(scored)?;
    let (se, sp) = se_sp_at_tau(scored, 0.0)?;
    let (se_at_80sp, tau) = se_at_target_sp(scored, DEFAULT_TARGET_SP)?;
    Ok(MetricsSnapshot { auc, se, sp, se_at_80sp, tau })
}

/// Final evaluation: point metrics plus bootstrap confidence intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub se: f64,
    pub sp: f64,
    pub se_at_80sp: f64,
    pub tau: f64,
    /// metric name -> (low, high)
    pub ci: BTreeMap<String, (f64, f64)>,
}

pub const METRIC_NAMES: [&str; 4] = ["auc", "se", "sp", "se_at_80sp"];

/// Build a [`MetricsReport`] with a `level` bootstrap CI (over
/// `n_resamples` sample-level resamples) for each of the four metrics.
pub fn report(
    scored: &[ScoredSample],
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<MetricsReport> {
    let point = snapshot(scored)?;
    let mut ci = BTreeMap::new();
    for (k, name) in METRIC_NAMES.iter().enumerate() {
        let metric_seed = derive_seed(seed, 0x100 + k as u64);
        let interval = match *name {
            "auc" => bootstrap_ci(scored, auc_roc, n_resamples, level, metric_seed)?,
            "se" => bootstrap_ci(
                scored,
                |s| se_sp_at_tau(s, 0.0).map(|(se, _)| se),
                n_resamples,
                level,
                metric_seed,
            )?,
            "sp" => bootstrap_ci(
                scored,
                |s| se_sp_at_tau(s, 0.0).map(|(_, sp)| sp),
                n_resamples,
                level,
                metric_seed,
            )?,
            "se_at_80sp" => bootstrap_ci(
                scored,
                |s| se_at_target_sp(s, DEFAULT_TARGET_SP).map(|(se, _)| se),
                n_resamples,
                level,
                metric_seed,
            )?,
            _ => unreachable!(),
        };
        ci.insert((*name).to_string(), interval);
    }
    Ok(MetricsReport {
        auc: point.auc,
        se: point.se,
        sp: point.sp,
        se_at_80sp: point.se_at_80sp,
        tau: point.tau,
        ci,
    })
}

impl MetricsReport {
    /// Two-line table row: point estimates with the (low-high) interval
    /// beneath each.
    pub fn to_table(&self, label: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14}{:<16}{:<16}{:<16}{:<16}",
            "", "AUC", "SE", "SP", "SE@80%SP"
        );
        let _ = writeln!(
            out,
            "{:<14}{:<16.3}{:<16.3}{:<16.3}{:<16.3}",
            label, self.auc, self.se, self.sp, self.se_at_80sp
        );
        let fmt_ci = |name: &str| {
            let (lo, hi) = self.ci[name];
            format!("({lo:.3}-{hi:.3})")
        };
        let _ = writeln!(
            out,
            "{:<14}{:<16}{:<16}{:<16}{:<16}",
            "",
            fmt_ci("auc"),
            fmt_ci("se"),
            fmt_ci("sp"),
            fmt_ci("se_at_80sp")
        );
        out
    }
}
