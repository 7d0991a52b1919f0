//! Super-additivity statistics over condition sweeps.
//!
//! Degradations are fractional return losses against the matched-seed
//! baseline. A record is super-additive when the compound loss exceeds the
//! sum of the two marginal losses by more than a threshold.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Returns of the four matched-seed conditions of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedReturns {
    pub config_id: String,
    pub seed: u64,
    pub po: f64,
    pub tau: u32,
    pub shift: Option<String>,
    pub return_c1: f64,
    pub return_c2: f64,
    pub return_c3: f64,
    pub return_c4: f64,
}

/// Marginal and compound degradations for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub config_id: String,
    pub seed: u64,
    pub po: f64,
    pub tau: u32,
    pub shift: Option<String>,
    pub return_c1: f64,
    pub return_c2: f64,
    pub return_c3: f64,
    pub return_c4: f64,
    pub delta_po: f64,
    pub delta_theta: f64,
    pub delta_compound: f64,
    pub synergy_frac: f64,
    pub synergy_units: f64,
}

/// Fractional losses `(R1 - Rx) / |R1|` and their interaction.
///
/// A zero baseline return has no fractional scale and is rejected.
/// `synergy_units` is `(R1 - R4) - (R1 - R2) - (R1 - R3)` in raw return units.
pub fn degradation(m: &MatchedReturns) -> Result<DegradationRecord> {
    let r = [m.return_c1, m.return_c2, m.return_c3, m.return_c4];
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite return in {}", m.config_id)));
    }
    if m.return_c1 == 0.0 {
        return Err(Error::Input(format!("zero baseline return in {}", m.config_id)));
    }
    let scale = m.return_c1.abs();
    let loss = |x: f64| (m.return_c1 - x) / scale;
    let (delta_po, delta_theta, delta_compound) = (loss(m.return_c2), loss(m.return_c3), loss(m.return_c4));
    let units = |x: f64| m.return_c1 - x;
    Ok(DegradationRecord {
        config_id: m.config_id.clone(),
        seed: m.seed,
        po: m.po,
        tau: m.tau,
        shift: m.shift.clone(),
        return_c1: m.return_c1,
        return_c2: m.return_c2,
        return_c3: m.return_c3,
        return_c4: m.return_c4,
        delta_po,
        delta_theta,
        delta_compound,
        synergy_frac: delta_compound - (delta_po + delta_theta),
        synergy_units: units(m.return_c4) - units(m.return_c2) - units(m.return_c3),
    })
}

/// Super-additivity cut-off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scale", content = "value", rename_all = "snake_case")]
pub enum SynergyThreshold {
    /// On `synergy_frac`.
    Fraction(f64),
    /// On `synergy_units`.
    Units(f64),
}

impl Default for SynergyThreshold {
    fn default() -> Self {
        SynergyThreshold::Fraction(0.0)
    }
}

impl SynergyThreshold {
    pub fn flags(&self, r: &DegradationRecord) -> bool {
        match *self {
            SynergyThreshold::Fraction(t) => r.synergy_frac > t,
            SynergyThreshold::Units(t) => r.synergy_units > t,
        }
    }
}

/// One-sample t-test against zero with a two-sided p-value and 95% CI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub ci95: [f64; 2],
}

pub fn one_sample_t(xs: &[f64]) -> Option<TTest> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    let se = sd / nf.sqrt();
    let df = nf - 1.0;
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    let q = dist.inverse_cdf(0.975);
    let (t, p_value) = if se > 0.0 {
        let t = mean / se;
        (t, 2.0 * dist.sf(t.abs()))
    } else if mean == 0.0 {
        (0.0, 1.0)
    } else {
        (mean.signum() * f64::INFINITY, 0.0)
    };
    Some(TTest { n, mean, sd, t, df, p_value, ci95: [mean - q * se, mean + q * se] })
}

/// Rate of super-additive records and statistics of the flagged subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynergyReport {
    pub threshold: SynergyThreshold,
    pub n_configs: usize,
    pub n_superadditive: usize,
    pub rate: f64,
    /// Mean `synergy_units` over flagged records; `None` when none flagged.
    pub mean_synergy_units: Option<f64>,
    pub mean_synergy_frac: Option<f64>,
    /// t-test of flagged `synergy_units`; `None` with fewer than two flagged.
    pub flagged_test: Option<TTest>,
    /// t-test of `synergy_frac` over all records.
    pub all_records_test: Option<TTest>,
    pub strata: BTreeMap<String, StratumRate>,
}

/// Flagged count within one stratum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumRate {
    pub n: usize,
    pub flagged: usize,
    pub rate: f64,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn superadditive_rate(records: &[DegradationRecord], threshold: SynergyThreshold) -> Result<SynergyReport> {
    if records.is_empty() {
        return Err(Error::Input("no degradation records".into()));
    }
    let flagged: Vec<&DegradationRecord> = records.iter().filter(|r| threshold.flags(r)).collect();
    let units: Vec<f64> = flagged.iter().map(|r| r.synergy_units).collect();
    let fracs: Vec<f64> = flagged.iter().map(|r| r.synergy_frac).collect();
    let all_fracs: Vec<f64> = records.iter().map(|r| r.synergy_frac).collect();
    let mut strata = BTreeMap::new();
    for key in [StratumKey::DelayLevel, StratumKey::ShiftOnly] {
        for (name, (n, k)) in stratum_counts(records, key, threshold) {
            strata.insert(format!("{key}:{name}"), StratumRate { n, flagged: k, rate: k as f64 / n as f64 });
        }
    }
    Ok(SynergyReport {
        threshold,
        n_configs: records.len(),
        n_superadditive: flagged.len(),
        rate: flagged.len() as f64 / records.len() as f64,
        mean_synergy_units: mean(&units),
        mean_synergy_frac: mean(&fracs),
        flagged_test: one_sample_t(&units),
        all_records_test: one_sample_t(&all_fracs),
        strata,
    })
}

/// Grouping for rate comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumKey {
    /// One stratum per delay level.
    DelayLevel,
    /// Records with any delay versus records with a parameter shift only.
    ShiftOnly,
}

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StratumKey::DelayLevel => "delay_level",
            StratumKey::ShiftOnly => "shift_only",
        })
    }
}

fn stratum_counts(
    records: &[DegradationRecord],
    key: StratumKey,
    threshold: SynergyThreshold,
) -> BTreeMap<String, (usize, usize)> {
    let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in records {
        let name = match key {
            StratumKey::DelayLevel => format!("tau={}", r.tau),
            StratumKey::ShiftOnly if r.tau > 0 => "delay".to_string(),
            StratumKey::ShiftOnly if r.shift.is_some() => "shift_only".to_string(),
            StratumKey::ShiftOnly => continue,
        };
        let e = out.entry(name).or_default();
        e.0 += 1;
        e.1 += usize::from(threshold.flags(r));
    }
    out
}

/// Chi-square test of rate homogeneity across strata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedTest {
    pub key: StratumKey,
    pub strata: BTreeMap<String, StratumRate>,
    pub chi_square: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Pearson chi-square on a `k x 2` table of (flagged, not flagged) counts,
/// without continuity correction.
pub fn chi_square_homogeneity(counts: &[(usize, usize)]) -> Result<(f64, usize, f64)> {
    if counts.len() < 2 || counts.iter().any(|&(n, _)| n == 0) {
        return Err(Error::Input("need at least two nonempty strata".into()));
    }
    let total: f64 = counts.iter().map(|&(n, _)| n as f64).sum();
    let hits: f64 = counts.iter().map(|&(_, k)| k as f64).sum();
    let df = counts.len() - 1;
    if hits == 0.0 || hits == total {
        return Ok((0.0, df, 1.0));
    }
    let mut chi = 0.0;
    for &(n, k) in counts {
        let n = n as f64;
        let e_hit = n * hits / total;
        let e_miss = n * (total - hits) / total;
        chi += (k as f64 - e_hit).powi(2) / e_hit + ((n - k as f64) - e_miss).powi(2) / e_miss;
    }
    let dist = ChiSquared::new(df as f64).map_err(|e| Error::Input(e.to_string()))?;
    Ok((chi, df, dist.sf(chi)))
}

pub fn stratified_rate_test(
    records: &[DegradationRecord],
    key: StratumKey,
    threshold: SynergyThreshold,
) -> Result<StratifiedTest> {
    let counts = stratum_counts(records, key, threshold);
    if counts.len() < 2 {
        return Err(Error::Input(format!("stratification by {key} yields {} stratum", counts.len())));
    }
    let table: Vec<(usize, usize)> = counts.values().copied().collect();
    let (chi_square, df, p_value) = chi_square_homogeneity(&table)?;
    let strata = counts
        .into_iter()
        .map(|(name, (n, k))| (name, StratumRate { n, flagged: k, rate: k as f64 / n as f64 }))
        .collect();
    Ok(StratifiedTest { key, strata, chi_square, df, p_value })
}

/// Summary of a kappa trace against a task signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaTraceStats {
    pub post_onset_mean: f64,
    pub peak: f64,
    pub peak_t: usize,
    /// Steps at which kappa crosses above `tau_high`.
    pub spikes: Vec<usize>,
    /// Steps at which the task signal falls below the collapse level.
    pub collapses: Vec<usize>,
    /// For each collapse with a preceding spike: collapse step minus the
    /// latest spike step at or before it.
    pub lead_times: Vec<usize>,
}

/// Fraction of the pre-onset task-signal mean below which the signal
/// counts as collapsed.
pub const DEFAULT_COLLAPSE_FRACTION: f64 = 0.5;

/// Kappa summary after `onset`. Collapses are detected only when the
/// pre-onset task-signal mean is positive; `task_signal` may be empty.
pub fn kappa_trace_stats(
    kappa: &[f64],
    task_signal: &[f64],
    onset: usize,
    tau_high: f64,
    collapse_fraction: f64,
) -> Result<KappaTraceStats> {
    if kappa.len() <= onset {
        return Err(Error::Input(format!("trace of length {} does not extend past onset {onset}", kappa.len())));
    }
    let post = &kappa[onset..];
    let post_onset_mean = post.iter().sum::<f64>() / post.len() as f64;
    let (mut peak_t, mut peak) = (onset, post[0]);
    for (i, &k) in post.iter().enumerate() {
        if k > peak {
            peak = k;
            peak_t = onset + i;
        }
    }
    let spikes = rising_edges(kappa, |k| k > tau_high);
    let mut collapses = Vec::new();
    if !task_signal.is_empty() && task_signal.len() > onset && onset > 0 {
        let pre = task_signal[..onset].iter().sum::<f64>() / onset as f64;
        if pre > 0.0 {
            let level = collapse_fraction * pre;
            collapses = rising_edges(task_signal, |s| s < level).into_iter().filter(|&t| t >= onset).collect();
        }
    }
    let lead_times = collapses
        .iter()
        .filter_map(|&c| spikes.iter().rev().find(|&&s| s <= c).map(|&s| c - s))
        .collect();
    Ok(KappaTraceStats { post_onset_mean, peak, peak_t, spikes, collapses, lead_times })
}

fn rising_edges(xs: &[f64], pred: impl Fn(f64) -> bool) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = false;
    for (t, &x) in xs.iter().enumerate() {
        let now = pred(x);
        if now && !prev {
            out.push(t);
        }
        prev = now;
    }
    out
}

/// Trailing moving average, useful for noisy per-step task signals.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut acc = 0.0;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            acc += x;
            if i >= w {
                acc -= xs[i - w];
            }
            acc / (i + 1).min(w) as f64
        })
        .collect()
}

/// Evaluator-side prediction error of the current dynamics model on
/// ground-truth transitions, checked against the frozen model's error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpistemicGap {
    pub gap: f64,
    /// `frozen - adaptive`; positive when adaptation closed part of the gap.
    pub reduction: f64,
}

pub fn epistemic_gap(adaptive_theta_mse: f64, frozen_theta_mse: f64) -> Result<EpistemicGap> {
    for (name, v) in [("adaptive_theta_mse", adaptive_theta_mse), ("frozen_theta_mse", frozen_theta_mse)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Input(format!("{name} must be finite and nonnegative, got {v}")));
        }
    }
    Ok(EpistemicGap { gap: adaptive_theta_mse, reduction: frozen_theta_mse - adaptive_theta_mse })
}

/// Writes records as CSV with a header row.
pub fn write_records_csv<W: std::io::Write>(records: &[DegradationRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(r).map_err(|e| Error::Input(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(r: R) -> Result<Vec<DegradationRecord>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| Error::Input(e.to_string())))
        .collect()
}
