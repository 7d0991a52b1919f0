use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::{
    run_episode, snapshot_digest, trace_jsonl, write_atomic, CalibrationSnapshot, EpisodeOptions, EpisodeSummary,
    TraceHeader,
};
use crate::analysis::{
    degradation, stratified_rate_test, superadditive_rate, write_records_csv, DegradationRecord, MatchedReturns,
    StratifiedTest, StratumKey, SynergyReport,
};
use crate::env::EnvId;
use crate::error::{Error, Result};
use crate::kappa::RegimeThresholds;
use crate::perturb::{ConditionLabel, ConditionSpec};
use crate::VERSION;

pub const CELLS_DIR: &str = "cells";
pub const RECORDS_FILE: &str = "records.csv";
pub const REPORT_FILE: &str = "report.json";

/// Checkpoint written once a cell's trace is complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellCheckpoint {
    pub header: TraceHeader,
    pub summary: EpisodeSummary,
}

/// Cell file stem, e.g. `po0.5_tau1_gain_left0.5_s3`.
pub fn cell_stem(env: EnvId, cond: &ConditionSpec, seed: u64) -> String {
    format!("{}_s{seed}", cond.slug(env))
}

fn checkpoint_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(CELLS_DIR).join(format!("{stem}.summary.json"))
}

fn trace_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(CELLS_DIR).join(format!("{stem}.jsonl"))
}

/// Runs one cell and writes its trace and checkpoint.
pub fn run_cell(
    cfg: &ExperimentConfig,
    snap: &CalibrationSnapshot,
    cond: &ConditionSpec,
    seed: u64,
    dir: &Path,
) -> Result<EpisodeSummary> {
    let header = TraceHeader {
        version: VERSION.to_string(),
        config_hash: cfg.hash(),
        seed,
        env: cfg.env,
        condition: cond.clone(),
        snapshot_digest: snapshot_digest(snap)?,
    };
    let out = run_episode(cfg, snap, cond, seed, &EpisodeOptions::from_config(cfg))?;
    let stem = cell_stem(cfg.env, cond, seed);
    write_atomic(&trace_path(dir, &stem), &trace_jsonl(&header, &out)?)?;
    let ck = CellCheckpoint { header, summary: out.summary.clone() };
    let mut bytes = serde_json::to_vec_pretty(&ck)?;
    bytes.push(b'\n');
    write_atomic(&checkpoint_path(dir, &stem), &bytes)?;
    Ok(out.summary)
}

fn load_checkpoint(path: &Path, header: &TraceHeader) -> Option<EpisodeSummary> {
    let ck: CellCheckpoint = serde_json::from_slice(&std::fs::read(path).ok()?).ok()?;
    (ck.header == *header).then_some(ck.summary)
}

/// What a sweep did.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub ran: usize,
    pub resumed: usize,
    pub report: SweepReport,
}

/// Runs every grid cell not already checkpointed, then the analysis.
pub fn run_sweep(cfg: &ExperimentConfig, snap: &CalibrationSnapshot, dir: &Path) -> Result<SweepOutcome> {
    cfg.validate()?;
    snap.check_compatible(cfg)?;
    std::fs::create_dir_all(dir.join(CELLS_DIR))?;
    let cells = cfg.cells()?;
    let digest = snapshot_digest(snap)?;
    let hash = cfg.hash();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<(EpisodeSummary, bool)>> = pool.install(|| {
        cells
            .par_iter()
            .map(|(cond, seed)| {
                let header = TraceHeader {
                    version: VERSION.to_string(),
                    config_hash: hash.clone(),
                    seed: *seed,
                    env: cfg.env,
                    condition: cond.clone(),
                    snapshot_digest: digest.clone(),
                };
                let stem = cell_stem(cfg.env, cond, *seed);
                if trace_path(dir, &stem).exists() {
                    if let Some(s) = load_checkpoint(&checkpoint_path(dir, &stem), &header) {
                        return Ok((s, true));
                    }
                }
                run_cell(cfg, snap, cond, *seed, dir).map(|s| (s, false))
            })
            .collect()
    });
    let mut summaries = Vec::with_capacity(results.len());
    let mut resumed = 0;
    for r in results {
        let (s, was_resumed) = r?;
        resumed += usize::from(was_resumed);
        summaries.push(s);
    }
    let report = analyze_summaries(cfg, &snap.thresholds, &summaries)?;
    write_outputs(dir, &report)?;
    Ok(SweepOutcome { ran: summaries.len() - resumed, resumed, report })
}

/// Statistics over a finished sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub env: EnvId,
    pub n_episodes: usize,
    pub thresholds: RegimeThresholds,
    /// Seed-averaged post-onset kappa mean per condition label.
    pub kappa_means: BTreeMap<String, f64>,
    /// Per label and seed: mean over that seed's cells.
    pub kappa_means_by_seed: BTreeMap<String, BTreeMap<u64, f64>>,
    pub return_means: BTreeMap<String, f64>,
    pub budget_violations: u64,
    pub fallbacks: u64,
    pub records: Vec<DegradationRecord>,
    pub synergy: Option<SynergyReport>,
    pub stratified: BTreeMap<String, StratifiedTest>,
    /// Why a statistic could not be computed.
    pub notes: Vec<String>,
}

fn shift_key(s: &Option<String>) -> String {
    s.clone().unwrap_or_else(|| "none".into())
}

/// Builds matched-seed degradation records: for every nonzero PO level
/// and every (delay, shift) other than (0, none).
pub fn matched_records(summaries: &[EpisodeSummary]) -> Result<Vec<DegradationRecord>> {
    type Key = (u64, String, u32, String);
    let po_key = |p: f64| format!("{p}");
    let mut by: BTreeMap<Key, f64> = BTreeMap::new();
    for s in summaries {
        by.insert((s.seed, po_key(s.po), s.tau, shift_key(&s.shift)), s.episode_return);
    }
    let mut out = Vec::new();
    for s in summaries.iter().filter(|s| s.po > 0.0 && !(s.tau == 0 && s.shift.is_none())) {
        let get = |po: &str, tau: u32, shift: &str| by.get(&(s.seed, po.to_string(), tau, shift.to_string())).copied();
        let sk = shift_key(&s.shift);
        let p = po_key(s.po);
        let (Some(c1), Some(c2), Some(c3)) = (get("0", 0, "none"), get(&p, 0, "none"), get("0", s.tau, &sk)) else {
            return Err(Error::Spec(format!("grid lacks matched baseline cells for {}", s.slug)));
        };
        out.push(degradation(&MatchedReturns {
            config_id: format!("{}_s{}", s.slug, s.seed),
            seed: s.seed,
            po: s.po,
            tau: s.tau,
            shift: s.shift.clone(),
            return_c1: c1,
            return_c2: c2,
            return_c3: c3,
            return_c4: s.episode_return,
        })?);
    }
    out.sort_by(|a, b| a.config_id.cmp(&b.config_id));
    Ok(out)
}

pub fn analyze_summaries(
    cfg: &ExperimentConfig,
    thresholds: &RegimeThresholds,
    summaries: &[EpisodeSummary],
) -> Result<SweepReport> {
    let mut summaries = summaries.to_vec();
    summaries.sort_by(|a, b| (a.seed, &a.slug).cmp(&(b.seed, &b.slug)));
    let mut per_seed: BTreeMap<String, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
    let mut returns: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in &summaries {
        let label = s.label.to_string();
        let e = per_seed.entry(label.clone()).or_default().entry(s.seed).or_default();
        e.0 += s.post_onset_kappa_mean;
        e.1 += 1;
        let r = returns.entry(label).or_default();
        r.0 += s.episode_return;
        r.1 += 1;
    }
    let kappa_means_by_seed: BTreeMap<String, BTreeMap<u64, f64>> = per_seed
        .into_iter()
        .map(|(l, m)| (l, m.into_iter().map(|(seed, (s, n))| (seed, s / n as f64)).collect()))
        .collect();
    let kappa_means = kappa_means_by_seed
        .iter()
        .map(|(l, m)| (l.clone(), m.values().sum::<f64>() / m.len() as f64))
        .collect();
    let mut notes = Vec::new();
    let records = match matched_records(&summaries) {
        Ok(r) => r,
        Err(e) => {
            notes.push(format!("degradation records: {e}"));
            Vec::new()
        }
    };
    let synergy = match superadditive_rate(&records, cfg.synergy_threshold) {
        Ok(r) => Some(r),
        Err(e) => {
            notes.push(format!("synergy: {e}"));
            None
        }
    };
    let mut stratified = BTreeMap::new();
    for key in [StratumKey::DelayLevel, StratumKey::ShiftOnly] {
        match stratified_rate_test(&records, key, cfg.synergy_threshold) {
            Ok(t) => {
                stratified.insert(key.to_string(), t);
            }
            Err(e) => notes.push(format!("{key}: {e}")),
        }
    }
    Ok(SweepReport {
        version: VERSION.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        env: cfg.env,
        n_episodes: summaries.len(),
        thresholds: *thresholds,
        kappa_means,
        kappa_means_by_seed,
        return_means: returns.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect(),
        budget_violations: summaries.iter().map(|s| s.budget_violations).sum(),
        fallbacks: summaries.iter().map(|s| s.fallbacks).sum(),
        records,
        synergy,
        stratified,
        notes,
    })
}

fn write_outputs(dir: &Path, report: &SweepReport) -> Result<()> {
    let mut csv = format!("# version={} config_hash={} seed={}\n", report.version, report.config_hash, report.seed).into_bytes();
    write_records_csv(&report.records, &mut csv)?;
    write_atomic(&dir.join(RECORDS_FILE), &csv)?;
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    write_atomic(&dir.join(REPORT_FILE), &json)
}

/// Re-runs the analysis over the checkpoints already in `dir`.
pub fn analyze_dir(cfg: &ExperimentConfig, snap: &CalibrationSnapshot, dir: &Path) -> Result<SweepReport> {
    let mut summaries = Vec::new();
    let cells = dir.join(CELLS_DIR);
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&cells)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".summary.json"))
        .collect();
    entries.sort();
    let hash = cfg.hash();
    for p in entries {
        let ck: CellCheckpoint = serde_json::from_slice(&std::fs::read(&p)?)?;
        if ck.header.config_hash != hash {
            return Err(Error::Config(format!("{} was produced by config {}", p.display(), ck.header.config_hash)));
        }
        summaries.push(ck.summary);
    }
    if summaries.is_empty() {
        return Err(Error::Input(format!("no cell checkpoints in {}", cells.display())));
    }
    let report = analyze_summaries(cfg, &snap.thresholds, &summaries)?;
    write_outputs(dir, &report)?;
    Ok(report)
}

/// Seed-averaged post-onset kappa mean for a label, if present.
pub fn label_mean(report: &SweepReport, label: ConditionLabel) -> Option<f64> {
    report.kappa_means.get(&label.to_string()).copied()
}
