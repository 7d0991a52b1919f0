use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::SynergyThreshold;
use crate::ensemble::EnsembleConfig;
use crate::env::{EnvId, HORIZON};
use crate::error::{Error, Result};
use crate::kappa::{RegimeThresholds, DEFAULT_CLIP, DEFAULT_C_TAU};
use crate::perturb::{condition_matrix, ConditionSpec, ShiftLevel, ShiftSpec, DEFAULT_ONSET};
use crate::policy::{PolicyConfig, PolicyMode};

/// A parameter value applied at onset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftValue {
    pub param: String,
    pub value: f64,
}

/// Axes of the condition matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub po_levels: Vec<f64>,
    pub delay_levels: Vec<u32>,
    /// Shift levels besides "no shift"; `None` uses the environment's
    /// default fault.
    pub shifts: Option<Vec<ShiftValue>>,
    pub seeds: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { po_levels: vec![0.0, 0.5], delay_levels: vec![0, 1, 3], shifts: None, seeds: (0..10).collect() }
    }
}

/// Default fault per environment: a weak left wheel, or a stiffer spring.
pub fn default_shift(env: EnvId) -> ShiftValue {
    match env {
        EnvId::DriftBot => ShiftValue { param: "gain_left".into(), value: 0.5 },
        EnvId::MassSpring1D => ShiftValue { param: "stiffness".into(), value: 2.0 },
    }
}

/// Data collection and threshold calibration settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Std of Gaussian noise added to controller actions while collecting
    /// baseline transitions.
    pub exploration_noise: f64,
    /// Length of each baseline collection rollout.
    pub segment_len: usize,
    /// Start collection rollouts from uniformly random states instead of
    /// the episode's initial state.
    pub random_starts: bool,
    /// Seeds of the passive runs that place the regime thresholds.
    pub seeds: Vec<u64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { exploration_noise: 0.3, segment_len: 20, random_starts: true, seeds: vec![1000, 1001, 1002] }
    }
}

/// Online updates of the adaptive ensemble after onset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub enabled: bool,
    /// Steps between updates.
    pub interval: u64,
    /// Most recent probe transitions used per update.
    pub window: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig { enabled: true, interval: 10, window: 100 }
    }
}

/// Full experiment description, read from TOML. Unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub seed: u64,
    pub horizon: u64,
    pub onset: u64,
    /// Baseline transitions used to train the frozen ensemble.
    pub t_pre: usize,
    pub clip: f64,
    pub c_tau: f64,
    pub ensemble: EnsembleConfig,
    pub policy: PolicyConfig,
    pub policy_mode: PolicyMode,
    pub grid: GridConfig,
    pub calibration: CalibrationConfig,
    pub adaptation: AdaptationConfig,
    /// Fixed thresholds instead of calibrated ones.
    pub thresholds: Option<RegimeThresholds>,
    pub synergy_threshold: SynergyThreshold,
    /// Excluded from the config hash.
    pub output_dir: PathBuf,
    /// Excluded from the config hash.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvId::DriftBot,
            seed: 0,
            horizon: HORIZON,
            onset: DEFAULT_ONSET,
            t_pre: 300,
            clip: DEFAULT_CLIP,
            c_tau: DEFAULT_C_TAU,
            ensemble: EnsembleConfig::default(),
            policy: PolicyConfig::default(),
            policy_mode: PolicyMode::Adaptive,
            grid: GridConfig::default(),
            calibration: CalibrationConfig::default(),
            adaptation: AdaptationConfig::default(),
            thresholds: None,
            synergy_threshold: SynergyThreshold::default(),
            output_dir: PathBuf::from("out"),
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.onset >= self.horizon {
            return bad(format!("onset {} must be below horizon {}", self.onset, self.horizon));
        }
        if !(self.clip > 0.0) || !(self.c_tau >= 0.0) {
            return bad(format!("clip must be > 0 and c_tau >= 0, got {} and {}", self.clip, self.c_tau));
        }
        if self.ensemble.members < 2 || self.ensemble.hidden == 0 || self.ensemble.batch_size == 0 {
            return bad("ensemble needs >= 2 members, nonzero hidden width and batch size".into());
        }
        let p = &self.policy;
        if !(p.alpha_max > 0.0) || !(p.delta_max > 0.0) || !(p.lambda >= 0.0) || p.n_candidates < 2 {
            return bad("policy needs alpha_max > 0, delta_max > 0, lambda >= 0, n_candidates >= 2".into());
        }
        if !(p.kappa_smoothing > 0.0 && p.kappa_smoothing <= 1.0) {
            return bad(format!("kappa_smoothing must be in (0, 1], got {}", p.kappa_smoothing));
        }
        if self.adaptation.interval == 0 || self.adaptation.window == 0 {
            return bad("adaptation interval and window must be positive".into());
        }
        if self.calibration.segment_len < 3 || !(self.calibration.exploration_noise >= 0.0) {
            return bad("calibration segment_len must be >= 3 and exploration_noise >= 0".into());
        }
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        self.cells().map(|_| ())
    }

    pub fn shift_levels(&self) -> Vec<ShiftLevel> {
        let shifts = self.grid.shifts.clone().unwrap_or_else(|| vec![default_shift(self.env)]);
        std::iter::once(None)
            .chain(shifts.into_iter().map(|s| Some(ShiftSpec { param: s.param, value: s.value, onset_t: self.onset })))
            .collect()
    }

    /// Every (condition, seed) cell of the grid in PO-major order.
    pub fn cells(&self) -> Result<Vec<(ConditionSpec, u64)>> {
        self.cells_for(&self.grid.seeds)
    }

    pub fn cells_for(&self, seeds: &[u64]) -> Result<Vec<(ConditionSpec, u64)>> {
        condition_matrix(self.env, &self.grid.po_levels, &self.grid.delay_levels, &self.shift_levels(), seeds, self.onset)
    }

    /// SHA-256 of the canonical JSON form, ignoring output location and
    /// worker count.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.workers = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
