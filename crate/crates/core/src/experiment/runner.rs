use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{hex, ExperimentConfig};
use crate::ensemble::{
    acc_feature, adaptive_update, bootstrap_train, calibrate_noise_floor, model_input, EnsembleModel, NoiseFloor,
    ReplayBuffer, Sample, MIN_CALIBRATION_BUFFER,
};
use crate::env::{self, ActionVec, DynamicsParams, EnvId, Transition};
use crate::error::{Error, Result};
use crate::kappa::{
    calibrate_thresholds, classify_regime, sigma_s, sigma_theta, KappaComponents, Regime, RegimeThresholds,
    ThresholdCalibration,
};
use crate::perturb::{ConditionLabel, ConditionSpec, PerturbedEnv, MASK_SENTINEL};
use crate::policy::{AdaptivePolicy, Decision, DecisionContext, PolicyMode, ScriptedController};
use crate::VERSION;

const EXPLORATION_STREAM: u64 = 11;

/// Frozen ensemble, noise floor and regime thresholds produced by
/// calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSnapshot {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub env: EnvId,
    pub t_pre: usize,
    pub clip: f64,
    pub c_tau: f64,
    pub onset: u64,
    pub ensemble_digest: String,
    pub noise_floor: NoiseFloor,
    pub thresholds: RegimeThresholds,
    /// Absent when thresholds were fixed in the config.
    pub threshold_calibration: Option<ThresholdCalibration>,
    pub ensemble: EnsembleModel,
}

impl CalibrationSnapshot {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let snap: CalibrationSnapshot = serde_json::from_slice(&std::fs::read(path)?)?;
        if !snap.ensemble.is_frozen() || snap.ensemble.noise_floor().is_none() {
            return Err(Error::Calibration("snapshot ensemble is not a calibrated frozen model".into()));
        }
        if snap.ensemble.weights_digest() != snap.ensemble_digest {
            return Err(Error::Calibration("snapshot ensemble digest mismatch".into()));
        }
        Ok(snap)
    }

    pub fn floor(&self) -> NoiseFloor {
        self.noise_floor
    }

    /// Rejects snapshots made for another environment or kappa setup.
    pub fn check_compatible(&self, cfg: &ExperimentConfig) -> Result<()> {
        if self.env != cfg.env || self.clip != cfg.clip || self.c_tau != cfg.c_tau {
            return Err(Error::Config(format!(
                "snapshot was calibrated for {} (clip {}, c_tau {}), config asks for {} (clip {}, c_tau {})",
                self.env, self.clip, self.c_tau, cfg.env, cfg.clip, cfg.c_tau
            )));
        }
        Ok(())
    }
}

/// Writes via a sibling temp file and rename, creating parent dirs.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Baseline rollouts with Gaussian action noise of std `noise_std`, cut
/// into segments of `segment_len` steps, until `n` usable transitions are
/// collected.
pub fn collect_baseline(cfg: &ExperimentConfig, n: usize, seed_offset: u64, noise_std: f64) -> Result<ReplayBuffer> {
    let mut buffer = ReplayBuffer::new(usize::MAX);
    let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut k = 0u64;
    while buffer.usable_len() < n {
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(seed_offset).wrapping_add(k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(EXPLORATION_STREAM);
        let (mut state, mut obs) = if cfg.calibration.random_starts {
            let phys = random_phys(cfg.env, &mut rng);
            env::reset_at(cfg.env, seed, cfg.env.nominal_params(), &phys)?
        } else {
            env::reset(cfg.env, seed, cfg.env.nominal_params())?
        };
        let mut ctl = ScriptedController::new(cfg.env);
        let full = vec![true; cfg.env.obs_dim()];
        let mut segment: Vec<Transition> = Vec::with_capacity(cfg.calibration.segment_len);
        let remaining = n - buffer.usable_len() + 2;
        for _ in 0..cfg.calibration.segment_len.min(remaining.max(3)) {
            if state.is_terminal() {
                break;
            }
            ctl.observe(obs.as_slice(), &full);
            let pref = ctl.preferred(state.goal());
            let a = ActionVec::clamped(pref.as_slice().iter().map(|v| v + noise.sample(&mut rng)));
            ctl.commit(&a);
            let tr = state.step(&a)?;
            obs = tr.next_obs.clone();
            segment.push(tr);
        }
        buffer.push_segment(&segment);
        k += 1;
    }
    Ok(buffer)
}

/// Trains the frozen ensemble on exploratory baseline rollouts, anchors
/// the noise floor on held-out noise-free baseline rollouts and places the
/// regime thresholds.
pub fn calibrate(cfg: &ExperimentConfig) -> Result<CalibrationSnapshot> {
    cfg.validate()?;
    if cfg.t_pre < MIN_CALIBRATION_BUFFER {
        return Err(Error::Calibration(format!(
            "t_pre = {} is below the minimum calibration buffer of {MIN_CALIBRATION_BUFFER} transitions",
            cfg.t_pre
        )));
    }
    let train = collect_baseline(cfg, cfg.t_pre, 0, cfg.calibration.exploration_noise)?;
    // floor is anchored on the plain controller's own transitions
    let held_out = collect_baseline(cfg, cfg.t_pre, 1 << 32, 0.0)?;
    let (d, a) = (cfg.env.obs_dim(), cfg.env.action_dim());
    let mut ensemble = bootstrap_train(&train, d, a, &cfg.ensemble, cfg.t_pre)?;
    let noise_floor = calibrate_noise_floor(&mut ensemble, &held_out)?;
    let mut snap = CalibrationSnapshot {
        version: VERSION.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        env: cfg.env,
        t_pre: cfg.t_pre,
        clip: cfg.clip,
        c_tau: cfg.c_tau,
        onset: cfg.onset,
        ensemble_digest: ensemble.weights_digest(),
        noise_floor,
        thresholds: cfg.thresholds.unwrap_or_else(RegimeThresholds::reference),
        threshold_calibration: None,
        ensemble,
    };
    if cfg.thresholds.is_none() {
        let cal = calibrate_regimes(cfg, &snap)?;
        snap.thresholds = cal.thresholds;
        snap.threshold_calibration = Some(cal);
    }
    Ok(snap)
}

/// Passive (task-only) runs over the grid on the calibration seeds; the
/// per-episode post-onset kappa means place the thresholds.
pub fn calibrate_regimes(cfg: &ExperimentConfig, snap: &CalibrationSnapshot) -> Result<ThresholdCalibration> {
    let cells = cfg.cells_for(&cfg.calibration.seeds)?;
    let opts = EpisodeOptions { mode: PolicyMode::TaskOnly, adapt: false, horizon: cfg.horizon, record_steps: false };
    let mut by_label: BTreeMap<ConditionLabel, Vec<f64>> = BTreeMap::new();
    for (cond, seed) in &cells {
        let out = run_episode(cfg, snap, cond, *seed, &opts)?;
        by_label.entry(cond.label.clone()).or_default().push(out.summary.post_onset_kappa_mean);
    }
    let take = |l: ConditionLabel| by_label.get(&l).cloned().unwrap_or_default();
    let (c1, c4) = (take(ConditionLabel::C1), take(ConditionLabel::C4));
    if c1.is_empty() || c4.is_empty() {
        return Err(Error::Calibration("grid must contain baseline and compound cells".into()));
    }
    let mut singles = BTreeMap::new();
    for l in [ConditionLabel::C2, ConditionLabel::C3] {
        let v = take(l.clone());
        if !v.is_empty() {
            singles.insert(l.to_string(), v);
        }
    }
    calibrate_thresholds(&c1, &singles, &c4)
}

/// How an episode is driven.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOptions {
    pub mode: PolicyMode,
    /// Online updates of the adaptive ensemble after onset.
    pub adapt: bool,
    pub horizon: u64,
    /// Keep per-step records.
    pub record_steps: bool,
}

impl EpisodeOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        EpisodeOptions { mode: cfg.policy_mode, adapt: cfg.adaptation.enabled, horizon: cfg.horizon, record_steps: true }
    }
}

/// One step of telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    /// Observation as seen by the agent.
    pub obs: Vec<f64>,
    pub applied: Vec<f64>,
    pub reward: f64,
    pub risk: f64,
    /// Frozen-ensemble MSE on observed dims; absent before `acc` exists.
    pub mse: Option<f64>,
    pub kappa: KappaComponents,
    pub regime: Regime,
    /// Smoothed kappa the policy acted on at this step.
    pub kappa_control: f64,
    pub policy: Decision,
}

/// Per-episode aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub slug: String,
    pub label: ConditionLabel,
    pub seed: u64,
    pub po: f64,
    pub tau: u32,
    pub shift: Option<String>,
    pub steps: u64,
    pub episode_return: f64,
    pub post_onset_kappa_mean: f64,
    pub post_onset_sigma_theta_mean: f64,
    pub post_onset_mse_mean: f64,
    pub regime_counts: BTreeMap<Regime, u64>,
    pub budget_violations: u64,
    pub fallbacks: u64,
}

pub struct EpisodeOutput {
    pub summary: EpisodeSummary,
    pub steps: Vec<StepRecord>,
    /// Adaptive ensemble at the end of the episode.
    pub adaptive: EnsembleModel,
}

/// Runs one perturbed episode from the nominal parameters.
pub fn run_episode(
    cfg: &ExperimentConfig,
    snap: &CalibrationSnapshot,
    condition: &ConditionSpec,
    seed: u64,
    opts: &EpisodeOptions,
) -> Result<EpisodeOutput> {
    let env_id = cfg.env;
    let d = env_id.obs_dim();
    let frozen = &snap.ensemble;
    let floor = snap.floor();
    let (mut penv, first) = PerturbedEnv::new(env_id, seed, env_id.nominal_params(), condition.clone())?;
    let horizon = opts.horizon.min(penv.state().horizon());
    let mut ctl = ScriptedController::new(env_id);
    let mut policy = AdaptivePolicy::new(env_id, cfg.policy.clone(), snap.thresholds, opts.mode, seed);
    let mut adaptive = frozen.fork_adaptive();
    let mut probe: VecDeque<Sample> = VecDeque::with_capacity(cfg.adaptation.window + 1);

    let mut hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(3);
    let mut obs = first.0;
    let mut kappa_ctrl = 0.0;
    let beta = cfg.policy.kappa_smoothing;
    let mut steps = Vec::new();
    let mut summary = EpisodeSummary {
        slug: condition.slug(env_id),
        label: condition.label.clone(),
        seed,
        po: condition.po(env_id),
        tau: condition.tau(),
        shift: condition.shift.as_ref().map(|s| format!("{}={}", s.param, s.value)),
        steps: 0,
        episode_return: 0.0,
        post_onset_kappa_mean: 0.0,
        post_onset_sigma_theta_mean: 0.0,
        post_onset_mse_mean: 0.0,
        regime_counts: BTreeMap::new(),
        budget_violations: 0,
        fallbacks: 0,
    };
    let (mut k_sum, mut st_sum, mut mse_sum, mut n_post, mut n_mse) = (0.0, 0.0, 0.0, 0u64, 0u64);

    for t in 0..horizon {
        let observed_now = penv.observed(t);
        hist.push_back(obs.clone());
        if hist.len() > 3 {
            hist.pop_front();
        }
        let mut acc = if hist.len() == 3 { acc_feature(&hist[2], &hist[1], &hist[0])? } else { vec![0.0; d] };
        // acc of a hidden channel is hidden too
        let seen_since = penv.observed(t.saturating_sub(2));
        for (k, a) in acc.iter_mut().enumerate() {
            if !observed_now[k] || !seen_since[k] {
                *a = MASK_SENTINEL;
            }
        }
        let mut prefix = obs.clone();
        prefix.extend_from_slice(&acc);

        let belief = ctl.observe(&obs, &observed_now).to_vec();
        let preferred = ctl.preferred(penv.state().goal());
        let ctx = DecisionContext { prefix: &prefix, belief: &belief, preferred: &preferred, kappa: kappa_ctrl };
        let ctx_kappa = ctx.kappa;
        let decision = policy.decide(&ctx, &adaptive)?;
        ctl.commit(&decision.action);

        let out = penv.step(&decision.action)?;
        let tr = out.agent;
        let input = model_input(&obs, &acc, decision.action.as_slice());
        let observed_next = penv.observed(t + 1);
        let both: Vec<bool> = observed_now.iter().zip(&observed_next).map(|(a, b)| *a && *b).collect();
        let mse = if hist.len() == 3 { Some(frozen.mse_observed(&input, tr.delta.as_slice(), Some(&both))?) } else { None };
        let st = mse.map_or(0.0, |m| sigma_theta(m, floor.mu0, floor.sigma0, cfg.clip));
        let (po, tau) = condition.observability_at(env_id, t);
        let ss = sigma_s(po, tau, cfg.c_tau)?;
        let kc = KappaComponents::new(st, ss, t);
        let regime = classify_regime(kc.kappa, &snap.thresholds);

        if opts.adapt && t >= cfg.onset && hist.len() == 3 {
            let mut target = tr.delta.0.clone();
            if both.iter().any(|o| !o) {
                let fill = frozen.mean_prediction(&input)?;
                for (k, ok) in both.iter().enumerate() {
                    if !ok {
                        target[k] = fill[k];
                    }
                }
            }
            probe.push_back(Sample { input, target });
            if probe.len() > cfg.adaptation.window {
                probe.pop_front();
            }
            if (t + 1 - cfg.onset) % cfg.adaptation.interval == 0 {
                adaptive_update(&mut adaptive, probe.make_contiguous())?;
            }
        }

        summary.episode_return += tr.reward;
        summary.steps += 1;
        *summary.regime_counts.entry(regime).or_default() += 1;
        summary.budget_violations += u64::from(decision.violates_budget());
        summary.fallbacks += u64::from(decision.fallback);
        if t >= cfg.onset {
            k_sum += kc.kappa;
            st_sum += st;
            n_post += 1;
            if let Some(m) = mse {
                mse_sum += m;
                n_mse += 1;
            }
        }
        kappa_ctrl = if t == 0 { kc.kappa } else { beta * kc.kappa + (1.0 - beta) * kappa_ctrl };
        if opts.record_steps {
            steps.push(StepRecord {
                t,
                obs: obs.clone(),
                applied: out.applied.as_slice().to_vec(),
                reward: tr.reward,
                risk: tr.risk,
                mse,
                kappa: kc,
                regime,
                kappa_control: ctx_kappa,
                policy: decision,
            });
        }
        obs = tr.next_obs.0;
        if penv.is_terminal() {
            break;
        }
    }
    if n_post > 0 {
        summary.post_onset_kappa_mean = k_sum / n_post as f64;
        summary.post_onset_sigma_theta_mean = st_sum / n_post as f64;
    }
    if n_mse > 0 {
        summary.post_onset_mse_mean = mse_sum / n_mse as f64;
    }
    Ok(EpisodeOutput { summary, steps, adaptive })
}

/// First line of every trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub env: EnvId,
    pub condition: ConditionSpec,
    pub snapshot_digest: String,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine<'a> {
    Header(&'a TraceHeader),
    Step(&'a StepRecord),
    Summary(&'a EpisodeSummary),
}

/// Serializes a trace as JSONL: header, one line per step, summary.
pub fn trace_jsonl(header: &TraceHeader, out: &EpisodeOutput) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    serde_json::to_writer(&mut buf, &TraceLine::Header(header))?;
    buf.push(b'\n');
    for s in &out.steps {
        serde_json::to_writer(&mut buf, &TraceLine::Step(s))?;
        buf.push(b'\n');
    }
    serde_json::to_writer(&mut buf, &TraceLine::Summary(&out.summary))?;
    buf.push(b'\n');
    Ok(buf)
}

/// Reads the kappa components back out of a JSONL trace.
pub fn read_trace_kappa(bytes: &[u8]) -> Result<Vec<KappaComponents>> {
    let mut out = Vec::new();
    for line in bytes.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
        let v: serde_json::Value = serde_json::from_slice(line)?;
        if v.get("kind").and_then(|k| k.as_str()) == Some("step") {
            out.push(serde_json::from_value(v["kappa"].clone())?);
        }
    }
    Ok(out)
}

/// Uniform physical state: DriftBot pose in the goal area with any
/// heading, MassSpring position and velocity in [-1, 1].
pub fn random_phys(env_id: EnvId, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use crate::env::drift_bot::GOAL_SPAN;
    match env_id {
        EnvId::DriftBot => vec![
            rng.random_range(-GOAL_SPAN..GOAL_SPAN),
            rng.random_range(-GOAL_SPAN..GOAL_SPAN),
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        ],
        EnvId::MassSpring1D => vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
    }
}

/// Noiseless transitions under `theta` from random states and actions,
/// for evaluator-side model error. Each sample is the third step of a
/// short random rollout so the acceleration feature is populated.
pub fn ground_truth_samples(env_id: EnvId, theta: &DynamicsParams, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut theta = theta.clone();
    theta.set("noise_scale", 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let phys = random_phys(env_id, &mut rng);
        let (mut state, o0) = env::reset_at(env_id, seed ^ i as u64, theta.clone(), &phys)?;
        let mut obs = vec![o0.0];
        let mut last = None;
        for _ in 0..3 {
            let a = ActionVec::clamped((0..env_id.action_dim()).map(|_| rng.random_range(-1.0..=1.0)));
            let tr = state.step(&a)?;
            obs.push(tr.next_obs.0.clone());
            last = Some(tr);
        }
        let tr = last.expect("three steps taken");
        let acc = acc_feature(&obs[2], &obs[1], &obs[0])?;
        out.push(Sample::new(tr.obs.as_slice(), &acc, tr.action.as_slice(), tr.delta.as_slice()));
    }
    Ok(out)
}

/// Short digest used to tie traces to a snapshot.
pub fn snapshot_digest(snap: &CalibrationSnapshot) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex(&Sha256::digest(&snap.to_json()?))[..16].to_string())
}
