//! Deterministic, seedable simulation environments.
//!
//! Two environments are provided:
//!
//! * [`EnvId::DriftBot`]: a differential-drive robot navigating to a stream
//!   of goals inside a walled arena. A weak wheel (`gain_left < 1`) makes the
//!   robot drift, which from pose data alone looks the same as a pose error.
//! * [`EnvId::MassSpring1D`]: a forced mass on a spring, the sanity
//!   environment where every quantity is hand-checkable.
//!
//! Observation layouts are fixed per environment so that mask specs can
//! address dimensions by index:
//!
//! | env          | 0 | 1 | 2        | 3        |
//! |--------------|---|---|----------|----------|
//! | DriftBot     | x | y | cos(yaw) | sin(yaw) |
//! | MassSpring1D | x | v |          |          |
//!
//! Process noise is drawn from a per-episode stream seeded by the episode
//! seed. No global RNG is used anywhere.

pub mod drift_bot;
pub mod mass_spring;
mod params;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use params::{DynamicsParams, ParamSpec};

/// Integration step in seconds.
pub const DT: f64 = 0.05;
/// Episode length in steps.
pub const HORIZON: u64 = 1000;

const NOISE_STREAM: u64 = 1;
const TASK_STREAM: u64 = 2;

/// Environment identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EnvId {
    DriftBot,
    MassSpring1D,
}

impl EnvId {
    /// Observation dimension `d_total`.
    pub fn obs_dim(self) -> usize {
        match self {
            EnvId::DriftBot => 4,
            EnvId::MassSpring1D => 2,
        }
    }

    /// Action dimension.
    pub fn action_dim(self) -> usize {
        match self {
            EnvId::DriftBot => 2,
            EnvId::MassSpring1D => 1,
        }
    }

    /// Names of the observation dimensions, in index order.
    pub fn obs_names(self) -> &'static [&'static str] {
        match self {
            EnvId::DriftBot => &["x", "y", "cos_yaw", "sin_yaw"],
            EnvId::MassSpring1D => &["x", "v"],
        }
    }

    /// Order in which dimensions are masked when a mask is derived from a
    /// partial-observability fraction: the first `po * d_total` entries are
    /// hidden.
    pub fn mask_priority(self) -> &'static [usize] {
        match self {
            // Position first: losing the position fix forces dead reckoning.
            EnvId::DriftBot => &[0, 1, 2, 3],
            // Velocity first: the regulator can still difference positions.
            EnvId::MassSpring1D => &[1, 0],
        }
    }

    /// Parameter table with bounds and nominal values.
    pub fn param_specs(self) -> &'static [ParamSpec] {
        match self {
            EnvId::DriftBot => drift_bot::PARAMS,
            EnvId::MassSpring1D => mass_spring::PARAMS,
        }
    }

    /// Nominal dynamics parameters.
    pub fn nominal_params(self) -> DynamicsParams {
        DynamicsParams::nominal(self)
    }

    /// Risk model applied to an observation. Used both by the environment
    /// for the realised risk and by the policy on predicted observations.
    pub fn risk(self, obs: &[f64]) -> f64 {
        match self {
            EnvId::DriftBot => drift_bot::risk(obs),
            EnvId::MassSpring1D => mass_spring::risk(obs),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvId::DriftBot => "DriftBot",
            EnvId::MassSpring1D => "MassSpring1D",
        })
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "driftbot" => Ok(EnvId::DriftBot),
            "massspring1d" | "massspring" => Ok(EnvId::MassSpring1D),
            _ => Err(Error::Input(format!("unknown environment `{s}`"))),
        }
    }
}

/// Observation vector `o_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObservationVec(pub Vec<f64>);

impl ObservationVec {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &ObservationVec) -> Result<ObservationVec> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: other.dim() });
        }
        Ok(ObservationVec(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }
}

/// Action vector, every entry in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ActionVec(Vec<f64>);

impl ActionVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("action entry {v} outside [-1, 1]")));
        }
        Ok(ActionVec(values))
    }

    /// Zero action of the given dimension.
    pub fn zeros(dim: usize) -> Self {
        ActionVec(vec![0.0; dim])
    }

    /// Builds an action by clamping each entry into `[-1, 1]`.
    pub fn clamped(values: impl IntoIterator<Item = f64>) -> Self {
        ActionVec(values.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) }).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ActionVec {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ActionVec::new(v)
    }
}

impl From<ActionVec> for Vec<f64> {
    fn from(a: ActionVec) -> Self {
        a.0
    }
}

/// One step of experience.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: ObservationVec,
    pub action: ActionVec,
    pub next_obs: ObservationVec,
    /// `next_obs - obs`, computed elementwise.
    pub delta: ObservationVec,
    pub reward: f64,
    pub risk: f64,
    pub t: u64,
}

impl Transition {
    pub fn new(obs: ObservationVec, action: ActionVec, next_obs: ObservationVec, reward: f64, risk: f64, t: u64) -> Self {
        let delta = next_obs.sub(&obs).expect("observation dims fixed per environment");
        Transition { obs, action, next_obs, delta, reward, risk, t }
    }
}

/// Ordered transitions of one episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub transitions: Vec<Transition>,
    pub terminal: bool,
    pub condition: String,
}

impl EpisodeTrace {
    pub fn new(condition: impl Into<String>) -> Self {
        EpisodeTrace { transitions: Vec::new(), terminal: false, condition: condition.into() }
    }

    /// Sum of rewards.
    pub fn episode_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    /// Writes one transition per line.
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for tr in &self.transitions {
            serde_json::to_writer(&mut w, tr)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads a trace written by [`EpisodeTrace::write_jsonl`]. Lines that are
    /// not transitions (headers, telemetry) are rejected.
    pub fn read_jsonl<R: std::io::BufRead>(r: R, condition: impl Into<String>) -> Result<Self> {
        let mut trace = EpisodeTrace::new(condition);
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            trace.transitions.push(serde_json::from_str(&line)?);
        }
        trace.terminal = trace.transitions.last().is_some_and(|t| t.t + 1 >= HORIZON);
        Ok(trace)
    }
}

/// Full simulator state, including the per-episode random streams.
#[derive(Clone, Debug)]
pub struct EnvState {
    env: EnvId,
    theta: DynamicsParams,
    /// DriftBot: `[x, y, yaw]` (yaw unwrapped). MassSpring1D: `[x, v]`.
    phys: Vec<f64>,
    goal: Option<[f64; 2]>,
    t: u64,
    horizon: u64,
    terminal: bool,
    noise_rng: ChaCha8Rng,
    task_rng: ChaCha8Rng,
}

/// Starts an episode. Equal `(env, seed, theta)` yield bit-identical states.
pub fn reset(env: EnvId, seed: u64, theta: DynamicsParams) -> Result<(EnvState, ObservationVec)> {
    if theta.env() != env {
        return Err(Error::Input(format!("parameters for {} given to {}", theta.env(), env)));
    }
    theta.validate()?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(NOISE_STREAM);
    let mut task_rng = ChaCha8Rng::seed_from_u64(seed);
    task_rng.set_stream(TASK_STREAM);
    let (phys, goal) = match env {
        EnvId::DriftBot => drift_bot::initial(&mut task_rng),
        EnvId::MassSpring1D => mass_spring::initial(&mut task_rng),
    };
    let state = EnvState { env, theta, phys, goal, t: 0, horizon: HORIZON, terminal: false, noise_rng, task_rng };
    let obs = state.observe();
    Ok((state, obs))
}

/// Starts an episode from an explicit physical state (`[x, y, yaw]` or
/// `[x, v]`). The goal stream is still drawn from `seed`.
pub fn reset_at(env: EnvId, seed: u64, theta: DynamicsParams, phys: &[f64]) -> Result<(EnvState, ObservationVec)> {
    let (mut state, _) = reset(env, seed, theta)?;
    if phys.len() != state.phys.len() {
        return Err(Error::Dimension { expected: state.phys.len(), got: phys.len() });
    }
    if phys.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite physical state".into()));
    }
    state.phys.copy_from_slice(phys);
    let obs = state.observe();
    Ok((state, obs))
}

/// Advances the simulation by one step.
pub fn step(state: &mut EnvState, action: &ActionVec) -> Result<Transition> {
    state.step(action)
}

/// Ground-truth dynamics in effect. Evaluator-only channel.
pub fn true_dynamics(state: &EnvState) -> &DynamicsParams {
    &state.theta
}

impl EnvState {
    pub fn env(&self) -> EnvId {
        self.env
    }

    /// Index of the next step to be taken.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    /// Overrides the episode length.
    pub fn set_horizon(&mut self, horizon: u64) {
        self.horizon = horizon;
        self.terminal = self.t >= horizon;
    }

    /// Current task goal (DriftBot only). Part of the task specification
    /// handed to the agent, not of the observation vector.
    pub fn goal(&self) -> Option<[f64; 2]> {
        self.goal
    }

    /// Internal physical state.
    pub fn physical(&self) -> &[f64] {
        &self.phys
    }

    /// Ground-truth dynamics parameters (evaluator channel).
    pub fn true_dynamics(&self) -> &DynamicsParams {
        &self.theta
    }

    /// Replaces one dynamics parameter. Takes effect on the next step.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        self.theta.set(name, value)
    }

    pub fn observe(&self) -> ObservationVec {
        match self.env {
            EnvId::DriftBot => drift_bot::observe(&self.phys),
            EnvId::MassSpring1D => mass_spring::observe(&self.phys),
        }
    }

    pub fn step(&mut self, action: &ActionVec) -> Result<Transition> {
        if self.terminal {
            return Err(Error::Lifecycle(format!("step after terminal at t = {}", self.t)));
        }
        if action.dim() != self.env.action_dim() {
            return Err(Error::Dimension { expected: self.env.action_dim(), got: action.dim() });
        }
        if action.as_slice().iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(Error::Input("action entry outside [-1, 1]".into()));
        }
        let obs = self.observe();
        let reward = match self.env {
            EnvId::DriftBot => drift_bot::advance(
                &mut self.phys,
                &mut self.goal,
                &self.theta,
                action.as_slice(),
                &mut self.noise_rng,
                &mut self.task_rng,
            ),
            EnvId::MassSpring1D => mass_spring::advance(&mut self.phys, &self.theta, action.as_slice(), &mut self.noise_rng),
        };
        let next_obs = self.observe();
        let risk = self.env.risk(next_obs.as_slice());
        let tr = Transition::new(obs, action.clone(), next_obs, reward, risk, self.t);
        self.t += 1;
        if self.t >= self.horizon {
            self.terminal = true;
        }
        Ok(tr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drift(gl: f64, gr: f64, noise: f64) -> DynamicsParams {
        let mut p = EnvId::DriftBot.nominal_params();
        p.set("gain_left", gl).unwrap();
        p.set("gain_right", gr).unwrap();
        p.set("noise_scale", noise).unwrap();
        p
    }

    #[test]
    fn mass_spring_reset_is_deterministic() {
        let p = EnvId::MassSpring1D.nominal_params();
        let (_, a) = reset(EnvId::MassSpring1D, 7, p.clone()).unwrap();
        let (_, b) = reset(EnvId::MassSpring1D, 7, p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn drift_bot_starts_at_origin_heading_zero() {
        let (_, o) = reset(EnvId::DriftBot, 1, drift(1.0, 1.0, 0.05)).unwrap();
        assert_eq!(o.0, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn fault_invisible_before_motion() {
        let (_, nominal) = reset(EnvId::DriftBot, 1, drift(1.0, 1.0, 0.05)).unwrap();
        let (_, faulty) = reset(EnvId::DriftBot, 1, drift(0.5, 1.0, 0.05)).unwrap();
        assert_eq!(nominal, faulty);
    }

    #[test]
    fn out_of_bounds_theta_rejected() {
        let mut p = EnvId::MassSpring1D.nominal_params();
        assert!(p.set("mass", -1.0).is_err());
        assert!(p.set("mass", 0.0).is_err());
        assert!(matches!(p.set("gain_left", 0.5), Err(Error::UnknownParameter { .. })));
    }

    #[test]
    fn mass_spring_equilibrium_is_fixed_point() {
        let mut p = EnvId::MassSpring1D.nominal_params();
        p.set("noise_scale", 0.0).unwrap();
        let (mut s, _) = reset_at(EnvId::MassSpring1D, 3, p, &[0.0, 0.0]).unwrap();
        let tr = s.step(&ActionVec::zeros(1)).unwrap();
        assert_eq!(tr.next_obs.0, vec![0.0, 0.0]);
        assert_eq!(tr.delta.0, vec![0.0, 0.0]);
    }

    #[test]
    fn symmetric_drive_keeps_heading() {
        let (mut s, _) = reset(EnvId::DriftBot, 1, drift(1.0, 1.0, 0.0)).unwrap();
        let a = ActionVec::new(vec![1.0, 1.0]).unwrap();
        let tr = s.step(&a).unwrap();
        assert_eq!(s.physical()[2], 0.0);
        assert!(tr.delta.0[0] > 0.0);
        assert_eq!(tr.delta.0[1], 0.0);
    }

    #[test]
    fn weak_left_wheel_turns_left_by_closed_form() {
        let (mut s, _) = reset(EnvId::DriftBot, 1, drift(0.5, 1.0, 0.0)).unwrap();
        s.step(&ActionVec::new(vec![1.0, 1.0]).unwrap()).unwrap();
        // omega = (1.0 * 1 - 0.5 * 1) * 1 / 0.4 = 1.25 rad/s; dyaw = 1.25 * 0.05
        assert!((s.physical()[2] - 0.0625).abs() < 1e-15);
        // v = (0.5 + 1.0) / 2 = 0.75 m/s at yaw 0
        assert!((s.physical()[0] - 0.0375).abs() < 1e-15);
    }

    #[test]
    fn action_out_of_range_rejected() {
        assert!(ActionVec::new(vec![1.5, 0.0]).is_err());
        let (mut s, _) = reset(EnvId::DriftBot, 1, EnvId::DriftBot.nominal_params()).unwrap();
        assert!(matches!(s.step(&ActionVec::zeros(1)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn step_after_terminal_is_lifecycle_error() {
        let (mut s, _) = reset(EnvId::MassSpring1D, 1, EnvId::MassSpring1D.nominal_params()).unwrap();
        s.set_horizon(2);
        s.step(&ActionVec::zeros(1)).unwrap();
        s.step(&ActionVec::zeros(1)).unwrap();
        assert!(s.is_terminal());
        assert!(matches!(s.step(&ActionVec::zeros(1)), Err(Error::Lifecycle(_))));
    }

    #[test]
    fn true_dynamics_reports_theta() {
        let mut p = EnvId::MassSpring1D.nominal_params();
        p.set("mass", 2.0).unwrap();
        let (s, _) = reset(EnvId::MassSpring1D, 1, p).unwrap();
        assert_eq!(true_dynamics(&s).get("mass").unwrap(), 2.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let (mut s, _) = reset(EnvId::DriftBot, 9, EnvId::DriftBot.nominal_params()).unwrap();
        let mut trace = EpisodeTrace::new("C1");
        for _ in 0..5 {
            trace.transitions.push(s.step(&ActionVec::new(vec![0.3, -0.2]).unwrap()).unwrap());
        }
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let back = EpisodeTrace::read_jsonl(&buf[..], "C1").unwrap();
        assert_eq!(back.transitions, trace.transitions);
    }
}
