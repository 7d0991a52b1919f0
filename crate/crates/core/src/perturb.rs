//! Partial observability, action delay and dynamics shift.
//!
//! Composition order is fixed: the shift acts on the simulator, the delay
//! on the action stream feeding it, and the mask on the observations
//! leaving it (`mask ∘ delay ∘ shift`). [`PerturbedEnv`] applies all three
//! for one episode.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::env::{self, ActionVec, DynamicsParams, EnvId, EnvState, ObservationVec, Transition};
use crate::error::{Error, Result};

/// Default onset step for all perturbations.
pub const DEFAULT_ONSET: u64 = 50;

/// Observation dimensions hidden from `onset_t` on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub masked_dims: BTreeSet<usize>,
    #[serde(default = "default_onset")]
    pub onset_t: u64,
}

/// Action delay of `tau` steps from `onset_t` on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec {
    pub tau: u32,
    #[serde(default = "default_onset")]
    pub onset_t: u64,
}

/// Replacement of one dynamics parameter from `onset_t` on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub param: String,
    pub value: f64,
    #[serde(default = "default_onset")]
    pub onset_t: u64,
}

fn default_onset() -> u64 {
    DEFAULT_ONSET
}

impl MaskSpec {
    pub fn new(masked_dims: impl IntoIterator<Item = usize>, onset_t: u64) -> Self {
        MaskSpec { masked_dims: masked_dims.into_iter().collect(), onset_t }
    }

    /// Mask hiding the first `po * d_total` dimensions of the environment's
    /// mask priority list. `po * d_total` must be an integer.
    pub fn from_fraction(env: EnvId, po: f64, onset_t: u64) -> Result<Self> {
        let d = env.obs_dim();
        let n = po * d as f64;
        if !(0.0..=1.0).contains(&po) || (n - n.round()).abs() > 1e-9 {
            return Err(Error::Spec(format!("PO fraction {po} not representable with d_total = {d}")));
        }
        Ok(MaskSpec::new(env.mask_priority()[..n.round() as usize].iter().copied(), onset_t))
    }

    pub fn validate(&self, d_total: usize) -> Result<()> {
        match self.masked_dims.iter().find(|&&i| i >= d_total) {
            Some(i) => Err(Error::Spec(format!("masked dim {i} out of range for d_total = {d_total}"))),
            None => Ok(()),
        }
    }

    /// `|masked_dims| / d_total`.
    pub fn po_fraction(&self, d_total: usize) -> f64 {
        self.masked_dims.len() as f64 / d_total as f64
    }

    pub fn active(&self, t: u64) -> bool {
        t >= self.onset_t && !self.masked_dims.is_empty()
    }

    /// Per-dimension observed flags at step `t`.
    pub fn observed(&self, d_total: usize, t: u64) -> Vec<bool> {
        (0..d_total).map(|i| !(t >= self.onset_t && self.masked_dims.contains(&i))).collect()
    }
}

/// Sentinel written into masked dimensions.
pub const MASK_SENTINEL: f64 = 0.0;

/// Zero-fills masked dimensions for `t >= onset_t`; identity before.
pub fn apply_mask(obs: &ObservationVec, spec: &MaskSpec, t: u64) -> Result<ObservationVec> {
    spec.validate(obs.dim())?;
    let mut out = obs.clone();
    if t >= spec.onset_t {
        for &i in &spec.masked_dims {
            out.0[i] = MASK_SENTINEL;
        }
    }
    Ok(out)
}

/// Per-episode action queue realising a [`DelaySpec`].
#[derive(Clone, Debug)]
pub struct ActionDelay {
    spec: DelaySpec,
    queue: VecDeque<ActionVec>,
    started: bool,
}

impl ActionDelay {
    pub fn new(spec: DelaySpec) -> Self {
        ActionDelay { spec, queue: VecDeque::new(), started: false }
    }

    /// Accepts the action commanded at step `t` and returns the action
    /// applied at `t`. From onset on, the applied action is the one
    /// commanded `tau` steps earlier; the queue is pre-filled with zero
    /// actions at onset.
    pub fn push(&mut self, t: u64, commanded: ActionVec) -> ActionVec {
        if t < self.spec.onset_t || self.spec.tau == 0 {
            return commanded;
        }
        if !self.started {
            self.started = true;
            self.queue.extend((0..self.spec.tau).map(|_| ActionVec::zeros(commanded.dim())));
        }
        self.queue.push_back(commanded);
        self.queue.pop_front().expect("queue holds tau + 1 actions")
    }
}

/// Delays a finite stream of commanded actions indexed from `t = 0`.
pub fn delay_actions(stream: impl IntoIterator<Item = ActionVec>, spec: &DelaySpec) -> Vec<ActionVec> {
    let mut delay = ActionDelay::new(spec.clone());
    stream.into_iter().enumerate().map(|(t, a)| delay.push(t as u64, a)).collect()
}

/// Sets the shifted parameter once `t >= onset_t`.
pub fn apply_shift(state: &mut EnvState, spec: &ShiftSpec, t: u64) -> Result<()> {
    state.true_dynamics().check(&spec.param, spec.value).map_err(|e| Error::Spec(e.to_string()))?;
    if t >= spec.onset_t {
        state.set_param(&spec.param, spec.value)?;
    }
    Ok(())
}

/// Condition label of the C1-C4 matrix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConditionLabel {
    C1,
    C2,
    C3,
    C4,
    Custom(String),
}

impl fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionLabel::C1 => f.write_str("C1"),
            ConditionLabel::C2 => f.write_str("C2"),
            ConditionLabel::C3 => f.write_str("C3"),
            ConditionLabel::C4 => f.write_str("C4"),
            ConditionLabel::Custom(s) => f.write_str(s),
        }
    }
}

/// One cell of the perturbation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub label: ConditionLabel,
    #[serde(default)]
    pub mask: Option<MaskSpec>,
    #[serde(default)]
    pub delay: Option<DelaySpec>,
    #[serde(default)]
    pub shift: Option<ShiftSpec>,
}

impl ConditionSpec {
    /// Builds a spec with the canonical label implied by its components.
    pub fn labeled(mask: Option<MaskSpec>, delay: Option<DelaySpec>, shift: Option<ShiftSpec>) -> Self {
        let mask = mask.filter(|m| !m.masked_dims.is_empty());
        let delay = delay.filter(|d| d.tau > 0);
        let label = canonical_label(mask.is_some(), delay.is_some() || shift.is_some());
        ConditionSpec { label, mask, delay, shift }
    }

    pub fn baseline() -> Self {
        ConditionSpec { label: ConditionLabel::C1, mask: None, delay: None, shift: None }
    }

    fn has_mask(&self) -> bool {
        self.mask.as_ref().is_some_and(|m| !m.masked_dims.is_empty())
    }

    fn has_dynamics_stressor(&self) -> bool {
        self.delay.as_ref().is_some_and(|d| d.tau > 0) || self.shift.is_some()
    }

    /// Checks the label against the components and the environment.
    pub fn validate(&self, env: EnvId) -> Result<()> {
        if let Some(m) = &self.mask {
            m.validate(env.obs_dim())?;
        }
        if let Some(s) = &self.shift {
            env.nominal_params().check(&s.param, s.value).map_err(|e| Error::Spec(e.to_string()))?;
        }
        let expected = canonical_label(self.has_mask(), self.has_dynamics_stressor());
        match &self.label {
            ConditionLabel::Custom(_) => Ok(()),
            l if *l == expected => Ok(()),
            l => Err(Error::Spec(format!("label {l} inconsistent with components (expected {expected})"))),
        }
    }

    /// Partial-observability fraction implied by the mask.
    pub fn po(&self, env: EnvId) -> f64 {
        self.mask.as_ref().map_or(0.0, |m| m.po_fraction(env.obs_dim()))
    }

    pub fn tau(&self) -> u32 {
        self.delay.as_ref().map_or(0, |d| d.tau)
    }

    /// Earliest onset among active components, if any.
    pub fn onset(&self) -> Option<u64> {
        let m = self.mask.as_ref().filter(|m| !m.masked_dims.is_empty()).map(|m| m.onset_t);
        let d = self.delay.as_ref().filter(|d| d.tau > 0).map(|d| d.onset_t);
        let s = self.shift.as_ref().map(|s| s.onset_t);
        [m, d, s].into_iter().flatten().min()
    }

    /// `(po, tau)` in effect at step `t`: the metadata feeding `sigma_s`.
    pub fn observability_at(&self, env: EnvId, t: u64) -> (f64, u32) {
        let po = self.mask.as_ref().filter(|m| m.active(t)).map_or(0.0, |m| m.po_fraction(env.obs_dim()));
        let tau = self.delay.as_ref().filter(|d| t >= d.onset_t).map_or(0, |d| d.tau);
        (po, tau)
    }

    /// Short stable identifier used for file names.
    pub fn slug(&self, env: EnvId) -> String {
        let shift = match &self.shift {
            Some(s) => format!("{}{}", s.param, s.value),
            None => "none".to_string(),
        };
        format!("{}_po{}_tau{}_shift-{}", self.label, self.po(env), self.tau(), shift)
    }
}

fn canonical_label(mask: bool, dynamics: bool) -> ConditionLabel {
    match (mask, dynamics) {
        (false, false) => ConditionLabel::C1,
        (true, false) => ConditionLabel::C2,
        (false, true) => ConditionLabel::C3,
        (true, true) => ConditionLabel::C4,
    }
}

/// One shift level of the grid: `None` means no shift.
pub type ShiftLevel = Option<ShiftSpec>;

/// Cartesian product of the grid axes, labelled C1-C4. Order is
/// PO-major, then delay, then shift, then seed.
pub fn condition_matrix(
    env: EnvId,
    po_levels: &[f64],
    delay_levels: &[u32],
    shift_levels: &[ShiftLevel],
    seeds: &[u64],
    onset_t: u64,
) -> Result<Vec<(ConditionSpec, u64)>> {
    if po_levels.is_empty() || delay_levels.is_empty() || shift_levels.is_empty() || seeds.is_empty() {
        return Err(Error::Spec("condition matrix axes must be nonempty".into()));
    }
    let mut cells = Vec::with_capacity(po_levels.len() * delay_levels.len() * shift_levels.len() * seeds.len());
    for &po in po_levels {
        let mask = MaskSpec::from_fraction(env, po, onset_t)?;
        for &tau in delay_levels {
            for shift in shift_levels {
                let spec = ConditionSpec::labeled(
                    Some(mask.clone()),
                    Some(DelaySpec { tau, onset_t }),
                    shift.clone().map(|s| ShiftSpec { onset_t, ..s }),
                );
                spec.validate(env)?;
                cells.extend(seeds.iter().map(|&seed| (spec.clone(), seed)));
            }
        }
    }
    Ok(cells)
}

/// What the agent sees after one perturbed step.
#[derive(Clone, Debug)]
pub struct PerturbedStep {
    /// Transition in the agent's view: masked observations, commanded action,
    /// realised reward and risk.
    pub agent: Transition,
    /// Action actually applied to the simulator.
    pub applied: ActionVec,
    /// Unmasked transition as simulated (evaluator view).
    pub truth: Transition,
}

/// Environment wrapped with one condition's perturbations.
#[derive(Clone, Debug)]
pub struct PerturbedEnv {
    state: EnvState,
    condition: ConditionSpec,
    delay: Option<ActionDelay>,
}

impl PerturbedEnv {
    pub fn new(env: EnvId, seed: u64, theta: DynamicsParams, condition: ConditionSpec) -> Result<(Self, ObservationVec)> {
        condition.validate(env)?;
        let (state, obs) = env::reset(env, seed, theta)?;
        let delay = condition.delay.clone().map(ActionDelay::new);
        let wrapped = PerturbedEnv { state, condition, delay };
        let obs = wrapped.mask(&obs, 0)?;
        Ok((wrapped, obs))
    }

    pub fn env(&self) -> EnvId {
        self.state.env()
    }

    pub fn condition(&self) -> &ConditionSpec {
        &self.condition
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn t(&self) -> u64 {
        self.state.t()
    }

    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal()
    }

    /// Ground-truth parameters (evaluator channel).
    pub fn true_dynamics(&self) -> &DynamicsParams {
        self.state.true_dynamics()
    }

    /// Observed flags for the observation with time index `t`.
    pub fn observed(&self, t: u64) -> Vec<bool> {
        let d = self.env().obs_dim();
        self.condition.mask.as_ref().map_or_else(|| vec![true; d], |m| m.observed(d, t))
    }

    fn mask(&self, obs: &ObservationVec, t: u64) -> Result<ObservationVec> {
        match &self.condition.mask {
            Some(m) => apply_mask(obs, m, t),
            None => Ok(obs.clone()),
        }
    }

    pub fn step(&mut self, commanded: &ActionVec) -> Result<PerturbedStep> {
        let t = self.state.t();
        if let Some(shift) = &self.condition.shift {
            apply_shift(&mut self.state, shift, t)?;
        }
        let applied = match &mut self.delay {
            Some(d) => d.push(t, commanded.clone()),
            None => commanded.clone(),
        };
        let truth = self.state.step(&applied)?;
        let obs = self.mask(&truth.obs, t)?;
        let next_obs = self.mask(&truth.next_obs, t + 1)?;
        let agent = Transition::new(obs, commanded.clone(), next_obs, truth.reward, truth.risk, t);
        Ok(PerturbedStep { agent, applied, truth })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(x: f64) -> ActionVec {
        ActionVec::new(vec![x]).unwrap()
    }

    #[test]
    fn empty_mask_is_identity() {
        let o = ObservationVec(vec![1.0, 2.0, 3.0, 4.0]);
        let m = MaskSpec::new([], 0);
        for t in [0, 10, 1000] {
            assert_eq!(apply_mask(&o, &m, t).unwrap(), o);
        }
    }

    #[test]
    fn half_mask_zeroes_two_dims() {
        let o = ObservationVec(vec![1.0, 2.0, 3.0, 4.0]);
        let m = MaskSpec::new([0, 1], 50);
        assert_eq!(m.po_fraction(4), 0.5);
        assert_eq!(apply_mask(&o, &m, 50).unwrap().0, vec![0.0, 0.0, 3.0, 4.0]);
        assert_eq!(apply_mask(&o, &m, 49).unwrap(), o);
    }

    #[test]
    fn mask_index_out_of_range() {
        let o = ObservationVec(vec![1.0, 2.0]);
        assert!(matches!(apply_mask(&o, &MaskSpec::new([2], 0), 5), Err(Error::Spec(_))));
    }

    #[test]
    fn zero_delay_is_identity() {
        let cmds: Vec<_> = [0.1, 0.2, 0.3].iter().map(|&x| a(x)).collect();
        assert_eq!(delay_actions(cmds.clone(), &DelaySpec { tau: 0, onset_t: 0 }), cmds);
    }

    #[test]
    fn unit_delay_shifts_by_one() {
        let cmds: Vec<_> = [0.1, 0.2, 0.3].iter().map(|&x| a(x)).collect();
        let out = delay_actions(cmds, &DelaySpec { tau: 1, onset_t: 0 });
        assert_eq!(out, vec![a(0.0), a(0.1), a(0.2)]);
    }

    #[test]
    fn delay_prefills_zeros_at_onset() {
        let cmds: Vec<_> = (0..8).map(|i| a(0.1 * (i + 1) as f64)).collect();
        let out = delay_actions(cmds.clone(), &DelaySpec { tau: 3, onset_t: 2 });
        assert_eq!(&out[..2], &cmds[..2]);
        assert!(out[2..5].iter().all(|x| *x == a(0.0)));
        assert_eq!(out[5], cmds[2]);
    }

    #[test]
    fn two_by_two_grid_labels() {
        let cells = condition_matrix(EnvId::DriftBot, &[0.0, 0.5], &[0, 1], &[None], &[1], 50).unwrap();
        let labels: Vec<_> = cells.iter().map(|(c, _)| c.label.clone()).collect();
        assert_eq!(labels, vec![ConditionLabel::C1, ConditionLabel::C3, ConditionLabel::C2, ConditionLabel::C4]);
    }

    #[test]
    fn singleton_grid_is_c1() {
        let cells = condition_matrix(EnvId::MassSpring1D, &[0.0], &[0], &[None], &[3], 50).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].0.label, ConditionLabel::C1);
        assert_eq!(cells[0].1, 3);
    }

    #[test]
    fn empty_axis_rejected() {
        assert!(condition_matrix(EnvId::DriftBot, &[], &[0], &[None], &[1], 50).is_err());
    }

    #[test]
    fn mislabeled_condition_rejected() {
        let mut c = ConditionSpec::labeled(Some(MaskSpec::new([0], 50)), None, None);
        assert_eq!(c.label, ConditionLabel::C2);
        c.label = ConditionLabel::C3;
        assert!(c.validate(EnvId::DriftBot).is_err());
    }

    #[test]
    fn shift_schedule_visible_to_evaluator() {
        let shift = ShiftSpec { param: "mass".into(), value: 2.0, onset_t: 50 };
        let cond = ConditionSpec::labeled(None, None, Some(shift));
        let (mut e, _) = PerturbedEnv::new(EnvId::MassSpring1D, 4, EnvId::MassSpring1D.nominal_params(), cond).unwrap();
        let mut seen = Vec::new();
        for _ in 0..60 {
            e.step(&a(0.0)).unwrap();
            seen.push(e.true_dynamics().get("mass").unwrap());
        }
        // seen[t] is the mass in effect during step t
        assert_eq!(seen[49], 1.0);
        assert_eq!(seen[50], 2.0);
        assert!(seen[50..].iter().all(|&m| m == 2.0));
    }

    #[test]
    fn out_of_bounds_shift_is_spec_error() {
        let (mut s, _) = env::reset(EnvId::DriftBot, 1, EnvId::DriftBot.nominal_params()).unwrap();
        let bad = ShiftSpec { param: "gain_left".into(), value: 1.5, onset_t: 0 };
        assert!(matches!(apply_shift(&mut s, &bad, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn from_fraction_uses_priority() {
        let m = MaskSpec::from_fraction(EnvId::DriftBot, 0.5, 50).unwrap();
        assert_eq!(m.masked_dims.iter().copied().collect::<Vec<_>>(), vec![0, 1]);
        assert!(MaskSpec::from_fraction(EnvId::DriftBot, 0.3, 50).is_err());
    }
}
