//! Regime-adaptive action selection.
//!
//! Each step the policy scores a finite candidate set with the composite
//! value `r_task + alpha * ig - lambda * r_risk`. The information weight
//! `alpha` rises and the risk budget `delta` falls as `kappa` moves through
//! the transition band. Candidates whose predicted one-step risk exceeds
//! the budget are dropped first; if none remain the least risky candidate
//! is taken.

mod controller;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use controller::{DriftBotController, MassSpringController, ScriptedController};

use crate::ensemble::EnsembleModel;
use crate::env::{ActionVec, EnvId};
use crate::error::{Error, Result};
use crate::kappa::{classify_regime, Regime, RegimeThresholds};
use crate::scalar::Real;

/// Weights of the composite objective at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyWeights<T = f64> {
    pub alpha: T,
    pub lambda: T,
    pub delta: T,
}

/// `alpha_max * ramp(kappa)`: zero below `tau_low`, `alpha_max` above
/// `tau_high`, linear in between.
pub fn alpha_schedule<T: Real>(kappa: T, thr: &RegimeThresholds<T>, alpha_max: T) -> T {
    alpha_max * thr.ramp(kappa)
}

/// `delta_max * (1 - ramp(kappa))`: the risk budget tightens to zero at
/// `tau_high`.
pub fn delta_budget<T: Real>(kappa: T, thr: &RegimeThresholds<T>, delta_max: T) -> T {
    delta_max * (T::one() - thr.ramp(kappa))
}

/// `r_task + alpha * ig - lambda * r_risk`.
pub fn composite_value<T: Real>(r_task: T, ig: T, r_risk: T, w: &PolicyWeights<T>) -> T {
    r_task + w.alpha * ig - w.lambda * r_risk
}

/// Trace of the across-member (population) variance of predicted deltas,
/// given member predictions laid out `M x d`.
pub fn disagreement(member_predictions: &[f64], d: usize) -> f64 {
    let m = (member_predictions.len() / d) as f64;
    // shifted by the first member
    (0..d)
        .map(|k| {
            let x0 = member_predictions[k];
            let (s, s2) = member_predictions
                .iter()
                .skip(k)
                .step_by(d)
                .fold((0.0, 0.0), |(s, s2), v| (s + (v - x0), s2 + (v - x0) * (v - x0)));
            (s2 / m - (s / m) * (s / m)).max(0.0)
        })
        .sum()
}

/// Ensemble disagreement for one candidate action; `prefix` is `[o_t; acc_t]`.
pub fn dis_score(ensemble: &EnsembleModel, prefix: &[f64], candidate: &ActionVec) -> Result<f64> {
    let preds = ensemble.predict_candidates(prefix, &[candidate.as_slice()])?;
    Ok(disagreement(&preds, ensemble.obs_dim))
}

/// Finite candidate set. Index 0 is the task controller's preferred
/// action, index 1 the zero (halt) action, the rest are uniform draws.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateActionSet {
    pub actions: Vec<ActionVec>,
}

impl CandidateActionSet {
    pub fn sample(preferred: &ActionVec, n: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = preferred.dim();
        let mut actions = Vec::with_capacity(n.max(2));
        actions.push(preferred.clone());
        actions.push(ActionVec::zeros(d));
        while actions.len() < n {
            actions.push(ActionVec::clamped((0..d).map(|_| rng.random_range(-1.0..=1.0))));
        }
        CandidateActionSet { actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Components of one candidate's composite value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub r_task: f64,
    pub ig: f64,
    pub risk: f64,
}

/// Selection outcome.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub value: f64,
    /// No candidate met the budget; the least risky one was taken.
    pub fallback: bool,
    pub n_compliant: usize,
}

/// Budget-filtered argmax of the composite value, ties to the lowest index.
pub fn select_action(scores: &[CandidateScore], w: &PolicyWeights) -> Result<Selection> {
    if scores.is_empty() {
        return Err(Error::Input("empty candidate set".into()));
    }
    let value = |s: &CandidateScore| composite_value(s.r_task, s.ig, s.risk, w);
    let n_compliant = scores.iter().filter(|s| s.risk <= w.delta).count();
    let mut best: Option<(usize, f64)> = None;
    if n_compliant > 0 {
        for (i, s) in scores.iter().enumerate().filter(|(_, s)| s.risk <= w.delta) {
            let v = value(s);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
    } else {
        for (i, s) in scores.iter().enumerate() {
            if best.is_none_or(|(bi, _)| s.risk < scores[bi].risk) {
                best = Some((i, value(s)));
            }
        }
    }
    let (index, value) = best.expect("nonempty scores");
    Ok(Selection { index, value, fallback: n_compliant == 0, n_compliant })
}

/// Hyperparameters of the adaptive policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub alpha_max: f64,
    pub lambda: f64,
    pub delta_max: f64,
    pub n_candidates: usize,
    /// Weight of the newest kappa in the exponential average that drives
    /// the schedules; 1 uses the raw per-step value.
    pub kappa_smoothing: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { alpha_max: 8.0, lambda: 1.0, delta_max: 0.5, n_candidates: 32, kappa_smoothing: 1.0 }
    }
}

/// How actions are chosen during an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyMode {
    /// Composite objective with kappa-scheduled weights.
    Adaptive,
    /// Always the task controller's preferred action.
    TaskOnly,
}

/// Inputs available to the policy at one step. No dynamics ground truth
/// is reachable from here.
pub struct DecisionContext<'a> {
    /// `[o_t; acc_t]` as seen by the agent.
    pub prefix: &'a [f64],
    /// Agent's state estimate (observation with hidden dims filled in).
    pub belief: &'a [f64],
    pub preferred: &'a ActionVec,
    pub kappa: f64,
}

/// Per-step policy telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: ActionVec,
    pub regime: Regime,
    pub alpha: f64,
    pub delta: f64,
    pub chosen: usize,
    pub value: f64,
    pub r_task: f64,
    pub ig: f64,
    pub predicted_risk: f64,
    pub fallback: bool,
    pub n_compliant: usize,
}

impl Decision {
    /// Chosen candidate's predicted risk exceeds the budget although a
    /// compliant candidate existed.
    pub fn violates_budget(&self) -> bool {
        self.n_compliant > 0 && self.predicted_risk > self.delta
    }
}

/// Regime-adaptive controller state for one episode.
pub struct AdaptivePolicy {
    env: EnvId,
    config: PolicyConfig,
    thresholds: RegimeThresholds,
    mode: PolicyMode,
    rng: ChaCha8Rng,
}

const POLICY_STREAM: u64 = 7;

impl AdaptivePolicy {
    pub fn new(env: EnvId, config: PolicyConfig, thresholds: RegimeThresholds, mode: PolicyMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(POLICY_STREAM);
        AdaptivePolicy { env, config, thresholds, mode, rng }
    }

    pub fn thresholds(&self) -> &RegimeThresholds {
        &self.thresholds
    }

    pub fn weights(&self, kappa: f64) -> PolicyWeights {
        PolicyWeights {
            alpha: alpha_schedule(kappa, &self.thresholds, self.config.alpha_max),
            lambda: self.config.lambda,
            delta: delta_budget(kappa, &self.thresholds, self.config.delta_max),
        }
    }

    /// Scores candidates with `model` (disagreement and risk prediction) and
    /// picks one.
    pub fn decide(&mut self, ctx: &DecisionContext<'_>, model: &EnsembleModel) -> Result<Decision> {
        let w = self.weights(ctx.kappa);
        let regime = classify_regime(ctx.kappa, &self.thresholds);
        let candidates = match self.mode {
            PolicyMode::Adaptive => CandidateActionSet::sample(ctx.preferred, self.config.n_candidates, &mut self.rng),
            PolicyMode::TaskOnly => CandidateActionSet { actions: vec![ctx.preferred.clone()] },
        };
        let slices: Vec<&[f64]> = candidates.actions.iter().map(ActionVec::as_slice).collect();
        let preds = model.predict_candidates(ctx.prefix, &slices)?;
        let (d, m) = (model.obs_dim, model.len());
        let raw_ig: Vec<f64> = preds.chunks(d * m).map(|p| disagreement(p, d)).collect();
        let max_ig = raw_ig.iter().copied().fold(0.0, f64::max);
        let mut next = vec![0.0; d];
        let scores: Vec<CandidateScore> = candidates
            .actions
            .iter()
            .zip(preds.chunks(d * m))
            .zip(&raw_ig)
            .map(|((c, p), &ig)| {
                for (k, slot) in next.iter_mut().enumerate() {
                    let mean = p.iter().skip(k).step_by(d).sum::<f64>() / m as f64;
                    *slot = ctx.belief[k] + mean;
                }
                let r_task = -c.as_slice().iter().zip(ctx.preferred.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                CandidateScore { r_task, ig: if max_ig > 0.0 { ig / max_ig } else { 0.0 }, risk: self.env.risk(&next) }
            })
            .collect();
        let (sel, w) = match self.mode {
            PolicyMode::Adaptive => (select_action(&scores, &w)?, w),
            PolicyMode::TaskOnly => {
                let w0 = PolicyWeights { alpha: 0.0, ..w };
                let s = &scores[0];
                let value = composite_value(s.r_task, s.ig, s.risk, &w0);
                (Selection { index: 0, value, fallback: false, n_compliant: 0 }, w0)
            }
        };
        let s = scores[sel.index];
        Ok(Decision {
            action: candidates.actions[sel.index].clone(),
            regime,
            alpha: w.alpha,
            delta: w.delta,
            chosen: sel.index,
            value: sel.value,
            r_task: s.r_task,
            ig: s.ig,
            predicted_risk: s.risk,
            fallback: sel.fallback,
            n_compliant: sel.n_compliant,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn thr() -> RegimeThresholds {
        RegimeThresholds::new(0.2, 0.5).unwrap()
    }

    #[test]
    fn alpha_schedule_hand_values() {
        assert_eq!(alpha_schedule(0.1, &thr(), 1.0), 0.0);
        assert!((alpha_schedule(0.35, &thr(), 1.0) - 0.5).abs() < 1e-12);
        assert_eq!(alpha_schedule(0.9, &thr(), 3.0), 3.0);
    }

    #[test]
    fn delta_budget_hand_values() {
        assert_eq!(delta_budget(0.0, &thr(), 2.0), 2.0);
        assert_eq!(delta_budget(0.5, &thr(), 2.0), 0.0);
        assert_eq!(delta_budget(0.7, &thr(), 2.0), 0.0);
        assert!((delta_budget(0.35, &thr(), 2.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn composite_value_hand_values() {
        let w = PolicyWeights { alpha: 1.0, lambda: 2.0, delta: 1.0 };
        assert_eq!(composite_value(1.0, 2.0, 0.5, &w), 2.0);
        let w0 = PolicyWeights { alpha: 0.0, lambda: 0.0, delta: 1.0 };
        assert_eq!(composite_value(-0.7, 5.0, 3.0, &w0), -0.7);
    }

    #[test]
    fn two_member_disagreement() {
        // members predict d and d + e with e = (2, -4): trace = |e|^2 / 4 = 5
        let preds = [1.0, 1.0, 3.0, -3.0];
        assert_eq!(disagreement(&preds, 2), 5.0);
        let swapped = [3.0, -3.0, 1.0, 1.0];
        assert_eq!(disagreement(&swapped, 2), 5.0);
        assert_eq!(disagreement(&[0.4, 0.2, 0.4, 0.2, 0.4, 0.2], 2), 0.0);
    }

    #[test]
    fn zero_alpha_returns_preferred() {
        let scores = [
            CandidateScore { r_task: 0.0, ig: 0.1, risk: 0.0 },
            CandidateScore { r_task: -0.5, ig: 1.0, risk: 0.0 },
        ];
        let w = PolicyWeights { alpha: 0.0, lambda: 1.0, delta: 0.5 };
        assert_eq!(select_action(&scores, &w).unwrap().index, 0);
    }

    #[test]
    fn high_alpha_prefers_disagreement_at_equal_risk() {
        let scores = [
            CandidateScore { r_task: 0.0, ig: 0.2, risk: 0.1 },
            CandidateScore { r_task: -0.5, ig: 1.0, risk: 0.1 },
        ];
        let w = PolicyWeights { alpha: 4.0, lambda: 1.0, delta: 0.5 };
        assert_eq!(select_action(&scores, &w).unwrap().index, 1);
    }

    #[test]
    fn all_over_budget_falls_back_to_min_risk() {
        let scores = [
            CandidateScore { r_task: 0.0, ig: 0.0, risk: 0.9 },
            CandidateScore { r_task: -1.0, ig: 0.0, risk: 0.3 },
            CandidateScore { r_task: -1.0, ig: 0.0, risk: 0.3 },
        ];
        let w = PolicyWeights { alpha: 1.0, lambda: 1.0, delta: 0.1 };
        let s = select_action(&scores, &w).unwrap();
        assert_eq!((s.index, s.fallback, s.n_compliant), (1, true, 0));
    }

    #[test]
    fn empty_candidates_is_input_error() {
        let w = PolicyWeights { alpha: 1.0, lambda: 1.0, delta: 0.1 };
        assert!(matches!(select_action(&[], &w), Err(Error::Input(_))));
    }

    #[test]
    fn candidate_set_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pref = ActionVec::new(vec![0.4, -0.2]).unwrap();
        let c = CandidateActionSet::sample(&pref, 32, &mut rng);
        assert_eq!(c.len(), 32);
        assert_eq!(c.actions[0], pref);
        assert_eq!(c.actions[1], ActionVec::zeros(2));
        assert!(c.actions.iter().all(|a| a.as_slice().iter().all(|v| (-1.0..=1.0).contains(v))));
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(CandidateActionSet::sample(&pref, 32, &mut rng2), c);
    }

    fn score_strategy() -> impl Strategy<Value = Vec<CandidateScore>> {
        prop::collection::vec((-8.0..0.0f64, 0.0..1.0f64, 0.0..1.0f64), 1..20)
            .prop_map(|v| v.into_iter().map(|(r_task, ig, risk)| CandidateScore { r_task, ig, risk }).collect())
    }

    proptest! {
        #[test]
        fn budget_respected_when_possible(scores in score_strategy(), delta in 0.0..1.0f64, alpha in 0.0..5.0f64) {
            let w = PolicyWeights { alpha, lambda: 1.0, delta };
            let s = select_action(&scores, &w).unwrap();
            if scores.iter().any(|c| c.risk <= delta) {
                prop_assert!(scores[s.index].risk <= delta);
                prop_assert!(!s.fallback);
            }
        }

        #[test]
        fn more_alpha_never_lowers_chosen_ig(scores in score_strategy(), a1 in 0.0..5.0f64, da in 0.01..5.0f64) {
            let lo = PolicyWeights { alpha: a1, lambda: 1.0, delta: 1.0 };
            let hi = PolicyWeights { alpha: a1 + da, ..lo };
            let i_lo = select_action(&scores, &lo).unwrap().index;
            let i_hi = select_action(&scores, &hi).unwrap().index;
            prop_assert!(scores[i_hi].ig >= scores[i_lo].ig - 1e-12);
        }

        #[test]
        fn schedules_are_monotone(k in -1.0..2.0f64, dk in 0.0..1.0f64) {
            prop_assert!(alpha_schedule(k + dk, &thr(), 2.0) >= alpha_schedule(k, &thr(), 2.0));
            prop_assert!(delta_budget(k + dk, &thr(), 2.0) <= delta_budget(k, &thr(), 2.0));
        }

        #[test]
        fn value_monotone_in_ig(r in -5.0..5.0f64, ig in 0.0..5.0f64, dig in 0.0..5.0f64, a in 0.0..3.0f64) {
            let w = PolicyWeights { alpha: a, lambda: 1.0, delta: 1.0 };
            prop_assert!(composite_value(r, ig + dig, 0.2, &w) >= composite_value(r, ig, 0.2, &w));
        }
    }
}
