//! Scripted task controllers.
//!
//! Hidden observation dims are filled in by dead reckoning under the
//! nominal model, so the controller's belief drifts when the true
//! dynamics or actuation differ from nominal.

use crate::env::drift_bot::{GOAL_RADIUS, V_MAX, WHEEL_BASE};
use crate::env::{ActionVec, EnvId, DT};

const HEADING_GAIN: f64 = 1.0;
const DISTANCE_GAIN: f64 = 1.0;
const SPRING_KP: f64 = 2.0;
const SPRING_KV: f64 = 1.5;

/// Goal-seeking differential-drive controller.
#[derive(Clone, Debug, Default)]
pub struct DriftBotController {
    belief: Vec<f64>,
    predicted: Option<Vec<f64>>,
}

impl DriftBotController {
    pub fn new() -> Self {
        Self::default()
    }

    fn nominal_step(b: &[f64], a: &[f64]) -> Vec<f64> {
        let yaw = b[3].atan2(b[2]);
        let v = 0.5 * (a[0] + a[1]) * V_MAX;
        let w = (a[1] - a[0]) * V_MAX / WHEEL_BASE;
        let y2 = yaw + w * DT;
        vec![b[0] + v * yaw.cos() * DT, b[1] + v * yaw.sin() * DT, y2.cos(), y2.sin()]
    }

    fn preferred(&self, goal: Option<[f64; 2]>) -> ActionVec {
        let Some([gx, gy]) = goal else { return ActionVec::zeros(2) };
        let b = &self.belief;
        let (dx, dy) = (gx - b[0], gy - b[1]);
        let dist = dx.hypot(dy);
        if dist < 0.5 * GOAL_RADIUS {
            return ActionVec::zeros(2);
        }
        let err = wrap(dy.atan2(dx) - b[3].atan2(b[2]));
        let forward = (DISTANCE_GAIN * dist).min(1.0) * err.cos().max(0.0);
        let turn = (HEADING_GAIN * err).clamp(-1.0, 1.0);
        ActionVec::clamped([forward - turn, forward + turn])
    }
}

fn wrap(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    (a + std::f64::consts::PI).rem_euclid(tau) - std::f64::consts::PI
}

/// PD regulator driving the mass to the origin.
#[derive(Clone, Debug, Default)]
pub struct MassSpringController {
    belief: Vec<f64>,
    predicted: Option<Vec<f64>>,
    prev_x: Option<f64>,
}

impl MassSpringController {
    pub fn new() -> Self {
        Self::default()
    }

    fn nominal_step(b: &[f64], a: &[f64]) -> Vec<f64> {
        let v = b[1] + (-b[0] + a[0]) * DT;
        vec![b[0] + v * DT, v]
    }

    fn preferred(&self) -> ActionVec {
        let b = &self.belief;
        ActionVec::clamped([-SPRING_KP * b[0] - SPRING_KV * b[1]])
    }
}

/// Task controller used by both the adaptive and the task-only policy.
#[derive(Clone, Debug)]
pub enum ScriptedController {
    DriftBot(DriftBotController),
    MassSpring(MassSpringController),
}

impl ScriptedController {
    pub fn new(env: EnvId) -> Self {
        match env {
            EnvId::DriftBot => ScriptedController::DriftBot(DriftBotController::new()),
            EnvId::MassSpring1D => ScriptedController::MassSpring(MassSpringController::new()),
        }
    }

    /// Folds in the latest (possibly masked) observation and returns the
    /// updated belief.
    pub fn observe(&mut self, obs: &[f64], observed: &[bool]) -> &[f64] {
        match self {
            ScriptedController::DriftBot(c) => {
                c.belief = fuse(obs, observed, c.predicted.as_deref());
                let n = c.belief[2].hypot(c.belief[3]);
                if n > 0.0 {
                    c.belief[2] /= n;
                    c.belief[3] /= n;
                } else {
                    c.belief[2] = 1.0;
                }
                &c.belief
            }
            ScriptedController::MassSpring(c) => {
                let mut b = fuse(obs, observed, c.predicted.as_deref());
                if !observed[1] && observed[0] {
                    if let Some(px) = c.prev_x {
                        b[1] = (b[0] - px) / DT;
                    }
                }
                c.prev_x = Some(b[0]);
                c.belief = b;
                &c.belief
            }
        }
    }

    pub fn belief(&self) -> &[f64] {
        match self {
            ScriptedController::DriftBot(c) => &c.belief,
            ScriptedController::MassSpring(c) => &c.belief,
        }
    }

    /// Action the task alone would choose from the current belief.
    pub fn preferred(&self, goal: Option<[f64; 2]>) -> ActionVec {
        match self {
            ScriptedController::DriftBot(c) => c.preferred(goal),
            ScriptedController::MassSpring(c) => c.preferred(),
        }
    }

    /// Records the commanded action for the next dead-reckoning prediction.
    pub fn commit(&mut self, commanded: &ActionVec) {
        match self {
            ScriptedController::DriftBot(c) => {
                c.predicted = Some(DriftBotController::nominal_step(&c.belief, commanded.as_slice()))
            }
            ScriptedController::MassSpring(c) => {
                c.predicted = Some(MassSpringController::nominal_step(&c.belief, commanded.as_slice()))
            }
        }
    }
}

fn fuse(obs: &[f64], observed: &[bool], predicted: Option<&[f64]>) -> Vec<f64> {
    obs.iter()
        .enumerate()
        .map(|(k, &o)| match predicted {
            Some(p) if !observed[k] => p[k],
            _ => o,
        })
        .collect()
}
