//! Differential-drive robot.
//!
//! `v = v_max (g_L a_L + g_R a_R) / 2`, `omega = (g_R a_R - g_L a_L) v_max / W`,
//! Euler-integrated at [`DT`]. Wheel noise `noise_scale * N(0, 1)` is added
//! to each wheel command after the gain.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ObservationVec, ParamSpec, DT};
use crate::env::DynamicsParams;

pub const V_MAX: f64 = 1.0;
pub const WHEEL_BASE: f64 = 0.4;
/// Arena half-width; the pose is clamped to `[-ARENA, ARENA]^2`.
pub const ARENA: f64 = 5.0;
/// Goals are drawn uniformly from `[-GOAL_SPAN, GOAL_SPAN]^2`.
pub const GOAL_SPAN: f64 = 3.0;
pub const GOAL_RADIUS: f64 = 0.25;
/// Width of the band along the walls where risk is non-zero.
pub const RISK_MARGIN: f64 = 1.0;
pub const CONTROL_COST: f64 = 0.01;

pub(super) const PARAMS: &[ParamSpec] = &[
    ParamSpec { name: "gain_left", lo: 0.0, hi: 1.0, lo_open: false, nominal: 1.0 },
    ParamSpec { name: "gain_right", lo: 0.0, hi: 1.0, lo_open: false, nominal: 1.0 },
    ParamSpec { name: "noise_scale", lo: 0.0, hi: 1.0, lo_open: false, nominal: 0.05 },
];

pub(super) fn initial(task_rng: &mut ChaCha8Rng) -> (Vec<f64>, Option<[f64; 2]>) {
    (vec![0.0, 0.0, 0.0], Some(sample_goal(task_rng, [0.0, 0.0])))
}

fn sample_goal(rng: &mut ChaCha8Rng, from: [f64; 2]) -> [f64; 2] {
    loop {
        let g = [rng.random_range(-GOAL_SPAN..GOAL_SPAN), rng.random_range(-GOAL_SPAN..GOAL_SPAN)];
        if dist(g, from) > 4.0 * GOAL_RADIUS {
            return g;
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub(super) fn observe(phys: &[f64]) -> ObservationVec {
    let (s, c) = phys[2].sin_cos();
    ObservationVec(vec![phys[0], phys[1], c, s])
}

/// Boundary-proximity penalty in `[0, 1]`.
pub(super) fn risk(obs: &[f64]) -> f64 {
    let wall = ARENA - obs[0].abs().max(obs[1].abs());
    ((RISK_MARGIN - wall) / RISK_MARGIN).clamp(0.0, 1.0)
}

/// Applies one step and returns the reward.
pub(super) fn advance(
    phys: &mut [f64],
    goal: &mut Option<[f64; 2]>,
    theta: &DynamicsParams,
    action: &[f64],
    noise_rng: &mut ChaCha8Rng,
    task_rng: &mut ChaCha8Rng,
) -> f64 {
    let [gain_left, gain_right, noise] = theta.raw() else { unreachable!("DriftBot has three parameters") };
    let eps_l: f64 = noise_rng.sample(StandardNormal);
    let eps_r: f64 = noise_rng.sample(StandardNormal);
    let wl = gain_left * action[0] + noise * eps_l;
    let wr = gain_right * action[1] + noise * eps_r;
    let v = V_MAX * (wl + wr) / 2.0;
    let omega = (wr - wl) * V_MAX / WHEEL_BASE;

    let before = [phys[0], phys[1]];
    let (s, c) = phys[2].sin_cos();
    phys[0] = (phys[0] + v * c * DT).clamp(-ARENA, ARENA);
    phys[1] = (phys[1] + v * s * DT).clamp(-ARENA, ARENA);
    phys[2] += omega * DT;
    let after = [phys[0], phys[1]];

    let g = goal.expect("DriftBot always has a goal");
    let progress = dist(before, g) - dist(after, g);
    if dist(after, g) < GOAL_RADIUS {
        *goal = Some(sample_goal(task_rng, after));
    }
    progress - CONTROL_COST * (action[0] * action[0] + action[1] * action[1])
}
