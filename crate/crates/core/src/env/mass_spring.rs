//! Forced mass on a spring: `x'' = (-k x + u) / m`, semi-implicit Euler.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ObservationVec, ParamSpec, DT};
use crate::env::DynamicsParams;

/// Force applied by a unit action.
pub const U_MAX: f64 = 1.0;
/// Displacement beyond which overshoot risk accrues.
pub const X_LIMIT: f64 = 1.0;

pub(super) const PARAMS: &[ParamSpec] = &[
    ParamSpec { name: "mass", lo: 0.0, hi: 10.0, lo_open: true, nominal: 1.0 },
    ParamSpec { name: "stiffness", lo: 0.0, hi: 10.0, lo_open: true, nominal: 1.0 },
    ParamSpec { name: "noise_scale", lo: 0.0, hi: 1.0, lo_open: false, nominal: 0.05 },
];

pub(super) fn initial(task_rng: &mut ChaCha8Rng) -> (Vec<f64>, Option<[f64; 2]>) {
    let mag: f64 = task_rng.random_range(0.5..1.0);
    let x0 = if task_rng.random::<bool>() { mag } else { -mag };
    (vec![x0, 0.0], None)
}

pub(super) fn observe(phys: &[f64]) -> ObservationVec {
    ObservationVec(vec![phys[0], phys[1]])
}

/// Overshoot beyond [`X_LIMIT`], zero inside.
pub(super) fn risk(obs: &[f64]) -> f64 {
    let over = obs[0].abs() - X_LIMIT;
    if over > 0.0 {
        over
    } else {
        0.0
    }
}

pub(super) fn advance(phys: &mut [f64], theta: &DynamicsParams, action: &[f64], noise_rng: &mut ChaCha8Rng) -> f64 {
    let [mass, stiffness, noise] = theta.raw() else { unreachable!("MassSpring1D has three parameters") };
    let eps: f64 = noise_rng.sample(StandardNormal);
    let accel = (-stiffness * phys[0] + U_MAX * action[0]) / mass + noise * eps;
    phys[1] += accel * DT;
    phys[0] += phys[1] * DT;
    -phys[0].abs()
}
