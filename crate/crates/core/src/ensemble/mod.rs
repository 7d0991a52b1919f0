//! Bootstrapped ensemble of two-layer dynamics predictors.
//!
//! Each member maps `[o_t; acc_t; a_t]` to the observation delta
//! `o_{t+1} - o_t`. Members are trained on independent with-replacement
//! resamples of a baseline buffer. After [`calibrate_noise_floor`] the model
//! is frozen and its mean squared error on baseline data becomes the noise
//! floor `(mu0, sigma0)` against which later errors are scored.
//!
//! An adaptive copy ([`EnsembleModel::fork_adaptive`]) can keep learning
//! from probe transitions through [`adaptive_update`] while the frozen
//! baseline stays untouched.

mod buffer;
mod mlp;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use buffer::{model_input, ReplayBuffer, Sample};
pub use mlp::Predictor;
use mlp::Scratch;

/// Minimum standard deviation of the noise floor.
pub const SIGMA0_FLOOR: f64 = 1e-8;
/// Smallest buffer accepted by CLI calibration.
pub const MIN_CALIBRATION_BUFFER: usize = 32;

/// Second-order finite difference `o_t - 2 o_{t-1} + o_{t-2}`.
pub fn acc_feature<T: Real>(o_t: &[T], o_t1: &[T], o_t2: &[T]) -> Result<Vec<T>> {
    if o_t1.len() != o_t.len() {
        return Err(Error::Dimension { expected: o_t.len(), got: o_t1.len() });
    }
    if o_t2.len() != o_t.len() {
        return Err(Error::Dimension { expected: o_t.len(), got: o_t2.len() });
    }
    let two = T::lit(2.0);
    Ok(o_t.iter().zip(o_t1).zip(o_t2).map(|((&a, &b), &c)| a - two * b + c).collect())
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    /// Ensemble size `M`.
    pub members: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Gradient passes over the probe set per adaptive update.
    pub adaptive_epochs: usize,
    pub adaptive_lr: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            members: 5,
            hidden: 64,
            epochs: 50,
            lr: 0.02,
            batch_size: 8,
            seed: 0,
            adaptive_epochs: 5,
            adaptive_lr: 0.05,
        }
    }
}

/// Baseline error statistics `(mu0, sigma0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseFloor {
    pub mu0: f64,
    pub sigma0: f64,
}

impl NoiseFloor {
    /// Builds a floor from per-transition errors: mean and population
    /// standard deviation, the latter floored at [`SIGMA0_FLOOR`].
    pub fn from_errors(errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::Calibration("no transitions to calibrate the noise floor".into()));
        }
        let n = errors.len() as f64;
        let mu0 = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mu0) * (e - mu0)).sum::<f64>() / n;
        Ok(NoiseFloor { mu0, sigma0: var.sqrt().max(SIGMA0_FLOOR) })
    }
}

/// Per-dimension affine normalisation of inputs and targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
}

impl Scaler {
    fn fit(samples: &[Sample]) -> Self {
        let stats = |get: &dyn Fn(&Sample) -> &[f64]| {
            let d = get(&samples[0]).len();
            let n = samples.len() as f64;
            let mut mean = vec![0.0; d];
            for s in samples {
                for (m, v) in mean.iter_mut().zip(get(s)) {
                    *m += v / n;
                }
            }
            let mut std = vec![0.0; d];
            for s in samples {
                for ((sd, v), m) in std.iter_mut().zip(get(s)).zip(&mean) {
                    *sd += (v - m) * (v - m) / n;
                }
            }
            // constant columns pass through unscaled
            let std = std.into_iter().map(|v| if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 }).collect();
            (mean, std)
        };
        let (in_mean, in_std) = stats(&|s| &s.input);
        let (out_mean, out_std) = stats(&|s| &s.target);
        Scaler { in_mean, in_std, out_mean, out_std }
    }

    fn input(&self, x: &[f64], out: &mut [f64]) {
        self.input_at(0, x, out);
    }

    /// Normalises a slice of the input vector starting at `offset`.
    fn input_at(&self, offset: usize, x: &[f64], out: &mut [f64]) {
        for (i, (o, v)) in out.iter_mut().zip(x).enumerate() {
            *o = (v - self.in_mean[offset + i]) / self.in_std[offset + i];
        }
    }

    fn target(&self, y: &[f64], out: &mut [f64]) {
        for ((o, v), (m, s)) in out.iter_mut().zip(y).zip(self.out_mean.iter().zip(&self.out_std)) {
            *o = (v - m) / s;
        }
    }

    fn output(&self, z: &mut [f64]) {
        for ((v, m), s) in z.iter_mut().zip(&self.out_mean).zip(&self.out_std) {
            *v = *v * s + m;
        }
    }
}

/// `M` bootstrapped predictors with shared normalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub config: EnsembleConfig,
    members: Vec<Predictor>,
    scaler: Scaler,
    frozen: bool,
    noise_floor: Option<NoiseFloor>,
    /// Number of adaptive updates applied (seeds their shuffles).
    #[serde(default)]
    updates: u64,
}

impl EnsembleModel {
    pub fn members(&self) -> &[Predictor] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn noise_floor(&self) -> Option<NoiseFloor> {
        self.noise_floor
    }

    pub fn input_dim(&self) -> usize {
        2 * self.obs_dim + self.action_dim
    }

    /// Irreversibly freezes the weights.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Unfrozen copy that keeps the calibrated noise floor.
    pub fn fork_adaptive(&self) -> EnsembleModel {
        EnsembleModel { frozen: false, updates: 0, ..self.clone() }
    }

    /// SHA-256 over all weights, for detecting mutation after freezing.
    pub fn weights_digest(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.members {
            for v in m.w1.iter().chain(&m.b1).chain(&m.w2).chain(&m.b2) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), got: input.len() });
        }
        Ok(())
    }

    /// Raw-unit predictions of every member, `M x obs_dim` row-major.
    pub fn predict_all(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let d = self.obs_dim;
        let mut z = vec![0.0; input.len()];
        self.scaler.input(input, &mut z);
        let mut out = vec![0.0; self.members.len() * d];
        for (m, chunk) in self.members.iter().zip(out.chunks_mut(d)) {
            m.forward(&z, chunk);
            self.scaler.output(chunk);
        }
        Ok(out)
    }

    /// Member predictions for many candidate actions sharing the same
    /// `[o_t; acc_t]` prefix. Output layout: candidate-major, then member,
    /// then dimension.
    pub fn predict_candidates(&self, prefix: &[f64], candidates: &[&[f64]]) -> Result<Vec<f64>> {
        if prefix.len() != 2 * self.obs_dim {
            return Err(Error::Dimension { expected: 2 * self.obs_dim, got: prefix.len() });
        }
        if let Some(c) = candidates.iter().find(|c| c.len() != self.action_dim) {
            return Err(Error::Dimension { expected: self.action_dim, got: c.len() });
        }
        let (d, m_count) = (self.obs_dim, self.members.len());
        let mut zp = vec![0.0; prefix.len()];
        self.scaler.input(prefix, &mut zp);
        let hidden = self.config.hidden;
        let mut partials = vec![0.0; m_count * hidden];
        for (m, p) in self.members.iter().zip(partials.chunks_mut(hidden)) {
            m.partial_pre(&zp, p);
        }
        let mut out = vec![0.0; candidates.len() * m_count * d];
        let mut za = vec![0.0; self.action_dim];
        let mut act = vec![0.0; hidden];
        for (ci, c) in candidates.iter().enumerate() {
            self.scaler.input_at(prefix.len(), c, &mut za);
            for (mi, m) in self.members.iter().enumerate() {
                let slot = &mut out[(ci * m_count + mi) * d..(ci * m_count + mi + 1) * d];
                m.finish(&partials[mi * hidden..(mi + 1) * hidden], &za, &mut act, slot);
                self.scaler.output(slot);
            }
        }
        Ok(out)
    }

    /// Mean prediction across members.
    pub fn mean_prediction(&self, input: &[f64]) -> Result<Vec<f64>> {
        let all = self.predict_all(input)?;
        Ok(column_mean(&all, self.obs_dim))
    }

    /// `(1/M) sum_m ||f_m(x) - delta||^2` in raw units.
    pub fn mse(&self, input: &[f64], delta: &[f64]) -> Result<f64> {
        self.mse_observed(input, delta, None)
    }

    /// Ensemble MSE restricted to the dimensions flagged as observed.
    pub fn mse_observed(&self, input: &[f64], delta: &[f64], observed: Option<&[bool]>) -> Result<f64> {
        if delta.len() != self.obs_dim {
            return Err(Error::Dimension { expected: self.obs_dim, got: delta.len() });
        }
        if let Some(o) = observed {
            if o.len() != self.obs_dim {
                return Err(Error::Dimension { expected: self.obs_dim, got: o.len() });
            }
        }
        let all = self.predict_all(input)?;
        let per_member: Vec<f64> = all
            .chunks(self.obs_dim)
            .map(|p| {
                p.iter()
                    .zip(delta)
                    .enumerate()
                    .filter(|(i, _)| observed.is_none_or(|o| o[*i]))
                    .map(|(_, (a, b))| (a - b) * (a - b))
                    .sum()
            })
            .collect();
        Ok(ensemble_mse_from_errors(&per_member))
    }

    /// Mean ensemble MSE over a set of samples.
    pub fn mean_mse(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Input("no samples".into()));
        }
        let mut total = 0.0;
        for s in samples {
            total += self.mse(&s.input, &s.target)?;
        }
        Ok(total / samples.len() as f64)
    }

    fn train_members(&mut self, samples: &[Sample], epochs: usize, lr: f64, seed: u64, resample: bool) {
        let (d_in, d_out) = (self.input_dim(), self.obs_dim);
        let normed: Vec<(Vec<f64>, Vec<f64>)> = samples
            .iter()
            .map(|s| {
                let mut x = vec![0.0; d_in];
                let mut y = vec![0.0; d_out];
                self.scaler.input(&s.input, &mut x);
                self.scaler.target(&s.target, &mut y);
                (x, y)
            })
            .collect();
        let batch_size = self.config.batch_size.max(1);
        self.members.par_iter_mut().enumerate().for_each(|(mi, member)| {
            let mut rng = member_rng(seed, mi);
            let n = normed.len();
            let mut idx: Vec<usize> = if resample { (0..n).map(|_| rng.random_range(0..n)).collect() } else { (0..n).collect() };
            let mut scratch = Scratch::default();
            for _ in 0..epochs {
                idx.shuffle(&mut rng);
                for chunk in idx.chunks(batch_size) {
                    let batch: Vec<(&[f64], &[f64])> =
                        chunk.iter().map(|&i| (normed[i].0.as_slice(), normed[i].1.as_slice())).collect();
                    member.sgd_step(&batch, lr, &mut scratch);
                }
            }
        });
    }
}

fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member as u64 + 1);
    rng
}

/// Arithmetic mean of per-member squared-error norms.
pub fn ensemble_mse_from_errors(per_member_sq_err: &[f64]) -> f64 {
    per_member_sq_err.iter().sum::<f64>() / per_member_sq_err.len() as f64
}

fn column_mean(rows: &[f64], d: usize) -> Vec<f64> {
    let n = (rows.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for r in rows.chunks(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    mean
}

/// Trains `config.members` predictors, each on its own bootstrap resample of
/// the buffer (size equal to the buffer, with replacement).
///
/// `min_len` is the required number of usable transitions.
pub fn bootstrap_train(
    buffer: &ReplayBuffer,
    obs_dim: usize,
    action_dim: usize,
    config: &EnsembleConfig,
    min_len: usize,
) -> Result<EnsembleModel> {
    if config.members < 2 {
        return Err(Error::Input(format!("ensemble needs at least 2 members, got {}", config.members)));
    }
    let samples = buffer.samples();
    if samples.len() < min_len.max(1) {
        return Err(Error::Calibration(format!(
            "buffer has {} usable transitions, need at least {}",
            samples.len(),
            min_len.max(1)
        )));
    }
    let d_in = 2 * obs_dim + action_dim;
    if let Some(s) = samples.iter().find(|s| s.input.len() != d_in || s.target.len() != obs_dim) {
        return Err(Error::Dimension { expected: d_in, got: s.input.len() });
    }
    let members = (0..config.members)
        .map(|mi| Predictor::new(d_in, config.hidden, obs_dim, &mut member_rng(config.seed, mi)))
        .collect();
    let mut model = EnsembleModel {
        obs_dim,
        action_dim,
        config: config.clone(),
        members,
        scaler: Scaler::fit(&samples),
        frozen: false,
        noise_floor: None,
        updates: 0,
    };
    // Training streams are decorrelated from the initialisation streams.
    model.train_members(&samples, config.epochs, config.lr, config.seed ^ 0x5eed_0000_0000_0001, true);
    if model.members.iter().any(|m| !m.is_finite()) {
        return Err(Error::Calibration("training diverged (non-finite weights)".into()));
    }
    Ok(model)
}

/// Records `mu0`/`sigma0` of the ensemble MSE over the buffer and freezes
/// the model.
pub fn calibrate_noise_floor(model: &mut EnsembleModel, buffer: &ReplayBuffer) -> Result<NoiseFloor> {
    let samples = buffer.samples();
    if samples.is_empty() {
        return Err(Error::Calibration("empty calibration buffer".into()));
    }
    let errors = samples.iter().map(|s| model.mse(&s.input, &s.target)).collect::<Result<Vec<_>>>()?;
    let floor = NoiseFloor::from_errors(&errors)?;
    model.noise_floor = Some(floor);
    model.freeze();
    Ok(floor)
}

/// Gradient steps on probe transitions only. Each member sees its own
/// bootstrap resample of the probe set so disagreement stays informative.
pub fn adaptive_update(model: &mut EnsembleModel, probe: &[Sample]) -> Result<()> {
    if model.frozen {
        return Err(Error::Lifecycle("adaptive update on a frozen ensemble".into()));
    }
    if probe.is_empty() {
        return Ok(());
    }
    if let Some(s) = probe.iter().find(|s| s.input.len() != model.input_dim() || s.target.len() != model.obs_dim) {
        return Err(Error::Dimension { expected: model.input_dim(), got: s.input.len() });
    }
    let seed = model.config.seed.wrapping_add(0xada9_0000).wrapping_add(model.updates);
    let (epochs, lr) = (model.config.adaptive_epochs, model.config.adaptive_lr);
    model.train_members(probe, epochs, lr, seed, true);
    model.updates += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ActionVec, ObservationVec, Transition};

    /// Linear system `o' = o + 0.1 * a` observed through a short rollout.
    fn linear_rollout(n: usize, seed: u64) -> Vec<Transition> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut o = vec![0.0, 0.0];
        (0..n)
            .map(|t| {
                let a = ActionVec::new(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).unwrap();
                let next: Vec<f64> = o.iter().zip(a.as_slice()).map(|(x, u)| x + 0.1 * u).collect();
                let tr = Transition::new(ObservationVec(o.clone()), a, ObservationVec(next.clone()), 0.0, 0.0, t as u64);
                o = next;
                tr
            })
            .collect()
    }

    fn small_config(members: usize) -> EnsembleConfig {
        EnsembleConfig { members, hidden: 16, epochs: 30, ..EnsembleConfig::default() }
    }

    #[test]
    fn acc_of_constant_linear_and_quadratic() {
        assert_eq!(acc_feature(&[3.0], &[3.0], &[3.0]).unwrap(), vec![0.0]);
        assert_eq!(acc_feature(&[2.0], &[1.0], &[0.0]).unwrap(), vec![0.0]);
        assert_eq!(acc_feature(&[4.0, 4.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(acc_feature(&[4.0_f32], &[1.0], &[0.0]).unwrap(), vec![2.0_f32]);
    }

    #[test]
    fn acc_dimension_mismatch() {
        assert!(matches!(acc_feature(&[1.0, 2.0], &[1.0], &[0.0, 0.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn training_is_deterministic() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push_segment(&linear_rollout(40, 1));
        let a = bootstrap_train(&buf, 2, 2, &small_config(5), 10).unwrap();
        let b = bootstrap_train(&buf, 2, 2, &small_config(5), 10).unwrap();
        assert_eq!(a.weights_digest(), b.weights_digest());
    }

    #[test]
    fn training_reduces_error_on_linear_system() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push_segment(&linear_rollout(12, 2));
        assert_eq!(buf.usable_len(), 10);
        let samples = buf.samples();
        let untrained = bootstrap_train(&buf, 2, 2, &EnsembleConfig { epochs: 0, ..small_config(2) }, 10).unwrap();
        let trained = bootstrap_train(&buf, 2, 2, &small_config(2), 10).unwrap();
        assert!(trained.mean_mse(&samples).unwrap() < untrained.mean_mse(&samples).unwrap());
    }

    #[test]
    fn members_differ_under_bootstrap() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push_segment(&linear_rollout(40, 3));
        let m = bootstrap_train(&buf, 2, 2, &small_config(3), 10).unwrap();
        assert_ne!(m.members()[0], m.members()[1]);
        assert_ne!(m.members()[1], m.members()[2]);
    }

    #[test]
    fn too_small_buffer_is_calibration_error() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push_segment(&linear_rollout(5, 3));
        assert!(matches!(bootstrap_train(&buf, 2, 2, &small_config(2), 10), Err(Error::Calibration(_))));
    }

    #[test]
    fn mse_is_mean_of_member_errors() {
        assert_eq!(ensemble_mse_from_errors(&[1.0, 3.0]), 2.0);
        assert_eq!(ensemble_mse_from_errors(&[3.0, 1.0]), 2.0);
        assert_eq!(ensemble_mse_from_errors(&[0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn noise_floor_population_convention() {
        let f = NoiseFloor::from_errors(&[1.0, 3.0]).unwrap();
        assert_eq!((f.mu0, f.sigma0), (2.0, 1.0));
        let c = NoiseFloor::from_errors(&[0.5; 8]).unwrap();
        assert_eq!((c.mu0, c.sigma0), (0.5, SIGMA0_FLOOR));
        assert!(NoiseFloor::from_errors(&[]).is_err());
    }

    #[test]
    fn calibration_freezes_and_is_repeatable() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push_segment(&linear_rollout(40, 4));
        let mut m = bootstrap_train(&buf, 2, 2, &small_config(2), 10).unwrap();
        let mut m2 = m.clone();
        let f1 = calibrate_noise_floor(&mut m, &buf).unwrap();
        let f2 = calibrate_noise_floor(&mut m2, &buf).unwrap();
        assert_eq!(f1, f2);
        assert!(m.is_frozen());
        let digest = m.weights_digest();
        assert!(matches!(adaptive_update(&mut m, &buf.samples()), Err(Error::Lifecycle(_))));
        assert_eq!(m.weights_digest(), digest);
    }

    #[test]
    fn empty_probe_set_leaves_weights() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push_segment(&linear_rollout(40, 5));
        let mut m = bootstrap_train(&buf, 2, 2, &small_config(2), 10).unwrap();
        calibrate_noise_floor(&mut m, &buf).unwrap();
        let mut adaptive = m.fork_adaptive();
        let digest = adaptive.weights_digest();
        adaptive_update(&mut adaptive, &[]).unwrap();
        assert_eq!(adaptive.weights_digest(), digest);
        adaptive_update(&mut adaptive, &buf.samples()).unwrap();
        assert_ne!(adaptive.weights_digest(), digest);
        assert!(m.is_frozen());
    }

    #[test]
    fn candidate_predictions_match_full_forward() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push_segment(&linear_rollout(30, 6));
        let m = bootstrap_train(&buf, 2, 2, &small_config(3), 10).unwrap();
        let prefix = [0.2, -0.1, 0.01, 0.0];
        let cands: [&[f64]; 2] = [&[0.5, -0.5], &[1.0, 0.0]];
        let fast = m.predict_candidates(&prefix, &cands).unwrap();
        for (ci, c) in cands.iter().enumerate() {
            let full = m.predict_all(&model_input(&prefix[..2], &prefix[2..], c)).unwrap();
            for (a, b) in full.iter().zip(&fast[ci * 6..(ci + 1) * 6]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mse_zero_iff_perfect_and_masking_excludes_dims() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push_segment(&linear_rollout(30, 7));
        let m = bootstrap_train(&buf, 2, 2, &small_config(2), 10).unwrap();
        let x = model_input(&[0.1, 0.2], &[0.0, 0.0], &[0.3, 0.4]);
        let preds = m.predict_all(&x).unwrap();
        // Only dim 0 observed and both members agree there iff error is zero.
        let mut delta = vec![preds[0], 123.0];
        let mut single = m.clone();
        single.members.truncate(1);
        single.config.members = 1;
        assert_eq!(single.mse_observed(&x, &delta, Some(&[true, false])).unwrap(), 0.0);
        delta[1] = preds[1];
        assert_eq!(single.mse(&x, &delta).unwrap(), 0.0);
        assert!(m.mse(&x, &[9.0, 9.0]).unwrap() > 0.0);
    }
}
