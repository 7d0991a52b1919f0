//! Compound uncertainty coefficient and operating regimes.
//!
//! `kappa = sigma_theta + sigma_s`, where `sigma_theta` is the clipped,
//! normalised z-score of the frozen ensemble's error against its noise
//! floor and `sigma_s` combines the masked-dimension fraction with the
//! normalised action delay, including their cross-term.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ensemble::NoiseFloor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default clip ceiling `C` of the z-score.
pub const DEFAULT_CLIP: f64 = 5.0;
/// Default delay scaling coefficient `c_tau`.
pub const DEFAULT_C_TAU: f64 = 0.3;
/// Lower bound and fractional rule for the `tau_low` margin.
pub const MIN_LOW_MARGIN: f64 = 0.05;
pub const LOW_MARGIN_RANGE_FRACTION: f64 = 0.05;
/// Percentile of the baseline distribution anchoring `tau_low`.
pub const BASELINE_PERCENTILE: f64 = 95.0;

/// Per-timestep decomposition of `kappa`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaComponents<T = f64> {
    pub sigma_theta: T,
    pub sigma_s: T,
    pub kappa: T,
    pub t: u64,
}

impl<T: Real> KappaComponents<T> {
    pub fn new(sigma_theta: T, sigma_s: T, t: u64) -> Self {
        KappaComponents { sigma_theta, sigma_s, kappa: kappa(sigma_theta, sigma_s), t }
    }
}

/// `clip((mse - mu0) / sigma0, 0, C) / C`.
pub fn sigma_theta<T: Real>(mse: T, mu0: T, sigma0: T, clip: T) -> T {
    let z = (mse - mu0) / sigma0;
    if z.is_nan() {
        return T::zero();
    }
    z.clip(T::zero(), clip) / clip
}

/// [`sigma_theta`] against a calibrated floor.
pub fn sigma_theta_floor(mse: f64, floor: &NoiseFloor, clip: f64) -> f64 {
    sigma_theta(mse, floor.mu0, floor.sigma0, clip)
}

/// `po + delay * (1 + po)` with `delay = clip(tau * c_tau, 0, 1)`.
///
/// Ranges over `[0, 3]`: at `po = 1` and saturated delay the value is 3.
pub fn sigma_s<T: Real>(po: T, tau: u32, c_tau: T) -> Result<T> {
    if !(po >= T::zero() && po <= T::one()) {
        return Err(Error::Input(format!("PO fraction {po:?} outside [0, 1]")));
    }
    let tau = T::from_u32(tau).expect("tau representable");
    let delay = (tau * c_tau).clip(T::zero(), T::one());
    Ok(po + delay * (T::one() + po))
}

pub fn kappa<T: Real>(sigma_theta: T, sigma_s: T) -> T {
    sigma_theta + sigma_s
}

/// Operating regime, ordered by severity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Regime {
    LowDeficit,
    Transition,
    HighDeficit,
}

/// Regime boundaries with `0 < tau_low < tau_high`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawThresholds<T>", bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct RegimeThresholds<T = f64> {
    tau_low: T,
    tau_high: T,
}

#[derive(Deserialize)]
struct RawThresholds<T> {
    tau_low: T,
    tau_high: T,
}

impl<T: Real> TryFrom<RawThresholds<T>> for RegimeThresholds<T> {
    type Error = Error;

    fn try_from(r: RawThresholds<T>) -> Result<Self> {
        RegimeThresholds::new(r.tau_low, r.tau_high)
    }
}

impl<T: Real> RegimeThresholds<T> {
    pub fn new(tau_low: T, tau_high: T) -> Result<Self> {
        if tau_low > T::zero() && tau_high > tau_low && tau_high.is_finite() {
            Ok(RegimeThresholds { tau_low, tau_high })
        } else {
            Err(Error::Input(format!("thresholds must satisfy 0 < tau_low < tau_high, got ({tau_low:?}, {tau_high:?})")))
        }
    }

    /// The values calibrated for the reference locomotion task (0.2, 0.5).
    pub fn reference() -> Self {
        RegimeThresholds { tau_low: T::lit(0.2), tau_high: T::lit(0.5) }
    }

    pub fn tau_low(&self) -> T {
        self.tau_low
    }

    pub fn tau_high(&self) -> T {
        self.tau_high
    }

    /// Position of `kappa` inside the transition band, clipped to `[0, 1]`.
    pub fn ramp(&self, kappa: T) -> T {
        ((kappa - self.tau_low) / (self.tau_high - self.tau_low)).clip(T::zero(), T::one())
    }
}

/// Low below `tau_low`, High above `tau_high`, Transition in between
/// (both boundaries inclusive).
pub fn classify_regime<T: Real>(kappa: T, thr: &RegimeThresholds<T>) -> Regime {
    if kappa < thr.tau_low {
        Regime::LowDeficit
    } else if kappa <= thr.tau_high {
        Regime::Transition
    } else {
        Regime::HighDeficit
    }
}

/// Nearest-rank percentile: the smallest sample with at least `p` percent
/// of the data at or below it.
pub fn percentile_nearest_rank<T: Real>(values: &[T], p: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::Input("percentile of an empty sample".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Input(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite kappa values"));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Ok(sorted[rank - 1])
}

fn mean<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &b| a + b) / T::from_usize(v.len()).expect("length representable")
}

/// Result of the two-step threshold calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct ThresholdCalibration<T = f64> {
    pub thresholds: RegimeThresholds<T>,
    pub baseline_p95: T,
    pub margin: T,
    pub single_stressor_means: BTreeMap<String, T>,
    pub max_single_stressor: T,
    pub compound_mean: T,
}

/// Two-step calibration.
///
/// 1. `tau_low` = 95th percentile (nearest rank) of the baseline values plus
///    `max(0.05, 0.05 * range(baseline))`.
/// 2. `tau_high` = midpoint between the largest single-stressor mean and the
///    compound mean; fails if the compound mean does not exceed it.
pub fn calibrate_thresholds<T: Real>(
    c1_kappas: &[T],
    single_stressor_kappas: &BTreeMap<String, Vec<T>>,
    compound_kappas: &[T],
) -> Result<ThresholdCalibration<T>> {
    if c1_kappas.is_empty() || compound_kappas.is_empty() || single_stressor_kappas.is_empty() {
        return Err(Error::Calibration("calibration needs nonempty baseline, single-stressor and compound samples".into()));
    }
    if let Some((k, _)) = single_stressor_kappas.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::Calibration(format!("single-stressor sample `{k}` is empty")));
    }
    let p95 = percentile_nearest_rank(c1_kappas, BASELINE_PERCENTILE)?;
    let lo = c1_kappas.iter().copied().fold(T::infinity(), T::min);
    let hi = c1_kappas.iter().copied().fold(T::neg_infinity(), T::max);
    let margin = T::lit(MIN_LOW_MARGIN).max(T::lit(LOW_MARGIN_RANGE_FRACTION) * (hi - lo));
    let tau_low = p95 + margin;

    let single_means: BTreeMap<String, T> = single_stressor_kappas.iter().map(|(k, v)| (k.clone(), mean(v))).collect();
    let max_single = single_means.values().copied().fold(T::neg_infinity(), T::max);
    let compound = mean(compound_kappas);
    if compound <= max_single {
        return Err(Error::Calibration(format!(
            "no separating gap: compound mean {compound:?} <= single-stressor mean {max_single:?}"
        )));
    }
    let tau_high = (max_single + compound) / T::lit(2.0);
    let thresholds = RegimeThresholds::new(tau_low, tau_high).map_err(|_| {
        Error::Calibration(format!("calibrated tau_high {tau_high:?} does not exceed tau_low {tau_low:?}"))
    })?;
    Ok(ThresholdCalibration {
        thresholds,
        baseline_p95: p95,
        margin,
        single_stressor_means: single_means,
        max_single_stressor: max_single,
        compound_mean: compound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigma_theta_hand_values() {
        assert_eq!(sigma_theta(0.4, 0.4, 0.1, 5.0), 0.0);
        assert_eq!(sigma_theta(0.5 + 5.0 * 0.25, 0.5, 0.25, 5.0), 1.0);
        assert_eq!(sigma_theta(0.1, 0.4, 0.1, 5.0), 0.0);
        assert_eq!(sigma_theta(1.0e6, 0.4, 0.1, 5.0), 1.0);
        assert_eq!(sigma_theta(0.5_f32, 0.25, 0.125, 5.0), 0.4);
    }

    #[test]
    fn sigma_s_hand_values() {
        assert_eq!(sigma_s(0.0, 0, 0.3).unwrap(), 0.0);
        assert!((sigma_s(0.5f64, 1, 0.3).unwrap() - 0.95).abs() < 1e-12);
        assert_eq!(sigma_s(1.0, 10, 0.3).unwrap(), 3.0);
        assert!(sigma_s(1.5, 0, 0.3).is_err());
        assert!(sigma_s(-0.1_f32, 0, 0.3).is_err());
    }

    #[test]
    fn kappa_sums() {
        assert_eq!(kappa(0.0, 0.0), 0.0);
        assert!((kappa(0.2f64, 0.95) - 1.15).abs() < 1e-12);
        let c = KappaComponents::new(0.25, 0.5, 7);
        assert_eq!(c.kappa, 0.75);
    }

    #[test]
    fn regime_boundaries() {
        let thr = RegimeThresholds::new(0.2, 0.5).unwrap();
        assert_eq!(classify_regime(0.1, &thr), Regime::LowDeficit);
        assert_eq!(classify_regime(0.2, &thr), Regime::Transition);
        assert_eq!(classify_regime(0.5, &thr), Regime::Transition);
        assert_eq!(classify_regime(0.6, &thr), Regime::HighDeficit);
        assert!(RegimeThresholds::new(0.5, 0.2).is_err());
        assert!(RegimeThresholds::new(0.0, 0.2).is_err());
    }

    #[test]
    fn thresholds_reject_invalid_json() {
        assert!(serde_json::from_str::<RegimeThresholds>(r#"{"tau_low":0.6,"tau_high":0.5}"#).is_err());
        let ok: RegimeThresholds = serde_json::from_str(r#"{"tau_low":0.2,"tau_high":0.5}"#).unwrap();
        assert_eq!(ok, RegimeThresholds::new(0.2, 0.5).unwrap());
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile_nearest_rank(&v, 95.0).unwrap(), 19.0);
        assert_eq!(percentile_nearest_rank(&v, 100.0).unwrap(), 20.0);
        assert_eq!(percentile_nearest_rank(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile_nearest_rank(&[3.0, 1.0, 2.0], 50.0).unwrap(), 2.0);
    }

    fn singles(pairs: &[(&str, Vec<f64>)]) -> BTreeMap<String, Vec<f64>> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn calibration_reference_numbers() {
        let cal = calibrate_thresholds(
            &[0.036; 50],
            &singles(&[("C2", vec![0.089; 10]), ("C3", vec![0.332; 10])]),
            &[0.496; 10],
        )
        .unwrap();
        assert!((cal.thresholds.tau_low() - 0.086).abs() < 1e-12);
        assert!((cal.thresholds.tau_high() - 0.414).abs() < 1e-12);
    }

    #[test]
    fn calibration_degenerate_baseline_uses_margin_floor() {
        let cal = calibrate_thresholds(&[0.0; 10], &singles(&[("C3", vec![0.3])]), &[0.5]).unwrap();
        assert_eq!(cal.thresholds.tau_low(), MIN_LOW_MARGIN);
        assert_eq!(cal.margin, MIN_LOW_MARGIN);
    }

    #[test]
    fn calibration_without_gap_fails() {
        let err = calibrate_thresholds(&[0.0; 10], &singles(&[("C3", vec![0.4])]), &[0.3]).unwrap_err();
        assert!(matches!(err, Error::Calibration(_)));
        assert!(calibrate_thresholds(&[], &singles(&[("C3", vec![0.4])]), &[0.5]).is_err());
    }

    proptest! {
        #[test]
        fn sigma_s_monotone(po in 0.0..1.0f64, dpo in 0.0..0.5f64, tau in 0u32..12, c in 0.01..1.0f64) {
            let base = sigma_s(po, tau, c).unwrap();
            let po2 = (po + dpo).min(1.0);
            prop_assert!(sigma_s(po2, tau, c).unwrap() >= base);
            prop_assert!(sigma_s(po, tau + 1, c).unwrap() >= base);
            prop_assert!((0.0..=3.0).contains(&base));
        }

        #[test]
        fn sigma_theta_monotone_and_bounded(mse in -10.0..10.0f64, d in 0.0..5.0f64, mu in 0.0..2.0f64, s in 1e-3..2.0f64) {
            let a = sigma_theta(mse, mu, s, 5.0);
            let b = sigma_theta(mse + d, mu, s, 5.0);
            prop_assert!(b >= a);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn regime_monotone(k in -1.0..3.0f64, dk in 0.0..2.0f64, lo in 0.01..1.0f64, gap in 0.01..1.0f64) {
            let thr = RegimeThresholds::new(lo, lo + gap).unwrap();
            prop_assert!(classify_regime(k + dk, &thr) >= classify_regime(k, &thr));
        }
    }
}
