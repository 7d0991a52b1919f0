//! Exact mutual information on small discrete joint beliefs.
//!
//! Used to check the entropy bound `I(s; theta) <= H(s) + H(theta)` and the
//! monotone co-variation the additive proxy relies on. All entropies are in
//! nats and `0 log 0 = 0`.

use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Absolute slack accepted when checking the bound.
pub const BOUND_TOLERANCE: f64 = 1e-9;
/// Normalisation tolerance for `f64` beliefs.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-12;

/// Probability table over `n_s` states by `n_theta` parameter values,
/// row-major with states as rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJointBelief<T = f64> {
    n_s: usize,
    n_theta: usize,
    p: Vec<T>,
}

impl<T: Real> DiscreteJointBelief<T> {
    pub fn new(n_s: usize, n_theta: usize, p: Vec<T>) -> Result<Self> {
        if n_s == 0 || n_theta == 0 || p.len() != n_s * n_theta {
            return Err(Error::Input(format!("belief table of {} entries for {n_s}x{n_theta}", p.len())));
        }
        if p.iter().any(|&v| !v.is_finite() || v < T::zero()) {
            return Err(Error::Input("belief entries must be finite and nonnegative".into()));
        }
        let total = p.iter().fold(T::zero(), |a, &b| a + b);
        if (total - T::one()).abs() > normalization_tolerance::<T>(p.len()) {
            return Err(Error::Input(format!("belief sums to {total:?}, not 1")));
        }
        Ok(DiscreteJointBelief { n_s, n_theta, p })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_s, self.n_theta)
    }

    pub fn get(&self, s: usize, theta: usize) -> T {
        self.p[s * self.n_theta + theta]
    }

    pub fn transpose(&self) -> Self {
        let p = (0..self.n_theta).flat_map(|j| (0..self.n_s).map(move |i| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        DiscreteJointBelief { n_s: self.n_theta, n_theta: self.n_s, p }
    }

    pub fn state_marginal(&self) -> Vec<T> {
        self.p.chunks(self.n_theta).map(|row| row.iter().fold(T::zero(), |a, &b| a + b)).collect()
    }

    pub fn param_marginal(&self) -> Vec<T> {
        let mut m = vec![T::zero(); self.n_theta];
        for row in self.p.chunks(self.n_theta) {
            for (acc, &v) in m.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        m
    }
}

fn normalization_tolerance<T: Real>(n: usize) -> T {
    T::lit(NORMALIZATION_TOLERANCE).max(T::epsilon() * T::from_usize(4 * n).expect("size representable"))
}

fn plogp<T: Real>(p: T) -> T {
    if p > T::zero() {
        p * p.ln()
    } else {
        T::zero()
    }
}

fn entropy<T: Real>(p: &[T]) -> T {
    -p.iter().fold(T::zero(), |a, &v| a + plogp(v))
}

/// Shannon entropies `(H(s), H(theta), H(s, theta))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Entropies<T = f64> {
    pub h_s: T,
    pub h_theta: T,
    pub h_joint: T,
}

pub fn marginal_entropies<T: Real>(b: &DiscreteJointBelief<T>) -> Entropies<T> {
    Entropies { h_s: entropy(&b.state_marginal()), h_theta: entropy(&b.param_marginal()), h_joint: entropy(&b.p) }
}

/// `sum p(s, theta) ln(p(s, theta) / (p(s) p(theta)))` by direct summation.
pub fn exact_mi<T: Real>(b: &DiscreteJointBelief<T>) -> T {
    let ps = b.state_marginal();
    let pt = b.param_marginal();
    let mut mi = T::zero();
    for (i, row) in b.p.chunks(b.n_theta).enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p > T::zero() {
                mi = mi + p * (p / (ps[i] * pt[j])).ln();
            }
        }
    }
    mi
}

/// Outcome of checking the entropy bound on one belief.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundCheck<T = f64> {
    pub mi: T,
    pub bound: T,
    pub holds: bool,
    /// `bound - mi`; equals `H(s, theta)` by the chain rule.
    pub slack: T,
    pub h_joint: T,
}

pub fn verify_bound<T: Real>(b: &DiscreteJointBelief<T>) -> BoundCheck<T> {
    let mi = exact_mi(b);
    let e = marginal_entropies(b);
    let bound = e.h_s + e.h_theta;
    BoundCheck { mi, bound, holds: mi <= bound + T::lit(BOUND_TOLERANCE), slack: bound - mi, h_joint: e.h_joint }
}

/// `(1 - lambda) * uniform + lambda * uniform-diagonal` on an `n x n` grid.
pub fn coupling_family<T: Real>(lambda: T, n: usize) -> Result<DiscreteJointBelief<T>> {
    if n < 2 {
        return Err(Error::Input(format!("coupling family needs n >= 2, got {n}")));
    }
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::Input(format!("lambda {lambda:?} outside [0, 1]")));
    }
    let nt = T::from_usize(n).expect("n representable");
    let uniform = T::one() / (nt * nt);
    let diag = T::one() / nt;
    let p = (0..n * n)
        .map(|k| {
            let on_diag = if k / n == k % n { diag } else { T::zero() };
            (T::one() - lambda) * uniform + lambda * on_diag
        })
        .collect();
    DiscreteJointBelief::new(n, n, p)
}

/// Draws a belief uniformly from the simplex (Dirichlet with unit
/// concentration) by normalising exponential variates.
pub fn random_belief<T: Real, R: Rng + ?Sized>(n_s: usize, n_theta: usize, rng: &mut R) -> Result<DiscreteJointBelief<T>> {
    let raw: Vec<f64> = (0..n_s * n_theta).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = raw.iter().sum();
    let p = raw.into_iter().map(|v| T::lit(v / total)).collect();
    DiscreteJointBelief::new(n_s, n_theta, p)
}
