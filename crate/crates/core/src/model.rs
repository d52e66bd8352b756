//! The contract a latent-variable model implements so the generic engine can
//! run mini-batch MCMC-SAEM against it.
//!
//! A model owns its (immutable) dataset. The complete-data log-likelihood is
//! assumed to be of exponential-family form
//! `log f(z; θ) = -ψ(θ) + <S(z), φ(θ)> + log c(z)`, so that the only
//! information about `z` needed by the M-step is the sufficient statistic
//! `S(z)`. `ψ`, `φ` and `c` never appear as standalone values: each model
//! realizes them inside its likelihood ratios and its M-step.

use std::fmt::Debug;

use thiserror::Error;

use crate::kernels::{Component, ProposalFamily};
use crate::rng::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite likelihood term at component {component}")]
    NonFinite { component: usize },
    #[error("non-finite likelihood term at observation ({i}, {j})")]
    NonFiniteObservation { i: usize, j: usize },
    #[error("statistic outside the admissible set: {0}")]
    Inadmissible(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("Newton-Raphson did not converge after {iterations} iterations (gradient norm {grad_norm:e}, last iterate {last:?})")]
    NewtonDiverged {
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },
}

/// Value of a sufficient statistic (either `S(z)` or its stochastic
/// approximation `s_k`).
#[derive(Clone, Debug, PartialEq)]
pub struct SuffStat(pub Vec<f64>);

impl SuffStat {
    pub fn zeros(m: usize) -> Self {
        SuffStat(vec![0.0; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Largest entrywise relative difference, `|a - b| / max(1, |b|)`.
    pub fn max_rel_diff(&self, other: &SuffStat) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max)
    }
}

/// Domain constraint of one parameter coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamDomain {
    Real,
    Positive,
    NonNegative,
    /// Coordinate of a probability vector; the group sums to one.
    Simplex,
    /// Closed unit interval.
    Probability,
    /// Strictly greater than one.
    AboveOne,
}

impl ParamDomain {
    pub fn contains(self, v: f64) -> bool {
        v.is_finite()
            && match self {
                ParamDomain::Real => true,
                ParamDomain::Positive => v > 0.0,
                ParamDomain::NonNegative => v >= 0.0,
                ParamDomain::Simplex | ParamDomain::Probability => (0.0..=1.0).contains(&v),
                ParamDomain::AboveOne => v > 1.0,
            }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub domain: ParamDomain,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, domain: ParamDomain) -> Self {
        Self {
            name: name.into(),
            domain,
        }
    }
}

/// Result of a maximization step.
#[derive(Clone, Debug, PartialEq)]
pub struct MStep<T> {
    pub theta: T,
    /// Number of entries clamped back into the parameter domain.
    pub clamped: u32,
}

/// An exponential-family latent-variable model bound to one dataset.
///
/// Latent vectors are `&[Self::Component]` of length [`latent_dim`](Self::latent_dim);
/// component `i` is the unit a Metropolis kernel `Π_i` acts on.
pub trait LatentModel: Sync {
    type Component: Component;
    type Theta: Clone + Debug + Send + Sync;

    /// Short identifier (`sbm`, `pk`, `frailty`).
    fn name(&self) -> &'static str;

    fn latent_dim(&self) -> usize;

    fn statistic_dim(&self) -> usize;

    /// Ordered parameter coordinates, matching [`theta_to_vec`](Self::theta_to_vec).
    fn param_descriptor(&self) -> Vec<ParamSpec>;

    fn theta_to_vec(&self, theta: &Self::Theta) -> Vec<f64>;

    /// Inverse of `theta_to_vec`. Implementations may project onto the
    /// domain (e.g. renormalize a probability vector) but must reject
    /// non-finite input.
    fn theta_from_vec(&self, v: &[f64]) -> Result<Self::Theta, ModelError>;

    fn proposal(&self) -> &ProposalFamily;

    /// `S(z)` evaluated from scratch.
    fn full_statistic(&self, z: &[Self::Component]) -> Result<SuffStat, ModelError>;

    /// Turn `stat = S(z_prev)` into `S(z_new)` in place, touching only the
    /// data that depends on the components listed in `changed`.
    /// `z_prev` and `z_new` must agree outside `changed`.
    fn update_statistic(
        &self,
        stat: &mut SuffStat,
        z_prev: &[Self::Component],
        z_new: &[Self::Component],
        changed: &[usize],
    ) -> Result<(), ModelError>;

    /// Out-of-place form of [`update_statistic`](Self::update_statistic).
    fn delta_statistic(
        &self,
        prev: &SuffStat,
        z_prev: &[Self::Component],
        z_new: &[Self::Component],
        changed: &[usize],
    ) -> Result<SuffStat, ModelError> {
        let mut s = prev.clone();
        self.update_statistic(&mut s, z_prev, z_new, changed)?;
        Ok(s)
    }

    /// Fill any data-dependent cache carried by a freshly proposed
    /// component. Called by the kernels before the likelihood ratio.
    fn prepare_candidate(&self, _i: usize, _candidate: &mut Self::Component) {}

    /// `log π(z[i ← candidate]; θ) - log π(z; θ)`, using only the terms of
    /// the complete likelihood that involve component `i`.
    fn component_log_posterior_ratio(
        &self,
        z: &[Self::Component],
        i: usize,
        candidate: &Self::Component,
        theta: &Self::Theta,
    ) -> Result<f64, ModelError>;

    /// `θ̂(s) = argmax_θ L(s; θ)`; `warm` is the previous iterate, used by
    /// models whose M-step is iterative.
    fn m_step(&self, s: &SuffStat, warm: &Self::Theta) -> Result<MStep<Self::Theta>, ModelError>;

    /// Draw a latent vector from its prior at `theta`.
    fn sample_latent(&self, theta: &Self::Theta, rng: &mut RngStream) -> Vec<Self::Component>;

    /// Full complete-data log-likelihood `log f(y, z; θ)`.
    fn complete_log_likelihood(
        &self,
        z: &[Self::Component],
        theta: &Self::Theta,
    ) -> Result<f64, ModelError>;

    /// Unconstrained coordinates of `theta` in which `θ̂(s)` is an interior
    /// stationary point of [`surrogate_objective`](Self::surrogate_objective).
    fn free_coordinates(&self, theta: &Self::Theta) -> Vec<f64>;

    /// `L(s; θ) = -ψ(θ) + <s, φ(θ)>` (up to a θ-free constant) at the
    /// point with the given free coordinates; `-∞` outside the domain.
    fn surrogate_objective(&self, s: &SuffStat, free: &[f64]) -> f64;
}

/// Check a latent vector length against the model.
pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected != got {
        return Err(ModelError::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// `c * ln(x)` with the convention `0 * ln(0) = 0`.
#[inline]
pub(crate) fn xlogy(c: f64, x: f64) -> f64 {
    if c == 0.0 {
        0.0
    } else {
        c * x.ln()
    }
}

/// Difference of two log terms that may be `-∞`; `None` when both are.
#[inline]
pub(crate) fn log_diff(new: f64, old: f64) -> Option<f64> {
    if new == f64::NEG_INFINITY && old == f64::NEG_INFINITY {
        None
    } else {
        Some(new - old)
    }
}
