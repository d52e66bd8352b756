//! Symmetric random-walk Metropolis kernels acting on one latent component,
//! and their sequential composition over an index set.

use std::fmt::Debug;

use crate::model::{LatentModel, ModelError};
use crate::rng::RngStream;

/// Per-component proposal distribution.
#[derive(Clone, Debug, PartialEq)]
pub enum ProposalFamily {
    /// Gaussian increments; one standard deviation per scalar coordinate of
    /// a component. Coordinates are updated one Metropolis step at a time.
    Gaussian { sd: Vec<f64> },
    /// Uniform over `{0, .., q-1}`, the current label included.
    UniformLabels { q: usize },
}

impl ProposalFamily {
    pub fn gaussian(sd: Vec<f64>) -> Result<Self, ModelError> {
        if sd.is_empty() || sd.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "proposal standard deviations must be positive, got {sd:?}"
            )));
        }
        Ok(ProposalFamily::Gaussian { sd })
    }

    /// Gaussian family parametrized by increment variances.
    pub fn gaussian_from_variance(var: Vec<f64>) -> Result<Self, ModelError> {
        Self::gaussian(var.into_iter().map(f64::sqrt).collect())
    }

    pub fn uniform_labels(q: usize) -> Result<Self, ModelError> {
        if q < 2 {
            return Err(ModelError::InvalidParameter(format!(
                "discrete proposal needs at least 2 labels, got {q}"
            )));
        }
        Ok(ProposalFamily::UniformLabels { q })
    }

    fn sd(&self, coord: usize) -> f64 {
        match self {
            ProposalFamily::Gaussian { sd } => sd[coord],
            ProposalFamily::UniformLabels { .. } => {
                panic!("continuous component driven by a discrete proposal family")
            }
        }
    }
}

/// One latent component `z_i`.
pub trait Component: Clone + PartialEq + Debug + Send + Sync {
    /// Metropolis sub-steps per visit (one per scalar coordinate).
    fn substeps(_family: &ProposalFamily) -> usize {
        1
    }

    /// Symmetric proposal around `self` for sub-step `substep`.
    fn propose(&self, family: &ProposalFamily, substep: usize, rng: &mut RngStream) -> Self;
}

/// Block labels are 0-based.
impl Component for usize {
    fn propose(&self, family: &ProposalFamily, _substep: usize, rng: &mut RngStream) -> Self {
        match family {
            ProposalFamily::UniformLabels { q } => rng.sample_uniform_int(*q),
            ProposalFamily::Gaussian { .. } => {
                panic!("label component driven by a Gaussian proposal family")
            }
        }
    }
}

impl Component for f64 {
    fn propose(&self, family: &ProposalFamily, _substep: usize, rng: &mut RngStream) -> Self {
        self + family.sd(0) * rng.std_normal()
    }
}

/// Shared by array-valued components.
pub fn gaussian_step(current: f64, family: &ProposalFamily, coord: usize, rng: &mut RngStream) -> f64 {
    current + family.sd(coord) * rng.std_normal()
}

/// Counters accumulated over one or more Metropolis steps. The latent vector
/// itself is updated in place.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KernelStepResult {
    /// Components visited (with multiplicity).
    pub visited: usize,
    pub proposals: usize,
    pub accepted: usize,
}

impl KernelStepResult {
    pub fn absorb(&mut self, other: KernelStepResult) {
        self.visited += other.visited;
        self.proposals += other.proposals;
        self.accepted += other.accepted;
    }
}

/// Accept/reject rule shared by every kernel: accept iff `ln u < log_ratio`.
/// A zero log-ratio is always accepted (`u < 1`), `-∞` never is.
#[inline]
pub fn accept(log_ratio: f64, u: f64) -> bool {
    u.ln() < log_ratio
}

/// One visit of the kernel `Π_i`: a Metropolis step for each scalar
/// coordinate of component `i`.
pub fn mh_update_component<M: LatentModel>(
    model: &M,
    z: &mut [M::Component],
    i: usize,
    theta: &M::Theta,
    rng: &mut RngStream,
) -> Result<KernelStepResult, ModelError> {
    if i >= z.len() {
        return Err(ModelError::Dimension {
            what: "component index",
            expected: z.len(),
            got: i,
        });
    }
    let family = model.proposal();
    let mut out = KernelStepResult {
        visited: 1,
        ..Default::default()
    };
    for sub in 0..M::Component::substeps(family) {
        let mut cand = z[i].propose(family, sub, rng);
        model.prepare_candidate(i, &mut cand);
        let log_ratio = if cand == z[i] {
            0.0
        } else {
            model.component_log_posterior_ratio(z, i, &cand, theta)?
        };
        if log_ratio.is_nan() {
            return Err(ModelError::NonFinite { component: i });
        }
        let u = rng.uniform();
        out.proposals += 1;
        if accept(log_ratio, u) {
            z[i] = cand;
            out.accepted += 1;
        }
    }
    Ok(out)
}

/// Apply `Π_i` for each `i` in `indices`, in the given order. Duplicates
/// are visited repeatedly.
pub fn sweep<M: LatentModel>(
    model: &M,
    z: &mut [M::Component],
    indices: &[usize],
    theta: &M::Theta,
    rng: &mut RngStream,
) -> Result<KernelStepResult, ModelError> {
    let mut total = KernelStepResult::default();
    for &i in indices {
        total.absorb(mh_update_component(model, z, i, theta, rng)?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accept_rule_edges() {
        for u in [0.0, 1e-300, 0.3, 0.999_999] {
            assert!(accept(0.0, u));
            assert!(!accept(f64::NEG_INFINITY, u));
            assert!(accept(f64::INFINITY, u));
        }
    }

    #[test]
    fn family_validation() {
        assert!(ProposalFamily::gaussian(vec![0.1, 0.0]).is_err());
        assert!(ProposalFamily::gaussian(vec![]).is_err());
        assert!(ProposalFamily::uniform_labels(1).is_err());
        let f = ProposalFamily::gaussian_from_variance(vec![0.2]).unwrap();
        assert_eq!(f, ProposalFamily::Gaussian { sd: vec![0.2f64.sqrt()] });
    }

    #[test]
    fn label_proposal_covers_all_labels() {
        let fam = ProposalFamily::uniform_labels(3).unwrap();
        let mut rng = RngStream::new(1, 0);
        let mut seen = [0usize; 3];
        for _ in 0..3000 {
            seen[1usize.propose(&fam, 0, &mut rng)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800));
    }
}
