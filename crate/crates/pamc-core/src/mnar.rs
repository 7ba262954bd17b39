//! Behavior-policy visitation modeling, propensity estimation,
//! inverse-propensity weights, and the overlap diagnostics m_eff and κ.
//!
//! A propensity p(s, a) is the per-sample probability that an observation
//! lands on entry (s, a) under the behavior policy. Weights W = 1/max(p, ε_p)
//! correct the missing-not-at-random selection bias of the completion
//! objective; m_eff = Σ_Ω 1/p is the bias-corrected effective sample count
//! and κ = min p over the optimal policy's support quantifies overlap.

use ndarray::Array2;

use crate::mdp::{Policy, TabularMDP};
use crate::tensor::ObservationSet;
use crate::{Error, Result};

/// Default clip floor ε_p for inverse-propensity weights.
pub const DEFAULT_CLIP_FLOOR: f64 = 0.01;

/// Default Laplace smoothing for propensity estimation.
pub const DEFAULT_SMOOTHING: f64 = 1.0;

/// Per-entry sampling probabilities and the derived IPW weights.
#[derive(Debug, Clone)]
pub struct PropensityMap {
    pub estimated_propensity: Array2<f64>,
    /// Ground-truth propensity, when the generating process is known.
    pub true_propensity: Option<Array2<f64>>,
    pub clip_floor: f64,
    pub weights: Array2<f64>,
}

impl PropensityMap {
    /// Uniform weights W ≡ 1 (the unweighted ablation).
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            estimated_propensity: Array2::from_elem((n_states, n_actions), 1.0),
            true_propensity: None,
            clip_floor: DEFAULT_CLIP_FLOOR,
            weights: Array2::from_elem((n_states, n_actions), 1.0),
        }
    }

    pub fn with_true_propensity(mut self, p: Array2<f64>) -> Self {
        self.true_propensity = Some(p);
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.dim()
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().fold(1.0f64, |acc, &w| acc.max(w))
    }

    pub fn min_weight(&self) -> f64 {
        self.weights
            .iter()
            .fold(f64::INFINITY, |acc, &w| acc.min(w))
    }
}

/// Build IPW weights W = 1 / max(p, ε_p) from a propensity matrix.
pub fn build_weights(propensity: &Array2<f64>, clip_floor: f64) -> Result<PropensityMap> {
    if !(0.0..1.0).contains(&clip_floor) || clip_floor == 0.0 {
        return Err(Error::invalid("clip_floor must lie in (0, 1)"));
    }
    if propensity.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::invalid("propensity entries must lie in [0, 1]"));
    }
    let weights = propensity.mapv(|p| 1.0 / p.max(clip_floor));
    Ok(PropensityMap {
        estimated_propensity: propensity.clone(),
        true_propensity: None,
        clip_floor,
        weights,
    })
}

/// Overlap diagnostics of a sampling pattern.
#[derive(Debug, Clone)]
pub struct OverlapDiagnostics {
    /// Effective sample size m_eff = Σ over observed entries of 1/p (clipped).
    pub m_eff: f64,
    /// κ = min propensity over the optimal policy's support; 0 if the support
    /// contains an unvisited entry.
    pub kappa: f64,
    pub support_mask: Array2<bool>,
    /// True when some entry on the support has zero propensity (positivity
    /// violated). Surfaced as a flag, not an error: degradation experiments
    /// induce this on purpose.
    pub positivity_violation: bool,
}

/// Compute m_eff over the observed mask and κ over the optimal support.
pub fn overlap_diagnostics(
    propensity: &Array2<f64>,
    mask: &Array2<bool>,
    optimal_support: &Array2<bool>,
    clip_floor: f64,
) -> Result<OverlapDiagnostics> {
    if propensity.dim() != mask.dim() || propensity.dim() != optimal_support.dim() {
        return Err(Error::invalid("shape mismatch in overlap_diagnostics"));
    }
    if !optimal_support.iter().any(|&s| s) {
        return Err(Error::invalid("optimal support is empty"));
    }
    let mut m_eff = 0.0;
    for (p, &observed) in propensity.iter().zip(mask.iter()) {
        if observed {
            m_eff += 1.0 / p.max(clip_floor);
        }
    }
    let mut kappa = f64::INFINITY;
    let mut positivity_violation = false;
    for (p, &on_support) in propensity.iter().zip(optimal_support.iter()) {
        if on_support {
            if *p <= 0.0 {
                positivity_violation = true;
                kappa = 0.0;
            } else {
                kappa = kappa.min(*p);
            }
        }
    }
    Ok(OverlapDiagnostics {
        m_eff,
        kappa,
        support_mask: optimal_support.clone(),
        positivity_violation,
    })
}

/// Discount-free average state-action occupancy over `horizon` steps from the
/// MDP's initial distribution. Entries sum to 1.
pub fn stationary_visitation(
    mdp: &TabularMDP,
    policy: &Policy,
    horizon: usize,
) -> Result<Array2<f64>> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(Error::invalid("policy shape mismatch"));
    }
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let mut occupancy = Array2::<f64>::zeros((n, m));
    let mut state_dist: Vec<f64> = mdp.initial_dist.iter().copied().collect();
    for _ in 0..horizon {
        for s in 0..n {
            if state_dist[s] == 0.0 {
                continue;
            }
            for a in 0..m {
                occupancy[[s, a]] += state_dist[s] * policy.probs()[[s, a]];
            }
        }
        let mut next = vec![0.0; n];
        for s in 0..n {
            if state_dist[s] == 0.0 {
                continue;
            }
            for a in 0..m {
                let pa = state_dist[s] * policy.probs()[[s, a]];
                if pa == 0.0 {
                    continue;
                }
                for t in 0..n {
                    let tr = mdp.effective_transition(s, a, t);
                    if tr > 0.0 {
                        next[t] += pa * tr;
                    }
                }
            }
        }
        state_dist = next;
    }
    occupancy /= horizon as f64;
    Ok(occupancy)
}

/// Laplace-smoothed empirical visitation frequency:
/// (counts + smoothing) / (N + smoothing·|S||A|).
pub fn estimate_propensity(observations: &ObservationSet, smoothing: f64) -> Result<Array2<f64>> {
    if observations.is_empty() {
        return Err(Error::invalid("cannot estimate propensity from no samples"));
    }
    if smoothing < 0.0 {
        return Err(Error::invalid("smoothing must be nonnegative"));
    }
    let (n, m) = observations.shape();
    let total = observations.len() as f64 + smoothing * (n * m) as f64;
    Ok(observations
        .counts()
        .mapv(|c| (c as f64 + smoothing) / total))
}
