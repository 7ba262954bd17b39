//! Finite MDPs with planted structured rewards, behavior policies, exact
//! planning oracles, and policy-biased sampling.
//!
//! Generated MDPs mix a small restart-to-initial probability into the
//! dynamics (default 0.02 per step). This keeps the chain ergodic so policy
//! overlap κ > 0 is achievable, and stands in for episodic resets; every
//! consumer of the dynamics (planning, returns, visitation, rollouts) sees
//! the same effective kernel.

use ndarray::{Array1, Array2, Array3};

use crate::tensor::{
    generate_structured_reward, ObservationSet, RewardMatrix, SeededRng, StructuredReward,
};
use crate::{Error, Result};

/// Restart probability used by [`generate_random_mdp`].
pub const DEFAULT_RESTART_PROB: f64 = 0.02;

const STOCHASTIC_TOL: f64 = 1e-12;

/// Finite MDP (S, A, P, R, γ) with a planted reward decomposition.
#[derive(Debug, Clone)]
pub struct TabularMDP {
    transitions: Array3<f64>, // [state, action, next_state]
    pub reward: StructuredReward,
    pub gamma: f64,
    pub initial_dist: Array1<f64>,
    /// Per-step probability of restarting from the initial distribution,
    /// mixed into the effective transition kernel.
    pub restart_prob: f64,
}

impl TabularMDP {
    pub fn new(
        transitions: Array3<f64>,
        reward: StructuredReward,
        gamma: f64,
        initial_dist: Array1<f64>,
    ) -> Result<Self> {
        let (n, m, n2) = transitions.dim();
        if n == 0 || m == 0 || n != n2 {
            return Err(Error::invalid("transition tensor must be |S|×|A|×|S|"));
        }
        if reward.shape() != (n, m) {
            return Err(Error::invalid("reward shape does not match transitions"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid("gamma must lie in [0, 1)"));
        }
        if initial_dist.len() != n {
            return Err(Error::invalid("initial distribution length mismatch"));
        }
        if (initial_dist.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL
            || initial_dist.iter().any(|&p| p < 0.0)
        {
            return Err(Error::invalid("initial distribution must be stochastic"));
        }
        for s in 0..n {
            for a in 0..m {
                let row_sum: f64 = (0..n).map(|t| transitions[[s, a, t]]).sum();
                if (row_sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::invalid(format!(
                        "transition row ({s}, {a}) sums to {row_sum}, expected 1"
                    )));
                }
            }
        }
        Ok(Self {
            transitions,
            reward,
            gamma,
            initial_dist,
            restart_prob: 0.0,
        })
    }

    pub fn n_states(&self) -> usize {
        self.transitions.dim().0
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.dim().1
    }

    pub fn transitions(&self) -> &Array3<f64> {
        &self.transitions
    }

    /// Effective next-state probability including the restart mixture.
    pub fn effective_transition(&self, s: usize, a: usize, next: usize) -> f64 {
        (1.0 - self.restart_prob) * self.transitions[[s, a, next]]
            + self.restart_prob * self.initial_dist[next]
    }

    /// E[v(s') | s, a] under the effective kernel.
    fn expected_next(&self, s: usize, a: usize, v: &Array1<f64>, init_dot_v: f64) -> f64 {
        let n = self.n_states();
        let mut acc = 0.0;
        for t in 0..n {
            acc += self.transitions[[s, a, t]] * v[t];
        }
        (1.0 - self.restart_prob) * acc + self.restart_prob * init_dot_v
    }

    /// Sample a next state; returns (state, was_restart).
    pub(crate) fn step(&self, s: usize, a: usize, rng: &mut SeededRng) -> (usize, bool) {
        if self.restart_prob > 0.0 && rng.uniform() < self.restart_prob {
            let s0 = rng.categorical(self.initial_dist.as_slice().unwrap());
            (s0, true)
        } else {
            let row: Vec<f64> = (0..self.n_states())
                .map(|t| self.transitions[[s, a, t]])
                .collect();
            (rng.categorical(&row), false)
        }
    }
}

/// Row-stochastic action distribution per state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: Array2<f64>,
}

impl Policy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (s, row) in probs.outer_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&p| p < 0.0) {
                return Err(Error::invalid(format!(
                    "policy row {s} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    /// Deterministic policy from per-state action indices.
    pub fn greedy(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            probs[[s, a]] = 1.0;
        }
        Self { probs }
    }

    /// ε-greedy mixture around per-state greedy actions.
    pub fn epsilon_greedy(actions: &[usize], n_actions: usize, epsilon: f64) -> Self {
        let mut probs =
            Array2::from_elem((actions.len(), n_actions), epsilon / n_actions as f64);
        for (s, &a) in actions.iter().enumerate() {
            probs[[s, a]] += 1.0 - epsilon;
        }
        Self { probs }
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn sample_action(&self, state: usize, rng: &mut SeededRng) -> usize {
        let row: Vec<f64> = self.probs.row(state).iter().copied().collect();
        rng.categorical(&row)
    }

    /// Support mask: entries with positive probability.
    pub fn support(&self) -> Array2<bool> {
        self.probs.mapv(|p| p > 0.0)
    }
}

/// Parameters of the planted reward for [`generate_random_mdp`].
#[derive(Debug, Clone, Copy)]
pub struct RewardSpec {
    pub rank: usize,
    pub sparse_density: f64,
    pub sparse_magnitude: f64,
    pub sigma: f64,
}

impl RewardSpec {
    pub fn low_rank(rank: usize, sigma: f64) -> Self {
        Self {
            rank,
            sparse_density: 0.0,
            sparse_magnitude: 0.0,
            sigma,
        }
    }
}

/// Random MDP: each (s, a) transitions uniformly over `branching` distinct
/// successors; the reward is a fresh planted decomposition; start states are
/// uniform; restart probability is [`DEFAULT_RESTART_PROB`].
pub fn generate_random_mdp(
    n_states: usize,
    n_actions: usize,
    branching: usize,
    reward_spec: &RewardSpec,
    gamma: f64,
    rng: &mut SeededRng,
) -> Result<TabularMDP> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::invalid("MDP dimensions must be positive"));
    }
    if branching == 0 || branching > n_states {
        return Err(Error::invalid("branching must lie in [1, n_states]"));
    }
    let reward = generate_structured_reward(
        n_states,
        n_actions,
        reward_spec.rank,
        reward_spec.sparse_density,
        reward_spec.sparse_magnitude,
        reward_spec.sigma,
        rng,
    )?;

    let mut transitions = Array3::<f64>::zeros((n_states, n_actions, n_states));
    let mut pool: Vec<usize> = (0..n_states).collect();
    for s in 0..n_states {
        for a in 0..n_actions {
            // Partial Fisher-Yates: first `branching` entries become the
            // distinct successor set.
            for i in 0..branching {
                let j = i + rng.below(n_states - i);
                pool.swap(i, j);
            }
            for &t in &pool[..branching] {
                transitions[[s, a, t]] = 1.0 / branching as f64;
            }
        }
    }

    let initial_dist = Array1::from_elem(n_states, 1.0 / n_states as f64);
    let mut mdp = TabularMDP::new(transitions, reward, gamma, initial_dist)?;
    mdp.restart_prob = DEFAULT_RESTART_PROB;
    Ok(mdp)
}

/// Output of value iteration: values, Q-function, and the greedy policy
/// (lowest-index tie-breaking).
#[derive(Debug, Clone)]
pub struct Planning {
    pub v: Array1<f64>,
    pub q: Array2<f64>,
    pub greedy: Policy,
    pub greedy_actions: Vec<usize>,
}

/// Value iteration to sup-norm Bellman residual below `tol`.
pub fn value_iteration(
    mdp: &TabularMDP,
    reward_override: Option<&RewardMatrix>,
    tol: f64,
) -> Result<Planning> {
    if tol <= 0.0 {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let reward = reward_override.unwrap_or_else(|| mdp.reward.total());
    if reward.shape() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::invalid("reward override shape mismatch"));
    }
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let mut v = Array1::<f64>::zeros(n);
    let mut q = Array2::<f64>::zeros((n, m));
    // Iteration bound from the γ-contraction; the +64 floor keeps tiny-γ
    // cases honest.
    let max_iters = 64
        + ((tol.ln() - 20.0) / mdp.gamma.max(1e-12).ln()).ceil().max(0.0) as usize;
    for _ in 0..max_iters {
        let init_dot_v = mdp.initial_dist.dot(&v);
        let mut v_next = Array1::<f64>::zeros(n);
        for s in 0..n {
            let mut best = f64::NEG_INFINITY;
            for a in 0..m {
                let val = reward.get(s, a) + mdp.gamma * mdp.expected_next(s, a, &v, init_dot_v);
                q[[s, a]] = val;
                if val > best {
                    best = val;
                }
            }
            v_next[s] = best;
        }
        let residual = v_next
            .iter()
            .zip(v.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        v = v_next;
        if residual < tol {
            break;
        }
    }
    let greedy_actions = greedy_from_q(&q);
    let greedy = Policy::greedy(&greedy_actions, m);
    Ok(Planning {
        v,
        q,
        greedy,
        greedy_actions,
    })
}

/// Per-state argmax with lowest-index tie-breaking.
pub fn greedy_from_q(q: &Array2<f64>) -> Vec<usize> {
    q.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (a, &val) in row.iter().enumerate() {
                if val > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

/// Exact discounted return J(π) = d₀ᵀ (I − γ P_π)⁻¹ r_π via a dense linear
/// solve on the effective kernel.
pub fn policy_return(
    mdp: &TabularMDP,
    policy: &Policy,
    reward_override: Option<&RewardMatrix>,
) -> Result<f64> {
    let n = mdp.n_states();
    let m = mdp.n_actions();
    if policy.n_states() != n || policy.n_actions() != m {
        return Err(Error::invalid("policy shape mismatch"));
    }
    let reward = reward_override.unwrap_or_else(|| mdp.reward.total());
    if reward.shape() != (n, m) {
        return Err(Error::invalid("reward override shape mismatch"));
    }

    // Build (I − γ P_π) and r_π.
    let mut system = Array2::<f64>::zeros((n, n));
    let mut r_pi = vec![0.0; n];
    for s in 0..n {
        for a in 0..m {
            let pa = policy.probs()[[s, a]];
            if pa == 0.0 {
                continue;
            }
            r_pi[s] += pa * reward.get(s, a);
            for t in 0..n {
                system[[s, t]] -= mdp.gamma * pa * mdp.effective_transition(s, a, t);
            }
        }
        system[[s, s]] += 1.0;
    }
    let x = solve_dense(system, r_pi)?;
    Ok(mdp
        .initial_dist
        .iter()
        .zip(x.iter())
        .map(|(d, v)| d * v)
        .sum())
}

/// Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Array2<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if a[[row, col]].abs() > a[[pivot, col]].abs() {
                pivot = row;
            }
        }
        if a[[pivot, col]].abs() < 1e-300 {
            return Err(Error::NumericalFailure {
                iteration: col,
                message: "singular linear system in policy evaluation".into(),
                trace: Vec::new(),
            });
        }
        if pivot != col {
            for j in 0..n {
                let tmp = a[[col, j]];
                a[[col, j]] = a[[pivot, j]];
                a[[pivot, j]] = tmp;
            }
            b.swap(col, pivot);
        }
        for row in (col + 1)..n {
            let factor = a[[row, col]] / a[[col, col]];
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[[row, j]] -= factor * a[[col, j]];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in (row + 1)..n {
            acc -= a[[row, j]] * x[j];
        }
        x[row] = acc / a[[row, row]];
    }
    Ok(x)
}

/// Roll out the behavior policy for `n_steps`; every visited (s, a) records
/// the true reward plus fresh N(0, σ²) noise with probability `obs_prob`.
pub fn sample_observations(
    mdp: &TabularMDP,
    behavior: &Policy,
    n_steps: usize,
    obs_prob: f64,
    rng: &mut SeededRng,
) -> Result<ObservationSet> {
    if !(0.0..=1.0).contains(&obs_prob) {
        return Err(Error::invalid("obs_prob must lie in [0, 1]"));
    }
    if behavior.n_states() != mdp.n_states() || behavior.n_actions() != mdp.n_actions() {
        return Err(Error::invalid("behavior policy shape mismatch"));
    }
    let sigma = mdp.reward.noise_sigma;
    let mut set = ObservationSet::empty(mdp.n_states(), mdp.n_actions());
    let mut state = rng.categorical(mdp.initial_dist.as_slice().unwrap());
    for _ in 0..n_steps {
        let action = behavior.sample_action(state, rng);
        if obs_prob >= 1.0 || rng.uniform() < obs_prob {
            let noise = if sigma > 0.0 { sigma * rng.normal() } else { 0.0 };
            set.push(state, action, mdp.reward.total().get(state, action) + noise)?;
        }
        let (next, _) = mdp.step(state, action, rng);
        state = next;
    }
    Ok(set)
}
