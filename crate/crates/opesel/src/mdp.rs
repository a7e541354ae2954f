//! Finite-MDP representation, exact/iterative policy evaluation, value
//! iteration, and maximum-likelihood estimation of tabular models from data.

use ndarray::{Array1, Array2, Array3};

use crate::dataset::Dataset;
use crate::error::{OpeselError, Result};

/// A finite MDP with a dense transition tensor indexed (s, a, s').
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Array3<f64>,
    pub reward: Array2<f64>,
    pub initial_dist: Array1<f64>,
    pub discount: f64,
    pub absorbing: Vec<bool>,
}

impl TabularMdp {
    /// Checks the stochasticity invariants; returns the worst row-sum deviation.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let sum: f64 = (0..self.n_states).map(|sp| self.transition[[s, a, sp]]).sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        worst
    }
}

/// A probabilistic tabular policy: rows are distributions over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub action_probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn n_states(&self) -> usize {
        self.action_probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.action_probs.ncols()
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            action_probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    /// Deterministic policy from an action table.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            probs[[s, a]] = 1.0;
        }
        TabularPolicy { action_probs: probs }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.action_probs[[s, a]]
    }
}

/// Value functions of a policy, plus the initial-state scalar value.
#[derive(Debug, Clone)]
pub struct ValueFunctions {
    pub v: Array1<f64>,
    pub q: Array2<f64>,
    pub scalar_value: f64,
}

fn q_from_v(mdp: &TabularMdp, v: &Array1<f64>) -> Array2<f64> {
    let mut q = Array2::zeros((mdp.n_states, mdp.n_actions));
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut ev = 0.0;
            for sp in 0..mdp.n_states {
                let p = mdp.transition[[s, a, sp]];
                if p > 0.0 {
                    ev += p * v[sp];
                }
            }
            q[[s, a]] = mdp.reward[[s, a]] + mdp.discount * ev;
        }
    }
    q
}

fn scalar_value(mdp: &TabularMdp, v: &Array1<f64>) -> f64 {
    mdp.initial_dist
        .iter()
        .zip(v.iter())
        .map(|(mu, val)| mu * val)
        .sum()
}

/// Exact policy evaluation by matrix inversion, restricted to non-absorbing
/// states: solves (I - gamma * P_pi) v = r_pi; absorbing states get v = 0.
pub fn evaluate_policy_analytic(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<ValueFunctions> {
    let live: Vec<usize> = (0..mdp.n_states).filter(|&s| !mdp.absorbing[s]).collect();
    let n = live.len();
    let mut v = Array1::zeros(mdp.n_states);
    if n > 0 {
        let mut pos = vec![usize::MAX; mdp.n_states];
        for (i, &s) in live.iter().enumerate() {
            pos[s] = i;
        }
        let mut a_mat = nalgebra::DMatrix::<f64>::identity(n, n);
        let mut r_pi = nalgebra::DVector::<f64>::zeros(n);
        for (i, &s) in live.iter().enumerate() {
            for a in 0..mdp.n_actions {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                r_pi[i] += pa * mdp.reward[[s, a]];
                for sp in 0..mdp.n_states {
                    let p = mdp.transition[[s, a, sp]];
                    if p > 0.0 && pos[sp] != usize::MAX {
                        a_mat[(i, pos[sp])] -= mdp.discount * pa * p;
                    }
                }
            }
        }
        let lu = a_mat.lu();
        let sol = lu.solve(&r_pi).ok_or_else(|| {
            OpeselError::EvaluationInfeasible("singular linear system (I - gamma P_pi)".into())
        })?;
        if sol.iter().any(|x| !x.is_finite()) {
            return Err(OpeselError::EvaluationInfeasible(
                "non-finite solution of (I - gamma P_pi) v = r_pi".into(),
            ));
        }
        for (i, &s) in live.iter().enumerate() {
            v[s] = sol[i];
        }
    }
    let q = q_from_v(mdp, &v);
    let sv = scalar_value(mdp, &v);
    Ok(ValueFunctions { v, q, scalar_value: sv })
}

/// H-step truncated policy evaluation: v_H = r_pi + gamma * P_pi v_{H-1}, v_0 = 0.
pub fn evaluate_policy_iterative(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    horizon: usize,
) -> ValueFunctions {
    let n = mdp.n_states;
    // Policy-induced reward vector and transition matrix over live states only;
    // absorbing states stay at 0 by construction.
    let mut r_pi = Array1::<f64>::zeros(n);
    let mut p_pi = Array2::<f64>::zeros((n, n));
    for s in 0..n {
        if mdp.absorbing[s] {
            continue;
        }
        for a in 0..mdp.n_actions {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            r_pi[s] += pa * mdp.reward[[s, a]];
            for sp in 0..n {
                let p = mdp.transition[[s, a, sp]];
                if p > 0.0 {
                    p_pi[[s, sp]] += pa * p;
                }
            }
        }
    }
    let mut v = Array1::<f64>::zeros(n);
    for _ in 0..horizon {
        let mut next = r_pi.clone();
        next += &(p_pi.dot(&v) * mdp.discount);
        for s in 0..n {
            if mdp.absorbing[s] {
                next[s] = 0.0;
            }
        }
        v = next;
    }
    let q = if horizon == 0 {
        Array2::zeros((n, mdp.n_actions))
    } else {
        q_from_v(mdp, &v)
    };
    let sv = scalar_value(mdp, &v);
    ValueFunctions { v, q, scalar_value: sv }
}

/// Value iteration to sup-norm `tolerance`; greedy ties broken by lowest
/// action index. Returns (Q*, greedy policy).
pub fn value_iteration(
    mdp: &TabularMdp,
    tolerance: f64,
) -> Result<(Array2<f64>, TabularPolicy)> {
    const MAX_ITERS: usize = 100_000;
    let n = mdp.n_states;
    // Sparse row cache; the dense tensor is mostly zeros for realistic MDPs.
    let sparse: Vec<Vec<(usize, f64)>> = (0..n * mdp.n_actions)
        .map(|i| {
            let (s, a) = (i / mdp.n_actions, i % mdp.n_actions);
            (0..n)
                .filter_map(|sp| {
                    let p = mdp.transition[[s, a, sp]];
                    (p > 0.0).then_some((sp, p))
                })
                .collect()
        })
        .collect();
    let mut q = Array2::<f64>::zeros((n, mdp.n_actions));
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let v_max: Array1<f64> = Array1::from_iter((0..n).map(|s| {
            if mdp.absorbing[s] {
                0.0
            } else {
                (0..mdp.n_actions).map(|a| q[[s, a]]).fold(f64::NEG_INFINITY, f64::max)
            }
        }));
        let mut next = Array2::<f64>::zeros((n, mdp.n_actions));
        residual = 0.0;
        for s in 0..n {
            if mdp.absorbing[s] {
                continue;
            }
            for a in 0..mdp.n_actions {
                let mut ev = 0.0;
                for &(sp, p) in &sparse[s * mdp.n_actions + a] {
                    ev += p * v_max[sp];
                }
                next[[s, a]] = mdp.reward[[s, a]] + mdp.discount * ev;
                residual = residual.max((next[[s, a]] - q[[s, a]]).abs());
            }
        }
        q = next;
        if residual < tolerance {
            let actions: Vec<usize> = (0..n).map(|s| greedy_action(&q, s)).collect();
            let policy = TabularPolicy::deterministic(&actions, mdp.n_actions);
            return Ok((q, policy));
        }
    }
    Err(OpeselError::NonConvergence { iterations: MAX_ITERS, residual })
}

/// Argmax over actions with ties broken by lowest index.
pub fn greedy_action(q: &Array2<f64>, s: usize) -> usize {
    let mut best = 0;
    let mut best_val = q[[s, 0]];
    for a in 1..q.ncols() {
        if q[[s, a]] > best_val {
            best_val = q[[s, a]];
            best = a;
        }
    }
    best
}

/// Maximum-likelihood tabular model from logged transitions. Unseen (s, a)
/// pairs become zero-reward self-loops, so states never visited act as
/// absorbing under the estimated model.
pub fn estimate_tabular_mdp(
    dataset: &Dataset,
    n_states: usize,
    n_actions: usize,
    discount: f64,
) -> TabularMdp {
    let mut counts = Array2::<f64>::zeros((n_states, n_actions));
    let mut trans_counts = Array3::<f64>::zeros((n_states, n_actions, n_states));
    let mut reward_sums = Array2::<f64>::zeros((n_states, n_actions));
    let mut init_counts = Array1::<f64>::zeros(n_states);
    let mut m = 0usize;
    for tr in &dataset.transitions {
        counts[[tr.state, tr.action]] += 1.0;
        trans_counts[[tr.state, tr.action, tr.next_state]] += 1.0;
        reward_sums[[tr.state, tr.action]] += tr.reward;
        if tr.t == 1 {
            init_counts[tr.state] += 1.0;
            m += 1;
        }
    }
    let mut transition = Array3::<f64>::zeros((n_states, n_actions, n_states));
    let mut reward = Array2::<f64>::zeros((n_states, n_actions));
    for s in 0..n_states {
        for a in 0..n_actions {
            let c = counts[[s, a]];
            if c > 0.0 {
                for sp in 0..n_states {
                    transition[[s, a, sp]] = trans_counts[[s, a, sp]] / c;
                }
                reward[[s, a]] = reward_sums[[s, a]] / c;
            } else {
                transition[[s, a, s]] = 1.0;
            }
        }
    }
    let initial_dist = if m > 0 {
        init_counts / m as f64
    } else {
        init_counts
    };
    let absorbing: Vec<bool> = (0..n_states)
        .map(|s| {
            (0..n_actions).all(|a| transition[[s, a, s]] == 1.0 && reward[[s, a]] == 0.0)
        })
        .collect();
    TabularMdp {
        n_states,
        n_actions,
        transition,
        reward,
        initial_dist,
        discount,
        absorbing,
    }
}

/// Count-based behavior-policy estimate; states with no visits get a uniform row.
pub fn estimate_tabular_behavior(
    dataset: &Dataset,
    n_states: usize,
    n_actions: usize,
) -> TabularPolicy {
    let mut counts = Array2::<f64>::zeros((n_states, n_actions));
    for tr in &dataset.transitions {
        counts[[tr.state, tr.action]] += 1.0;
    }
    let mut probs = Array2::<f64>::zeros((n_states, n_actions));
    for s in 0..n_states {
        let total: f64 = (0..n_actions).map(|a| counts[[s, a]]).sum();
        if total > 0.0 {
            for a in 0..n_actions {
                probs[[s, a]] = counts[[s, a]] / total;
            }
        } else {
            for a in 0..n_actions {
                probs[[s, a]] = 1.0 / n_actions as f64;
            }
        }
    }
    TabularPolicy { action_probs: probs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, Provenance, Transition};
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn one_state_absorbing(discount: f64) -> TabularMdp {
        TabularMdp {
            n_states: 1,
            n_actions: 1,
            transition: Array3::from_elem((1, 1, 1), 1.0),
            reward: Array2::zeros((1, 1)),
            initial_dist: array![1.0],
            discount,
            absorbing: vec![true],
        }
    }

    fn two_state_chain() -> TabularMdp {
        // s0 -(r=1)-> s1 absorbing
        let mut transition = Array3::zeros((2, 1, 2));
        transition[[0, 0, 1]] = 1.0;
        transition[[1, 0, 1]] = 1.0;
        let mut reward = Array2::zeros((2, 1));
        reward[[0, 0]] = 1.0;
        TabularMdp {
            n_states: 2,
            n_actions: 1,
            transition,
            reward,
            initial_dist: array![1.0, 0.0],
            discount: 0.5,
            absorbing: vec![false, true],
        }
    }

    pub(crate) fn random_mdp(
        n_states: usize,
        n_actions: usize,
        discount: f64,
        rng: &mut impl Rng,
    ) -> TabularMdp {
        let mut transition = Array3::zeros((n_states, n_actions, n_states));
        let mut reward = Array2::zeros((n_states, n_actions));
        for s in 0..n_states {
            for a in 0..n_actions {
                let raw: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 1e-3).collect();
                let total: f64 = raw.iter().sum();
                for sp in 0..n_states {
                    transition[[s, a, sp]] = raw[sp] / total;
                }
                reward[[s, a]] = rng.gen_range(-1.0..1.0);
            }
        }
        let raw: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let initial_dist = Array1::from_iter(raw.into_iter().map(|x| x / total));
        TabularMdp {
            n_states,
            n_actions,
            transition,
            reward,
            initial_dist,
            discount,
            absorbing: vec![false; n_states],
        }
    }

    pub(crate) fn random_policy(
        n_states: usize,
        n_actions: usize,
        rng: &mut impl Rng,
    ) -> TabularPolicy {
        let mut probs = Array2::zeros((n_states, n_actions));
        for s in 0..n_states {
            let raw: Vec<f64> = (0..n_actions).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            for a in 0..n_actions {
                probs[[s, a]] = raw[a] / total;
            }
        }
        TabularPolicy { action_probs: probs }
    }

    #[test]
    fn absorbing_mdp_has_zero_value() {
        let mdp = one_state_absorbing(0.9);
        let policy = TabularPolicy::uniform(1, 1);
        let vf = evaluate_policy_analytic(&mdp, &policy).unwrap();
        assert_eq!(vf.scalar_value, 0.0);
    }

    #[test]
    fn two_state_chain_analytic() {
        let mdp = two_state_chain();
        let policy = TabularPolicy::uniform(2, 1);
        let vf = evaluate_policy_analytic(&mdp, &policy).unwrap();
        assert!((vf.scalar_value - 1.0).abs() < 1e-12);
        assert!((vf.q[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_matches_long_horizon_iterative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mdp = random_mdp(5, 3, 0.9, &mut rng);
        let policy = random_policy(5, 3, &mut rng);
        let exact = evaluate_policy_analytic(&mdp, &policy).unwrap();
        let iter = evaluate_policy_iterative(&mdp, &policy, 500);
        for s in 0..5 {
            assert!((exact.v[s] - iter.v[s]).abs() < 1e-6);
        }
    }

    #[test]
    fn iterative_horizon_zero_and_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = random_mdp(4, 2, 0.9, &mut rng);
        let policy = random_policy(4, 2, &mut rng);
        let v0 = evaluate_policy_iterative(&mdp, &policy, 0);
        assert!(v0.v.iter().all(|&x| x == 0.0));
        let v1 = evaluate_policy_iterative(&mdp, &policy, 1);
        for s in 0..4 {
            let r_pi: f64 = (0..2).map(|a| policy.prob(s, a) * mdp.reward[[s, a]]).sum();
            assert!((v1.v[s] - r_pi).abs() < 1e-12);
        }
    }

    #[test]
    fn iterative_truncation_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = random_mdp(3, 2, 0.9, &mut rng);
        let policy = random_policy(3, 2, &mut rng);
        let exact = evaluate_policy_analytic(&mdp, &policy).unwrap();
        let iter = evaluate_policy_iterative(&mdp, &policy, 50);
        let bound = 0.9f64.powi(50) / (1.0 - 0.9);
        for s in 0..3 {
            assert!((exact.v[s] - iter.v[s]).abs() <= bound);
        }
    }

    #[test]
    fn gamma_one_recurrent_chain_is_infeasible() {
        // Deterministic self-loop with nonzero reward, gamma = 1, not marked absorbing.
        let mut transition = Array3::zeros((1, 1, 1));
        transition[[0, 0, 0]] = 1.0;
        let mut reward = Array2::zeros((1, 1));
        reward[[0, 0]] = 1.0;
        let mdp = TabularMdp {
            n_states: 1,
            n_actions: 1,
            transition,
            reward,
            initial_dist: array![1.0],
            discount: 1.0,
            absorbing: vec![false],
        };
        let policy = TabularPolicy::uniform(1, 1);
        assert!(evaluate_policy_analytic(&mdp, &policy).is_err());
    }

    #[test]
    fn value_iteration_single_action_equals_policy_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mdp = random_mdp(6, 1, 0.9, &mut rng);
        let policy = TabularPolicy::uniform(6, 1);
        let (q, _) = value_iteration(&mdp, 1e-10).unwrap();
        let vf = evaluate_policy_analytic(&mdp, &policy).unwrap();
        for s in 0..6 {
            assert!((q[[s, 0]] - vf.q[[s, 0]]).abs() < 1e-7);
        }
    }

    #[test]
    fn value_iteration_picks_dominant_action() {
        // Action 1 strictly dominates action 0 in both states.
        let mut transition = Array3::zeros((2, 2, 2));
        for s in 0..2 {
            for a in 0..2 {
                transition[[s, a, s]] = 1.0;
            }
        }
        let mut reward = Array2::zeros((2, 2));
        reward[[0, 0]] = -0.5;
        reward[[0, 1]] = 0.5;
        reward[[1, 0]] = 0.0;
        reward[[1, 1]] = 0.9;
        let mdp = TabularMdp {
            n_states: 2,
            n_actions: 2,
            transition,
            reward,
            initial_dist: array![0.5, 0.5],
            discount: 0.9,
            absorbing: vec![false, false],
        };
        let (_, policy) = value_iteration(&mdp, 1e-10).unwrap();
        assert_eq!(policy.prob(0, 1), 1.0);
        assert_eq!(policy.prob(1, 1), 1.0);
    }

    #[test]
    fn value_iteration_beats_random_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mdp = random_mdp(6, 3, 0.9, &mut rng);
        let (_, greedy) = value_iteration(&mdp, 1e-10).unwrap();
        let greedy_val = evaluate_policy_analytic(&mdp, &greedy).unwrap().scalar_value;
        for _ in 0..100 {
            let p = random_policy(6, 3, &mut rng);
            let val = evaluate_policy_analytic(&mdp, &p).unwrap().scalar_value;
            assert!(greedy_val >= val - 1e-9);
        }
    }

    #[test]
    fn value_iteration_bellman_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mdp = random_mdp(5, 2, 0.9, &mut rng);
        let tol = 1e-8;
        let (q, _) = value_iteration(&mdp, tol).unwrap();
        for s in 0..5 {
            for a in 0..2 {
                let mut ev = 0.0;
                for sp in 0..5 {
                    let vmax = (0..2).map(|b| q[[sp, b]]).fold(f64::NEG_INFINITY, f64::max);
                    ev += mdp.transition[[s, a, sp]] * vmax;
                }
                let backup = mdp.reward[[s, a]] + 0.9 * ev;
                assert!((backup - q[[s, a]]).abs() <= tol);
            }
        }
    }

    fn tiny_dataset(transitions: Vec<Transition>) -> Dataset {
        let m = transitions
            .iter()
            .map(|t| t.episode_id)
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        Dataset {
            transitions,
            n_episodes: m,
            provenance: Provenance {
                seed: 0,
                behavior: "test".into(),
                env: "test".into(),
            },
        }
    }

    #[test]
    fn mle_single_transition() {
        let ds = tiny_dataset(vec![Transition {
            episode_id: 0,
            t: 1,
            state: 0,
            action: 1,
            reward: -1.0,
            next_state: 2,
            done: true,
        }]);
        let mdp = estimate_tabular_mdp(&ds, 4, 2, 0.99);
        assert_eq!(mdp.transition[[0, 1, 2]], 1.0);
        assert_eq!(mdp.reward[[0, 1]], -1.0);
        // Unseen pair self-loops.
        assert_eq!(mdp.transition[[0, 0, 0]], 1.0);
        assert!(mdp.max_row_sum_error() < 1e-9);
    }

    #[test]
    fn mle_splits_counts_evenly() {
        let mk = |eid, next| Transition {
            episode_id: eid,
            t: 1,
            state: 0,
            action: 1,
            reward: 0.0,
            next_state: next,
            done: true,
        };
        let ds = tiny_dataset(vec![mk(0, 2), mk(1, 3)]);
        let mdp = estimate_tabular_mdp(&ds, 4, 2, 0.99);
        assert_eq!(mdp.transition[[0, 1, 2]], 0.5);
        assert_eq!(mdp.transition[[0, 1, 3]], 0.5);
        assert_eq!(mdp.initial_dist[0], 1.0);
    }

    #[test]
    fn behavior_estimate_counts() {
        let mk = |eid, t, action| Transition {
            episode_id: eid,
            t,
            state: 5,
            action,
            reward: 0.0,
            next_state: 5,
            done: false,
        };
        let ds = tiny_dataset(vec![mk(0, 1, 0), mk(0, 2, 0), mk(0, 3, 1), mk(0, 4, 1)]);
        let pi = estimate_tabular_behavior(&ds, 8, 4);
        assert_eq!(pi.prob(5, 0), 0.5);
        assert_eq!(pi.prob(5, 1), 0.5);
        // Unvisited state is uniform.
        assert_eq!(pi.prob(0, 3), 0.25);
        for s in 0..8 {
            let sum: f64 = (0..4).map(|a| pi.prob(s, a)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn behavior_estimate_single_action() {
        let ds = tiny_dataset(vec![Transition {
            episode_id: 0,
            t: 1,
            state: 2,
            action: 3,
            reward: 0.0,
            next_state: 2,
            done: true,
        }]);
        let pi = estimate_tabular_behavior(&ds, 4, 4);
        assert_eq!(pi.prob(2, 3), 1.0);
    }
}
