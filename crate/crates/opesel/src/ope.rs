//! Off-policy evaluation estimators: weighted importance sampling (WIS),
//! approximate model (AM, tabular analytic and continuous rollout variants),
//! fitted Q evaluation (FQE), the weighted doubly robust estimator (WDR),
//! and the FQI-value / RMS-TDE baseline scores.

use ndarray::{Array1, Array2};

use crate::dataset::Dataset;
use crate::error::{OpeselError, Result};
use crate::mdp::{evaluate_policy_analytic, TabularMdp, TabularPolicy};
use crate::net::{fit_regressor, Mlp, NetConfig, PatternSet, Targets};
use crate::policy_learning::{policy_value_row, CLIP_RANGE};

/// One scalar value estimate with method-specific diagnostics. `value` is
/// the raw estimate; clipping to the return range happens at reporting time.
#[derive(Debug, Clone)]
pub struct OpeEstimate {
    pub value: f64,
    pub method: String,
    pub diagnostics: Diagnostics,
}

impl OpeEstimate {
    /// Value clipped to the range of possible returns, for reporting.
    pub fn reported_value(&self) -> f64 {
        self.value.clamp(CLIP_RANGE.0, CLIP_RANGE.1)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// (sum rho)^2 / sum rho^2 over final cumulative ratios.
    pub effective_sample_size: Option<f64>,
    pub rollout_count: Option<usize>,
    pub final_td_residual: Option<f64>,
    /// WDR terms skipped because the horizon's average ratio was zero.
    pub skipped_terms: Option<usize>,
}

/// Cumulative importance ratios per episode and horizon, with each episode's
/// ratio frozen at its final value beyond its own length. `cum[j][t]` holds
/// rho_{1:t} for episode j; `cum[j][0] = 1`.
fn cumulative_ratios(
    dataset: &Dataset,
    eval: &TabularPolicy,
    behavior: &TabularPolicy,
) -> Result<(Vec<Vec<f64>>, Vec<usize>, usize)> {
    let episodes = dataset.episodes();
    let lengths: Vec<usize> = episodes.iter().map(|ep| ep.len()).collect();
    let lmax = lengths.iter().copied().max().unwrap_or(0);
    let mut cum = Vec::with_capacity(episodes.len());
    for ep in &episodes {
        let mut row = Vec::with_capacity(lmax + 1);
        row.push(1.0);
        let mut running = 1.0;
        for t in 1..=lmax {
            if t <= ep.len() {
                let tr = &ep[t - 1];
                let pb = behavior.prob(tr.state, tr.action);
                if pb <= 0.0 {
                    return Err(OpeselError::InvalidArgument(format!(
                        "behavior policy assigns zero probability to logged action \
                         (s={}, a={})",
                        tr.state, tr.action
                    )));
                }
                running *= eval.prob(tr.state, tr.action) / pb;
            }
            row.push(running);
        }
        cum.push(row);
    }
    Ok((cum, lengths, lmax))
}

fn horizon_averages(cum: &[Vec<f64>], lmax: usize) -> Vec<f64> {
    let m = cum.len() as f64;
    (0..=lmax)
        .map(|t| cum.iter().map(|row| row[t]).sum::<f64>() / m)
        .collect()
}

/// Weighted importance sampling. The evaluation policy must already be
/// softened if it is deterministic; with all-zero cumulative ratios the
/// estimate is undefined and reported as an error.
pub fn wis(
    dataset: &Dataset,
    eval: &TabularPolicy,
    behavior: &TabularPolicy,
    discount: f64,
) -> Result<OpeEstimate> {
    let (cum, lengths, lmax) = cumulative_ratios(dataset, eval, behavior)?;
    let m = cum.len();
    if m == 0 {
        return Err(OpeselError::InvalidArgument("empty dataset".into()));
    }
    let w = horizon_averages(&cum, lmax);
    let returns = dataset.episode_returns(discount);
    let finals: Vec<f64> = (0..m).map(|j| cum[j][lengths[j]]).collect();
    let sum: f64 = finals.iter().sum();
    if sum == 0.0 {
        return Err(OpeselError::UndefinedEstimate);
    }
    let mut value = 0.0;
    for j in 0..m {
        let wl = w[lengths[j]];
        if wl > 0.0 {
            value += finals[j] / wl * returns[j];
        }
    }
    value /= m as f64;
    let sum_sq: f64 = finals.iter().map(|r| r * r).sum();
    let ess = sum * sum / sum_sq;
    Ok(OpeEstimate {
        value,
        method: "wis".into(),
        diagnostics: Diagnostics { effective_sample_size: Some(ess), ..Default::default() },
    })
}

/// Tabular approximate model: analytic evaluation of the policy on the MLE
/// MDP, averaged over the estimated initial-state distribution.
pub fn am_tabular(mle: &TabularMdp, policy: &TabularPolicy) -> Result<OpeEstimate> {
    let vf = evaluate_policy_analytic(mle, policy)?;
    Ok(OpeEstimate {
        value: vf.scalar_value,
        method: "am".into(),
        diagnostics: Diagnostics::default(),
    })
}

/// Continuous-state AM: deterministic expected-dynamics rollouts from the
/// observed initial feature vectors. `policy` maps a raw feature vector to
/// an action; models take (features ++ one-hot action) inputs.
pub fn am_rollout(
    delta_model: &Mlp,
    reward_model: &Mlp,
    policy: &dyn Fn(&Array1<f64>) -> usize,
    horizon: usize,
    init_features: &Array2<f64>,
    n_actions: usize,
    discount: f64,
) -> Result<OpeEstimate> {
    if horizon == 0 {
        return Err(OpeselError::InvalidArgument("rollout horizon must be >= 1".into()));
    }
    let d = init_features.ncols();
    let n = init_features.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let mut x = init_features.row(i).to_owned();
        let mut ret = 0.0;
        for t in 0..horizon {
            let a = policy(&x);
            let mut input = Array1::zeros(d + n_actions);
            input.slice_mut(ndarray::s![..d]).assign(&x);
            input[d + a] = 1.0;
            let batch = input.insert_axis(ndarray::Axis(0));
            let r = reward_model.predict(&batch)?[[0, 0]];
            ret += discount.powi(t as i32) * r;
            let delta = delta_model.predict(&batch)?;
            for k in 0..d {
                x[k] += delta[[0, k]];
            }
        }
        total += ret;
    }
    Ok(OpeEstimate {
        value: total / n as f64,
        method: "am".into(),
        diagnostics: Diagnostics { rollout_count: Some(n), ..Default::default() },
    })
}

/// Tabular FQE: H iterations of exact per-pair regression toward the
/// policy-expectation bootstrap target, clipped to the return range.
/// Returns the final Q-table and the initial-state value estimate.
pub fn fqe_tabular(
    dataset: &Dataset,
    policy: &TabularPolicy,
    horizon: usize,
    n_states: usize,
    n_actions: usize,
    discount: f64,
) -> (Array2<f64>, OpeEstimate) {
    let mut prev = Array2::<f64>::zeros((n_states, n_actions));
    let mut residual = 0.0f64;
    for _ in 0..horizon {
        let mut sums = Array2::<f64>::zeros((n_states, n_actions));
        let mut counts = Array2::<f64>::zeros((n_states, n_actions));
        for tr in &dataset.transitions {
            let bootstrap = if tr.done {
                0.0
            } else {
                policy_value_row(&prev, policy, tr.next_state)
            };
            let y = (tr.reward + discount * bootstrap).clamp(CLIP_RANGE.0, CLIP_RANGE.1);
            sums[[tr.state, tr.action]] += y;
            counts[[tr.state, tr.action]] += 1.0;
        }
        let mut q = Array2::<f64>::zeros((n_states, n_actions));
        residual = 0.0;
        for s in 0..n_states {
            for a in 0..n_actions {
                if counts[[s, a]] > 0.0 {
                    q[[s, a]] = sums[[s, a]] / counts[[s, a]];
                }
                residual = residual.max((q[[s, a]] - prev[[s, a]]).abs());
            }
        }
        prev = q;
    }
    let estimate = initial_value_estimate(dataset, policy, &prev, "fqe", Some(residual));
    (prev, estimate)
}

/// Neural FQE over state features with one output per action; each iteration
/// refits a fresh network to clipped policy-expectation targets.
pub fn fqe_neural(
    dataset: &Dataset,
    features: &Array2<f64>,
    policy: &TabularPolicy,
    horizon: usize,
    n_actions: usize,
    config: &NetConfig,
    discount: f64,
) -> Result<(Mlp, OpeEstimate)> {
    if horizon == 0 {
        return Err(OpeselError::InvalidArgument("FQE horizon must be >= 1".into()));
    }
    let n = dataset.transitions.len();
    let mut inputs = Array2::zeros((n, features.ncols()));
    let mut next_inputs = Array2::zeros((n, features.ncols()));
    let mut actions = Vec::with_capacity(n);
    for (i, tr) in dataset.transitions.iter().enumerate() {
        inputs.row_mut(i).assign(&features.row(tr.state));
        next_inputs.row_mut(i).assign(&features.row(tr.next_state));
        actions.push(tr.action);
    }
    let mut model: Option<Mlp> = None;
    for h in 0..horizon {
        let next_q = match &model {
            Some(m) => Some(m.predict(&next_inputs)?),
            None => None,
        };
        let values: Vec<f64> = dataset
            .transitions
            .iter()
            .enumerate()
            .map(|(i, tr)| {
                let bootstrap = if tr.done {
                    0.0
                } else {
                    match &next_q {
                        Some(q) => (0..n_actions)
                            .map(|a| policy.prob(tr.next_state, a) * q[[i, a]])
                            .sum(),
                        None => 0.0,
                    }
                };
                (tr.reward + discount * bootstrap).clamp(CLIP_RANGE.0, CLIP_RANGE.1)
            })
            .collect();
        let patterns = PatternSet {
            inputs: inputs.clone(),
            targets: Targets::MaskedRegression {
                outputs: actions.clone(),
                values,
                out_dim: n_actions,
            },
        };
        let iter_config = NetConfig {
            seed: crate::dataset::derive_seed(config.seed, 0x71 + h as u64),
            ..config.clone()
        };
        model = Some(fit_regressor(&patterns, &iter_config)?);
    }
    let model = model.unwrap();
    let q_table = model.predict(features)?;
    let estimate = initial_value_estimate(dataset, policy, &q_table, "fqe", None);
    Ok((model, estimate))
}

/// Mean over episode initial states of sum_a pi(a|s_1) Q(s_1, a).
fn initial_value_estimate(
    dataset: &Dataset,
    policy: &TabularPolicy,
    q: &Array2<f64>,
    method: &str,
    final_td_residual: Option<f64>,
) -> OpeEstimate {
    let init = dataset.initial_states();
    let value = init
        .iter()
        .map(|&s| policy_value_row(q, policy, s))
        .sum::<f64>()
        / init.len() as f64;
    OpeEstimate {
        value,
        method: method.into(),
        diagnostics: Diagnostics { final_td_residual, ..Default::default() },
    }
}

/// Weighted doubly robust estimator with a Q-table control variate.
/// Horizons whose average cumulative ratio is zero have the affected terms
/// skipped and counted in the diagnostics.
pub fn wdr(
    dataset: &Dataset,
    eval: &TabularPolicy,
    behavior: &TabularPolicy,
    qhat: &Array2<f64>,
    discount: f64,
) -> Result<OpeEstimate> {
    let (cum, lengths, lmax) = cumulative_ratios(dataset, eval, behavior)?;
    let m = cum.len();
    if m == 0 {
        return Err(OpeselError::InvalidArgument("empty dataset".into()));
    }
    let w = horizon_averages(&cum, lmax);
    let episodes = dataset.episodes();
    let mut value = 0.0;
    let mut skipped = 0usize;
    for (j, ep) in episodes.iter().enumerate() {
        let mut g = 0.0;
        for t in 1..=lengths[j] {
            let tr = &ep[t - 1];
            let gamma_t = discount.powi((t - 1) as i32);
            if w[t] > 0.0 {
                let ratio = cum[j][t] / w[t];
                g += ratio * gamma_t * tr.reward;
                g -= ratio * gamma_t * qhat[[tr.state, tr.action]];
            } else {
                skipped += 1;
            }
            if w[t - 1] > 0.0 {
                let ratio_prev = cum[j][t - 1] / w[t - 1];
                g += ratio_prev * gamma_t * policy_value_row(qhat, eval, tr.state);
            } else {
                skipped += 1;
            }
        }
        value += g;
    }
    value /= m as f64;
    Ok(OpeEstimate {
        value,
        method: "wdr".into(),
        diagnostics: Diagnostics { skipped_terms: Some(skipped), ..Default::default() },
    })
}

/// Per-decision weighted importance sampling (the first WDR term alone);
/// WDR with a zero control variate must match this exactly.
pub fn per_decision_wis(
    dataset: &Dataset,
    eval: &TabularPolicy,
    behavior: &TabularPolicy,
    discount: f64,
) -> Result<f64> {
    let (cum, lengths, lmax) = cumulative_ratios(dataset, eval, behavior)?;
    let m = cum.len();
    let w = horizon_averages(&cum, lmax);
    let episodes = dataset.episodes();
    let mut value = 0.0;
    for (j, ep) in episodes.iter().enumerate() {
        for t in 1..=lengths[j] {
            if w[t] > 0.0 {
                value += cum[j][t] / w[t] * discount.powi((t - 1) as i32) * ep[t - 1].reward;
            }
        }
    }
    Ok(value / m as f64)
}

/// FQI-value baseline: the candidate's own training Q-network
/// evaluated at the validation initial states.
pub fn fqi_value_score(
    q_train: &Array2<f64>,
    policy: &TabularPolicy,
    init_states: &[usize],
) -> OpeEstimate {
    let value = init_states
        .iter()
        .map(|&s| policy_value_row(q_train, policy, s))
        .sum::<f64>()
        / init_states.len() as f64;
    OpeEstimate { value, method: "fqi_value".into(), diagnostics: Diagnostics::default() }
}

/// Root-mean-squared temporal difference error of a Q-table on a dataset;
/// done transitions bootstrap zero.
pub fn rms_tde(
    dataset: &Dataset,
    policy: &TabularPolicy,
    qhat: &Array2<f64>,
    discount: f64,
) -> f64 {
    let mut sum_sq = 0.0;
    for tr in &dataset.transitions {
        let bootstrap = if tr.done {
            0.0
        } else {
            policy_value_row(qhat, policy, tr.next_state)
        };
        let delta = tr.reward + discount * bootstrap - qhat[[tr.state, tr.action]];
        sum_sq += delta * delta;
    }
    (sum_sq / dataset.transitions.len() as f64).sqrt()
}
