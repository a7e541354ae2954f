//! Python bindings: dataset generation, OPE scoring of a tabular policy,
//! analytic ground truth, selection metrics, and the full pipeline.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use opesel::cli::{self, parse_behavior, ExperimentConfig};
use opesel::dataset;
use opesel::mdp::{estimate_tabular_behavior, estimate_tabular_mdp, evaluate_policy_analytic};
use opesel::ope;
use opesel::policy_learning::soften_actions;
use opesel::selection;
use opesel::sepsis::{self, SepsisSim};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Basic simulator dimensions: (non-absorbing states, total states, actions,
/// feature dimension, initial-state support, max episode length).
#[pyfunction]
fn simulator_dimensions() -> (usize, usize, usize, usize, usize, usize) {
    let sim = SepsisSim::new();
    (
        sepsis::N_NONABSORBING,
        sepsis::N_STATES,
        sepsis::N_ACTIONS,
        sepsis::FEATURE_DIM,
        sim.n_initial_states(),
        sepsis::MAX_EPISODE_LEN,
    )
}

/// Generates a dataset and returns it in the opesel-dataset v1 text format.
#[pyfunction]
#[pyo3(signature = (behavior, m, seed, max_len = sepsis::MAX_EPISODE_LEN, discount = 0.99))]
fn generate_dataset(
    behavior: &str,
    m: usize,
    seed: u64,
    max_len: usize,
    discount: f64,
) -> PyResult<String> {
    let spec = parse_behavior(behavior).map_err(err)?;
    let sim = SepsisSim::new();
    let ds = dataset::generate(&sim, &spec, m, max_len, seed, discount).map_err(err)?;
    Ok(dataset::to_string(&ds))
}

/// Analytic value of a deterministic tabular policy (given as one action per
/// state), softened with `epsilon`, on the exact simulator MDP.
#[pyfunction]
#[pyo3(signature = (actions, epsilon = 0.01, discount = 0.99))]
fn true_policy_value(actions: Vec<usize>, epsilon: f64, discount: f64) -> PyResult<f64> {
    if actions.len() != sepsis::N_STATES {
        return Err(PyValueError::new_err(format!(
            "expected {} actions, got {}",
            sepsis::N_STATES,
            actions.len()
        )));
    }
    let sim = SepsisSim::new();
    let exact = sim.exact_mdp(discount);
    let policy = soften_actions(&actions, sepsis::N_ACTIONS, epsilon);
    Ok(evaluate_policy_analytic(&exact, &policy).map_err(err)?.scalar_value)
}

/// Scores a deterministic tabular policy on a dataset (text format) with the
/// tabular estimators. Returns a dict method -> value; undefined WIS maps to
/// None.
#[pyfunction]
#[pyo3(signature = (dataset_text, actions, epsilon = 0.01, horizon = 20, discount = 0.99))]
fn score_policy(
    py: Python<'_>,
    dataset_text: &str,
    actions: Vec<usize>,
    epsilon: f64,
    horizon: usize,
    discount: f64,
) -> PyResult<PyObject> {
    let ds = dataset::from_string(dataset_text).map_err(err)?;
    let policy = soften_actions(&actions, sepsis::N_ACTIONS, epsilon);
    let behavior = estimate_tabular_behavior(&ds, sepsis::N_STATES, sepsis::N_ACTIONS);
    let mle = estimate_tabular_mdp(&ds, sepsis::N_STATES, sepsis::N_ACTIONS, discount);
    let dict = pyo3::types::PyDict::new_bound(py);
    let wis = match ope::wis(&ds, &policy, &behavior, discount) {
        Ok(est) => Some(est.value),
        Err(opesel::OpeselError::UndefinedEstimate) => None,
        Err(e) => return Err(err(e)),
    };
    dict.set_item("wis", wis)?;
    dict.set_item("am", ope::am_tabular(&mle, &policy).map_err(err)?.value)?;
    let (q_fqe, fqe_est) =
        ope::fqe_tabular(&ds, &policy, horizon, sepsis::N_STATES, sepsis::N_ACTIONS, discount);
    dict.set_item("fqe", fqe_est.value)?;
    dict.set_item(
        "wdr",
        ope::wdr(&ds, &policy, &behavior, &q_fqe, discount).map_err(err)?.value,
    )?;
    Ok(dict.into())
}

#[pyfunction]
fn spearman_rho(scores: Vec<f64>, truths: Vec<f64>) -> PyResult<f64> {
    selection::spearman_rho(&scores, &truths).map_err(err)
}

#[pyfunction]
fn regret_at_n(scores: Vec<f64>, truths: Vec<f64>, n: usize) -> PyResult<f64> {
    selection::regret_at_n(&scores, &truths, n).map_err(err)
}

#[pyfunction]
fn random_prune_probability(a: u64, b: u64, c: u64) -> PyResult<f64> {
    selection::random_prune_probability(a, b, c).map_err(err)
}

/// Runs the full pipeline from config text; returns the report paths.
#[pyfunction]
fn run_pipeline(config_text: &str, output_dir: &str) -> PyResult<Vec<String>> {
    let mut config = ExperimentConfig::parse(config_text).map_err(err)?;
    config.output_dir = output_dir.into();
    let paths = cli::run_pipeline(&config).map_err(err)?;
    Ok(paths.iter().map(|p| p.display().to_string()).collect())
}

#[pymodule]
fn opesel_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulator_dimensions, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(true_policy_value, m)?)?;
    m.add_function(wrap_pyfunction!(score_policy, m)?)?;
    m.add_function(wrap_pyfunction!(spearman_rho, m)?)?;
    m.add_function(wrap_pyfunction!(regret_at_n, m)?)?;
    m.add_function(wrap_pyfunction!(random_prune_probability, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
