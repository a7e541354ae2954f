//! Experiment orchestration: configs, the end-to-end pipeline (generate ->
//! train -> evaluate -> select), report rendering, and the plain-text file
//! formats shared by the CLI subcommands. All file writes are atomic
//! (write-then-rename) and all output embeds the resolved config.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::dataset::{self, derive_seed, BehaviorSpec, Dataset};
use crate::error::{OpeselError, Result};
use crate::mdp::{
    estimate_tabular_behavior, estimate_tabular_mdp, evaluate_policy_analytic, TabularMdp,
    TabularPolicy,
};
use crate::net::{fit_classifier, fit_regressor, NetConfig, PatternSet, Targets};
use crate::ope;
use crate::policy_learning::{
    build_candidates, build_candidates_tabular, greedy_actions, soften_actions, Candidate,
    CandidateSet, HyperGrid, HyperRecord,
};
use crate::selection;
use crate::sepsis::{self, SepsisSim};

/// Writes a file atomically: the content lands in a dot-prefixed temp file
/// in the same directory and is renamed into place.
pub fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| OpeselError::InvalidArgument(format!("bad output path {path:?}")))?;
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateMode {
    Discrete,
    Continuous,
}

impl std::fmt::Display for StateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateMode::Discrete => write!(f, "discrete"),
            StateMode::Continuous => write!(f, "continuous"),
        }
    }
}

impl std::str::FromStr for StateMode {
    type Err = OpeselError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(StateMode::Discrete),
            "continuous" => Ok(StateMode::Continuous),
            other => Err(OpeselError::InvalidArgument(format!("unknown state_mode `{other}`"))),
        }
    }
}

/// Parses a behavior label: `uniform`, `eps_greedy_<x>`, or
/// `mixture[<label>:<count>+...]` (the inverse of `BehaviorSpec::label`).
pub fn parse_behavior(s: &str) -> Result<BehaviorSpec> {
    if s == "uniform" {
        return Ok(BehaviorSpec::UniformRandom);
    }
    if let Some(eps) = s.strip_prefix("eps_greedy_") {
        let epsilon: f64 = eps
            .parse()
            .map_err(|_| OpeselError::InvalidArgument(format!("bad epsilon in `{s}`")))?;
        return Ok(BehaviorSpec::EpsilonGreedy { epsilon });
    }
    if let Some(inner) = s.strip_prefix("mixture[").and_then(|r| r.strip_suffix(']')) {
        let mut components = Vec::new();
        for part in inner.split('+') {
            let (label, count) = part.rsplit_once(':').ok_or_else(|| {
                OpeselError::InvalidArgument(format!("bad mixture component `{part}`"))
            })?;
            let count: usize = count
                .parse()
                .map_err(|_| OpeselError::InvalidArgument(format!("bad count in `{part}`")))?;
            components.push((parse_behavior(label)?, count));
        }
        return Ok(BehaviorSpec::Mixture { components });
    }
    Err(OpeselError::InvalidArgument(format!("unknown behavior `{s}`")))
}

pub const ALL_METHODS: [&str; 6] = ["wis", "am", "fqe", "wdr", "fqi_value", "neg_rms_tde"];
/// Methods combined by the averaging baselines.
const COMBINED_BASE: [&str; 4] = ["wis", "am", "fqe", "wdr"];

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub env: String,
    pub state_mode: StateMode,
    pub m_train: usize,
    pub m_val: usize,
    pub behavior: BehaviorSpec,
    /// FQI checkpoint iterations used as the candidate set in discrete mode.
    pub checkpoints: Vec<usize>,
    /// Hyperparameter grid used in continuous mode.
    pub grid: HyperGrid,
    /// Network defaults for candidates (continuous mode) and FQE-neural.
    pub net_units: usize,
    pub net_learning_rate: f64,
    pub net_max_epochs: usize,
    /// Softening for evaluated policies in importance-sampling estimators.
    pub epsilon: f64,
    /// FQE / rollout evaluation horizon.
    pub horizon: usize,
    pub discount: f64,
    pub methods: Vec<String>,
    /// Two-stage subset size; 0 means K/4.
    pub alpha: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: "sepsis".into(),
            state_mode: StateMode::Discrete,
            m_train: 1000,
            m_val: 1000,
            behavior: BehaviorSpec::UniformRandom,
            checkpoints: (1..=32).collect(),
            grid: HyperGrid::default(),
            net_units: 1000,
            net_learning_rate: 1e-3,
            net_max_epochs: 100,
            epsilon: 0.01,
            horizon: 20,
            discount: 0.99,
            methods: ALL_METHODS.iter().map(|s| s.to_string()).collect(),
            alpha: 0,
            seeds: vec![1],
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(OpeselError::InvalidArgument("seeds must be non-empty".into()));
        }
        if self.m_train == 0 || self.m_val == 0 {
            return Err(OpeselError::InvalidArgument("m_train and m_val must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(OpeselError::InvalidArgument("horizon must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(OpeselError::InvalidArgument("epsilon must be in [0, 1)".into()));
        }
        if self.state_mode == StateMode::Discrete && self.checkpoints.is_empty() {
            return Err(OpeselError::InvalidArgument("checkpoints must be non-empty".into()));
        }
        for m in &self.methods {
            if !ALL_METHODS.contains(&m.as_str()) {
                return Err(OpeselError::InvalidArgument(format!("unknown method `{m}`")));
            }
        }
        Ok(())
    }

    /// Candidate-set size for this config.
    pub fn k(&self) -> usize {
        match self.state_mode {
            StateMode::Discrete => self.checkpoints.len(),
            StateMode::Continuous => self.grid.size(),
        }
    }

    pub fn resolved_alpha(&self) -> usize {
        if self.alpha > 0 {
            self.alpha
        } else {
            (self.k() / 4).max(1)
        }
    }

    /// Single-line resolved form embedded in every output header.
    pub fn resolved_line(&self) -> String {
        format!(
            "env={}; state_mode={}; m_train={}; m_val={}; behavior={}; checkpoints={}; \
             epsilon={}; horizon={}; discount={}; methods={}; alpha={}; seeds={}",
            self.env,
            self.state_mode,
            self.m_train,
            self.m_val,
            self.behavior.label(),
            join_usizes(&self.checkpoints),
            self.epsilon,
            self.horizon,
            self.discount,
            self.methods.join(","),
            self.resolved_alpha(),
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        )
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| OpeselError::Parse {
                line: idx + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            config.set(key.trim(), value.trim()).map_err(|e| OpeselError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        }
        Ok(config)
    }

    /// Applies a single key/value override (config-file keys; flags reuse it
    /// so flags win by being applied last).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| OpeselError::InvalidArgument(format!("bad {what} `{value}`"));
        match key {
            "env" => self.env = value.to_string(),
            "state_mode" => self.state_mode = value.parse()?,
            "m_train" => self.m_train = value.parse().map_err(|_| bad("m_train"))?,
            "m_val" => self.m_val = value.parse().map_err(|_| bad("m_val"))?,
            "behavior" => self.behavior = parse_behavior(value)?,
            "checkpoints" => self.checkpoints = parse_usizes(value)?,
            "grid.layers" => self.grid.hidden_layers = parse_usizes(value)?,
            "grid.units" => self.grid.hidden_units = parse_usizes(value)?,
            "grid.lrs" => self.grid.learning_rates = parse_f64s(value)?,
            "grid.iters" => self.grid.fqi_iterations = parse_usizes(value)?,
            "net_units" => self.net_units = value.parse().map_err(|_| bad("net_units"))?,
            "net_learning_rate" => {
                self.net_learning_rate = value.parse().map_err(|_| bad("net_learning_rate"))?
            }
            "net_max_epochs" => {
                self.net_max_epochs = value.parse().map_err(|_| bad("net_max_epochs"))?
            }
            "epsilon" => self.epsilon = value.parse().map_err(|_| bad("epsilon"))?,
            "horizon" => self.horizon = value.parse().map_err(|_| bad("horizon"))?,
            "discount" => self.discount = value.parse().map_err(|_| bad("discount"))?,
            "methods" => {
                self.methods = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            "alpha" => self.alpha = value.parse().map_err(|_| bad("alpha"))?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| bad("seeds")))
                    .collect::<Result<_>>()?
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            other => {
                return Err(OpeselError::InvalidArgument(format!("unknown config key `{other}`")))
            }
        }
        Ok(())
    }
}

fn parse_usizes(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| OpeselError::InvalidArgument(format!("bad integer `{s}`")))
        })
        .collect()
}

fn parse_f64s(value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| OpeselError::InvalidArgument(format!("bad number `{s}`")))
        })
        .collect()
}

fn join_usizes(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Per-method score vectors over a candidate set. Undefined estimates are
/// stored as negative infinity so they rank below every defined score.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub methods: Vec<String>,
    pub scores: BTreeMap<String, Vec<f64>>,
}

impl ScoreTable {
    pub fn k(&self) -> usize {
        self.scores.values().next().map_or(0, |v| v.len())
    }
}

fn fmt_score(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "NA".into()
    } else {
        format!("{v:.6}")
    }
}

fn parse_score(s: &str) -> Result<f64> {
    if s == "NA" {
        Ok(f64::NEG_INFINITY)
    } else {
        s.parse()
            .map_err(|_| OpeselError::InvalidArgument(format!("bad score `{s}`")))
    }
}

/// Replaces undefined (negative-infinity) entries with one less than the
/// worst defined score, so score averaging stays finite while undefined
/// estimates still rank last.
fn sanitize_scores(scores: &[f64]) -> Vec<f64> {
    let min_finite = scores
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    let floor = if min_finite.is_finite() { min_finite - 1.0 } else { 0.0 };
    scores
        .iter()
        .map(|&v| if v == f64::NEG_INFINITY { floor } else { v })
        .collect()
}

/// Auxiliary models fitted once per validation set and shared across all
/// candidates (behavior policy, MLE model, and in continuous mode the
/// dynamics/reward regressors).
pub struct Auxiliaries {
    pub behavior: TabularPolicy,
    pub mle: Option<TabularMdp>,
    pub delta_model: Option<crate::net::Mlp>,
    pub reward_model: Option<crate::net::Mlp>,
}

fn aux_net_config(config: &ExperimentConfig, seed: u64, stream: u64) -> NetConfig {
    NetConfig {
        max_epochs: config.net_max_epochs,
        ..NetConfig::new(1, config.net_units, config.net_learning_rate, derive_seed(seed, stream))
    }
}

pub fn fit_auxiliaries(
    val: &Dataset,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Auxiliaries> {
    let n_states = sepsis::N_STATES;
    let n_actions = sepsis::N_ACTIONS;
    match config.state_mode {
        StateMode::Discrete => Ok(Auxiliaries {
            behavior: estimate_tabular_behavior(val, n_states, n_actions),
            mle: Some(estimate_tabular_mdp(val, n_states, n_actions, config.discount)),
            delta_model: None,
            reward_model: None,
        }),
        StateMode::Continuous => {
            let features = sepsis::feature_matrix();
            let n = val.transitions.len();
            let mut state_inputs = Array2::zeros((n, features.ncols()));
            let mut sa_inputs = Array2::zeros((n, features.ncols() + n_actions));
            let mut labels = Vec::with_capacity(n);
            let mut deltas = Array2::zeros((n, features.ncols()));
            let mut rewards = Array2::zeros((n, 1));
            for (i, tr) in val.transitions.iter().enumerate() {
                let x = features.row(tr.state);
                state_inputs.row_mut(i).assign(&x);
                sa_inputs.row_mut(i).slice_mut(ndarray::s![..features.ncols()]).assign(&x);
                sa_inputs[[i, features.ncols() + tr.action]] = 1.0;
                labels.push(tr.action);
                let xp = features.row(tr.next_state);
                for k in 0..features.ncols() {
                    deltas[[i, k]] = xp[k] - x[k];
                }
                rewards[[i, 0]] = tr.reward;
            }
            let classifier = fit_classifier(
                &PatternSet {
                    inputs: state_inputs,
                    targets: Targets::Classes { labels, n_classes: n_actions },
                },
                &aux_net_config(config, seed, 0x81),
            )?;
            // Materialize the behavior classifier to a tabular policy; its
            // softmax outputs are strictly positive, which keeps WIS ratios
            // well defined.
            let behavior = TabularPolicy { action_probs: classifier.predict(&features)? };
            let delta_model = fit_regressor(
                &PatternSet {
                    inputs: sa_inputs.clone(),
                    targets: Targets::Regression(deltas),
                },
                &aux_net_config(config, seed, 0x82),
            )?;
            let reward_model = fit_regressor(
                &PatternSet {
                    inputs: sa_inputs,
                    targets: Targets::Regression(rewards),
                },
                &aux_net_config(config, seed, 0x83),
            )?;
            Ok(Auxiliaries {
                behavior,
                mle: None,
                delta_model: Some(delta_model),
                reward_model: Some(reward_model),
            })
        }
    }
}

/// Snaps a rolled-out feature vector to the nearest discrete state by taking
/// the argmax within each one-hot block.
fn nearest_state(x: &Array1<f64>) -> usize {
    let blocks: [usize; 8] = [3, 3, 2, 5, 2, 2, 2, 2];
    let mut offset = 0;
    let mut levels = [0usize; 8];
    for (b, &width) in blocks.iter().enumerate() {
        let mut best = 0;
        for j in 1..width {
            if x[offset + j] > x[offset + best] {
                best = j;
            }
        }
        levels[b] = best;
        offset += width;
    }
    sepsis::SepsisState {
        hr: levels[0] as u8,
        sbp: levels[1] as u8,
        o2: levels[2] as u8,
        glu: levels[3] as u8,
        abx: levels[4] as u8,
        vaso: levels[5] as u8,
        vent: levels[6] as u8,
        diab: levels[7] as u8,
    }
    .index()
}

/// Scores every candidate on the validation set with each configured method.
pub fn score_candidates(
    val: &Dataset,
    set: &CandidateSet,
    aux: &Auxiliaries,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<ScoreTable> {
    let n_actions = sepsis::N_ACTIONS;
    let init_states = val.initial_states();
    let features = match config.state_mode {
        StateMode::Continuous => Some(sepsis::feature_matrix()),
        StateMode::Discrete => None,
    };
    let init_features = features.as_ref().map(|f| {
        let mut out = Array2::zeros((init_states.len(), f.ncols()));
        for (i, &s) in init_states.iter().enumerate() {
            out.row_mut(i).assign(&f.row(s));
        }
        out
    });

    let per_candidate: Vec<Result<BTreeMap<String, f64>>> = set
        .candidates
        .par_iter()
        .map(|cand| {
            let soft = soften_actions(&cand.actions, n_actions, config.epsilon);
            let mut row = BTreeMap::new();
            for method in &config.methods {
                let score = match method.as_str() {
                    "wis" => match ope::wis(val, &soft, &aux.behavior, config.discount) {
                        Ok(est) => est.value,
                        Err(OpeselError::UndefinedEstimate) => f64::NEG_INFINITY,
                        Err(e) => return Err(e),
                    },
                    "am" => match (&aux.mle, &aux.delta_model) {
                        (Some(mle), _) => ope::am_tabular(mle, &soft)?.value,
                        (None, Some(delta)) => {
                            let reward = aux.reward_model.as_ref().unwrap();
                            let actions = cand.actions.clone();
                            let policy =
                                move |x: &Array1<f64>| actions[nearest_state(x)];
                            ope::am_rollout(
                                delta,
                                reward,
                                &policy,
                                config.horizon,
                                init_features.as_ref().unwrap(),
                                n_actions,
                                config.discount,
                            )?
                            .value
                        }
                        _ => unreachable!("auxiliaries missing both model variants"),
                    },
                    "fqe" | "wdr" => continue, // handled jointly below
                    "fqi_value" => ope::fqi_value_score(&cand.q, &soft, &init_states).value,
                    "neg_rms_tde" => -ope::rms_tde(val, &soft, &cand.q, config.discount),
                    other => {
                        return Err(OpeselError::InvalidArgument(format!(
                            "unknown method `{other}`"
                        )))
                    }
                };
                row.insert(method.clone(), score);
            }
            let needs_fqe = config.methods.iter().any(|m| m == "fqe" || m == "wdr");
            if needs_fqe {
                let (q_fqe, fqe_est) = match (&features, config.state_mode) {
                    (Some(feat), StateMode::Continuous) => {
                        let net = NetConfig {
                            max_epochs: config.net_max_epochs,
                            ..NetConfig::new(
                                1,
                                config.net_units,
                                config.net_learning_rate,
                                derive_seed(seed, 0x90 + cand.id as u64),
                            )
                        };
                        let (model, est) = ope::fqe_neural(
                            val,
                            feat,
                            &soft,
                            config.horizon,
                            n_actions,
                            &net,
                            config.discount,
                        )?;
                        (model.predict(feat)?, est)
                    }
                    _ => ope::fqe_tabular(
                        val,
                        &soft,
                        config.horizon,
                        sepsis::N_STATES,
                        n_actions,
                        config.discount,
                    ),
                };
                if config.methods.iter().any(|m| m == "fqe") {
                    row.insert("fqe".into(), fqe_est.value);
                }
                if config.methods.iter().any(|m| m == "wdr") {
                    let est = ope::wdr(val, &soft, &aux.behavior, &q_fqe, config.discount)?;
                    row.insert("wdr".into(), est.value);
                }
            }
            Ok(row)
        })
        .collect();

    let mut scores: BTreeMap<String, Vec<f64>> = config
        .methods
        .iter()
        .map(|m| (m.clone(), Vec::with_capacity(set.candidates.len())))
        .collect();
    for row in per_candidate {
        let row = row?;
        for m in &config.methods {
            scores.get_mut(m).unwrap().push(row[m]);
        }
    }
    Ok(ScoreTable { methods: config.methods.clone(), scores })
}

/// Analytic ground-truth value of each candidate's softened policy on the
/// exact MDP; identical action tables are solved once.
pub fn ground_truths(
    exact: &TabularMdp,
    set: &CandidateSet,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let mut unique: HashMap<&[usize], Vec<usize>> = HashMap::new();
    for (i, cand) in set.candidates.iter().enumerate() {
        unique.entry(cand.actions.as_slice()).or_default().push(i);
    }
    let groups: Vec<(&[usize], Vec<usize>)> = unique.into_iter().collect();
    let values: Vec<Result<f64>> = groups
        .par_iter()
        .map(|(actions, _)| {
            let policy = soften_actions(actions, exact.n_actions, epsilon);
            Ok(evaluate_policy_analytic(exact, &policy)?.scalar_value)
        })
        .collect();
    let mut out = vec![0.0; set.candidates.len()];
    for ((_, members), value) in groups.iter().zip(values) {
        let v = value?;
        for &i in members {
            out[i] = v;
        }
    }
    Ok(out)
}

/// Everything computed for one seed of the pipeline.
pub struct SeedOutcome {
    pub seed: u64,
    pub set: CandidateSet,
    pub truths: Vec<f64>,
    pub table: ScoreTable,
}

pub fn build_candidate_set(
    train: &Dataset,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<CandidateSet> {
    match config.state_mode {
        StateMode::Discrete => Ok(build_candidates_tabular(
            train,
            sepsis::N_STATES,
            sepsis::N_ACTIONS,
            &config.checkpoints,
            config.discount,
            seed,
        )),
        StateMode::Continuous => {
            let features = sepsis::feature_matrix();
            let base = NetConfig {
                max_epochs: config.net_max_epochs,
                ..NetConfig::new(1, config.net_units, config.net_learning_rate, seed)
            };
            build_candidates(
                train,
                &features,
                sepsis::N_ACTIONS,
                &config.grid,
                &base,
                config.discount,
                seed,
            )
        }
    }
}

pub fn run_seed(
    sim: &SepsisSim,
    exact: &TabularMdp,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<SeedOutcome> {
    let train = dataset::generate(
        sim,
        &config.behavior,
        config.m_train,
        sepsis::MAX_EPISODE_LEN,
        derive_seed(seed, 0xA1),
        config.discount,
    )?;
    let val = dataset::generate(
        sim,
        &config.behavior,
        config.m_val,
        sepsis::MAX_EPISODE_LEN,
        derive_seed(seed, 0xA2),
        config.discount,
    )?;
    let set = build_candidate_set(&train, config, seed)?;
    let aux = fit_auxiliaries(&val, config, seed)?;
    let table = score_candidates(&val, &set, &aux, config, seed)?;
    let truths = ground_truths(exact, &set, config.epsilon)?;
    Ok(SeedOutcome { seed, set, truths, table })
}

/// Summary metrics for one method's scores against the truths.
pub struct MethodSummary {
    pub rho: Option<f64>,
    pub regret: [f64; 3],
    pub chosen: usize,
}

pub fn summarize_method(scores: &[f64], truths: &[f64]) -> Result<MethodSummary> {
    let k = scores.len();
    let rho = selection::spearman_rho(scores, truths).ok();
    let regret = [
        selection::regret_at_n(scores, truths, 1)?,
        selection::regret_at_n(scores, truths, 5.min(k))?,
        selection::regret_at_n(scores, truths, 10.min(k))?,
    ];
    let chosen = selection::top_n_by(scores, 1)[0];
    Ok(MethodSummary { rho, regret, chosen })
}

/// Renders the per-seed selection report: header, per-candidate rows with
/// truth, scores and ranks, and a summary block.
pub fn render_report(config_line: &str, outcome: &SeedOutcome, alpha: usize) -> Result<String> {
    let table = &outcome.table;
    let truths = &outcome.truths;
    let k = table.k();
    let mut out = String::new();
    writeln!(out, "# opesel-report v1; seed={}", outcome.seed).unwrap();
    writeln!(out, "# config: {config_line}").unwrap();
    let mut header = String::from("policy_id,hyper,truth");
    for m in &table.methods {
        write!(header, ",{m}_score,{m}_rank").unwrap();
    }
    writeln!(out, "{header}").unwrap();
    let ranks: BTreeMap<&String, Vec<f64>> = table
        .methods
        .iter()
        .map(|m| (m, selection::average_ranks(&table.scores[m])))
        .collect();
    for i in 0..k {
        let cand = &outcome.set.candidates[i];
        write!(out, "{},{},{:.6}", cand.id, cand.hyper, truths[i]).unwrap();
        for m in &table.methods {
            write!(out, ",{},{:.1}", fmt_score(table.scores[m][i]), ranks[m][i]).unwrap();
        }
        out.push('\n');
    }

    // Summary: per-method ranking quality plus averaging baselines and the
    // two-stage procedure.
    let mut combined: Vec<(String, Vec<f64>)> = Vec::new();
    let base_rows: Vec<Vec<f64>> = COMBINED_BASE
        .iter()
        .filter(|m| table.scores.contains_key(**m))
        .map(|m| sanitize_scores(&table.scores[*m]))
        .collect();
    if base_rows.len() >= 2 {
        combined.push(("avg_score".into(), selection::average_score(&base_rows)?));
        combined.push(("avg_rank".into(), selection::average_rank_score(&base_rows)?));
    }
    writeln!(out, "# summary").unwrap();
    writeln!(out, "# method,rho,regret@1,regret@5,regret@10,chosen").unwrap();
    let named: Vec<(String, &Vec<f64>)> = table
        .methods
        .iter()
        .map(|m| (m.clone(), &table.scores[m]))
        .chain(combined.iter().map(|(n, v)| (n.clone(), v)))
        .collect();
    for (name, scores) in &named {
        let s = summarize_method(scores, truths)?;
        let rho = s.rho.map_or("NA".into(), |r| format!("{r:.4}"));
        writeln!(
            out,
            "# {name},{rho},{:.6},{:.6},{:.6},{}",
            s.regret[0], s.regret[1], s.regret[2], s.chosen
        )
        .unwrap();
    }
    if table.scores.contains_key("wis") && table.scores.contains_key("fqe") {
        let stage1 = &table.scores["wis"];
        let stage2 = &table.scores["fqe"];
        let alpha = alpha.min(k).max(1);
        let chosen = selection::two_stage_select_precomputed(stage1, stage2, alpha)?;
        let best = truths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        writeln!(
            out,
            "# two_stage,wis,fqe,alpha={alpha},chosen={chosen},regret@1={:.6}",
            best - truths[chosen]
        )
        .unwrap();
    }
    Ok(out)
}

/// Renders the cross-seed aggregate: mean and standard deviation of rho and
/// regret per method.
pub fn render_aggregate(config_line: &str, outcomes: &[SeedOutcome]) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "# opesel-aggregate v1; runs={}", outcomes.len()).unwrap();
    writeln!(out, "# config: {config_line}").unwrap();
    writeln!(out, "method,rho_mean,rho_std,regret1_mean,regret5_mean,regret10_mean").unwrap();
    let methods = outcomes[0].table.methods.clone();
    for m in &methods {
        let mut rhos = Vec::new();
        let mut regrets = [Vec::new(), Vec::new(), Vec::new()];
        for o in outcomes {
            let s = summarize_method(&o.table.scores[m], &o.truths)?;
            if let Some(r) = s.rho {
                rhos.push(r);
            }
            for (i, v) in s.regret.iter().enumerate() {
                regrets[i].push(*v);
            }
        }
        let (rm, rs) = mean_std(&rhos);
        writeln!(
            out,
            "{m},{:.4},{:.4},{:.6},{:.6},{:.6}",
            rm,
            rs,
            mean_std(&regrets[0]).0,
            mean_std(&regrets[1]).0,
            mean_std(&regrets[2]).0
        )
        .unwrap();
    }
    Ok(out)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
    (mean, var.sqrt())
}

/// Runs the full pipeline for every configured seed. A failing seed is
/// logged and skipped; the aggregate covers the seeds that completed.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let sim = SepsisSim::new();
    let exact = sim.exact_mdp(config.discount);
    let config_line = config.resolved_line();
    let mut outcomes = Vec::new();
    let mut paths = Vec::new();
    for &seed in &config.seeds {
        match run_seed(&sim, &exact, config, seed) {
            Ok(outcome) => {
                let report = render_report(&config_line, &outcome, config.resolved_alpha())?;
                let path = config.output_dir.join(format!("report_seed{seed}.csv"));
                atomic_write(&path, &report)?;
                paths.push(path);
                outcomes.push(outcome);
            }
            Err(e) => {
                eprintln!("error: seed {seed} failed: {e}");
            }
        }
    }
    if outcomes.is_empty() {
        return Err(OpeselError::InvalidArgument("every seed failed".into()));
    }
    let aggregate = render_aggregate(&config_line, &outcomes)?;
    let path = config.output_dir.join("aggregate.csv");
    atomic_write(&path, &aggregate)?;
    paths.push(path);
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Sensitivity analysis
// ---------------------------------------------------------------------------

/// Axes the `analyze` sweep can vary. Training data and candidates stay
/// fixed across the sweep; only validation-side inputs change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Epsilon,
    Horizon,
    MVal,
    Behavior,
}

impl std::str::FromStr for SweepAxis {
    type Err = OpeselError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(SweepAxis::Epsilon),
            "horizon" => Ok(SweepAxis::Horizon),
            "m_val" => Ok(SweepAxis::MVal),
            "behavior" => Ok(SweepAxis::Behavior),
            other => Err(OpeselError::InvalidArgument(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// Sweeps one axis over the given values; per (value, seed, method) emits
/// rho and regret rows. Datasets and candidates are cached per seed and
/// reused whenever only OPE hyperparameters (epsilon, horizon) change.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<String> {
    base.validate()?;
    let sim = SepsisSim::new();
    let exact = sim.exact_mdp(base.discount);
    let mut out = format!("# opesel-sweep v1; axis={axis:?}\n# config: {}\n", base.resolved_line());
    out.push_str("axis_value,seed,method,rho,regret@1,regret@5\n");
    for &seed in &base.seeds {
        // Cached across the sweep: training data, candidates, and (for OPE
        // hyperparameter axes) the validation set and auxiliaries.
        let train = dataset::generate(
            &sim,
            &base.behavior,
            base.m_train,
            sepsis::MAX_EPISODE_LEN,
            derive_seed(seed, 0xA1),
            base.discount,
        )?;
        let set = build_candidate_set(&train, base, seed)?;
        let base_val = dataset::generate(
            &sim,
            &base.behavior,
            base.m_val,
            sepsis::MAX_EPISODE_LEN,
            derive_seed(seed, 0xA2),
            base.discount,
        )?;
        let base_aux = fit_auxiliaries(&base_val, base, seed)?;
        for value in values {
            let mut config = base.clone();
            let key = match axis {
                SweepAxis::Epsilon => "epsilon",
                SweepAxis::Horizon => "horizon",
                SweepAxis::MVal => "m_val",
                SweepAxis::Behavior => "behavior",
            };
            config.set(key, value)?;
            let (val, aux);
            let (val_ref, aux_ref) = match axis {
                SweepAxis::Epsilon | SweepAxis::Horizon => (&base_val, &base_aux),
                SweepAxis::MVal | SweepAxis::Behavior => {
                    val = dataset::generate(
                        &sim,
                        &config.behavior,
                        config.m_val,
                        sepsis::MAX_EPISODE_LEN,
                        derive_seed(seed, 0xA2),
                        config.discount,
                    )?;
                    aux = fit_auxiliaries(&val, &config, seed)?;
                    (&val, &aux)
                }
            };
            let table = score_candidates(val_ref, &set, aux_ref, &config, seed)?;
            let truths = ground_truths(&exact, &set, config.epsilon)?;
            for m in &table.methods {
                let s = summarize_method(&table.scores[m], &truths)?;
                let rho = s.rho.map_or("NA".into(), |r| format!("{r:.4}"));
                writeln!(
                    out,
                    "{value},{seed},{m},{rho},{:.6},{:.6}",
                    s.regret[0], s.regret[1]
                )
                .unwrap();
            }
        }
    }
    Ok(out)
}

/// Empirical pruning-success CDF of one method across the configured seeds,
/// next to the uniform-random-pruning prediction for the same (alpha, beta).
pub fn run_cdf(
    config: &ExperimentConfig,
    method: &str,
    alphas: &[usize],
    betas: &[usize],
) -> Result<String> {
    config.validate()?;
    if !config.methods.iter().any(|m| m == method) {
        return Err(OpeselError::InvalidArgument(format!("method `{method}` not configured")));
    }
    let sim = SepsisSim::new();
    let exact = sim.exact_mdp(config.discount);
    let mut runs = Vec::new();
    let mut k = 0;
    for &seed in &config.seeds {
        let outcome = run_seed(&sim, &exact, config, seed)?;
        k = outcome.table.k();
        runs.push((outcome.table.scores[method].clone(), outcome.truths));
    }
    let table = selection::empirical_cdf(&runs, alphas, betas)?;
    let mut out = format!(
        "# opesel-cdf v1; method={method}; runs={}\n# config: {}\n",
        runs.len(),
        config.resolved_line()
    );
    out.push_str("alpha,beta,empirical,random_pruning\n");
    for (i, &alpha) in alphas.iter().enumerate() {
        for (j, &beta) in betas.iter().enumerate() {
            let random =
                selection::random_prune_probability(alpha as u64, beta as u64, k as u64)?;
            writeln!(out, "{alpha},{beta},{:.4},{random:.4}", table[i][j]).unwrap();
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Candidate manifest and Q-table files
// ---------------------------------------------------------------------------

/// Serializes a Q-table with exact (bit-level) float round-tripping.
pub fn qtable_to_string(q: &Array2<f64>) -> String {
    let mut out = format!("# opesel-qtable v1; states={}; actions={}\n", q.nrows(), q.ncols());
    for row in q.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn qtable_from_string(text: &str) -> Result<Array2<f64>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(OpeselError::Parse {
        line: 1,
        message: "empty q-table file".into(),
    })?;
    let header = header.strip_prefix("# opesel-qtable v1; ").ok_or(OpeselError::Parse {
        line: 1,
        message: "missing q-table header".into(),
    })?;
    let mut states = 0usize;
    let mut actions = 0usize;
    for field in header.split("; ") {
        match field.split_once('=') {
            Some(("states", v)) => states = v.parse().unwrap_or(0),
            Some(("actions", v)) => actions = v.parse().unwrap_or(0),
            _ => {}
        }
    }
    let mut q = Array2::zeros((states, actions));
    for (s, line) in lines.enumerate() {
        for (a, cell) in line.split(',').enumerate() {
            let bits = u64::from_str_radix(cell, 16).map_err(|_| OpeselError::Parse {
                line: s + 2,
                message: format!("bad hex float `{cell}`"),
            })?;
            q[[s, a]] = f64::from_bits(bits);
        }
    }
    Ok(q)
}

fn parse_hyper(s: &str) -> Result<HyperRecord> {
    let mut rec = HyperRecord {
        hidden_layers: 0,
        hidden_units: 0,
        learning_rate: 0.0,
        fqi_iterations: 0,
    };
    for field in s.split(';') {
        let (k, v) = field.split_once('=').ok_or_else(|| {
            OpeselError::InvalidArgument(format!("bad hyper field `{field}`"))
        })?;
        let bad = || OpeselError::InvalidArgument(format!("bad hyper value `{v}`"));
        match k {
            "layers" => rec.hidden_layers = v.parse().map_err(|_| bad())?,
            "units" => rec.hidden_units = v.parse().map_err(|_| bad())?,
            "lr" => rec.learning_rate = v.parse().map_err(|_| bad())?,
            "iters" => rec.fqi_iterations = v.parse().map_err(|_| bad())?,
            _ => {}
        }
    }
    Ok(rec)
}

/// Writes one Q-table file per candidate plus a manifest listing them.
pub fn save_manifest(dir: &Path, set: &CandidateSet) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!(
        "# opesel-candidates v1; seed={}; dataset={}; k={}\n",
        set.seed,
        set.dataset_label,
        set.candidates.len()
    );
    for cand in &set.candidates {
        let file = format!("candidate_{:04}.q", cand.id);
        atomic_write(&dir.join(&file), &qtable_to_string(&cand.q))?;
        writeln!(manifest, "{},{},{}", cand.id, cand.hyper, file).unwrap();
    }
    let path = dir.join("manifest.csv");
    atomic_write(&path, &manifest)?;
    Ok(path)
}

pub fn load_manifest(path: &Path) -> Result<CandidateSet> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(OpeselError::Parse {
        line: 1,
        message: "empty manifest".into(),
    })?;
    let header = header.strip_prefix("# opesel-candidates v1; ").ok_or(OpeselError::Parse {
        line: 1,
        message: "missing manifest header".into(),
    })?;
    let mut seed = 0u64;
    let mut dataset_label = String::new();
    for field in header.split("; ") {
        match field.split_once('=') {
            Some(("seed", v)) => seed = v.parse().unwrap_or(0),
            Some(("dataset", v)) => dataset_label = v.to_string(),
            _ => {}
        }
    }
    let mut candidates = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, ',').collect();
        if parts.len() != 3 {
            return Err(OpeselError::Parse {
                line: idx + 1,
                message: "expected `id,hyper,path`".into(),
            });
        }
        let id: usize = parts[0].parse().map_err(|_| OpeselError::Parse {
            line: idx + 1,
            message: format!("bad id `{}`", parts[0]),
        })?;
        let hyper = parse_hyper(parts[1])?;
        let q = qtable_from_string(&fs::read_to_string(dir.join(parts[2]))?)?;
        let actions = greedy_actions(&q);
        candidates.push(Candidate { id, hyper, actions, q });
    }
    Ok(CandidateSet { candidates, seed, dataset_label })
}

// ---------------------------------------------------------------------------
// Scores and truth files (the evaluate/truth/select wire formats)
// ---------------------------------------------------------------------------

/// Long-form scores CSV: one row per (policy, method).
pub fn scores_to_string(
    config_line: &str,
    set: &CandidateSet,
    table: &ScoreTable,
) -> String {
    let mut out = format!("# opesel-scores v1; k={}\n# config: {config_line}\n", table.k());
    out.push_str("policy_id,hyper,method,value\n");
    for (i, cand) in set.candidates.iter().enumerate() {
        for m in &table.methods {
            writeln!(out, "{},{},{m},{}", cand.id, cand.hyper, fmt_score(table.scores[m][i]))
                .unwrap();
        }
    }
    out
}

/// Parses a scores CSV back into a table (policy rows in id order).
pub fn scores_from_string(text: &str) -> Result<ScoreTable> {
    let mut per_method: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    let mut methods = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() || line.starts_with("policy_id,") {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(OpeselError::Parse {
                line: idx + 1,
                message: "expected `policy_id,hyper,method,value`".into(),
            });
        }
        let id: usize = parts[0].parse().map_err(|_| OpeselError::Parse {
            line: idx + 1,
            message: format!("bad policy_id `{}`", parts[0]),
        })?;
        let method = parts[2].to_string();
        let value = parse_score(parts[3]).map_err(|e| OpeselError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !methods.contains(&method) {
            methods.push(method.clone());
        }
        per_method.entry(method).or_default().insert(id, value);
    }
    if methods.is_empty() {
        return Err(OpeselError::Parse { line: 1, message: "no score rows".into() });
    }
    let k = per_method.values().next().unwrap().len();
    let mut scores = BTreeMap::new();
    for (m, by_id) in per_method {
        if by_id.len() != k {
            return Err(OpeselError::Parse {
                line: 1,
                message: format!("method `{m}` has {} rows, expected {k}", by_id.len()),
            });
        }
        scores.insert(m, by_id.into_values().collect());
    }
    Ok(ScoreTable { methods, scores })
}

/// Candidate ids and hyperparameter records from a scores CSV, in id order;
/// lets `select` rebuild report rows without the original manifest.
pub fn scores_meta_from_string(text: &str) -> Result<Vec<(usize, HyperRecord)>> {
    let mut by_id: BTreeMap<usize, HyperRecord> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() || line.starts_with("policy_id,") {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            continue;
        }
        let id: usize = parts[0].parse().map_err(|_| OpeselError::Parse {
            line: idx + 1,
            message: format!("bad policy_id `{}`", parts[0]),
        })?;
        by_id.entry(id).or_insert(parse_hyper(parts[1])?);
    }
    Ok(by_id.into_iter().collect())
}

pub fn truth_to_string(config_line: &str, set: &CandidateSet, truths: &[f64]) -> String {
    let mut out = format!("# opesel-truth v1; k={}\n# config: {config_line}\n", truths.len());
    out.push_str("policy_id,value\n");
    for (cand, t) in set.candidates.iter().zip(truths) {
        // Default float formatting round-trips exactly, so regrets computed
        // from a reloaded truth file match the in-memory pipeline.
        writeln!(out, "{},{t}", cand.id).unwrap();
    }
    out
}

pub fn truth_from_string(text: &str) -> Result<Vec<f64>> {
    let mut by_id: BTreeMap<usize, f64> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() || line.starts_with("policy_id,") {
            continue;
        }
        let (id, value) = line.split_once(',').ok_or(OpeselError::Parse {
            line: idx + 1,
            message: "expected `policy_id,value`".into(),
        })?;
        let id: usize = id.parse().map_err(|_| OpeselError::Parse {
            line: idx + 1,
            message: format!("bad policy_id `{id}`"),
        })?;
        let value: f64 = value.parse().map_err(|_| OpeselError::Parse {
            line: idx + 1,
            message: format!("bad value `{value}`"),
        })?;
        by_id.insert(id, value);
    }
    Ok(by_id.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_roundtrip_and_no_temp_left() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("x.txt");
        atomic_write(&path, "hello\n").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "hello\n");
        let leftovers: Vec<_> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp")
            })
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn config_parse_and_override() {
        let text = "m_train = 50\nm_val=60 # trailing comment\nbehavior = eps_greedy_0.05\n\
                    checkpoints = 1,2,4\nseeds = 3,4\n";
        let mut config = ExperimentConfig::parse(text).unwrap();
        assert_eq!(config.m_train, 50);
        assert_eq!(config.m_val, 60);
        assert_eq!(config.behavior, BehaviorSpec::EpsilonGreedy { epsilon: 0.05 });
        assert_eq!(config.checkpoints, vec![1, 2, 4]);
        assert_eq!(config.seeds, vec![3, 4]);
        // Flags win by applying last.
        config.set("m_train", "99").unwrap();
        assert_eq!(config.m_train, 99);
        assert!(config.set("nonsense", "1").is_err());
    }

    #[test]
    fn behavior_label_roundtrip() {
        for spec in [
            BehaviorSpec::UniformRandom,
            BehaviorSpec::EpsilonGreedy { epsilon: 0.1 },
            BehaviorSpec::Mixture {
                components: vec![
                    (BehaviorSpec::UniformRandom, 30),
                    (BehaviorSpec::EpsilonGreedy { epsilon: 0.05 }, 70),
                ],
            },
        ] {
            assert_eq!(parse_behavior(&spec.label()).unwrap(), spec);
        }
    }

    #[test]
    fn qtable_roundtrip_is_bit_exact() {
        let q = Array2::from_shape_fn((5, 3), |(s, a)| (s as f64 - 1.7).powi(a as i32 + 1) / 3.0);
        let back = qtable_from_string(&qtable_to_string(&q)).unwrap();
        assert_eq!(q, back);
    }

    #[test]
    fn scores_roundtrip() {
        let set = CandidateSet {
            candidates: (0..3)
                .map(|id| Candidate {
                    id,
                    hyper: HyperRecord {
                        hidden_layers: 0,
                        hidden_units: 0,
                        learning_rate: 0.0,
                        fqi_iterations: id + 1,
                    },
                    actions: vec![0],
                    q: Array2::zeros((1, 1)),
                })
                .collect(),
            seed: 0,
            dataset_label: "uniform".into(),
        };
        let mut scores = BTreeMap::new();
        scores.insert("wis".to_string(), vec![0.25, f64::NEG_INFINITY, -0.5]);
        scores.insert("fqe".to_string(), vec![0.1, 0.2, 0.3]);
        let table = ScoreTable { methods: vec!["wis".into(), "fqe".into()], scores };
        let text = scores_to_string("test", &set, &table);
        let back = scores_from_string(&text).unwrap();
        assert_eq!(back.scores["wis"][1], f64::NEG_INFINITY);
        assert!((back.scores["fqe"][2] - 0.3).abs() < 1e-12);
        assert_eq!(back.k(), 3);
    }

    #[test]
    fn nearest_state_recovers_exact_features() {
        let features = sepsis::feature_matrix();
        for s in (0..sepsis::N_NONABSORBING).step_by(97) {
            let x = features.row(s).to_owned();
            assert_eq!(nearest_state(&x), s);
        }
    }

    #[test]
    fn sanitize_keeps_order_and_finiteness() {
        let s = sanitize_scores(&[0.5, f64::NEG_INFINITY, -0.2]);
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(s[1] < s[2] && s[2] < s[0]);
    }

    #[test]
    fn smoke_pipeline_single_seed() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = ExperimentConfig::default();
        config.m_train = 200;
        config.m_val = 200;
        config.checkpoints = (1..=8).collect();
        config.seeds = vec![5];
        config.output_dir = dir.path().to_path_buf();
        let paths = run_pipeline(&config).unwrap();
        assert_eq!(paths.len(), 2);
        let report = fs::read_to_string(&paths[0]).unwrap();
        assert!(report.starts_with("# opesel-report v1; seed=5"));
        assert!(report.contains("# config: "));
        assert!(report.contains("# two_stage,wis,fqe"));
        // 8 candidates => 8 data rows between header and summary.
        let rows = report
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("policy_id"))
            .count();
        assert_eq!(rows, 8);
    }
}
