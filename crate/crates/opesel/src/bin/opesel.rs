//! Command-line entry point: dataset generation, candidate training, OPE
//! scoring, policy selection, sensitivity analysis, and ground truth.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use opesel::cli::{
    self, atomic_write, parse_behavior, render_report, ExperimentConfig, ScoreTable, SeedOutcome,
    SweepAxis,
};
use opesel::dataset;
use opesel::error::{OpeselError, Result};
use opesel::policy_learning::{Candidate, CandidateSet};
use opesel::selection;
use opesel::sepsis::{self, SepsisSim};

#[derive(Parser)]
#[command(name = "opesel", about = "Offline-RL model selection via off-policy evaluation")]
struct Args {
    /// Worker threads for data generation, training, and scoring.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a sepsis dataset file.
    Generate {
        /// Behavior label: uniform | eps_greedy_<x> | mixture[label:count+...]
        #[arg(long, default_value = "uniform")]
        behavior: String,
        /// Number of episodes.
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = sepsis::MAX_EPISODE_LEN)]
        max_len: usize,
        #[arg(long, default_value_t = 0.99)]
        discount: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train candidate policies and write a manifest directory.
    Train {
        /// Training dataset file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "discrete")]
        mode: String,
        /// FQI checkpoint iterations (discrete mode), e.g. 1,2,4,8.
        #[arg(long)]
        checkpoints: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.99)]
        discount: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory for the manifest and Q-table files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every candidate in a manifest with the configured OPE methods.
    Evaluate {
        /// Validation dataset file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        /// Comma-separated subset of wis,am,fqe,wdr,fqi_value,neg_rms_tde.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        discount: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce a selection report from a scores file (plus optional truth).
    Select {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// stage1,stage2,alpha — e.g. wis,fqe,24.
        #[arg(long)]
        two_stage: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sensitivity sweeps and pruning-probability CDF tables.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Sweep axis: epsilon | horizon | m_val | behavior.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated sweep values.
        #[arg(long)]
        values: Option<String>,
        /// Emit the empirical pruning CDF table instead of a sweep.
        #[arg(long)]
        cdf: bool,
        #[arg(long, default_value = "wis")]
        method: String,
        #[arg(long, default_value = "1,2,4,8,16,24")]
        alphas: String,
        #[arg(long, default_value = "1,3,5")]
        betas: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic ground-truth values for a candidate manifest.
    Truth {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.99)]
        discount: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full per-seed pipeline from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory override.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::parse(&std::fs::read_to_string(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| OpeselError::InvalidArgument(format!("bad integer `{x}`")))
        })
        .collect()
}

fn run(args: Args) -> Result<()> {
    if let Some(workers) = args.workers {
        // Ignore the error if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    match args.command {
        Command::Generate { behavior, m, max_len, discount, seed, out } => {
            let spec = parse_behavior(&behavior)?;
            let sim = SepsisSim::new();
            let ds = dataset::generate(&sim, &spec, m, max_len, seed, discount)?;
            dataset::save(&ds, &out)?;
            println!("wrote {} ({} episodes, {} transitions)", out.display(), m, ds.transitions.len());
        }
        Command::Train { data, mode, checkpoints, config, discount, seed, out } => {
            let mut cfg = load_config(&config)?;
            cfg.state_mode = mode.parse()?;
            cfg.discount = discount;
            if let Some(list) = checkpoints {
                cfg.checkpoints = parse_usize_list(&list)?;
            }
            let train_set = dataset::load(&data)?;
            let set = cli::build_candidate_set(&train_set, &cfg, seed)?;
            let manifest = cli::save_manifest(&out, &set)?;
            println!("wrote {} ({} candidates)", manifest.display(), set.candidates.len());
        }
        Command::Evaluate {
            data,
            manifest,
            config,
            mode,
            methods,
            epsilon,
            horizon,
            discount,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = mode {
                cfg.state_mode = m.parse()?;
            }
            if let Some(m) = methods {
                cfg.set("methods", &m)?;
            }
            if let Some(e) = epsilon {
                cfg.epsilon = e;
            }
            if let Some(h) = horizon {
                cfg.horizon = h;
            }
            if let Some(d) = discount {
                cfg.discount = d;
            }
            cfg.seeds = vec![seed];
            cfg.validate()?;
            let val = dataset::load(&data)?;
            let set = cli::load_manifest(&manifest)?;
            let aux = cli::fit_auxiliaries(&val, &cfg, seed)?;
            let table = cli::score_candidates(&val, &set, &aux, &cfg, seed)?;
            atomic_write(&out, &cli::scores_to_string(&cfg.resolved_line(), &set, &table))?;
            println!("wrote {}", out.display());
        }
        Command::Select { scores, truth, two_stage, config, seed, out } => {
            let cfg = load_config(&config)?;
            let text = std::fs::read_to_string(&scores)?;
            let table = cli::scores_from_string(&text)?;
            let meta = cli::scores_meta_from_string(&text)?;
            let (stage1, stage2, alpha) = match &two_stage {
                Some(spec) => {
                    let parts: Vec<&str> = spec.split(',').collect();
                    if parts.len() != 3 {
                        return Err(OpeselError::InvalidArgument(
                            "expected --two-stage stage1,stage2,alpha".into(),
                        ));
                    }
                    (parts[0].to_string(), parts[1].to_string(), parts[2].parse().map_err(
                        |_| OpeselError::InvalidArgument(format!("bad alpha `{}`", parts[2])),
                    )?)
                }
                None => ("wis".into(), "fqe".into(), cfg.resolved_alpha()),
            };
            let report = match truth {
                Some(tp) => {
                    let truths = cli::truth_from_string(&std::fs::read_to_string(&tp)?)?;
                    let outcome = outcome_from_parts(seed, meta, truths, table);
                    render_report(&cfg.resolved_line(), &outcome, alpha)?
                }
                None => render_selection_only(&table, &stage1, &stage2, alpha)?,
            };
            atomic_write(&out, &report)?;
            println!("wrote {}", out.display());
        }
        Command::Analyze { config, axis, values, cdf, method, alphas, betas, out } => {
            let cfg = ExperimentConfig::parse(&std::fs::read_to_string(&config)?)?;
            let text = if cdf {
                cli::run_cdf(&cfg, &method, &parse_usize_list(&alphas)?, &parse_usize_list(&betas)?)?
            } else {
                let axis: SweepAxis = axis
                    .ok_or_else(|| {
                        OpeselError::InvalidArgument("--axis required unless --cdf".into())
                    })?
                    .parse()?;
                let values: Vec<String> = values
                    .ok_or_else(|| OpeselError::InvalidArgument("--values required".into()))?
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .collect();
                cli::run_sweep(&cfg, axis, &values)?
            };
            atomic_write(&out, &text)?;
            println!("wrote {}", out.display());
        }
        Command::Truth { manifest, epsilon, discount, out } => {
            let set = cli::load_manifest(&manifest)?;
            let sim = SepsisSim::new();
            let exact = sim.exact_mdp(discount);
            let truths = cli::ground_truths(&exact, &set, epsilon)?;
            let line = format!("epsilon={epsilon}; discount={discount}");
            atomic_write(&out, &cli::truth_to_string(&line, &set, &truths))?;
            println!("wrote {}", out.display());
        }
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::parse(&std::fs::read_to_string(&config)?)?;
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            let paths = cli::run_pipeline(&cfg)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn outcome_from_parts(
    seed: u64,
    meta: Vec<(usize, opesel::policy_learning::HyperRecord)>,
    truths: Vec<f64>,
    table: ScoreTable,
) -> SeedOutcome {
    let candidates = meta
        .into_iter()
        .map(|(id, hyper)| Candidate {
            id,
            hyper,
            actions: Vec::new(),
            q: ndarray::Array2::zeros((0, 0)),
        })
        .collect();
    SeedOutcome {
        seed,
        set: CandidateSet { candidates, seed, dataset_label: String::new() },
        truths,
        table,
    }
}

/// Truth-free selection output: the argmax per method plus the two-stage
/// choice.
fn render_selection_only(
    table: &ScoreTable,
    stage1: &str,
    stage2: &str,
    alpha: usize,
) -> Result<String> {
    use std::fmt::Write as _;
    let mut out = String::from("# opesel-selection v1\nmethod,chosen\n");
    for m in &table.methods {
        writeln!(out, "{m},{}", selection::top_n_by(&table.scores[m], 1)[0]).unwrap();
    }
    let (s1, s2) = (
        table
            .scores
            .get(stage1)
            .ok_or_else(|| OpeselError::InvalidArgument(format!("no scores for `{stage1}`")))?,
        table
            .scores
            .get(stage2)
            .ok_or_else(|| OpeselError::InvalidArgument(format!("no scores for `{stage2}`")))?,
    );
    let alpha = alpha.clamp(1, s1.len());
    let chosen = selection::two_stage_select_precomputed(s1, s2, alpha)?;
    writeln!(out, "two_stage[{stage1}->{stage2},alpha={alpha}],{chosen}").unwrap();
    Ok(out)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
