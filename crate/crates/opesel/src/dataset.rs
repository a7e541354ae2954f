//! Episode/transition containers, behavior policies, dataset generation, and
//! a bit-exact plain-text file format.

use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{OpeselError, Result};
use crate::mdp::TabularPolicy;
use crate::sepsis::SepsisSim;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub episode_id: usize,
    /// Step index within the episode, contiguous from 1.
    pub t: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    pub behavior: String,
    pub env: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    pub n_episodes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    /// Episodes as contiguous transition slices, in episode-id order.
    pub fn episodes(&self) -> Vec<&[Transition]> {
        let mut out = Vec::with_capacity(self.n_episodes);
        let mut start = 0;
        for i in 1..=self.transitions.len() {
            if i == self.transitions.len()
                || self.transitions[i].episode_id != self.transitions[start].episode_id
            {
                out.push(&self.transitions[start..i]);
                start = i;
            }
        }
        out
    }

    /// Initial state of each episode.
    pub fn initial_states(&self) -> Vec<usize> {
        self.episodes().iter().map(|ep| ep[0].state).collect()
    }

    /// Discounted return of each episode.
    pub fn episode_returns(&self, discount: f64) -> Vec<f64> {
        self.episodes()
            .iter()
            .map(|ep| {
                ep.iter()
                    .enumerate()
                    .map(|(i, tr)| discount.powi(i as i32) * tr.reward)
                    .sum()
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        for ep in self.episodes() {
            for (i, tr) in ep.iter().enumerate() {
                if tr.t != i + 1 {
                    return Err(OpeselError::InvalidArgument(format!(
                        "episode {}: non-contiguous step index {} at position {}",
                        tr.episode_id, tr.t, i
                    )));
                }
                if tr.done != (i + 1 == ep.len()) {
                    return Err(OpeselError::InvalidArgument(format!(
                        "episode {}: done flag misplaced at t={}",
                        tr.episode_id, tr.t
                    )));
                }
            }
        }
        Ok(())
    }
}

/// How the logged behavior acted.
#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorSpec {
    UniformRandom,
    /// Epsilon-greedy around an optimal policy computed on the exact MDP.
    EpsilonGreedy { epsilon: f64 },
    /// Sequential blocks of episodes per component; counts must sum to m.
    Mixture { components: Vec<(BehaviorSpec, usize)> },
}

impl BehaviorSpec {
    pub fn label(&self) -> String {
        match self {
            BehaviorSpec::UniformRandom => "uniform".into(),
            BehaviorSpec::EpsilonGreedy { epsilon } => format!("eps_greedy_{epsilon}"),
            BehaviorSpec::Mixture { components } => {
                let parts: Vec<String> = components
                    .iter()
                    .map(|(spec, count)| format!("{}:{}", spec.label(), count))
                    .collect();
                format!("mixture[{}]", parts.join("+"))
            }
        }
    }
}

/// 64-bit mix of (master seed, episode id) used to derive per-episode RNG
/// streams; splitmix64 finalizer.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_action(policy: &TabularPolicy, state: usize, rng: &mut impl Rng) -> usize {
    let row = policy.action_probs.row(state);
    let dist = WeightedIndex::new(row.iter().copied()).expect("invalid policy row");
    dist.sample(rng)
}

/// Resolves a (non-mixture) behavior spec to a tabular policy over the full
/// state space of the simulator's exact MDP.
pub fn resolve_behavior(
    spec: &BehaviorSpec,
    sim: &SepsisSim,
    discount: f64,
) -> Result<TabularPolicy> {
    use crate::sepsis::{N_ACTIONS, N_STATES};
    match spec {
        BehaviorSpec::UniformRandom => Ok(TabularPolicy::uniform(N_STATES, N_ACTIONS)),
        BehaviorSpec::EpsilonGreedy { epsilon } => {
            let mdp = sim.exact_mdp(discount);
            let (_, greedy) = crate::mdp::value_iteration(&mdp, 1e-6)?;
            Ok(crate::policy_learning::soften(&greedy, *epsilon))
        }
        BehaviorSpec::Mixture { .. } => Err(OpeselError::InvalidArgument(
            "mixture components must be resolved individually".into(),
        )),
    }
}

/// Generates `m` episodes from the simulator under the given behavior.
/// Each episode's randomness derives only from (seed, episode_id), so the
/// output is independent of generation order.
pub fn generate(
    sim: &SepsisSim,
    behavior: &BehaviorSpec,
    m: usize,
    max_len: usize,
    seed: u64,
    discount: f64,
) -> Result<Dataset> {
    // Map each episode id to its component policy.
    let components: Vec<(TabularPolicy, usize)> = match behavior {
        BehaviorSpec::Mixture { components } => {
            let total: usize = components.iter().map(|(_, c)| c).sum();
            if total != m {
                return Err(OpeselError::InvalidArgument(format!(
                    "mixture counts sum to {total}, expected m = {m}"
                )));
            }
            components
                .iter()
                .map(|(spec, count)| Ok((resolve_behavior(spec, sim, discount)?, *count)))
                .collect::<Result<_>>()?
        }
        other => vec![(resolve_behavior(other, sim, discount)?, m)],
    };
    let mut policy_of_episode = Vec::with_capacity(m);
    for (ci, (_, count)) in components.iter().enumerate() {
        policy_of_episode.extend(std::iter::repeat(ci).take(*count));
    }

    let episodes: Vec<Vec<Transition>> = (0..m)
        .into_par_iter()
        .map(|episode_id| {
            let policy = &components[policy_of_episode[episode_id]].0;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, episode_id as u64));
            let mut transitions = Vec::new();
            let mut state = sim.initial_state(&mut rng);
            for t in 1..=max_len {
                let action = sample_action(policy, state, &mut rng);
                let (next, reward, done) = sim.step(state, action, &mut rng);
                // Truncation at max_len carries no terminal reward.
                let last = done || t == max_len;
                transitions.push(Transition {
                    episode_id,
                    t,
                    state,
                    action,
                    reward,
                    next_state: next,
                    done: last,
                });
                if done {
                    break;
                }
                state = next;
            }
            transitions
        })
        .collect();

    let transitions: Vec<Transition> = episodes.into_iter().flatten().collect();
    Ok(Dataset {
        transitions,
        n_episodes: m,
        provenance: Provenance {
            seed,
            behavior: behavior.label(),
            env: "sepsis".into(),
        },
    })
}

/// Serializes to the `opesel-dataset v1` plain-text format.
pub fn to_string(dataset: &Dataset) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "# opesel-dataset v1; env={}; behavior={}; seed={}; m={}",
        dataset.provenance.env,
        dataset.provenance.behavior,
        dataset.provenance.seed,
        dataset.n_episodes
    )
    .unwrap();
    for tr in &dataset.transitions {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            tr.episode_id,
            tr.t,
            tr.state,
            tr.action,
            tr.reward,
            tr.next_state,
            u8::from(tr.done)
        )
        .unwrap();
    }
    out
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    crate::cli::atomic_write(path, &to_string(dataset))
}

pub fn from_string(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| OpeselError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let header = header
        .strip_prefix("# opesel-dataset v1; ")
        .ok_or_else(|| OpeselError::Parse {
            line: 1,
            message: "missing `# opesel-dataset v1` header".into(),
        })?;
    let mut env = String::new();
    let mut behavior = String::new();
    let mut seed = 0u64;
    let mut m = 0usize;
    for field in header.split("; ") {
        let (key, value) = field.split_once('=').ok_or_else(|| OpeselError::Parse {
            line: 1,
            message: format!("malformed header field `{field}`"),
        })?;
        match key {
            "env" => env = value.to_string(),
            "behavior" => behavior = value.to_string(),
            "seed" => {
                seed = value.parse().map_err(|_| OpeselError::Parse {
                    line: 1,
                    message: format!("bad seed `{value}`"),
                })?
            }
            "m" => {
                m = value.parse().map_err(|_| OpeselError::Parse {
                    line: 1,
                    message: format!("bad m `{value}`"),
                })?
            }
            _ => {}
        }
    }
    let mut transitions = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(OpeselError::Parse {
                line: lineno,
                message: format!("expected 7 fields, got {}", parts.len()),
            });
        }
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| OpeselError::Parse {
                line: lineno,
                message: format!("bad {what} `{s}`"),
            })
        };
        let reward: f64 = parts[4].parse().map_err(|_| OpeselError::Parse {
            line: lineno,
            message: format!("bad reward `{}`", parts[4]),
        })?;
        transitions.push(Transition {
            episode_id: parse_usize(parts[0], "episode_id")?,
            t: parse_usize(parts[1], "t")?,
            state: parse_usize(parts[2], "state")?,
            action: parse_usize(parts[3], "action")?,
            reward,
            next_state: parse_usize(parts[5], "next_state")?,
            done: parts[6] == "1",
        });
    }
    let distinct = transitions
        .iter()
        .map(|t| t.episode_id)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if distinct != m {
        return Err(OpeselError::Parse {
            line: 1,
            message: format!("header m={m} but file has {distinct} episodes"),
        });
    }
    let ds = Dataset {
        transitions,
        n_episodes: m,
        provenance: Provenance { seed, behavior, env },
    };
    ds.validate().map_err(|e| OpeselError::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(ds)
}

pub fn load(path: &Path) -> Result<Dataset> {
    from_string(&std::fs::read_to_string(path)?)
}

/// Episode-level split: a seeded shuffle assigns `round(fraction * m)`
/// episodes to the first part. Both halves keep episode-id order.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(OpeselError::InvalidArgument(format!(
            "split fraction {fraction} not in (0, 1)"
        )));
    }
    let episodes = dataset.episodes();
    let m = episodes.len();
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD5));
    order.shuffle(&mut rng);
    let n_first = ((fraction * m as f64).round() as usize).clamp(1, m - 1);
    let mut in_first = vec![false; m];
    for &i in order.iter().take(n_first) {
        in_first[i] = true;
    }
    let build = |keep: bool| -> Dataset {
        let transitions: Vec<Transition> = episodes
            .iter()
            .enumerate()
            .filter(|(i, _)| in_first[*i] == keep)
            .flat_map(|(_, ep)| ep.iter().copied())
            .collect();
        let n_eps = episodes.iter().enumerate().filter(|(i, _)| in_first[*i] == keep).count();
        Dataset {
            transitions,
            n_episodes: n_eps,
            provenance: dataset.provenance.clone(),
        }
    };
    Ok((build(true), build(false)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sepsis::{N_ACTIONS, MAX_EPISODE_LEN};

    #[test]
    fn generation_is_deterministic() {
        let sim = SepsisSim::new();
        let a = generate(&sim, &BehaviorSpec::UniformRandom, 5, MAX_EPISODE_LEN, 7, 0.99).unwrap();
        let b = generate(&sim, &BehaviorSpec::UniformRandom, 5, MAX_EPISODE_LEN, 7, 0.99).unwrap();
        assert_eq!(to_string(&a), to_string(&b));
    }

    #[test]
    fn uniform_action_frequencies() {
        let sim = SepsisSim::new();
        let ds = generate(&sim, &BehaviorSpec::UniformRandom, 12_000, 20, 3, 0.99).unwrap();
        let n = ds.transitions.len();
        assert!(n >= 12_000);
        let mut counts = [0usize; N_ACTIONS];
        for tr in &ds.transitions {
            counts[tr.action] += 1;
        }
        let p = 1.0 / N_ACTIONS as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - p).abs() < 4.0 * sigma, "freq {freq}");
        }
    }

    #[test]
    fn episodes_respect_max_len_and_rewards() {
        let sim = SepsisSim::new();
        let ds = generate(&sim, &BehaviorSpec::UniformRandom, 500, 20, 11, 0.99).unwrap();
        for ep in ds.episodes() {
            assert!(ep.len() <= 20);
            for (i, tr) in ep.iter().enumerate() {
                assert_eq!(tr.t, i + 1);
                assert!([-1.0, 0.0, 1.0].contains(&tr.reward));
                if i + 1 < ep.len() {
                    assert!(!tr.done);
                    assert_eq!(tr.next_state, ep[i + 1].state);
                } else {
                    assert!(tr.done);
                }
                // Nonzero reward only on transitions into an absorbing state.
                if tr.reward != 0.0 {
                    assert!(tr.next_state >= crate::sepsis::N_NONABSORBING);
                }
            }
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let sim = SepsisSim::new();
        let ds = generate(&sim, &BehaviorSpec::UniformRandom, 100, 20, 21, 0.99).unwrap();
        let text = to_string(&ds);
        let back = from_string(&text).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn load_rejects_non_contiguous_steps() {
        let text = "# opesel-dataset v1; env=sepsis; behavior=uniform; seed=1; m=1\n\
                    0,1,5,2,0,6,0\n0,3,6,1,0,7,1\n";
        let err = from_string(text).unwrap_err();
        assert!(err.to_string().contains("non-contiguous"));
    }

    #[test]
    fn split_is_episode_level_and_exhaustive() {
        let sim = SepsisSim::new();
        let ds = generate(&sim, &BehaviorSpec::UniformRandom, 200, 20, 5, 0.99).unwrap();
        let (a, b) = split(&ds, 0.9, 17).unwrap();
        assert_eq!(a.n_episodes, 180);
        assert_eq!(b.n_episodes, 20);
        let ids_a: std::collections::BTreeSet<usize> =
            a.transitions.iter().map(|t| t.episode_id).collect();
        let ids_b: std::collections::BTreeSet<usize> =
            b.transitions.iter().map(|t| t.episode_id).collect();
        assert!(ids_a.is_disjoint(&ids_b));
        assert_eq!(a.transitions.len() + b.transitions.len(), ds.transitions.len());
    }

    #[test]
    fn mixture_equals_block_concatenation() {
        let sim = SepsisSim::new();
        let spec = BehaviorSpec::Mixture {
            components: vec![
                (BehaviorSpec::UniformRandom, 3),
                (BehaviorSpec::UniformRandom, 2),
            ],
        };
        let mixed = generate(&sim, &spec, 5, 20, 9, 0.99).unwrap();
        let plain = generate(&sim, &BehaviorSpec::UniformRandom, 5, 20, 9, 0.99).unwrap();
        // Identical component policies: per-episode seeding makes the blocks
        // line up transition-for-transition.
        assert_eq!(mixed.transitions, plain.transitions);
    }
}
