//! Sepsis patient simulator: a step-sampler over 1,440 discrete states plus
//! two absorbing states, and an exact tabular MDP built by enumerating all
//! stochastic branch outcomes.
//!
//! State-index convention (fixed, stored in dataset files): mixed radix over
//! (hr, sbp, o2, glu, abx, vaso, vent, diab), most-significant first, giving
//! indices [0, 1440); discharge = 1440, death = 1441.
//!
//! Action-index convention: action = 4*abx + 2*vaso + vent.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::mdp::TabularMdp;

pub const N_NONABSORBING: usize = 1440;
pub const DISCHARGE: usize = 1440;
pub const DEATH: usize = 1441;
pub const N_STATES: usize = 1442;
pub const N_ACTIONS: usize = 8;
pub const FEATURE_DIM: usize = 21;
pub const MAX_EPISODE_LEN: usize = 20;

/// Underlying patient state. Vital levels: hr/sbp in {0,1,2} = {L,N,H},
/// o2 in {0,1} = {L,N}, glu in {0..4} = {LL,L,N,H,HH}. Normal levels are
/// hr=1, sbp=1, o2=1, glu=2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SepsisState {
    pub hr: u8,
    pub sbp: u8,
    pub o2: u8,
    pub glu: u8,
    pub abx: u8,
    pub vaso: u8,
    pub vent: u8,
    pub diab: u8,
}

impl SepsisState {
    pub fn index(&self) -> usize {
        let mut idx = self.hr as usize;
        idx = idx * 3 + self.sbp as usize;
        idx = idx * 2 + self.o2 as usize;
        idx = idx * 5 + self.glu as usize;
        idx = idx * 2 + self.abx as usize;
        idx = idx * 2 + self.vaso as usize;
        idx = idx * 2 + self.vent as usize;
        idx = idx * 2 + self.diab as usize;
        idx
    }

    pub fn from_index(mut idx: usize) -> Self {
        assert!(idx < N_NONABSORBING, "absorbing or out-of-range index {idx}");
        let diab = (idx % 2) as u8;
        idx /= 2;
        let vent = (idx % 2) as u8;
        idx /= 2;
        let vaso = (idx % 2) as u8;
        idx /= 2;
        let abx = (idx % 2) as u8;
        idx /= 2;
        let glu = (idx % 5) as u8;
        idx /= 5;
        let o2 = (idx % 2) as u8;
        idx /= 2;
        let sbp = (idx % 3) as u8;
        idx /= 3;
        let hr = idx as u8;
        SepsisState { hr, sbp, o2, glu, abx, vaso, vent, diab }
    }

    pub fn abnormal_count(&self) -> usize {
        (self.hr != 1) as usize
            + (self.sbp != 1) as usize
            + (self.o2 != 1) as usize
            + (self.glu != 2) as usize
    }

    fn treatments_off(&self) -> bool {
        self.abx == 0 && self.vaso == 0 && self.vent == 0
    }

    /// True if occupying this state immediately ends the episode.
    pub fn is_terminating(&self) -> bool {
        self.abnormal_count() >= 3 || (self.abnormal_count() == 0 && self.treatments_off())
    }
}

/// Decodes an action index into (abx, vaso, vent) flags.
pub fn decode_action(action: usize) -> (u8, u8, u8) {
    assert!(action < N_ACTIONS);
    (((action >> 2) & 1) as u8, ((action >> 1) & 1) as u8, (action & 1) as u8)
}

/// Block-wise one-hot features: blocks of sizes 3,3,2,5,2,2,2,2 (21 total).
/// Absorbing indices map to the all-zero vector.
pub fn encode_features(state_idx: usize) -> [f64; FEATURE_DIM] {
    let mut x = [0.0; FEATURE_DIM];
    if state_idx >= N_NONABSORBING {
        return x;
    }
    let s = SepsisState::from_index(state_idx);
    x[s.hr as usize] = 1.0;
    x[3 + s.sbp as usize] = 1.0;
    x[6 + s.o2 as usize] = 1.0;
    x[8 + s.glu as usize] = 1.0;
    x[13 + s.abx as usize] = 1.0;
    x[15 + s.vaso as usize] = 1.0;
    x[17 + s.vent as usize] = 1.0;
    x[19 + s.diab as usize] = 1.0;
    x
}

/// Features for every state index as a dense matrix, for batched model input.
pub fn feature_matrix() -> Array2<f64> {
    let mut m = Array2::zeros((N_STATES, FEATURE_DIM));
    for s in 0..N_STATES {
        let x = encode_features(s);
        for j in 0..FEATURE_DIM {
            m[[s, j]] = x[j];
        }
    }
    m
}

pub struct SepsisSim {
    /// Non-terminating state indices, one list per diabetes value.
    init_states: [Vec<usize>; 2],
}

impl Default for SepsisSim {
    fn default() -> Self {
        Self::new()
    }
}

impl SepsisSim {
    pub fn new() -> Self {
        let mut init_states = [Vec::new(), Vec::new()];
        for idx in 0..N_NONABSORBING {
            let s = SepsisState::from_index(idx);
            if !s.is_terminating() {
                init_states[s.diab as usize].push(idx);
            }
        }
        SepsisSim { init_states }
    }

    pub fn n_initial_states(&self) -> usize {
        self.init_states[0].len() + self.init_states[1].len()
    }

    /// Samples an initial state: diab = 1 w.p. 0.2, then uniform over the
    /// non-terminating states with that diab value.
    pub fn initial_state(&self, rng: &mut impl Rng) -> usize {
        let diab = usize::from(rng.gen::<f64>() < 0.2);
        let list = &self.init_states[diab];
        list[rng.gen_range(0..list.len())]
    }

    /// Exact initial-state distribution over all state indices.
    pub fn initial_dist(&self) -> Array1<f64> {
        let mut mu = Array1::zeros(N_STATES);
        for (diab, weight) in [(0usize, 0.8), (1usize, 0.2)] {
            let list = &self.init_states[diab];
            for &s in list {
                mu[s] = weight / list.len() as f64;
            }
        }
        mu
    }

    /// One simulator step by sequential sampling of the Table-4 dynamics:
    /// treatment effects in order abx -> vent -> vaso, then spontaneous
    /// fluctuations for untargeted vitals, then the termination check.
    pub fn step(&self, state_idx: usize, action: usize, rng: &mut impl Rng) -> (usize, f64, bool) {
        if state_idx >= N_NONABSORBING {
            return (state_idx, 0.0, true);
        }
        let s = SepsisState::from_index(state_idx);
        let (abx, vaso, vent) = decode_action(action);
        let diab = s.diab == 1;
        let mut hr = s.hr;
        let mut sbp = s.sbp;
        let mut o2 = s.o2;
        let mut glu = s.glu;
        let mut hr_hit = false;
        let mut sbp_hit = false;
        let mut o2_hit = false;
        let mut glu_hit = false;

        // Step 1: antibiotics.
        if abx == 1 {
            if hr == 2 && rng.gen::<f64>() < 0.5 {
                hr = 1;
            }
            if sbp == 2 && rng.gen::<f64>() < 0.5 {
                sbp = 1;
            }
            hr_hit = true;
            sbp_hit = true;
        } else if s.abx == 1 {
            if hr == 1 && rng.gen::<f64>() < 0.1 {
                hr = 2;
            }
            if sbp == 1 && rng.gen::<f64>() < 0.5 {
                sbp = 2;
            }
            hr_hit = true;
            sbp_hit = true;
        }

        // Step 2: ventilation.
        if vent == 1 {
            if o2 == 0 && rng.gen::<f64>() < 0.7 {
                o2 = 1;
            }
            o2_hit = true;
        } else if s.vent == 1 {
            if o2 == 1 && rng.gen::<f64>() < 0.1 {
                o2 = 0;
            }
            o2_hit = true;
        }

        // Step 3: vasopressors.
        if vaso == 1 {
            if diab {
                if sbp == 0 {
                    let r = rng.gen::<f64>();
                    if r < 0.5 {
                        sbp = 1;
                    } else if r < 0.9 {
                        sbp = 2;
                    }
                } else if sbp == 1 && rng.gen::<f64>() < 0.9 {
                    sbp = 2;
                }
                if rng.gen::<f64>() < 0.5 && glu < 4 {
                    glu += 1;
                }
                glu_hit = true;
            } else if sbp == 0 {
                if rng.gen::<f64>() < 0.7 {
                    sbp = 1;
                }
            } else if sbp == 1 && rng.gen::<f64>() < 0.7 {
                sbp = 2;
            }
            sbp_hit = true;
        } else if s.vaso == 1 {
            let p = if diab { 0.05 } else { 0.1 };
            if (sbp == 1 || sbp == 2) && rng.gen::<f64>() < p {
                sbp -= 1;
            }
            sbp_hit = true;
        }

        // Steps 4-7: spontaneous fluctuations for vitals untouched by any
        // treatment event this step. Out-of-range moves stay put.
        if !hr_hit {
            fluctuate(&mut hr, 2, 0.1, rng);
        }
        if !sbp_hit {
            fluctuate(&mut sbp, 2, 0.1, rng);
        }
        if !o2_hit {
            fluctuate(&mut o2, 1, 0.1, rng);
        }
        if !glu_hit {
            fluctuate(&mut glu, 4, if diab { 0.3 } else { 0.1 }, rng);
        }

        let next = SepsisState {
            hr,
            sbp,
            o2,
            glu,
            abx,
            vaso,
            vent,
            diab: s.diab,
        };
        if next.abnormal_count() >= 3 {
            (DEATH, -1.0, true)
        } else if next.abnormal_count() == 0 && next.treatments_off() {
            (DISCHARGE, 1.0, true)
        } else {
            (next.index(), 0.0, false)
        }
    }

    /// Builds the exact MDP by composing per-vital outcome distributions and
    /// enumerating every joint vital outcome with its product probability.
    pub fn exact_mdp(&self, discount: f64) -> TabularMdp {
        let mut transition = Array3::zeros((N_STATES, N_ACTIONS, N_STATES));
        let mut reward = Array2::zeros((N_STATES, N_ACTIONS));
        for a in 0..N_ACTIONS {
            transition[[DISCHARGE, a, DISCHARGE]] = 1.0;
            transition[[DEATH, a, DEATH]] = 1.0;
        }
        for idx in 0..N_NONABSORBING {
            let s = SepsisState::from_index(idx);
            for action in 0..N_ACTIONS {
                let (hr_d, sbp_d, o2_d, glu_d) = vital_distributions(&s, action);
                let (abx, vaso, vent) = decode_action(action);
                for (hr, p_hr) in level_iter(&hr_d) {
                    for (sbp, p_sbp) in level_iter(&sbp_d) {
                        for (o2, p_o2) in level_iter(&o2_d) {
                            for (glu, p_glu) in level_iter(&glu_d) {
                                let p = p_hr * p_sbp * p_o2 * p_glu;
                                if p == 0.0 {
                                    continue;
                                }
                                let next = SepsisState {
                                    hr,
                                    sbp,
                                    o2,
                                    glu,
                                    abx,
                                    vaso,
                                    vent,
                                    diab: s.diab,
                                };
                                if next.abnormal_count() >= 3 {
                                    transition[[idx, action, DEATH]] += p;
                                    reward[[idx, action]] += p * -1.0;
                                } else if next.abnormal_count() == 0 && next.treatments_off() {
                                    transition[[idx, action, DISCHARGE]] += p;
                                    reward[[idx, action]] += p * 1.0;
                                } else {
                                    transition[[idx, action, next.index()]] += p;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut absorbing = vec![false; N_STATES];
        absorbing[DISCHARGE] = true;
        absorbing[DEATH] = true;
        TabularMdp {
            n_states: N_STATES,
            n_actions: N_ACTIONS,
            transition,
            reward,
            initial_dist: self.initial_dist(),
            discount,
            absorbing,
        }
    }
}

fn fluctuate(level: &mut u8, max: u8, p: f64, rng: &mut impl Rng) {
    let r = rng.gen::<f64>();
    if r < p {
        if *level > 0 {
            *level -= 1;
        }
    } else if r < 2.0 * p && *level < max {
        *level += 1;
    }
}

/// Distribution over levels as a dense probability vector.
type LevelDist = Vec<f64>;

fn level_iter(d: &LevelDist) -> impl Iterator<Item = (u8, f64)> + '_ {
    d.iter().enumerate().filter_map(|(l, &p)| (p > 0.0).then_some((l as u8, p)))
}

fn point(n_levels: usize, level: u8) -> LevelDist {
    let mut d = vec![0.0; n_levels];
    d[level as usize] = 1.0;
    d
}

fn apply<F>(d: &LevelDist, f: F) -> LevelDist
where
    F: Fn(u8) -> Vec<(u8, f64)>,
{
    let mut out = vec![0.0; d.len()];
    for (l, p) in level_iter(d) {
        for (l2, p2) in f(l) {
            out[l2 as usize] += p * p2;
        }
    }
    out
}

fn fluct_map(max: u8, p: f64) -> impl Fn(u8) -> Vec<(u8, f64)> {
    move |l| {
        let mut out = Vec::with_capacity(3);
        let mut stay = 1.0 - 2.0 * p;
        if l > 0 {
            out.push((l - 1, p));
        } else {
            stay += p;
        }
        if l < max {
            out.push((l + 1, p));
        } else {
            stay += p;
        }
        out.push((l, stay));
        out
    }
}

/// Independent per-vital outcome distributions for one (state, action) pair.
/// The sequential treatment order of Table 4 is preserved by composing the
/// abx and vaso effects on sbp in order.
fn vital_distributions(
    s: &SepsisState,
    action: usize,
) -> (LevelDist, LevelDist, LevelDist, LevelDist) {
    let (abx, vaso, vent) = decode_action(action);
    let diab = s.diab == 1;
    let abx_on = abx == 1;
    let abx_withdrawn = abx == 0 && s.abx == 1;
    let vent_on = vent == 1;
    let vent_withdrawn = vent == 0 && s.vent == 1;
    let vaso_on = vaso == 1;
    let vaso_withdrawn = vaso == 0 && s.vaso == 1;

    // Heart rate: affected by abx only.
    let mut hr = point(3, s.hr);
    if abx_on {
        hr = apply(&hr, |l| if l == 2 { vec![(1, 0.5), (2, 0.5)] } else { vec![(l, 1.0)] });
    } else if abx_withdrawn {
        hr = apply(&hr, |l| if l == 1 { vec![(2, 0.1), (1, 0.9)] } else { vec![(l, 1.0)] });
    } else {
        hr = apply(&hr, fluct_map(2, 0.1));
    }

    // Blood pressure: abx effect first, then vaso effect.
    let mut sbp = point(3, s.sbp);
    if abx_on {
        sbp = apply(&sbp, |l| if l == 2 { vec![(1, 0.5), (2, 0.5)] } else { vec![(l, 1.0)] });
    } else if abx_withdrawn {
        sbp = apply(&sbp, |l| if l == 1 { vec![(2, 0.5), (1, 0.5)] } else { vec![(l, 1.0)] });
    }
    if vaso_on {
        if diab {
            sbp = apply(&sbp, |l| match l {
                0 => vec![(1, 0.5), (2, 0.4), (0, 0.1)],
                1 => vec![(2, 0.9), (1, 0.1)],
                _ => vec![(l, 1.0)],
            });
        } else {
            sbp = apply(&sbp, |l| match l {
                0 => vec![(1, 0.7), (0, 0.3)],
                1 => vec![(2, 0.7), (1, 0.3)],
                _ => vec![(l, 1.0)],
            });
        }
    } else if vaso_withdrawn {
        let p = if diab { 0.05 } else { 0.1 };
        sbp = apply(&sbp, move |l| match l {
            1 => vec![(0, p), (1, 1.0 - p)],
            2 => vec![(1, p), (2, 1.0 - p)],
            _ => vec![(l, 1.0)],
        });
    }
    if !(abx_on || abx_withdrawn || vaso_on || vaso_withdrawn) {
        sbp = apply(&sbp, fluct_map(2, 0.1));
    }

    // Oxygen: affected by ventilation only.
    let mut o2 = point(2, s.o2);
    if vent_on {
        o2 = apply(&o2, |l| if l == 0 { vec![(1, 0.7), (0, 0.3)] } else { vec![(l, 1.0)] });
    } else if vent_withdrawn {
        o2 = apply(&o2, |l| if l == 1 { vec![(0, 0.1), (1, 0.9)] } else { vec![(l, 1.0)] });
    } else {
        o2 = apply(&o2, fluct_map(1, 0.1));
    }

    // Glucose: raised by vaso for diabetic patients, otherwise fluctuates.
    let mut glu = point(5, s.glu);
    if vaso_on && diab {
        glu = apply(&glu, |l| {
            if l < 4 {
                vec![(l + 1, 0.5), (l, 0.5)]
            } else {
                vec![(l, 1.0)]
            }
        });
    } else {
        glu = apply(&glu, fluct_map(4, if diab { 0.3 } else { 0.1 }));
    }

    (hr, sbp, o2, glu)
}
