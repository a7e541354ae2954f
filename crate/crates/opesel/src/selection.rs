//! Ranking, selection, and selection-quality metrics: Spearman correlation,
//! regret@n, score/rank averaging across estimators, two-stage selection,
//! and the probability that random pruning keeps a near-top candidate.

use crate::error::{OpeselError, Result};

/// Ranks with ties broken by averaging (1-based average ranks), ranking from
/// highest score (rank 1) downward.
pub fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Positions i..=j share the same score; assign the average rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation between two score vectors, using average ranks
/// for ties (Pearson correlation of the rank vectors).
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(OpeselError::DimensionMismatch(format!(
            "spearman inputs have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(OpeselError::InvalidArgument(
            "spearman correlation needs at least two points".into(),
        ));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxy += (xi - mx) * (yi - my);
        sxx += (xi - mx) * (xi - mx);
        syy += (yi - my) * (yi - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(OpeselError::UndefinedEstimate);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Regret of picking from the top-n candidates by `scores`: the best true
/// value overall minus the best true value among those n candidates.
pub fn regret_at_n(scores: &[f64], true_values: &[f64], n: usize) -> Result<f64> {
    if scores.len() != true_values.len() {
        return Err(OpeselError::DimensionMismatch(format!(
            "regret inputs have lengths {} and {}",
            scores.len(),
            true_values.len()
        )));
    }
    if n == 0 || scores.is_empty() {
        return Err(OpeselError::InvalidArgument("regret@n needs n >= 1 and candidates".into()));
    }
    let top = top_n_by(scores, n.min(scores.len()));
    let best_overall = true_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let best_selected = top
        .iter()
        .map(|&i| true_values[i])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best_overall - best_selected)
}

/// Indices of the n highest scores (stable: lower index wins exact ties).
pub fn top_n_by(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap()
            .then(i.cmp(&j))
    });
    order.truncate(n);
    order
}

/// Mean of each candidate's score across estimators. Rows are estimators,
/// all of the same length.
pub fn average_score(estimator_scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    combined(estimator_scores, |row| row.to_vec())
}

/// Mean of each candidate's average rank across estimators, negated so that
/// higher is still better.
pub fn average_rank_score(estimator_scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    combined(estimator_scores, |row| {
        average_ranks(row).into_iter().map(|r| -r).collect()
    })
}

fn combined(
    estimator_scores: &[Vec<f64>],
    transform: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<Vec<f64>> {
    if estimator_scores.is_empty() {
        return Err(OpeselError::InvalidArgument("no estimator scores given".into()));
    }
    let k = estimator_scores[0].len();
    let mut totals = vec![0.0; k];
    for row in estimator_scores {
        if row.len() != k {
            return Err(OpeselError::DimensionMismatch(
                "estimator score rows have differing lengths".into(),
            ));
        }
        for (t, v) in totals.iter_mut().zip(transform(row)) {
            *t += v;
        }
    }
    let m = estimator_scores.len() as f64;
    Ok(totals.into_iter().map(|t| t / m).collect())
}

/// Two-stage selection: keep the top `alpha` candidates by the first-stage
/// scores, score only those with the stage-2 evaluator (invoked exactly
/// `alpha` times), and return the winner plus the stage-2 scores computed.
pub fn two_stage_select(
    stage1: &[f64],
    stage2_evaluator: &mut dyn FnMut(usize) -> f64,
    alpha: usize,
) -> Result<(usize, Vec<(usize, f64)>)> {
    if alpha == 0 || alpha > stage1.len() || stage1.is_empty() {
        return Err(OpeselError::InvalidArgument(
            "two-stage selection needs 1 <= alpha <= K".into(),
        ));
    }
    let shortlist = top_n_by(stage1, alpha);
    let scored: Vec<(usize, f64)> = shortlist
        .into_iter()
        .map(|i| (i, stage2_evaluator(i)))
        .collect();
    let chosen = scored
        .iter()
        .cloned()
        .max_by(|(i, si), (j, sj)| si.partial_cmp(sj).unwrap().then(j.cmp(i)))
        .unwrap()
        .0;
    Ok((chosen, scored))
}

/// Convenience wrapper when stage-2 scores are already materialized.
pub fn two_stage_select_precomputed(
    stage1: &[f64],
    stage2: &[f64],
    alpha: usize,
) -> Result<usize> {
    if stage1.len() != stage2.len() {
        return Err(OpeselError::DimensionMismatch(format!(
            "two-stage inputs have lengths {} and {}",
            stage1.len(),
            stage2.len()
        )));
    }
    Ok(two_stage_select(stage1, &mut |i| stage2[i], alpha)?.0)
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Probability that pruning C candidates uniformly at random down to B keeps
/// at least one of the A best. Equals 1 when A + B > C, otherwise
/// 1 - (C-A)!(C-B)! / (C!(C-A-B)!), computed in log space.
pub fn random_prune_probability(a: u64, b: u64, c: u64) -> Result<f64> {
    if a == 0 || b == 0 || c == 0 || a > c || b > c {
        return Err(OpeselError::InvalidArgument(format!(
            "invalid pruning parameters a={a}, b={b}, c={c}"
        )));
    }
    if a + b > c {
        return Ok(1.0);
    }
    let ln_miss =
        ln_factorial(c - a) + ln_factorial(c - b) - ln_factorial(c) - ln_factorial(c - a - b);
    Ok(1.0 - ln_miss.exp())
}

/// Exhaustive check of the same probability by enumerating every B-subset of
/// {0, .., C-1} and counting those that hit {0, .., A-1}. Only for small C.
pub fn brute_force_prune_probability(a: u64, b: u64, c: u64) -> Result<f64> {
    if a == 0 || b == 0 || c == 0 || a > c || b > c || c > 20 {
        return Err(OpeselError::InvalidArgument(format!(
            "invalid brute-force pruning parameters a={a}, b={b}, c={c}"
        )));
    }
    let mut total = 0u64;
    let mut hits = 0u64;
    for mask in 0u32..(1 << c) {
        if u64::from(mask.count_ones()) != b {
            continue;
        }
        total += 1;
        if mask & ((1u32 << a) - 1) != 0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Empirical pruning-success table across replication runs. Each run is a
/// (scores, truths) pair over the same candidates; entry (i, j) is the
/// fraction of runs whose top-`alphas[i]` by score contain at least one of
/// the top-`betas[j]` by truth.
pub fn empirical_cdf(
    runs: &[(Vec<f64>, Vec<f64>)],
    alphas: &[usize],
    betas: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if runs.is_empty() {
        return Err(OpeselError::InvalidArgument("empirical_cdf needs at least one run".into()));
    }
    let mut table = vec![vec![0.0; betas.len()]; alphas.len()];
    for (scores, truths) in runs {
        if scores.len() != truths.len() {
            return Err(OpeselError::DimensionMismatch(
                "scores and truths have differing lengths".into(),
            ));
        }
        for (i, &alpha) in alphas.iter().enumerate() {
            let kept = top_n_by(scores, alpha.min(scores.len()));
            for (j, &beta) in betas.iter().enumerate() {
                let top_truth = top_n_by(truths, beta.min(truths.len()));
                if kept.iter().any(|k| top_truth.contains(k)) {
                    table[i][j] += 1.0;
                }
            }
        }
    }
    let m = runs.len() as f64;
    for row in &mut table {
        for v in row {
            *v /= m;
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranks_with_ties_average() {
        let r = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![1.5, 4.0, 1.5, 3.0]);
    }

    #[test]
    fn spearman_perfect_and_reversed() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let up = [10.0, 20.0, 30.0, 40.0];
        let down = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman_rho(&a, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman_rho(&a, &down).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_hand_case_with_tie() {
        // a ranks: [3, 1.5, 1.5, 4] reading from highest; b ranks [4,3,2,1].
        let a = [2.0, 5.0, 5.0, 1.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let ra = [3.0, 1.5, 1.5, 4.0];
        let rb = [4.0, 3.0, 2.0, 1.0];
        let expected = pearson(&ra, &rb).unwrap();
        assert!((spearman_rho(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn spearman_constant_input_undefined() {
        assert!(spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn regret_basics() {
        let scores = [0.9, 0.1, 0.5];
        let truth = [0.0, 1.0, 0.6];
        assert!((regret_at_n(&scores, &truth, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!((regret_at_n(&scores, &truth, 2).unwrap() - 0.4).abs() < 1e-12);
        assert!((regret_at_n(&scores, &truth, 3).unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn regret_with_perfect_scores_is_zero() {
        let truth = [0.2, 0.8, 0.5];
        assert_eq!(regret_at_n(&truth, &truth, 1).unwrap(), 0.0);
    }

    #[test]
    fn average_score_and_rank() {
        let rows = vec![vec![1.0, 3.0, 2.0], vec![3.0, 1.0, 2.0]];
        assert_eq!(average_score(&rows).unwrap(), vec![2.0, 2.0, 2.0]);
        // Ranks: [3,1,2] and [1,3,2]; negated means both average to -2.
        assert_eq!(average_rank_score(&rows).unwrap(), vec![-2.0, -2.0, -2.0]);
    }

    #[test]
    fn two_stage_matches_hand_case() {
        let stage1 = [0.9, 0.8, 0.1, 0.7];
        let stage2 = [0.1, 0.5, 0.9, 0.2];
        // Shortlist of 2 by stage1 = {0, 1}; best by stage2 among them is 1.
        assert_eq!(two_stage_select_precomputed(&stage1, &stage2, 2).unwrap(), 1);
        // Alpha covering everything reduces to argmax of stage2.
        assert_eq!(two_stage_select_precomputed(&stage1, &stage2, 4).unwrap(), 2);
        // Alpha of 1 reduces to argmax of stage1.
        assert_eq!(two_stage_select_precomputed(&stage1, &stage2, 1).unwrap(), 0);
    }

    #[test]
    fn two_stage_invokes_evaluator_alpha_times() {
        let stage1 = [0.9, 0.8, 0.1, 0.7];
        let stage2 = [0.1, 0.5, 0.9, 0.2];
        for alpha in 1..=4usize {
            let mut calls = 0;
            let (chosen, scored) = two_stage_select(
                &stage1,
                &mut |i| {
                    calls += 1;
                    stage2[i]
                },
                alpha,
            )
            .unwrap();
            assert_eq!(calls, alpha);
            assert_eq!(scored.len(), alpha);
            assert_eq!(
                chosen,
                two_stage_select_precomputed(&stage1, &stage2, alpha).unwrap()
            );
        }
    }

    #[test]
    fn empirical_cdf_perfect_and_full_alpha() {
        // Perfect scores: every entry 1. Full alpha row: also 1.
        let runs = vec![
            (vec![0.1, 0.5, 0.9], vec![0.1, 0.5, 0.9]),
            (vec![0.2, 0.8, 0.4], vec![0.2, 0.8, 0.4]),
        ];
        let table = empirical_cdf(&runs, &[1, 3], &[1, 2]).unwrap();
        for row in &table {
            for &v in row {
                assert_eq!(v, 1.0);
            }
        }
        // Anti-correlated single run: top-1 by score never hits top-1 truth.
        let bad = vec![(vec![0.9, 0.1], vec![0.1, 0.9])];
        let t = empirical_cdf(&bad, &[1, 2], &[1]).unwrap();
        assert_eq!(t[0][0], 0.0);
        assert_eq!(t[1][0], 1.0);
    }

    #[test]
    fn prune_probability_edge_cases() {
        // Keeping a single candidate out of k hits the single best with
        // probability 1/k.
        for k in 2..10u64 {
            let p = random_prune_probability(1, 1, k).unwrap();
            assert!((p - 1.0 / k as f64).abs() < 1e-12);
        }
        // Keeping everything always succeeds.
        assert_eq!(random_prune_probability(1, 8, 8).unwrap(), 1.0);
        // Overlap forced by counting: a + b > c.
        assert_eq!(random_prune_probability(3, 5, 7).unwrap(), 1.0);
    }

    #[test]
    fn prune_probability_matches_brute_force() {
        for c in 2..=9u64 {
            for a in 1..=c {
                for b in 1..=c {
                    let exact = brute_force_prune_probability(a, b, c).unwrap();
                    let formula = random_prune_probability(a, b, c).unwrap();
                    assert!(
                        (exact - formula).abs() < 1e-10,
                        "a={a} b={b} c={c}: {exact} vs {formula}"
                    );
                }
            }
        }
    }

    #[test]
    fn prune_probability_large_inputs_stable() {
        let p = random_prune_probability(5, 24, 96).unwrap();
        assert!(p > 0.0 && p < 1.0);
        // Monotone in b for fixed a, c.
        let mut last = 0.0;
        for b in 1..=96u64 {
            let p = random_prune_probability(5, b, 96).unwrap();
            assert!(p >= last - 1e-12);
            last = p;
        }
    }

    proptest! {
        #[test]
        fn spearman_in_range(v in proptest::collection::vec(-100.0f64..100.0, 3..20)) {
            let w: Vec<f64> = v.iter().map(|x| x * 2.0 + 1.0).collect();
            if let Ok(rho) = spearman_rho(&v, &w) {
                prop_assert!(rho >= -1.0 - 1e-9 && rho <= 1.0 + 1e-9);
                // A strictly increasing transform preserves ranks exactly.
                prop_assert!((rho - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn regret_nonnegative_and_monotone(
            scores in proptest::collection::vec(-10.0f64..10.0, 2..15),
            truth_seed in proptest::collection::vec(-10.0f64..10.0, 2..15),
        ) {
            let k = scores.len().min(truth_seed.len());
            let scores = &scores[..k];
            let truth = &truth_seed[..k];
            let mut last = f64::INFINITY;
            for n in 1..=k {
                let r = regret_at_n(scores, truth, n).unwrap();
                prop_assert!(r >= -1e-12);
                prop_assert!(r <= last + 1e-12);
                last = r;
            }
            // Selecting all candidates always achieves zero regret.
            prop_assert!(regret_at_n(scores, truth, k).unwrap().abs() < 1e-12);
        }

        #[test]
        fn ranks_are_permutation_average(v in proptest::collection::vec(-5.0f64..5.0, 1..12)) {
            let r = average_ranks(&v);
            let n = v.len() as f64;
            let sum: f64 = r.iter().sum();
            prop_assert!((sum - n * (n + 1.0) / 2.0).abs() < 1e-9);
        }
    }
}
