use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reed_pbrl_core::buffer::{ReplayBuffer, Transition};
use reed_pbrl_core::query::{
    disagreement_select, population_variance, sample_candidates, select_top_by_variance, top_m,
};
use reed_pbrl_core::rewardnet::{RewardEnsemble, RewardNetConfig};

fn filled_buffer(episodes: usize, ep_len: usize, sd: usize, seed: u64) -> ReplayBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = ReplayBuffer::new(episodes * ep_len);
    for ep in 0..episodes {
        for step in 0..ep_len {
            buf.push(Transition {
                state: (0..sd).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: vec![rng.random_range(-1.0..1.0)],
                next_state: vec![0.0; sd],
                reward_true: rng.random(),
                reward_hat: 0.0,
                step_index: step,
                episode_id: ep as u64,
            });
        }
    }
    buf
}

/// Rank-counting oracle: index i is chosen iff fewer than m entries beat
/// it, where a tie is won by the lower index.
fn brute_force_top(scores: &[f64], m: usize) -> Vec<usize> {
    let mut chosen: Vec<(usize, usize)> = (0..scores.len())
        .filter_map(|i| {
            let beaten_by = (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count();
            (beaten_by < m).then_some((beaten_by, i))
        })
        .collect();
    chosen.sort();
    chosen.into_iter().map(|x| x.1).collect()
}

fn hand_variance(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64
}

#[test]
fn selection_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let n = rng.random_range(1..=50);
        let m = rng.random_range(0..=n);
        let members = rng.random_range(2..=5);
        let probs: Vec<Vec<f64>> = (0..members)
            .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
            .collect();
        let scores: Vec<f64> = (0..n)
            .map(|j| hand_variance(&probs.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .collect();
        let got = select_top_by_variance(&probs, m);
        let expected = brute_force_top(&scores, m);
        assert_eq!(got.iter().map(|x| x.0).collect::<Vec<_>>(), expected);
        for (i, s) in &got {
            assert!((s - scores[*i]).abs() < 1e-15);
        }
    }
}

#[test]
fn ensemble_selection_matches_brute_force() {
    let buf = filled_buffer(6, 30, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = RewardNetConfig {
        hidden: 8,
        hidden_layers: 2,
        ..RewardNetConfig::for_dims(2, 1)
    };
    let ens = RewardEnsemble::new(cfg, 2, 1, 3);
    for _ in 0..20 {
        let n = rng.random_range(1..=50);
        let m = rng.random_range(1..=n);
        let cands = sample_candidates(&buf, n, 5, &mut rng).unwrap();
        let scores: Vec<f64> = cands
            .iter()
            .map(|c| {
                let ps: Vec<f64> = ens
                    .members
                    .iter()
                    .map(|mem| mem.net.preference_probability(&c.sigma1, &c.sigma2).unwrap())
                    .collect();
                hand_variance(&ps)
            })
            .collect();
        let expected = brute_force_top(&scores, m);
        let got = disagreement_select(&ens, cands.clone(), m).unwrap();
        assert_eq!(got.iter().map(|s| s.index).collect::<Vec<_>>(), expected);
        for s in &got {
            assert_eq!(s.pair, cands[s.index]);
        }
        let min_chosen = got.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
        for (j, &sc) in scores.iter().enumerate() {
            if !expected.contains(&j) {
                assert!(sc <= min_chosen + 1e-15);
            }
        }
    }
}

#[test]
fn selecting_more_than_available_fails() {
    let buf = filled_buffer(2, 10, 2, 1);
    let ens = RewardEnsemble::new(RewardNetConfig::for_dims(2, 1), 2, 1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cands = sample_candidates(&buf, 3, 4, &mut rng).unwrap();
    assert!(disagreement_select(&ens, cands, 4).is_err());
}

#[test]
fn no_full_window_is_an_error() {
    let buf = filled_buffer(3, 4, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_candidates(&buf, 1, 5, &mut rng).is_err());
}

#[test]
fn windows_stay_inside_one_episode() {
    let buf = filled_buffer(5, 12, 1, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for c in sample_candidates(&buf, 500, 6, &mut rng).unwrap() {
        for s in [&c.sigma1, &c.sigma2] {
            assert_eq!(s.len(), 6);
            let ep = s.episode_id();
            assert!(s.transitions.iter().all(|t| t.episode_id == ep));
            assert!(s.transitions.windows(2).all(|w| w[1].step_index == w[0].step_index + 1));
        }
    }
}

/// Upper 1% point of χ²(df) by the Wilson–Hilferty approximation.
fn chi2_critical_99(df: f64) -> f64 {
    let z = 2.326_347_874;
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}

#[test]
fn window_positions_are_uniform() {
    let (episodes, ep_len, l) = (4, 20, 5);
    let buf = filled_buffer(episodes, ep_len, 1, 3);
    let starts = buf.segment_starts(l);
    assert_eq!(starts.len(), episodes * (ep_len - l + 1));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut counts = vec![0usize; buf.len()];
    let draws = 16_000;
    for c in sample_candidates(&buf, draws / 2, l, &mut rng).unwrap() {
        counts[c.sigma1.start] += 1;
        counts[c.sigma2.start] += 1;
    }
    let expected = draws as f64 / starts.len() as f64;
    let chi2: f64 = starts
        .iter()
        .map(|&s| (counts[s] as f64 - expected).powi(2) / expected)
        .sum();
    let crit = chi2_critical_99((starts.len() - 1) as f64);
    assert!(chi2 < crit, "chi2 {chi2} ≥ {crit}");
    let invalid: usize = (0..buf.len()).filter(|i| !starts.contains(i)).map(|i| counts[i]).sum();
    assert_eq!(invalid, 0);
}

proptest! {
    #[test]
    fn selection_invariant_to_candidate_order(
        scores in proptest::collection::vec(0.0f64..1.0, 1..50),
        m_frac in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let n = scores.len();
        let m = ((n as f64) * m_frac) as usize;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let mut a: Vec<f64> = top_m(&scores, m).iter().map(|&i| scores[i]).collect();
        let mut b: Vec<f64> = top_m(&shuffled, m).iter().map(|&i| shuffled[i]).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn chosen_scores_dominate_rejected(
        scores in proptest::collection::vec(0.0f64..1.0, 1..50),
        m in 0usize..50,
    ) {
        let m = m.min(scores.len());
        let chosen = top_m(&scores, m);
        prop_assert_eq!(chosen.len(), m);
        let min_chosen = chosen.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for (j, s) in scores.iter().enumerate() {
            if !chosen.contains(&j) {
                prop_assert!(*s <= min_chosen);
            }
        }
    }

    #[test]
    fn variance_is_shift_invariant(xs in proptest::collection::vec(-1.0f64..1.0, 1..10), c in -5.0f64..5.0) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        prop_assert!((population_variance(&xs) - population_variance(&shifted)).abs() < 1e-9);
        prop_assert!(population_variance(&xs) >= 0.0);
    }
}
