use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reed_pbrl_core::agent::{
    intrinsic_reward, pretrain_explore, random_action, relabel_rewards, ActMode, PretrainConfig,
    Rollout, SacAgent, SacBatch, SacConfig, Temperature,
};
use reed_pbrl_core::buffer::{ReplayBuffer, Transition};
use reed_pbrl_core::envsim::{Env, EnvSpec};
use reed_pbrl_core::rewardnet::{RewardEnsemble, RewardNetConfig};

fn spec(state_dim: usize, action_dim: usize) -> EnvSpec {
    EnvSpec {
        name: "test".into(),
        state_dim,
        action_dim,
        action_low: vec![-1.0; action_dim],
        action_high: vec![1.0; action_dim],
        episode_len: 10,
        dt: 1.0,
        substeps: 1,
        constants: BTreeMap::new(),
    }
}

fn small(seed: u64) -> SacConfig {
    SacConfig {
        hidden: 32,
        batch_size: 64,
        seed,
        ..SacConfig::default()
    }
}

/// `∫ f(z) φ(z) dz` by the composite Simpson rule on [-10, 10].
fn gauss_expect(f: impl Fn(f64) -> f64) -> f64 {
    let n = 4000;
    let h = 20.0 / n as f64;
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (0..=n)
        .map(|i| {
            let z = -10.0 + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * f(z) * phi(z)
        })
        .sum::<f64>()
        * h
        / 3.0
}

#[test]
fn sampled_actions_match_squashed_gaussian() {
    let mut agent = SacAgent::new(&spec(2, 1), small(3));
    let s = [0.3, -0.7];
    let (mean, std) = agent.policy_distribution(&s).unwrap();
    let expected = gauss_expect(|z| (mean[0] + std[0] * z).tanh());
    let expected_sq = gauss_expect(|z| (mean[0] + std[0] * z).tanh().powi(2));
    let n = 20_000;
    let xs: Vec<f64> = (0..n).map(|_| agent.act(&s, ActMode::Sample).unwrap()[0]).collect();
    let m = xs.iter().sum::<f64>() / n as f64;
    let sd = (expected_sq - expected * expected).sqrt();
    // Five standard errors.
    assert!((m - expected).abs() < 5.0 * sd / (n as f64).sqrt(), "{m} vs {expected}");
    assert_eq!(agent.act(&s, ActMode::Mean).unwrap()[0], mean[0].tanh());
}

#[test]
fn entropy_estimate_matches_quadrature() {
    let mut agent = SacAgent::new(&spec(2, 1), small(4));
    let s = vec![0.1, 0.4];
    let (mean, std) = agent.policy_distribution(&s).unwrap();
    let (mu, sigma) = (mean[0], std[0]);
    let gaussian = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln();
    let expected = gaussian + gauss_expect(|z| (1.0 - (mu + sigma * z).tanh().powi(2)).ln());
    let n = 20_000;
    let batch = SacBatch {
        states: vec![s.clone(); n],
        actions: vec![vec![0.0]; n],
        rewards: vec![0.0; n],
        next_states: vec![s; n],
        dones: vec![false; n],
    };
    let losses = agent.update(&batch).unwrap();
    assert!((losses.entropy - expected).abs() < 0.03, "{} vs {expected}", losses.entropy);
}

#[test]
fn temperature_gradient_sign_follows_entropy_gap() {
    let agent = SacAgent::new(&spec(2, 2), small(0));
    let target = agent.target_entropy();
    for delta in [-1.0, -0.1, 0.1, 1.0] {
        let lp = vec![-(target + delta); 8];
        let grad = agent.temperature_gradient(&lp);
        assert_eq!(grad.signum(), delta.signum(), "delta {delta}");
        assert!((grad - agent.alpha() * delta).abs() < 1e-12);
    }
    assert_eq!(agent.temperature_gradient(&[-target]), 0.0);
}

#[test]
fn learned_temperature_moves_toward_target() {
    // Wide policy: entropy above −|A| so α must shrink.
    let mut agent = SacAgent::new(&spec(2, 1), SacConfig { alpha_lr: 1e-2, ..small(5) });
    let before = agent.alpha();
    let n = 256;
    let s = vec![0.0, 0.0];
    let batch = SacBatch {
        states: vec![s.clone(); n],
        actions: vec![vec![0.0]; n],
        rewards: vec![0.0; n],
        next_states: vec![s; n],
        dones: vec![false; n],
    };
    let losses = agent.update(&batch).unwrap();
    assert!(losses.entropy > agent.target_entropy());
    assert!(agent.alpha() < before);
}

#[test]
fn critic_learns_chain_returns() {
    // States 0 → 1 → 2 → 0 with one-hot observations.
    let gamma: f64 = 0.9;
    let rewards = [1.0, 0.0, 2.0];
    let onehot = |i: usize| {
        let mut v = vec![0.0; 3];
        v[i] = 1.0;
        v
    };
    let mc: Vec<f64> = (0..3)
        .map(|start| (0..600).map(|t| gamma.powi(t) * rewards[(start + t as usize) % 3]).sum())
        .collect();
    let mut agent = SacAgent::new(
        &spec(3, 1),
        SacConfig {
            hidden: 64,
            critic_lr: 1e-3,
            gamma,
            tau: 0.05,
            target_update_every: 1,
            temperature: Temperature::Fixed { value: 0.0 },
            ..small(6)
        },
    );
    let batch = SacBatch {
        states: (0..3).map(onehot).collect(),
        actions: vec![vec![0.0]; 3],
        rewards: rewards.to_vec(),
        next_states: (0..3).map(|i| onehot((i + 1) % 3)).collect(),
        dones: vec![false; 3],
    };
    let fixed = |_: &[f64]| vec![0.0];
    for _ in 0..6000 {
        agent.update_critic(&batch, Some(&fixed)).unwrap();
    }
    let states: Vec<Vec<f64>> = (0..3).map(onehot).collect();
    let s: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
    let a = [0.0];
    let (q1, q2) = agent.q_estimates(&s, &[&a, &a, &a]).unwrap();
    for i in 0..3 {
        assert!((q1[i] - mc[i]).abs() < 1e-2, "q1[{i}]={} mc={}", q1[i], mc[i]);
        assert!((q2[i] - mc[i]).abs() < 1e-2, "q2[{i}]={} mc={}", q2[i], mc[i]);
    }
}

#[test]
fn targets_use_smaller_critic() {
    let mut agent = SacAgent::new(&spec(2, 1), SacConfig { gamma: 0.5, ..small(7) });
    let next = vec![0.4, -0.2];
    for choice in [-1.0, 1.0] {
        let (q1, q2) = agent.q_estimates(&[&next], &[&[choice]]).unwrap();
        let batch = SacBatch {
            states: vec![vec![0.0, 0.0]],
            actions: vec![vec![0.0]],
            rewards: vec![0.25],
            next_states: vec![next.clone()],
            dones: vec![false],
        };
        let f = move |_: &[f64]| vec![choice];
        let y = agent.q_targets(&batch, Some(&f)).unwrap()[0];
        assert!((y - (0.25 + 0.5 * q1[0].min(q2[0]))).abs() < 1e-12);
        let terminal = SacBatch { dones: vec![true], ..batch };
        assert_eq!(agent.q_targets(&terminal, Some(&f)).unwrap()[0], 0.25);
    }
}

#[test]
fn intrinsic_reward_matches_sorted_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let n = rng.random_range(1..40);
        let mut buf = ReplayBuffer::new(64);
        for i in 0..n {
            buf.push(Transition {
                state: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                action: vec![0.0],
                next_state: vec![0.0, 0.0],
                reward_true: 0.0,
                reward_hat: 0.0,
                step_index: i,
                episode_id: 0,
            });
        }
        let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let k = rng.random_range(1..8);
        let mut d: Vec<f64> = buf
            .iter()
            .map(|t| ((t.state[0] - q[0]).powi(2) + (t.state[1] - q[1]).powi(2)).sqrt())
            .collect();
        d.sort_by(f64::total_cmp);
        let expected = (d[k.min(n) - 1] + 1.0).ln();
        assert!((intrinsic_reward(&buf, &q, k) - expected).abs() < 1e-12);
    }
}

/// Occupied cells of a 10×10 grid over the point-mass arena.
fn coverage(buf: &ReplayBuffer) -> usize {
    buf.iter()
        .map(|t| {
            let cell = |x: f64| (((x + 1.0) / 0.2).floor() as i64).clamp(0, 9);
            (cell(t.state[0]), cell(t.state[1]))
        })
        .collect::<HashSet<_>>()
        .len()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

#[test]
fn exploration_covers_at_least_as_much_as_random() {
    let cfg = PretrainConfig {
        steps: 1500,
        seed_steps: 500,
        knn_k: 5,
    };
    let (mut explored, mut random) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let env = Env::point_mass();
        let mut agent = SacAgent::new(env.spec(), SacConfig { hidden: 64, ..small(seed) });
        let mut rollout = Rollout::new(env.clone(), seed);
        let mut buf = ReplayBuffer::new(cfg.steps);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pretrain_explore(&mut agent, &mut rollout, &mut buf, &cfg, &mut rng).unwrap();
        assert_eq!(buf.len(), cfg.steps);
        explored.push(coverage(&buf) as f64);

        let mut rollout = Rollout::new(env.clone(), seed);
        let mut buf = ReplayBuffer::new(cfg.steps);
        for _ in 0..cfg.steps {
            let a = random_action(env.spec(), &mut rng);
            buf.push(rollout.step(&a).unwrap().0);
        }
        random.push(coverage(&buf) as f64);
    }
    let (e, r) = (median(explored.clone()), median(random.clone()));
    assert!(e >= r, "explored {explored:?} random {random:?}");
}

fn env_buffer(seed: u64, n: usize) -> ReplayBuffer {
    let env = Env::point_mass();
    let mut rollout = Rollout::new(env.clone(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = ReplayBuffer::new(n);
    for _ in 0..n {
        let a = random_action(env.spec(), &mut rng);
        buf.push(rollout.step(&a).unwrap().0);
    }
    buf
}

#[test]
fn relabel_leaves_no_stale_rewards() {
    let mut buf = env_buffer(1, 2500);
    let cfg = RewardNetConfig {
        hidden: 16,
        ..RewardNetConfig::for_dims(4, 2)
    };
    let ens = RewardEnsemble::new(cfg, 4, 2, 2);
    relabel_rewards(&mut buf, &ens).unwrap();
    let stale = buf
        .iter()
        .filter(|t| t.reward_hat != ens.ensemble_mean_reward(&t.state, &t.action).unwrap())
        .count();
    assert_eq!(stale, 0);
    let once: Vec<f64> = buf.iter().map(|t| t.reward_hat).collect();
    relabel_rewards(&mut buf, &ens).unwrap();
    let twice: Vec<f64> = buf.iter().map(|t| t.reward_hat).collect();
    assert_eq!(once, twice);
}

#[test]
fn sampling_does_not_mutate_buffer() {
    let buf = env_buffer(2, 300);
    let snapshot: Vec<Transition> = buf.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let s = buf.sample(32, &mut rng);
        assert_eq!(s.len(), 32);
    }
    assert_eq!(buf.iter().cloned().collect::<Vec<_>>(), snapshot);
}

#[test]
fn same_seed_same_updates() {
    let run = || {
        let buf = env_buffer(3, 200);
        let env = Env::point_mass();
        let mut agent = SacAgent::new(env.spec(), small(9));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut out = Vec::new();
        for _ in 0..10 {
            let sample = buf.sample(32, &mut rng);
            let batch = agent.make_batch(&sample, |t| t.reward_true);
            let l = agent.update(&batch).unwrap();
            out.push((l.critic, l.actor, l.temperature));
        }
        (out, agent.act(&[0.0; 4], ActMode::Sample).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn policy_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let env = Env::point_mass();
    let a = SacAgent::new(env.spec(), small(10));
    a.save_policy(dir.path()).unwrap();
    let mut b = SacAgent::new(env.spec(), small(11));
    b.load_policy(dir.path()).unwrap();
    assert!(a.actor_params().same_values(b.actor_params()));
    assert!(a.critic_params().same_values(b.critic_params()));
    assert!(b.critic_params().same_values(b.critic_target_params()));
}

#[test]
fn wrong_state_width_is_rejected() {
    let mut agent = SacAgent::new(&spec(2, 1), small(0));
    assert!(agent.act(&[0.0; 3], ActMode::Mean).is_err());
}
