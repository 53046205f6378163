use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::time::Duration;

use reed_pbrl::config::{ExperimentConfig, RewardSource};
use reed_pbrl::metrics::{event, final_return, Event};
use reed_pbrl::output::{self, CURVE_SVG, MANIFEST, METRICS_CSV};
use reed_pbrl::server::{feedback_channel, serve};
use reed_pbrl::{reuse_reward, run_experiment, MetricsLog};
use reed_pbrl_core::agent::PretrainConfig;
use reed_pbrl_core::reed::ReedMode;
use reed_pbrl_core::teachers::Strategy;

/// Small enough for a debug-speed test: 50-step episodes, ten sessions of
/// five queries every 100 steps.
fn tiny(seed: u64, mode: ReedMode) -> ExperimentConfig {
    let mut c = ExperimentConfig::quick("point-mass", seed).unwrap();
    c.episode_len = Some(50);
    c.segment_len = 10;
    c.feedback = 50;
    c.queries_per_session = 5;
    c.session_interval = 100;
    c.total_steps = 1000;
    c.pretrain = PretrainConfig {
        steps: 300,
        seed_steps: 200,
        knn_k: 5,
    };
    c.reward_epochs = 10;
    c.reed.mode = mode;
    c.reed.epochs = 1;
    c.eval_episodes = 2;
    c
}

fn session_of(e: &Event) -> Option<usize> {
    e.aux
        .split(',')
        .find_map(|kv| kv.strip_prefix("session="))
        .map(|v| v.parse().unwrap())
}

fn aux_field(e: &Event, key: &str) -> Option<String> {
    e.aux
        .split(',')
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")).map(str::to_string))
}

#[test]
fn fifty_labels_in_fives_is_ten_sessions_in_order() {
    let out = run_experiment(&tiny(0, ReedMode::Contrast), None).unwrap();
    let log = &out.log;
    assert_eq!(log.count(event::SESSION_END), 10);
    assert_eq!(log.count(event::QUERY_SELECTED), 50);
    assert_eq!(log.count(event::LABEL), 50);
    assert_eq!(log.count(event::RELABEL), 10);
    assert_eq!(log.count(event::REWARD_VARIANCE), 9);
    assert_eq!(out.stability.len(), 9);

    // REED before selection, selection before labels, then reward
    // training, relabelling and the session summary.
    let order = [
        event::REED_LOSS,
        event::QUERY_SELECTED,
        event::LABEL,
        event::PREF_LOSS,
        event::RELABEL,
        event::SESSION_END,
    ];
    let mut rows: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (row, e) in log.events().iter().enumerate() {
        if let (Some(s), Some(rank)) = (session_of(e), order.iter().position(|k| *k == e.event)) {
            rows.entry(s).or_default().push((rank, row));
        }
    }
    assert_eq!(rows.len(), 10);
    for (s, mut v) in rows {
        let by_row = v.clone();
        v.sort();
        assert_eq!(v, by_row, "session {s} out of order");
        let ranks: std::collections::BTreeSet<usize> = v.iter().map(|p| p.0).collect();
        assert_eq!(ranks.len(), order.len(), "session {s} is missing a phase");
    }

    for e in log.of_kind(event::RELABEL) {
        assert_eq!(aux_field(e, "stale").as_deref(), Some("0"));
    }
    // Sessions fire every K policy steps after pretraining.
    let steps: Vec<u64> = log.of_kind(event::SESSION_END).map(|e| e.step).collect();
    let expected: Vec<u64> = (0..10).map(|i| 300 + 100 * i).collect();
    assert_eq!(steps, expected);
}

#[test]
fn label_accounting_with_a_skipping_teacher() {
    let mut c = tiny(1, ReedMode::None);
    c.teacher.strategy = Strategy::Skip;
    c.teacher.skip_rate = 0.3;
    let out = run_experiment(&c, None).unwrap();
    assert!(out.discarded > 0);
    assert_eq!(out.dataset.len() + out.discarded, 50);
    let last = out.log.of_kind(event::SESSION_END).last().unwrap();
    assert_eq!(last.value as usize, out.dataset.len());
    assert_eq!(aux_field(last, "discarded").unwrap(), out.discarded.to_string());
    let discards = out.log.of_kind(event::LABEL).filter(|e| e.value == 0.0).count();
    assert_eq!(discards, out.discarded);
}

#[test]
fn baseline_mode_runs_no_auxiliary_training() {
    let out = run_experiment(&tiny(2, ReedMode::None), None).unwrap();
    assert_eq!(out.log.count(event::REED_LOSS), 0);
    assert_eq!(out.log.count(event::SESSION_END), 10);
}

#[test]
fn zero_budget_is_pure_exploration() {
    let mut c = tiny(3, ReedMode::None);
    c.feedback = 0;
    let out = run_experiment(&c, None).unwrap();
    for k in [event::SESSION_END, event::LABEL, event::QUERY_SELECTED, event::RELABEL] {
        assert_eq!(out.log.count(k), 0, "{k}");
    }
    assert!(out.dataset.is_empty());
    assert_eq!(out.log.training_returns().len(), 1000 / 50);
    assert_eq!(out.log.count(event::EVAL_RETURN), 2);
}

#[test]
fn ground_truth_run_asks_nothing() {
    let mut c = tiny(4, ReedMode::None);
    c.reward_source = RewardSource::GroundTruth;
    let out = run_experiment(&c, None).unwrap();
    assert_eq!(out.log.count(event::LABEL), 0);
    assert!(out.ensemble.is_none());
}

#[test]
fn same_seed_gives_identical_logs() {
    let mut c = tiny(5, ReedMode::Distill);
    c.feedback = 10;
    let a = run_experiment(&c, None).unwrap();
    let b = run_experiment(&c, None).unwrap();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.log.write_csv(&mut x).unwrap();
    b.log.write_csv(&mut y).unwrap();
    assert_eq!(x, y);
    assert!(a.ensemble.unwrap().same_parameters(&b.ensemble.unwrap()));
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

fn snapshot_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().display().to_string(), read(&p));
            }
        }
    }
    files
}

#[test]
fn outputs_checkpoint_and_reuse() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = tiny(6, ReedMode::Contrast);
    c.feedback = 20;
    c.out_dir = Some(tmp.path().to_path_buf());
    let out = run_experiment(&c, None).unwrap();

    let csv = read(&tmp.path().join(METRICS_CSV));
    let rows = csv.iter().filter(|&&b| b == b'\n').count();
    assert_eq!(rows, out.log.len() + 1);
    assert_eq!(output::read_log(tmp.path()).unwrap(), out.log);

    let svg = read(&tmp.path().join(CURVE_SVG));
    output::emit_outputs(&out.log, tmp.path()).unwrap();
    assert_eq!(read(&tmp.path().join(METRICS_CSV)), csv);
    assert_eq!(read(&tmp.path().join(CURVE_SVG)), svg);

    let manifest: serde_json::Value = serde_json::from_slice(&read(&tmp.path().join(MANIFEST))).unwrap();
    assert_eq!(manifest["status"], "finished");
    assert_eq!(manifest["summary"]["labels"], 20);
    let recorded: ExperimentConfig = serde_json::from_value(manifest["config"].clone()).unwrap();
    assert_eq!(recorded, c);

    let ckpt = tmp.path().join("checkpoint");
    let before = snapshot_dir(&ckpt);
    assert!(before.contains_key("d_pref.jsonl"));
    assert!(before.keys().any(|k| k.starts_with("reward")));

    let mut rc = c.clone();
    rc.out_dir = None;
    rc.total_steps = 500;
    let reused = reuse_reward(tmp.path(), &rc).unwrap();
    assert_eq!(snapshot_dir(&ckpt), before);
    for k in [event::RELABEL, event::LABEL, event::SESSION_END, event::REED_LOSS] {
        assert_eq!(reused.log.count(k), 0, "{k}");
    }
    assert!(final_return(&reused.log).is_some());

    let mut wrong = rc.clone();
    wrong.env = "pendulum".into();
    assert!(reuse_reward(tmp.path(), &wrong).is_err());
    assert!(reuse_reward(&tmp.path().join("missing"), &rc).is_err());
}

#[test]
fn plot_aggregates_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for (i, returns) in [[1.0, 2.0, 3.0], [3.0, 4.0, 8.0]].iter().enumerate() {
        let mut log = MetricsLog::new();
        for (e, &r) in returns.iter().enumerate() {
            log.push(50 * (e as u64 + 1), e as u64, event::EPISODE_RETURN, r, "train");
        }
        let dir = tmp.path().join(format!("run{i}"));
        output::emit_outputs(&log, &dir).unwrap();
        logs.push(dir);
    }
    let out = tmp.path().join("plots/curve.svg");
    let dirs: Vec<&Path> = logs.iter().map(|p| p.as_path()).collect();
    let curve = output::plot_runs(&dirs, &out).unwrap();
    assert_eq!(curve, vec![(50.0, 2.0), (100.0, 3.0), (150.0, 5.5)]);
    let svg = std::fs::read_to_string(out).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let mut c = tiny(0, ReedMode::None);
    c.feedback = 52;
    assert!(run_experiment(&c, None).is_err());
    let mut c = tiny(0, ReedMode::None);
    c.human = true;
    assert!(run_experiment(&c, None).is_err());
}

fn post(addr: std::net::SocketAddr, path: &str, body: &str) -> u16 {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    write!(
        s,
        "POST {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn human_run_pauses_for_http_labels() {
    let mut c = tiny(7, ReedMode::None);
    c.feedback = 6;
    c.queries_per_session = 3;
    c.human = true;
    let (hub, mut teacher) = feedback_channel();
    let server = serve(hub.clone(), 0).unwrap();
    let addr = server.addr;
    let labeller = std::thread::spawn(move || {
        let mut answered = 0;
        while answered < 6 {
            let view = hub.current();
            for q in view.queries.iter().filter(|q| !q.answered) {
                let choice = if answered % 3 == 2 { "skip" } else { "left" };
                assert_eq!(post(addr, &format!("/api/query/{}/label", q.id), &format!(r#"{{"choice":"{choice}"}}"#)), 200);
                answered += 1;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        hub.metrics().len()
    });
    let out = run_experiment(&c, Some(&mut teacher)).unwrap();
    let metric_rows = labeller.join().unwrap();
    assert_eq!(out.dataset.len(), 4);
    assert_eq!(out.discarded, 2);
    assert_eq!(out.log.count(event::SESSION_END), 2);
    assert!(metric_rows > 0);
    drop(server);
}

/// Full preference loop with the oracle teacher: returns late in training
/// beat returns early on, in the median over seeds.
#[test]
fn oracle_loop_improves_over_training() {
    let mut gains = Vec::new();
    for seed in 0..5 {
        let mut c = ExperimentConfig::quick("point-mass", seed).unwrap();
        c.reed.mode = ReedMode::None;
        c.eval_episodes = 0;
        let out = run_experiment(&c, None).unwrap();
        let r: Vec<f64> = out.log.training_returns().iter().map(|e| e.value).collect();
        let n = (r.len() / 10).max(1);
        let first = r[..n].iter().sum::<f64>() / n as f64;
        let last = r[r.len() - n..].iter().sum::<f64>() / n as f64;
        gains.push(last - first);
    }
    gains.sort_by(f64::total_cmp);
    assert!(gains[2] > 0.0, "gains {gains:?}");
}
