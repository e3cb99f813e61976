use std::time::{Duration, Instant};

use longtail::hpo::{
    optimize, racos_suggest, read_history, Config, HpoOptions, Method, ParamKind, ParamSpec,
    SearchSpaceSpec, TrialBudget, TrialContext, TrialRecord, TrialStatus,
};
use longtail::rng::rng_for;
use proptest::prelude::*;

mod common;
use common::{neg_sq_dist, plane, quadratic_run as run};
use serde_json::Value;

#[test]
fn racos_locates_quadratic_optimum() {
    for seed in 0..3 {
        let (best, hist) = run(Method::Racos, seed, 200);
        assert_eq!(hist.len(), 200);
        let dist = (-best.metric.unwrap()).sqrt();
        assert!(
            dist <= 1e-2,
            "seed {seed}: best point {dist:.4} from optimum"
        );
    }
}

#[test]
fn racos_beats_random_search_on_average() {
    let mean = |m: Method| {
        (0..5)
            .map(|s| -run(m, 100 + s, 60).0.metric.unwrap())
            .sum::<f64>()
            / 5.0
    };
    let racos = mean(Method::Racos);
    let random = mean(Method::Random);
    assert!(racos < random, "racos {racos:e} vs random {random:e}");
}

#[test]
fn same_seed_same_trial_sequence() {
    let a = run(Method::Racos, 7, 30).1;
    let b = run(Method::Racos, 7, 30).1;
    let configs = |h: &[TrialRecord]| h.iter().map(|r| r.config.clone()).collect::<Vec<_>>();
    assert_eq!(configs(&a), configs(&b));
}

#[test]
fn history_is_written_as_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trials.jsonl");
    let f = |c: &Config, _: &mut TrialContext| Ok(neg_sq_dist(c));
    let opts = HpoOptions {
        history_path: Some(path.clone()),
        ..HpoOptions::default()
    };
    let budget = TrialBudget {
        max_trials: 8,
        ..TrialBudget::default()
    };
    let (_, hist) = optimize(&f, &plane(), &budget, &opts).unwrap();
    let back = read_history(&path).unwrap();
    assert_eq!(back.len(), 8);
    for (a, b) in hist.iter().zip(&back) {
        assert_eq!(a.trial_id, b.trial_id);
        assert_eq!(a.config, b.config);
        assert_eq!(a.metric, b.metric);
    }
}

#[test]
fn parallel_workers_complete_the_budget() {
    let f = |c: &Config, _: &mut TrialContext| Ok(neg_sq_dist(c));
    let opts = HpoOptions {
        workers: 3,
        ..HpoOptions::default()
    };
    let budget = TrialBudget {
        max_trials: 10,
        ..TrialBudget::default()
    };
    let (best, hist) = optimize(&f, &plane(), &budget, &opts).unwrap();
    assert_eq!(hist.len(), 10);
    let ids: Vec<usize> = hist.iter().map(|r| r.trial_id).collect();
    assert_eq!(ids, (0..10).collect::<Vec<_>>());
    let top = hist
        .iter()
        .filter_map(|r| r.metric)
        .fold(f64::MIN, f64::max);
    assert_eq!(best.metric, Some(top));
}

#[test]
fn cooperative_deadline_marks_trials_timed_out() {
    let per_trial = 0.05;
    let f = |c: &Config, ctx: &mut TrialContext| {
        // a slow objective that checks its deadline every 5 ms
        if c["x"].as_f64().unwrap() > 0.0 {
            while !ctx.deadline_passed() {
                std::thread::sleep(Duration::from_millis(5));
            }
            return Ok(0.0);
        }
        Ok(neg_sq_dist(c))
    };
    let budget = TrialBudget {
        max_trials: 12,
        max_total_seconds: 60.0,
        per_trial_seconds: per_trial,
    };
    let opts = HpoOptions {
        method: Method::Random,
        ..HpoOptions::default()
    };
    let (best, hist) = optimize(&f, &plane(), &budget, &opts).unwrap();
    let slow = hist
        .iter()
        .filter(|r| r.config["x"].as_f64().unwrap() > 0.0);
    for r in slow {
        assert_eq!(r.status, TrialStatus::TimedOut);
        assert!(r.metric.is_none());
        assert!(r.wall_time < per_trial + 0.05, "overran by {}", r.wall_time);
    }
    assert!(best.metric.is_some());
    assert_ne!(best.status, TrialStatus::TimedOut);
}

#[test]
fn total_time_budget_halts_the_loop() {
    let f = |c: &Config, _: &mut TrialContext| {
        std::thread::sleep(Duration::from_millis(20));
        Ok(neg_sq_dist(c))
    };
    let budget = TrialBudget {
        max_trials: 1000,
        max_total_seconds: 0.2,
        per_trial_seconds: 1.0,
    };
    let start = Instant::now();
    let (_, hist) = optimize(&f, &plane(), &budget, &HpoOptions::default()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(hist.len() < 1000);
    assert!(elapsed <= 0.2 + 1.0, "{elapsed}");
}

#[test]
fn median_rule_stops_trailing_trials() {
    // learning curves: the metric at step s is s * quality, quality = -|x|
    let f = |c: &Config, ctx: &mut TrialContext| {
        let q = 1.0 - c["x"].as_f64().unwrap().abs();
        let mut last = 0.0;
        for step in 1..=5 {
            last = q * step as f64;
            if !ctx.report(last) {
                break;
            }
        }
        Ok(last)
    };
    let budget = TrialBudget {
        max_trials: 30,
        ..TrialBudget::default()
    };
    let opts = HpoOptions {
        method: Method::Random,
        ..HpoOptions::default()
    };
    let (best, hist) = optimize(&f, &plane(), &budget, &opts).unwrap();
    let stopped: Vec<_> = hist
        .iter()
        .filter(|r| r.status == TrialStatus::EarlyStopped)
        .collect();
    assert!(!stopped.is_empty());
    for r in &stopped {
        assert!(r.intermediate.len() < 5);
        assert!(r.metric.is_some());
    }
    assert_eq!(best.status, TrialStatus::Done);
}

#[test]
fn unreachable_objective_all_fail() {
    let f = |_: &Config, _: &mut TrialContext| Err("diverged".to_string());
    let budget = TrialBudget {
        max_trials: 4,
        ..TrialBudget::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.jsonl");
    let opts = HpoOptions {
        history_path: Some(path.clone()),
        ..HpoOptions::default()
    };
    assert!(optimize(&f, &plane(), &budget, &opts).is_err());
    let back = read_history(&path).unwrap();
    assert_eq!(back.len(), 4);
    assert!(back
        .iter()
        .all(|r| r.status == TrialStatus::Failed && r.metric.is_none()));
}

fn mixed_space() -> SearchSpaceSpec {
    SearchSpaceSpec {
        params: vec![
            ParamSpec {
                name: "c".into(),
                kind: ParamKind::Categorical {
                    values: (0..4).map(Value::from).collect(),
                },
            },
            ParamSpec {
                name: "lr".into(),
                kind: ParamKind::LogUniform {
                    low: 1e-4,
                    high: 1e-1,
                },
            },
            ParamSpec {
                name: "n".into(),
                kind: ParamKind::IntRange { low: 1, high: 8 },
            },
        ],
    }
}

fn record(id: usize, config: Config, metric: f64) -> TrialRecord {
    TrialRecord {
        trial_id: id,
        config,
        metric: Some(metric),
        status: TrialStatus::Done,
        wall_time: 0.0,
        intermediate: vec![],
        error: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Suggestions always lie inside the space.
    #[test]
    fn suggestions_stay_in_domain(seed in 0u64..1000, n in 0usize..12, eps in 0.0f64..1.0) {
        let space = mixed_space();
        let mut rng = rng_for(seed, &[]);
        let hist: Vec<TrialRecord> = (0..n)
            .map(|i| {
                let c = space.sample(&mut rng);
                let m = (i as f64 * 0.37).sin();
                record(i, c, m)
            })
            .collect();
        let c = racos_suggest(&hist, &space, &mut rng, 0.2, eps);
        prop_assert!(space.contains(&c));
    }

    /// With no exploration, if every positive shares a categorical value
    /// the suggestion carries it too.
    #[test]
    fn shared_positive_value_is_kept(seed in 0u64..1000, v in 0i64..4) {
        let space = mixed_space();
        let mut rng = rng_for(seed, &[1]);
        let mut hist = Vec::new();
        for i in 0..10 {
            let mut c = space.sample(&mut rng);
            let good = i < 2;
            if good {
                c.insert("c".into(), Value::from(v));
            } else if c["c"] == Value::from(v) {
                c.insert("c".into(), Value::from((v + 1) % 4));
            }
            hist.push(record(i, c, if good { 1.0 + i as f64 } else { -(i as f64) }));
        }
        let c = racos_suggest(&hist, &space, &mut rng, 0.2, 0.0);
        prop_assert_eq!(&c["c"], &Value::from(v));
    }
}
