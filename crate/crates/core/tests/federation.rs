use std::collections::BTreeMap;

use fedreft_core::aggregation::{abm_aggregate, WeiszfeldConfig};
use fedreft_core::checkpoint::{self, Checkpoint};
use fedreft_core::intervention::{param_count, Group};
use fedreft_core::orchestrator::*;
use fedreft_core::synthdata::Design;

fn quick(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        rounds: 3,
        seed,
        data: DataConfig {
            examples_per_client: 150,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.optimizer.epochs = 1;
    cfg
}

fn w_bits(exp: &Experiment) -> Vec<Vec<u64>> {
    exp.clients()
        .iter()
        .map(|c| {
            c.bundle
                .params()
                .iter()
                .flat_map(|p| p.w.data().iter().map(|x| x.to_bits()))
                .collect()
        })
        .collect()
}

#[test]
fn no_w_strategy_never_touches_w() {
    for (sharing, should_change) in [(SharingStrategy::NoW, false), (SharingStrategy::Full, true)] {
        let mut cfg = quick(1);
        cfg.sharing = sharing;
        cfg.optimizer.lr = 0.0;
        // a fixed mid-grid alpha so fusion actually mixes
        cfg.alpha_grid = serde_json::from_str("[0.5]").unwrap();
        let mut exp = Experiment::new(cfg).unwrap();
        let before = w_bits(&exp);
        for _ in 0..3 {
            exp.run_round().unwrap();
        }
        assert_eq!(w_bits(&exp) != before, should_change, "{sharing:?}");
    }
}

#[test]
fn payload_is_exactly_the_shared_groups() {
    let mut cfg = quick(2);
    cfg.rounds = 1;
    let exp = Experiment::new(cfg.clone()).unwrap();
    let schedule = cfg.build_schedule().unwrap();
    let (r, d) = (cfg.schedule.rank, cfg.backbone.hidden_dim);
    for s in [SharingStrategy::Full, SharingStrategy::NoBias, SharingStrategy::NoW] {
        let p = exp.clients()[0].shared_params(s);
        let mut groups = p.layout.groups();
        groups.sort();
        let mut want = s.groups().to_vec();
        want.sort();
        assert_eq!(groups, want);
        let per_slot: usize = want.iter().map(|g| if *g == Group::B { r } else { r * d }).sum();
        assert_eq!(p.len(), schedule.slot_count() * per_slot);
        assert!(p.len() < exp.clients()[0].trainable_count());
    }
    assert_eq!(
        exp.clients()[0].shared_params(SharingStrategy::Full).len(),
        param_count(&schedule, r, d)
    );
}

#[test]
fn reported_uplink_bytes_match_accounting() {
    for s in [SharingStrategy::Full, SharingStrategy::NoBias, SharingStrategy::NoW] {
        let mut cfg = quick(3);
        cfg.rounds = 2;
        cfg.sharing = s;
        let schedule = cfg.build_schedule().unwrap();
        let want = 8 * uplink_scalars(&schedule, cfg.schedule.rank, cfg.backbone.hidden_dim, s) as u64;
        let (reports, summary) = run_experiment(cfg).unwrap();
        for r in &reports {
            assert!(r.clients.iter().all(|c| c.uplink_bytes == want));
        }
        assert!(summary.clients.iter().all(|c| c.total_uplink_bytes == 2 * want));
    }
}

#[test]
fn abm_payloads_differ_between_clients() {
    let mut exp = Experiment::new(quick(4)).unwrap();
    exp.run_round().unwrap();
    let all: BTreeMap<usize, _> = exp
        .clients()
        .iter()
        .map(|c| (c.id, c.shared_params(SharingStrategy::Full)))
        .collect();
    let cfg = WeiszfeldConfig::default();
    let outs: Vec<_> = all.keys().map(|&k| abm_aggregate(&all, k, &cfg).unwrap().0).collect();
    for i in 0..outs.len() {
        for j in i + 1..outs.len() {
            assert_ne!(outs[i].flat, outs[j].flat);
        }
    }
}

#[test]
fn task_transfer_is_near_chance() {
    let cfg = ExperimentConfig {
        seed: 11,
        ..Default::default()
    };
    let exp = Experiment::new(cfg.clone()).unwrap();
    let opt = fedreft_core::client::OptimizerConfig {
        epochs: cfg.optimizer.epochs * cfg.rounds,
        ..cfg.optimizer
    };
    for a in 0..3 {
        let mut c = exp.clients()[a].clone();
        c.local_train(exp.backbone(), &opt).unwrap();
        let own = c.evaluate(exp.backbone(), &c.test).unwrap().accuracy;
        assert!(own > 0.85);
        for b in (0..3).filter(|&b| b != a) {
            let other = &exp.clients()[b].test;
            let acc = c.evaluate(exp.backbone(), other).unwrap().accuracy;
            assert!(acc <= 0.6, "task {a} model on task {b}: {acc}");
        }
    }
}

#[test]
fn mixed_task_design_runs_and_tests_single_task() {
    let mut cfg = quick(5);
    cfg.data.design = Design::MixedTask;
    cfg.clients = 4;
    cfg.data.num_tasks = 2;
    let exp = Experiment::new(cfg.clone()).unwrap();
    for c in exp.clients() {
        assert!(c.test.iter().all(|e| e.task == c.task));
        let tasks: std::collections::BTreeSet<usize> = c.train.iter().map(|e| e.task).collect();
        assert_eq!(tasks.len(), 2);
    }
    let (reports, _) = run_experiment(cfg).unwrap();
    assert_eq!(reports.len(), 3);
    assert!(reports.iter().all(|r| r.clients.len() == 4));
}

#[test]
fn trained_client_checkpoints_round_trip() {
    let mut exp = Experiment::new(quick(6)).unwrap();
    exp.run_round().unwrap();
    let ckpt = Checkpoint {
        seed: 6,
        bundle: exp.clients()[2].bundle.clone(),
    };
    let back = checkpoint::from_text(&checkpoint::to_text(&ckpt)).unwrap();
    assert_eq!(back, ckpt);
}

#[test]
fn minimal_json_config_fills_defaults() {
    let cfg: ExperimentConfig =
        serde_json::from_str(r#"{"clients": 3, "rounds": 2, "aggregation": "abm_geomedian", "seed": 1}"#).unwrap();
    assert_eq!(cfg.schedule, ScheduleConfig::default());
    assert!(cfg.validate().is_ok());
    let bad: ExperimentConfig = serde_json::from_str(
        r#"{"clients": 3, "rounds": 0, "aggregation": "abm_mean", "seed": 1, "schedule": {"layers": [5], "prefix": 1, "suffix": 1, "rank": 99}}"#,
    )
    .unwrap();
    let paths: Vec<String> = bad.validate().unwrap_err().into_iter().map(|e| e.path).collect();
    for p in ["rounds", "schedule.rank", "schedule.layers"] {
        assert!(paths.iter().any(|x| x == p), "{paths:?}");
    }
}
