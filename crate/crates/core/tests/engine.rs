use std::collections::HashSet;

use pruner_core::adaptation::{Provenance, SiameseState};
use pruner_core::analyzer::{explore, ExploreConfig, PenaltyMask};
use pruner_core::bench::{reference_device, reference_oracle, synthetic_graph};
use pruner_core::engine::{
    best_records, records_from_jsonl, records_to_jsonl, tune_full_graph, Mode, ModelState, Strategy, TuneOutcome,
    TunerConfig,
};
use pruner_core::metrics::tuning_curve;
use pruner_core::model::PaCMParams;
use pruner_core::problem::{gemm, SubgraphTask};
use pruner_core::schedule::{generate_sketch, Schedule};
use pruner_core::seeding::stream;
use pruner_core::sim::oracle_best;

fn small(trials: usize, rounds: usize) -> TunerConfig {
    TunerConfig {
        trials,
        rounds,
        batch: trials / rounds,
        draft_size: 48,
        pop_size: 48,
        n_steps: 4,
        hidden: 6,
        train_epochs: 2,
        seed: 5,
        ..TunerConfig::default()
    }
}

fn run(cfg: &TunerConfig, strategy: Strategy) -> TuneOutcome {
    tune_full_graph(cfg, strategy, &synthetic_graph(), &reference_device(), &reference_oracle(0.03), None).unwrap()
}

fn single(op_m: u64, op_n: u64, op_k: u64) -> Vec<SubgraphTask> {
    vec![SubgraphTask {
        op: gemm("g", op_m, op_n, op_k),
        weight: 1,
    }]
}

#[test]
fn model_invocations_stay_within_the_draft_budget() {
    let cfg = small(60, 6);
    let pruner = run(&cfg, Strategy::Pruner);
    for r in &pruner.rounds {
        assert!(r.model_invocations <= cfg.draft_size + cfg.batch, "{r:?}");
        assert_eq!(r.model_invocations, r.candidates);
    }
    let model_only = run(&cfg, Strategy::ModelOnly);
    for r in &model_only.rounds {
        assert!(r.model_invocations >= cfg.pop_size * cfg.n_steps, "{r:?}");
    }
    let random = run(&cfg, Strategy::Random);
    assert_eq!(random.total_model_invocations(), 0);
}

#[test]
fn zero_random_mix_drafts_only_the_explored_set() {
    let cfg = TunerConfig {
        random_mix: 0.0,
        mode: Mode::Offline,
        ..small(10, 1)
    };
    let tasks = single(64, 64, 64);
    let out = tune_full_graph(&cfg, Strategy::Pruner, &tasks, &reference_device(), &reference_oracle(0.0), None).unwrap();
    assert_eq!(out.rounds[0].candidates, cfg.draft_size);

    let ecfg = ExploreConfig {
        n_steps: cfg.n_steps,
        draft_size: cfg.draft_size,
        pop_size: cfg.pop_size,
        mask: PenaltyMask::ALL,
    };
    let ex = explore(&tasks[0].op, &reference_device(), &ecfg, &mut stream(cfg.seed, &[0, 0])).unwrap();
    let spec: HashSet<Schedule> = ex.s_spec.iter().map(|d| d.schedule.clone()).collect();
    let sketch = generate_sketch(&tasks[0].op).unwrap();
    for r in &out.log {
        assert!(spec.contains(&sketch.from_record(&r.schedule).unwrap()));
    }
}

#[test]
fn offline_mode_leaves_the_model_unchanged() {
    let start = ModelState::from_siamese(SiameseState::new(PaCMParams::init(6, &mut stream(1, &[])), 0.9).unwrap());
    let cfg = TunerConfig {
        mode: Mode::Offline,
        ..small(30, 3)
    };
    let out = tune_full_graph(
        &cfg,
        Strategy::Pruner,
        &synthetic_graph(),
        &reference_device(),
        &reference_oracle(0.03),
        Some(start.clone()),
    )
    .unwrap();
    assert_eq!(out.model.unwrap(), start);
}

#[test]
fn online_modes_update_the_expected_weights() {
    let init = PaCMParams::init(6, &mut stream(1, &[]));
    let moa = tune_full_graph(
        &small(30, 3),
        Strategy::Pruner,
        &synthetic_graph(),
        &reference_device(),
        &reference_oracle(0.03),
        Some(ModelState::from_siamese(SiameseState::new(init.clone(), 0.9).unwrap())),
    )
    .unwrap()
    .model
    .unwrap();
    let siamese = moa.siamese.unwrap();
    assert_eq!(siamese.provenance, Provenance::Evolved);
    assert_ne!(siamese.phi_s, init);
    assert_ne!(siamese.phi_s, moa.target);

    // without MoA the target persists and is fine-tuned directly
    let cfg = TunerConfig {
        moa_enabled: false,
        ..small(30, 3)
    };
    let plain = tune_full_graph(
        &cfg,
        Strategy::Pruner,
        &synthetic_graph(),
        &reference_device(),
        &reference_oracle(0.03),
        Some(ModelState::from_params(init.clone())),
    )
    .unwrap()
    .model
    .unwrap();
    assert!(plain.siamese.is_none());
    assert_ne!(plain.target, init);

    // online MoA needs the Siamese weights
    let err = tune_full_graph(
        &small(30, 3),
        Strategy::Pruner,
        &synthetic_graph(),
        &reference_device(),
        &reference_oracle(0.03),
        Some(ModelState::from_params(init)),
    );
    assert!(err.is_err());
}

#[test]
fn exhausting_a_small_space_finds_the_optimum() {
    let tasks = single(4, 4, 2);
    let sketch = generate_sketch(&tasks[0].op).unwrap();
    assert_eq!(sketch.space_size(), 900);
    let oracle = reference_oracle(0.0);
    let (best, _) = oracle_best(&tasks[0].op, &sketch, &oracle, 1 << 20).unwrap();
    for strategy in [Strategy::Random, Strategy::Pruner] {
        let cfg = TunerConfig {
            mode: Mode::Offline,
            draft_size: 32,
            pop_size: 32,
            n_steps: 2,
            ..small(1000, 100)
        };
        let out = tune_full_graph(&cfg, strategy, &tasks, &reference_device(), &oracle, None).unwrap();
        assert_eq!(out.log.len(), 900, "{strategy:?}");
        let unique: HashSet<_> = out.log.iter().map(|r| serde_json::to_string(&r.schedule).unwrap()).collect();
        assert_eq!(unique.len(), 900);
        let found = out.log[out.best[0].unwrap()].latency_s;
        assert_eq!(found, best, "{strategy:?}");
        assert!(out.states[0].exhausted);
    }
}

#[test]
fn same_seed_gives_the_same_log_for_any_thread_count() {
    let cfg = small(40, 4);
    let in_pool = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run(&cfg, Strategy::Pruner))
    };
    let a = in_pool(1);
    let b = in_pool(3);
    assert_eq!(records_to_jsonl(&a.log), records_to_jsonl(&b.log));
    assert_eq!(a.model, b.model);
    let c = run(&TunerConfig { seed: 6, ..cfg }, Strategy::Pruner);
    assert_ne!(records_to_jsonl(&a.log), records_to_jsonl(&c.log));
}

#[test]
fn accounting_uniqueness_and_monotone_best() {
    for strategy in [Strategy::Pruner, Strategy::Random, Strategy::PlainGa, Strategy::ModelOnly] {
        let cfg = small(50, 5);
        let out = run(&cfg, strategy);
        assert_eq!(out.states.iter().map(|s| s.trials).sum::<usize>(), cfg.trials);
        assert_eq!(out.log.len(), cfg.trials);
        let unique: HashSet<_> = out
            .log
            .iter()
            .map(|r| (r.task, serde_json::to_string(&r.schedule).unwrap()))
            .collect();
        assert_eq!(unique.len(), out.log.len(), "{strategy:?}");
        let mut best = [f64::INFINITY; 3];
        let mut last_round = 0;
        for r in &out.log {
            assert!(r.round >= last_round);
            last_round = r.round;
            best[r.task] = best[r.task].min(r.latency_s);
        }
        for (i, s) in out.states.iter().enumerate() {
            assert_eq!(s.best_latency, best[i]);
        }
        assert_eq!(out.log.iter().all(|r| r.model_score.is_some()), strategy.uses_model());
    }
}

#[test]
fn replayed_log_reproduces_live_metrics() {
    let out = run(&small(40, 4), Strategy::Pruner);
    let weights: Vec<f64> = synthetic_graph().iter().map(|t| t.weight as f64).collect();
    let replay = records_from_jsonl(&records_to_jsonl(&out.log)).unwrap();
    assert_eq!(replay, out.log);
    let live = tuning_curve(&out.log, &weights).unwrap();
    let again = tuning_curve(&replay, &weights).unwrap();
    assert_eq!(live.to_csv(), again.to_csv());
    for (x, y) in live.aggregate.iter().zip(&again.aggregate) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    assert_eq!(best_records(&replay, 3), out.best);
}

#[test]
fn plain_ga_with_a_zero_model_falls_back_to_tie_breaks() {
    let cfg = TunerConfig {
        mode: Mode::Offline,
        ..small(20, 2)
    };
    let run_zero = || {
        tune_full_graph(
            &cfg,
            Strategy::PlainGa,
            &synthetic_graph(),
            &reference_device(),
            &reference_oracle(0.03),
            Some(ModelState::from_params(PaCMParams::zeros(6))),
        )
        .unwrap()
    };
    let out = run_zero();
    assert!(out.log.iter().all(|r| r.model_score == Some(0.0)));
    // equal scores order by draft cost, so each round's batch is non-decreasing in it
    for round in 0..2 {
        let costs: Vec<f64> = out.log.iter().filter(|r| r.round == round).map(|r| r.draft_cost).collect();
        assert!(costs.windows(2).all(|w| w[0] <= w[1]), "{costs:?}");
    }
    assert_eq!(out.log, run_zero().log);
}
