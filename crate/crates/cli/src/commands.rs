use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};

use pruner_core::adaptation::{checkpoint_from_json, checkpoint_to_json, Provenance, SiameseState};
use pruner_core::analyzer::{compute_penalties, explore, extract_symbols, sa_cost, ExploreConfig, StatementKind};
use pruner_core::bench::{reference_device, reference_oracle, synthetic_graph};
use pruner_core::engine::{
    groups_from_records, rank_groups, records_from_jsonl, records_to_jsonl, sample_labeled, tune_full_graph,
    ModelState, Strategy, TuneOutcome, TunerConfig,
};
use pruner_core::metrics::{best_k, top_k, tuning_curve, DraftedTask, LabeledDataset, LabeledTask};
use pruner_core::model::{model_from_json, train as train_model, PaCMParams, TrainConfig};
use pruner_core::problem::{load_device, load_workload, DeviceSpec, SubgraphTask};
use pruner_core::schedule::{generate_sketch_or_trivial, Schedule, ScheduleRecord};
use pruner_core::seeding::stream;
use pruner_core::sim::{load_oracle, oracle_best, OracleDevice};
use pruner_core::{Error, Result};

use crate::{BenchArgs, EvalArgs, Inputs, InspectArgs, TrainArgs, TuneArgs};

/// Spaces up to this size are enumerated for the true optimum.
const OPTIMUM_CAP: u128 = 1 << 20;

struct Loaded {
    tasks: Vec<SubgraphTask>,
    device: DeviceSpec,
    oracle: OracleDevice,
}

fn load_inputs(inputs: &Inputs) -> Result<Loaded> {
    Ok(Loaded {
        tasks: match &inputs.workload {
            Some(p) => load_workload(p)?,
            None => synthetic_graph(),
        },
        device: match &inputs.device {
            Some(p) => load_device(p)?,
            None => reference_device(),
        },
        oracle: match &inputs.oracle {
            Some(p) => load_oracle(p)?,
            None => reference_oracle(0.03),
        },
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| Error::Io { path, source })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// A JSON scalar as a table cell: strings unquoted, null as `-`.
fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".to_string(),
        other => other.to_string(),
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes")
}

/// A model file holds either a Siamese checkpoint or bare parameters.
fn load_model_state(path: &Path, cfg: &TunerConfig) -> Result<ModelState> {
    let text = read(path)?;
    match checkpoint_from_json(&text) {
        Ok(mut siamese) => {
            siamese.m = cfg.momentum;
            if cfg.moa_enabled {
                Ok(ModelState::from_siamese(siamese))
            } else {
                Ok(ModelState::from_params(siamese.phi_s))
            }
        }
        Err(_) => {
            let (params, _) = model_from_json(&text)?;
            if cfg.moa_enabled {
                Ok(ModelState::from_siamese(SiameseState::new(params, cfg.momentum)?))
            } else {
                Ok(ModelState::from_params(params))
            }
        }
    }
}

/// Weighted sum of per-task optima when every space is enumerable.
fn oracle_target(tasks: &[SubgraphTask], oracle: &OracleDevice) -> Result<Option<f64>> {
    let clean = oracle.with_noise(0.0);
    let mut total = 0.0;
    for t in tasks {
        let sketch = generate_sketch_or_trivial(&t.op);
        match oracle_best(&t.op, &sketch, &clean, OPTIMUM_CAP) {
            Ok((l, _)) => total += t.weight as f64 * l,
            Err(Error::SpaceTooLarge { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(total))
}

fn write_tune_outputs(dir: &Path, tasks: &[SubgraphTask], out: &TuneOutcome) -> Result<()> {
    create_dir(dir)?;
    write(dir, "records.jsonl", records_to_jsonl(&out.log))?;
    write(dir, "best_schedules.json", out.best_schedules_json(tasks))?;
    if !out.log.is_empty() {
        let weights: Vec<f64> = tasks.iter().map(|t| t.weight as f64).collect();
        let curve = tuning_curve(&out.log, &weights)?;
        write(dir, "curve.csv", curve.to_csv())?;
        write(dir, "curve.json", curve.to_json())?;
    }
    Ok(())
}

fn outcome_summary(tasks: &[SubgraphTask], out: &TuneOutcome) -> Value {
    let per_task: Vec<Value> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            json!({
                "task": i,
                "name": t.op.name,
                "weight": t.weight,
                "trials": out.states[i].trials,
                "best_latency_s": out.best[i].map(|r| out.log[r].latency_s),
            })
        })
        .collect();
    json!({
        "trials": out.log.len(),
        "rounds": out.rounds.len(),
        "model_invocations": out.total_model_invocations(),
        "max_invocations_per_round": out.rounds.iter().map(|r| r.model_invocations).max().unwrap_or(0),
        "partial_rounds": out.rounds.iter().filter(|r| r.partial).count(),
        "tasks": per_task,
    })
}

fn summary_table(summary: &Value) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<4} {:<24} {:>6} {:>7} {:>14}", "task", "name", "weight", "trials", "best_latency_s");
    for t in summary["tasks"].as_array().into_iter().flatten() {
        let best = t["best_latency_s"].as_f64().map_or("-".to_string(), |l| format!("{l:.6e}"));
        let _ = writeln!(
            s,
            "{:<4} {:<24} {:>6} {:>7} {:>14}",
            cell(&t["task"]),
            cell(&t["name"]),
            cell(&t["weight"]),
            cell(&t["trials"]),
            best
        );
    }
    let _ = writeln!(
        s,
        "trials {}  rounds {}  model invocations {} (max {} per round)",
        cell(&summary["trials"]),
        cell(&summary["rounds"]),
        cell(&summary["model_invocations"]),
        cell(&summary["max_invocations_per_round"])
    );
    s
}

pub fn tune(a: &TuneArgs) -> Result<()> {
    let cfg = a.cfg.resolve(a.seed)?;
    let strategy = Strategy::parse(&a.strategy)?;
    let l = load_inputs(&a.inputs)?;
    let model = a.model.as_deref().map(|p| load_model_state(p, &cfg)).transpose()?;
    let out = tune_full_graph(&cfg, strategy, &l.tasks, &l.device, &l.oracle, model)?;
    write_tune_outputs(&a.out, &l.tasks, &out)?;
    let summary = outcome_summary(&l.tasks, &out);
    write(&a.out, "summary.json", pretty(&summary))?;
    print!("{}", summary_table(&summary));
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let l = load_inputs(&a.inputs)?;
    let mut rng = stream(a.seed, &[0]);
    let groups = match &a.records {
        Some(p) => groups_from_records(&l.tasks, &records_from_jsonl(&read(p)?)?, &l.device)?,
        None => {
            let labeled = sample_labeled(&l.tasks, &l.oracle, a.samples, &mut rng)?;
            rank_groups(&l.tasks, &labeled, &l.device)?
        }
    };
    let init = match &a.init {
        Some(p) => model_from_json(&read(p)?)?.0,
        None => PaCMParams::init(a.hidden, &mut stream(a.seed, &[1])),
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch: a.batch,
    };
    let (params, report) = train_model(&init, &groups, &cfg, &mut stream(a.seed, &[2]))?;
    let state = SiameseState {
        phi_s: params,
        m: a.momentum,
        provenance: Provenance::Pretrained,
    };
    state.validate()?;
    create_dir(&a.out)?;
    write(&a.out, "model.json", checkpoint_to_json(&state))?;
    let report_json = json!({
        "examples": groups.iter().map(|g| g.features.len()).sum::<usize>(),
        "groups": groups.len(),
        "hidden": state.phi_s.hidden,
        "epochs": report.epochs,
        "steps": report.steps,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
    });
    write(&a.out, "train_report.json", pretty(&report_json))?;
    println!("{:<14} {:>20}", "metric", "value");
    for key in ["examples", "groups", "hidden", "epochs", "steps", "initial_loss", "final_loss"] {
        println!("{key:<14} {:>20}", cell(&report_json[key]));
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let l = load_inputs(&a.inputs)?;
    let params = match &a.model {
        Some(p) => model_from_json(&read(p)?)?.0,
        None => PaCMParams::init(pruner_core::model::DEFAULT_HIDDEN, &mut stream(a.seed, &[1])),
    };
    let clean = l.oracle.with_noise(0.0);
    let dataset = match &a.records {
        Some(p) => {
            let log = records_from_jsonl(&read(p)?)?;
            let mut tasks: Vec<LabeledTask> = l
                .tasks
                .iter()
                .map(|t| LabeledTask {
                    op: t.op.clone(),
                    weight: t.weight as f64,
                    schedules: Vec::new(),
                    latencies: Vec::new(),
                })
                .collect();
            for r in &log {
                let task = tasks
                    .get_mut(r.task)
                    .ok_or_else(|| Error::Input(format!("record refers to unknown task {}", r.task)))?;
                let sched = generate_sketch_or_trivial(&task.op).from_record(&r.schedule)?;
                task.schedules.push(sched);
                task.latencies.push(r.latency_s);
            }
            LabeledDataset {
                tasks: tasks.into_iter().filter(|t| !t.schedules.is_empty()).collect(),
            }
        }
        None => {
            let mut rng = stream(a.seed, &[0]);
            let sampled = sample_labeled(&l.tasks, &clean, a.samples, &mut rng)?;
            LabeledDataset::from_oracle(
                l.tasks
                    .iter()
                    .zip(sampled)
                    .map(|(t, (s, _))| (t.op.clone(), t.weight as f64, s))
                    .collect(),
                &clean,
            )?
        }
    };

    let mut top_rows = Vec::new();
    for &k in &a.k {
        top_rows.push(json!({ "k": k, "top_k": top_k(&params, &dataset, &l.device, k)? }));
    }

    let mut optima = Vec::with_capacity(l.tasks.len());
    for t in &l.tasks {
        let sketch = generate_sketch_or_trivial(&t.op);
        optima.push(match oracle_best(&t.op, &sketch, &clean, OPTIMUM_CAP) {
            Ok((best, _)) => Some(best),
            Err(Error::SpaceTooLarge { .. }) => None,
            Err(e) => return Err(e),
        });
    }
    let mut best_rows = Vec::new();
    for &size in &a.draft_sizes {
        let drafts: Vec<Vec<Schedule>> = l
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let cfg = ExploreConfig {
                    draft_size: size,
                    ..ExploreConfig::default()
                };
                let ex = explore(&t.op, &l.device, &cfg, &mut stream(a.seed, &[2, size as u64, i as u64]))?;
                Ok(ex.s_spec.into_iter().map(|d| d.schedule).collect())
            })
            .collect::<Result<_>>()?;
        let mut drafted = Vec::new();
        for (i, t) in l.tasks.iter().enumerate() {
            // without an enumerable optimum, the best drafted latency stands in
            let l_star = match optima[i] {
                Some(v) => v,
                None => drafts[i]
                    .iter()
                    .map(|s| clean.noiseless(&t.op, s))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .fold(f64::INFINITY, f64::min),
            };
            drafted.push(DraftedTask {
                op: &t.op,
                weight: t.weight as f64,
                l_star,
                s_spec: &drafts[i],
            });
        }
        for &k in &a.k {
            let value = if drafted.iter().all(|d| d.s_spec.len() >= k) {
                Some(best_k(&drafted, &clean, k)?)
            } else {
                None
            };
            best_rows.push(json!({ "draft_size": size, "k": k, "best_k": value }));
        }
    }

    let report = json!({ "top_k": top_rows, "best_k": best_rows });
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write(dir, "metrics.json", pretty(&report))?;
    }
    println!("{:<8} {:>6} {:>10}", "metric", "k", "value");
    for r in &top_rows {
        println!("{:<8} {:>6} {:>10.4}", "Top_k", cell(&r["k"]), r["top_k"].as_f64().unwrap_or(f64::NAN));
    }
    println!("{:<8} {:>6} {:>6} {:>10}", "metric", "size", "k", "value");
    for r in &best_rows {
        let v = r["best_k"].as_f64().map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{:<8} {:>6} {:>6} {:>10}", "Best_k", cell(&r["draft_size"]), cell(&r["k"]), v);
    }
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let cfg = a.cfg.resolve(a.seed)?;
    let baseline = Strategy::parse(&a.baseline)?;
    if baseline == Strategy::Pruner {
        return Err(Error::Input("the baseline must differ from pruner".into()));
    }
    let l = load_inputs(&a.inputs)?;
    let model = a.model.as_deref().map(|p| load_model_state(p, &cfg)).transpose()?;
    let ours = tune_full_graph(&cfg, Strategy::Pruner, &l.tasks, &l.device, &l.oracle, model.clone())?;
    let theirs = tune_full_graph(&cfg, baseline, &l.tasks, &l.device, &l.oracle, model)?;
    write_tune_outputs(&a.out.join("pruner"), &l.tasks, &ours)?;
    write_tune_outputs(&a.out.join(&a.baseline), &l.tasks, &theirs)?;

    let weights: Vec<f64> = l.tasks.iter().map(|t| t.weight as f64).collect();
    let best_aggregate = |o: &TuneOutcome| -> Result<f64> {
        Ok(if o.log.is_empty() {
            f64::INFINITY
        } else {
            *tuning_curve(&o.log, &weights)?.aggregate.last().expect("non-empty")
        })
    };
    let (agg_ours, agg_theirs) = (best_aggregate(&ours)?, best_aggregate(&theirs)?);
    let (target, target_source) = match oracle_target(&l.tasks, &l.oracle)? {
        Some(t) => (t, "oracle optimum"),
        None => (agg_ours.min(agg_theirs), "best found"),
    };
    let ttt = |o: &TuneOutcome| -> Result<Option<usize>> {
        if o.log.is_empty() {
            return Ok(None);
        }
        Ok(tuning_curve(&o.log, &weights)?.trials_to_target(target, a.tau))
    };
    let row = |name: &str, o: &TuneOutcome, agg: f64| -> Result<Value> {
        Ok(json!({
            "search": name,
            "best_weighted_latency_s": agg.is_finite().then_some(agg),
            "trials_to_target": ttt(o)?,
            "model_invocations": o.total_model_invocations(),
            "trials": o.log.len(),
        }))
    };
    let rows = vec![row("pruner", &ours, agg_ours)?, row(&a.baseline, &theirs, agg_theirs)?];
    let summary = json!({
        "seed": a.seed,
        "tau": a.tau,
        "target_weighted_latency_s": target,
        "target_source": target_source,
        "runs": rows,
    });
    write(&a.out, "summary.json", pretty(&summary))?;
    println!(
        "{:<12} {:>22} {:>17} {:>17}",
        "search", "best_weighted_latency", "trials_to_target", "model_invocations"
    );
    for r in summary["runs"].as_array().into_iter().flatten() {
        let best = r["best_weighted_latency_s"].as_f64().map_or("-".to_string(), |v| format!("{v:.6e}"));
        let ttt = r["trials_to_target"].as_u64().map_or("-".to_string(), |v| v.to_string());
        println!(
            "{:<12} {:>22} {:>17} {:>17}",
            cell(&r["search"]),
            best,
            ttt,
            cell(&r["model_invocations"])
        );
    }
    println!("target {target:.6e} ({target_source}), tau {}", a.tau);
    Ok(())
}

fn statement_label(op: &pruner_core::problem::TensorOpSpec, kind: StatementKind, buffer: Option<usize>) -> String {
    let name = match kind {
        StatementKind::LoadL2ToL1 => "load_l2_l1",
        StatementKind::LoadL1ToL0 => "load_l1_l0",
        StatementKind::ComputeL0 => "compute",
        StatementKind::StoreL0ToL2 => "store_l0_l2",
    };
    match buffer {
        Some(b) => format!("{name}[{}]", op.buffers[b].name),
        None => name.to_string(),
    }
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let l = load_inputs(&a.inputs)?;
    let task = match a.task.parse::<usize>() {
        Ok(i) => l
            .tasks
            .get(i)
            .ok_or_else(|| Error::Input(format!("no task with index {i}")))?,
        Err(_) => l
            .tasks
            .iter()
            .find(|t| t.op.name == a.task)
            .ok_or_else(|| Error::Input(format!("no task named {}", a.task)))?,
    };
    let text = match a.schedule.strip_prefix('@') {
        Some(path) => read(Path::new(path))?,
        None => a.schedule.clone(),
    };
    let record: ScheduleRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: "schedule".into(),
        message: e.to_string(),
    })?;
    let sched = generate_sketch_or_trivial(&task.op).from_record(&record)?;
    let symbols = extract_symbols(&task.op, &sched)?;
    let cost = sa_cost(&task.op, &sched, &l.device)?;

    let mut rows = Vec::new();
    let mut table = String::new();
    for ((desc, sym), sc) in symbols.iter().zip(&cost.per_statement) {
        let p = compute_penalties(sym, &l.device);
        let label = statement_label(&task.op, desc.kind, desc.buffer);
        let _ = writeln!(
            table,
            "{label:<16} s1={} s2={} s3={} s4={} s5={} s6={} s7={} s8={}",
            sym.s1, sym.s2, sym.s3, sym.s4, sym.s5, sym.s6, sym.s7, sym.s8
        );
        let _ = writeln!(
            table,
            "{:<16} p_l0_m={:?} p_l0_c={:?} p_l1_m={:?} p_l1_c={:?} alpha_l1={:?} p_l2_c={:?} p_l2_m={:?}",
            "", p.p_l0_m, p.p_l0_c, p.p_l1_m, p.p_l1_c, p.alpha_l1, p.p_l2_c, p.p_l2_m
        );
        let _ = writeln!(table, "{:<16} l_c={:e} l_m={:e}", "", sc.l_c, sc.l_m);
        rows.push(json!({
            "statement": label,
            "symbols": sym,
            "penalties": p,
            "cost": sc,
        }));
    }
    let _ = writeln!(table, "total draft cost {:e} s", cost.total);
    let report = json!({ "task": task.op.name, "statements": rows, "total_s": cost.total });
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write(dir, "inspect.json", pretty(&report))?;
    }
    if a.json {
        println!("{}", pretty(&report));
    } else {
        print!("{table}");
    }
    Ok(())
}
