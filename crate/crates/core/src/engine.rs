//! The tuning loop: task scheduling, draft-then-verify rounds, measurement,
//! record keeping and online model updates, plus the baseline searches.
//!
//! Every random decision draws from a stream derived from the run seed and a
//! fixed index path (round, stage, item), so results do not depend on the
//! rayon thread count.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{init_target, update_moa, SiameseState, DEFAULT_MOMENTUM};
use crate::analyzer::{draft_costs, draft_total, explore_with, ExploreConfig, PenaltyMask};
use crate::error::{Error, Result};
use crate::features::{extract_features, HybridFeature};
use crate::model::{forward_batch, select_top_scored, train, PaCMParams, RankGroup, TrainConfig, DEFAULT_HIDDEN};
use crate::problem::{DeviceSpec, SubgraphTask, TensorOpSpec};
use crate::schedule::{enumerate_all, generate_sketch_or_trivial, mutate, random_init, Schedule, ScheduleRecord, Sketch};
use crate::seeding::stream;
use crate::sim::{measure, OracleDevice};

/// Spaces up to this size are enumerated when random sampling stops
/// finding unmeasured schedules.
pub const ENUMERATION_CAP: u128 = 1 << 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Online,
    Offline,
}

/// Search strategy driving each round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Draft with the analytical model, verify with the learned one.
    Pruner,
    /// Uniform sampling of unmeasured schedules.
    Random,
    /// GA whose fitness is the learned model score; no draft stage.
    PlainGa,
    /// The draft explorer runs, but the learned model scores every member
    /// of every generation instead of only the drafted set.
    ModelOnly,
}

impl Strategy {
    pub fn uses_model(self) -> bool {
        self != Strategy::Random
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "pruner" => Ok(Strategy::Pruner),
            "random" => Ok(Strategy::Random),
            "plain_ga" => Ok(Strategy::PlainGa),
            "model_only" => Ok(Strategy::ModelOnly),
            other => Err(Error::invalid("strategy", other, "expected pruner, random, plain_ga or model_only")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerConfig {
    /// Total measurements across all tasks.
    pub trials: usize,
    pub rounds: usize,
    /// Measurements per round.
    pub batch: usize,
    /// Size of the candidate set handed to the learned model.
    pub draft_size: usize,
    pub pop_size: usize,
    pub n_steps: usize,
    /// Fraction of the candidate set drawn uniformly instead of drafted.
    pub random_mix: f64,
    /// Per-round score decay of a stagnating task in the task scheduler.
    pub decay: f64,
    pub mode: Mode,
    pub moa_enabled: bool,
    pub momentum: f64,
    pub seed: u64,
    pub hidden: usize,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_batch: usize,
}

impl Default for TunerConfig {
    fn default() -> Self {
        TunerConfig {
            trials: 2000,
            rounds: 200,
            batch: 10,
            draft_size: 512,
            pop_size: 512,
            n_steps: 32,
            random_mix: 0.2,
            decay: 0.9,
            mode: Mode::Online,
            moa_enabled: true,
            momentum: DEFAULT_MOMENTUM,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            train_epochs: 10,
            train_lr: 1e-2,
            train_batch: 512,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch", self.batch, "must be at least 1"));
        }
        if self.rounds * self.batch != self.trials {
            return Err(Error::invalid(
                "trials",
                self.trials,
                format!("must equal rounds x batch = {}", self.rounds * self.batch),
            ));
        }
        if self.draft_size < self.batch {
            return Err(Error::invalid("draft_size", self.draft_size, "must be at least batch"));
        }
        if !(0.0..1.0).contains(&self.random_mix) {
            return Err(Error::invalid("random_mix", self.random_mix, "must lie in [0, 1)"));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::invalid("decay", self.decay, "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", self.momentum, "must lie in [0, 1)"));
        }
        if self.pop_size < 2 {
            return Err(Error::invalid("pop_size", self.pop_size, "must be at least 2"));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps", self.n_steps, "must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden", self.hidden, "must be at least 1"));
        }
        if !(self.train_lr.is_finite() && self.train_lr >= 0.0) {
            return Err(Error::invalid("train_lr", self.train_lr, "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<TunerConfig> {
        let cfg: TunerConfig = toml::from_str(text).map_err(|e| Error::parse("tuner config", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            lr: self.train_lr,
            batch: self.train_batch,
        }
    }

    /// Size of the drafted part of the candidate set.
    pub fn spec_size(&self) -> usize {
        ((self.draft_size as f64 * (1.0 - self.random_mix)).round() as usize).max(1)
    }
}

/// One measurement, as logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub task: usize,
    pub round: usize,
    pub schedule: ScheduleRecord,
    pub latency_s: f64,
    pub draft_cost: f64,
    /// Learned-model score at selection time; absent for model-free search.
    pub model_score: Option<f64>,
}

pub fn records_to_jsonl(log: &[TuningRecord]) -> String {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<TuningRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse("record log", format!("line {}: {e}", i + 1))))
        .collect()
}

/// Scheduler bookkeeping for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub best_latency: f64,
    pub trials: usize,
    pub last_improvement_round: usize,
    pub weight: f64,
    pub visited: bool,
    /// Every schedule of the task has been measured.
    pub exhausted: bool,
}

impl TaskState {
    pub fn new(weight: f64) -> Self {
        TaskState {
            best_latency: f64::INFINITY,
            trials: 0,
            last_improvement_round: 0,
            weight,
            visited: false,
            exhausted: false,
        }
    }
}

/// Unvisited tasks first (in order), then the argmax of
/// `w * best * decay^stagnation`. Ties go to the lower index.
pub fn task_scheduler(states: &[TaskState], current_round: usize, decay: f64) -> Result<usize> {
    let live = || states.iter().enumerate().filter(|(_, s)| !s.exhausted);
    if let Some((i, _)) = live().find(|(_, s)| !s.visited) {
        return Ok(i);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in live() {
        let stagnation = current_round.saturating_sub(s.last_improvement_round);
        let score = s.weight * s.best_latency * decay.powi(stagnation.min(i32::MAX as usize) as i32);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Budget("every task has exhausted its schedule space".into()))
}

/// Learned-model state carried across rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    /// Model used for selection.
    pub target: PaCMParams,
    pub siamese: Option<SiameseState>,
}

impl ModelState {
    pub fn fresh(hidden: usize, seed: u64) -> Self {
        ModelState {
            target: PaCMParams::init(hidden, &mut stream(seed, &[u64::MAX])),
            siamese: None,
        }
    }

    pub fn from_params(params: PaCMParams) -> Self {
        ModelState {
            target: params,
            siamese: None,
        }
    }

    pub fn from_siamese(siamese: SiameseState) -> Self {
        ModelState {
            target: init_target(&siamese),
            siamese: Some(siamese),
        }
    }
}

/// Counters of one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub task: usize,
    /// Candidates considered for measurement (`|S_draft|` plus top-ups).
    pub candidates: usize,
    pub model_invocations: usize,
    pub draft_evaluations: usize,
    pub measured: usize,
    /// Fewer than `batch` schedules were measured.
    pub partial: bool,
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub log: Vec<TuningRecord>,
    pub rounds: Vec<RoundStats>,
    /// Index into `log` of each task's fastest measurement.
    pub best: Vec<Option<usize>>,
    pub states: Vec<TaskState>,
    pub model: Option<ModelState>,
}

impl TuneOutcome {
    pub fn total_model_invocations(&self) -> usize {
        self.rounds.iter().map(|r| r.model_invocations).sum()
    }

    /// `[{task, name, latency_s, schedule}]` for every measured task.
    pub fn best_schedules_json(&self, tasks: &[SubgraphTask]) -> String {
        let items: Vec<_> = self
            .best
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.map(|idx| (i, &self.log[idx])))
            .map(|(i, r)| {
                serde_json::json!({
                    "task": i,
                    "name": tasks.get(i).map(|t| t.op.name.clone()),
                    "latency_s": r.latency_s,
                    "schedule": r.schedule,
                })
            })
            .collect();
        serde_json::to_string_pretty(&items).expect("best schedules serialize")
    }
}

/// Index of each task's fastest record; the first wins ties.
pub fn best_records(log: &[TuningRecord], n_tasks: usize) -> Vec<Option<usize>> {
    let mut best: Vec<Option<usize>> = vec![None; n_tasks];
    for (i, r) in log.iter().enumerate() {
        if let Some(slot) = best.get_mut(r.task) {
            if slot.is_none_or(|b| r.latency_s < log[b].latency_s) {
                *slot = Some(i);
            }
        }
    }
    best
}

struct TaskCtx {
    op: TensorOpSpec,
    sketch: Sketch,
    measured: HashSet<Schedule>,
    train_feats: Vec<HybridFeature>,
    train_lats: Vec<f64>,
}

struct Candidates {
    schedules: Vec<Schedule>,
    draft_costs: Vec<f64>,
    /// Model scores aligned with `schedules` (absent for random search).
    scores: Option<Vec<f64>>,
    invocations: usize,
    draft_evaluations: usize,
}

/// Runs the full tuning loop over a weighted set of subgraphs.
///
/// Model-guided strategies start from `model`, or from freshly initialized
/// weights when it is `None` (wrapped as the Siamese state if MoA is on).
/// A provided state must carry Siamese weights when online MoA is enabled.
pub fn tune_full_graph(
    cfg: &TunerConfig,
    strategy: Strategy,
    tasks: &[SubgraphTask],
    device: &DeviceSpec,
    oracle: &OracleDevice,
    model: Option<ModelState>,
) -> Result<TuneOutcome> {
    cfg.validate()?;
    device.validate()?;
    oracle.validate()?;
    if tasks.is_empty() {
        return Err(Error::Input("workload has no tasks".into()));
    }
    let mut model = if strategy.uses_model() {
        let m = match model {
            Some(m) => m,
            None if cfg.moa_enabled => {
                let fresh = ModelState::fresh(cfg.hidden, cfg.seed).target;
                ModelState::from_siamese(SiameseState::new(fresh, cfg.momentum)?)
            }
            None => ModelState::fresh(cfg.hidden, cfg.seed),
        };
        if cfg.moa_enabled && cfg.mode == Mode::Online && m.siamese.is_none() {
            return Err(Error::Input("MoA is enabled but the model state has no Siamese weights".into()));
        }
        Some(m)
    } else {
        None
    };
    let mut ctx: Vec<TaskCtx> = tasks
        .iter()
        .map(|t| {
            t.op.validate()?;
            Ok(TaskCtx {
                op: t.op.clone(),
                sketch: generate_sketch_or_trivial(&t.op),
                measured: HashSet::new(),
                train_feats: Vec::new(),
                train_lats: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    let mut states: Vec<TaskState> = tasks.iter().map(|t| TaskState::new(t.weight as f64)).collect();
    let mut log = Vec::new();
    let mut rounds = Vec::new();
    let mut used = 0;

    for round in 0..cfg.rounds {
        if used >= cfg.trials {
            break;
        }
        let task = match task_scheduler(&states, round, cfg.decay) {
            Ok(t) => t,
            Err(Error::Budget(_)) => break,
            Err(e) => return Err(e),
        };
        let b = cfg.batch.min(cfg.trials - used);
        let tc = &mut ctx[task];
        let cands = match strategy {
            Strategy::Pruner => pruner_candidates(cfg, tc, device, model.as_ref().expect("model"), round, b)?,
            Strategy::Random => random_candidates(cfg, tc, device, round, b)?,
            Strategy::PlainGa => plain_ga_candidates(cfg, tc, device, model.as_ref().expect("model"), round, b)?,
            Strategy::ModelOnly => {
                model_only_candidates(cfg, tc, device, model.as_ref().expect("model"), round, b)?
            }
        };
        let picked = pick(&cands, &tc.measured, b)?;
        if picked.is_empty() {
            states[task].exhausted = true;
            continue;
        }

        let measured: Vec<f64> = picked
            .par_iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut rng = stream(oracle.seed, &[cfg.seed, round as u64, i as u64]);
                measure(&tc.op, &cands.schedules[c], oracle, &mut rng).map(|(l, _)| l)
            })
            .collect::<Result<_>>()?;

        let state = &mut states[task];
        if !state.visited {
            state.visited = true;
            state.last_improvement_round = round;
        }
        for (&c, &latency) in picked.iter().zip(&measured) {
            let sched = &cands.schedules[c];
            tc.measured.insert(sched.clone());
            if latency < state.best_latency {
                state.best_latency = latency;
                state.last_improvement_round = round;
            }
            state.trials += 1;
            log.push(TuningRecord {
                task,
                round,
                schedule: tc.sketch.to_record(sched),
                latency_s: latency,
                draft_cost: cands.draft_costs[c],
                model_score: cands.scores.as_ref().map(|s| s[c]),
            });
            if model.is_some() && cfg.mode == Mode::Online {
                tc.train_feats.push(extract_features(&tc.op, sched, device)?);
                tc.train_lats.push(latency);
            }
        }
        used += picked.len();
        if tc.measured.len() as u128 >= tc.sketch.space_size() {
            state.exhausted = true;
        }
        rounds.push(RoundStats {
            round,
            task,
            candidates: cands.schedules.len(),
            model_invocations: cands.invocations,
            draft_evaluations: cands.draft_evaluations,
            measured: picked.len(),
            partial: picked.len() < cfg.batch,
        });

        if let (Some(m), Mode::Online) = (model.as_mut(), cfg.mode) {
            let groups: Vec<RankGroup> = ctx
                .iter()
                .filter(|t| t.train_lats.len() >= 2)
                .map(|t| RankGroup {
                    features: t.train_feats.clone(),
                    latencies: t.train_lats.clone(),
                })
                .collect();
            if !groups.is_empty() {
                update_model(cfg, m, &groups, round)?;
            }
        }
    }

    let best = best_records(&log, tasks.len());
    Ok(TuneOutcome {
        log,
        rounds,
        best,
        states,
        model,
    })
}

fn update_model(cfg: &TunerConfig, m: &mut ModelState, groups: &[RankGroup], round: usize) -> Result<()> {
    let mut rng = stream(cfg.seed, &[round as u64, 3]);
    let train_cfg = cfg.train_config();
    match (&m.siamese, cfg.moa_enabled) {
        (Some(siamese), true) => {
            let (target, next, _) = update_moa(siamese, groups, &train_cfg, &mut rng)?;
            m.target = target;
            m.siamese = Some(next);
        }
        _ => {
            let (target, _) = train(&m.target, groups, &train_cfg, &mut rng)?;
            m.target = target;
        }
    }
    Ok(())
}

/// Best `b` unmeasured candidates: by model score when present, otherwise
/// in candidate order.
fn pick(c: &Candidates, measured: &HashSet<Schedule>, b: usize) -> Result<Vec<usize>> {
    let available = c.schedules.iter().filter(|s| !measured.contains(*s)).count();
    let b = b.min(available);
    match &c.scores {
        Some(scores) => select_top_scored(&c.schedules, scores, &c.draft_costs, measured, b),
        None => Ok((0..c.schedules.len())
            .filter(|&i| !measured.contains(&c.schedules[i]))
            .take(b)
            .collect()),
    }
}

/// Up to `n` distinct schedules outside `exclude`, uniformly at random.
fn sample_fresh<R: Rng + ?Sized>(sketch: &Sketch, n: usize, exclude: &HashSet<Schedule>, rng: &mut R) -> Vec<Schedule> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let mut taken: HashSet<Schedule> = HashSet::new();
    let attempts = 16 * n + 64;
    for _ in 0..attempts {
        if out.len() == n {
            return out;
        }
        let s = sketch.random_schedule(rng);
        if !exclude.contains(&s) && taken.insert(s.clone()) {
            out.push(s);
        }
    }
    // sampling stalls on nearly exhausted spaces; fall back to enumeration
    if let Ok(all) = enumerate_all(sketch, ENUMERATION_CAP) {
        let rest: Vec<Schedule> = all
            .into_iter()
            .filter(|s| !exclude.contains(s) && !taken.contains(s))
            .collect();
        let need = n - out.len();
        out.extend(rest.choose_multiple(rng, need).cloned());
    }
    out
}

fn featurize(op: &TensorOpSpec, schedules: &[Schedule], device: &DeviceSpec) -> Result<Vec<HybridFeature>> {
    schedules.par_iter().map(|s| extract_features(op, s, device)).collect()
}

/// Appends fresh random schedules when fewer than `b` candidates are
/// unmeasured, so small spaces can be measured exhaustively.
fn top_up<R: Rng + ?Sized>(
    tc: &TaskCtx,
    schedules: &mut Vec<Schedule>,
    b: usize,
    rng: &mut R,
) -> Vec<Schedule> {
    let unmeasured = schedules.iter().filter(|s| !tc.measured.contains(*s)).count();
    if unmeasured >= b {
        return Vec::new();
    }
    let mut exclude = tc.measured.clone();
    exclude.extend(schedules.iter().cloned());
    let extra = sample_fresh(&tc.sketch, b - unmeasured, &exclude, rng);
    schedules.extend(extra.iter().cloned());
    extra
}

fn pruner_candidates(
    cfg: &TunerConfig,
    tc: &TaskCtx,
    device: &DeviceSpec,
    model: &ModelState,
    round: usize,
    b: usize,
) -> Result<Candidates> {
    let ecfg = ExploreConfig {
        n_steps: cfg.n_steps,
        draft_size: cfg.spec_size(),
        pop_size: cfg.pop_size,
        mask: PenaltyMask::ALL,
    };
    let exploration = explore_with(&tc.sketch, device, &ecfg, &mut stream(cfg.seed, &[round as u64, 0]), |_, _| {})?;
    let mut schedules: Vec<Schedule> = Vec::with_capacity(cfg.draft_size);
    let mut costs: Vec<f64> = Vec::with_capacity(cfg.draft_size);
    for d in exploration.s_spec {
        schedules.push(d.schedule);
        costs.push(d.draft_cost);
    }
    let mut rng = stream(cfg.seed, &[round as u64, 1]);
    let n_random = cfg.draft_size.saturating_sub(schedules.len());
    if n_random > 0 {
        let mut exclude = tc.measured.clone();
        exclude.extend(schedules.iter().cloned());
        let extra = sample_fresh(&tc.sketch, n_random, &exclude, &mut rng);
        costs.extend(draft_costs(&tc.op, &extra, device, PenaltyMask::ALL));
        schedules.extend(extra);
    }
    let extra = top_up(tc, &mut schedules, b, &mut rng);
    costs.extend(draft_costs(&tc.op, &extra, device, PenaltyMask::ALL));
    let feats = featurize(&tc.op, &schedules, device)?;
    let scores = forward_batch(&model.target, &feats)?;
    Ok(Candidates {
        invocations: scores.len(),
        schedules,
        draft_costs: costs,
        scores: Some(scores),
        draft_evaluations: exploration.draft_evaluations + extra.len(),
    })
}

fn random_candidates(
    cfg: &TunerConfig,
    tc: &TaskCtx,
    device: &DeviceSpec,
    round: usize,
    b: usize,
) -> Result<Candidates> {
    let mut rng = stream(cfg.seed, &[round as u64, 1]);
    let schedules = sample_fresh(&tc.sketch, b, &tc.measured, &mut rng);
    let costs = draft_costs(&tc.op, &schedules, device, PenaltyMask::ALL);
    Ok(Candidates {
        draft_evaluations: schedules.len(),
        schedules,
        draft_costs: costs,
        scores: None,
        invocations: 0,
    })
}

fn model_only_candidates(
    cfg: &TunerConfig,
    tc: &TaskCtx,
    device: &DeviceSpec,
    model: &ModelState,
    round: usize,
    b: usize,
) -> Result<Candidates> {
    let ecfg = ExploreConfig {
        n_steps: cfg.n_steps,
        draft_size: cfg.spec_size(),
        pop_size: cfg.pop_size,
        mask: PenaltyMask::ALL,
    };
    let mut members: Vec<Schedule> = Vec::with_capacity(cfg.pop_size * cfg.n_steps);
    let mut member_costs: Vec<f64> = Vec::with_capacity(cfg.pop_size * cfg.n_steps);
    let exploration = explore_with(
        &tc.sketch,
        device,
        &ecfg,
        &mut stream(cfg.seed, &[round as u64, 0]),
        |pop, costs| {
            members.extend_from_slice(pop);
            member_costs.extend_from_slice(costs);
        },
    )?;
    // every generation is scored by the learned model
    let mut scores = Vec::with_capacity(members.len());
    for chunk in members.chunks(cfg.pop_size) {
        scores.extend(forward_batch(&model.target, &featurize(&tc.op, chunk, device)?)?);
    }
    let invocations = scores.len();
    let (mut schedules, mut costs, mut kept_scores) = dedup(members, member_costs, scores);
    let mut rng = stream(cfg.seed, &[round as u64, 1]);
    let extra = top_up(tc, &mut schedules, b, &mut rng);
    costs.extend(draft_costs(&tc.op, &extra, device, PenaltyMask::ALL));
    kept_scores.extend(forward_batch(&model.target, &featurize(&tc.op, &extra, device)?)?);
    Ok(Candidates {
        invocations: invocations + extra.len(),
        schedules,
        draft_costs: costs,
        scores: Some(kept_scores),
        draft_evaluations: exploration.draft_evaluations + extra.len(),
    })
}

fn plain_ga_candidates(
    cfg: &TunerConfig,
    tc: &TaskCtx,
    device: &DeviceSpec,
    model: &ModelState,
    round: usize,
    b: usize,
) -> Result<Candidates> {
    let mut rng = stream(cfg.seed, &[round as u64, 0]);
    let mut population = random_init(&tc.sketch, cfg.pop_size, &mut rng);
    let mut members = Vec::with_capacity(cfg.pop_size * cfg.n_steps);
    let mut all_scores = Vec::with_capacity(cfg.pop_size * cfg.n_steps);
    for step in 0..cfg.n_steps {
        let scores = forward_batch(&model.target, &featurize(&tc.op, &population, device)?)?;
        members.extend_from_slice(&population);
        all_scores.extend_from_slice(&scores);
        if step + 1 < cfg.n_steps {
            // the GA minimizes cost; map scores to a positive cost with the
            // best member at 1
            let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let costs: Vec<f64> = scores.iter().map(|s| (top - s).min(700.0).exp()).collect();
            population = mutate(&population, &tc.sketch, &costs, &mut rng);
        }
    }
    let invocations = all_scores.len();
    let placeholder = vec![0.0; members.len()];
    let (mut schedules, _, mut kept_scores) = dedup(members, placeholder, all_scores);
    let mut rng = stream(cfg.seed, &[round as u64, 1]);
    let extra = top_up(tc, &mut schedules, b, &mut rng);
    kept_scores.extend(forward_batch(&model.target, &featurize(&tc.op, &extra, device)?)?);
    let costs: Vec<f64> = schedules
        .par_iter()
        .map(|s| draft_total(&tc.op, s, device, PenaltyMask::ALL))
        .collect();
    Ok(Candidates {
        invocations: invocations + extra.len(),
        draft_evaluations: schedules.len(),
        schedules,
        draft_costs: costs,
        scores: Some(kept_scores),
    })
}

/// Keeps the first occurrence of every schedule.
fn dedup(members: Vec<Schedule>, costs: Vec<f64>, scores: Vec<f64>) -> (Vec<Schedule>, Vec<f64>, Vec<f64>) {
    let mut seen = HashSet::with_capacity(members.len());
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for ((s, c), sc) in members.into_iter().zip(costs).zip(scores) {
        if seen.insert(s.clone()) {
            out.0.push(s);
            out.1.push(c);
            out.2.push(sc);
        }
    }
    out
}

/// Shuffled labeled sample of each task's space, measured through the
/// oracle (noisy).
pub fn sample_labeled<R: Rng + ?Sized>(
    tasks: &[SubgraphTask],
    oracle: &OracleDevice,
    per_task: usize,
    rng: &mut R,
) -> Result<Vec<(Vec<Schedule>, Vec<f64>)>> {
    tasks
        .iter()
        .map(|t| {
            let sketch = generate_sketch_or_trivial(&t.op);
            let mut schedules = sample_fresh(&sketch, per_task, &HashSet::new(), rng);
            schedules.shuffle(rng);
            let latencies = schedules
                .iter()
                .map(|s| measure(&t.op, s, oracle, rng).map(|(l, _)| l))
                .collect::<Result<Vec<_>>>()?;
            Ok((schedules, latencies))
        })
        .collect()
}

/// Rank groups (one per task) for training on labeled samples.
pub fn rank_groups(
    tasks: &[SubgraphTask],
    labeled: &[(Vec<Schedule>, Vec<f64>)],
    device: &DeviceSpec,
) -> Result<Vec<RankGroup>> {
    tasks
        .iter()
        .zip(labeled)
        .map(|(t, (schedules, latencies))| {
            Ok(RankGroup {
                features: featurize(&t.op, schedules, device)?,
                latencies: latencies.clone(),
            })
        })
        .collect()
}

/// Rank groups rebuilt from a record log.
pub fn groups_from_records(tasks: &[SubgraphTask], log: &[TuningRecord], device: &DeviceSpec) -> Result<Vec<RankGroup>> {
    let sketches: Vec<Sketch> = tasks.iter().map(|t| generate_sketch_or_trivial(&t.op)).collect();
    let mut groups: Vec<RankGroup> = vec![RankGroup::default(); tasks.len()];
    for r in log {
        let sketch = sketches
            .get(r.task)
            .ok_or_else(|| Error::Input(format!("record refers to unknown task {}", r.task)))?;
        let sched = sketch.from_record(&r.schedule)?;
        groups[r.task].features.push(extract_features(&tasks[r.task].op, &sched, device)?);
        groups[r.task].latencies.push(r.latency_s);
    }
    Ok(groups.into_iter().filter(|g| g.features.len() >= 2).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(best: f64, weight: f64, last: usize) -> TaskState {
        TaskState {
            best_latency: best,
            trials: 10,
            last_improvement_round: last,
            weight,
            visited: true,
            exhausted: false,
        }
    }

    #[test]
    fn scheduler_rules() {
        let fresh = TaskState::new(1.0);
        assert_eq!(task_scheduler(&[state(1.0, 1.0, 0), fresh.clone()], 3, 0.9).unwrap(), 1);
        assert_eq!(task_scheduler(&[state(1e-3, 1.0, 0), state(1e-2, 1.0, 0)], 0, 0.9).unwrap(), 1);
        assert_eq!(task_scheduler(&[state(1.0, 1.0, 0), state(1.0, 5.0, 0)], 0, 0.9).unwrap(), 1);
        // stagnation decays the score: 1.0 * 0.9^10 < 0.5
        assert_eq!(task_scheduler(&[state(1.0, 1.0, 0), state(0.5, 1.0, 10)], 10, 0.9).unwrap(), 1);
        let mut done = state(1.0, 1.0, 0);
        done.exhausted = true;
        assert!(matches!(task_scheduler(&[done], 0, 0.9), Err(Error::Budget(_))));
    }

    #[test]
    fn config_validation() {
        let cfg = TunerConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.spec_size(), 410);
        let back = TunerConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        let bad = TunerConfig { trials: 100, ..cfg.clone() };
        assert!(bad.validate().is_err());
        let bad = TunerConfig { draft_size: 5, ..cfg.clone() };
        assert!(bad.validate().is_err());
        assert!(TunerConfig::from_toml_str("unknown_field = 1").is_err());
        let partial = TunerConfig::from_toml_str("trials = 40\nrounds = 4\nseed = 3").unwrap();
        assert_eq!(partial.batch, 10);
    }

    #[test]
    fn jsonl_round_trip() {
        let rec = TuningRecord {
            task: 1,
            round: 2,
            schedule: ScheduleRecord {
                factors: [("m".to_string(), vec![2, 2, 1, 1])].into_iter().collect(),
                unroll: 4,
            },
            latency_s: 1.234_567_890_123_456_7e-6,
            draft_cost: 0.1 + 0.2,
            model_score: Some(-0.3),
        };
        let text = records_to_jsonl(&[rec.clone(), rec.clone()]);
        assert_eq!(records_from_jsonl(&text).unwrap(), vec![rec.clone(), rec]);
        assert!(records_from_jsonl("{not json").is_err());
    }
}
