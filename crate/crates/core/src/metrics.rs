//! Dataset metrics (`Top_k`, `Best_k`) and tuning curves from record logs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::engine::TuningRecord;
use crate::features::extract_features;
use crate::model::{forward_batch, PaCMParams};
use crate::problem::{DeviceSpec, TensorOpSpec};
use crate::schedule::Schedule;
use crate::sim::OracleDevice;

/// Labeled schedules of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTask {
    pub op: TensorOpSpec,
    pub weight: f64,
    pub schedules: Vec<Schedule>,
    pub latencies: Vec<f64>,
}

impl LabeledTask {
    /// Minimum latency of the task's list.
    pub fn l_star(&self) -> f64 {
        self.latencies.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn validate(&self) -> Result<()> {
        if self.schedules.len() != self.latencies.len() {
            return Err(Error::Input(format!(
                "task {}: {} schedules but {} latencies",
                self.op.name,
                self.schedules.len(),
                self.latencies.len()
            )));
        }
        if let Some(l) = self.latencies.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::Input(format!("task {}: latency must be positive, got {l}", self.op.name)));
        }
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(Error::Input(format!("task {}: weight must be positive", self.op.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledDataset {
    pub tasks: Vec<LabeledTask>,
}

impl LabeledDataset {
    /// Labels every schedule with the oracle's noiseless latency.
    pub fn from_oracle(
        tasks: Vec<(TensorOpSpec, f64, Vec<Schedule>)>,
        oracle: &OracleDevice,
    ) -> Result<LabeledDataset> {
        let tasks = tasks
            .into_iter()
            .map(|(op, weight, schedules)| {
                let latencies = schedules
                    .iter()
                    .map(|s| oracle.noiseless(&op, s))
                    .collect::<Result<Vec<_>>>()?;
                Ok(LabeledTask {
                    op,
                    weight,
                    schedules,
                    latencies,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledDataset { tasks })
    }
}

/// `Top_k` from precomputed scores (one list per task, higher = faster).
///
/// Equal scores rank the slower schedule first, so the result is a lower
/// bound on what any tie-breaking could report.
pub fn top_k_from_scores(dataset: &LabeledDataset, scores: &[Vec<f64>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    if scores.len() != dataset.tasks.len() {
        return Err(Error::Input("one score list per task is required".into()));
    }
    if dataset.tasks.is_empty() {
        return Err(Error::Input("dataset has no tasks".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (task, s) in dataset.tasks.iter().zip(scores) {
        task.validate()?;
        if s.len() != task.latencies.len() {
            return Err(Error::Input(format!("task {}: score count mismatch", task.op.name)));
        }
        if k > task.latencies.len() {
            return Err(Error::Input(format!(
                "k = {k} exceeds the {} schedules of task {}",
                task.latencies.len(),
                task.op.name
            )));
        }
        let lat = &task.latencies;
        let mut order: Vec<usize> = (0..lat.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(lat[b].total_cmp(&lat[a])));
        let best_in_top = order[..k].iter().map(|&i| lat[i]).fold(f64::INFINITY, f64::min);
        num += task.weight * task.l_star();
        den += task.weight * best_in_top;
    }
    Ok(num / den)
}

/// Scores every labeled schedule with the model.
pub fn model_scores(params: &PaCMParams, dataset: &LabeledDataset, device: &DeviceSpec) -> Result<Vec<Vec<f64>>> {
    dataset
        .tasks
        .iter()
        .map(|t| {
            let feats = t
                .schedules
                .iter()
                .map(|s| extract_features(&t.op, s, device))
                .collect::<Result<Vec<_>>>()?;
            forward_batch(params, &feats)
        })
        .collect()
}

/// `Top_k` of a learned model on a labeled dataset.
pub fn top_k(params: &PaCMParams, dataset: &LabeledDataset, device: &DeviceSpec, k: usize) -> Result<f64> {
    top_k_from_scores(dataset, &model_scores(params, dataset, device)?, k)
}

/// Latencies of one task's drafted set plus the task's true optimum.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftLabels {
    pub weight: f64,
    pub l_star: f64,
    pub latencies: Vec<f64>,
}

/// `Best_k`: weighted optimum over the weighted k-th best latency in each
/// drafted set.
pub fn best_k_from_latencies(tasks: &[DraftLabels], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Input("no tasks".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for t in tasks {
        if t.latencies.len() < k {
            return Err(Error::Input(format!(
                "k = {k} exceeds a drafted set of {} schedules",
                t.latencies.len()
            )));
        }
        if t.latencies.iter().chain([&t.l_star]).any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Input("latencies must be positive".into()));
        }
        let mut sorted = t.latencies.clone();
        sorted.sort_by(f64::total_cmp);
        num += t.weight * t.l_star;
        den += t.weight * sorted[k - 1];
    }
    Ok(num / den)
}

/// One task's drafted set, labeled through the noiseless oracle.
pub struct DraftedTask<'a> {
    pub op: &'a TensorOpSpec,
    pub weight: f64,
    pub l_star: f64,
    pub s_spec: &'a [Schedule],
}

pub fn best_k(tasks: &[DraftedTask<'_>], oracle: &OracleDevice, k: usize) -> Result<f64> {
    let labels = tasks
        .iter()
        .map(|t| {
            let latencies = t
                .s_spec
                .iter()
                .map(|s| oracle.noiseless(t.op, s))
                .collect::<Result<Vec<_>>>()?;
            Ok(DraftLabels {
                weight: t.weight,
                l_star: t.l_star,
                latencies,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    best_k_from_latencies(&labels, k)
}

/// Best-so-far latency after every trial of a log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningCurve {
    /// `per_task[i][t]`: best latency of task `i` after `t + 1` trials
    /// (infinite until the task is first measured).
    pub per_task: Vec<Vec<f64>>,
    /// `sum_i w_i * per_task[i][t]`.
    pub aggregate: Vec<f64>,
}

pub fn tuning_curve(log: &[TuningRecord], weights: &[f64]) -> Result<TuningCurve> {
    if log.is_empty() {
        return Err(Error::Input("empty tuning log".into()));
    }
    if let Some(r) = log.iter().find(|r| r.task >= weights.len()) {
        return Err(Error::Input(format!("record refers to unknown task {}", r.task)));
    }
    let mut best = vec![f64::INFINITY; weights.len()];
    let mut per_task = vec![Vec::with_capacity(log.len()); weights.len()];
    let mut aggregate = Vec::with_capacity(log.len());
    for r in log {
        best[r.task] = best[r.task].min(r.latency_s);
        for (series, b) in per_task.iter_mut().zip(&best) {
            series.push(*b);
        }
        aggregate.push(weights.iter().zip(&best).map(|(w, b)| w * b).sum());
    }
    Ok(TuningCurve { per_task, aggregate })
}

impl TuningCurve {
    /// First trial count (1-based) at which the aggregate is within
    /// `(1 + tau)` of `target`.
    pub fn trials_to_target(&self, target: f64, tau: f64) -> Option<usize> {
        let bound = (1.0 + tau) * target;
        self.aggregate.iter().position(|&a| a <= bound).map(|i| i + 1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial");
        for i in 0..self.per_task.len() {
            let _ = write!(out, ",task{i}");
        }
        out.push_str(",aggregate\n");
        for (t, agg) in self.aggregate.iter().enumerate() {
            let _ = write!(out, "{}", t + 1);
            for series in &self.per_task {
                let _ = write!(out, ",{}", fmt_latency(series[t]));
            }
            let _ = writeln!(out, ",{}", fmt_latency(*agg));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let finite = |v: &Vec<f64>| v.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>();
        serde_json::json!({
            "per_task": self.per_task.iter().map(finite).collect::<Vec<_>>(),
            "aggregate": finite(&self.aggregate),
        })
        .to_string()
    }
}

fn fmt_latency(x: f64) -> String {
    if x.is_finite() {
        format!("{x:e}")
    } else {
        "inf".into()
    }
}
