//! Symbol-based analyzer: the draft cost model and the latent schedule
//! explorer built on top of it.
//!
//! A schedule is lowered to a fixed list of innermost statements (per input
//! buffer an L2->L1 load and an L1->L0 load, one L0 compute, one L0->L2
//! store). Each statement gets eight hardware-aware symbols, the symbols
//! become penalties against the device limits, and the penalties scale the
//! device peak rates into per-statement compute and memory latencies.
//!
//! Tile extents per level:
//!
//! | axis      | L0 (per lane) | L1 (per block) | L2          |
//! |-----------|---------------|----------------|-------------|
//! | spatial   | `o * v`       | `t * o * v`    | full extent |
//! | reduction | 1             | `rb * rc`      | full extent |
//!
//! A buffer's footprint at a level is the product of its axes' tile extents.

use std::collections::HashSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{flops_of, AxisRef, BufferSpec, DeviceSpec, OpKind, TensorOpSpec};
use crate::schedule::{generate_sketch_or_trivial, mutate, random_init, Schedule, Sketch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatementKind {
    LoadL2ToL1,
    LoadL1ToL0,
    ComputeL0,
    StoreL0ToL2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementDesc {
    pub kind: StatementKind,
    /// Index into `op.buffers`; `None` for the compute statement.
    pub buffer: Option<usize>,
}

/// The eight hardware-aware symbols of one statement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolSet {
    /// L0 allocation per lane.
    pub s1: u64,
    /// L0 compute count per lane.
    pub s2: u64,
    /// L1 allocation per block.
    pub s3: u64,
    /// Lanes per block.
    pub s4: u64,
    /// L2 traffic of this statement.
    pub s5: u64,
    /// Blocks at L2.
    pub s6: u64,
    /// Innermost contiguous transfer extent.
    pub s7: u64,
    /// L2 compute count.
    pub s8: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltySet {
    pub p_l0_m: f64,
    pub p_l0_c: f64,
    pub p_l1_m: f64,
    pub p_l1_c: f64,
    pub alpha_l1: f64,
    pub p_l2_c: f64,
    pub p_l2_m: f64,
}

impl PenaltySet {
    /// Product of the compute-side terms, `alpha_l1` included.
    pub fn compute_factor(&self) -> f64 {
        self.p_l0_c * self.p_l1_c * self.alpha_l1 * self.p_l2_c
    }

    pub fn memory_factor(&self) -> f64 {
        self.p_l0_m * self.p_l1_m * self.p_l2_m
    }
}

/// Which penalty families the analyzer applies. Disabled families are
/// forced to 1; used for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PenaltyMask {
    pub compute: bool,
    pub memory: bool,
}

impl Default for PenaltyMask {
    fn default() -> Self {
        PenaltyMask::ALL
    }
}

impl PenaltyMask {
    pub const ALL: PenaltyMask = PenaltyMask {
        compute: true,
        memory: true,
    };
    pub const NO_COMPUTE: PenaltyMask = PenaltyMask {
        compute: false,
        memory: true,
    };
    pub const NO_MEMORY: PenaltyMask = PenaltyMask {
        compute: true,
        memory: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatementCost {
    pub l_c: f64,
    pub l_m: f64,
    pub u_p: f64,
    pub u_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftCost {
    pub per_statement: Vec<StatementCost>,
    pub total: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Level {
    L0,
    L1,
}

fn check_shape(op: &TensorOpSpec, sched: &Schedule) -> Result<()> {
    let reductions = if op.kind == OpKind::Elementwise {
        0
    } else {
        op.reduction_axes.len()
    };
    if sched.spatial.len() != op.spatial_axes.len() || sched.reduction.len() != reductions {
        return Err(Error::SketchMismatch(format!(
            "op {} has {} spatial / {} reduction axes, schedule has {} / {}",
            op.name,
            op.spatial_axes.len(),
            reductions,
            sched.spatial.len(),
            sched.reduction.len()
        )));
    }
    for (axis, t) in op.spatial_axes.iter().zip(&sched.spatial) {
        if t.iter().product::<u64>() != axis.extent {
            return Err(Error::SketchMismatch(format!("axis {} factors {:?}", axis.name, t)));
        }
    }
    for (axis, t) in op.reduction_axes.iter().zip(&sched.reduction) {
        if t.iter().product::<u64>() != axis.extent {
            return Err(Error::SketchMismatch(format!("axis {} factors {:?}", axis.name, t)));
        }
    }
    Ok(())
}

fn tile(sched: &Schedule, axis: AxisRef, level: Level) -> u64 {
    match axis {
        AxisRef::Spatial(i) => {
            let [_, t, o, v] = sched.spatial[i];
            match level {
                Level::L0 => o * v,
                Level::L1 => t * o * v,
            }
        }
        AxisRef::Reduction(i) => match level {
            Level::L0 => 1,
            // element-wise ops carry no reduction split
            Level::L1 => sched.reduction.get(i).map_or(1, |r| r[1] * r[2]),
        },
    }
}

fn axis_of(op: &TensorOpSpec, name: &str) -> AxisRef {
    op.axis(name).expect("validated buffer axis")
}

fn footprint(op: &TensorOpSpec, sched: &Schedule, buf: &BufferSpec, level: Level) -> u64 {
    buf.axes
        .iter()
        .map(|a| tile(sched, axis_of(op, a), level))
        .product()
}

fn innermost(op: &TensorOpSpec, sched: &Schedule, buf: &BufferSpec, level: Level) -> u64 {
    let last = buf.axes.last().expect("non-empty buffer axes");
    tile(sched, axis_of(op, last), level)
}

/// Statement list in traversal order.
pub fn statements(op: &TensorOpSpec) -> Vec<StatementDesc> {
    let mut out = Vec::new();
    let inputs: Vec<usize> = op.inputs().map(|(i, _)| i).collect();
    for &b in &inputs {
        out.push(StatementDesc {
            kind: StatementKind::LoadL2ToL1,
            buffer: Some(b),
        });
    }
    if op.kind == OpKind::Tiled {
        for &b in &inputs {
            out.push(StatementDesc {
                kind: StatementKind::LoadL1ToL0,
                buffer: Some(b),
            });
        }
    }
    out.push(StatementDesc {
        kind: StatementKind::ComputeL0,
        buffer: None,
    });
    out.push(StatementDesc {
        kind: StatementKind::StoreL0ToL2,
        buffer: Some(op.output_index()),
    });
    out
}

/// Per-statement symbols for `sched`.
///
/// Element-wise ops (trivial sketch) stage nothing in L0/L1, so `s1` and
/// `s3` are 0 and there are no L1->L0 loads.
pub fn extract_symbols(op: &TensorOpSpec, sched: &Schedule) -> Result<Vec<(StatementDesc, SymbolSet)>> {
    check_shape(op, sched)?;
    let staged = op.kind == OpKind::Tiled;
    let out_buf = op.output();

    let s1 = if staged {
        footprint(op, sched, out_buf, Level::L0)
            + op
                .inputs()
                .map(|(_, b)| footprint(op, sched, b, Level::L0))
                .sum::<u64>()
    } else {
        0
    };
    let per_lane: u64 = sched.spatial.iter().map(|t| t[2] * t[3]).product();
    let reduction_volume: u64 = op.reduction_axes.iter().map(|a| a.extent).product();
    let s2 = per_lane * reduction_volume;
    let s3 = if staged {
        op.inputs()
            .map(|(_, b)| footprint(op, sched, b, Level::L1))
            .sum()
    } else {
        0
    };
    let s4: u64 = sched.spatial.iter().map(|t| t[1]).product();
    let s6: u64 = sched.spatial.iter().map(|t| t[0]).product();
    let outer_steps: u64 = sched.reduction.iter().map(|r| r[0]).product();
    let global = SymbolSet {
        s1,
        s2,
        s3,
        s4,
        s6,
        ..SymbolSet::default()
    };

    Ok(statements(op)
        .into_iter()
        .map(|desc| {
            let mut sym = global;
            let buf = desc.buffer.map(|b| &op.buffers[b]);
            match desc.kind {
                StatementKind::LoadL2ToL1 => {
                    let buf = buf.expect("load has a buffer");
                    sym.s5 = footprint(op, sched, buf, Level::L1) * s6 * outer_steps;
                    sym.s7 = innermost(op, sched, buf, Level::L1);
                }
                StatementKind::LoadL1ToL0 => {
                    sym.s7 = innermost(op, sched, buf.expect("load has a buffer"), Level::L0);
                }
                StatementKind::ComputeL0 => {
                    sym.s8 = flops_of(op);
                }
                StatementKind::StoreL0ToL2 => {
                    sym.s5 = op.spatial_volume();
                    sym.s7 = innermost(op, sched, buf.expect("store has a buffer"), Level::L0);
                }
            }
            (desc, sym)
        })
        .collect())
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Utilization of `units` parallel slots by `work` items.
fn fill_ratio(work: u64, units: u64) -> f64 {
    if work == 0 {
        return 1.0;
    }
    work as f64 / (ceil_div(work, units) * units) as f64
}

pub fn compute_penalties(sym: &SymbolSet, device: &DeviceSpec) -> PenaltySet {
    compute_penalties_masked(sym, device, PenaltyMask::ALL)
}

pub fn compute_penalties_masked(sym: &SymbolSet, device: &DeviceSpec, mask: PenaltyMask) -> PenaltySet {
    let (p_l0_m, p_l0_c) = if sym.s1 == 0 {
        (1.0, 1.0)
    } else {
        let s1 = sym.s1 as f64;
        ((device.m_l0 as f64 / s1).min(1.0), 1.0 + sym.s2 as f64 / s1)
    };
    let p_l1_m = if sym.s3 == 0 {
        1.0
    } else {
        (device.m_l1 as f64 / sym.s3 as f64).min(1.0)
    };
    let sch_l1 = ceil_div(sym.s4, device.n_l1);
    let p_l1_c = fill_ratio(sch_l1, device.pu_l1);
    let alpha_l1 = if sym.s4 == 0 {
        1.0
    } else {
        sym.s4 as f64 / (sch_l1 * device.n_l1) as f64
    };
    let p_l2_c = fill_ratio(sym.s6, device.pu_l2);
    let p_l2_m = fill_ratio(sym.s7, device.n_l2);

    let mut p = PenaltySet {
        p_l0_m,
        p_l0_c,
        p_l1_m,
        p_l1_c,
        alpha_l1,
        p_l2_c,
        p_l2_m,
    };
    if !mask.compute {
        p.p_l0_c = 1.0;
        p.p_l1_c = 1.0;
        p.alpha_l1 = 1.0;
        p.p_l2_c = 1.0;
    }
    if !mask.memory {
        p.p_l0_m = 1.0;
        p.p_l1_m = 1.0;
        p.p_l2_m = 1.0;
    }
    p
}

fn statement_cost(sym: &SymbolSet, device: &DeviceSpec, mask: PenaltyMask) -> StatementCost {
    let p = compute_penalties_masked(sym, device, mask);
    let u_p = device.t_p * p.compute_factor();
    let u_m = device.t_m * p.memory_factor();
    let l_c = if sym.s8 == 0 { 0.0 } else { sym.s8 as f64 / u_p };
    let l_m = if sym.s5 == 0 { 0.0 } else { sym.s5 as f64 / u_m };
    StatementCost { l_c, l_m, u_p, u_m }
}

/// Draft latency of a schedule in seconds, with per-statement terms.
pub fn sa_cost(op: &TensorOpSpec, sched: &Schedule, device: &DeviceSpec) -> Result<DraftCost> {
    sa_cost_masked(op, sched, device, PenaltyMask::ALL)
}

pub fn sa_cost_masked(
    op: &TensorOpSpec,
    sched: &Schedule,
    device: &DeviceSpec,
    mask: PenaltyMask,
) -> Result<DraftCost> {
    let per_statement: Vec<StatementCost> = extract_symbols(op, sched)?
        .iter()
        .map(|(_, sym)| statement_cost(sym, device, mask))
        .collect();
    let total = per_statement.iter().map(|c| c.l_c + c.l_m).sum();
    Ok(DraftCost { per_statement, total })
}

/// Total draft latency only. Panics on a schedule that does not fit `op`.
pub fn draft_total(op: &TensorOpSpec, sched: &Schedule, device: &DeviceSpec, mask: PenaltyMask) -> f64 {
    sa_cost_masked(op, sched, device, mask)
        .expect("schedule instantiated from the op's sketch")
        .total
}

/// Draft costs of a whole population, evaluated in parallel, in input order.
pub fn draft_costs(op: &TensorOpSpec, population: &[Schedule], device: &DeviceSpec, mask: PenaltyMask) -> Vec<f64> {
    population
        .par_iter()
        .map(|s| draft_total(op, s, device, mask))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExploreConfig {
    pub n_steps: usize,
    pub draft_size: usize,
    pub pop_size: usize,
    pub mask: PenaltyMask,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            n_steps: 32,
            draft_size: 512,
            pop_size: 512,
            mask: PenaltyMask::ALL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DraftedSchedule {
    pub schedule: Schedule,
    pub draft_cost: f64,
}

#[derive(Clone, Debug)]
pub struct Exploration {
    pub sketch: Sketch,
    /// Lowest-draft-cost unique schedules, ascending.
    pub s_spec: Vec<DraftedSchedule>,
    /// Number of draft-model evaluations performed.
    pub draft_evaluations: usize,
}

/// Keeps the `capacity` lowest-cost unique schedules seen so far. Ties keep
/// the earlier discovery.
#[derive(Clone, Debug)]
pub struct PriorFilter {
    capacity: usize,
    kept: Vec<(f64, u64, Schedule)>,
    seen: HashSet<Schedule>,
    discovered: u64,
}

impl PriorFilter {
    pub fn new(capacity: usize) -> Self {
        PriorFilter {
            capacity,
            kept: Vec::new(),
            seen: HashSet::new(),
            discovered: 0,
        }
    }

    pub fn merge(&mut self, population: &[Schedule], costs: &[f64]) {
        for (sched, &cost) in population.iter().zip(costs) {
            if self.seen.insert(sched.clone()) {
                self.kept.push((cost, self.discovered, sched.clone()));
                self.discovered += 1;
            }
        }
        self.kept
            .sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        self.kept.truncate(self.capacity);
    }

    pub fn best_cost(&self) -> Option<f64> {
        self.kept.first().map(|k| k.0)
    }

    pub fn into_sorted(self) -> Vec<DraftedSchedule> {
        self.kept
            .into_iter()
            .map(|(draft_cost, _, schedule)| DraftedSchedule { schedule, draft_cost })
            .collect()
    }
}

/// Latent schedule explorer: GA over draft cost, returning `S_spec`.
pub fn explore<R: Rng + ?Sized>(
    op: &TensorOpSpec,
    device: &DeviceSpec,
    cfg: &ExploreConfig,
    rng: &mut R,
) -> Result<Exploration> {
    let sketch = generate_sketch_or_trivial(op);
    explore_with(&sketch, device, cfg, rng, |_, _| {})
}

/// [`explore`] over a given sketch. `on_generation` sees every evaluated
/// population together with its draft costs.
pub fn explore_with<R, F>(
    sketch: &Sketch,
    device: &DeviceSpec,
    cfg: &ExploreConfig,
    rng: &mut R,
    mut on_generation: F,
) -> Result<Exploration>
where
    R: Rng + ?Sized,
    F: FnMut(&[Schedule], &[f64]),
{
    if cfg.n_steps == 0 || cfg.draft_size == 0 || cfg.pop_size < 2 {
        return Err(Error::Input(format!(
            "explorer needs n_steps >= 1, draft_size >= 1, pop_size >= 2 (got {}, {}, {})",
            cfg.n_steps, cfg.draft_size, cfg.pop_size
        )));
    }
    let op = &sketch.op;
    let mut filter = PriorFilter::new(cfg.draft_size);
    let mut population = random_init(sketch, cfg.pop_size, rng);
    let mut evaluations = 0;
    for step in 0..cfg.n_steps {
        let costs = draft_costs(op, &population, device, cfg.mask);
        evaluations += costs.len();
        on_generation(&population, &costs);
        filter.merge(&population, &costs);
        if step + 1 < cfg.n_steps {
            population = mutate(&population, sketch, &costs, rng);
        }
    }
    Ok(Exploration {
        sketch: sketch.clone(),
        s_spec: filter.into_sorted(),
        draft_evaluations: evaluations,
    })
}
