//! Tiling sketches and the concrete schedules instantiated from them.
//!
//! Spatial axes split four ways `(b, t, o, v)`: block, thread, outer register
//! tile and inner register tile. Reduction axes split three ways
//! `(ra, rb, rc)`: the outer step loop, the L1-staged tile and the innermost
//! slice. Only exact factorizations are admitted.

use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{OpKind, TensorOpSpec};

pub const DEFAULT_UNROLL_CHOICES: [u32; 3] = [1, 4, 16];

/// Added to draft costs before inverting them into GA fitness.
pub const FITNESS_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AxisSlot {
    pub name: String,
    pub extent: u64,
    /// Number of tiling levels this axis is split into.
    pub arity: usize,
}

/// Split structure of one operator. Each slot also carries the list of its
/// admissible ordered factorizations, in lexicographic order.
#[derive(Clone, Debug)]
pub struct Sketch {
    pub op: TensorOpSpec,
    pub spatial: Vec<AxisSlot>,
    pub reduction: Vec<AxisSlot>,
    pub unroll_choices: Vec<u32>,
    /// Degenerate `(b, t)` sketch used for element-wise ops.
    pub trivial: bool,
    spatial_choices: Vec<Vec<[u64; 4]>>,
    reduction_choices: Vec<Vec<[u64; 3]>>,
}

/// One concrete point of the search space.
///
/// Trivial sketches store spatial tuples as `[b, t, 1, 1]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Schedule {
    pub spatial: Vec<[u64; 4]>,
    pub reduction: Vec<[u64; 3]>,
    pub unroll: u32,
}

/// Ordered `k`-way factorizations of `n`, lexicographic by leading factor.
pub fn ordered_factorizations(n: u64, k: usize) -> Vec<Vec<u64>> {
    assert!(n >= 1 && k >= 1);
    if k == 1 {
        return vec![vec![n]];
    }
    let mut out = Vec::new();
    for d in divisors(n) {
        for mut rest in ordered_factorizations(n / d, k - 1) {
            rest.insert(0, d);
            out.push(rest);
        }
    }
    out
}

fn divisors(n: u64) -> Vec<u64> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

/// Prime factors with multiplicity, ascending.
pub fn prime_factors(mut n: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

pub fn generate_sketch(op: &TensorOpSpec) -> Result<Sketch> {
    if op.kind == OpKind::Elementwise {
        return Err(Error::ElementwiseSketch);
    }
    Ok(build_sketch(op, false, DEFAULT_UNROLL_CHOICES.to_vec()))
}

/// Like [`generate_sketch`], but element-wise ops fall back to the trivial
/// `(b, t)` sketch instead of failing.
pub fn generate_sketch_or_trivial(op: &TensorOpSpec) -> Sketch {
    match op.kind {
        OpKind::Tiled => build_sketch(op, false, DEFAULT_UNROLL_CHOICES.to_vec()),
        OpKind::Elementwise => build_sketch(op, true, vec![1]),
    }
}

fn build_sketch(op: &TensorOpSpec, trivial: bool, unroll_choices: Vec<u32>) -> Sketch {
    let spatial_arity = if trivial { 2 } else { 4 };
    let spatial: Vec<AxisSlot> = op
        .spatial_axes
        .iter()
        .map(|a| AxisSlot {
            name: a.name.clone(),
            extent: a.extent,
            arity: spatial_arity,
        })
        .collect();
    let reduction: Vec<AxisSlot> = if trivial {
        Vec::new()
    } else {
        op.reduction_axes
            .iter()
            .map(|a| AxisSlot {
                name: a.name.clone(),
                extent: a.extent,
                arity: 3,
            })
            .collect()
    };
    let spatial_choices = spatial
        .iter()
        .map(|slot| {
            ordered_factorizations(slot.extent, slot.arity)
                .into_iter()
                .map(|f| {
                    let mut t = [1u64; 4];
                    t[..f.len()].copy_from_slice(&f);
                    t
                })
                .collect()
        })
        .collect();
    let reduction_choices = reduction
        .iter()
        .map(|slot| {
            ordered_factorizations(slot.extent, 3)
                .into_iter()
                .map(|f| [f[0], f[1], f[2]])
                .collect()
        })
        .collect();
    Sketch {
        op: op.clone(),
        spatial,
        reduction,
        unroll_choices,
        trivial,
        spatial_choices,
        reduction_choices,
    }
}

impl Sketch {
    pub fn with_unroll_choices(mut self, choices: Vec<u32>) -> Self {
        assert!(!choices.is_empty());
        self.unroll_choices = choices;
        self
    }

    pub fn spatial_choices(&self, axis: usize) -> &[[u64; 4]] {
        &self.spatial_choices[axis]
    }

    pub fn reduction_choices(&self, axis: usize) -> &[[u64; 3]] {
        &self.reduction_choices[axis]
    }

    /// Exact number of distinct schedules.
    pub fn space_size(&self) -> u128 {
        let mut size = self.unroll_choices.len() as u128;
        for c in &self.spatial_choices {
            size = size.saturating_mul(c.len() as u128);
        }
        for c in &self.reduction_choices {
            size = size.saturating_mul(c.len() as u128);
        }
        size
    }

    pub fn check(&self, sched: &Schedule) -> Result<()> {
        if sched.spatial.len() != self.spatial.len() || sched.reduction.len() != self.reduction.len() {
            return Err(Error::SketchMismatch(format!(
                "expected {} spatial and {} reduction tuples, got {} and {}",
                self.spatial.len(),
                self.reduction.len(),
                sched.spatial.len(),
                sched.reduction.len()
            )));
        }
        for (slot, t) in self.spatial.iter().zip(&sched.spatial) {
            let product: u64 = t.iter().product();
            if t.contains(&0) || product != slot.extent {
                return Err(Error::SketchMismatch(format!(
                    "axis {} factors {:?} do not multiply to {}",
                    slot.name, t, slot.extent
                )));
            }
            if slot.arity == 2 && (t[2] != 1 || t[3] != 1) {
                return Err(Error::SketchMismatch(format!(
                    "axis {} only admits a (b, t) split",
                    slot.name
                )));
            }
        }
        for (slot, t) in self.reduction.iter().zip(&sched.reduction) {
            let product: u64 = t.iter().product();
            if t.contains(&0) || product != slot.extent {
                return Err(Error::SketchMismatch(format!(
                    "axis {} factors {:?} do not multiply to {}",
                    slot.name, t, slot.extent
                )));
            }
        }
        if !self.unroll_choices.contains(&sched.unroll) {
            return Err(Error::SketchMismatch(format!(
                "unroll {} not in {:?}",
                sched.unroll, self.unroll_choices
            )));
        }
        Ok(())
    }

    pub fn random_schedule<R: Rng + ?Sized>(&self, rng: &mut R) -> Schedule {
        let spatial = self
            .spatial_choices
            .iter()
            .map(|c| c[rng.random_range(0..c.len())])
            .collect();
        let reduction = self
            .reduction_choices
            .iter()
            .map(|c| c[rng.random_range(0..c.len())])
            .collect();
        let unroll = self.unroll_choices[rng.random_range(0..self.unroll_choices.len())];
        Schedule {
            spatial,
            reduction,
            unroll,
        }
    }

    /// Serializable form: axis name to factor tuple, plus unroll.
    pub fn to_record(&self, sched: &Schedule) -> ScheduleRecord {
        let mut factors = IndexMap::new();
        for (slot, t) in self.spatial.iter().zip(&sched.spatial) {
            factors.insert(slot.name.clone(), t[..slot.arity].to_vec());
        }
        for (slot, t) in self.reduction.iter().zip(&sched.reduction) {
            factors.insert(slot.name.clone(), t.to_vec());
        }
        ScheduleRecord {
            factors,
            unroll: sched.unroll,
        }
    }

    pub fn from_record(&self, record: &ScheduleRecord) -> Result<Schedule> {
        let lookup = |slot: &AxisSlot| {
            let f = record
                .factors
                .get(&slot.name)
                .ok_or_else(|| Error::SketchMismatch(format!("missing factors for axis {}", slot.name)))?;
            if f.len() != slot.arity {
                return Err(Error::SketchMismatch(format!(
                    "axis {} expects {} factors, got {}",
                    slot.name,
                    slot.arity,
                    f.len()
                )));
            }
            Ok(f.clone())
        };
        let mut spatial = Vec::with_capacity(self.spatial.len());
        for slot in &self.spatial {
            let f = lookup(slot)?;
            let mut t = [1u64; 4];
            t[..f.len()].copy_from_slice(&f);
            spatial.push(t);
        }
        let mut reduction = Vec::with_capacity(self.reduction.len());
        for slot in &self.reduction {
            let f = lookup(slot)?;
            reduction.push([f[0], f[1], f[2]]);
        }
        if record.factors.len() != self.spatial.len() + self.reduction.len() {
            return Err(Error::SketchMismatch("record names axes the sketch does not have".into()));
        }
        let sched = Schedule {
            spatial,
            reduction,
            unroll: record.unroll,
        };
        self.check(&sched)?;
        Ok(sched)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub factors: IndexMap<String, Vec<u64>>,
    pub unroll: u32,
}

pub fn random_init<R: Rng + ?Sized>(sketch: &Sketch, n: usize, rng: &mut R) -> Vec<Schedule> {
    (0..n).map(|_| sketch.random_schedule(rng)).collect()
}

/// The whole space as a Cartesian product: the first spatial axis varies
/// slowest, then the remaining spatial axes, the reduction axes, and unroll
/// fastest. Each axis walks its factorizations in lexicographic order.
pub fn enumerate_all(sketch: &Sketch, cap: u128) -> Result<Vec<Schedule>> {
    let size = sketch.space_size();
    if size > cap {
        return Err(Error::SpaceTooLarge { size, cap });
    }
    let mut radices: Vec<usize> = sketch.spatial_choices.iter().map(Vec::len).collect();
    radices.extend(sketch.reduction_choices.iter().map(Vec::len));
    radices.push(sketch.unroll_choices.len());
    let ns = sketch.spatial.len();
    let nr = sketch.reduction.len();

    let mut out = Vec::with_capacity(size as usize);
    let mut digits = vec![0usize; radices.len()];
    loop {
        out.push(Schedule {
            spatial: (0..ns).map(|i| sketch.spatial_choices[i][digits[i]]).collect(),
            reduction: (0..nr)
                .map(|i| sketch.reduction_choices[i][digits[ns + i]])
                .collect(),
            unroll: sketch.unroll_choices[digits[ns + nr]],
        });
        let mut pos = radices.len();
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < radices[pos] {
                break;
            }
            digits[pos] = 0;
        }
    }
}

/// One generation of the tiling-factor GA.
///
/// Parents are drawn with probability proportional to `1 / (cost + eps)`.
/// Each child moves one prime factor between two levels of a single axis or
/// resamples the unroll value. With two or more members the lowest-cost
/// parent survives unchanged in slot 0.
pub fn mutate<R: Rng + ?Sized>(
    population: &[Schedule],
    sketch: &Sketch,
    costs: &[f64],
    rng: &mut R,
) -> Vec<Schedule> {
    assert!(!population.is_empty(), "population must be non-empty");
    assert_eq!(population.len(), costs.len(), "costs must align with population");
    let fitness: Vec<f64> = costs.iter().map(|c| 1.0 / (c.max(0.0) + FITNESS_EPS)).collect();
    let picker = WeightedIndex::new(&fitness).ok();

    let mut next = Vec::with_capacity(population.len());
    if population.len() >= 2 {
        let elite = costs
            .iter()
            .enumerate()
            .fold(0, |best, (i, c)| if *c < costs[best] { i } else { best });
        next.push(population[elite].clone());
    }
    while next.len() < population.len() {
        let parent = match &picker {
            Some(p) => p.sample(rng),
            None => rng.random_range(0..population.len()),
        };
        next.push(mutate_one(&population[parent], sketch, rng));
    }
    next
}

/// Applies a single tiling-factor transformation to a copy of `parent`.
pub fn mutate_one<R: Rng + ?Sized>(parent: &Schedule, sketch: &Sketch, rng: &mut R) -> Schedule {
    #[derive(Clone, Copy)]
    enum Site {
        Spatial(usize),
        Reduction(usize),
        Unroll,
    }
    let mut sites = Vec::new();
    sites.extend(
        sketch
            .spatial
            .iter()
            .enumerate()
            .filter(|(_, s)| s.extent > 1)
            .map(|(i, _)| Site::Spatial(i)),
    );
    sites.extend(
        sketch
            .reduction
            .iter()
            .enumerate()
            .filter(|(_, s)| s.extent > 1)
            .map(|(i, _)| Site::Reduction(i)),
    );
    if sketch.unroll_choices.len() > 1 {
        sites.push(Site::Unroll);
    }
    let mut child = parent.clone();
    if sites.is_empty() {
        return child;
    }
    match sites[rng.random_range(0..sites.len())] {
        Site::Spatial(i) => {
            let arity = sketch.spatial[i].arity;
            move_prime(&mut child.spatial[i][..arity], rng);
        }
        Site::Reduction(i) => move_prime(&mut child.reduction[i], rng),
        Site::Unroll => {
            child.unroll = sketch.unroll_choices[rng.random_range(0..sketch.unroll_choices.len())];
        }
    }
    child
}

fn move_prime<R: Rng + ?Sized>(tuple: &mut [u64], rng: &mut R) {
    let sources: Vec<usize> = (0..tuple.len()).filter(|&i| tuple[i] > 1).collect();
    if sources.is_empty() || tuple.len() < 2 {
        return;
    }
    let src = sources[rng.random_range(0..sources.len())];
    let primes = prime_factors(tuple[src]);
    let p = primes[rng.random_range(0..primes.len())];
    let mut dst = rng.random_range(0..tuple.len() - 1);
    if dst >= src {
        dst += 1;
    }
    tuple[src] /= p;
    tuple[dst] *= p;
}
