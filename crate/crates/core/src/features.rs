//! Hybrid features for the learned cost model.
//!
//! Two views of a schedule:
//!
//! * one 24-slot statement vector per innermost statement, built from the
//!   analyzer's symbols and penalties;
//! * a sequence of 23-slot dataflow blocks, one per data movement between
//!   memory levels, in statement traversal order. The compute statement
//!   contributes one block per input operand plus an intra-L0 accumulator
//!   block.
//!
//! Dataflow block layout (0-based):
//!
//! | slots | content |
//! |-------|---------|
//! | 0-5   | flow one-hot: L2->L1, L1->L0, L0->compute, L0->L2, L1->L2, intra-L0 |
//! | 6-8   | access one-hot: read, write, read-write |
//! | 9     | log1p(allocation at destination, elements) |
//! | 10    | log1p(transfer volume, elements) |
//! | 11    | log1p(reuse = element touches / distinct elements) |
//! | 12    | log1p(innermost access stride) |
//! | 13    | contiguity flag |
//! | 14    | log1p(fused ops per transferred element) |
//! | 15    | log1p(lanes participating) |
//! | 16    | log1p(elements per lane) |
//! | 17    | buffer rank / 8 |
//! | 18    | enclosing non-trivial loops / 16 |
//! | 19    | reduction-carried flag |
//! | 20    | log1p(unroll) |
//! | 21    | log1p(innermost transfer extent) |
//! | 22    | constant 1 |
//!
//! Statement layout: slots 0-7 `log1p(s1..s8)`; 8-14 the penalties
//! `p_l0_m, log1p(p_l0_c), p_l1_m, p_l1_c, alpha_l1, p_l2_c, p_l2_m`;
//! 15 `log1p(flops)`; 16 `log1p(total L2 traffic)`; 17
//! `log1p(s8 / max(s5, 1))`; 18 `s4 / 1024`; 19 `log1p(s6) / 8`; 20
//! `log1p(unroll)`; 21 fused element-wise stages; 22
//! `log1p(innermost register tile)`; 23 constant 1.
//!
//! Pure element-wise ops get a single zero block with only the bias set.

use serde::{Deserialize, Serialize};

use crate::analyzer::{compute_penalties, extract_symbols, StatementKind};
use crate::error::Result;
use crate::problem::{flops_of, AxisRef, BufferSpec, DeviceSpec, OpKind, TensorOpSpec};
use crate::schedule::Schedule;

pub const STATEMENT_WIDTH: usize = 24;
pub const DATAFLOW_WIDTH: usize = 23;

pub type StatementFeature = [f64; STATEMENT_WIDTH];
pub type DataflowBlockFeature = [f64; DATAFLOW_WIDTH];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridFeature {
    pub statements: Vec<StatementFeature>,
    pub dataflow: Vec<DataflowBlockFeature>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    L2ToL1 = 0,
    L1ToL0 = 1,
    L0ToCompute = 2,
    L0ToL2 = 3,
    L1ToL2 = 4,
    IntraL0 = 5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    Read = 0,
    Write = 1,
    ReadWrite = 2,
}

fn ln1p(x: f64) -> f64 {
    x.max(0.0).ln_1p()
}

struct Block {
    flow: Flow,
    access: Access,
    alloc: f64,
    volume: f64,
    distinct: f64,
    stride: f64,
    contiguous: bool,
    lanes: f64,
    rank: usize,
    depth: usize,
    reduction_carried: bool,
    innermost: f64,
}

impl Block {
    fn encode(&self, flops: f64, unroll: u32) -> DataflowBlockFeature {
        let mut f = [0.0; DATAFLOW_WIDTH];
        f[self.flow as usize] = 1.0;
        f[6 + self.access as usize] = 1.0;
        f[9] = ln1p(self.alloc);
        f[10] = ln1p(self.volume);
        f[11] = ln1p(self.volume / self.distinct.max(1.0));
        f[12] = ln1p(self.stride);
        f[13] = if self.contiguous { 1.0 } else { 0.0 };
        f[14] = ln1p(flops / self.volume.max(1.0));
        f[15] = ln1p(self.lanes);
        f[16] = ln1p(self.volume / self.lanes.max(1.0));
        f[17] = self.rank as f64 / 8.0;
        f[18] = self.depth as f64 / 16.0;
        f[19] = if self.reduction_carried { 1.0 } else { 0.0 };
        f[20] = ln1p(unroll as f64);
        f[21] = ln1p(self.innermost);
        f[22] = 1.0;
        f
    }
}

/// The zero-padded block used for pure element-wise ops.
pub fn padding_block() -> DataflowBlockFeature {
    let mut f = [0.0; DATAFLOW_WIDTH];
    f[22] = 1.0;
    f
}

// Tile extent of one axis at L0 (0), L1 (1) or L2 (2).
fn tile(op: &TensorOpSpec, sched: &Schedule, axis: AxisRef, level: u8) -> u64 {
    match axis {
        AxisRef::Spatial(i) => {
            let [_, t, o, v] = sched.spatial[i];
            match level {
                0 => o * v,
                1 => t * o * v,
                _ => op.spatial_axes[i].extent,
            }
        }
        AxisRef::Reduction(i) => match level {
            0 => 1,
            1 => sched.reduction.get(i).map_or(1, |r| r[1] * r[2]),
            _ => op.reduction_axes[i].extent,
        },
    }
}

fn footprint(op: &TensorOpSpec, sched: &Schedule, buf: &BufferSpec, level: u8) -> u64 {
    buf.axes
        .iter()
        .map(|a| tile(op, sched, op.axis(a).expect("validated axis"), level))
        .product()
}

fn last_extent(op: &TensorOpSpec, sched: &Schedule, buf: &BufferSpec, level: u8) -> u64 {
    let last = buf.axes.last().expect("non-empty buffer");
    tile(op, sched, op.axis(last).expect("validated axis"), level)
}

// Loop nest: b, t, ra | L2->L1 loads | rb | L1->L0 loads | o, rc, v | compute.
// The store sits under b, t, o, v after the reduction loops close.
struct LoopDepths {
    l2_load: usize,
    l1_load: usize,
    compute: usize,
    store: usize,
}

fn loop_depths(sched: &Schedule) -> LoopDepths {
    let nontrivial = |it: &mut dyn Iterator<Item = u64>| it.filter(|&f| f > 1).count();
    let blocks_threads = nontrivial(&mut sched.spatial.iter().flat_map(|t| [t[0], t[1]]));
    let ra = nontrivial(&mut sched.reduction.iter().map(|r| r[0]));
    let rb = nontrivial(&mut sched.reduction.iter().map(|r| r[1]));
    let rc = nontrivial(&mut sched.reduction.iter().map(|r| r[2]));
    let registers = nontrivial(&mut sched.spatial.iter().flat_map(|t| [t[2], t[3]]));
    LoopDepths {
        l2_load: blocks_threads + ra,
        l1_load: blocks_threads + ra + rb,
        compute: blocks_threads + ra + rb + rc + registers,
        store: blocks_threads + registers,
    }
}

pub fn extract_features(op: &TensorOpSpec, sched: &Schedule, device: &DeviceSpec) -> Result<HybridFeature> {
    let syms = extract_symbols(op, sched)?;
    let flops = flops_of(op) as f64;
    let total_traffic: u64 = syms.iter().map(|(_, s)| s.s5).sum();
    let inner_tile: u64 = sched.spatial.iter().map(|t| t[3]).product::<u64>()
        * sched.reduction.iter().map(|r| r[2]).product::<u64>();

    let statements = syms
        .iter()
        .map(|(desc, s)| {
            let p = compute_penalties(s, device);
            let mut f = [0.0; STATEMENT_WIDTH];
            for (slot, v) in [s.s1, s.s2, s.s3, s.s4, s.s5, s.s6, s.s7, s.s8].into_iter().enumerate() {
                f[slot] = ln1p(v as f64);
            }
            f[8] = p.p_l0_m;
            f[9] = ln1p(p.p_l0_c);
            f[10] = p.p_l1_m;
            f[11] = p.p_l1_c;
            f[12] = p.alpha_l1;
            f[13] = p.p_l2_c;
            f[14] = p.p_l2_m;
            f[15] = ln1p(flops);
            f[16] = ln1p(total_traffic as f64);
            f[17] = ln1p(s.s8 as f64 / s.s5.max(1) as f64);
            f[18] = s.s4 as f64 / 1024.0;
            f[19] = ln1p(s.s6 as f64) / 8.0;
            f[20] = ln1p(sched.unroll as f64);
            f[21] = op.fused_elementwise as f64;
            f[22] = if desc.kind == StatementKind::ComputeL0 {
                ln1p(inner_tile as f64)
            } else {
                0.0
            };
            f[23] = 1.0;
            f
        })
        .collect();

    if op.kind == OpKind::Elementwise {
        return Ok(HybridFeature {
            statements,
            dataflow: vec![padding_block()],
        });
    }

    let s4 = syms[0].1.s4 as f64;
    let lanes = s4 * syms[0].1.s6 as f64;
    let reduction_volume: f64 = op.reduction_axes.iter().map(|a| a.extent as f64).product();
    let has_reduction = !op.reduction_axes.is_empty();
    let depth = loop_depths(sched);
    let out = op.output();

    let mut dataflow = Vec::new();
    for (desc, sym) in &syms {
        let buf = desc.buffer.map(|b| &op.buffers[b]);
        match desc.kind {
            StatementKind::LoadL2ToL1 => {
                let buf = buf.expect("load buffer");
                let pitch = last_extent(op, sched, buf, 2) as f64;
                dataflow.push(Block {
                    flow: Flow::L2ToL1,
                    access: Access::Read,
                    alloc: footprint(op, sched, buf, 1) as f64,
                    volume: sym.s5 as f64,
                    distinct: op.buffer_size(buf) as f64,
                    stride: pitch,
                    contiguous: sym.s7 % device.n_l2 == 0 || sym.s7 as f64 == pitch,
                    lanes,
                    rank: buf.axes.len(),
                    depth: depth.l2_load,
                    reduction_carried: has_reduction,
                    innermost: sym.s7 as f64,
                });
            }
            StatementKind::LoadL1ToL0 => {
                let buf = buf.expect("load buffer");
                let l0 = footprint(op, sched, buf, 0) as f64;
                let pitch = last_extent(op, sched, buf, 1) as f64;
                let staged = footprint(op, sched, buf, 1) as f64
                    * syms[0].1.s6 as f64
                    * sched.reduction.iter().map(|r| r[0] as f64).product::<f64>();
                dataflow.push(Block {
                    flow: Flow::L1ToL0,
                    access: Access::Read,
                    alloc: l0,
                    volume: l0 * lanes * reduction_volume,
                    distinct: staged,
                    stride: pitch,
                    contiguous: sym.s7 % device.n_l2 == 0 || sym.s7 as f64 == pitch,
                    lanes,
                    rank: buf.axes.len(),
                    depth: depth.l1_load,
                    reduction_carried: has_reduction,
                    innermost: sym.s7 as f64,
                });
            }
            StatementKind::ComputeL0 => {
                for (_, input) in op.inputs() {
                    let l0 = footprint(op, sched, input, 0) as f64;
                    dataflow.push(Block {
                        flow: Flow::L0ToCompute,
                        access: Access::Read,
                        alloc: l0,
                        volume: flops,
                        distinct: l0 * lanes * reduction_volume,
                        stride: last_extent(op, sched, input, 0) as f64,
                        contiguous: true,
                        lanes,
                        rank: input.axes.len(),
                        depth: depth.compute,
                        reduction_carried: has_reduction,
                        innermost: last_extent(op, sched, input, 0) as f64,
                    });
                }
                dataflow.push(Block {
                    flow: Flow::IntraL0,
                    access: Access::ReadWrite,
                    alloc: footprint(op, sched, out, 0) as f64,
                    volume: flops,
                    distinct: op.spatial_volume() as f64,
                    stride: last_extent(op, sched, out, 0) as f64,
                    contiguous: true,
                    lanes,
                    rank: out.axes.len(),
                    depth: depth.compute,
                    reduction_carried: has_reduction,
                    innermost: inner_tile as f64,
                });
            }
            StatementKind::StoreL0ToL2 => {
                let pitch = last_extent(op, sched, out, 2) as f64;
                dataflow.push(Block {
                    flow: Flow::L0ToL2,
                    access: Access::Write,
                    alloc: op.buffer_size(out) as f64,
                    volume: sym.s5 as f64,
                    distinct: op.buffer_size(out) as f64,
                    stride: pitch,
                    contiguous: sym.s7 % device.n_l2 == 0 || sym.s7 as f64 == pitch,
                    lanes,
                    rank: out.axes.len(),
                    depth: depth.store,
                    reduction_carried: false,
                    innermost: sym.s7 as f64,
                });
            }
        }
    }
    let dataflow = dataflow.iter().map(|b| b.encode(flops, sched.unroll)).collect();
    Ok(HybridFeature { statements, dataflow })
}

impl HybridFeature {
    /// All slots, statements first, for equality and hashing in tests.
    pub fn flatten(&self) -> Vec<f64> {
        self.statements
            .iter()
            .flat_map(|s| s.iter().copied())
            .chain(self.dataflow.iter().flat_map(|d| d.iter().copied()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{gemm, BufferIo};
    use crate::schedule::{generate_sketch, generate_sketch_or_trivial};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn device() -> DeviceSpec {
        DeviceSpec {
            m_l0: 256,
            m_l1: 12288,
            pu_l1: 4,
            n_l1: 32,
            pu_l2: 8,
            n_l2: 32,
            t_p: 1.0e12,
            t_m: 1.0e11,
            element_bytes: 4,
        }
    }

    #[test]
    fn reference_block_count() {
        let op = gemm("g", 128, 128, 128);
        let s = Schedule { spatial: vec![[4, 8, 2, 2], [4, 8, 2, 2]], reduction: vec![[4, 8, 4]], unroll: 1 };
        let f = extract_features(&op, &s, &device()).unwrap();
        assert_eq!(f.dataflow.len(), 8);
        assert_eq!(f.statements.len(), 6);
        let flows: Vec<usize> = f
            .dataflow
            .iter()
            .map(|b| b[..6].iter().position(|&x| x == 1.0).unwrap())
            .collect();
        assert_eq!(flows, [0, 0, 1, 1, 2, 2, 5, 3]);
        for b in &f.dataflow {
            assert_eq!(b[..6].iter().sum::<f64>(), 1.0);
            assert_eq!(b[6..9].iter().sum::<f64>(), 1.0);
            assert!(b.iter().all(|x| x.is_finite() && *x >= 0.0));
        }
    }

    #[test]
    fn elementwise_gets_padding_block() {
        let mut op = gemm("relu", 64, 64, 1);
        op.reduction_axes.clear();
        op.buffers.retain(|b| b.name != "B");
        op.buffers[0].axes = vec!["m".into(), "n".into()];
        op.kind = OpKind::Elementwise;
        assert_eq!(op.buffers[1].io, BufferIo::Output);
        op.validate().unwrap();
        let s = generate_sketch_or_trivial(&op).random_schedule(&mut ChaCha8Rng::seed_from_u64(0));
        let f = extract_features(&op, &s, &device()).unwrap();
        assert_eq!(f.dataflow, vec![padding_block()]);
        assert_eq!(f.dataflow[0].iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn distinct_schedules_have_distinct_features() {
        let op = gemm("g", 128, 128, 128);
        let sketch = generate_sketch(&op).unwrap();
        let d = device();
        let a = Schedule { spatial: vec![[4, 8, 2, 2], [4, 8, 2, 2]], reduction: vec![[4, 8, 4]], unroll: 1 };
        let b = Schedule { spatial: vec![[4, 8, 4, 1], [4, 8, 2, 2]], reduction: vec![[4, 8, 4]], unroll: 1 };
        assert_ne!(
            extract_features(&op, &a, &d).unwrap().flatten(),
            extract_features(&op, &b, &d).unwrap().flatten()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let x = sketch.random_schedule(&mut rng);
            let y = sketch.random_schedule(&mut rng);
            if x == y {
                continue;
            }
            assert_ne!(
                extract_features(&op, &x, &d).unwrap().flatten(),
                extract_features(&op, &y, &d).unwrap().flatten(),
                "{x:?} vs {y:?}"
            );
        }
    }
}
