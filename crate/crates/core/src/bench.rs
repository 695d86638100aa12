//! Built-in benchmark fixtures: the reference device, simulated oracles and
//! small workloads whose schedule spaces can be enumerated exhaustively.

use crate::problem::{gemm, Axis, BufferIo, BufferSpec, DeviceSpec, OpKind, SubgraphTask, TensorOpSpec};
use crate::sim::OracleDevice;

/// The device the tuner sees.
pub fn reference_device() -> DeviceSpec {
    DeviceSpec {
        m_l0: 256,
        m_l1: 12288,
        pu_l1: 4,
        n_l1: 32,
        pu_l2: 8,
        n_l2: 32,
        t_p: 1e12,
        t_m: 1e11,
        element_bytes: 4,
    }
}

/// Simulated hardware behind [`reference_device`]: slightly different
/// capacities and rates plus stride and occupancy effects.
pub fn reference_oracle(noise_sigma: f64) -> OracleDevice {
    OracleDevice {
        hidden: DeviceSpec {
            m_l0: 224,
            t_p: 0.8e12,
            t_m: 1.2e11,
            ..reference_device()
        },
        stride_coeff: 0.5,
        occupancy_coeff: 1.0,
        launch_overhead_s: 1e-9,
        noise_sigma,
        seed: 0x5eed,
    }
}

/// The visible spec of the second platform.
pub fn shifted_device() -> DeviceSpec {
    DeviceSpec {
        m_l0: 192,
        m_l1: 8192,
        pu_l1: 4,
        n_l1: 32,
        pu_l2: 6,
        n_l2: 16,
        t_p: 2e12,
        t_m: 0.5e11,
        element_bytes: 4,
    }
}

/// Simulated hardware behind [`shifted_device`]: a platform with a
/// different balance of compute and memory, used as the adaptation target
/// of a model pre-trained on [`reference_oracle`].
pub fn shifted_oracle(noise_sigma: f64) -> OracleDevice {
    OracleDevice {
        hidden: DeviceSpec {
            m_l0: 160,
            t_p: 1.6e12,
            t_m: 0.6e11,
            ..shifted_device()
        },
        stride_coeff: 0.8,
        occupancy_coeff: 1.5,
        launch_overhead_s: 2e-9,
        noise_sigma,
        seed: 0xb0a7,
    }
}

fn buffer(name: &str, axes: &[&str], io: BufferIo) -> BufferSpec {
    BufferSpec {
        name: name.into(),
        axes: axes.iter().map(|s| s.to_string()).collect(),
        io,
    }
}

fn axis(name: &str, extent: u64) -> Axis {
    Axis {
        name: name.into(),
        extent,
    }
}

/// Matrix-vector product `y[i] += A[i, j] * x[j]`.
pub fn gemv(name: &str, rows: u64, cols: u64) -> TensorOpSpec {
    TensorOpSpec {
        name: name.into(),
        spatial_axes: vec![axis("i", rows)],
        reduction_axes: vec![axis("j", cols)],
        buffers: vec![
            buffer("A", &["i", "j"], BufferIo::Input),
            buffer("x", &["j"], BufferIo::Input),
            buffer("y", &["i"], BufferIo::Output),
        ],
        fused_elementwise: 0,
        kind: OpKind::Tiled,
    }
}

/// Convolution-like contraction
/// `O[co, h, w] += W[co, ci, kh] * I[ci, h, w]` (the input halo of the
/// sliding window is not modeled).
pub fn conv(name: &str, co: u64, h: u64, w: u64, ci: u64, kh: u64) -> TensorOpSpec {
    TensorOpSpec {
        name: name.into(),
        spatial_axes: vec![axis("co", co), axis("h", h), axis("w", w)],
        reduction_axes: vec![axis("ci", ci), axis("kh", kh)],
        buffers: vec![
            buffer("W", &["co", "ci", "kh"], BufferIo::Input),
            buffer("I", &["ci", "h", "w"], BufferIo::Input),
            buffer("O", &["co", "h", "w"], BufferIo::Output),
        ],
        fused_elementwise: 1,
        kind: OpKind::Tiled,
    }
}

/// Five ops whose full schedule spaces hold at most 50,000 points each.
pub fn enumerable_suite() -> Vec<TensorOpSpec> {
    vec![
        gemm("gemm_16x16x8", 16, 16, 8),
        gemm("gemm_32x8x8", 32, 8, 8),
        gemm("gemm_12x12x8", 12, 12, 8),
        conv("conv_8x4x2_4x3", 8, 4, 2, 4, 3),
        gemv("gemv_64x64", 64, 64),
    ]
}

/// A three-subgraph network with repeated layers.
pub fn synthetic_graph() -> Vec<SubgraphTask> {
    vec![
        SubgraphTask {
            op: gemm("dense_16x16x8", 16, 16, 8),
            weight: 3,
        },
        SubgraphTask {
            op: conv("conv_8x4x2_4x3", 8, 4, 2, 4, 3),
            weight: 2,
        },
        SubgraphTask {
            op: gemv("gemv_64x64", 64, 64),
            weight: 1,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::generate_sketch;

    #[test]
    fn suite_spaces_are_enumerable() {
        let sizes: Vec<u128> = enumerable_suite()
            .iter()
            .map(|op| generate_sketch(op).unwrap().space_size())
            .collect();
        assert_eq!(sizes, vec![36_750, 33_600, 48_000, 43_200, 7_056]);
        for op in enumerable_suite() {
            op.validate().unwrap();
        }
        reference_oracle(0.0).validate().unwrap();
        shifted_oracle(0.0).validate().unwrap();
    }
}
