//! Hardware abstraction and tensor-operator workload model.
//!
//! Every memory quantity is counted in elements; `element_bytes` is carried
//! only for reporting. One fused multiply-add counts as one "fused op", and
//! `t_p` is expressed in the same unit.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_file, Error, Result};

/// The L0/L1/L2 hardware abstraction (register / shared / device memory).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    /// L0 storage per execution lane, elements.
    pub m_l0: u64,
    /// L1 storage per block, elements.
    pub m_l1: u64,
    /// L1 scheduling blocks that can be active at once.
    pub pu_l1: u64,
    /// Scheduling-group size within a block (warp size).
    pub n_l1: u64,
    /// L2 parallel units (SMs).
    pub pu_l2: u64,
    /// Memory transaction length at L2, elements.
    pub n_l2: u64,
    /// Peak compute rate, fused ops per second.
    pub t_p: f64,
    /// Peak memory bandwidth, elements per second.
    pub t_m: f64,
    pub element_bytes: u64,
}

impl DeviceSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("m_l0", self.m_l0),
            ("m_l1", self.m_l1),
            ("pu_l1", self.pu_l1),
            ("n_l1", self.n_l1),
            ("pu_l2", self.pu_l2),
            ("n_l2", self.n_l2),
            ("element_bytes", self.element_bytes),
        ];
        for (field, value) in counts {
            if value == 0 {
                return Err(Error::invalid(field, value, "must be strictly positive"));
            }
        }
        for (field, value) in [("t_p", self.t_p), ("t_m", self.t_m)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::invalid(field, value, "must be strictly positive"));
            }
        }
        for (field, value) in [("n_l1", self.n_l1), ("n_l2", self.n_l2)] {
            if !value.is_power_of_two() {
                return Err(Error::invalid(
                    field,
                    value,
                    format!("{field} must be a power of two"),
                ));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: DeviceSpec = toml::from_str(text).map_err(|e| Error::parse("device file", e.message()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("device spec serializes")
    }

    /// Same values with both peak rates multiplied by `factor`.
    pub fn with_rates_scaled(&self, factor: f64) -> Self {
        DeviceSpec {
            t_p: self.t_p * factor,
            t_m: self.t_m * factor,
            ..self.clone()
        }
    }
}

pub fn load_device(path: impl AsRef<Path>) -> Result<DeviceSpec> {
    DeviceSpec::from_toml_str(&read_file(path.as_ref())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferIo {
    Input,
    Output,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferSpec {
    pub name: String,
    /// Axis names indexing the buffer; the last one is contiguous in memory.
    pub axes: Vec<String>,
    pub io: BufferIo,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub extent: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Tiled,
    Elementwise,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorOpSpec {
    pub name: String,
    pub spatial_axes: Vec<Axis>,
    pub reduction_axes: Vec<Axis>,
    pub buffers: Vec<BufferSpec>,
    /// Trailing element-wise stages fused onto the output.
    pub fused_elementwise: u32,
    pub kind: OpKind,
}

/// Where an axis lives in the op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisRef {
    Spatial(usize),
    Reduction(usize),
}

impl TensorOpSpec {
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for axis in self.spatial_axes.iter().chain(&self.reduction_axes) {
            if axis.extent == 0 {
                return Err(Error::invalid(
                    format!("{}.{}", self.name, axis.name),
                    axis.extent,
                    "axis extent must be >= 1",
                ));
            }
            if !names.insert(axis.name.as_str()) {
                return Err(Error::invalid(
                    format!("{}.axes", self.name),
                    &axis.name,
                    "duplicate axis name",
                ));
            }
        }
        if self.kind == OpKind::Tiled && self.spatial_axes.is_empty() {
            return Err(Error::invalid(
                format!("{}.spatial_axes", self.name),
                "[]",
                "a tiled op needs at least one spatial axis",
            ));
        }
        let outputs = self.buffers.iter().filter(|b| b.io == BufferIo::Output).count();
        if outputs != 1 {
            return Err(Error::invalid(
                format!("{}.buffers", self.name),
                outputs,
                "exactly one output buffer is required",
            ));
        }
        let mut referenced = HashSet::new();
        for buf in &self.buffers {
            if buf.axes.is_empty() {
                return Err(Error::invalid(
                    format!("{}.{}.axes", self.name, buf.name),
                    "[]",
                    "buffer must be indexed by at least one axis",
                ));
            }
            let mut seen = HashSet::new();
            for axis in &buf.axes {
                if !names.contains(axis.as_str()) {
                    return Err(Error::invalid(
                        format!("{}.{}.axes", self.name, buf.name),
                        axis,
                        format!("unknown axis \"{axis}\""),
                    ));
                }
                if !seen.insert(axis.as_str()) {
                    return Err(Error::invalid(
                        format!("{}.{}.axes", self.name, buf.name),
                        axis,
                        "duplicate axis in buffer",
                    ));
                }
                referenced.insert(axis.as_str());
            }
        }
        for name in &names {
            if !referenced.contains(name) {
                return Err(Error::invalid(
                    format!("{}.axes", self.name),
                    name,
                    "axis is not referenced by any buffer",
                ));
            }
        }
        Ok(())
    }

    pub fn axis(&self, name: &str) -> Option<AxisRef> {
        if let Some(i) = self.spatial_axes.iter().position(|a| a.name == name) {
            return Some(AxisRef::Spatial(i));
        }
        self.reduction_axes
            .iter()
            .position(|a| a.name == name)
            .map(AxisRef::Reduction)
    }

    pub fn output(&self) -> &BufferSpec {
        self.buffers
            .iter()
            .find(|b| b.io == BufferIo::Output)
            .expect("validated op has an output")
    }

    pub fn inputs(&self) -> impl Iterator<Item = (usize, &BufferSpec)> {
        self.buffers
            .iter()
            .enumerate()
            .filter(|(_, b)| b.io == BufferIo::Input)
    }

    pub fn output_index(&self) -> usize {
        self.buffers
            .iter()
            .position(|b| b.io == BufferIo::Output)
            .expect("validated op has an output")
    }

    /// Elements in the full iteration space of a buffer.
    pub fn buffer_size(&self, buffer: &BufferSpec) -> u64 {
        buffer
            .axes
            .iter()
            .map(|name| match self.axis(name) {
                Some(AxisRef::Spatial(i)) => self.spatial_axes[i].extent,
                Some(AxisRef::Reduction(i)) => self.reduction_axes[i].extent,
                None => 1,
            })
            .product()
    }

    pub fn spatial_volume(&self) -> u64 {
        self.spatial_axes.iter().map(|a| a.extent).product()
    }
}

/// Total fused ops: product of every spatial and reduction extent.
pub fn flops_of(op: &TensorOpSpec) -> u64 {
    op.spatial_axes
        .iter()
        .chain(&op.reduction_axes)
        .map(|a| a.extent)
        .product()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubgraphTask {
    pub op: TensorOpSpec,
    /// Occurrences of the subgraph in the full graph.
    pub weight: u32,
}

// On-disk form of one workload task.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    name: String,
    spatial_axes: Vec<(String, u64)>,
    #[serde(default)]
    reduction_axes: Vec<(String, u64)>,
    buffers: Vec<BufferSpec>,
    weight: u32,
    #[serde(default)]
    fused_elementwise: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<OpKind>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadFile {
    tasks: Vec<TaskEntry>,
}

impl TaskEntry {
    fn into_task(self) -> Result<SubgraphTask> {
        // Without an explicit kind, ops with no reduction are element-wise.
        let kind = self.kind.unwrap_or(if self.reduction_axes.is_empty() {
            OpKind::Elementwise
        } else {
            OpKind::Tiled
        });
        let to_axes = |v: Vec<(String, u64)>| {
            v.into_iter()
                .map(|(name, extent)| Axis { name, extent })
                .collect::<Vec<_>>()
        };
        let op = TensorOpSpec {
            name: self.name,
            spatial_axes: to_axes(self.spatial_axes),
            reduction_axes: to_axes(self.reduction_axes),
            buffers: self.buffers,
            fused_elementwise: self.fused_elementwise,
            kind,
        };
        op.validate()?;
        if self.weight == 0 {
            return Err(Error::invalid(format!("{}.weight", op.name), 0, "weight must be >= 1"));
        }
        Ok(SubgraphTask {
            op,
            weight: self.weight,
        })
    }

    fn from_task(task: &SubgraphTask) -> Self {
        let from_axes = |v: &[Axis]| v.iter().map(|a| (a.name.clone(), a.extent)).collect();
        TaskEntry {
            name: task.op.name.clone(),
            spatial_axes: from_axes(&task.op.spatial_axes),
            reduction_axes: from_axes(&task.op.reduction_axes),
            buffers: task.op.buffers.clone(),
            weight: task.weight,
            fused_elementwise: task.op.fused_elementwise,
            kind: Some(task.op.kind),
        }
    }
}

/// Parses a workload document. JSON if it starts with `{`, TOML otherwise.
pub fn parse_workload(text: &str) -> Result<Vec<SubgraphTask>> {
    let file: WorkloadFile = if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| Error::parse("workload file", e))?
    } else {
        toml::from_str(text).map_err(|e| Error::parse("workload file", e.message()))?
    };
    file.tasks.into_iter().map(TaskEntry::into_task).collect()
}

pub fn load_workload(path: impl AsRef<Path>) -> Result<Vec<SubgraphTask>> {
    parse_workload(&read_file(path.as_ref())?)
}

pub fn workload_to_toml(tasks: &[SubgraphTask]) -> String {
    let file = WorkloadFile {
        tasks: tasks.iter().map(TaskEntry::from_task).collect(),
    };
    toml::to_string(&file).expect("workload serializes")
}

/// Convenience constructor for a `C[m, n] += A[m, k] * B[k, n]` op.
pub fn gemm(name: &str, m: u64, n: u64, k: u64) -> TensorOpSpec {
    let buf = |name: &str, axes: &[&str], io| BufferSpec {
        name: name.into(),
        axes: axes.iter().map(|s| s.to_string()).collect(),
        io,
    };
    TensorOpSpec {
        name: name.into(),
        spatial_axes: vec![
            Axis { name: "m".into(), extent: m },
            Axis { name: "n".into(), extent: n },
        ],
        reduction_axes: vec![Axis { name: "k".into(), extent: k }],
        buffers: vec![
            buf("A", &["m", "k"], BufferIo::Input),
            buf("B", &["k", "n"], BufferIo::Input),
            buf("C", &["m", "n"], BufferIo::Output),
        ],
        fused_elementwise: 0,
        kind: OpKind::Tiled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEVICE: &str = r#"
m_l0 = 256
m_l1 = 12288
pu_l1 = 4
n_l1 = 32
pu_l2 = 8
n_l2 = 32
t_p = 1.0e12
t_m = 1.0e11
element_bytes = 4
"#;

    #[test]
    fn device_parses_faithfully() {
        let d = DeviceSpec::from_toml_str(DEVICE).unwrap();
        assert_eq!((d.m_l0, d.n_l1, d.pu_l2), (256, 32, 8));
        assert_eq!(d.t_m, 1.0e11);
    }

    #[test]
    fn device_rejects_non_power_of_two_warp() {
        let text = DEVICE.replace("n_l1 = 32", "n_l1 = 48");
        let err = DeviceSpec::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("n_l1 must be a power of two"), "{err}");
    }

    #[test]
    fn device_missing_field_is_named() {
        let text = DEVICE.replace("t_m = 1.0e11", "");
        let err = DeviceSpec::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("t_m"), "{err}");
    }

    #[test]
    fn device_rejects_zero() {
        let text = DEVICE.replace("pu_l1 = 4", "pu_l1 = 0");
        assert!(DeviceSpec::from_toml_str(&text).is_err());
    }

    #[test]
    fn device_round_trip() {
        let d = DeviceSpec::from_toml_str(DEVICE).unwrap();
        assert_eq!(DeviceSpec::from_toml_str(&d.to_toml_string()).unwrap(), d);
    }

    const GEMM_RELU: &str = r#"
[[tasks]]
name = "gemm_relu"
spatial_axes = [["m", 128], ["n", 128]]
reduction_axes = [["k", 128]]
weight = 3
fused_elementwise = 1
buffers = [
  { name = "A", axes = ["m", "k"], io = "input" },
  { name = "B", axes = ["k", "n"], io = "input" },
  { name = "C", axes = ["m", "n"], io = "output" },
]
"#;

    #[test]
    fn workload_parses_gemm() {
        let tasks = parse_workload(GEMM_RELU).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].weight, 3);
        assert_eq!(tasks[0].op.fused_elementwise, 1);
        assert_eq!(tasks[0].op.kind, OpKind::Tiled);
        assert_eq!(flops_of(&tasks[0].op), 2_097_152);
    }

    #[test]
    fn workload_unknown_axis_is_named() {
        let text = GEMM_RELU.replace(r#"axes = ["k", "n"]"#, r#"axes = ["q", "n"]"#);
        let err = parse_workload(&text).unwrap_err();
        assert!(err.to_string().contains("\"q\""), "{err}");
    }

    #[test]
    fn workload_requires_one_output() {
        let text = GEMM_RELU.replace(r#"io = "output""#, r#"io = "input""#);
        assert!(parse_workload(&text).is_err());
    }

    #[test]
    fn workload_json_and_round_trip() {
        let tasks = parse_workload(GEMM_RELU).unwrap();
        let again = parse_workload(&workload_to_toml(&tasks)).unwrap();
        assert_eq!(tasks, again);
        let json = r#"{"tasks":[{"name":"relu","spatial_axes":[["i",128],["j",128]],
            "buffers":[{"name":"X","axes":["i","j"],"io":"input"},
                       {"name":"Y","axes":["i","j"],"io":"output"}],"weight":1}]}"#;
        let tasks = parse_workload(json).unwrap();
        assert_eq!(tasks[0].op.kind, OpKind::Elementwise);
        assert_eq!(flops_of(&tasks[0].op), 16_384);
    }

    #[test]
    fn flops_examples() {
        assert_eq!(flops_of(&gemm("g", 128, 128, 128)), 2_097_152);
        assert_eq!(flops_of(&gemm("g", 1, 1, 1)), 1);
        let doubled = gemm("g", 128, 256, 128);
        assert_eq!(flops_of(&doubled), 2 * 2_097_152);
    }
}
