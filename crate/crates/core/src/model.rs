//! Pattern-aware cost model: a two-branch ranker over hybrid features.
//!
//! ```text
//! statements (n x 24) --dense 24->h, gelu--dense h->h, gelu--> sum ----------.
//!                                                                            concat (2h) -> dense, gelu -> dense -> score
//! dataflow (m x 23) --dense 23->h, gelu--> self-attention + residual -> mean -'
//! ```
//!
//! Positions enter only through the attention queries and keys (fixed
//! sinusoids added before the query/key maps), so the dataflow branch is
//! order-aware while mean pooling of the values stays symmetric.
//!
//! Everything runs in `f64` with hand-written backward passes. Training
//! minimizes an NDCG-weighted pairwise logistic loss per task with plain
//! gradient descent.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};
use crate::features::{HybridFeature, DATAFLOW_WIDTH, STATEMENT_WIDTH};
use crate::schedule::Schedule;

pub const DEFAULT_HIDDEN: usize = 64;
pub const MODEL_FORMAT: &str = "pacm";
pub const MODEL_VERSION: u32 = 1;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self * x (+ bias)`.
    fn matvec(&self, x: &[f64], bias: Option<&Mat>, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = bias.map_or(0.0, |b| b.data[r]);
            for (w, xi) in self.row(r).iter().zip(x) {
                acc += w * xi;
            }
            *o = acc;
        }
    }

    /// `out += self^T * g`.
    fn matvec_t_add(&self, g: &[f64], out: &mut [f64]) {
        for (r, gr) in g.iter().enumerate() {
            if *gr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * gr;
            }
        }
    }

    /// `self += g x^T`.
    fn outer_add(&mut self, g: &[f64], x: &[f64]) {
        for (r, gr) in g.iter().enumerate() {
            if *gr == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, xi) in row.iter_mut().zip(x) {
                *w += gr * xi;
            }
        }
    }

    fn add_vec(&mut self, g: &[f64]) {
        for (b, gi) in self.data.iter_mut().zip(g) {
            *b += gi;
        }
    }
}

/// All learnable tensors of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaCMParams {
    pub hidden: usize,
    pub stmt_w1: Mat,
    pub stmt_b1: Mat,
    pub stmt_w2: Mat,
    pub stmt_b2: Mat,
    pub flow_w: Mat,
    pub flow_b: Mat,
    pub attn_q: Mat,
    pub attn_k: Mat,
    pub attn_v: Mat,
    pub head_w1: Mat,
    pub head_b1: Mat,
    pub head_w2: Mat,
    pub head_b2: Mat,
}

pub const TENSOR_NAMES: [&str; 13] = [
    "stmt_w1", "stmt_b1", "stmt_w2", "stmt_b2", "flow_w", "flow_b", "attn_q", "attn_k", "attn_v", "head_w1",
    "head_b1", "head_w2", "head_b2",
];

impl PaCMParams {
    pub fn zeros(hidden: usize) -> Self {
        let h = hidden;
        PaCMParams {
            hidden,
            stmt_w1: Mat::zeros(h, STATEMENT_WIDTH),
            stmt_b1: Mat::zeros(h, 1),
            stmt_w2: Mat::zeros(h, h),
            stmt_b2: Mat::zeros(h, 1),
            flow_w: Mat::zeros(h, DATAFLOW_WIDTH),
            flow_b: Mat::zeros(h, 1),
            attn_q: Mat::zeros(h, h),
            attn_k: Mat::zeros(h, h),
            attn_v: Mat::zeros(h, h),
            head_w1: Mat::zeros(h, 2 * h),
            head_b1: Mat::zeros(h, 1),
            head_w2: Mat::zeros(1, h),
            head_b2: Mat::zeros(1, 1),
        }
    }

    /// Xavier-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let mut p = PaCMParams::zeros(hidden);
        for (name, t) in p.tensors_mut() {
            if name.contains("_b") {
                continue;
            }
            let std = (2.0 / (t.rows + t.cols) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for w in &mut t.data {
                *w = normal.sample(rng);
            }
        }
        p
    }

    pub fn tensors(&self) -> [(&'static str, &Mat); 13] {
        [
            ("stmt_w1", &self.stmt_w1),
            ("stmt_b1", &self.stmt_b1),
            ("stmt_w2", &self.stmt_w2),
            ("stmt_b2", &self.stmt_b2),
            ("flow_w", &self.flow_w),
            ("flow_b", &self.flow_b),
            ("attn_q", &self.attn_q),
            ("attn_k", &self.attn_k),
            ("attn_v", &self.attn_v),
            ("head_w1", &self.head_w1),
            ("head_b1", &self.head_b1),
            ("head_w2", &self.head_w2),
            ("head_b2", &self.head_b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Mat); 13] {
        [
            ("stmt_w1", &mut self.stmt_w1),
            ("stmt_b1", &mut self.stmt_b1),
            ("stmt_w2", &mut self.stmt_w2),
            ("stmt_b2", &mut self.stmt_b2),
            ("flow_w", &mut self.flow_w),
            ("flow_b", &mut self.flow_b),
            ("attn_q", &mut self.attn_q),
            ("attn_k", &mut self.attn_k),
            ("attn_v", &mut self.attn_v),
            ("head_w1", &mut self.head_w1),
            ("head_b1", &mut self.head_b1),
            ("head_w2", &mut self.head_w2),
            ("head_b2", &mut self.head_b2),
        ]
    }

    pub fn same_shape(&self, other: &PaCMParams) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors().iter())
            .all(|((_, a), (_, b))| a.rows == b.rows && a.cols == b.cols)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    fn check_shapes(&self) -> Result<()> {
        let h = self.hidden;
        let expected = PaCMParams::zeros(h);
        for ((name, a), (_, b)) in self.tensors().iter().zip(expected.tensors().iter()) {
            if a.rows != b.rows || a.cols != b.cols || a.data.len() != a.rows * a.cols {
                return Err(Error::Shape(format!(
                    "{name} is {}x{} ({} values), expected {}x{} for hidden width {h}",
                    a.rows,
                    a.cols,
                    a.data.len(),
                    b.rows,
                    b.cols
                )));
            }
        }
        if self.tensors().iter().any(|(_, t)| t.data.iter().any(|x| !x.is_finite())) {
            return Err(Error::Shape("non-finite parameter".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    hidden: usize,
    shapes: Vec<(String, usize, usize)>,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
    params: PaCMParams,
}

/// Serializes params with a format/version/shape header. `extra` fields are
/// stored next to the header (used by Siamese checkpoints).
pub fn model_to_json(params: &PaCMParams, extra: serde_json::Map<String, serde_json::Value>) -> String {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        hidden: params.hidden,
        shapes: params
            .tensors()
            .iter()
            .map(|(n, t)| (n.to_string(), t.rows, t.cols))
            .collect(),
        extra,
        params: params.clone(),
    };
    serde_json::to_string(&file).expect("model serializes")
}

pub fn model_from_json(text: &str) -> Result<(PaCMParams, serde_json::Map<String, serde_json::Value>)> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::parse("model file", e))?;
    if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
        return Err(Error::parse(
            "model file",
            format!("unsupported format {} v{}", file.format, file.version),
        ));
    }
    if file.hidden != file.params.hidden {
        return Err(Error::Shape("header hidden width disagrees with params".into()));
    }
    file.params.check_shapes()?;
    for ((name, rows, cols), (pname, t)) in file.shapes.iter().zip(file.params.tensors().iter()) {
        if name != pname || *rows != t.rows || *cols != t.cols {
            return Err(Error::Shape(format!("header shape for {name} disagrees with params")));
        }
    }
    Ok((file.params, file.extra))
}

pub fn save_model(path: impl AsRef<Path>, params: &PaCMParams) -> Result<()> {
    write_file(path.as_ref(), model_to_json(params, serde_json::Map::new()))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PaCMParams> {
    Ok(model_from_json(&read_file(path.as_ref())?)?.0)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn positional_row(pos: usize, h: usize) -> Vec<f64> {
    (0..h)
        .map(|i| {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / h as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Sinusoidal position table with at least `m` rows for width `h`, shared
/// across calls.
fn positional(m: usize, h: usize) -> Arc<Vec<Vec<f64>>> {
    static TABLES: OnceLock<Mutex<HashMap<usize, Arc<Vec<Vec<f64>>>>>> = OnceLock::new();
    let mut tables = TABLES.get_or_init(Default::default).lock().expect("position table lock");
    let entry = tables.entry(h).or_default();
    if entry.len() < m {
        let rows = m.next_power_of_two().max(16);
        *entry = Arc::new((0..rows).map(|pos| positional_row(pos, h)).collect());
    }
    Arc::clone(entry)
}

/// Forward options. `identity_attention` replaces the attention output by
/// the values themselves (test hook).
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub identity_attention: bool,
}

struct StatementCache {
    a1: Vec<f64>,
    z1: Vec<f64>,
    a2: Vec<f64>,
}

struct Cache {
    stmts: Vec<StatementCache>,
    stmt_sum: Vec<f64>,
    flow_pre: Vec<Vec<f64>>,
    emb: Vec<Vec<f64>>,
    qk_in: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    head_pre: Vec<f64>,
    head_z: Vec<f64>,
}

fn check_widths(params: &PaCMParams, feat: &HybridFeature) -> Result<()> {
    if params.stmt_w1.cols != STATEMENT_WIDTH || params.flow_w.cols != DATAFLOW_WIDTH {
        return Err(Error::Shape("parameter input widths do not match feature widths".into()));
    }
    if feat.dataflow.is_empty() {
        return Err(Error::Shape("dataflow sequence is empty".into()));
    }
    Ok(())
}

fn forward_cached(params: &PaCMParams, feat: &HybridFeature, opts: ForwardOptions) -> (f64, Cache) {
    let h = params.hidden;

    let mut stmts = Vec::with_capacity(feat.statements.len());
    let mut stmt_sum = vec![0.0; h];
    for x in &feat.statements {
        let mut a1 = vec![0.0; h];
        params.stmt_w1.matvec(x, Some(&params.stmt_b1), &mut a1);
        let z1: Vec<f64> = a1.iter().map(|&a| gelu(a)).collect();
        let mut a2 = vec![0.0; h];
        params.stmt_w2.matvec(&z1, Some(&params.stmt_b2), &mut a2);
        for (s, a) in stmt_sum.iter_mut().zip(&a2) {
            *s += gelu(*a);
        }
        stmts.push(StatementCache { a1, z1, a2 });
    }

    let m = feat.dataflow.len();
    let mut flow_pre = Vec::with_capacity(m);
    let mut emb = Vec::with_capacity(m);
    let mut qk_in = Vec::with_capacity(m);
    let mut q = Vec::with_capacity(m);
    let mut k = Vec::with_capacity(m);
    let mut v = Vec::with_capacity(m);
    let table = positional(m, h);
    for (x, pos) in feat.dataflow.iter().zip(table.iter()) {
        let mut pre = vec![0.0; h];
        params.flow_w.matvec(x, Some(&params.flow_b), &mut pre);
        let e: Vec<f64> = pre.iter().map(|&a| gelu(a)).collect();
        let u: Vec<f64> = e.iter().zip(pos).map(|(a, p)| a + p).collect();
        let mut qi = vec![0.0; h];
        let mut ki = vec![0.0; h];
        let mut vi = vec![0.0; h];
        params.attn_q.matvec(&u, None, &mut qi);
        params.attn_k.matvec(&u, None, &mut ki);
        params.attn_v.matvec(&e, None, &mut vi);
        flow_pre.push(pre);
        emb.push(e);
        qk_in.push(u);
        q.push(qi);
        k.push(ki);
        v.push(vi);
    }

    let scale = 1.0 / (h as f64).sqrt();
    let attn: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            if opts.identity_attention {
                return (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect();
            }
            let logits: Vec<f64> = (0..m)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect();

    let mut pooled = vec![0.0; h];
    for i in 0..m {
        for d in 0..h {
            let mut o = 0.0;
            for j in 0..m {
                o += attn[i][j] * v[j][d];
            }
            pooled[d] += emb[i][d] + o;
        }
    }
    for p in &mut pooled {
        *p /= m as f64;
    }

    let concat: Vec<f64> = stmt_sum.iter().chain(&pooled).copied().collect();
    let mut head_pre = vec![0.0; h];
    params.head_w1.matvec(&concat, Some(&params.head_b1), &mut head_pre);
    let head_z: Vec<f64> = head_pre.iter().map(|&a| gelu(a)).collect();
    let mut out = [0.0];
    params.head_w2.matvec(&head_z, Some(&params.head_b2), &mut out);

    (
        out[0],
        Cache {
            stmts,
            stmt_sum,
            flow_pre,
            emb,
            qk_in,
            q,
            k,
            v,
            attn,
            pooled,
            head_pre,
            head_z,
        },
    )
}

/// Accumulates `d_score * d(score)/d(params)` into `grad`.
fn backward(
    params: &PaCMParams,
    feat: &HybridFeature,
    cache: &Cache,
    d_score: f64,
    opts: ForwardOptions,
    grad: &mut PaCMParams,
) {
    let h = params.hidden;

    grad.head_w2.outer_add(&[d_score], &cache.head_z);
    grad.head_b2.add_vec(&[d_score]);
    let mut d_head_z = vec![0.0; h];
    params.head_w2.matvec_t_add(&[d_score], &mut d_head_z);
    let d_head_pre: Vec<f64> = d_head_z
        .iter()
        .zip(&cache.head_pre)
        .map(|(g, a)| g * gelu_grad(*a))
        .collect();
    let concat: Vec<f64> = cache.stmt_sum.iter().chain(&cache.pooled).copied().collect();
    grad.head_w1.outer_add(&d_head_pre, &concat);
    grad.head_b1.add_vec(&d_head_pre);
    let mut d_concat = vec![0.0; 2 * h];
    params.head_w1.matvec_t_add(&d_head_pre, &mut d_concat);
    let (d_stmt_sum, d_pooled) = d_concat.split_at(h);

    for (x, c) in feat.statements.iter().zip(&cache.stmts) {
        let d_a2: Vec<f64> = d_stmt_sum.iter().zip(&c.a2).map(|(g, a)| g * gelu_grad(*a)).collect();
        grad.stmt_w2.outer_add(&d_a2, &c.z1);
        grad.stmt_b2.add_vec(&d_a2);
        let mut d_z1 = vec![0.0; h];
        params.stmt_w2.matvec_t_add(&d_a2, &mut d_z1);
        let d_a1: Vec<f64> = d_z1.iter().zip(&c.a1).map(|(g, a)| g * gelu_grad(*a)).collect();
        grad.stmt_w1.outer_add(&d_a1, x);
        grad.stmt_b1.add_vec(&d_a1);
    }

    let m = feat.dataflow.len();
    let d_y: Vec<f64> = d_pooled.iter().map(|g| g / m as f64).collect();
    // residual path: every embedding receives d_y directly
    let mut d_emb: Vec<Vec<f64>> = vec![d_y.clone(); m];
    let mut d_v = vec![vec![0.0; h]; m];
    let mut d_q = vec![vec![0.0; h]; m];
    let mut d_k = vec![vec![0.0; h]; m];
    let scale = 1.0 / (h as f64).sqrt();
    for i in 0..m {
        for j in 0..m {
            let a = cache.attn[i][j];
            for d in 0..h {
                d_v[j][d] += a * d_y[d];
            }
        }
        if opts.identity_attention {
            continue;
        }
        // d_attn[i][j] = d_y . v_j
        let d_attn: Vec<f64> = (0..m)
            .map(|j| d_y.iter().zip(&cache.v[j]).map(|(g, v)| g * v).sum())
            .collect();
        let dot: f64 = (0..m).map(|j| cache.attn[i][j] * d_attn[j]).sum();
        for j in 0..m {
            let d_logit = cache.attn[i][j] * (d_attn[j] - dot) * scale;
            if d_logit == 0.0 {
                continue;
            }
            for d in 0..h {
                d_q[i][d] += d_logit * cache.k[j][d];
                d_k[j][d] += d_logit * cache.q[i][d];
            }
        }
    }
    for i in 0..m {
        grad.attn_v.outer_add(&d_v[i], &cache.emb[i]);
        params.attn_v.matvec_t_add(&d_v[i], &mut d_emb[i]);
        if !opts.identity_attention {
            grad.attn_q.outer_add(&d_q[i], &cache.qk_in[i]);
            grad.attn_k.outer_add(&d_k[i], &cache.qk_in[i]);
            params.attn_q.matvec_t_add(&d_q[i], &mut d_emb[i]);
            params.attn_k.matvec_t_add(&d_k[i], &mut d_emb[i]);
        }
        let d_pre: Vec<f64> = d_emb[i]
            .iter()
            .zip(&cache.flow_pre[i])
            .map(|(g, a)| g * gelu_grad(*a))
            .collect();
        grad.flow_w.outer_add(&d_pre, &feat.dataflow[i]);
        grad.flow_b.add_vec(&d_pre);
    }
}

/// Predicted score; higher means faster.
pub fn forward(params: &PaCMParams, feat: &HybridFeature) -> Result<f64> {
    forward_with(params, feat, ForwardOptions::default())
}

pub fn forward_with(params: &PaCMParams, feat: &HybridFeature, opts: ForwardOptions) -> Result<f64> {
    check_widths(params, feat)?;
    Ok(forward_cached(params, feat, opts).0)
}

/// Scores a batch; item `i` of the result equals `forward(feats[i])`.
pub fn forward_batch(params: &PaCMParams, feats: &[HybridFeature]) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    feats.par_iter().map(|f| forward(params, f)).collect()
}

/// Gradient of `sum_i d_scores[i] * score_i` with respect to every parameter.
pub fn param_gradient(params: &PaCMParams, feats: &[HybridFeature], d_scores: &[f64]) -> Result<PaCMParams> {
    param_gradient_with(params, feats, d_scores, ForwardOptions::default())
}

pub fn param_gradient_with(
    params: &PaCMParams,
    feats: &[HybridFeature],
    d_scores: &[f64],
    opts: ForwardOptions,
) -> Result<PaCMParams> {
    if feats.len() != d_scores.len() {
        return Err(Error::Shape("one score gradient per feature is required".into()));
    }
    let mut grad = PaCMParams::zeros(params.hidden);
    for (f, &g) in feats.iter().zip(d_scores) {
        check_widths(params, f)?;
        let (_, cache) = forward_cached(params, f, opts);
        backward(params, f, &cache, g, opts, &mut grad);
    }
    Ok(grad)
}

/// NDCG-weighted pairwise logistic loss and its gradient w.r.t. the scores.
///
/// Relevance is `min_latency / latency`; gains are `2^rel - 1`; the rank
/// discount uses the current score order (stable on ties). For every pair
/// with `latency_i < latency_j` the term is
/// `|dNDCG_ij| * ln(1 + exp(-(s_i - s_j)))`.
pub fn rank_loss(scores: &[f64], latencies: &[f64]) -> Result<(f64, Vec<f64>)> {
    rank_loss_parts(scores, latencies).map(|(loss, grad, _)| (loss, grad))
}

/// [`rank_loss`] divided by the total pair weight, so the step size does not
/// grow with the list length. Used by [`train`].
pub fn mean_rank_loss(scores: &[f64], latencies: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (loss, mut grad, weight) = rank_loss_parts(scores, latencies)?;
    if weight == 0.0 {
        return Ok((0.0, grad));
    }
    grad.iter_mut().for_each(|g| *g /= weight);
    Ok((loss / weight, grad))
}

fn rank_loss_parts(scores: &[f64], latencies: &[f64]) -> Result<(f64, Vec<f64>, f64)> {
    if scores.len() != latencies.len() {
        return Err(Error::Input(format!(
            "{} scores but {} latencies",
            scores.len(),
            latencies.len()
        )));
    }
    if scores.len() < 2 {
        return Err(Error::Input("rank loss needs at least two items".into()));
    }
    if let Some(bad) = latencies.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err(Error::Input(format!("latency must be positive, got {bad}")));
    }
    let n = scores.len();
    let min_latency = latencies.iter().copied().fold(f64::INFINITY, f64::min);
    let gain: Vec<f64> = latencies.iter().map(|l| (min_latency / l).exp2() - 1.0).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut discount = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        discount[i] = 1.0 / (rank as f64 + 2.0).log2();
    }
    let mut ideal = gain.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal
        .iter()
        .enumerate()
        .map(|(r, g)| g / (r as f64 + 2.0).log2())
        .sum();

    let mut loss = 0.0;
    let mut total_weight = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if latencies[i] >= latencies[j] {
                continue;
            }
            let w = ((gain[i] - gain[j]) * (discount[i] - discount[j])).abs() / idcg;
            let diff = scores[i] - scores[j];
            // ln(1 + e^-x), stable for large |x|
            let term = if diff > 0.0 {
                (-diff).exp().ln_1p()
            } else {
                -diff + diff.exp().ln_1p()
            };
            loss += w * term;
            total_weight += w;
            let sigma = 1.0 / (1.0 + diff.exp());
            grad[i] -= w * sigma;
            grad[j] += w * sigma;
        }
    }
    Ok((loss, grad, total_weight))
}

/// Latency labels of one task's schedules; training batches never mix tasks.
#[derive(Clone, Debug, Default)]
pub struct RankGroup {
    pub features: Vec<HybridFeature>,
    pub latencies: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Largest listwise batch; bigger groups are split after shuffling.
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-2,
            batch: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub steps: usize,
    /// Mean batch loss before the first update.
    pub initial_loss: f64,
    /// Mean batch loss after the last update.
    pub final_loss: f64,
}

/// Pair-weight-normalized rank loss averaged over groups, each group
/// evaluated as one list.
pub fn dataset_loss(params: &PaCMParams, groups: &[RankGroup]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for g in groups.iter().filter(|g| g.features.len() >= 2) {
        let scores = forward_batch(params, &g.features)?;
        total += mean_rank_loss(&scores, &g.latencies)?.0;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Plain gradient descent on the pair-weight-normalized rank loss.
/// Deterministic given `rng`.
pub fn train<R: Rng + ?Sized>(
    params: &PaCMParams,
    groups: &[RankGroup],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(PaCMParams, TrainReport)> {
    let total: usize = groups.iter().map(|g| g.features.len()).sum();
    if total < 2 {
        return Err(Error::Input("training needs at least two labeled schedules".into()));
    }
    for g in groups {
        if g.features.len() != g.latencies.len() {
            return Err(Error::Input("features and latencies differ in length".into()));
        }
    }
    let batch = cfg.batch.max(2);
    let mut params = params.clone();
    let initial_loss = dataset_loss(&params, groups)?;
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
        for (gi, g) in groups.iter().enumerate() {
            let mut idx: Vec<usize> = (0..g.features.len()).collect();
            idx.shuffle(rng);
            for chunk in idx.chunks(batch) {
                if chunk.len() >= 2 {
                    batches.push((gi, chunk.to_vec()));
                }
            }
        }
        batches.shuffle(rng);
        for (gi, idx) in batches {
            let g = &groups[gi];
            let feats: Vec<HybridFeature> = idx.iter().map(|&i| g.features[i].clone()).collect();
            let lats: Vec<f64> = idx.iter().map(|&i| g.latencies[i]).collect();
            let scores = forward_batch(&params, &feats)?;
            let (_, d_scores) = mean_rank_loss(&scores, &lats)?;
            let grad = param_gradient(&params, &feats, &d_scores)?;
            sgd_step(&mut params, &grad, cfg.lr);
            steps += 1;
        }
    }
    let final_loss = dataset_loss(&params, groups)?;
    Ok((
        params,
        TrainReport {
            epochs: cfg.epochs,
            steps,
            initial_loss,
            final_loss,
        },
    ))
}

fn sgd_step(params: &mut PaCMParams, grad: &PaCMParams, lr: f64) {
    for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grad.tensors()) {
        for (w, dw) in p.data.iter_mut().zip(&g.data) {
            *w -= lr * dw;
        }
    }
}

/// Indices of the `b` best-scoring candidates not in `exclude`, ordered by
/// score descending; ties go to the lower draft cost, then the earlier index.
pub fn select_top_scored(
    candidates: &[Schedule],
    scores: &[f64],
    draft_costs: &[f64],
    exclude: &HashSet<Schedule>,
    b: usize,
) -> Result<Vec<usize>> {
    if candidates.len() != scores.len() || candidates.len() != draft_costs.len() {
        return Err(Error::Input("candidates, scores and draft costs differ in length".into()));
    }
    let mut idx: Vec<usize> = (0..candidates.len())
        .filter(|&i| !exclude.contains(&candidates[i]))
        .collect();
    if b > idx.len() {
        return Err(Error::Input(format!(
            "requested {b} schedules but only {} unmeasured candidates remain",
            idx.len()
        )));
    }
    idx.sort_by(|&a, &c| {
        scores[c]
            .total_cmp(&scores[a])
            .then(draft_costs[a].total_cmp(&draft_costs[c]))
            .then(a.cmp(&c))
    });
    idx.truncate(b);
    Ok(idx)
}

/// Scores `feats` with `params` and picks the top `b`; see [`select_top_scored`].
pub fn select_top(
    candidates: &[Schedule],
    feats: &[HybridFeature],
    draft_costs: &[f64],
    params: &PaCMParams,
    exclude: &HashSet<Schedule>,
    b: usize,
) -> Result<Vec<usize>> {
    if feats.len() != candidates.len() {
        return Err(Error::Input("one feature per candidate is required".into()));
    }
    let scores = forward_batch(params, feats)?;
    select_top_scored(candidates, &scores, draft_costs, exclude, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_feature(rng: &mut ChaCha8Rng, blocks: usize) -> HybridFeature {
        let mut stmt = || {
            let mut s = [0.0; STATEMENT_WIDTH];
            for x in &mut s {
                *x = rng.random_range(-1.0..1.0);
            }
            s
        };
        let statements = (0..3).map(|_| stmt()).collect();
        let dataflow = (0..blocks)
            .map(|_| {
                let mut d = [0.0; DATAFLOW_WIDTH];
                for x in &mut d {
                    *x = rng.random_range(-1.0..1.0);
                }
                d
            })
            .collect();
        HybridFeature { statements, dataflow }
    }

    #[test]
    fn zero_params_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = random_feature(&mut rng, 5);
        assert_eq!(forward(&PaCMParams::zeros(8), &f).unwrap(), 0.0);
    }

    #[test]
    fn identity_attention_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PaCMParams::init(16, &mut rng);
        let f = random_feature(&mut rng, 6);
        let mut g = f.clone();
        g.dataflow.swap(1, 4);
        let opts = ForwardOptions { identity_attention: true };
        let a = forward_with(&p, &f, opts).unwrap();
        let b = forward_with(&p, &g, opts).unwrap();
        assert!((a - b).abs() < 1e-12);
        // with attention the block order matters
        assert_ne!(forward(&p, &f).unwrap(), forward(&p, &g).unwrap());
    }

    #[test]
    fn forward_is_deterministic_and_batch_consistent() {
        let p = PaCMParams::init(16, &mut ChaCha8Rng::seed_from_u64(3));
        let q = PaCMParams::init(16, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(p, q);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<_> = (0..5).map(|_| random_feature(&mut rng, 4)).collect();
        let batch = forward_batch(&p, &feats).unwrap();
        for (f, s) in feats.iter().zip(&batch) {
            assert_eq!(forward(&q, f).unwrap().to_bits(), s.to_bits());
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut p = PaCMParams::zeros(4);
        p.flow_w = Mat::zeros(4, 7);
        let f = random_feature(&mut ChaCha8Rng::seed_from_u64(0), 2);
        assert!(matches!(forward(&p, &f), Err(Error::Shape(_))));
        let empty = HybridFeature { statements: vec![], dataflow: vec![] };
        assert!(forward(&PaCMParams::zeros(4), &empty).is_err());
    }

    #[test]
    fn rank_loss_edge_cases() {
        let (loss, _) = rank_loss(&[50.0, 0.0, -50.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(loss < 1e-20);
        let (loss, grad) = rank_loss(&[0.3, 0.3], &[1.0, 2.0]).unwrap();
        // relevance 1 and 0.5: gains 1 and sqrt(2)-1; ranks 0 and 1
        let g0 = 1.0;
        let g1 = 2f64.sqrt() - 1.0;
        let idcg = g0 + g1 / 3f64.log2();
        let w = (g0 - g1) * (1.0 - 1.0 / 3f64.log2()) / idcg;
        assert!((loss - w * 2f64.ln()).abs() < 1e-15);
        assert!((grad[0] + w * 0.5).abs() < 1e-15);
        assert!(rank_loss(&[1.0], &[1.0]).is_err());
        assert!(rank_loss(&[1.0, 2.0], &[1.0]).is_err());
        assert!(rank_loss(&[1.0, 2.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn select_top_tie_breaks_by_draft_cost_then_index() {
        let cands: Vec<Schedule> = (1..=5u64)
            .map(|i| Schedule { spatial: vec![[i, 1, 1, 1]], reduction: vec![], unroll: 1 })
            .collect();
        let costs = [3.0, 1.0, 2.0, 1.0, 0.5];
        let zeros = [0.0; 5];
        let none = HashSet::new();
        assert_eq!(select_top_scored(&cands, &zeros, &costs, &none, 3).unwrap(), vec![4, 1, 3]);
        let scores = [0.1, 0.5, 0.3, 0.2, 0.4];
        assert_eq!(select_top_scored(&cands, &scores, &costs, &none, 5).unwrap(), vec![1, 4, 2, 3, 0]);
        let measured: HashSet<Schedule> = [cands[1].clone()].into_iter().collect();
        assert_eq!(select_top_scored(&cands, &scores, &costs, &measured, 1).unwrap(), vec![4]);
        assert!(select_top_scored(&cands, &scores, &costs, &measured, 5).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let p = PaCMParams::init(8, &mut ChaCha8Rng::seed_from_u64(5));
        let text = model_to_json(&p, serde_json::Map::new());
        let (q, _) = model_from_json(&text).unwrap();
        assert_eq!(p, q);
        let broken = text.replacen("\"hidden\":8", "\"hidden\":9", 1);
        assert!(model_from_json(&broken).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_params_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = PaCMParams::init(8, &mut rng);
        let g = RankGroup {
            features: (0..6).map(|_| random_feature(&mut rng, 3)).collect(),
            latencies: (1..=6).map(f64::from).collect(),
        };
        let cfg = TrainConfig { epochs: 3, lr: 0.0, batch: 4 };
        let (q, report) = train(&p, &[g], &cfg, &mut rng).unwrap();
        assert_eq!(p, q);
        assert_eq!(report.initial_loss, report.final_loss);
    }
}
