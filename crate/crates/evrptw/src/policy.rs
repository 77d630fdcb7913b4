//! Heterogeneous graph-attention policy with global-local edge encoding,
//! FiLM conditioning and an autoregressive masked pointer decoder.
//!
//! Query projections differ by the querying node's type (depot, customer,
//! station); keys and values are shared. Each encoder layer fuses a full
//! attention branch with a k-nearest-neighbour branch (whose logits carry
//! a learned distance bias) through a per-node sigmoid gate. The decoder
//! modulates node embeddings with a FiLM scale-and-shift generated from
//! the dynamic vehicle state before pointing at the next node.

use crate::env::{self, EnvState};
use crate::model::{ConstraintSet, Instance, NodeKind, Solution};
use crate::nn::{Mat, Tape, Var, MASK_NEG};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

/// Pointer logit clipping constant.
pub const LOGIT_CLIP: f64 = 10.0;
/// Raw feature widths per node type.
const DEPOT_FEATS: usize = 2;
const CUST_FEATS: usize = 6;
const STAT_FEATS: usize = 2;
/// Dynamic-context width: clock, battery, load, served, phase one-hot.
pub const CONTEXT_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
}

impl Dims {
    pub fn desk_scale() -> Dims {
        Dims { hidden: 128, heads: 8, layers: 3 }
    }

    fn ff(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("hidden dim {hidden} not divisible by heads {heads}")]
    BadDims { hidden: usize, heads: usize },
    #[error("multistart {0} exceeds customer count {1}")]
    BadMultistart(usize, usize),
    #[error("all-false action mask passed to decode_step")]
    EmptyMask,
    #[error("trajectory replay failed (stale trajectory?): {0}")]
    StaleTrajectory(#[from] env::EnvError),
    #[error("checkpoint io at {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error("checkpoint dims {found:?} do not match expected {expected:?}")]
    DimsMismatch { found: Dims, expected: Dims },
}

#[derive(Debug, Clone, Copy)]
pub struct ParamSpec {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

/// All learnable tensors in one flat vector with a named layout derived
/// from the dims; the flat form feeds Adam and finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: Dims,
    pub data: Vec<f64>,
}

fn layout(dims: &Dims) -> Vec<(String, usize, usize)> {
    let h = dims.hidden;
    let f = dims.ff();
    let mut v: Vec<(String, usize, usize)> = vec![
        ("embed.depot.w".into(), DEPOT_FEATS, h),
        ("embed.depot.b".into(), 1, h),
        ("embed.cust.w".into(), CUST_FEATS, h),
        ("embed.cust.b".into(), 1, h),
        ("embed.stat.w".into(), STAT_FEATS, h),
        ("embed.stat.b".into(), 1, h),
    ];
    for l in 0..dims.layers {
        for name in ["wq_cust", "wq_stat", "wq_depot", "wk", "wv", "wo", "gate.w"] {
            v.push((format!("enc{l}.{name}"), h, h));
        }
        v.push((format!("enc{l}.gate.b"), 1, h));
        v.push((format!("enc{l}.dist_bias"), 1, dims.heads));
        for name in ["ln1.g", "ln1.b", "ln2.g", "ln2.b"] {
            v.push((format!("enc{l}.{name}"), 1, h));
        }
        v.push((format!("enc{l}.ff1.w"), h, f));
        v.push((format!("enc{l}.ff1.b"), 1, f));
        v.push((format!("enc{l}.ff2.w"), f, h));
        v.push((format!("enc{l}.ff2.b"), 1, h));
    }
    v.push(("film.w1".into(), CONTEXT_DIM, h));
    v.push(("film.b1".into(), 1, h));
    v.push(("film.w2".into(), h, 2 * h));
    v.push(("film.b2".into(), 1, 2 * h));
    v.push(("dec.ctx.w".into(), 2 * h, h));
    v.push(("dec.ctx.b".into(), 1, h));
    v.push(("val.w1".into(), h + CONTEXT_DIM, h));
    v.push(("val.b1".into(), 1, h));
    v.push(("val.w2".into(), h, 1));
    v.push(("val.b2".into(), 1, 1));
    v
}

pub fn param_layout(dims: &Dims) -> HashMap<String, ParamSpec> {
    let mut offset = 0;
    let mut map = HashMap::new();
    for (name, rows, cols) in layout(dims) {
        map.insert(name, ParamSpec { offset, rows, cols });
        offset += rows * cols;
    }
    map
}

pub fn param_count(dims: &Dims) -> usize {
    layout(dims).iter().map(|(_, r, c)| r * c).sum()
}

/// Deterministic initialization: uniform fan-in scaling for weights,
/// zeros for biases, ones for layer-norm gains.
pub fn init_params(seed: u64, dims: Dims) -> Result<PolicyParams, PolicyError> {
    if dims.hidden % dims.heads != 0 {
        return Err(PolicyError::BadDims { hidden: dims.hidden, heads: dims.heads });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(param_count(&dims));
    for (name, rows, cols) in layout(&dims) {
        let n = rows * cols;
        if name.ends_with(".b") || name.ends_with("dist_bias") {
            data.extend(std::iter::repeat(0.0).take(n));
        } else if name.ends_with("ln1.g") || name.ends_with("ln2.g") {
            data.extend(std::iter::repeat(1.0).take(n));
        } else {
            let bound = 1.0 / (rows as f64).sqrt();
            data.extend((0..n).map(|_| rng.gen_range(-bound..bound)));
        }
    }
    Ok(PolicyParams { dims, data })
}

impl PolicyParams {
    pub fn tensor(&self, name: &str) -> Mat {
        let specs = param_layout(&self.dims);
        let s = specs[name];
        Mat::from_vec(s.rows, s.cols, self.data[s.offset..s.offset + s.rows * s.cols].to_vec())
    }
}

/// Parameter tensors bound onto a tape as leaves, plus the layout needed
/// to scatter gradients back into the flat vector.
pub struct BoundParams {
    vars: HashMap<String, Var>,
    specs: HashMap<String, ParamSpec>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &PolicyParams) -> BoundParams {
        let specs = param_layout(&params.dims);
        let mut vars = HashMap::new();
        for (name, s) in &specs {
            let m = Mat::from_vec(
                s.rows,
                s.cols,
                params.data[s.offset..s.offset + s.rows * s.cols].to_vec(),
            );
            vars.insert(name.clone(), tape.leaf(m));
        }
        BoundParams { vars, specs }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Accumulates tape gradients into a flat vector matching the layout.
    pub fn scatter_grads(&self, tape: &Tape, grads: &crate::nn::Grads, out: &mut [f64]) {
        let _ = tape;
        for (name, s) in &self.specs {
            if let Some(g) = grads.get(self.vars[name]) {
                for (k, v) in g.data.iter().enumerate() {
                    out[s.offset + k] += v;
                }
            }
        }
    }
}

/// Static per-instance matrices consumed by the encoder.
struct InstanceFeatures {
    f_depot: Mat,
    f_cust: Mat,
    f_stat: Mat,
    mask_depot: Mat,
    mask_cust: Mat,
    mask_stat: Mat,
    neg_dist: Mat,
    knn_mask: Mat,
}

fn instance_features(instance: &Instance) -> InstanceFeatures {
    let n = instance.n_nodes();
    let mut f_depot = Mat::zeros(n, DEPOT_FEATS);
    let mut f_cust = Mat::zeros(n, CUST_FEATS);
    let mut f_stat = Mat::zeros(n, STAT_FEATS);
    let mut mask_depot = Mat::zeros(n, 1);
    let mut mask_cust = Mat::zeros(n, 1);
    let mut mask_stat = Mat::zeros(n, 1);
    for (i, node) in instance.nodes.iter().enumerate() {
        match node.kind {
            NodeKind::Depot => {
                f_depot.set(i, 0, node.x);
                f_depot.set(i, 1, node.y);
                mask_depot.data[i] = 1.0;
            }
            NodeKind::Customer => {
                f_cust.set(i, 0, node.x);
                f_cust.set(i, 1, node.y);
                f_cust.set(i, 2, node.demand as f64 / instance.capacity as f64);
                f_cust.set(i, 3, node.tw_open / instance.horizon);
                f_cust.set(i, 4, node.tw_close / instance.horizon);
                f_cust.set(i, 5, node.service_time / instance.horizon);
                mask_cust.data[i] = 1.0;
            }
            NodeKind::Station => {
                f_stat.set(i, 0, node.x);
                f_stat.set(i, 1, node.y);
                mask_stat.data[i] = 1.0;
            }
        }
    }

    let mut neg_dist = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            neg_dist.set(i, j, -instance.dist(i, j));
        }
    }

    // Local branch: self plus the k nearest other nodes.
    let k = 8.min(n - 1);
    let mut knn_mask = Mat::from_vec(n, n, vec![MASK_NEG; n * n]);
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            instance
                .dist(i, a)
                .partial_cmp(&instance.dist(i, b))
                .unwrap()
                .then(a.cmp(&b))
        });
        knn_mask.set(i, i, 0.0);
        for &j in order.iter().take(k) {
            knn_mask.set(i, j, 0.0);
        }
    }

    InstanceFeatures {
        f_depot,
        f_cust,
        f_stat,
        mask_depot,
        mask_cust,
        mask_stat,
        neg_dist,
        knn_mask,
    }
}

/// Runs the encoder on a tape; returns (node embeddings, graph summary).
pub(crate) fn encode_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    instance: &Instance,
    dims: &Dims,
    gate_override: Option<f64>,
) -> (Var, Var) {
    let feats = instance_features(instance);
    let n = instance.n_nodes();
    let h = dims.hidden;
    let dk = h / dims.heads;

    let f_depot = tape.leaf(feats.f_depot);
    let f_cust = tape.leaf(feats.f_cust);
    let f_stat = tape.leaf(feats.f_stat);
    let m_depot = tape.leaf(feats.mask_depot);
    let m_cust = tape.leaf(feats.mask_cust);
    let m_stat = tape.leaf(feats.mask_stat);

    // Per-type input embedders.
    let mut x: Option<Var> = None;
    for (f, m, w, b) in [
        (f_depot, m_depot, "embed.depot.w", "embed.depot.b"),
        (f_cust, m_cust, "embed.cust.w", "embed.cust.b"),
        (f_stat, m_stat, "embed.stat.w", "embed.stat.b"),
    ] {
        let e = tape.matmul(f, bound.var(w));
        let e = tape.add_row(e, bound.var(b));
        let e = tape.mul_col(e, m);
        x = Some(match x {
            Some(a) => tape.add(a, e),
            None => e,
        });
    }
    let mut x = x.unwrap();

    for l in 0..dims.layers {
        let p = |name: &str| format!("enc{l}.{name}");
        // Queries selected by the querying node's type.
        let q = {
            let qc = tape.matmul(x, bound.var(&p("wq_cust")));
            let qc = tape.mul_col(qc, m_cust);
            let qs = tape.matmul(x, bound.var(&p("wq_stat")));
            let qs = tape.mul_col(qs, m_stat);
            let qd = tape.matmul(x, bound.var(&p("wq_depot")));
            let qd = tape.mul_col(qd, m_depot);
            let t = tape.add(qc, qs);
            tape.add(t, qd)
        };
        let k = tape.matmul(x, bound.var(&p("wk")));
        let v = tape.matmul(x, bound.var(&p("wv")));

        let mut glob_heads = Vec::with_capacity(dims.heads);
        let mut loc_heads = Vec::with_capacity(dims.heads);
        for hd in 0..dims.heads {
            let qh = tape.slice_cols(q, hd * dk, dk);
            let kh = tape.slice_cols(k, hd * dk, dk);
            let vh = tape.slice_cols(v, hd * dk, dk);
            let kt = tape.transpose(kh);
            let s = tape.matmul(qh, kt);
            let s = tape.scale(s, 1.0 / (dk as f64).sqrt());

            let a_glob = tape.softmax_rows(s);
            glob_heads.push(tape.matmul(a_glob, vh));

            let bias_scalar = tape.slice_cols(bound.var(&p("dist_bias")), hd, 1);
            let bias = tape.const_times_scalar(feats.neg_dist.clone(), bias_scalar);
            let s_loc = tape.add(s, bias);
            let s_loc = tape.add_const(s_loc, feats.knn_mask.clone());
            let a_loc = tape.softmax_rows(s_loc);
            loc_heads.push(tape.matmul(a_loc, vh));
        }
        let glob = tape.concat_cols_many(&glob_heads);
        let loc = tape.concat_cols_many(&loc_heads);

        let gate = match gate_override {
            Some(gv) => tape.leaf(Mat::from_vec(n, h, vec![gv; n * h])),
            None => {
                let g = tape.matmul(x, bound.var(&p("gate.w")));
                let g = tape.add_row(g, bound.var(&p("gate.b")));
                tape.sigmoid(g)
            }
        };
        let inv_gate = {
            let neg = tape.scale(gate, -1.0);
            tape.add_scalar(neg, 1.0)
        };
        let fused_g = tape.mul_elem(gate, glob);
        let fused_l = tape.mul_elem(inv_gate, loc);
        let fused = tape.add(fused_g, fused_l);
        let att = tape.matmul(fused, bound.var(&p("wo")));

        let res = tape.add(x, att);
        let normed = tape.layer_norm_rows(res);
        let normed = tape.mul_row(normed, bound.var(&p("ln1.g")));
        x = tape.add_row(normed, bound.var(&p("ln1.b")));

        let h1 = tape.matmul(x, bound.var(&p("ff1.w")));
        let h1 = tape.add_row(h1, bound.var(&p("ff1.b")));
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(h1, bound.var(&p("ff2.w")));
        let h2 = tape.add_row(h2, bound.var(&p("ff2.b")));
        let res2 = tape.add(x, h2);
        let normed2 = tape.layer_norm_rows(res2);
        let normed2 = tape.mul_row(normed2, bound.var(&p("ln2.g")));
        x = tape.add_row(normed2, bound.var(&p("ln2.b")));
    }

    let summary = tape.mean_rows(x);
    (x, summary)
}

/// FiLM conditioning signal derived from the rollout state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicContext {
    pub values: [f64; CONTEXT_DIM],
}

impl DynamicContext {
    pub fn from_state(instance: &Instance, state: &EnvState) -> DynamicContext {
        let phase = match (state.constraints.battery, state.constraints.time_windows) {
            (false, _) => 0,
            (true, false) => 1,
            (true, true) => 2,
        };
        let mut values = [0.0; CONTEXT_DIM];
        values[0] = (state.clock / instance.horizon).clamp(0.0, 1.0);
        values[1] = (state.battery / instance.battery_capacity).clamp(0.0, 1.0);
        values[2] =
            ((instance.capacity - state.load_used) as f64 / instance.capacity as f64).clamp(0.0, 1.0);
        values[3] = state.visited.count_ones() as f64 / instance.n_customers.max(1) as f64;
        values[4 + phase] = 1.0;
        DynamicContext { values }
    }
}

pub(crate) struct DecodeVars {
    pub log_probs: Var,
    pub probs: Var,
}

/// Decoder step on a tape: FiLM-modulated pointer over node embeddings.
pub(crate) fn decode_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    embeddings: Var,
    summary: Var,
    context: &DynamicContext,
    position: usize,
    mask: &[bool],
    dims: &Dims,
) -> DecodeVars {
    let h = dims.hidden;
    let ctx = tape.leaf(Mat::row(context.values.to_vec()));
    let h1 = tape.matmul(ctx, bound.var("film.w1"));
    let h1 = tape.add_row(h1, bound.var("film.b1"));
    let h1 = tape.relu(h1);
    let gb = tape.matmul(h1, bound.var("film.w2"));
    let gb = tape.add_row(gb, bound.var("film.b2"));
    let gamma = tape.slice_cols(gb, 0, h);
    let beta = tape.slice_cols(gb, h, h);
    let modulated = tape.mul_row(embeddings, gamma);
    let modulated = tape.add_row(modulated, beta);

    let cur = tape.slice_rows(embeddings, position, 1);
    let ctx_query = tape.concat_cols(cur, summary);
    let q = tape.matmul(ctx_query, bound.var("dec.ctx.w"));
    let q = tape.add_row(q, bound.var("dec.ctx.b"));

    let keys_t = tape.transpose(modulated);
    let scores = tape.matmul(q, keys_t);
    let scores = tape.scale(scores, 1.0 / (h as f64).sqrt());
    let scores = tape.tanh(scores);
    let scores = tape.scale(scores, LOGIT_CLIP);
    let mask_row = Mat::row(
        mask.iter()
            .map(|&m| if m { 0.0 } else { MASK_NEG })
            .collect(),
    );
    let masked = tape.add_const(scores, mask_row);
    DecodeVars {
        log_probs: tape.log_softmax_rows(masked),
        probs: tape.softmax_rows(masked),
    }
}

/// Critic on (graph summary, dynamic context).
pub(crate) fn value_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    summary: Var,
    context: &DynamicContext,
) -> Var {
    let ctx = tape.leaf(Mat::row(context.values.to_vec()));
    let input = tape.concat_cols(summary, ctx);
    let h1 = tape.matmul(input, bound.var("val.w1"));
    let h1 = tape.add_row(h1, bound.var("val.b1"));
    let h1 = tape.relu(h1);
    let v = tape.matmul(h1, bound.var("val.w2"));
    tape.add_row(v, bound.var("val.b2"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    pub rows: Vec<Vec<f64>>,
    pub summary: Vec<f64>,
}

pub fn encode(instance: &Instance, params: &PolicyParams) -> NodeEmbeddings {
    encode_with_gate(instance, params, None)
}

/// Encoder with an optional fusion-gate override (0 selects the local
/// branch, 1 the global branch); used for ablation checks.
pub fn encode_with_gate(
    instance: &Instance,
    params: &PolicyParams,
    gate_override: Option<f64>,
) -> NodeEmbeddings {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let (e, s) = encode_on_tape(&mut tape, &bound, instance, &params.dims, gate_override);
    let em = tape.value(e);
    let rows = (0..em.rows)
        .map(|i| em.data[i * em.cols..(i + 1) * em.cols].to_vec())
        .collect();
    NodeEmbeddings { rows, summary: tape.value(s).data.clone() }
}

/// Probability distribution over nodes for one decoding step. Masked
/// entries are exactly zero.
pub fn decode_step(
    embeddings: &NodeEmbeddings,
    state: &EnvState,
    instance: &Instance,
    context: &DynamicContext,
    mask: &[bool],
    params: &PolicyParams,
) -> Result<Vec<f64>, PolicyError> {
    if !mask.iter().any(|&m| m) {
        return Err(PolicyError::EmptyMask);
    }
    let _ = instance;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let n = embeddings.rows.len();
    let h = params.dims.hidden;
    let mut flat = Vec::with_capacity(n * h);
    for row in &embeddings.rows {
        flat.extend_from_slice(row);
    }
    let e = tape.leaf(Mat::from_vec(n, h, flat));
    let s = tape.leaf(Mat::row(embeddings.summary.clone()));
    let dv = decode_on_tape(
        &mut tape,
        &bound,
        e,
        s,
        context,
        state.position,
        mask,
        &params.dims,
    );
    let mut p = tape.value(dv.probs).data.clone();
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            p[i] = 0.0;
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// One recorded episode: enough to replay distributions under new
/// parameters for the PPO ratio.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub instance: Instance,
    pub constraints: ConstraintSet,
    pub start: Option<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub values: Vec<f64>,
    pub infeasible: bool,
    pub unserved: usize,
}

pub struct RolloutResult {
    pub best: Solution,
    pub trajectories: Vec<Trajectory>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Runs one episode on a fresh tape, recording per-step statistics.
fn run_episode(
    instance: &Instance,
    params: &PolicyParams,
    constraints: ConstraintSet,
    start: Option<usize>,
    mode: DecodeMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Trajectory, Vec<Vec<usize>>), PolicyError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let (emb, summary) = encode_on_tape(&mut tape, &bound, instance, &params.dims, None);

    let mut state = env::reset(instance, constraints, start)?;
    let mut traj = Trajectory {
        instance: instance.clone(),
        constraints,
        start,
        actions: Vec::new(),
        rewards: Vec::new(),
        log_probs: Vec::new(),
        entropies: Vec::new(),
        values: Vec::new(),
        infeasible: false,
        unserved: 0,
    };

    while !state.terminal {
        let mask = env::feasible_actions(instance, &state);
        if !mask.iter().any(|&m| m) {
            let (s2, outcome) = env::mark_infeasible(instance, &state)?;
            traj.infeasible = true;
            traj.unserved = outcome.info.unserved;
            if let Some(last) = traj.rewards.last_mut() {
                *last += outcome.reward;
            } else {
                // Dead on arrival: no decisions were ever taken.
                traj.actions.clear();
            }
            state = s2;
            break;
        }
        let context = DynamicContext::from_state(instance, &state);
        let dv = decode_on_tape(
            &mut tape,
            &bound,
            emb,
            summary,
            &context,
            state.position,
            &mask,
            &params.dims,
        );
        let value = value_on_tape(&mut tape, &bound, summary, &context);
        let probs = tape.value(dv.probs);
        let action = match mode {
            DecodeMode::Greedy => {
                let mut best = 0usize;
                let mut best_p = f64::NEG_INFINITY;
                for (i, &m) in mask.iter().enumerate() {
                    if m && probs.data[i] > best_p {
                        best_p = probs.data[i];
                        best = i;
                    }
                }
                best
            }
            DecodeMode::Sample => {
                let draw: f64 = rng.gen();
                let mut cum = 0.0;
                let mut chosen = mask.iter().position(|&m| m).unwrap();
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        cum += probs.data[i];
                        chosen = i;
                        if draw < cum {
                            break;
                        }
                    }
                }
                chosen
            }
        };
        let lp = tape.value(dv.log_probs).get(0, action);
        let ent: f64 = {
            let p = tape.value(dv.probs);
            let lpv = tape.value(dv.log_probs);
            -(0..mask.len())
                .filter(|&i| mask[i])
                .map(|i| p.data[i] * lpv.data[i])
                .sum::<f64>()
        };
        let (s2, outcome) = env::step(instance, &state, action)?;
        traj.actions.push(action);
        traj.rewards.push(outcome.reward);
        traj.log_probs.push(lp);
        traj.entropies.push(ent);
        traj.values.push(tape.value(value).item());
        state = s2;
    }

    Ok((traj, state.finished_routes))
}

/// Multi-start decoding: episode i is forced to begin at customer i.
/// Returns the minimum-cost feasible solution across starts, or the
/// infeasible marker if every start fails.
pub fn rollout(
    instance: &Instance,
    params: &PolicyParams,
    constraints: ConstraintSet,
    mode: DecodeMode,
    multistart: usize,
    seed: u64,
) -> Result<RolloutResult, PolicyError> {
    if multistart == 0 || multistart > instance.n_customers {
        return Err(PolicyError::BadMultistart(multistart, instance.n_customers));
    }
    let mut trajectories = Vec::with_capacity(multistart);
    let mut best: Option<Solution> = None;
    for i in 0..multistart {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (i as u64) << 17));
        let (traj, routes) =
            run_episode(instance, params, constraints, Some(i + 1), mode, &mut rng)?;
        if !traj.infeasible {
            let sol = crate::model::check_solution(instance, &routes, constraints)
                .expect("env rollouts produce structurally valid routes");
            if sol.feasible {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        sol.cost < b.cost - 1e-12
                            || ((sol.cost - b.cost).abs() <= 1e-9 && sol.routes < b.routes)
                    }
                };
                if better {
                    best = Some(sol);
                }
            }
        }
        trajectories.push(traj);
    }
    let n_cust = instance.n_customers;
    Ok(RolloutResult {
        best: best.unwrap_or_else(|| Solution::infeasible_marker(n_cust)),
        trajectories,
    })
}

pub(crate) struct ReplayVars {
    pub log_probs: Vec<Var>,
    pub entropies: Vec<Var>,
    pub values: Vec<Var>,
}

/// Replays a trajectory on a tape under the bound parameters, rebuilding
/// the per-step distributions for the PPO ratio.
pub(crate) fn replay_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    traj: &Trajectory,
    dims: &Dims,
) -> Result<ReplayVars, PolicyError> {
    let (emb, summary) = encode_on_tape(tape, bound, &traj.instance, dims, None);
    let mut state = env::reset(&traj.instance, traj.constraints, traj.start)?;
    let mut out = ReplayVars {
        log_probs: Vec::with_capacity(traj.actions.len()),
        entropies: Vec::with_capacity(traj.actions.len()),
        values: Vec::with_capacity(traj.actions.len()),
    };
    for &action in &traj.actions {
        let mask = env::feasible_actions(&traj.instance, &state);
        let context = DynamicContext::from_state(&traj.instance, &state);
        let dv = decode_on_tape(tape, bound, emb, summary, &context, state.position, &mask, dims);
        let lp = tape.slice_cols(dv.log_probs, action, 1);
        // Entropy over the masked support.
        let plogp = tape.mul_elem(dv.probs, dv.log_probs);
        let ent_sum = tape.sum_all(plogp);
        let ent = tape.scale(ent_sum, -1.0);
        let v = value_on_tape(tape, bound, summary, &context);
        out.log_probs.push(lp);
        out.entropies.push(ent);
        out.values.push(v);
        let (s2, _) = env::step(&traj.instance, &state, action)?;
        state = s2;
    }
    Ok(out)
}

/// Recomputes per-step log-probabilities, entropies and values under the
/// current parameters.
pub fn log_prob_and_entropy(
    traj: &Trajectory,
    params: &PolicyParams,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), PolicyError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let vars = replay_on_tape(&mut tape, &bound, traj, &params.dims)?;
    let lp = vars.log_probs.iter().map(|&v| tape.value(v).item()).collect();
    let ent = vars.entropies.iter().map(|&v| tape.value(v).item()).collect();
    let val = vars.values.iter().map(|&v| tape.value(v).item()).collect();
    Ok((lp, ent, val))
}

fn probe_gradient(
    traj: &Trajectory,
    params: &PolicyParams,
    value_branch: bool,
) -> Result<(f64, Vec<f64>), PolicyError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let vars = replay_on_tape(&mut tape, &bound, traj, &params.dims)?;
    let list = if value_branch { &vars.values } else { &vars.log_probs };
    let mut acc = list[0];
    for &v in &list[1..] {
        acc = tape.add(acc, v);
    }
    let loss = tape.sum_all(acc);
    let grads = tape.backward(loss);
    let mut flat = vec![0.0; params.data.len()];
    bound.scatter_grads(&tape, &grads, &mut flat);
    Ok((tape.value(loss).item(), flat))
}

/// Scalar probes for gradient verification: the summed action
/// log-probability of a trajectory and the summed value estimate, each
/// with its exact gradient with respect to the flat parameter vector.
/// Returns (policy_loss, policy_grad, value_loss, value_grad).
pub fn trajectory_gradients(
    traj: &Trajectory,
    params: &PolicyParams,
) -> Result<(f64, Vec<f64>, f64, Vec<f64>), PolicyError> {
    let (pl, pg) = probe_gradient(traj, params, false)?;
    let (vl, vg) = probe_gradient(traj, params, true)?;
    Ok((pl, pg, vl, vg))
}

pub const CHECKPOINT_FORMAT: &str = "evrptw-policy/1";

#[derive(Serialize, Deserialize)]
struct TensorDoc {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    dims: Dims,
    tensors: Vec<TensorDoc>,
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<(), PolicyError> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, rows, cols) in layout(&params.dims) {
        let n = rows * cols;
        tensors.push(TensorDoc {
            name,
            rows,
            cols,
            data: params.data[offset..offset + n].to_vec(),
        });
        offset += n;
    }
    let doc = CheckpointDoc {
        format: CHECKPOINT_FORMAT.to_string(),
        dims: params.dims,
        tensors,
    };
    let text = serde_json::to_string(&doc).expect("checkpoint serialization cannot fail");
    fs::write(path, text).map_err(|e| PolicyError::Checkpoint {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, PolicyError> {
    let text = fs::read_to_string(path).map_err(|e| PolicyError::Checkpoint {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let doc: CheckpointDoc = serde_json::from_str(&text).map_err(|e| PolicyError::Checkpoint {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if doc.format != CHECKPOINT_FORMAT {
        return Err(PolicyError::Checkpoint {
            path: path.display().to_string(),
            detail: format!("unsupported format {:?}", doc.format),
        });
    }
    let mut data = Vec::with_capacity(param_count(&doc.dims));
    let expected = layout(&doc.dims);
    if doc.tensors.len() != expected.len() {
        return Err(PolicyError::Checkpoint {
            path: path.display().to_string(),
            detail: "tensor list does not match layout".to_string(),
        });
    }
    for (t, (name, rows, cols)) in doc.tensors.iter().zip(expected) {
        if t.name != name || t.rows != rows || t.cols != cols || t.data.len() != rows * cols {
            return Err(PolicyError::Checkpoint {
                path: path.display().to_string(),
                detail: format!("tensor {} has unexpected shape", t.name),
            });
        }
        data.extend_from_slice(&t.data);
    }
    Ok(PolicyParams { dims: doc.dims, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instancegen::{generate, ClassSpec, GenConfig};
    use crate::model::check_solution;

    fn small_dims() -> Dims {
        Dims { hidden: 8, heads: 2, layers: 1 }
    }

    fn test_instance(seed: u64) -> Instance {
        generate(&GenConfig::new(5, 2, ClassSpec::parse("R").unwrap(), seed)).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(7, small_dims()).unwrap();
        let b = init_params(7, small_dims()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(
            init_params(0, Dims { hidden: 7, heads: 8, layers: 1 }),
            Err(PolicyError::BadDims { .. })
        ));
    }

    #[test]
    fn desk_scale_default_shapes() {
        let dims = Dims::desk_scale();
        assert_eq!((dims.hidden, dims.heads, dims.layers), (128, 8, 3));
        let p = init_params(0, small_dims()).unwrap();
        assert_eq!(p.data.len(), param_count(&small_dims()));
        assert!(p.data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn customer_permutation_equivariance() {
        let inst = test_instance(3);
        let params = init_params(1, small_dims()).unwrap();
        let emb = encode(&inst, &params);

        // Swap customers 2 and 4 (ids keep their slots, payloads move).
        let mut permuted = inst.clone();
        permuted.nodes.swap(2, 4);
        permuted.nodes[2].id = 2;
        permuted.nodes[4].id = 4;
        let emb_p = encode(&permuted, &params);
        for k in 0..small_dims().hidden {
            assert!((emb.rows[2][k] - emb_p.rows[4][k]).abs() < 1e-9);
            assert!((emb.rows[4][k] - emb_p.rows[2][k]).abs() < 1e-9);
            assert!((emb.rows[1][k] - emb_p.rows[1][k]).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_stations_identical_rows() {
        let mut inst = test_instance(4);
        let s0 = inst.n_customers + 1;
        let (x, y) = (inst.nodes[s0].x, inst.nodes[s0].y);
        inst.nodes[s0 + 1].x = x;
        inst.nodes[s0 + 1].y = y;
        let params = init_params(2, small_dims()).unwrap();
        let emb = encode(&inst, &params);
        for k in 0..small_dims().hidden {
            assert!((emb.rows[s0][k] - emb.rows[s0 + 1][k]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gate_selects_local_branch() {
        // On a graph small enough that k-NN covers every node, local and
        // global attention differ only by the distance bias; with the bias
        // zero-initialised the two branches coincide for any gate.
        let small = test_instance(5);
        let params = init_params(3, small_dims()).unwrap();
        let zeroed = encode_with_gate(&small, &params, Some(0.0));
        let zeroed2 = encode_with_gate(&small, &params, Some(0.0));
        assert_eq!(zeroed, zeroed2);
        let one = encode_with_gate(&small, &params, Some(1.0));
        for (a, b) in zeroed.rows.iter().zip(one.rows.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        // On a larger graph the k-NN cutoff is active and the two branches
        // genuinely disagree, so the gate override changes the output.
        let big = generate(&GenConfig::new(10, 2, ClassSpec::parse("R").unwrap(), 5)).unwrap();
        let local = encode_with_gate(&big, &params, Some(0.0));
        let global = encode_with_gate(&big, &params, Some(1.0));
        assert_ne!(local, global);
        assert_ne!(local, encode(&big, &params));
    }

    #[test]
    fn type_flag_changes_embedding() {
        let inst = test_instance(6);
        let params = init_params(4, small_dims()).unwrap();
        let emb = encode(&inst, &params);
        // Turn customer 1 into a station at the same coordinates.
        let mut swapped = inst.clone();
        swapped.nodes[1].kind = NodeKind::Station;
        swapped.nodes[1].demand = 0;
        swapped.nodes[1].service_time = 0.0;
        let emb_s = encode(&swapped, &params);
        let diff: f64 = emb.rows[1]
            .iter()
            .zip(&emb_s.rows[1])
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "distinct per-type projections must be live");
    }

    #[test]
    fn decode_single_true_mask() {
        let inst = test_instance(7);
        let params = init_params(5, small_dims()).unwrap();
        let emb = encode(&inst, &params);
        let state = env::reset(&inst, ConstraintSet::PHASE_A, None).unwrap();
        let ctx = DynamicContext::from_state(&inst, &state);
        let mut mask = vec![false; inst.n_nodes()];
        mask[3] = true;
        let p = decode_step(&emb, &state, &inst, &ctx, &mask, &params).unwrap();
        assert_eq!(p[3], 1.0);
        assert!(p.iter().enumerate().all(|(i, &x)| i == 3 || x == 0.0));
    }

    #[test]
    fn decode_zero_params_uniform() {
        let inst = test_instance(8);
        let mut params = init_params(6, small_dims()).unwrap();
        params.data.iter_mut().for_each(|x| *x = 0.0);
        let emb = encode(&inst, &params);
        let state = env::reset(&inst, ConstraintSet::PHASE_A, None).unwrap();
        let ctx = DynamicContext::from_state(&inst, &state);
        let mask = env::feasible_actions(&inst, &state);
        let count = mask.iter().filter(|&&m| m).count();
        let p = decode_step(&emb, &state, &inst, &ctx, &mask, &params).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                assert!((p[i] - 1.0 / count as f64).abs() < 1e-9);
            } else {
                assert_eq!(p[i], 0.0);
            }
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn greedy_rollout_deterministic() {
        let inst = test_instance(9);
        let params = init_params(7, small_dims()).unwrap();
        let a = rollout(&inst, &params, ConstraintSet::PHASE_B, DecodeMode::Greedy, 5, 0).unwrap();
        let b = rollout(&inst, &params, ConstraintSet::PHASE_B, DecodeMode::Greedy, 5, 0).unwrap();
        assert_eq!(a.best.routes, b.best.routes);
        assert_eq!(a.best.cost, b.best.cost);
    }

    #[test]
    fn multistart_dominates_single_start() {
        let params = init_params(8, small_dims()).unwrap();
        for seed in 0..20 {
            let inst = test_instance(100 + seed);
            let single =
                rollout(&inst, &params, ConstraintSet::PHASE_B, DecodeMode::Greedy, 1, 0).unwrap();
            let multi =
                rollout(&inst, &params, ConstraintSet::PHASE_B, DecodeMode::Greedy, 5, 0).unwrap();
            assert!(multi.best.cost <= single.best.cost + 1e-9);
        }
    }

    #[test]
    fn forced_start_respected() {
        let inst = test_instance(10);
        let params = init_params(9, small_dims()).unwrap();
        let r = rollout(&inst, &params, ConstraintSet::PHASE_A, DecodeMode::Greedy, 5, 0).unwrap();
        for (i, traj) in r.trajectories.iter().enumerate() {
            if !traj.actions.is_empty() {
                assert_eq!(traj.actions[0], i + 1);
            }
        }
    }

    #[test]
    fn rollout_solutions_validate() {
        let params = init_params(10, small_dims()).unwrap();
        for seed in 0..10 {
            let inst = test_instance(200 + seed);
            let r = rollout(&inst, &params, ConstraintSet::PHASE_C, DecodeMode::Greedy, 5, 0)
                .unwrap();
            if r.best.feasible {
                let sol = check_solution(&inst, &r.best.routes, ConstraintSet::PHASE_C).unwrap();
                assert!(sol.feasible);
            }
        }
    }

    #[test]
    fn replay_matches_recorded_log_probs() {
        let inst = test_instance(11);
        let params = init_params(11, small_dims()).unwrap();
        let r = rollout(&inst, &params, ConstraintSet::PHASE_B, DecodeMode::Sample, 3, 42).unwrap();
        for traj in &r.trajectories {
            if traj.actions.is_empty() {
                continue;
            }
            let (lp, ent, _vals) = log_prob_and_entropy(traj, &params).unwrap();
            for (a, b) in lp.iter().zip(&traj.log_probs) {
                assert!((a - b).abs() < 1e-6);
            }
            for (a, b) in ent.iter().zip(&traj.entropies) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_action_mask_zero_entropy() {
        let inst = test_instance(12);
        let params = init_params(12, small_dims()).unwrap();
        // Force the only start; the first step's mask has one entry.
        let r = rollout(&inst, &params, ConstraintSet::PHASE_A, DecodeMode::Greedy, 1, 0).unwrap();
        let traj = &r.trajectories[0];
        assert!(traj.log_probs[0].abs() < 1e-9);
        assert!(traj.entropies[0].abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_exact() {
        let params = init_params(13, small_dims()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn sampled_rollouts_respect_masks() {
        let params = init_params(14, small_dims()).unwrap();
        for seed in 0..30 {
            let inst = test_instance(300 + seed);
            let r = rollout(&inst, &params, ConstraintSet::PHASE_C, DecodeMode::Sample, 5, seed)
                .unwrap();
            for traj in &r.trajectories {
                // Replaying through env::step re-validates every action
                // against the mask; a violation would error out.
                if !traj.actions.is_empty() {
                    log_prob_and_entropy(traj, &params).unwrap();
                }
            }
        }
    }
}
