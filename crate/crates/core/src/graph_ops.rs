//! Learnable layers: linear/MLP building blocks, lane convolution, lane
//! pooling, the temporal CNN and the graph shortcut.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] and are read
//! through a [`Tape`] that has been bound to it.

use rand::Rng;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::geometry::{Pose, Vec2};
use crate::lane_graph::{LaneGraph, RelationKind};

pub const LN_EPS: f64 = 1e-5;
pub const DEFAULT_HOPS: [usize; 6] = [1, 2, 4, 8, 16, 32];
/// Slack added to pooling radii so that nodes sitting exactly on the radius
/// (common with 1 m sampling and a 2 m radius) do not flip in and out of the
/// neighborhood with floating-point noise.
pub const RADIUS_SLACK: f64 = 1e-6;
/// Width of the relative pose feature in lane pooling.
pub const DELTA_DIM: usize = 4;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Uniform `(-a, a)` with `a = sqrt(1 / fan_in)`.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let a = (1.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-a..a)).collect()).expect("shape matches")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.W"), uniform_init(rng, &[in_dim, out_dim], in_dim));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn num_params(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, tape.param(self.w))?;
        match self.b {
            Some(b) => tape.add_row(y, tape.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn num_params(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, tape.param(self.gamma), tape.param(self.beta), LN_EPS)
    }
}

/// LayerNorm followed by ReLU.
fn norm_relu(tape: &mut Tape, norm: &LayerNorm, x: Var) -> Result<Var> {
    let y = norm.forward(tape, x)?;
    tape.relu(y)
}

/// Two linear layers with LayerNorm + ReLU in between, and optionally after.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub l1: Linear,
    pub norm: LayerNorm,
    pub l2: Linear,
    pub norm_out: Option<LayerNorm>,
}

impl Mlp2 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        act_out: bool,
        rng: &mut R,
    ) -> Self {
        let (i, h, o) = dims;
        let l1 = Linear::new(store, &format!("{name}.l1"), i, h, true, rng);
        let norm = LayerNorm::new(store, &format!("{name}.ln1"), h);
        let l2 = Linear::new(store, &format!("{name}.l2"), h, o, true, rng);
        let norm_out = act_out.then(|| LayerNorm::new(store, &format!("{name}.ln2"), o));
        Mlp2 { l1, norm, l2, norm_out }
    }

    pub fn num_params(dims: (usize, usize, usize), act_out: bool) -> usize {
        let (i, h, o) = dims;
        Linear::num_params(i, h, true)
            + LayerNorm::num_params(h)
            + Linear::num_params(h, o, true)
            + if act_out { LayerNorm::num_params(o) } else { 0 }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, x)?;
        let h = norm_relu(tape, &self.norm, h)?;
        let y = self.l2.forward(tape, h)?;
        match &self.norm_out {
            Some(n) => norm_relu(tape, n, y),
            None => Ok(y),
        }
    }
}

/// `F <- relu(LN(F W + sum_{r,n} bool(E_r^n) F W_{n,r}))`.
#[derive(Debug, Clone)]
pub struct LaneConv {
    pub w_self: ParamId,
    pub w_hops: Vec<(RelationKind, usize, ParamId)>,
    pub norm: LayerNorm,
    pub channels: usize,
}

impl LaneConv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, hops: &[usize], rng: &mut R) -> Self {
        let w_self = store.add(format!("{name}.W"), uniform_init(rng, &[channels, channels], channels));
        let mut w_hops = Vec::with_capacity(4 * hops.len());
        for r in RelationKind::ALL {
            for &n in hops {
                let id = store.add(format!("{name}.W_{r}_{n}"), uniform_init(rng, &[channels, channels], channels));
                w_hops.push((r, n, id));
            }
        }
        let norm = LayerNorm::new(store, &format!("{name}.ln"), channels);
        LaneConv { w_self, w_hops, norm, channels }
    }

    pub fn num_params(channels: usize, num_hops: usize) -> usize {
        channels * channels * (1 + RelationKind::ALL.len() * num_hops) + LayerNorm::num_params(channels)
    }

    /// The bracketed sum before LayerNorm and ReLU. Hops whose matrix is empty
    /// are skipped since they contribute exactly zero.
    pub fn pre_activation(&self, tape: &mut Tape, f: Var, graph: &LaneGraph) -> Result<Var> {
        let (m, c) = (tape.value(f).rows(), tape.value(f).cols());
        if c != self.channels || m != graph.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "lane_conv",
                lhs: vec![m, c],
                rhs: vec![graph.len(), self.channels],
            });
        }
        let mut inputs = vec![f];
        let mut weights = vec![tape.param(self.w_self)];
        for &(r, n, id) in &self.w_hops {
            let adj = graph.multi_hop(r, n);
            if adj.is_empty() {
                continue;
            }
            inputs.push(tape.sparse_matmul(adj, f)?);
            weights.push(tape.param(id));
        }
        if inputs.len() == 1 {
            return tape.matmul(f, weights[0]);
        }
        let x = tape.concat_cols(&inputs)?;
        let w = tape.concat_rows(&weights)?;
        tape.matmul(x, w)
    }

    pub fn forward(&self, tape: &mut Tape, f: Var, graph: &LaneGraph) -> Result<Var> {
        let y = self.pre_activation(tape, f, graph)?;
        norm_relu(tape, &self.norm, y)
    }
}

/// Query/source pairs within a radius together with the relative pose of the
/// source in the query frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Neighborhood {
    pub query: Vec<usize>,
    pub source: Vec<usize>,
    /// Per pair: source position in the query frame (x, y), then sin and cos
    /// of the source heading relative to the query heading.
    pub delta: Vec<[f64; DELTA_DIM]>,
}

impl Neighborhood {
    /// Pairs are ordered by query, then by source index.
    pub fn build(queries: &[Pose], sources: &[Pose], radius: f64) -> Self {
        let mut nb = Neighborhood::default();
        let r = radius + RADIUS_SLACK;
        for (qi, q) in queries.iter().enumerate() {
            for (si, s) in sources.iter().enumerate() {
                if q.position.distance(s.position) <= r {
                    let rel = q.to_local(s.position);
                    let dir = q.dir_to_local(s.direction);
                    nb.query.push(qi);
                    nb.source.push(si);
                    nb.delta.push([rel.x, rel.y, dir.y, dir.x]);
                }
            }
        }
        nb
    }

    pub fn len(&self) -> usize {
        self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query.is_empty()
    }
}

/// `f_v = M_b(sum_{k in N(v)} M_a([f_k, delta_vk]))`.
///
/// The first layer of `M_a` is stored as two blocks (feature rows and delta
/// rows) so that the feature block can be applied once per source node rather
/// than once per pair; the result is the same linear map.
#[derive(Debug, Clone)]
pub struct LanePool {
    pub a_feat: ParamId,
    pub a_delta: ParamId,
    pub a_bias: ParamId,
    pub a_norm1: LayerNorm,
    pub a_l2: Linear,
    pub a_norm2: LayerNorm,
    pub mb: Mlp2,
    pub radius: f64,
    pub channels: usize,
}

impl LanePool {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, radius: f64, rng: &mut R) -> Self {
        let c = channels;
        let fan_in = c + DELTA_DIM;
        let a_feat = store.add(format!("{name}.Ma.l1.W_feat"), uniform_init(rng, &[c, c], fan_in));
        let a_delta = store.add(format!("{name}.Ma.l1.W_delta"), uniform_init(rng, &[DELTA_DIM, c], fan_in));
        let a_bias = store.add(format!("{name}.Ma.l1.b"), Tensor::zeros(&[c]));
        let a_norm1 = LayerNorm::new(store, &format!("{name}.Ma.ln1"), c);
        let a_l2 = Linear::new(store, &format!("{name}.Ma.l2"), c, c, true, rng);
        let a_norm2 = LayerNorm::new(store, &format!("{name}.Ma.ln2"), c);
        let mb = Mlp2::new(store, &format!("{name}.Mb"), (c, c, c), false, rng);
        LanePool { a_feat, a_delta, a_bias, a_norm1, a_l2, a_norm2, mb, radius, channels }
    }

    pub fn num_params(channels: usize) -> usize {
        let c = channels;
        Mlp2::num_params((c + DELTA_DIM, c, c), true) + Mlp2::num_params((c, c, c), false)
    }

    /// Per-pair messages `M_a([f_k, delta])`, shape `[pairs, C]`.
    pub fn messages(&self, tape: &mut Tape, nb: &Neighborhood, src_f: Var) -> Result<Var> {
        let proj = tape.matmul(src_f, tape.param(self.a_feat))?;
        let gathered = tape.gather_rows(proj, &nb.source)?;
        let delta = Tensor::new(vec![nb.len(), DELTA_DIM], nb.delta.concat())?;
        let delta = tape.constant(delta);
        let dproj = tape.matmul(delta, tape.param(self.a_delta))?;
        let h = tape.add(gathered, dproj)?;
        let h = tape.add_row(h, tape.param(self.a_bias))?;
        let h = norm_relu(tape, &self.a_norm1, h)?;
        let h = self.a_l2.forward(tape, h)?;
        norm_relu(tape, &self.a_norm2, h)
    }

    /// Sum of messages per query before `M_b`, shape `[queries, C]`.
    pub fn aggregate(&self, tape: &mut Tape, nb: &Neighborhood, num_queries: usize, src_f: Var) -> Result<Var> {
        if nb.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[num_queries, self.channels])));
        }
        let msg = self.messages(tape, nb, src_f)?;
        tape.scatter_add_rows(msg, &nb.query, num_queries)
    }

    pub fn forward_with(&self, tape: &mut Tape, nb: &Neighborhood, num_queries: usize, src_f: Var) -> Result<Var> {
        let agg = self.aggregate(tape, nb, num_queries, src_f)?;
        self.mb.forward(tape, agg)
    }

    /// Pools one feature row per query pose from `sources` / `src_f`.
    pub fn forward(&self, tape: &mut Tape, queries: &[Pose], sources: &[Pose], src_f: Var) -> Result<Var> {
        let nb = Neighborhood::build(queries, sources, self.radius);
        self.forward_with(tape, &nb, queries.len(), src_f)
    }
}

/// Strided 1-D convolutions over time, each followed by LayerNorm + ReLU.
#[derive(Debug, Clone)]
pub struct TemporalCnn {
    pub layers: Vec<(ParamId, ParamId, LayerNorm)>,
    pub channels: usize,
}

pub const TCNN_KERNEL: usize = 3;
pub const TCNN_STRIDE: usize = 2;
pub const TCNN_PAD: usize = 1;
pub const TCNN_LAYERS: usize = 2;

impl TemporalCnn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let c = channels;
        let layers = (0..TCNN_LAYERS)
            .map(|i| {
                let w = store.add(format!("{name}.conv{i}.W"), uniform_init(rng, &[TCNN_KERNEL * c, c], TCNN_KERNEL * c));
                let b = store.add(format!("{name}.conv{i}.b"), Tensor::zeros(&[c]));
                (w, b, LayerNorm::new(store, &format!("{name}.conv{i}.ln"), c))
            })
            .collect();
        TemporalCnn { layers, channels }
    }

    pub fn num_params(channels: usize) -> usize {
        TCNN_LAYERS * (TCNN_KERNEL * channels * channels + channels + LayerNorm::num_params(channels))
    }

    /// Sequence length after all layers.
    pub fn output_len(mut len: usize) -> usize {
        for _ in 0..TCNN_LAYERS {
            len = (len + 2 * TCNN_PAD - TCNN_KERNEL) / TCNN_STRIDE + 1;
        }
        len
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (w, b, norm) in &self.layers {
            h = tape.conv1d(h, tape.param(*w), tape.param(*b), TCNN_KERNEL, TCNN_STRIDE, TCNN_PAD)?;
            h = norm_relu(tape, norm, h)?;
        }
        Ok(h)
    }
}

/// Pools features along the actor's past displacements, summarizes them with
/// the temporal CNN and adds the result to every node.
#[derive(Debug, Clone)]
pub struct Shortcut {
    pub pool: LanePool,
    pub tcnn: TemporalCnn,
    pub out: Linear,
}

impl Shortcut {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, radius: f64, rng: &mut R) -> Self {
        Shortcut {
            pool: LanePool::new(store, &format!("{name}.pool"), channels, radius, rng),
            tcnn: TemporalCnn::new(store, &format!("{name}.tcnn"), channels, rng),
            out: Linear::new(store, &format!("{name}.out"), channels, channels, true, rng),
        }
    }

    pub fn num_params(channels: usize) -> usize {
        LanePool::num_params(channels) + TemporalCnn::num_params(channels) + Linear::num_params(channels, channels, true)
    }

    /// The `[1, C]` summary vector.
    pub fn summary(&self, tape: &mut Tape, nb: &Neighborhood, num_queries: usize, f: Var) -> Result<Var> {
        let pooled = self.pool.forward_with(tape, nb, num_queries, f)?;
        let h = self.tcnn.forward(tape, pooled)?;
        let h = tape.mean_rows(h)?;
        self.out.forward(tape, h)
    }

    pub fn forward_with(&self, tape: &mut Tape, nb: &Neighborhood, num_queries: usize, f: Var) -> Result<Var> {
        let s = self.summary(tape, nb, num_queries, f)?;
        tape.add_row(f, s)
    }

    pub fn forward(&self, tape: &mut Tape, f: Var, nodes: &[Pose], displacements: &[Pose]) -> Result<Var> {
        let nb = Neighborhood::build(displacements, nodes, self.pool.radius);
        self.forward_with(tape, &nb, displacements.len(), f)
    }
}

/// Poses of consecutive displacements of a track: each placed at the end
/// point and pointing along the displacement. Zero-length steps reuse the
/// previous direction (or `fallback` before the first move).
pub fn displacement_poses(track: &[Vec2], fallback: Vec2) -> Vec<Pose> {
    let mut dir = fallback;
    track
        .windows(2)
        .map(|w| {
            if let Some(d) = (w[1] - w[0]).normalized() {
                dir = d;
            }
            Pose::new(w[1], dir)
        })
        .collect()
}
