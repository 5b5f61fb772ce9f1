//! Per-actor lane regions of interest and their input node features.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::geometry::{Pose, Vec2};
use crate::graph_ops::displacement_poses;
use crate::lane_graph::{LaneGraph, RelationKind};
use crate::scene::ActorTrack;

#[derive(Debug, Error, PartialEq)]
pub enum RoiError {
    #[error("lane map is empty")]
    EmptyMap,
    #[error("actor {0} needs at least 2 past points")]
    ShortHistory(i64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiConfig {
    /// Extra range beyond the distance covered at the current speed.
    pub buffer: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Motion features vanish for nodes farther than this from the track.
    pub clamp_radius: f64,
    pub position_scale: f64,
    pub curvature_scale: f64,
    /// Number of past points the motion block describes.
    pub past_len: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            buffer: 20.0,
            horizon: 3.0,
            dt: 0.1,
            clamp_radius: 5.0,
            position_scale: 10.0,
            curvature_scale: 0.1,
            past_len: 20,
        }
    }
}

impl RoiConfig {
    pub fn motion_steps(&self) -> usize {
        self.past_len - 1
    }

    /// Width of one node's input feature row.
    pub fn feature_dim(&self) -> usize {
        GEOMETRIC_DIM + SEMANTIC_DIM + MOTION_STEP_DIM * self.motion_steps()
    }

    /// `D = v * T + buffer`.
    pub fn range(&self, speed: f64) -> f64 {
        speed * self.horizon + self.buffer
    }
}

/// Center x, y, sin and cos of the heading, curvature.
pub const GEOMETRIC_DIM: usize = 5;
pub const SEMANTIC_DIM: usize = 3;
/// Relative x, y, sin and cos of the relative heading.
pub const MOTION_STEP_DIM: usize = 4;

/// An actor's lane subgraph. Row `i` of every per-node quantity refers to
/// scene-graph node `node_ids[i]`.
#[derive(Debug, Clone)]
pub struct LaneRoi {
    pub actor_id: i64,
    pub node_ids: Vec<usize>,
    pub graph: LaneGraph,
    pub poses: Vec<Pose>,
    /// `[M, feature_dim]` standardized input features.
    pub features: Tensor,
    /// Current position and heading of the actor.
    pub actor_pose: Pose,
    pub speed: f64,
    /// Pose of every past displacement, oldest first.
    pub displacements: Vec<Pose>,
}

impl LaneRoi {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    /// Local index of scene node `global`, if it belongs to the ROI.
    pub fn local_index(&self, global: usize) -> Option<usize> {
        self.node_ids.binary_search(&global).ok()
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Entry {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
    }
}

/// Multi-source shortest path along `r` edges; the step cost between two
/// segments is the distance between their centers measured along the lane,
/// i.e. half of each length.
fn within_range(graph: &LaneGraph, seeds: &BTreeSet<usize>, r: RelationKind, range: f64) -> BTreeSet<usize> {
    let mut dist = vec![f64::INFINITY; graph.len()];
    let mut heap = BinaryHeap::new();
    for &s in seeds {
        dist[s] = 0.0;
        heap.push(Entry(0.0, s));
    }
    let adj = graph.adjacency(r);
    while let Some(Entry(d, p)) = heap.pop() {
        if d > dist[p] {
            continue;
        }
        for &q in adj.row(p) {
            let q = q as usize;
            let nd = d + 0.5 * (graph.segment(p).length + graph.segment(q).length);
            if nd <= range && nd < dist[q] {
                dist[q] = nd;
                heap.push(Entry(nd, q));
            }
        }
    }
    (0..graph.len()).filter(|&i| dist[i].is_finite()).collect()
}

/// Nearest segment of every past position, everything within `D` of those
/// along successor and predecessor edges, and the left/right neighbors of all
/// of that. Returned sorted.
pub fn retrieve_relevant_nodes(graph: &LaneGraph, actor: &ActorTrack, config: &RoiConfig) -> Result<Vec<usize>, RoiError> {
    if graph.is_empty() {
        return Err(RoiError::EmptyMap);
    }
    if actor.past.len() < 2 {
        return Err(RoiError::ShortHistory(actor.actor_id));
    }
    let seeds: BTreeSet<usize> = actor.past.iter().filter_map(|&p| graph.nearest_segment(p)).collect();
    let range = config.range(actor.current_speed(config.dt));
    let mut nodes = within_range(graph, &seeds, RelationKind::Successor, range);
    nodes.extend(within_range(graph, &seeds, RelationKind::Predecessor, range));
    let lateral: Vec<usize> = nodes
        .iter()
        .flat_map(|&p| {
            let l = graph.adjacency(RelationKind::LeftNeighbor).row(p);
            let r = graph.adjacency(RelationKind::RightNeighbor).row(p);
            l.iter().chain(r).map(|&q| q as usize)
        })
        .collect();
    nodes.extend(lateral);
    Ok(nodes.into_iter().collect())
}

/// The actor's current pose; heading from the latest movement, `+x` if it
/// never moved.
pub fn actor_pose(actor: &ActorTrack) -> Pose {
    Pose::new(actor.current(), actor.heading_direction().unwrap_or(Vec2::new(1.0, 0.0)))
}

/// Raw (unscaled) motion feature of one displacement for a node: the
/// displacement end point in the node frame and the relative heading.
pub fn motion_feature(node: &Pose, displacement: &Pose) -> [f64; MOTION_STEP_DIM] {
    let rel = node.to_local(displacement.position);
    let dir = node.dir_to_local(displacement.direction);
    [rel.x, rel.y, dir.y, dir.x]
}

/// Standardized input features, one row per node.
///
/// Geometry is expressed in the actor frame and motion in each node's frame,
/// so rigidly moving the scene leaves the features unchanged. Motion slots are
/// ordered oldest to newest and left-padded with zeros for short histories; a
/// slot is zero when the displacement end point is farther than the clamp
/// radius from the node.
pub fn node_features(graph: &LaneGraph, nodes: &[usize], actor: &ActorTrack, config: &RoiConfig) -> Tensor {
    let pose = actor_pose(actor);
    let steps = config.motion_steps();
    let disp = displacement_poses(&actor.past, pose.direction);
    let disp = &disp[disp.len().saturating_sub(steps)..];
    let pad = steps - disp.len();
    let dim = config.feature_dim();
    let ps = config.position_scale;
    let mut data = Vec::with_capacity(nodes.len() * dim);
    for &g in nodes {
        let seg = graph.segment(g);
        let c = pose.to_local(seg.center);
        let d = pose.dir_to_local(seg.direction);
        data.extend_from_slice(&[c.x / ps, c.y / ps, d.y, d.x, seg.curvature / config.curvature_scale]);
        data.extend_from_slice(&seg.flags.as_features());
        data.extend(std::iter::repeat_n(0.0, pad * MOTION_STEP_DIM));
        let node = seg.pose();
        for dp in disp {
            if seg.center.distance(dp.position) > config.clamp_radius {
                data.extend_from_slice(&[0.0; MOTION_STEP_DIM]);
            } else {
                let [x, y, s, co] = motion_feature(&node, dp);
                data.extend_from_slice(&[x / ps, y / ps, s, co]);
            }
        }
    }
    Tensor::new(vec![nodes.len(), dim], data).expect("feature row width is fixed")
}

pub fn build_roi(graph: &LaneGraph, actor: &ActorTrack, config: &RoiConfig) -> Result<LaneRoi, RoiError> {
    let node_ids = retrieve_relevant_nodes(graph, actor, config)?;
    let features = node_features(graph, &node_ids, actor, config);
    let sub = graph.induced_subgraph(&node_ids);
    let poses = sub.segments().iter().map(|s| s.pose()).collect();
    let pose = actor_pose(actor);
    let steps = config.motion_steps();
    let disp = displacement_poses(&actor.past, pose.direction);
    let displacements = disp[disp.len().saturating_sub(steps)..].to_vec();
    Ok(LaneRoi {
        actor_id: actor.actor_id,
        node_ids,
        graph: sub,
        poses,
        features,
        actor_pose: pose,
        speed: actor.current_speed(config.dt),
        displacements,
    })
}
