//! Lane segments, typed lane adjacency and multi-hop boolean connectivity.
//!
//! Lanes are resampled into fixed-length segments; each segment is one graph
//! node. Four relation types connect nodes. `Successor[p][q]` is set when `q`
//! directly follows `p` along a lane, `LeftNeighbor[p][q]` when `q` is the
//! closest segment of the lane to the left of `p`. `Predecessor` and
//! `RightNeighbor` are the transposes of those two.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Vec2};

/// Production segment length in meters.
pub const DEFAULT_SPACING: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum LaneGraphError {
    #[error("polyline too short: length {length:.3} m < spacing {spacing} m")]
    PolylineTooShort { length: f64, spacing: f64 },
    #[error("polyline needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("spacing must be positive, got {0}")]
    BadSpacing(f64),
    #[error("topology references unknown lane id {0}")]
    UnknownLane(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SemanticFlags {
    pub is_turn: bool,
    pub has_traffic_control: bool,
    pub is_intersection: bool,
}

impl SemanticFlags {
    pub fn as_features(&self) -> [f64; 3] {
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        [b(self.is_turn), b(self.has_traffic_control), b(self.is_intersection)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneSegment {
    pub id: usize,
    pub center: Vec2,
    /// Unit tangent.
    pub direction: Vec2,
    pub length: f64,
    /// Signed heading change per meter (positive turns left).
    pub curvature: f64,
    pub lane_id: i64,
    pub flags: SemanticFlags,
}

impl LaneSegment {
    pub fn heading(&self) -> f64 {
        self.direction.angle()
    }

    pub fn pose(&self) -> crate::geometry::Pose {
        crate::geometry::Pose::new(self.center, self.direction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationKind {
    #[serde(rename = "pre")]
    Predecessor,
    #[serde(rename = "suc")]
    Successor,
    #[serde(rename = "left")]
    LeftNeighbor,
    #[serde(rename = "right")]
    RightNeighbor,
}

impl RelationKind {
    pub const ALL: [RelationKind; 4] = [
        RelationKind::Predecessor,
        RelationKind::Successor,
        RelationKind::LeftNeighbor,
        RelationKind::RightNeighbor,
    ];

    pub fn index(self) -> usize {
        match self {
            RelationKind::Predecessor => 0,
            RelationKind::Successor => 1,
            RelationKind::LeftNeighbor => 2,
            RelationKind::RightNeighbor => 3,
        }
    }

    pub fn inverse(self) -> RelationKind {
        match self {
            RelationKind::Predecessor => RelationKind::Successor,
            RelationKind::Successor => RelationKind::Predecessor,
            RelationKind::LeftNeighbor => RelationKind::RightNeighbor,
            RelationKind::RightNeighbor => RelationKind::LeftNeighbor,
        }
    }

    /// Short name used in parameter names and the scene format.
    pub fn short_name(self) -> &'static str {
        match self {
            RelationKind::Predecessor => "pre",
            RelationKind::Successor => "suc",
            RelationKind::LeftNeighbor => "left",
            RelationKind::RightNeighbor => "right",
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Square boolean matrix stored as sorted, deduplicated column lists per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseBool {
    n: usize,
    rows: Vec<Vec<u32>>,
}

impl SparseBool {
    pub fn empty(n: usize) -> Self {
        SparseBool { n, rows: vec![Vec::new(); n] }
    }

    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut rows = vec![Vec::new(); n];
        for (p, q) in edges {
            assert!(p < n && q < n, "edge ({p},{q}) out of range for {n} nodes");
            rows[p].push(q as u32);
        }
        for r in &mut rows {
            r.sort_unstable();
            r.dedup();
        }
        SparseBool { n, rows }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(Vec::is_empty)
    }

    pub fn row(&self, p: usize) -> &[u32] {
        &self.rows[p]
    }

    pub fn contains(&self, p: usize, q: usize) -> bool {
        self.rows[p].binary_search(&(q as u32)).is_ok()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(p, r)| r.iter().map(move |&q| (p, q as usize)))
    }

    pub fn transpose(&self) -> SparseBool {
        SparseBool::from_edges(self.n, self.edges().map(|(p, q)| (q, p)))
    }

    /// Boolean-semiring product (OR of ANDs); entries are 0/1, never counts.
    pub fn bool_mul(&self, other: &SparseBool) -> SparseBool {
        assert_eq!(self.n, other.n);
        let mut mark = vec![usize::MAX; self.n];
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(p, r)| {
                let mut out = Vec::new();
                for &mid in r {
                    for &q in &other.rows[mid as usize] {
                        if mark[q as usize] != p {
                            mark[q as usize] = p;
                            out.push(q);
                        }
                    }
                }
                out.sort_unstable();
                out
            })
            .collect();
        SparseBool { n: self.n, rows }
    }

    /// Restriction to the sub-matrix indexed by `nodes` (in the given order).
    pub fn restrict(&self, nodes: &[usize]) -> SparseBool {
        let mut local = HashMap::with_capacity(nodes.len());
        for (i, &g) in nodes.iter().enumerate() {
            local.insert(g, i);
        }
        let edges = nodes.iter().enumerate().flat_map(|(i, &g)| {
            let local = &local;
            self.rows[g].iter().filter_map(move |&q| local.get(&(q as usize)).map(|&j| (i, j)))
        });
        SparseBool::from_edges(nodes.len(), edges.collect::<Vec<_>>())
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        let mut d = vec![vec![false; self.n]; self.n];
        for (p, q) in self.edges() {
            d[p][q] = true;
        }
        d
    }
}

/// Directed lane graph with cached multi-hop adjacencies.
#[derive(Debug)]
pub struct LaneGraph {
    segments: Vec<LaneSegment>,
    adjacency: [SparseBool; 4],
    hop_cache: RwLock<HashMap<(RelationKind, usize), Arc<SparseBool>>>,
}

impl Clone for LaneGraph {
    fn clone(&self) -> Self {
        let cache = self.hop_cache.read().expect("hop cache poisoned").clone();
        LaneGraph {
            segments: self.segments.clone(),
            adjacency: self.adjacency.clone(),
            hop_cache: RwLock::new(cache),
        }
    }
}

impl LaneGraph {
    /// Builds a graph from explicit adjacencies. `Predecessor` and
    /// `RightNeighbor` are derived from `successor` and `left`.
    pub fn from_parts(segments: Vec<LaneSegment>, successor: SparseBool, left: SparseBool) -> Self {
        let n = segments.len();
        assert_eq!(successor.size(), n);
        assert_eq!(left.size(), n);
        let adjacency = [successor.transpose(), successor, left.clone(), left.transpose()];
        LaneGraph { segments, adjacency, hop_cache: RwLock::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[LaneSegment] {
        &self.segments
    }

    pub fn segment(&self, i: usize) -> &LaneSegment {
        &self.segments[i]
    }

    pub fn adjacency(&self, r: RelationKind) -> &SparseBool {
        &self.adjacency[r.index()]
    }

    /// `bool(E_r^n)`: entry `(p, q)` is set iff a directed walk of exactly `n`
    /// edges of relation `r` runs from `p` to `q`.
    pub fn multi_hop(&self, r: RelationKind, n: usize) -> Arc<SparseBool> {
        assert!(n >= 1, "hop count must be >= 1");
        if let Some(m) = self.hop_cache.read().expect("hop cache poisoned").get(&(r, n)) {
            return Arc::clone(m);
        }
        let result = if n == 1 {
            Arc::new(self.adjacency[r.index()].clone())
        } else {
            // Binary decomposition: bool(E^(a+b)) = bool(E^a) * bool(E^b).
            let half = n / 2;
            let h = self.multi_hop(r, half);
            let mut m = h.bool_mul(&h);
            if n % 2 == 1 {
                m = m.bool_mul(&self.adjacency[r.index()]);
            }
            Arc::new(m)
        };
        self.hop_cache
            .write()
            .expect("hop cache poisoned")
            .entry((r, n))
            .or_insert(result)
            .clone()
    }

    /// Subgraph induced by `nodes`; local index `i` corresponds to `nodes[i]`.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> LaneGraph {
        let segments = nodes
            .iter()
            .enumerate()
            .map(|(i, &g)| LaneSegment { id: i, ..self.segments[g].clone() })
            .collect();
        let suc = self.adjacency(RelationKind::Successor).restrict(nodes);
        let left = self.adjacency(RelationKind::LeftNeighbor).restrict(nodes);
        LaneGraph::from_parts(segments, suc, left)
    }

    /// Index of the segment whose center is closest to `p`; ties go to the
    /// lower index. `None` for an empty graph.
    pub fn nearest_segment(&self, p: Vec2) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in self.segments.iter().enumerate() {
            let d = s.center.distance(p);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Total length of a polyline.
pub fn polyline_length(points: &[Vec2]) -> f64 {
    points.windows(2).map(|w| w[0].distance(w[1])).sum()
}

/// Resamples a polyline into segments of length `spacing`, centered at arc
/// lengths `spacing/2, 3*spacing/2, ...`. Only whole segments are kept.
/// Returned segments have ids `0..n` and lane id 0.
pub fn sample_segments(polyline: &[Vec2], spacing: f64) -> Result<Vec<LaneSegment>, LaneGraphError> {
    if polyline.len() < 2 {
        return Err(LaneGraphError::TooFewPoints(polyline.len()));
    }
    if spacing.is_nan() || spacing <= 0.0 {
        return Err(LaneGraphError::BadSpacing(spacing));
    }
    let mut cum = Vec::with_capacity(polyline.len());
    cum.push(0.0);
    for w in polyline.windows(2) {
        cum.push(cum.last().unwrap() + w[0].distance(w[1]));
    }
    let total = *cum.last().unwrap();
    let count = (total / spacing + 1e-9).floor() as usize;
    if count == 0 {
        return Err(LaneGraphError::PolylineTooShort { length: total, spacing });
    }

    let mut piece = 0usize;
    let mut centers = Vec::with_capacity(count);
    for k in 0..count {
        let s = spacing * (k as f64 + 0.5);
        // Skip zero-length pieces and advance to the piece containing s.
        while piece + 2 < cum.len() && (cum[piece + 1] < s || cum[piece + 1] - cum[piece] <= 0.0) {
            piece += 1;
        }
        let (a, b) = (polyline[piece], polyline[piece + 1]);
        let len = cum[piece + 1] - cum[piece];
        let t = if len > 0.0 { ((s - cum[piece]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let dir = (b - a).normalized().unwrap_or(Vec2::new(1.0, 0.0));
        centers.push((a.lerp(b, t), dir));
    }

    let headings: Vec<f64> = centers.iter().map(|(_, d)| d.angle()).collect();
    let mut curvature = vec![0.0; count];
    for i in 0..count.saturating_sub(1) {
        curvature[i] = wrap_angle(headings[i + 1] - headings[i]) / spacing;
    }
    if count >= 2 {
        curvature[count - 1] = curvature[count - 2];
    }

    Ok(centers
        .into_iter()
        .zip(curvature)
        .enumerate()
        .map(|(id, ((center, direction), curvature))| LaneSegment {
            id,
            center,
            direction,
            length: spacing,
            curvature,
            lane_id: 0,
            flags: SemanticFlags::default(),
        })
        .collect())
}

/// Connects segments into a [`LaneGraph`].
///
/// `segments` must list each lane's segments contiguously in driving order.
/// A topology entry `(a, b, r)` reads "lane `b` is the `r` of lane `a`".
/// Cross-lane successor edges join the last segment of the earlier lane to the
/// first of the later one. Neighbor edges join every segment to its nearest
/// (by center, lowest id on ties) segment of the neighbor lane, in both
/// directions, so that the right relation is exactly the left one transposed.
pub fn build_adjacency(
    segments: Vec<LaneSegment>,
    lane_topology: &[(i64, i64, RelationKind)],
) -> Result<LaneGraph, LaneGraphError> {
    let mut lanes: HashMap<i64, Vec<usize>> = HashMap::new();
    for (i, s) in segments.iter().enumerate() {
        lanes.entry(s.lane_id).or_default().push(i);
    }
    let lane = |id: i64| lanes.get(&id).ok_or(LaneGraphError::UnknownLane(id));

    let mut suc = BTreeSet::new();
    let mut left = BTreeSet::new();
    for ids in lanes.values() {
        for w in ids.windows(2) {
            suc.insert((w[0], w[1]));
        }
    }

    let nearest_in = |p: usize, candidates: &[usize]| -> usize {
        let c = segments[p].center;
        let mut best = candidates[0];
        let mut best_d = f64::INFINITY;
        for &q in candidates {
            let d = segments[q].center.distance(c);
            if d < best_d || (d == best_d && q < best) {
                best = q;
                best_d = d;
            }
        }
        best
    };
    // left_of: (right lane, left lane)
    let mut connect_left = |right_lane: &[usize], left_lane: &[usize]| {
        for &p in right_lane {
            left.insert((p, nearest_in(p, left_lane)));
        }
        for &q in left_lane {
            left.insert((nearest_in(q, right_lane), q));
        }
    };

    for &(a, b, r) in lane_topology {
        let la = lane(a)?;
        let lb = lane(b)?;
        match r {
            RelationKind::Successor => {
                suc.insert((*la.last().unwrap(), lb[0]));
            }
            RelationKind::Predecessor => {
                suc.insert((*lb.last().unwrap(), la[0]));
            }
            RelationKind::LeftNeighbor => connect_left(la, lb),
            RelationKind::RightNeighbor => connect_left(lb, la),
        }
    }

    let n = segments.len();
    let segments = segments
        .into_iter()
        .enumerate()
        .map(|(id, s)| LaneSegment { id, ..s })
        .collect();
    Ok(LaneGraph::from_parts(
        segments,
        SparseBool::from_edges(n, suc),
        SparseBool::from_edges(n, left),
    ))
}
