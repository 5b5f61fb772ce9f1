//! Map-relative output decoding: goal selection, quadratic Bezier proposals,
//! constant-acceleration rollout and Frenet coordinates along a proposal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::sigmoid;
use crate::geometry::{Pose, Vec2};
use crate::scene::NormalizationFrame;

/// Arc-length table resolution per curve.
pub const ARC_TABLE_SAMPLES: usize = 1024;
pub const DEFAULT_DEDUP_RADIUS: f64 = 2.0;
pub const DEFAULT_MAX_LATERAL: f64 = 10.0;
/// Tangent rays meeting farther than this multiple of the chord are treated
/// as parallel.
pub const MAX_CONTROL_REACH: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("zero-length proposal")]
    ZeroLength,
    #[error("cannot select goals from an empty region")]
    NoNodes,
    #[error("need at least one mode")]
    NoModes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrenetPoint {
    pub s: f64,
    /// Positive to the left of the tangent.
    pub d: f64,
}

/// Quadratic Bezier `B(u) = (1-u)^2 P0 + 2u(1-u) P1 + u^2 P2` with a dense
/// table of cumulative chord length at `u_i = i / (N - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BezierCurve {
    pub p0: Vec2,
    pub p1: Vec2,
    pub p2: Vec2,
    table: Vec<f64>,
}

impl BezierCurve {
    pub fn new(p0: Vec2, p1: Vec2, p2: Vec2) -> Self {
        let mut c = BezierCurve { p0, p1, p2, table: Vec::with_capacity(ARC_TABLE_SAMPLES) };
        let mut acc = 0.0;
        let mut prev = p0;
        c.table.push(0.0);
        for i in 1..ARC_TABLE_SAMPLES {
            let p = c.point(i as f64 / (ARC_TABLE_SAMPLES - 1) as f64);
            acc += p.distance(prev);
            c.table.push(acc);
            prev = p;
        }
        c
    }

    pub fn point(&self, u: f64) -> Vec2 {
        let w = 1.0 - u;
        self.p0 * (w * w) + self.p1 * (2.0 * u * w) + self.p2 * (u * u)
    }

    pub fn derivative(&self, u: f64) -> Vec2 {
        (self.p1 - self.p0) * (2.0 * (1.0 - u)) + (self.p2 - self.p1) * (2.0 * u)
    }

    fn second_derivative(&self) -> Vec2 {
        (self.p2 - self.p1 * 2.0 + self.p0) * 2.0
    }

    /// Unit tangent at `u`; falls back to the chord direction where the
    /// derivative vanishes.
    pub fn tangent(&self, u: f64) -> Vec2 {
        self.derivative(u)
            .normalized()
            .or_else(|| (self.p2 - self.p0).normalized())
            .unwrap_or(Vec2::new(1.0, 0.0))
    }

    pub fn length(&self) -> f64 {
        self.table[ARC_TABLE_SAMPLES - 1]
    }

    fn step(&self) -> f64 {
        1.0 / (ARC_TABLE_SAMPLES - 1) as f64
    }

    /// Curve parameter at arc length `s in [0, length]`, linear between table
    /// entries.
    pub fn param_at_length(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.length());
        let i = self.table.partition_point(|&v| v <= s).clamp(1, ARC_TABLE_SAMPLES - 1) - 1;
        let seg = self.table[i + 1] - self.table[i];
        let frac = if seg > 0.0 { ((s - self.table[i]) / seg).clamp(0.0, 1.0) } else { 0.0 };
        (i as f64 + frac) * self.step()
    }

    /// Inverse of [`Self::param_at_length`].
    pub fn length_at_param(&self, u: f64) -> f64 {
        let x = u.clamp(0.0, 1.0) / self.step();
        let i = (x.floor() as usize).min(ARC_TABLE_SAMPLES - 2);
        let frac = x - i as f64;
        self.table[i] + frac * (self.table[i + 1] - self.table[i])
    }

    /// Point at arc length `s`, continuing along the end tangents outside
    /// `[0, length]`.
    pub fn point_at_length(&self, s: f64) -> Vec2 {
        let len = self.length();
        if s < 0.0 {
            self.p0 + self.tangent(0.0) * s
        } else if s > len {
            self.p2 + self.tangent(1.0) * (s - len)
        } else {
            self.point(self.param_at_length(s))
        }
    }

    pub fn tangent_at_length(&self, s: f64) -> Vec2 {
        self.tangent(self.param_at_length(s))
    }

    pub fn pose_at_length(&self, s: f64) -> Pose {
        Pose::new(self.point_at_length(s), self.tangent_at_length(s))
    }

    /// Projects `p` onto the curve: nearest table sample, then Newton steps on
    /// `(B(u) - p) . B'(u) = 0` within the neighboring sample interval.
    pub fn to_frenet(&self, p: Vec2) -> FrenetPoint {
        let h = self.step();
        let mut best = (0, f64::INFINITY);
        for i in 0..ARC_TABLE_SAMPLES {
            let d = self.point(i as f64 * h).distance(p);
            if d < best.1 {
                best = (i, d);
            }
        }
        let lo = best.0.saturating_sub(1) as f64 * h;
        let hi = (best.0 + 1).min(ARC_TABLE_SAMPLES - 1) as f64 * h;
        let mut u = best.0 as f64 * h;
        let dd = self.second_derivative();
        for _ in 0..8 {
            let r = self.point(u) - p;
            let d1 = self.derivative(u);
            let f = r.dot(d1);
            let df = d1.norm_sq() + r.dot(dd);
            if df.abs() < 1e-300 {
                break;
            }
            let next = (u - f / df).clamp(lo, hi);
            if (next - u).abs() < 1e-15 {
                u = next;
                break;
            }
            u = next;
        }
        // Beyond either end the projection continues along the end tangent.
        if u <= 0.0 {
            let t = self.tangent(0.0);
            let r = p - self.p0;
            if r.dot(t) < 0.0 {
                return FrenetPoint { s: r.dot(t), d: t.cross(r) };
            }
        }
        if u >= 1.0 {
            let t = self.tangent(1.0);
            let r = p - self.p2;
            if r.dot(t) > 0.0 {
                return FrenetPoint { s: self.length() + r.dot(t), d: t.cross(r) };
            }
        }
        let t = self.tangent(u);
        FrenetPoint { s: self.length_at_param(u), d: t.cross(p - self.point(u)) }
    }

    pub fn from_frenet(&self, fp: FrenetPoint) -> Vec2 {
        let pose = self.pose_at_length(fp.s);
        pose.position + pose.direction.perp() * fp.d
    }
}

/// Fits the quadratic whose end tangents follow the two poses: `P1` is where
/// the start ray meets the goal ray traced backwards. When the rays are
/// parallel or meet behind either pose (or absurdly far), `P1` falls back to
/// the chord midpoint and the curve is a straight segment.
pub fn fit_bezier(start: Pose, goal: Pose) -> Result<BezierCurve, DecodeError> {
    let (p0, p2) = (start.position, goal.position);
    let chord = p2 - p0;
    let dist = chord.norm();
    if dist < 1e-9 {
        return Err(DecodeError::ZeroLength);
    }
    let (d0, d2) = (start.direction, goal.direction);
    let denom = d0.cross(d2);
    let midpoint = p0.lerp(p2, 0.5);
    let p1 = if denom.abs() < 1e-9 {
        midpoint
    } else {
        let t = chord.cross(d2) / denom;
        let u = d0.cross(chord) / denom;
        let reach = MAX_CONTROL_REACH * dist;
        let min_reach = 1e-6 * dist;
        if t > min_reach && u > min_reach && t < reach && u < reach {
            p0 + d0 * t
        } else {
            midpoint
        }
    };
    Ok(BezierCurve::new(p0, p1, p2))
}

/// `a = 2 (s - v T) / T^2` for a path of length `s`.
pub fn rollout_acceleration(length: f64, v: f64, horizon: f64) -> f64 {
    2.0 * (length - v * horizon) / (horizon * horizon)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub accel: f64,
    /// Arc length at `dt, 2 dt, ..., horizon`.
    pub s: Vec<f64>,
    pub waypoints: Vec<Vec2>,
}

/// Constant-acceleration profile reaching the curve end at `horizon`. Arc
/// length never decreases (a decelerating profile holds its maximum) and is
/// clamped to `[0, length]`.
pub fn rollout(curve: &BezierCurve, v: f64, horizon: f64, dt: f64) -> Rollout {
    let len = curve.length();
    let accel = rollout_acceleration(len, v, horizon);
    let steps = (horizon / dt).round() as usize;
    let mut s = Vec::with_capacity(steps);
    let mut prev = 0.0_f64;
    for k in 1..=steps {
        let t = if k == steps { horizon } else { k as f64 * dt };
        let raw = v * t + 0.5 * accel * t * t;
        let cur = raw.max(prev).clamp(0.0, len);
        s.push(cur);
        prev = cur;
    }
    let waypoints = s.iter().map(|&si| curve.point_at_length(si)).collect();
    Rollout { accel, s, waypoints }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Goal {
    /// Local node index within the ROI.
    pub node: usize,
    pub pose: Pose,
    pub score: f64,
}

/// Goal pose implied by a node and its regressed residue. The residue is in
/// the node frame: offset `(x, y)` and `(sin, cos)` of the heading change.
pub fn goal_pose(node: &Pose, residue: &[f64; 4]) -> Pose {
    let position = node.to_world(Vec2::new(residue[0], residue[1]));
    let turn = Vec2::new(residue[3], residue[2]).normalized().unwrap_or(Vec2::new(1.0, 0.0));
    Pose::new(position, node.dir_to_world(turn))
}

/// Regression target for a node given the ground-truth final pose; inverse of
/// [`goal_pose`] for unit heading vectors.
pub fn goal_residue(node: &Pose, gt: &Pose) -> [f64; 4] {
    let rel = node.to_local(gt.position);
    let turn = node.dir_to_local(gt.direction);
    [rel.x, rel.y, turn.y, turn.x]
}

/// Greedy non-maximum suppression over nodes ranked by score (ties to the
/// lower index). A candidate within `dedup_radius` of an already chosen goal
/// is skipped; skipped nodes refill the list if fewer than `k` survive, and
/// the ranking repeats if the region has fewer than `k` nodes.
pub fn select_goals(
    logits: &[f64],
    residues: &[[f64; 4]],
    poses: &[Pose],
    k: usize,
    dedup_radius: f64,
) -> Result<Vec<Goal>, DecodeError> {
    if logits.is_empty() {
        return Err(DecodeError::NoNodes);
    }
    if k == 0 {
        return Err(DecodeError::NoModes);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let goal = |i: usize| Goal { node: i, pose: goal_pose(&poses[i], &residues[i]), score: sigmoid(logits[i]) };
    let mut picked: Vec<Goal> = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    for &i in &order {
        if picked.len() == k {
            break;
        }
        let g = goal(i);
        if picked.iter().any(|p| p.pose.position.distance(g.pose.position) < dedup_radius) {
            skipped.push(g);
        } else {
            picked.push(g);
        }
    }
    let mut refill = skipped.into_iter();
    while picked.len() < k {
        match refill.next() {
            Some(g) => picked.push(g),
            None => break,
        }
    }
    let mut cycle = order.iter().cycle();
    while picked.len() < k {
        picked.push(goal(*cycle.next().expect("order is non-empty")));
    }
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryProposal {
    pub curve: BezierCurve,
    pub v: f64,
    pub rollout: Rollout,
    pub score: f64,
}

impl TrajectoryProposal {
    pub fn new(start: Pose, goal: Pose, v: f64, score: f64, horizon: f64, dt: f64) -> Result<Self, DecodeError> {
        let curve = fit_bezier(start, goal)?;
        let rollout = rollout(&curve, v.max(0.0), horizon, dt);
        Ok(TrajectoryProposal { curve, v, rollout, score })
    }

    /// Pose on the curve at every rolled-out waypoint.
    pub fn waypoint_poses(&self) -> Vec<Pose> {
        self.rollout.s.iter().map(|&s| self.curve.pose_at_length(s)).collect()
    }

    /// Applies per-step `(ds, d)` residues in the proposal's Frenet frame.
    pub fn refine(&self, residues: &[[f64; 2]]) -> Vec<Vec2> {
        self.rollout
            .s
            .iter()
            .zip(residues)
            .map(|(&s, r)| self.curve.from_frenet(FrenetPoint { s: s + r[0], d: r[1] }))
            .collect()
    }

    /// Frenet regression targets `(s_gt - s(t), d_gt)` for a ground-truth
    /// track; `None` where the point is farther than `max_lateral` from the
    /// curve.
    pub fn refine_targets(&self, gt: &[Vec2], max_lateral: f64) -> Vec<Option<[f64; 2]>> {
        self.rollout
            .s
            .iter()
            .zip(gt)
            .map(|(&s, &p)| {
                let f = self.curve.to_frenet(p);
                (f.d.abs() <= max_lateral).then_some([f.s - s, f.d])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedMode {
    pub score: f64,
    pub waypoints: Vec<Vec2>,
}

/// Per-actor prediction file, coordinates in the original scene frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub scene_id: String,
    pub actor_id: i64,
    pub modes: Vec<PredictedMode>,
}

impl PredictionFile {
    /// Maps agent-frame modes back through `frame`.
    pub fn from_normalized(scene_id: &str, actor_id: i64, modes: &[PredictedMode], frame: &NormalizationFrame) -> Self {
        let modes = modes
            .iter()
            .map(|m| PredictedMode { score: m.score, waypoints: m.waypoints.iter().map(|&p| frame.invert(p)).collect() })
            .collect();
        PredictionFile { scene_id: scene_id.to_string(), actor_id, modes }
    }
}
