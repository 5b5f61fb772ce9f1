//! Scene data model, JSON I/O, agent-centric normalization, rotation
//! augmentation and a synthetic scene generator.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec2;
use crate::lane_graph::{build_adjacency, sample_segments, LaneGraph, LaneGraphError, RelationKind, SemanticFlags};

pub const FORMAT_VERSION: u64 = 1;
/// Past points per track (2 s at 10 Hz).
pub const PAST_LEN: usize = 20;
/// Future points per track (3 s at 10 Hz).
pub const FUTURE_LEN: usize = 30;
pub const DT: f64 = 0.1;
/// Minimum distance between consecutive polyline points.
pub const MIN_POINT_GAP: f64 = 0.01;
/// Displacements shorter than this do not define a heading.
pub const HEADING_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("missing field {0}")]
    MissingField(String),
    #[error("unsupported format_version {0}, expected {FORMAT_VERSION}")]
    UnsupportedVersion(String),
    #[error("scene has no agent actor")]
    MissingAgent,
    #[error("scene has {0} agent actors, expected exactly one")]
    MultipleAgents(usize),
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Lane(#[from] LaneGraphError),
    #[error("infeasible generator config: {0}")]
    Infeasible(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorTrack {
    pub actor_id: i64,
    pub is_agent: bool,
    /// Oldest first; the last point is the current position.
    pub past: Vec<Vec2>,
    pub future: Option<Vec<Vec2>>,
}

impl ActorTrack {
    pub fn current(&self) -> Vec2 {
        *self.past.last().expect("validated track has a past")
    }

    /// Direction of the most recent displacement longer than [`HEADING_EPS`].
    pub fn heading_direction(&self) -> Option<Vec2> {
        self.past.windows(2).rev().find_map(|w| {
            let d = w[1] - w[0];
            (d.norm() > HEADING_EPS).then(|| d.normalized()).flatten()
        })
    }

    /// Speed from the last displacement.
    pub fn current_speed(&self, dt: f64) -> f64 {
        match self.past.len() {
            0 | 1 => 0.0,
            n => self.past[n - 1].distance(self.past[n - 2]) / dt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub lane_id: i64,
    pub polyline: Vec<Vec2>,
    pub flags: SemanticFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub actors: Vec<ActorTrack>,
    pub lanes: Vec<Lane>,
    pub topology: Vec<(i64, i64, RelationKind)>,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    format_version: serde_json::Value,
    scene_id: String,
    actors: Vec<ActorTrack>,
    lanes: Vec<Lane>,
    topology: Vec<(i64, i64, RelationKind)>,
}

impl Scene {
    pub fn agent_index(&self) -> Result<usize, SceneError> {
        let mut agents = self.actors.iter().enumerate().filter(|(_, a)| a.is_agent);
        match (agents.next(), agents.count()) {
            (None, _) => Err(SceneError::MissingAgent),
            (Some((i, _)), 0) => Ok(i),
            (Some(_), rest) => Err(SceneError::MultipleAgents(rest + 1)),
        }
    }

    pub fn agent(&self) -> Result<&ActorTrack, SceneError> {
        Ok(&self.actors[self.agent_index()?])
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        self.agent_index()?;
        let bad = |msg: String| Err(SceneError::Invalid(msg));
        for a in &self.actors {
            if a.past.len() < 2 {
                return bad(format!("actor {} has {} past points, need at least 2", a.actor_id, a.past.len()));
            }
            let future = a.future.iter().flatten();
            if !a.past.iter().chain(future).all(|p| p.is_finite()) {
                return bad(format!("actor {} has non-finite coordinates", a.actor_id));
            }
            if a.future.as_ref().is_some_and(Vec::is_empty) {
                return bad(format!("actor {} has an empty future", a.actor_id));
            }
        }
        let mut ids: Vec<i64> = self.lanes.iter().map(|l| l.lane_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate lane ids".into());
        }
        for lane in &self.lanes {
            if lane.polyline.len() < 2 {
                return bad(format!("lane {} has fewer than 2 points", lane.lane_id));
            }
            if !lane.polyline.iter().all(|p| p.is_finite()) {
                return bad(format!("lane {} has non-finite coordinates", lane.lane_id));
            }
            if lane.polyline.windows(2).any(|w| w[0].distance(w[1]) < MIN_POINT_GAP) {
                return bad(format!("lane {} has consecutive points closer than 1 cm", lane.lane_id));
            }
        }
        for &(a, b, _) in &self.topology {
            for id in [a, b] {
                if ids.binary_search(&id).is_err() {
                    return Err(LaneGraphError::UnknownLane(id).into());
                }
            }
        }
        Ok(())
    }

    /// Samples every lane at `spacing` and links the segments.
    pub fn lane_graph(&self, spacing: f64) -> Result<LaneGraph, SceneError> {
        let mut segments = Vec::new();
        for lane in &self.lanes {
            for mut s in sample_segments(&lane.polyline, spacing)? {
                s.lane_id = lane.lane_id;
                s.flags = lane.flags;
                segments.push(s);
            }
        }
        Ok(build_adjacency(segments, &self.topology)?)
    }

    /// Applies `f` to every coordinate in the scene.
    pub fn map_points(&self, f: impl Fn(Vec2) -> Vec2) -> Scene {
        let actors = self
            .actors
            .iter()
            .map(|a| ActorTrack {
                past: a.past.iter().map(|&p| f(p)).collect(),
                future: a.future.as_ref().map(|fu| fu.iter().map(|&p| f(p)).collect()),
                ..a.clone()
            })
            .collect();
        let lanes = self
            .lanes
            .iter()
            .map(|l| Lane { polyline: l.polyline.iter().map(|&p| f(p)).collect(), ..l.clone() })
            .collect();
        Scene { scene_id: self.scene_id.clone(), actors, lanes, topology: self.topology.clone() }
    }

    pub fn to_json(&self) -> String {
        let file = SceneFile {
            format_version: FORMAT_VERSION.into(),
            scene_id: self.scene_id.clone(),
            actors: self.actors.clone(),
            lanes: self.lanes.clone(),
            topology: self.topology.clone(),
        };
        serde_json::to_string_pretty(&file).expect("scene serialization cannot fail")
    }

    /// Parses and validates a scene document.
    pub fn from_json(text: &str) -> Result<Scene, SceneError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| SceneError::Json(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| SceneError::Json("top level is not an object".into()))?;
        for key in ["format_version", "scene_id", "actors", "lanes", "topology"] {
            if !obj.contains_key(key) {
                return Err(SceneError::MissingField(key.into()));
            }
        }
        if obj["format_version"].as_u64() != Some(FORMAT_VERSION) {
            return Err(SceneError::UnsupportedVersion(obj["format_version"].to_string()));
        }
        let file: SceneFile = serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            match msg.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
                Some(field) => SceneError::MissingField(field.to_string()),
                None => SceneError::Json(msg),
            }
        })?;
        let scene = Scene { scene_id: file.scene_id, actors: file.actors, lanes: file.lanes, topology: file.topology };
        scene.validate()?;
        Ok(scene)
    }
}

pub fn read_scene(path: &Path) -> Result<Scene, SceneError> {
    Scene::from_json(&std::fs::read_to_string(path)?)
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<(), SceneError> {
    std::fs::write(path, scene.to_json())?;
    Ok(())
}

/// Rigid transform taking world coordinates into the agent frame:
/// `local = R(rotation) * (world - origin)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationFrame {
    pub origin: Vec2,
    pub rotation: f64,
    /// Set when the agent never moved and the rotation fell back to 0.
    pub degenerate_heading: bool,
}

impl NormalizationFrame {
    pub fn identity() -> Self {
        NormalizationFrame { origin: Vec2::ZERO, rotation: 0.0, degenerate_heading: false }
    }

    pub fn apply(&self, p: Vec2) -> Vec2 {
        (p - self.origin).rotate(self.rotation)
    }

    pub fn invert(&self, p: Vec2) -> Vec2 {
        p.rotate(-self.rotation) + self.origin
    }
}

/// Moves the agent's current position to the origin and its heading onto +x.
pub fn normalize_scene(scene: &Scene) -> Result<(Scene, NormalizationFrame), SceneError> {
    let agent = scene.agent()?;
    if agent.past.len() < 2 {
        return Err(SceneError::Invalid("agent needs at least 2 past points".into()));
    }
    let (rotation, degenerate_heading) = match agent.heading_direction() {
        Some(d) => (-d.angle(), false),
        None => (0.0, true),
    };
    let frame = NormalizationFrame { origin: agent.current(), rotation, degenerate_heading };
    Ok((scene.map_points(|p| frame.apply(p)), frame))
}

/// Rotates every coordinate about the origin by `theta`.
pub fn rotate_scene(scene: &Scene, theta: f64) -> Scene {
    scene.map_points(|p| p.rotate(theta))
}

/// Largest augmentation angle magnitude.
pub const AUGMENT_MAX_ANGLE: f64 = 2.0 * PI / 3.0;

/// Rotates a normalized scene by an angle drawn uniformly from
/// `(-2pi/3, 2pi/3)`. Returns the scene and the angle used.
pub fn augment_rotation<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> (Scene, f64) {
    let theta = loop {
        let t = rng.random_range(-AUGMENT_MAX_ANGLE..AUGMENT_MAX_ANGLE);
        if t != -AUGMENT_MAX_ANGLE {
            break t;
        }
    };
    (rotate_scene(scene, theta), theta)
}

/// Inclusive sampling range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

impl<T> Range<T> {
    pub const fn new(min: T, max: T) -> Self {
        Range { min, max }
    }
}

impl Range<f64> {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

impl Range<usize> {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

/// Synthetic map and traffic parameters.
///
/// Maps are a bundle of parallel lanes (sharing one reference curve) that each
/// continue straight past a junction; the rightmost lane may additionally fork
/// into a turning branch, and a merging lane may join the rightmost
/// continuation. Actors follow lane centers with constant acceleration and may
/// change one lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub lanes: Range<usize>,
    pub lane_width: f64,
    /// Length of the approach before the junction.
    pub main_length: Range<f64>,
    /// Length of the continuation, branch and merge lanes.
    pub exit_length: Range<f64>,
    /// Signed curvature of the reference curve.
    pub curvature: Range<f64>,
    /// Magnitude of the branch curvature; branches turn right.
    pub branch_curvature: Range<f64>,
    pub fork_probability: f64,
    pub merge_probability: f64,
    pub actors: Range<usize>,
    /// Speed at the current time step.
    pub speed: Range<f64>,
    pub accel: Range<f64>,
    pub lane_change_probability: f64,
    /// Probability that an actor on the forking lane takes the branch.
    pub branch_probability: f64,
    pub past_len: usize,
    pub future_len: usize,
    pub dt: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            lanes: Range::new(1, 2),
            lane_width: 3.5,
            main_length: Range::new(30.0, 40.0),
            exit_length: Range::new(25.0, 30.0),
            curvature: Range::new(-0.02, 0.02),
            branch_curvature: Range::new(0.04, 0.08),
            fork_probability: 1.0,
            merge_probability: 0.0,
            actors: Range::new(2, 4),
            speed: Range::new(4.0, 8.0),
            accel: Range::new(-1.0, 1.0),
            lane_change_probability: 0.2,
            branch_probability: 0.5,
            past_len: PAST_LEN,
            future_len: FUTURE_LEN,
            dt: DT,
        }
    }
}

/// Constant-curvature path starting at `start` with heading `heading`.
#[derive(Debug, Clone, Copy)]
struct Arc2 {
    start: Vec2,
    heading: f64,
    curvature: f64,
    length: f64,
}

impl Arc2 {
    fn heading_at(&self, s: f64) -> f64 {
        self.heading + self.curvature * s
    }

    fn point(&self, s: f64) -> Vec2 {
        let k = self.curvature;
        if k.abs() < 1e-12 {
            return self.start + Vec2::from_angle(self.heading) * s;
        }
        let h = self.heading;
        let h1 = self.heading_at(s);
        self.start + Vec2::new((h1.sin() - h.sin()) / k, (h.cos() - h1.cos()) / k)
    }

    /// Point at arc length `s` offset by `d` to the left. Extends along the
    /// end tangents outside `[0, length]`.
    fn offset_point(&self, s: f64, d: f64) -> Vec2 {
        let sc = s.clamp(0.0, self.length);
        let h = self.heading_at(sc);
        let dir = Vec2::from_angle(h);
        self.point(sc) + dir * (s - sc) + dir.perp() * d
    }

    fn end(&self) -> (Vec2, f64) {
        (self.point(self.length), self.heading_at(self.length))
    }

    /// Offset polyline with vertices roughly every meter.
    fn polyline(&self, d: f64) -> Vec<Vec2> {
        let n = self.length.ceil().max(1.0) as usize;
        (0..=n).map(|i| self.offset_point(self.length * i as f64 / n as f64, d)).collect()
    }
}

/// The route an actor follows: reference arcs and a lateral offset profile.
struct Route {
    legs: Vec<(Arc2, f64)>,
}

impl Route {
    fn point(&self, mut s: f64, lateral: f64) -> Vec2 {
        for (i, (arc, base)) in self.legs.iter().enumerate() {
            if s <= arc.length || i + 1 == self.legs.len() {
                return arc.offset_point(s, base + lateral);
            }
            s -= arc.length;
        }
        unreachable!("route has at least one leg")
    }

    fn length(&self) -> f64 {
        self.legs.iter().map(|(a, _)| a.length).sum()
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Builds a random scene. Lane ids: approach lanes `0..n`, continuations
/// `10..10+n`, branch `20`, merge `30`. Actor 0 is the agent.
pub fn generate_synthetic_scene<R: Rng + ?Sized>(
    config: &GeneratorConfig,
    scene_id: &str,
    rng: &mut R,
) -> Result<Scene, SceneError> {
    let c = config;
    if c.lanes.max == 0 || c.lanes.min > c.lanes.max {
        return Err(SceneError::Infeasible("lane count range must allow at least one lane".into()));
    }
    if c.actors.max == 0 || c.actors.min > c.actors.max {
        return Err(SceneError::Infeasible("actor count range must allow at least one actor".into()));
    }
    if c.past_len < 2 || c.future_len == 0 || c.dt <= 0.0 {
        return Err(SceneError::Infeasible("need past_len >= 2, future_len >= 1, dt > 0".into()));
    }
    if c.speed.min < 0.0 || c.main_length.min <= 1.0 || c.exit_length.min <= 1.0 {
        return Err(SceneError::Infeasible("speeds must be nonnegative and lanes longer than 1 m".into()));
    }
    let n_lanes = c.lanes.sample(rng).max(1);
    let w = c.lane_width;
    let kappa = c.curvature.sample(rng);
    if kappa.abs() * w * n_lanes as f64 >= 0.5 {
        return Err(SceneError::Infeasible("curvature too high for the lane bundle".into()));
    }
    let main = Arc2 {
        start: Vec2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)),
        heading: rng.random_range(-PI..PI),
        curvature: kappa,
        length: c.main_length.sample(rng),
    };
    let (junction, junction_heading) = main.end();
    let cont = Arc2 { start: junction, heading: junction_heading, curvature: kappa, length: c.exit_length.sample(rng) };
    let fork = rng.random_bool(c.fork_probability.clamp(0.0, 1.0));
    let branch = Arc2 {
        start: junction,
        heading: junction_heading,
        curvature: -c.branch_curvature.sample(rng).abs(),
        length: c.exit_length.sample(rng),
    };
    let merge = rng.random_bool(c.merge_probability.clamp(0.0, 1.0));

    let plain = SemanticFlags::default();
    let mut lanes = Vec::new();
    let mut topology = Vec::new();
    for j in 0..n_lanes {
        let d = j as f64 * w;
        lanes.push(Lane { lane_id: j as i64, polyline: main.polyline(d), flags: plain });
        let cont_flags = SemanticFlags { is_intersection: fork, ..plain };
        lanes.push(Lane { lane_id: 10 + j as i64, polyline: cont.polyline(d), flags: cont_flags });
        topology.push((j as i64, 10 + j as i64, RelationKind::Successor));
        if j > 0 {
            topology.push((j as i64 - 1, j as i64, RelationKind::LeftNeighbor));
            topology.push((9 + j as i64, 10 + j as i64, RelationKind::LeftNeighbor));
        }
    }
    if fork {
        let flags = SemanticFlags { is_turn: true, is_intersection: true, has_traffic_control: rng.random_bool(0.5) };
        lanes.push(Lane { lane_id: 20, polyline: branch.polyline(0.0), flags });
        topology.push((0, 20, RelationKind::Successor));
    }
    if merge {
        // Approaches the continuation start from the right at a shallow angle.
        let len = c.exit_length.sample(rng);
        let h = junction_heading + 0.25;
        let start = junction - Vec2::from_angle(h) * len;
        let merge_arc = Arc2 { start, heading: h, curvature: 0.0, length: len };
        let mut poly = merge_arc.polyline(0.0);
        poly.pop();
        poly.push(junction);
        lanes.push(Lane { lane_id: 30, polyline: poly, flags: plain });
        topology.push((30, 10, RelationKind::Successor));
    }

    let n_actors = c.actors.sample(rng).max(1);
    let t_past = (c.past_len - 1) as f64 * c.dt;
    let t_future = c.future_len as f64 * c.dt;
    let mut actors = Vec::with_capacity(n_actors);
    for actor_id in 0..n_actors {
        let lane = rng.random_range(0..n_lanes);
        let v = c.speed.sample(rng);
        // Keep the speed positive over the whole track.
        let mut a = c.accel.sample(rng);
        let floor = 0.3_f64.min(v);
        if v - a * t_past < floor {
            a = (v - floor) / t_past;
        }
        if v + a * t_future < floor {
            a = (floor - v) / t_future;
        }
        let take_branch = fork && lane == 0 && rng.random_bool(c.branch_probability.clamp(0.0, 1.0));
        let change_to = if !take_branch && rng.random_bool(c.lane_change_probability.clamp(0.0, 1.0)) {
            let mut options = Vec::new();
            if lane > 0 {
                options.push(lane - 1);
            }
            if lane + 1 < n_lanes {
                options.push(lane + 1);
            }
            (!options.is_empty()).then(|| options[rng.random_range(0..options.len())])
        } else {
            None
        };
        let base = lane as f64 * w;
        let route = if take_branch {
            Route { legs: vec![(main, base), (branch, 0.0)] }
        } else {
            Route { legs: vec![(main, base), (cont, base)] }
        };
        let back = v * t_past - 0.5 * a * t_past * t_past;
        let ahead = v * t_future + 0.5 * a * t_future * t_future;
        let span = route.length() - back - ahead;
        let s_now = if span > 2.0 {
            back + 1.0 + rng.random_range(0.0..(span - 2.0).min(main.length))
        } else {
            back.max(0.0)
        };
        let (t0, dur) = (rng.random_range(-1.0..1.0), 2.0);
        let lateral = |t: f64| match change_to {
            Some(to) => (to as f64 - lane as f64) * w * smoothstep((t - t0) / dur),
            None => 0.0,
        };
        let at = |t: f64| route.point(s_now + v * t + 0.5 * a * t * t, lateral(t));
        let past = (0..c.past_len).map(|i| at(-((c.past_len - 1 - i) as f64) * c.dt)).collect();
        let future = (1..=c.future_len).map(|i| at(i as f64 * c.dt)).collect();
        actors.push(ActorTrack { actor_id: actor_id as i64, is_agent: actor_id == 0, past, future: Some(future) });
    }

    let scene = Scene { scene_id: scene_id.to_string(), actors, lanes, topology };
    scene.validate()?;
    Ok(scene)
}
