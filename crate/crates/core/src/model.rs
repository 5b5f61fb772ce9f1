//! The LaneRCNN network: per-actor encoder, global interactor, goal heads and
//! the trajectory refinement head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Checkpoint, CheckpointError, ParamStore, Tape, Var};
use crate::decode::{select_goals, DecodeError, PredictedMode, TrajectoryProposal};
use crate::geometry::{Pose, Vec2};
use crate::graph_ops::{LaneConv, LanePool, Mlp2, Neighborhood, Shortcut, TemporalCnn, DEFAULT_HOPS};
use crate::lane_graph::{LaneGraph, DEFAULT_SPACING};
use crate::laneroi::{build_roi, LaneRoi, RoiConfig, RoiError};
use crate::scene::{normalize_scene, NormalizationFrame, Scene, SceneError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Roi(#[from] RoiError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("config mismatch: checkpoint has {found}, model expects {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint parameters do not match the model: {0}")]
    ParamMismatch(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaneRcnnConfig {
    pub channels: usize,
    pub hops: Vec<usize>,
    /// Lane convolutions before each shortcut.
    pub convs_per_block: usize,
    /// `[convs_per_block lane convs + shortcut]` blocks in the encoder.
    pub encoder_blocks: usize,
    pub interactor_convs: usize,
    /// Blocks applied after the distribute step.
    pub post_blocks: usize,
    pub pool_radius: f64,
    pub head_hidden: usize,
    pub num_modes: usize,
    pub horizon_steps: usize,
    pub dt: f64,
    pub lane_spacing: f64,
    pub dedup_radius: f64,
    pub roi: RoiConfig,
}

impl Default for LaneRcnnConfig {
    fn default() -> Self {
        LaneRcnnConfig {
            channels: 64,
            hops: DEFAULT_HOPS.to_vec(),
            convs_per_block: 2,
            encoder_blocks: 2,
            interactor_convs: 4,
            post_blocks: 2,
            pool_radius: 2.0,
            head_hidden: 64,
            num_modes: 6,
            horizon_steps: 30,
            dt: 0.1,
            lane_spacing: DEFAULT_SPACING,
            dedup_radius: 2.0,
            roi: RoiConfig::default(),
        }
    }
}

impl LaneRcnnConfig {
    pub fn encoder_lane_convs(&self) -> usize {
        self.encoder_blocks * self.convs_per_block
    }

    pub fn post_lane_convs(&self) -> usize {
        self.post_blocks * self.convs_per_block
    }

    pub fn horizon(&self) -> f64 {
        self.horizon_steps as f64 * self.dt
    }

    /// Canonical JSON embedded in checkpoints.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.channels == 0 || self.head_hidden == 0 {
            return bad("channels and head_hidden must be positive");
        }
        if self.hops.is_empty() || self.hops.contains(&0) {
            return bad("hops must be a non-empty set of positive integers");
        }
        if self.num_modes == 0 || self.horizon_steps == 0 {
            return bad("num_modes and horizon_steps must be positive");
        }
        if !(self.pool_radius > 0.0 && self.dt > 0.0 && self.lane_spacing > 0.0) {
            return bad("pool_radius, dt and lane_spacing must be positive");
        }
        if self.roi.past_len < 2 {
            return bad("roi.past_len must be at least 2");
        }
        Ok(())
    }

    /// Closed-form scalar parameter count.
    pub fn num_params(&self) -> usize {
        let c = self.channels;
        let h = self.hops.len();
        let block = self.convs_per_block * LaneConv::num_params(c, h) + Shortcut::num_params(c);
        Mlp2::num_params((self.roi.feature_dim(), c, c), true)
            + (self.encoder_blocks + self.post_blocks) * block
            + 2 * LanePool::num_params(c)
            + self.interactor_convs * LaneConv::num_params(c, h)
            + Mlp2::num_params((c, self.head_hidden, 1), false)
            + Mlp2::num_params((c, self.head_hidden, 4), false)
            + LanePool::num_params(c)
            + TemporalCnn::num_params(c)
            + Mlp2::num_params((self.refine_input_dim(), self.head_hidden, 2 * self.horizon_steps), false)
    }

    fn refine_input_dim(&self) -> usize {
        TemporalCnn::output_len(self.horizon_steps) * self.channels
    }
}

#[derive(Debug, Clone)]
struct Block {
    convs: Vec<LaneConv>,
    shortcut: Shortcut,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &LaneRcnnConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let convs = (0..cfg.convs_per_block)
            .map(|i| LaneConv::new(store, &format!("{name}.conv{i}"), c, &cfg.hops, rng))
            .collect();
        let shortcut = Shortcut::new(store, &format!("{name}.shortcut"), c, cfg.pool_radius, rng);
        Block { convs, shortcut }
    }

    fn forward(&self, tape: &mut Tape, f: Var, actor: &PreparedActor) -> Result<Var> {
        let mut f = f;
        for conv in &self.convs {
            f = conv.forward(tape, f, &actor.roi.graph)?;
        }
        Ok(self.shortcut.forward_with(tape, &actor.shortcut_nb, actor.roi.displacements.len(), f)?)
    }
}

/// One actor of a prepared scene, in the agent frame.
#[derive(Debug, Clone)]
pub struct PreparedActor {
    /// Index into the scene's actor list.
    pub index: usize,
    pub actor_id: i64,
    pub is_agent: bool,
    pub roi: LaneRoi,
    /// Ground-truth future, if the scene has one.
    pub future: Option<Vec<Vec2>>,
    /// Displacement poses against ROI nodes.
    pub shortcut_nb: Neighborhood,
    /// ROI nodes against scene-graph nodes.
    pub distribute_nb: Neighborhood,
}

/// A scene normalized to the agent frame with every actor's LaneRoI built.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene_id: String,
    pub frame: NormalizationFrame,
    pub graph: LaneGraph,
    pub global_poses: Vec<Pose>,
    pub actors: Vec<PreparedActor>,
    /// Scene-graph nodes against the stacked ROI nodes of all actors.
    pub gather_nb: Neighborhood,
}

impl PreparedScene {
    pub fn agent(&self) -> Option<&PreparedActor> {
        self.actors.iter().find(|a| a.is_agent)
    }
}

/// Normalizes `scene` and builds the LaneRoI of every actor.
pub fn prepare_scene(scene: &Scene, cfg: &LaneRcnnConfig) -> Result<PreparedScene> {
    let (norm, frame) = normalize_scene(scene)?;
    prepare_normalized(&norm, frame, cfg)
}

/// As [`prepare_scene`] for a scene already in the frame the model should
/// work in.
pub fn prepare_normalized(scene: &Scene, frame: NormalizationFrame, cfg: &LaneRcnnConfig) -> Result<PreparedScene> {
    let graph = scene.lane_graph(cfg.lane_spacing)?;
    let global_poses: Vec<Pose> = graph.segments().iter().map(|s| s.pose()).collect();
    let mut actors = Vec::with_capacity(scene.actors.len());
    let mut stacked = Vec::new();
    for (index, track) in scene.actors.iter().enumerate() {
        let roi = build_roi(&graph, track, &cfg.roi)?;
        let shortcut_nb = Neighborhood::build(&roi.displacements, &roi.poses, cfg.pool_radius);
        let distribute_nb = Neighborhood::build(&roi.poses, &global_poses, cfg.pool_radius);
        stacked.extend_from_slice(&roi.poses);
        actors.push(PreparedActor {
            index,
            actor_id: track.actor_id,
            is_agent: track.is_agent,
            future: track.future.clone(),
            roi,
            shortcut_nb,
            distribute_nb,
        });
    }
    let gather_nb = Neighborhood::build(&global_poses, &stacked, cfg.pool_radius);
    Ok(PreparedScene { scene_id: scene.scene_id.clone(), frame, graph, global_poses, actors, gather_nb })
}

/// Per-node head outputs of one actor.
#[derive(Debug, Clone, Copy)]
pub struct ActorOutput {
    /// `[M, C]` node features after the post-interaction stage.
    pub features: Var,
    /// `[M, 1]` goal logits.
    pub logits: Var,
    /// `[M, 4]` residues in the node frame: x, y, sin, cos.
    pub residues: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorPrediction {
    pub actor_id: i64,
    /// Modes in the agent frame, best first.
    pub modes: Vec<PredictedMode>,
}

#[derive(Debug, Clone)]
pub struct LaneRcnn {
    pub config: LaneRcnnConfig,
    pub params: ParamStore,
    input: Mlp2,
    encoder: Vec<Block>,
    gather: LanePool,
    global_convs: Vec<LaneConv>,
    distribute: LanePool,
    post: Vec<Block>,
    cls_head: Mlp2,
    reg_head: Mlp2,
    refine_pool: LanePool,
    refine_tcnn: TemporalCnn,
    refine_mlp: Mlp2,
}

impl LaneRcnn {
    pub fn new(config: LaneRcnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, hid, r) = (config.channels, config.head_hidden, config.pool_radius);
        let input = Mlp2::new(&mut store, "input", (config.roi.feature_dim(), c, c), true, &mut rng);
        let encoder = (0..config.encoder_blocks)
            .map(|i| Block::new(&mut store, &format!("encoder.block{i}"), &config, &mut rng))
            .collect();
        let gather = LanePool::new(&mut store, "interactor.gather", c, r, &mut rng);
        let global_convs = (0..config.interactor_convs)
            .map(|i| LaneConv::new(&mut store, &format!("interactor.conv{i}"), c, &config.hops, &mut rng))
            .collect();
        let distribute = LanePool::new(&mut store, "interactor.distribute", c, r, &mut rng);
        let post = (0..config.post_blocks)
            .map(|i| Block::new(&mut store, &format!("post.block{i}"), &config, &mut rng))
            .collect();
        let cls_head = Mlp2::new(&mut store, "head.cls", (c, hid, 1), false, &mut rng);
        let reg_head = Mlp2::new(&mut store, "head.reg", (c, hid, 4), false, &mut rng);
        let refine_pool = LanePool::new(&mut store, "refine.pool", c, r, &mut rng);
        let refine_tcnn = TemporalCnn::new(&mut store, "refine.tcnn", c, &mut rng);
        let refine_mlp =
            Mlp2::new(&mut store, "refine.mlp", (config.refine_input_dim(), hid, 2 * config.horizon_steps), false, &mut rng);
        Ok(LaneRcnn {
            config,
            params: store,
            input,
            encoder,
            gather,
            global_convs,
            distribute,
            post,
            cls_head,
            reg_head,
            refine_pool,
            refine_tcnn,
            refine_mlp,
        })
    }

    /// A tape bound to the current parameters.
    pub fn tape(&self, record: bool) -> Tape {
        let mut tape = if record { Tape::new() } else { Tape::no_grad() };
        tape.bind(&self.params);
        tape
    }

    /// Input embedding followed by the encoder stack for one actor.
    pub fn encode(&self, tape: &mut Tape, actor: &PreparedActor) -> Result<Var> {
        let x = tape.constant(actor.roi.features.clone());
        let mut f = self.input.forward(tape, x)?;
        for block in &self.encoder {
            f = block.forward(tape, f, actor)?;
        }
        Ok(f)
    }

    /// Pools every actor onto the scene graph, runs the global convolutions
    /// and adds the distributed result back to each actor.
    pub fn interact(&self, tape: &mut Tape, scene: &PreparedScene, feats: &[Var]) -> Result<Vec<Var>> {
        if feats.is_empty() {
            return Ok(Vec::new());
        }
        let stacked = if feats.len() == 1 { feats[0] } else { tape.concat_rows(feats)? };
        let mut g = self.gather.forward_with(tape, &scene.gather_nb, scene.global_poses.len(), stacked)?;
        for conv in &self.global_convs {
            g = conv.forward(tape, g, &scene.graph)?;
        }
        scene
            .actors
            .iter()
            .zip(feats)
            .map(|(actor, &f)| {
                let d = self.distribute.forward_with(tape, &actor.distribute_nb, actor.roi.len(), g)?;
                Ok(tape.add(f, d)?)
            })
            .collect()
    }

    /// Post-interaction blocks for one actor.
    pub fn post_process(&self, tape: &mut Tape, actor: &PreparedActor, f: Var) -> Result<Var> {
        let mut f = f;
        for block in &self.post {
            f = block.forward(tape, f, actor)?;
        }
        Ok(f)
    }

    /// Goal logits `[M, 1]` and residues `[M, 4]`.
    pub fn predict_goals(&self, tape: &mut Tape, f: Var) -> Result<(Var, Var)> {
        let logits = self.cls_head.forward(tape, f)?;
        let residues = self.reg_head.forward(tape, f)?;
        Ok((logits, residues))
    }

    /// Per-step `(ds, d)` residues `[T, 2]` for one proposal, pooled from the
    /// actor's node features along the proposal waypoints.
    pub fn refine_head(&self, tape: &mut Tape, f: Var, node_poses: &[Pose], waypoints: &[Pose]) -> Result<Var> {
        let nb = Neighborhood::build(waypoints, node_poses, self.refine_pool.radius);
        let pooled = self.refine_pool.forward_with(tape, &nb, waypoints.len(), f)?;
        let h = self.refine_tcnn.forward(tape, pooled)?;
        let h = tape.reshape(h, &[1, self.config.refine_input_dim()])?;
        let out = self.refine_mlp.forward(tape, h)?;
        Ok(tape.reshape(out, &[self.config.horizon_steps, 2])?)
    }

    /// Encoder, interactor, post stage and goal heads for every actor.
    pub fn forward(&self, tape: &mut Tape, scene: &PreparedScene) -> Result<Vec<ActorOutput>> {
        let encoded = scene.actors.iter().map(|a| self.encode(tape, a)).collect::<Result<Vec<_>>>()?;
        let interacted = self.interact(tape, scene, &encoded)?;
        scene
            .actors
            .iter()
            .zip(interacted)
            .map(|(actor, f)| {
                let f = self.post_process(tape, actor, f)?;
                let (logits, residues) = self.predict_goals(tape, f)?;
                Ok(ActorOutput { features: f, logits, residues })
            })
            .collect()
    }

    /// Decoded modes for every actor, in the agent frame.
    pub fn predict(&self, scene: &PreparedScene) -> Result<Vec<ActorPrediction>> {
        let mut tape = self.tape(false);
        let outputs = self.forward(&mut tape, scene)?;
        scene
            .actors
            .iter()
            .zip(outputs)
            .map(|(actor, out)| self.decode_actor(&mut tape, actor, out))
            .collect()
    }

    fn decode_actor(&self, tape: &mut Tape, actor: &PreparedActor, out: ActorOutput) -> Result<ActorPrediction> {
        let logits = tape.value(out.logits).data().to_vec();
        let residues: Vec<[f64; 4]> =
            tape.value(out.residues).data().chunks_exact(4).map(|r| [r[0], r[1], r[2], r[3]]).collect();
        let goals = select_goals(&logits, &residues, &actor.roi.poses, self.config.num_modes, self.config.dedup_radius)?;
        let start = actor.roi.actor_pose;
        let mut modes = Vec::with_capacity(goals.len());
        for goal in goals {
            let waypoints =
                match TrajectoryProposal::new(start, goal.pose, actor.roi.speed, goal.score, self.config.horizon(), self.config.dt) {
                    Ok(p) => {
                        let r = self.refine_head(tape, out.features, &actor.roi.poses, &p.waypoint_poses())?;
                        let r: Vec<[f64; 2]> = tape.value(r).data().chunks_exact(2).map(|v| [v[0], v[1]]).collect();
                        p.refine(&r)
                    }
                    Err(DecodeError::ZeroLength) => vec![start.position; self.config.horizon_steps],
                    Err(e) => return Err(e.into()),
                };
            modes.push(PredictedMode { score: goal.score, waypoints });
        }
        Ok(ActorPrediction { actor_id: actor.actor_id, modes })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.config.to_json(), &self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().write(path)?)
    }

    /// Builds a model from the configuration embedded in `ckpt`.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: LaneRcnnConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| CheckpointError::Malformed(format!("embedded config: {e}")))?;
        let mut model = LaneRcnn::new(config, 0)?;
        model.load_weights(ckpt)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Replaces every parameter with the checkpoint's. The embedded config must
    /// equal this model's.
    pub fn load_weights(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let found: LaneRcnnConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| CheckpointError::Malformed(format!("embedded config: {e}")))?;
        if found != self.config {
            return Err(ModelError::ConfigMismatch { expected: self.config.to_json(), found: ckpt.config_json.clone() });
        }
        if ckpt.tensors.len() != self.params.len() {
            return Err(ModelError::ParamMismatch(format!(
                "{} tensors in checkpoint, {} in model",
                ckpt.tensors.len(),
                self.params.len()
            )));
        }
        let ids: Vec<_> = self.params.ids().collect();
        for (id, (name, t)) in ids.into_iter().zip(&ckpt.tensors) {
            if self.params.name(id) != name || self.params.get(id).shape() != t.shape() {
                return Err(ModelError::ParamMismatch(format!("unexpected tensor {name} {:?}", t.shape())));
            }
            *self.params.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// Maps agent-frame predictions back to the original scene frame.
pub fn to_prediction_files(scene: &PreparedScene, preds: &[ActorPrediction]) -> Vec<crate::decode::PredictionFile> {
    preds
        .iter()
        .map(|p| crate::decode::PredictionFile::from_normalized(&scene.scene_id, p.actor_id, &p.modes, &scene.frame))
        .collect()
}
