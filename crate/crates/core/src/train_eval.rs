//! Losses, the training loop and forecasting metrics.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{adam_step, clip_global_norm, step_lr, AdamState, AutodiffError, Tape, Tensor, Var};
use crate::decode::{goal_pose, goal_residue, DecodeError, PredictedMode, TrajectoryProposal};
use crate::geometry::{Pose, Vec2};
use crate::graph_ops::displacement_poses;
use crate::model::{prepare_normalized, prepare_scene, LaneRcnn, ModelError, PreparedActor, PreparedScene};
use crate::scene::{augment_rotation, normalize_scene, Scene};

pub const GOAL_OUTSIDE_ROI: &str = "GT goal outside roi";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{GOAL_OUTSIDE_ROI}: nearest node is {0:.2} m from the goal")]
    GoalOutsideRoi(f64),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite loss at epoch {epoch} step {step}; diagnostic: {dump}")]
    NonFinite { epoch: usize, step: usize, dump: String },
    #[error("actor {actor_id} has {got} predicted modes, need {need}")]
    TooFewModes { actor_id: i64, got: usize, need: usize },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5, beta: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Nodes farther than this from the goal are negatives.
    pub negative_radius: f64,
    pub ohem_fraction: f64,
    pub ohem_max: usize,
    pub smooth_l1_delta: f64,
    /// Refinement timesteps farther than this from the proposal are ignored.
    pub max_lateral: f64,
    /// Supervise every actor with a future instead of the agent alone.
    pub supervise_all_actors: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            negative_radius: 6.0,
            ohem_fraction: 0.25,
            ohem_max: 100,
            smooth_l1_delta: 1.0,
            max_lateral: 10.0,
            supervise_all_actors: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeLabel {
    Positive,
    Negative,
    DontCare,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeLabeling {
    pub labels: Vec<NodeLabel>,
    pub positive: usize,
}

impl NodeLabeling {
    pub fn negatives(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == NodeLabel::Negative).collect()
    }
}

/// The node nearest the goal (lower index on ties) is the positive; nodes
/// beyond `negative_radius` are negatives. A goal farther than
/// `negative_radius` from every node has no usable positive.
pub fn label_nodes(poses: &[Pose], goal: Vec2, negative_radius: f64) -> Result<NodeLabeling> {
    let dist: Vec<f64> = poses.iter().map(|p| p.position.distance(goal)).collect();
    let mut positive = None;
    for (i, &d) in dist.iter().enumerate() {
        if positive.is_none_or(|p: usize| d < dist[p]) {
            positive = Some(i);
        }
    }
    let positive = positive.ok_or(TrainError::GoalOutsideRoi(f64::INFINITY))?;
    if dist[positive] > negative_radius {
        return Err(TrainError::GoalOutsideRoi(dist[positive]));
    }
    let labels = dist
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if i == positive {
                NodeLabel::Positive
            } else if d > negative_radius {
                NodeLabel::Negative
            } else {
                NodeLabel::DontCare
            }
        })
        .collect();
    Ok(NodeLabeling { labels, positive })
}

/// Negatives used by the classification loss: a random `fraction` of all
/// negatives (rounded up), then the `max_keep` with the highest loss (lower
/// index on ties). Returned in ascending index order.
pub fn mine_negatives(logits: &[f64], labeling: &NodeLabeling, fraction: f64, max_keep: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let neg = labeling.negatives();
    if neg.is_empty() {
        return neg;
    }
    let count = ((neg.len() as f64 * fraction).ceil() as usize).clamp(1, neg.len());
    let mut picked: Vec<usize> = sample(rng, neg.len(), count).into_iter().map(|i| neg[i]).collect();
    picked.sort_unstable();
    if picked.len() > max_keep {
        let loss = |i: usize| crate::autodiff::bce_logit(logits[i], 0.0);
        picked.sort_by(|&a, &b| loss(b).total_cmp(&loss(a)).then(a.cmp(&b)));
        picked.truncate(max_keep);
        picked.sort_unstable();
    }
    picked
}

/// `mean(BCE(positive)) + mean(BCE(selected negatives))`.
pub fn loss_cls(
    tape: &mut Tape,
    logits: Var,
    labeling: &NodeLabeling,
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let values = tape.value(logits).data().to_vec();
    if values.len() != labeling.labels.len() {
        return Err(TrainError::Invalid(format!("{} logits for {} labels", values.len(), labeling.labels.len())));
    }
    let pos = tape.gather_rows(logits, &[labeling.positive])?;
    let pos = tape.bce_with_logits(pos, &Tensor::full(&[1, 1], 1.0))?;
    let mut loss = tape.mean(pos)?;
    let neg = mine_negatives(&values, labeling, cfg.ohem_fraction, cfg.ohem_max, rng);
    if !neg.is_empty() {
        let n = tape.gather_rows(logits, &neg)?;
        let n = tape.bce_with_logits(n, &Tensor::zeros(&[neg.len(), 1]))?;
        let n = tape.mean(n)?;
        loss = tape.add(loss, n)?;
    }
    Ok(loss)
}

/// Smooth-L1 summed over the four residue components of the positive node.
pub fn loss_reg(tape: &mut Tape, residues: Var, positive: usize, target: &[f64; 4], delta: f64) -> Result<Var> {
    let r = tape.gather_rows(residues, &[positive])?;
    let target = Tensor::new(vec![1, 4], target.to_vec())?;
    let l = tape.smooth_l1(r, &target, delta)?;
    Ok(tape.sum(l)?)
}

/// Smooth-L1 summed over `(ds, d)` and averaged over the timesteps that have a
/// target. `None` when no timestep does.
pub fn loss_refine(tape: &mut Tape, refine: Var, targets: &[Option<[f64; 2]>], delta: f64) -> Result<Option<Var>> {
    let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].is_some()).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let flat: Vec<f64> = rows.iter().flat_map(|&i| targets[i].unwrap()).collect();
    let pred = tape.gather_rows(refine, &rows)?;
    let l = tape.smooth_l1(pred, &Tensor::new(vec![rows.len(), 2], flat)?, delta)?;
    let s = tape.sum(l)?;
    Ok(Some(tape.scale(s, 1.0 / rows.len() as f64)?))
}

/// Final ground-truth pose: last future point, heading of the last movement.
pub fn final_pose(actor: &PreparedActor, future: &[Vec2]) -> Pose {
    let mut track = vec![actor.roi.actor_pose.position];
    track.extend_from_slice(future);
    let last = displacement_poses(&track, actor.roi.actor_pose.direction);
    last.last().copied().unwrap_or(actor.roi.actor_pose)
}

#[derive(Debug, Clone)]
pub struct ActorLoss {
    pub actor_id: i64,
    pub l_cls: f64,
    pub l_reg: f64,
    /// `None` when the proposal was degenerate or had no usable target.
    pub l_refine: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SceneLoss {
    /// Mean over supervised actors of `L_cls + alpha L_reg + beta L_refine`.
    pub total: Var,
    pub actors: Vec<ActorLoss>,
    /// Teacher-forced proposal per prepared actor (`None` when unsupervised or
    /// degenerate).
    pub proposals: Vec<Option<TrajectoryProposal>>,
    /// `(actor_id, reason)` for actors with a future that were not supervised.
    pub skipped: Vec<(i64, String)>,
}

/// Total loss of one prepared scene. The agent is supervised, or every actor
/// with a future when `cfg.supervise_all_actors` is set.
///
/// The refinement term uses the proposal towards the positive node's
/// predicted goal; that geometry is treated as a constant. Passing `frozen`
/// substitutes fixed proposals, which makes the loss a smooth function of the
/// parameters for finite-difference checks.
pub fn scene_loss(
    model: &LaneRcnn,
    tape: &mut Tape,
    scene: &PreparedScene,
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
    frozen: Option<&[Option<TrajectoryProposal>]>,
) -> Result<Option<SceneLoss>> {
    let mc = &model.config;
    let outputs = model.forward(tape, scene)?;
    let mut terms = Vec::new();
    let mut actors = Vec::new();
    let mut proposals = vec![None; scene.actors.len()];
    let mut skipped = Vec::new();
    for (i, (actor, out)) in scene.actors.iter().zip(&outputs).enumerate() {
        let Some(future) = &actor.future else { continue };
        if !actor.is_agent && !cfg.supervise_all_actors {
            continue;
        }
        if future.len() != mc.horizon_steps {
            return Err(TrainError::Invalid(format!(
                "actor {} has {} future points, model predicts {}",
                actor.actor_id,
                future.len(),
                mc.horizon_steps
            )));
        }
        let gt = final_pose(actor, future);
        let labeling = match label_nodes(&actor.roi.poses, gt.position, cfg.negative_radius) {
            Ok(l) => l,
            Err(e @ TrainError::GoalOutsideRoi(_)) => {
                skipped.push((actor.actor_id, e.to_string()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let l_cls = loss_cls(tape, out.logits, &labeling, cfg, rng)?;
        let node = actor.roi.poses[labeling.positive];
        let target = goal_residue(&node, &gt);
        let l_reg = loss_reg(tape, out.residues, labeling.positive, &target, cfg.smooth_l1_delta)?;
        let mut total = tape.scale(l_reg, cfg.weights.alpha)?;
        total = tape.add(l_cls, total)?;

        let proposal = match frozen {
            Some(f) => f.get(i).cloned().flatten(),
            None => {
                let r = tape.value(out.residues).row(labeling.positive);
                let goal = goal_pose(&node, &[r[0], r[1], r[2], r[3]]);
                match TrajectoryProposal::new(actor.roi.actor_pose, goal, actor.roi.speed, 1.0, mc.horizon(), mc.dt) {
                    Ok(p) => Some(p),
                    Err(DecodeError::ZeroLength) => None,
                    Err(e) => return Err(ModelError::from(e).into()),
                }
            }
        };
        let mut l_refine_value = None;
        if let Some(p) = &proposal {
            let refine = model.refine_head(tape, out.features, &actor.roi.poses, &p.waypoint_poses())?;
            let targets = p.refine_targets(future, cfg.max_lateral);
            if let Some(l) = loss_refine(tape, refine, &targets, cfg.smooth_l1_delta)? {
                l_refine_value = Some(tape.value(l).item());
                let w = tape.scale(l, cfg.weights.beta)?;
                total = tape.add(total, w)?;
            }
        }
        proposals[i] = proposal;
        actors.push(ActorLoss {
            actor_id: actor.actor_id,
            l_cls: tape.value(l_cls).item(),
            l_reg: tape.value(l_reg).item(),
            l_refine: l_refine_value,
        });
        terms.push(total);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let total = tape.scale(total, 1.0 / terms.len() as f64)?;
    Ok(Some(SceneLoss { total, actors, proposals, skipped }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub augment: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.01,
            decay_epoch: 20,
            decay_factor: 0.1,
            clip_norm: Some(10.0),
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            augment: true,
            loss: LossConfig::default(),
        }
    }
}

/// Per-scene RNG seed derived from the run seed, the epoch and the scene id,
/// so streams do not depend on scheduling.
pub fn scene_seed(seed: u64, epoch: usize, scene_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update(scene_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 32 bytes"))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Step { epoch: usize, step: usize, loss: f64, l_cls: f64, l_reg: f64, l_refine: f64, lr: f64, grad_norm: f64 },
    Epoch { epoch: usize, loss: f64, l_cls: f64, l_reg: f64, l_refine: f64, lr: f64 },
    Skipped { epoch: usize, scene_id: String, actor_id: i64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean scene loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

struct SceneGrad {
    loss: f64,
    parts: [f64; 3],
    grads: Vec<Vec<f64>>,
    skipped: Vec<(i64, String)>,
}

fn scene_gradient(
    model: &LaneRcnn,
    scene: &Scene,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Option<SceneGrad>> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, epoch, &scene.scene_id));
    let (norm, frame) = normalize_scene(scene).map_err(ModelError::from)?;
    let norm = if cfg.augment { augment_rotation(&norm, &mut rng).0 } else { norm };
    let prepared = prepare_normalized(&norm, frame, &model.config)?;
    let mut tape = model.tape(true);
    let Some(sl) = scene_loss(model, &mut tape, &prepared, &cfg.loss, &mut rng, None)? else {
        return Ok(None);
    };
    let loss = tape.value(sl.total).item();
    let n = sl.actors.len() as f64;
    let parts = [
        sl.actors.iter().map(|a| a.l_cls).sum::<f64>() / n,
        sl.actors.iter().map(|a| a.l_reg).sum::<f64>() / n,
        sl.actors.iter().map(|a| a.l_refine.unwrap_or(0.0)).sum::<f64>() / n,
    ];
    let grads = tape.param_grads(&tape.backward(sl.total)?);
    Ok(Some(SceneGrad { loss, parts, grads, skipped: sl.skipped }))
}

/// Trains `model` in place. Scenes of a batch are processed in parallel and
/// their gradients summed in batch order, so results do not depend on the
/// number of threads.
pub fn train(
    model: &mut LaneRcnn,
    scenes: &[Scene],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainReport> {
    if scenes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Invalid("batch_size must be positive".into()));
    }
    let mut adam = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut report = TrainReport { epoch_losses: Vec::with_capacity(cfg.epochs), steps: 0 };
    for epoch in 0..cfg.epochs {
        let lr = step_lr(cfg.lr, epoch, cfg.decay_epoch, cfg.decay_factor);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = [0.0; 4];
        let mut epoch_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<Option<SceneGrad>>> = {
                let m = &*model;
                batch.par_iter().map(|&i| scene_gradient(m, &scenes[i], cfg, epoch)).collect()
            };
            let mut total: Option<Vec<Vec<f64>>> = None;
            let mut sums = [0.0; 4];
            let mut count = 0usize;
            for (&i, r) in batch.iter().zip(results) {
                let Some(sg) = r? else { continue };
                for (actor_id, reason) in &sg.skipped {
                    log(&TrainEvent::Skipped {
                        epoch,
                        scene_id: scenes[i].scene_id.clone(),
                        actor_id: *actor_id,
                        reason: reason.clone(),
                    });
                }
                if !sg.loss.is_finite() || sg.grads.iter().flatten().any(|g| !g.is_finite()) {
                    let dump = serde_json::json!({
                        "scene_id": scenes[i].scene_id,
                        "loss": sg.loss.to_string(),
                        "l_cls": sg.parts[0].to_string(),
                        "l_reg": sg.parts[1].to_string(),
                        "l_refine": sg.parts[2].to_string(),
                        "lr": lr,
                    });
                    return Err(TrainError::NonFinite { epoch, step: report.steps, dump: dump.to_string() });
                }
                sums[0] += sg.loss;
                for k in 0..3 {
                    sums[k + 1] += sg.parts[k];
                }
                count += 1;
                match &mut total {
                    None => total = Some(sg.grads),
                    Some(t) => {
                        for (a, b) in t.iter_mut().zip(&sg.grads) {
                            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let Some(mut grads) = total else { continue };
            let inv = 1.0 / count as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            let grad_norm = match cfg.clip_norm {
                Some(c) => clip_global_norm(&mut grads, c),
                None => grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt(),
            };
            adam_step(&mut model.params, &grads, &mut adam, lr, cfg.betas, cfg.adam_eps);
            log(&TrainEvent::Step {
                epoch,
                step: report.steps,
                loss: sums[0] * inv,
                l_cls: sums[1] * inv,
                l_reg: sums[2] * inv,
                l_refine: sums[3] * inv,
                lr,
                grad_norm,
            });
            report.steps += 1;
            for k in 0..4 {
                epoch_sum[k] += sums[k];
            }
            epoch_count += count;
        }
        let inv = 1.0 / epoch_count.max(1) as f64;
        report.epoch_losses.push(epoch_sum[0] * inv);
        log(&TrainEvent::Epoch {
            epoch,
            loss: epoch_sum[0] * inv,
            l_cls: epoch_sum[1] * inv,
            l_reg: epoch_sum[2] * inv,
            l_refine: epoch_sum[3] * inv,
            lr,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "minADE_1")]
    pub min_ade_1: f64,
    #[serde(rename = "minFDE_1")]
    pub min_fde_1: f64,
    #[serde(rename = "MR_1")]
    pub mr_1: f64,
    #[serde(rename = "minADE_6")]
    pub min_ade_6: f64,
    #[serde(rename = "minFDE_6")]
    pub min_fde_6: f64,
    #[serde(rename = "MR_6")]
    pub mr_6: f64,
}

pub const MISS_THRESHOLD: f64 = 2.0;

/// `(minADE, minFDE, MR)` at `k` averaged over agents. Each agent uses its
/// `k` highest-scoring modes (earlier mode on equal scores); a final error of
/// at least [`MISS_THRESHOLD`] counts as a miss.
pub fn metrics_at_k(preds: &[(i64, Vec<PredictedMode>)], gts: &[Vec<Vec2>], k: usize) -> Result<(f64, f64, f64)> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(TrainError::Invalid(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let (mut ade, mut fde, mut miss) = (0.0, 0.0, 0.0);
    for ((actor_id, modes), gt) in preds.iter().zip(gts) {
        if modes.len() < k || k == 0 {
            return Err(TrainError::TooFewModes { actor_id: *actor_id, got: modes.len(), need: k });
        }
        let mut order: Vec<usize> = (0..modes.len()).collect();
        order.sort_by(|&a, &b| modes[b].score.total_cmp(&modes[a].score).then(a.cmp(&b)));
        let (mut best_ade, mut best_fde) = (f64::INFINITY, f64::INFINITY);
        for &m in &order[..k] {
            let w = &modes[m].waypoints;
            if w.len() != gt.len() || gt.is_empty() {
                return Err(TrainError::Invalid(format!("mode has {} points, ground truth {}", w.len(), gt.len())));
            }
            let errs: Vec<f64> = w.iter().zip(gt).map(|(a, b)| a.distance(*b)).collect();
            best_ade = best_ade.min(errs.iter().sum::<f64>() / errs.len() as f64);
            best_fde = best_fde.min(*errs.last().expect("non-empty"));
        }
        ade += best_ade;
        fde += best_fde;
        if best_fde >= MISS_THRESHOLD {
            miss += 1.0;
        }
    }
    let n = preds.len() as f64;
    Ok((ade / n, fde / n, miss / n))
}

pub fn metrics(preds: &[(i64, Vec<PredictedMode>)], gts: &[Vec<Vec2>]) -> Result<Metrics> {
    let (min_ade_1, min_fde_1, mr_1) = metrics_at_k(preds, gts, 1)?;
    let (min_ade_6, min_fde_6, mr_6) = metrics_at_k(preds, gts, 6)?;
    Ok(Metrics { min_ade_1, min_fde_1, mr_1, min_ade_6, min_fde_6, mr_6 })
}

/// Predicted modes of one actor, keyed by actor id.
pub type ActorModes = (i64, Vec<PredictedMode>);

/// Agent-frame predictions and futures of the agent of every scene.
pub fn agent_predictions(model: &LaneRcnn, scenes: &[Scene]) -> Result<(Vec<ActorModes>, Vec<Vec<Vec2>>)> {
    let results: Vec<Result<_>> = scenes
        .par_iter()
        .map(|scene| {
            let prepared = prepare_scene(scene, &model.config)?;
            let (idx, agent) = prepared
                .actors
                .iter()
                .enumerate()
                .find(|(_, a)| a.is_agent)
                .ok_or_else(|| TrainError::Invalid(format!("scene {} has no agent", scene.scene_id)))?;
            let future = agent
                .future
                .clone()
                .ok_or_else(|| TrainError::Invalid(format!("scene {} has no agent future", scene.scene_id)))?;
            let preds = model.predict(&prepared)?;
            Ok(((preds[idx].actor_id, preds[idx].modes.clone()), future))
        })
        .collect();
    let mut preds = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for r in results {
        let (p, g) = r?;
        preds.push(p);
        gts.push(g);
    }
    Ok((preds, gts))
}

/// Agent metrics at K = 1 and K = 6 over `scenes`.
pub fn evaluate(model: &LaneRcnn, scenes: &[Scene]) -> Result<Metrics> {
    if scenes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (preds, gts) = agent_predictions(model, scenes)?;
    metrics(&preds, &gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, sigmoid};
    use crate::model::LaneRcnnConfig;
    use crate::scene::{generate_synthetic_scene, GeneratorConfig};
    use rand::Rng;

    fn line_poses(n: usize) -> Vec<Pose> {
        (0..n).map(|i| Pose::new(Vec2::new(i as f64, 0.0), Vec2::new(1.0, 0.0))).collect()
    }

    fn small_model() -> LaneRcnn {
        LaneRcnn::new(LaneRcnnConfig { channels: 8, head_hidden: 8, ..LaneRcnnConfig::default() }, 11).unwrap()
    }

    fn scenes(n: usize, seed: u64) -> Vec<Scene> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| generate_synthetic_scene(&GeneratorConfig::default(), &format!("t{i}"), &mut rng).unwrap())
            .collect()
    }

    #[test]
    fn labeling_positive_and_negatives() {
        let l = label_nodes(&line_poses(20), Vec2::new(5.2, 0.5), 6.0).unwrap();
        assert_eq!(l.positive, 5);
        assert_eq!(l.labels[12], NodeLabel::Negative);
        assert_eq!(l.labels[11], NodeLabel::DontCare);
        assert_eq!(l.labels.iter().filter(|&&x| x == NodeLabel::Positive).count(), 1);
        let err = label_nodes(&line_poses(3), Vec2::new(50.0, 0.0), 6.0).unwrap_err();
        assert!(err.to_string().starts_with(GOAL_OUTSIDE_ROI));
    }

    #[test]
    fn ohem_keeps_hardest_hundred_of_quarter() {
        let poses = line_poses(401);
        let l = label_nodes(&poses, Vec2::new(0.0, 0.0), 6.0).unwrap();
        assert_eq!(l.negatives().len(), 394);
        let poses = line_poses(407);
        let l = label_nodes(&poses, Vec2::new(0.0, 0.0), 6.0).unwrap();
        assert_eq!(l.negatives().len(), 400);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits: Vec<f64> = (0..407).map(|_| rng.random_range(-3.0..3.0)).collect();
        let picked = mine_negatives(&logits, &l, 0.25, 100, &mut rng);
        assert_eq!(picked.len(), 100);
        let picked = mine_negatives(&logits, &l, 0.5, 100, &mut rng);
        assert_eq!(picked.len(), 100);
        let worst_kept = picked.iter().map(|&i| logits[i]).fold(f64::INFINITY, f64::min);
        // Every kept negative is at least as hard as the softest kept one.
        assert!(picked.iter().all(|&i| logits[i] >= worst_kept));
    }

    #[test]
    fn ohem_with_few_negatives_uses_all_survivors() {
        let l = label_nodes(&line_poses(27), Vec2::new(0.0, 0.0), 6.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picked = mine_negatives(&[0.0; 27], &l, 0.25, 100, &mut rng);
        assert_eq!(picked.len(), 5);
    }

    #[test]
    fn saturated_logits_give_near_zero_cls_loss() {
        let l = label_nodes(&line_poses(30), Vec2::new(0.0, 0.0), 6.0).unwrap();
        let logits: Vec<f64> = (0..30).map(|i| if i == 0 { 40.0 } else { -40.0 }).collect();
        let mut tape = Tape::new();
        let v = tape.variable(Tensor::new(vec![30, 1], logits).unwrap());
        let loss = loss_cls(&mut tape, v, &l, &LossConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(tape.value(loss).item() < 1e-15);
    }

    #[test]
    fn uniform_negative_losses_are_selection_stable() {
        let l = label_nodes(&line_poses(500), Vec2::new(0.0, 0.0), 6.0).unwrap();
        let mut logits = vec![0.7; 500];
        logits[0] = 1.3;
        let mut values = Vec::new();
        for seed in 0..3 {
            let mut tape = Tape::new();
            let v = tape.variable(Tensor::new(vec![500, 1], logits.clone()).unwrap());
            let loss = loss_cls(&mut tape, v, &l, &LossConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            values.push(tape.value(loss).item());
        }
        let expect = crate::autodiff::bce_logit(1.3, 1.0) + crate::autodiff::bce_logit(0.7, 0.0);
        for v in values {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dont_care_logits_do_not_matter() {
        let l = label_nodes(&line_poses(40), Vec2::new(3.0, 0.0), 6.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut other = base.clone();
        for (i, lab) in l.labels.iter().enumerate() {
            if *lab == NodeLabel::DontCare {
                other[i] += 5.0;
            }
        }
        let eval = |logits: &[f64]| {
            let mut tape = Tape::new();
            let v = tape.variable(Tensor::new(vec![40, 1], logits.to_vec()).unwrap());
            let loss = loss_cls(&mut tape, v, &l, &LossConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            tape.value(loss).item()
        };
        assert_eq!(eval(&base), eval(&other));
    }

    #[test]
    fn smooth_l1_branches() {
        let mut tape = Tape::new();
        let r = tape.variable(Tensor::new(vec![1, 4], vec![0.5, 0.0, 0.0, 1.0]).unwrap());
        let l = loss_reg(&mut tape, r, 0, &[0.0, 0.0, 0.0, 1.0], 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.125);
        let r = tape.variable(Tensor::new(vec![1, 4], vec![2.0, 0.0, 0.0, 1.0]).unwrap());
        let l = loss_reg(&mut tape, r, 0, &[0.0, 0.0, 0.0, 1.0], 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 1.5);
        let r = tape.variable(Tensor::new(vec![1, 4], vec![0.0, 0.0, 0.0, 1.0]).unwrap());
        let l = loss_reg(&mut tape, r, 0, &[0.0, 0.0, 0.0, 1.0], 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn refine_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let targets: Vec<Option<[f64; 2]>> =
            (0..30).map(|i| (i % 7 != 3).then(|| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])).collect();
        let x = Tensor::new(vec![30, 2], (0..60).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let report = grad_check(|t, v| Ok(loss_refine(t, v, &targets, 1.0).map_err(|e| match e {
            TrainError::Autodiff(a) => a,
            other => panic!("{other}"),
        })?.unwrap()), &x, 1e-6, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn refine_loss_skips_missing_targets() {
        let mut tape = Tape::new();
        let v = tape.variable(Tensor::zeros(&[3, 2]));
        assert!(loss_refine(&mut tape, v, &[None, None, None], 1.0).unwrap().is_none());
        let l = loss_refine(&mut tape, v, &[Some([2.0, 0.0]), None, Some([0.0, 0.0])], 1.0).unwrap().unwrap();
        assert_eq!(tape.value(l).item(), 0.75);
    }

    #[test]
    fn zero_beta_gives_refine_head_no_gradient() {
        let model = small_model();
        let scene = &scenes(1, 5)[0];
        let prepared = prepare_scene(scene, &model.config).unwrap();
        let cfg = LossConfig { weights: LossWeights { alpha: 0.5, beta: 0.0 }, ..LossConfig::default() };
        let mut tape = model.tape(true);
        let sl = scene_loss(&model, &mut tape, &prepared, &cfg, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap().unwrap();
        let grads = tape.param_grads(&tape.backward(sl.total).unwrap());
        let mut refine_norm = 0.0;
        let mut other_norm = 0.0;
        for (id, name, _) in model.params.iter() {
            let n: f64 = grads[id.index()].iter().map(|g| g * g).sum();
            if name.starts_with("refine.") {
                refine_norm += n;
            } else {
                other_norm += n;
            }
        }
        assert_eq!(refine_norm, 0.0);
        assert!(other_norm > 0.0);
    }

    #[test]
    fn metrics_simple_cases() {
        let gt: Vec<Vec2> = (1..=30).map(|i| Vec2::new(i as f64, 0.0)).collect();
        let exact = PredictedMode { score: 0.9, waypoints: gt.clone() };
        let (a, f, m) = metrics_at_k(&[(1, vec![exact.clone()])], std::slice::from_ref(&gt), 1).unwrap();
        assert_eq!((a, f, m), (0.0, 0.0, 0.0));
        let shifted = PredictedMode { score: 0.9, waypoints: gt.iter().map(|p| *p + Vec2::new(0.0, 3.0)).collect() };
        let (a, f, m) = metrics_at_k(&[(1, vec![shifted.clone()])], std::slice::from_ref(&gt), 1).unwrap();
        assert!((a - 3.0).abs() < 1e-12 && (f - 3.0).abs() < 1e-12 && m == 1.0);
        let boundary = PredictedMode { score: 0.9, waypoints: gt.iter().map(|p| *p + Vec2::new(0.0, 2.0)).collect() };
        let (_, _, m) = metrics_at_k(&[(1, vec![boundary])], std::slice::from_ref(&gt), 1).unwrap();
        assert_eq!(m, 1.0);
        assert!(matches!(metrics_at_k(&[(1, vec![exact])], &[gt], 6), Err(TrainError::TooFewModes { .. })));
    }

    #[test]
    fn metrics_ignore_mode_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt: Vec<Vec2> = (0..30).map(|i| Vec2::new(i as f64, rng.random_range(-1.0..1.0))).collect();
        let modes: Vec<PredictedMode> = (0..6)
            .map(|_| PredictedMode {
                score: rng.random_range(0.0..1.0),
                waypoints: gt.iter().map(|p| *p + Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect(),
            })
            .collect();
        let mut rev = modes.clone();
        rev.reverse();
        let a = metrics(&[(0, modes)], std::slice::from_ref(&gt)).unwrap();
        let b = metrics(&[(0, rev)], &[gt]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scene_seed_depends_on_every_input() {
        let s = scene_seed(1, 2, "a");
        assert_ne!(s, scene_seed(2, 2, "a"));
        assert_ne!(s, scene_seed(1, 3, "a"));
        assert_ne!(s, scene_seed(1, 2, "b"));
        assert_eq!(s, scene_seed(1, 2, "a"));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = scenes(4, 8);
        let cfg = TrainConfig { epochs: 6, batch_size: 2, ..TrainConfig::default() };
        let run = || {
            let mut model = small_model();
            let mut events = Vec::new();
            let report = train(&mut model, &data, &cfg, &mut |e| events.push(e.clone())).unwrap();
            (model.to_checkpoint().digest_hex(), report, events)
        };
        let (d1, r1, e1) = run();
        let (d2, r2, _) = run();
        assert_eq!(d1, d2);
        assert_eq!(r1, r2);
        assert_eq!(r1.steps, 12);
        assert!(r1.epoch_losses.last().unwrap() < r1.epoch_losses.first().unwrap());
        assert!(e1.iter().any(|e| matches!(e, TrainEvent::Step { .. })));
        assert!(e1.iter().any(|e| matches!(e, TrainEvent::Epoch { .. })));
    }

    #[test]
    fn evaluate_reports_all_metrics() {
        let model = small_model();
        let m = evaluate(&model, &scenes(3, 9)).unwrap();
        for v in [m.min_ade_1, m.min_fde_1, m.mr_1, m.min_ade_6, m.min_fde_6, m.mr_6] {
            assert!(v.is_finite() && v >= 0.0);
        }
        assert!(m.min_fde_6 <= m.min_fde_1 + 1e-12);
        assert!(sigmoid(0.0) == 0.5);
    }
}
