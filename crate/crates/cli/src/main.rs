//! `lanercnn`: scene generation, training, evaluation, prediction and plots.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lanercnn::decode::PredictionFile;
use lanercnn::geometry::Vec2;
use lanercnn::model::{prepare_scene, to_prediction_files, LaneRcnn, LaneRcnnConfig, ModelError};
use lanercnn::scene::{generate_synthetic_scene, read_scene, write_scene, GeneratorConfig, Scene};
use lanercnn::train_eval::{evaluate, train, TrainConfig, TrainError, TrainEvent};

#[derive(Parser)]
#[command(name = "lanercnn", version, about = "Lane-graph motion forecasting")]
struct Cli {
    /// Worker threads for training and evaluation.
    #[arg(long, global = true, env = "LANERCNN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes plus a manifest.
    Gen(GenArgs),
    /// Train a model on a directory of scenes.
    Train(TrainArgs),
    /// Print agent metrics of a checkpoint on a directory of scenes.
    Eval(EvalArgs),
    /// Write the prediction file for one actor of a scene.
    Predict(PredictArgs),
    /// Render a scene and a prediction file as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Run config JSON; its `generator` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long)]
    count: usize,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON with `model`, `train` and `generator` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of scene files.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, log and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides `train.batch_size`.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides `train.lr`.
    #[arg(long)]
    lr: Option<f64>,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of scene files with ground-truth futures.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Output prediction JSON.
    #[arg(long)]
    out: PathBuf,
    /// Actor to predict; defaults to the agent.
    #[arg(long)]
    actor: Option<i64>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    prediction: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Output SVG file.
    #[arg(long)]
    out: PathBuf,
}

/// Every configurable setting of a run, loaded from one JSON file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    seed: u64,
    model: LaneRcnnConfig,
    train: TrainConfig,
    generator: GeneratorConfig,
}

enum CliError {
    Input(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Input(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => m,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn model_error(e: ModelError) -> CliError {
    match e {
        ModelError::Autodiff(_) | ModelError::Decode(_) => runtime(e),
        _ => input(e),
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Model(m) => model_error(m),
        TrainError::EmptyDataset | TrainError::Invalid(_) | TrainError::TooFewModes { .. } => input(e),
        _ => runtime(e),
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| input(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", p.display())))
        }
    }
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(runtime)?.next().is_some();
        if non_empty && !force {
            return Err(input(format!("{} exists and is not empty (use --force)", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(runtime)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    scene_id: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    count: usize,
    seed: u64,
    scenes: Vec<ManifestEntry>,
}

fn cmd_gen(a: GenArgs) -> CliResult<()> {
    if a.count == 0 {
        return Err(input("count must be positive"));
    }
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    prepare_out_dir(&a.out, a.force)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenes = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let id = format!("scene_{i:05}");
        let scene = generate_synthetic_scene(&cfg.generator, &id, &mut rng).map_err(input)?;
        let file = format!("{id}.json");
        write_scene(&scene, &a.out.join(&file)).map_err(runtime)?;
        let sha256 = hex::encode(Sha256::digest(scene.to_json().as_bytes()));
        scenes.push(ManifestEntry { file, scene_id: id, sha256 });
    }
    write_json(&a.out.join("manifest.json"), &Manifest { count: a.count, seed: cfg.seed, scenes })?;
    write_json(&a.out.join("config.json"), &cfg)?;
    println!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(())
}

/// Scene files of a directory in name order; `manifest.json` and
/// `config.json` are skipped.
fn load_scenes(dir: &Path) -> CliResult<Vec<Scene>> {
    let entries = fs::read_dir(dir).map_err(|e| input(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter(|p| !matches!(p.file_name().and_then(|n| n.to_str()), Some("manifest.json" | "config.json")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(input(format!("no scene files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| read_scene(p).map_err(|e| input(format!("{}: {e}", p.display()))))
        .collect()
}

fn load_model(path: &Path) -> CliResult<LaneRcnn> {
    LaneRcnn::load(path).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    cfg.train.seed = cfg.seed;
    let scenes = load_scenes(&a.data)?;
    let mut model = LaneRcnn::new(cfg.model.clone(), cfg.seed).map_err(model_error)?;
    prepare_out_dir(&a.out, a.force)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(runtime)?;
    let mut write_err = None;
    let result = train(&mut model, &scenes, &cfg.train, &mut |event| {
        if let TrainEvent::Skipped { scene_id, actor_id, reason, .. } = event {
            eprintln!("warning: scene {scene_id} actor {actor_id} skipped: {reason}");
        }
        if let TrainEvent::Epoch { epoch, loss, .. } = event {
            eprintln!("epoch {epoch}: loss {loss:.5}");
        }
        let line = serde_json::to_string(event).expect("event serializes");
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(runtime(format!("{}: {e}", log_path.display())));
    }
    if let Err(e) = result {
        if let TrainError::NonFinite { dump, .. } = &e {
            let _ = fs::write(a.out.join("diagnostic.json"), dump);
        }
        return Err(train_error(e));
    }
    let ckpt = a.out.join("model.ckpt");
    model.save(&ckpt).map_err(runtime)?;
    println!("{}", ckpt.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let scenes = load_scenes(&a.data)?;
    let metrics = evaluate(&model, &scenes).map_err(train_error)?;
    println!("{}", serde_json::to_string(&metrics).map_err(runtime)?);
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let scene = read_scene(&a.scene).map_err(|e| input(format!("{}: {e}", a.scene.display())))?;
    let prepared = prepare_scene(&scene, &model.config).map_err(model_error)?;
    let wanted = match a.actor {
        Some(id) => id,
        None => prepared.agent().map(|x| x.actor_id).ok_or_else(|| input("scene has no agent"))?,
    };
    let preds = model.predict(&prepared).map_err(model_error)?;
    let files = to_prediction_files(&prepared, &preds);
    let file = files
        .into_iter()
        .find(|f| f.actor_id == wanted)
        .ok_or_else(|| input(format!("actor {wanted} not in scene")))?;
    write_json(&a.out, &file)
}

fn cmd_plot(a: PlotArgs) -> CliResult<()> {
    let scene = read_scene(&a.scene).map_err(|e| input(format!("{}: {e}", a.scene.display())))?;
    let text = fs::read_to_string(&a.prediction).map_err(|e| input(format!("{}: {e}", a.prediction.display())))?;
    let pred: PredictionFile =
        serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", a.prediction.display())))?;
    if pred.scene_id != scene.scene_id {
        return Err(input(format!("prediction is for scene {}, scene file is {}", pred.scene_id, scene.scene_id)));
    }
    if pred.modes.is_empty() {
        eprintln!("warning: prediction has no modes; rendering the map only");
    }
    fs::write(&a.out, render_svg(&scene, &pred)).map_err(|e| runtime(format!("{}: {e}", a.out.display())))
}

const MODE_COLORS: [&str; 6] = ["#d62728", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn render_svg(scene: &Scene, pred: &PredictionFile) -> String {
    let mut pts: Vec<Vec2> = scene.lanes.iter().flat_map(|l| l.polyline.iter().copied()).collect();
    for a in &scene.actors {
        pts.extend(&a.past);
        pts.extend(a.future.iter().flatten());
    }
    pts.extend(pred.modes.iter().flat_map(|m| m.waypoints.iter().copied()));
    let (mut lo, mut hi) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
    for p in &pts {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    if pts.is_empty() {
        (lo, hi) = (Vec2::ZERO, Vec2::new(1.0, 1.0));
    }
    let margin = 5.0;
    let (w, h) = (hi.x - lo.x + 2.0 * margin, hi.y - lo.y + 2.0 * margin);
    let scale = 10.0;
    // SVG y grows downwards.
    let tr = |p: &Vec2| ((p.x - lo.x + margin) * scale, (hi.y - p.y + margin) * scale);
    let poly = |points: &[Vec2], style: &str| {
        let coords: Vec<String> = points.iter().map(|p| {
            let (x, y) = tr(p);
            format!("{x:.2},{y:.2}")
        }).collect();
        format!("  <polyline points=\"{}\" {style}/>\n", coords.join(" "))
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" viewBox=\"0 0 {:.2} {:.2}\">",
        w * scale,
        h * scale,
        w * scale,
        h * scale
    );
    let _ = writeln!(out, "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(out, "  <g id=\"lanes\">");
    for lane in &scene.lanes {
        out += &poly(&lane.polyline, "fill=\"none\" stroke=\"#bbbbbb\" stroke-width=\"20\" stroke-linecap=\"round\"");
    }
    let _ = writeln!(out, "  </g>\n  <g id=\"actors\">");
    for actor in &scene.actors {
        let color = if actor.is_agent { "#1f77b4" } else { "#555555" };
        out += &poly(&actor.past, &format!("fill=\"none\" stroke=\"{color}\" stroke-width=\"4\""));
        if let Some(f) = &actor.future {
            out += &poly(f, "fill=\"none\" stroke=\"#2ca02c\" stroke-width=\"3\" stroke-dasharray=\"8 4\"");
        }
    }
    let _ = writeln!(out, "  </g>\n  <g id=\"modes\">");
    for (i, mode) in pred.modes.iter().enumerate() {
        let color = MODE_COLORS[i % MODE_COLORS.len()];
        let dash = if i < MODE_COLORS.len() { "" } else { " stroke-dasharray=\"2 2\"" };
        out += &poly(&mode.waypoints, &format!("class=\"mode\" fill=\"none\" stroke=\"{color}\" stroke-width=\"3\"{dash}"));
        if let Some(end) = mode.waypoints.last() {
            let (x, y) = tr(end);
            let _ = writeln!(out, "  <text x=\"{x:.2}\" y=\"{y:.2}\" font-size=\"14\" fill=\"{color}\">{:.2}</text>", mode.score);
        }
    }
    out += "  </g>\n</svg>\n";
    out
}
