//! `context-insert`: train, query and evaluate context models from the
//! command line. Results go to stdout as JSON; failures print a JSON error
//! object on stderr and exit with 1 (usage), 2 (data) or 3 (internal).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use context_insert::cli_io::synth::{gen_synthetic, write_fixture, SynthSpec};
use context_insert::cli_io::{
    evaluate_boxes, evaluate_objects, evaluate_scenes, load_annotations, load_corpus, load_detections, load_model,
    save_model, write_heatmap, IoError, Method, Strictness,
};
use context_insert::rank_eval::{rank_objects, Annotations, EvalError};
use context_insert::scene_model::{to_topleft, BBox, SceneDetections};
use context_insert::scorer::{
    conditional_box, joint_score, rasterize_heatmap, refine_size, train, ContextModel, ScoreError, TrainConfig,
    TrainError,
};
use log::warn;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "context-insert", version, about = "Recommend objects to insert into a scene from its context")]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Fail on the first invalid record instead of skipping it.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model on a scene-graph corpus.
    Train(TrainArgs),
    /// Rank insertable categories for one image.
    Recommend(RecommendArgs),
    /// Rank images for one category.
    Retrieve(RetrieveArgs),
    /// Best box for a category in one image.
    PredictBox(PredictArgs),
    /// Export the box-probability heatmap of a category as PGM.
    Heatmap(HeatmapArgs),
    /// Score rankings and boxes against annotations.
    Evaluate(EvaluateArgs),
    /// Write a synthetic fixture tree.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mixture components per triple.
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 20)]
    top_context: usize,
    #[arg(long, default_value_t = 10)]
    top_relations: usize,
    #[arg(long, default_value_t = 0.4)]
    det_threshold: f64,
    /// Detections kept per scene.
    #[arg(long, default_value_t = 20)]
    max_context: usize,
    #[arg(long, default_value_t = 32)]
    refine_values: usize,
    /// Comma-separated insertable categories (default: the built-in ten).
    #[arg(long, value_delimiter = ',')]
    insertable: Option<Vec<String>>,
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    detections: PathBuf,
}

#[derive(Args)]
struct RecommendArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    image_id: String,
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    category: String,
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    image_id: String,
    #[arg(long)]
    category: String,
    /// Search box sizes around the best candidate.
    #[arg(long)]
    refine: bool,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    image_id: String,
    #[arg(long)]
    category: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Objects,
    Scenes,
    Boxes,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Boc,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, value_enum)]
    task: Task,
    /// Rank with the bag-of-categories baseline instead of the model.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Cut-offs for nDCG.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 5])]
    k: Vec<usize>,
    /// Refine box sizes before scoring (boxes task).
    #[arg(long)]
    refine: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON spec to start from instead of the built-in one.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    train_per_triple: Option<usize>,
    #[arg(long)]
    test_scenes: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    fn kind(&self) -> (&'static str, u8) {
        match self {
            CliError::Usage(_) => ("usage", 1),
            CliError::Data(_) => ("data", 2),
            CliError::Internal(_) => ("internal", 3),
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        if e.is_data_error() {
            CliError::Data(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn mode(strict: bool) -> Strictness {
    if strict {
        Strictness::Strict
    } else {
        Strictness::Lenient
    }
}

fn note_skipped(path: &Path, skipped: usize) {
    if skipped > 0 {
        warn!("{}: skipped {skipped} invalid records or entries", path.display());
    }
}

fn print_json(v: &impl Serialize) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::Internal(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn load_inputs(inputs: &Inputs, strict: bool) -> Result<(ContextModel, Vec<SceneDetections>), CliError> {
    let model = load_model(&inputs.model)?;
    let scenes = load_detections(&inputs.detections, model.vocab(), mode(strict))?;
    note_skipped(&inputs.detections, scenes.skipped);
    Ok((model, scenes.records))
}

fn find_scene<'a>(scenes: &'a [SceneDetections], id: &str) -> Result<&'a SceneDetections, CliError> {
    scenes.iter().find(|s| s.image_id == id).ok_or_else(|| CliError::Data(format!("image {id:?} not in detections")))
}

fn category_id(model: &ContextModel, name: &str) -> Result<usize, CliError> {
    model.vocab().insertable_id(name).ok_or_else(|| CliError::Data(format!("{name:?} is not an insertable category")))
}

/// Highest-probability candidate for category `c`, or `None` without evidence.
fn best_box(model: &ContextModel, scene: &SceneDetections, c: usize, refine: bool) -> Option<(BBox, f64)> {
    let filtered = model.filter(scene);
    let grid = model.candidates(scene);
    let probs = conditional_box(&joint_score(&filtered, &grid, model), c).ok()?;
    let mut arg = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[arg] {
            arg = i;
        }
    }
    let mut b = grid.boxes[arg];
    if refine {
        b = refine_size(&filtered, model, c, &b, model.config().refine_values);
    }
    Some((b, probs[arg]))
}

fn box_json(scene: &SceneDetections, b: Option<(BBox, f64)>) -> Value {
    match b {
        Some((b, p)) => json!({ "box": to_topleft(&b, scene.height), "probability": p }),
        None => json!({ "box": null, "probability": null }),
    }
}

fn cmd_train(a: &TrainArgs, strict: bool) -> Result<(), CliError> {
    let corpus = load_corpus(&a.corpus, mode(strict))?;
    note_skipped(&a.corpus, corpus.skipped);
    let mut cfg = TrainConfig::default();
    if let Some(ins) = &a.insertable {
        cfg.insertable = ins.clone();
    }
    cfg.top_context = a.top_context;
    cfg.top_relations = a.top_relations;
    cfg.fit.k = a.k;
    cfg.fit.seed = a.seed;
    cfg.scorer.det_threshold = a.det_threshold;
    cfg.scorer.max_detections = a.max_context;
    cfg.scorer.refine_values = a.refine_values;
    cfg.fit.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.scorer.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (model, report) = train(&corpus.records, &cfg)?;
    save_model(&model, &a.out)?;
    print_json(&json!({
        "model": a.out,
        "records": report.records,
        "skipped_records": report.skipped_records + corpus.skipped,
        "triples": report.triples,
        "context": model.vocab().context(),
        "relations": model.vocab().relations(),
    }))
}

fn cmd_recommend(a: &RecommendArgs, strict: bool) -> Result<(), CliError> {
    let (model, scenes) = load_inputs(&a.inputs, strict)?;
    let scene = find_scene(&scenes, &a.image_id)?;
    let ranking = rank_objects(scene, &model, &model.candidates(scene));
    let n = a.topk.unwrap_or(usize::MAX);
    let items: Vec<Value> = ranking
        .list
        .items()
        .iter()
        .take(n)
        .map(|(name, score)| {
            let c = model.vocab().insertable_id(name).expect("ranked names come from the vocabulary");
            let mut v = box_json(scene, best_box(&model, scene, c, false));
            v["category"] = json!(name);
            v["score"] = json!(score);
            v
        })
        .collect();
    print_json(&json!({ "image_id": scene.image_id, "zero_evidence": ranking.zero_evidence, "ranking": items }))
}

fn cmd_retrieve(a: &RetrieveArgs, strict: bool) -> Result<(), CliError> {
    let (model, scenes) = load_inputs(&a.inputs, strict)?;
    let c = category_id(&model, &a.category)?;
    let list = context_insert::rank_eval::retrieve_scenes(&a.category, &scenes, &model).map_err(|e| match e {
        ScoreError::UnknownCategory(_) => CliError::Data(e.to_string()),
        _ => CliError::Internal(e.to_string()),
    })?;
    let items: Vec<Value> = list
        .items()
        .iter()
        .take(a.topk.unwrap_or(usize::MAX))
        .map(|(id, score)| {
            let scene = find_scene(&scenes, id).expect("ranked ids come from the input");
            let mut v = box_json(scene, best_box(&model, scene, c, false));
            v["image_id"] = json!(id);
            v["score"] = json!(score);
            v
        })
        .collect();
    print_json(&json!({ "category": a.category, "ranking": items }))
}

fn cmd_predict(a: &PredictArgs, strict: bool) -> Result<(), CliError> {
    let (model, scenes) = load_inputs(&a.inputs, strict)?;
    let scene = find_scene(&scenes, &a.image_id)?;
    let c = category_id(&model, &a.category)?;
    let mut v = box_json(scene, best_box(&model, scene, c, a.refine));
    v["image_id"] = json!(scene.image_id);
    v["category"] = json!(a.category);
    v["refined"] = json!(a.refine);
    print_json(&v)
}

fn cmd_heatmap(a: &HeatmapArgs, strict: bool) -> Result<(), CliError> {
    let (model, scenes) = load_inputs(&a.inputs, strict)?;
    let scene = find_scene(&scenes, &a.image_id)?;
    let c = category_id(&model, &a.category)?;
    let grid = model.candidates(scene);
    let sm = joint_score(&model.filter(scene), &grid, &model);
    let probs = match conditional_box(&sm, c) {
        Ok(p) => p,
        Err(ScoreError::ZeroEvidence) => {
            warn!("image {}: no evidence for {}, writing an empty heatmap", scene.image_id, a.category);
            vec![0.0; grid.len()]
        }
        Err(e) => return Err(CliError::Internal(e.to_string())),
    };
    let heat = rasterize_heatmap(&grid, &probs, scene.width, scene.height)
        .map_err(|e| CliError::Data(format!("image {}: {e}", scene.image_id)))?
        .with_labels(&scene.image_id, &a.category);
    write_heatmap(&heat, &a.out)?;
    print_json(&json!({ "heatmap": a.out, "scale": a.out.with_extension("json"), "max": heat.max() }))
}

fn cmd_evaluate(a: &EvaluateArgs, strict: bool) -> Result<(), CliError> {
    let (model, scenes) = load_inputs(&a.inputs, strict)?;
    let records = load_annotations(&a.annotations, model.vocab(), mode(strict))?;
    note_skipped(&a.annotations, records.skipped);
    let ann = Annotations::new(records.records)?;
    if a.k.contains(&0) {
        return Err(CliError::Usage("--k values must be at least 1".into()));
    }
    let method = match a.baseline {
        Some(Baseline::Boc) => Method::Boc,
        None => Method::Context,
    };
    match a.task {
        Task::Objects => print_json(&evaluate_objects(&model, &scenes, &ann, method, &a.k)),
        Task::Scenes => print_json(&evaluate_scenes(&model, &scenes, &ann, method, &a.k)),
        Task::Boxes => {
            if a.baseline.is_some() {
                return Err(CliError::Usage("the baseline ranks categories only; use --task objects or scenes".into()));
            }
            print_json(&evaluate_boxes(&model, &scenes, &ann, a.refine)?)
        }
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_slice(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    spec.seed = a.seed;
    if let Some(n) = a.train_per_triple {
        spec.train_images_per_triple = n;
    }
    if let Some(n) = a.test_scenes {
        spec.n_test_scenes = n;
    }
    let fx = gen_synthetic(&spec).map_err(|e| CliError::Data(e.to_string()))?;
    write_fixture(&fx, &a.out)?;
    print_json(&json!({
        "out": a.out,
        "train_images": fx.corpus.len(),
        "test_scenes": fx.test_scenes.len(),
        "annotations": fx.annotations.len(),
    }))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Internal(e.to_string()))?;
    }
    match &cli.command {
        Command::Train(a) => cmd_train(a, cli.strict),
        Command::Recommend(a) => cmd_recommend(a, cli.strict),
        Command::Retrieve(a) => cmd_retrieve(a, cli.strict),
        Command::PredictBox(a) => cmd_predict(a, cli.strict),
        Command::Heatmap(a) => cmd_heatmap(a, cli.strict),
        Command::Evaluate(a) => cmd_evaluate(a, cli.strict),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn fail(e: CliError) -> ExitCode {
    let (kind, code) = e.kind();
    eprintln!("{}", json!({ "error": { "kind": kind, "message": e.message() } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONTEXT_INSERT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(CliError::Usage(e.to_string().trim_end().to_string())),
    };
    // Keep the default hook quiet so the error JSON is the only output.
    std::panic::set_hook(Box::new(|_| {}));
    match catch_unwind(AssertUnwindSafe(|| run(&cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => fail(e),
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            fail(CliError::Internal(msg.unwrap_or_else(|| "internal error".into())))
        }
    }
}
