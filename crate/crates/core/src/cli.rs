//! Command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datagen::boba::{generate_boba, BobaConfig};
use crate::datagen::crpm::{generate_crpm, CrpmConfig};
use crate::datagen::io::{export_png, read_dataset, write_dataset, MANIFEST_FILE};
use crate::datagen::{split_context_target, Dataset, Episode};
use crate::eval::{self, EditPlan};
use crate::model::{ClapNp, ModelConfig, Sampling};
use crate::nn::{GradCheckOptions, Tensor};
use crate::objective::{check_objective_gradients, Betas};
use crate::rng::{derive_seed, stream};
use crate::trainer::{train, Checkpoint, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "clapnp", version, about = "Concept-wise neural-process law parsing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test datasets from a generator config.
    GenData(GenDataArgs),
    /// Train a model on `<data>/train`, selecting on `<data>/val`.
    Train(TrainArgs),
    /// MSE-k evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Exchange and compose per-concept laws.
    Edit(EditArgs),
    /// Sweep each concept between its probe-batch extremes.
    Traverse(TraverseArgs),
    /// Finite-difference check of the full objective in double precision.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write one PNG per frame under this directory (relative to --out).
    #[arg(long)]
    pub export_png: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub n_target: usize,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip the sampled diversity grid and emit only the mean-prediction report.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Edit plan (JSON); defaults exchange every concept between episodes 0 and 1.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use posterior means for the global latents instead of samples.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct TraverseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Model config (JSON); defaults to the 8x8 toy model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Generator section of a `gen-data` config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Generator {
    Boba(BobaConfig),
    Crpm(CrpmConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub generator: Generator,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    /// Episode pair whose laws are exchanged.
    pub exchange: [usize; 2],
    /// Concepts exchanged, one mosaic each; empty means all.
    #[serde(default)]
    pub concepts: Vec<usize>,
    /// Source episodes for composition.
    pub compose_sources: Vec<usize>,
    /// Source (index into `compose_sources`) per concept.
    pub assignment: Vec<usize>,
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Accept either a dataset directory or a root holding `<name>/`.
fn open_dataset(dir: &Path, name: &str) -> Result<Dataset> {
    if dir.join(MANIFEST_FILE).exists() {
        read_dataset(dir)
    } else {
        read_dataset(&dir.join(name))
    }
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    // Accept a run directory as well as the checkpoint itself.
    if dir.join("best").join("manifest.json").exists() {
        Checkpoint::read(&dir.join("best"))
    } else {
        Checkpoint::read(dir)
    }
}

fn check_dims(model: &ClapNp<f32>, data: &Dataset) -> Result<()> {
    let m = &data.manifest;
    if m.image_dims != model.config.image_dims() || m.input_dim != model.config.input_dim {
        return Err(Error::InvalidConfig(format!("dataset {:?} does not match the checkpoint", m.name)));
    }
    Ok(())
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg: GenDataConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    match &cfg.generator {
        Generator::Boba(b) => b.validate()?,
        Generator::Crpm(c) => c.validate()?,
    }
    create_out(&args.out)?;
    write_json(&args.out.join("run.json"), &json!({ "command": "gen-data", "config": cfg, "seed": cfg.seed }))?;
    for (split, count) in [("train", cfg.train), ("val", cfg.val), ("test", cfg.test)] {
        let seed = derive_seed(cfg.seed, split, 0);
        let (name, episodes, echo) = match &cfg.generator {
            Generator::Boba(b) => {
                let c = BobaConfig { episodes: count, ..b.clone() };
                (c.name.clone(), generate_boba(&c, seed)?, serde_json::to_value(&c).unwrap_or_default())
            }
            Generator::Crpm(k) => {
                let c = CrpmConfig { episodes: count, ..k.clone() };
                (c.name.clone(), generate_crpm(&c, seed)?, serde_json::to_value(&c).unwrap_or_default())
            }
        };
        let shape = match &cfg.generator {
            Generator::Boba(b) => (b.dims(), b.frames, 1),
            Generator::Crpm(c) => (c.dims(), 9, 2),
        };
        let echo = json!({ "generator": echo, "split": split, "seed": seed });
        let ds = Dataset::new(&name, episodes, Some(shape), echo)?;
        write_dataset(&ds, &args.out.join(split))?;
        if let Some(png_dir) = &args.export_png {
            export_png(&ds.episodes, &args.out.join(png_dir).join(split))?;
        }
    }
    Ok(())
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut cfg: TrainFileConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.model.validate()?;
    let train_set = open_dataset(&args.data, "train")?;
    let val_set = read_dataset(&args.data.join("val"))?;
    cfg.train.validate(train_set.manifest.frames_per_episode)?;
    create_out(&args.out)?;
    write_json(&args.out.join("run.json"), &json!({ "command": "train", "config": cfg, "seed": cfg.train.seed }))?;
    let outcome = train(&train_set, &val_set, &cfg.model, &cfg.train, Some(&args.out))?;
    write_json(&args.out.join("validation.json"), &outcome.history)
}

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = ckpt.model()?;
    let test = open_dataset(&args.data, "test")?;
    check_dims(&model, &test)?;
    if args.n_target == 0 || args.n_target >= test.manifest.frames_per_episode {
        return Err(Error::InvalidSplit { n_target: args.n_target, points: test.manifest.frames_per_episode });
    }
    let seed = args.seed.unwrap_or(0);
    create_out(&args.out)?;
    write_json(
        &args.out.join("run.json"),
        &json!({ "command": "eval", "checkpoint": args.checkpoint, "data": args.data, "n_target": args.n_target,
                 "repeats": args.repeats, "deterministic": args.deterministic, "seed": seed }),
    )?;
    let report = eval::evaluate_mse(&model, &test.episodes, &test.manifest.name, args.n_target, args.repeats)?;
    write_json(&args.out.join("mse_report.json"), &report)?;
    if !args.deterministic {
        // A few context sets, each predicted by several independent draws.
        let picks: Vec<Episode> = test
            .episodes
            .iter()
            .take(4)
            .enumerate()
            .map(|(i, e)| split_context_target(e, args.n_target, &mut stream(seed, "diversity-split", i as u64)))
            .collect::<Result<_>>()?;
        let mut rng = stream(seed, "diversity", 0);
        let draws: Vec<Vec<Tensor<f32>>> =
            (0..3).map(|_| model.forward_prior_predict(&picks, Sampling::Random(&mut rng))).collect::<Result<_>>()?;
        let mut rows: Vec<Vec<&[f32]>> = Vec::new();
        for (e, ep) in picks.iter().enumerate() {
            rows.push(ep.target()?.iter().map(|&t| ep.image(t)).collect());
            for d in &draws {
                rows.push((0..d[e].rows()).map(|k| d[e].row(k)).collect());
            }
        }
        eval::write_mosaic(&args.out.join("diversity.png"), test.manifest.image_dims, &rows)?;
    }
    println!("{}", serde_json::to_string(&report).unwrap_or_default());
    Ok(())
}

fn sample_globals(model: &ClapNp<f32>, ep: &Episode, rng: &mut crate::rng::Rng) -> Result<Vec<Vec<f32>>> {
    let d = ep.dims;
    let imgs = Tensor::new(vec![ep.points(), d.channels, d.height, d.width], ep.images.clone())?;
    let x = Tensor::new(vec![ep.points(), ep.input_dim], ep.inputs.clone())?;
    let z = model.encode(&imgs)?;
    let idx: Vec<usize> = (0..ep.points()).collect();
    (0..model.config.concepts)
        .map(|a| {
            let p = model.parse_function(a, &idx, &z[a], &x)?;
            Ok(p.mu.iter().zip(&p.sigma).map(|(m, s)| m + s * Distribution::<f64>::sample(&StandardNormal, rng) as f32).collect())
        })
        .collect()
}

pub fn edit_cmd(args: &EditArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = ckpt.model()?;
    let data = open_dataset(&args.data, "test")?;
    check_dims(&model, &data)?;
    let concepts = model.config.concepts;
    let plan_cfg = match &args.config {
        Some(p) => read_config(p)?,
        None => EditConfig {
            exchange: [0, 1],
            concepts: vec![],
            compose_sources: (0..concepts.min(data.episodes.len())).collect(),
            assignment: (0..concepts).map(|a| a % concepts.min(data.episodes.len()).max(1)).collect(),
        },
    };
    let n = data.episodes.len();
    let [e1, e2] = plan_cfg.exchange;
    if e1 >= n || e2 >= n || plan_cfg.compose_sources.iter().any(|&s| s >= n) {
        return Err(Error::InvalidArgument(format!("edit plan refers to episodes beyond {n}")));
    }
    let exchanged: Vec<usize> = if plan_cfg.concepts.is_empty() { (0..concepts).collect() } else { plan_cfg.concepts.clone() };
    if let Some(&a) = exchanged.iter().find(|&&a| a >= concepts) {
        return Err(Error::UnknownConcept(a));
    }
    let sources: Vec<Episode> = plan_cfg.compose_sources.iter().map(|&s| data.episodes[s].clone()).collect();
    let plan = EditPlan { assignment: plan_cfg.assignment.clone() };
    plan.validate(concepts, &sources)?;
    let seed = args.seed.unwrap_or(0);
    create_out(&args.out)?;
    write_json(
        &args.out.join("run.json"),
        &json!({ "command": "edit", "checkpoint": args.checkpoint, "data": args.data, "plan": plan_cfg,
                 "deterministic": args.deterministic, "seed": seed }),
    )?;

    let dims = data.manifest.image_dims;
    let (ep1, ep2) = (&data.episodes[e1], &data.episodes[e2]);
    let mut rng = stream(seed, "edit", 0);
    let globals = |ep: &Episode, rng: &mut crate::rng::Rng| {
        if args.deterministic { eval::posterior_globals(&model, ep) } else { sample_globals(&model, ep, rng) }
    };
    let inputs = |ep: &Episode| Tensor::new(vec![ep.points(), ep.input_dim], ep.inputs.clone());
    let (g1, g2) = (globals(ep1, &mut rng)?, globals(ep2, &mut rng)?);
    for &a in &exchanged {
        let (mut h1, mut h2) = (g1.clone(), g2.clone());
        std::mem::swap(&mut h1[a], &mut h2[a]);
        let r1 = eval::regenerate(&model, &h1, &inputs(ep1)?)?;
        let r2 = eval::regenerate(&model, &h2, &inputs(ep2)?)?;
        let rows: Vec<Vec<&[f32]>> = vec![
            (0..ep1.points()).map(|k| ep1.image(k)).collect(),
            (0..ep2.points()).map(|k| ep2.image(k)).collect(),
            (0..r1.rows()).map(|k| r1.row(k)).collect(),
            (0..r2.rows()).map(|k| r2.row(k)).collect(),
        ];
        eval::write_mosaic(&args.out.join(format!("exchange_{a}.png")), dims, &rows)?;
    }
    let src_globals: Vec<Vec<Vec<f32>>> = sources.iter().map(|s| globals(s, &mut rng)).collect::<Result<_>>()?;
    let composed_g: Vec<Vec<f32>> = plan.assignment.iter().enumerate().map(|(a, &s)| src_globals[s][a].clone()).collect();
    let composed = eval::regenerate(&model, &composed_g, &inputs(&sources[0])?)?;
    let mut rows: Vec<Vec<&[f32]>> = sources.iter().map(|s| (0..s.points()).map(|k| s.image(k)).collect()).collect();
    rows.push((0..composed.rows()).map(|k| composed.row(k)).collect());
    eval::write_mosaic(&args.out.join("compose.png"), dims, &rows)
}

pub fn traverse_cmd(args: &TraverseArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = ckpt.model()?;
    let data = open_dataset(&args.data, "test")?;
    check_dims(&model, &data)?;
    if args.steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    let probe = probe_batch(&data, 256)?;
    create_out(&args.out)?;
    write_json(&args.out.join("run.json"), &json!({ "command": "traverse", "checkpoint": args.checkpoint, "data": args.data, "steps": args.steps }))?;
    let mut summary = Vec::new();
    for a in 0..model.config.concepts {
        let t = eval::traverse_concept(&model, &probe, 0, a, args.steps)?;
        let row: Vec<&[f32]> = (0..t.images.rows()).map(|k| t.images.row(k)).collect();
        eval::write_mosaic(&args.out.join(format!("traverse_{a}.png")), data.manifest.image_dims, &[row])?;
        summary.push(json!({ "concept": a, "min": t.min, "max": t.max }));
    }
    write_json(&args.out.join("traverse.json"), &summary)
}

/// The first `count` images of a dataset, in episode order.
pub fn probe_batch(data: &Dataset, count: usize) -> Result<Tensor<f32>> {
    let d = data.manifest.image_dims;
    let pixels: Vec<f32> = data.episodes.iter().flat_map(|e| e.images.iter().copied()).take(count * d.len()).collect();
    let rows = pixels.len() / d.len().max(1);
    if rows == 0 {
        return Err(Error::Empty("probe batch"));
    }
    Tensor::new(vec![rows, d.channels, d.height, d.width], pixels)
}

pub fn grad_check_cmd(args: &GradCheckArgs) -> Result<bool> {
    let cfg: ModelConfig = match &args.config {
        Some(p) => read_config(p)?,
        None => ModelConfig::toy(),
    };
    cfg.validate()?;
    let seed = args.seed.unwrap_or(0);
    create_out(&args.out)?;
    write_json(&args.out.join("run.json"), &json!({ "command": "grad-check", "config": cfg, "seed": seed }))?;
    let mut model = ClapNp::<f64>::new(cfg.clone(), seed)?;
    model.params.jitter(0.1, seed, |n| n.ends_with("bias"));
    let data = BobaConfig { resolution: cfg.resolution, radius_range: [0.2, 0.25], ..BobaConfig::boba1(3) };
    if cfg.channels != 3 || cfg.input_dim != 1 {
        return Err(Error::InvalidConfig("grad-check uses bouncing-ball episodes: channels 3, input_dim 1".into()));
    }
    let episodes = generate_boba(&data, seed)?
        .iter()
        .enumerate()
        .map(|(i, e)| split_context_target(e, 3, &mut stream(seed, "grad-check-split", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let opts = GradCheckOptions { h: 1e-4, tol: 1e-3, subsample: Some(200), seed, denom_floor: 1e-8, kink_tol: Some(1e-4) };
    let betas = Betas::default().at(u64::MAX);
    let report = check_objective_gradients(&model, &episodes, &betas, 3 * data.frames, &opts)?;
    write_json(&args.out.join("grad_check.json"), &report)?;
    println!("checked {} coordinates, max relative error {:.3e}", report.checked, report.max_rel_error);
    Ok(report.passed)
}

/// Run a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Edit(a) => edit_cmd(a).map(|_| true),
        Command::Traverse(a) => traverse_cmd(a).map(|_| true),
        Command::GradCheck(a) => grad_check_cmd(a),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() { 2 } else { 1 }
        }
    }
}

/// Parse `argv` and run; argument errors exit with 2.
pub fn run_from<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(argv) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            code
        }
    }
}
