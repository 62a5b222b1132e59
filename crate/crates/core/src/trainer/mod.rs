//! Seeded training with Adam and best-validation-bound model selection.

mod adam;
mod checkpoint;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointManifest, RngState, CHECKPOINT_VERSION};

use crate::datagen::{split_context_target, Dataset, Episode};
use crate::model::{Batch, ClapNp, ModelConfig, PosteriorNoise};
use crate::nn::checkpoint::write_params;
use crate::nn::{BatchStats, ParamStore};
use crate::objective::{evaluate_batch, AnnealedBetas, Betas, ElboParts, Mode};
use crate::rng::stream;
use crate::{Error, Result};

pub const LOG_HEADER: &str = "step,L_r,L_t,L_f,R_TC,beta_t,beta_f,loss,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many updates even mid-epoch.
    pub max_steps: Option<u64>,
    pub betas: Betas,
    /// Inclusive range of target counts drawn per episode.
    pub target_range: [usize; 2],
    pub seed: u64,
    /// Validate every this many epochs (the final epoch always validates).
    pub validate_every: usize,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 32,
            epochs: 50,
            max_steps: None,
            betas: Betas::default(),
            target_range: [1, 4],
            seed: 0,
            validate_every: 1,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, points: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {}", self.lr));
        }
        if self.batch_size == 0 || self.validate_every == 0 {
            return bad("batch_size and validate_every must be >= 1".into());
        }
        let [lo, hi] = self.target_range;
        if lo == 0 || lo > hi || hi + 1 > points {
            return bad(format!("target range {lo}..={hi} is not within 1..={}", points.saturating_sub(1)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm = {c}"));
            }
        }
        self.betas.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub step: u64,
    pub elbo: f64,
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<ValidationRecord>,
    pub final_params: crate::nn::ParamStore<f32>,
    pub steps: u64,
}

/// Split every episode with `n_target` targets using a fixed seed.
pub fn fixed_splits(episodes: &[Episode], n_target: usize, seed: u64, tag: &str) -> Result<Vec<Episode>> {
    episodes
        .iter()
        .enumerate()
        .map(|(i, e)| split_context_target(e, n_target, &mut stream(seed, tag, i as u64)))
        .collect()
}

/// Mean objective `L*` per episode over pre-split episodes, evaluated in
/// chunks of `chunk` with noise fixed by `seed`.
pub fn validate_split(
    model: &ClapNp<f32>,
    episodes: &[Episode],
    betas: &AnnealedBetas,
    dataset_size: usize,
    chunk: usize,
    seed: u64,
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut total = 0.0;
    for (c, part) in episodes.chunks(chunk.max(1)).enumerate() {
        let batch = Batch::from_episodes(part)?;
        let noise = PosteriorNoise::sample(&model.config, batch.rows(), batch.episodes(), &mut stream(seed, "val-noise", c as u64));
        let ev = evaluate_batch(model, &model.params, &batch, &noise, betas, dataset_size, Mode::Eval, false)?;
        total += ev.parts.objective(betas) * part.len() as f64;
    }
    Ok(total / episodes.len() as f64)
}

/// Validation bound with the split fixed at the largest training target count.
pub fn validate(model: &ClapNp<f32>, val: &Dataset, cfg: &TrainConfig, betas: &AnnealedBetas, dataset_size: usize) -> Result<f64> {
    let split = fixed_splits(&val.episodes, cfg.target_range[1], cfg.seed, "val-split")?;
    validate_split(model, &split, betas, dataset_size, cfg.batch_size, cfg.seed)
}

struct Log {
    file: Option<fs::File>,
    path: PathBuf,
}

impl Log {
    fn create(out: Option<&Path>, name: &str, header: &str) -> Result<Self> {
        let Some(dir) = out else { return Ok(Self { file: None, path: PathBuf::new() }) };
        let path = dir.join(name);
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{header}").map_err(|e| Error::io(&path, e))?;
        Ok(Self { file: Some(file), path })
    }

    fn line(&mut self, s: &str) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{s}").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Exponential moving average of normalization statistics.
pub const RUNNING_MOMENTUM: f32 = 0.1;

pub fn update_running_stats(params: &mut ParamStore<f32>, stats: &[BatchStats<f32>]) {
    for st in stats {
        for (name, batch) in [("running_mean", &st.mean), ("running_var", &st.var)] {
            if let Some(t) = params.get_mut(&format!("{}.{name}", st.prefix)) {
                for (r, b) in t.data.iter_mut().zip(batch) {
                    *r = (1.0 - RUNNING_MOMENTUM) * *r + RUNNING_MOMENTUM * b;
                }
            }
        }
    }
}

fn parts_finite(p: &ElboParts, loss: f64) -> bool {
    [p.l_r, p.l_t, p.l_f, p.r_tc, loss].iter().all(|v| v.is_finite())
}

/// Train from the seed-derived initialization. When `out` is given the
/// training log, validation log and best checkpoint are written there.
pub fn train(train_set: &Dataset, val_set: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let model = ClapNp::<f32>::new(model_cfg.clone(), crate::rng::derive_seed(cfg.seed, "init", 0))?;
    train_from(model, train_set, val_set, cfg, out)
}

pub fn train_from(mut model: ClapNp<f32>, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let mcfg = model.config.clone();
    let tm = &train_set.manifest;
    if tm.image_dims != mcfg.image_dims() || tm.input_dim != mcfg.input_dim || val_set.manifest.image_dims != tm.image_dims {
        return Err(Error::InvalidConfig(format!(
            "dataset dims {:?} / input {} do not match the model ({:?} / {})",
            tm.image_dims,
            tm.input_dim,
            mcfg.image_dims(),
            mcfg.input_dim
        )));
    }
    if train_set.episodes.is_empty() {
        return Err(Error::Empty("training set"));
    }
    cfg.validate(tm.frames_per_episode)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let dataset_size = train_set.total_images();
    let mut log = Log::create(out, "train_log.csv", LOG_HEADER)?;
    let mut val_log = Log::create(out, "val_log.csv", "epoch,step,val_elbo")?;
    let mut adam = Adam::new(cfg.lr, cfg.clip_norm);
    let start = Instant::now();

    let val_split = fixed_splits(&val_set.episodes, cfg.target_range[1], cfg.seed, "val-split")?;
    let mut history = Vec::new();
    let mut step: u64 = 0;
    let make_ckpt = |params: &crate::nn::ParamStore<f32>, step: u64, epoch: usize, elbo: f64| Checkpoint {
        manifest: CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            model: mcfg.clone(),
            train: cfg.clone(),
            step,
            epoch,
            best_val_elbo: elbo,
            seed: cfg.seed,
            init: params.init.clone(),
            rng: RngState { master_seed: cfg.seed, next_step: step },
            dataset_size,
        },
        params: params.clone(),
    };

    let mut record = |model: &ClapNp<f32>, epoch: usize, step: u64, history: &mut Vec<ValidationRecord>| -> Result<f64> {
        let betas = cfg.betas.at(step);
        let elbo = if val_split.is_empty() { f64::NEG_INFINITY } else { validate_split(model, &val_split, &betas, dataset_size, cfg.batch_size, cfg.seed)? };
        val_log.line(&format!("{epoch},{step},{elbo}"))?;
        history.push(ValidationRecord { epoch, step, elbo });
        Ok(elbo)
    };

    let initial = record(&model, 0, 0, &mut history)?;
    let mut best = make_ckpt(&model.params, 0, 0, initial);

    let n = train_set.episodes.len();
    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, "order", epoch as u64));
        for idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut split_rng = stream(cfg.seed, "split", step);
            let episodes = idx
                .iter()
                .map(|&i| {
                    let k = split_rng.gen_range(cfg.target_range[0]..=cfg.target_range[1]);
                    split_context_target(&train_set.episodes[i], k, &mut split_rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::from_episodes(&episodes)?;
            let noise = PosteriorNoise::sample(&mcfg, batch.rows(), batch.episodes(), &mut stream(cfg.seed, "noise", step));
            let betas = cfg.betas.at(step);
            let ev = evaluate_batch(&model, &model.params, &batch, &noise, &betas, dataset_size, Mode::Train, true)?;
            let grads = ev.grads.expect("gradients requested");
            let grads_finite = grads.values().all(|g| g.data.iter().all(|v| v.is_finite()));
            if !parts_finite(&ev.parts, ev.loss) || !grads_finite {
                let detail = format!("{:?}, gradients finite: {grads_finite}", ev.parts);
                if let Some(dir) = out {
                    let snap = serde_json::json!({ "step": step, "epoch": epoch, "episodes": idx, "parts": ev.parts, "loss": ev.loss });
                    let path = dir.join("nonfinite_snapshot.json");
                    fs::write(&path, snap.to_string()).map_err(|e| Error::io(&path, e))?;
                    write_params(&model.params, &dir.join("nonfinite_params.bin"))?;
                }
                return Err(Error::NonFinite { step, detail });
            }
            adam.step(&mut model.params, &grads);
            update_running_stats(&mut model.params, &ev.batch_stats);
            let p = &ev.parts;
            log.line(&format!(
                "{step},{},{},{},{},{},{},{},{}",
                p.l_r,
                p.l_t,
                p.l_f,
                p.r_tc,
                betas.beta_t,
                betas.beta_f,
                ev.loss,
                start.elapsed().as_millis()
            ))?;
            step += 1;
        }
        if epoch % cfg.validate_every == 0 || epoch == cfg.epochs {
            let elbo = record(&model, epoch, step, &mut history)?;
            if elbo > best.manifest.best_val_elbo {
                best = make_ckpt(&model.params, step, epoch, elbo);
            }
        }
    }
    if history.last().map(|h| h.step) != Some(step) {
        let epoch = history.last().map(|h| h.epoch + 1).unwrap_or(0);
        let elbo = record(&model, epoch, step, &mut history)?;
        if elbo > best.manifest.best_val_elbo {
            best = make_ckpt(&model.params, step, epoch, elbo);
        }
    }
    if let Some(dir) = out {
        best.write(&dir.join("best"))?;
    }
    Ok(TrainOutcome { best, history, final_params: model.params, steps: step })
}
