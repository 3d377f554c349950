//! The training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::evaluate::{checkpoint_metadata, evaluate_scenes, MaskSource};
use crate::error::{Error, Result};
use crate::losses::{loss_det, loss_inv, loss_part, similarity_term, total_loss, LossBreakdown, MatchedTargets};
use crate::matching::{match_instances, matching_cost, PersonTargets, QueryPredictions};
use crate::metrics::MetricsReport;
use crate::model::{ForwardOutput, ParsingModel};
use crate::synth::{mix_seed, Image, LabeledScene, Manifest};
use crate::targets::SceneTarget;

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RECORD_FILE: &str = "run.json";

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub l_part: f64,
    pub l_sim: f64,
    pub l_div: f64,
    pub l_inv: f64,
    pub l_det: f64,
    pub total: f64,
    pub vanished_parts: usize,
}

/// What a finished run leaves behind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub arm: String,
    pub seed: u64,
    pub fingerprint: String,
    pub config: String,
    pub epochs: Vec<EpochStats>,
    pub checkpoint: PathBuf,
    pub metrics: Option<MetricsReport>,
    /// Forward passes run on intervened views. Zero whenever the
    /// invariance loss is off.
    pub intervened_forwards: usize,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&super::config::read_text(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Hungarian assignment of every image's persons to queries, using detached
/// predictions.
pub fn assign(out: &ForwardOutput, targets: &[SceneTarget], cfg: &ExperimentConfig) -> Result<Vec<Vec<(usize, usize)>>> {
    let probs = out.person_probs()?;
    let boxes = out.boxes_vec()?;
    let fg = out.mask_probabilities()?.narrow(1, 0, 1)?.squeeze(1)?.to_dtype(DType::F64)?;
    let fg: Vec<Vec<f64>> = (1.0 - fg)?.to_vec2::<f64>()?;
    let n = out.num_queries;
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let gt_boxes: Vec<[f64; 4]> = t.instances.iter().map(|inst| inst.bbox).collect();
            let gt_fg: Vec<Vec<f64>> = t.instances.iter().map(|inst| inst.foreground.clone()).collect();
            let pred = QueryPredictions { person_prob: &probs[i], boxes: &boxes[i], foreground: &fg[i * n..(i + 1) * n] };
            let gt = PersonTargets { boxes: &gt_boxes, foreground: &gt_fg };
            match_instances(&matching_cost(&pred, &gt, &cfg.loss.matching))
        })
        .collect()
}

struct Sample {
    scene: LabeledScene,
    target: SceneTarget,
    views: Vec<Image>,
}

/// Loss of one batch. `views[e]` holds the batch rendered in view style `e`.
/// Returns the differentiable total, its breakdown and the number of
/// intervened forward passes run.
pub fn batch_loss(
    model: &ParsingModel,
    cfg: &ExperimentConfig,
    images: &[&Image],
    targets: &[SceneTarget],
    views: &[Vec<&Image>],
) -> Result<(Tensor, LossBreakdown, usize)> {
    let out = model.forward_images(images)?;
    let assignments = assign(&out, targets, cfg)?;
    let m = MatchedTargets::build(targets, &assignments, out.num_queries, model.store.dtype(), model.device())?;
    let det = loss_det(&out.class_logits, &out.boxes, &out.part_logits, &m)?.total()?;
    let part = loss_part(&out.branch_logits(), &m)?;
    let sim = match (cfg.arm.use_div, &out.content, &out.context) {
        (true, Some(c), Some(t)) => Some(similarity_term(c, t, &m)?),
        _ => None,
    };
    let mut forwards = 0;
    let inv = if cfg.arm.use_inv {
        let mut reps = Vec::with_capacity(views.len());
        for view in views {
            let vo = model.forward_images(view)?;
            forwards += 1;
            reps.push(vo.representations().into_iter().cloned().collect::<Vec<_>>());
        }
        Some(loss_inv(&out.representations(), &reps, &m)?)
    } else {
        None
    };
    let (total, breakdown) = total_loss(&det, &part, sim.as_ref(), inv.as_ref(), &cfg.loss.weights, &m, views.len())?;
    Ok((total, breakdown, forwards))
}

/// Train a fresh model on `scenes`, writing the log, checkpoint and record
/// under `out_dir`.
pub fn train(cfg: &ExperimentConfig, scenes: &[LabeledScene], out_dir: &Path) -> Result<(ParsingModel, RunRecord)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let model = ParsingModel::new(&cfg.model, &cfg.arm, cfg.seed, DType::F32)?;
    let grid = cfg.model.grid();
    let samples: Vec<Sample> = scenes
        .iter()
        .map(|s| {
            let views = if cfg.arm.use_inv { cfg.loss.views.iter().map(|&style| s.restyle(style).image).collect() } else { Vec::new() };
            Ok(Sample { target: SceneTarget::from_scene(s, grid)?, scene: s.clone(), views })
        })
        .collect::<Result<_>>()?;

    let mut opt =
        AdamW::new(model.store.vars(), ParamsAdamW { lr: cfg.train.lr, weight_decay: cfg.train.weight_decay, ..Default::default() })?;
    let steps_per_epoch = samples.len().div_ceil(cfg.train.batch_size);
    let total_steps = steps_per_epoch * cfg.train.epochs;
    let drop_step = (cfg.train.lr_drop_at * total_steps as f64).floor() as usize;
    let mut log = BufWriter::new(File::create(out_dir.join(LOG_FILE))?);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut intervened = 0;
    let mut step = 0;
    let meta = checkpoint_metadata(cfg)?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);

    for epoch in 0..cfg.train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = EpochStats { epoch, ..Default::default() };
        for batch in order.chunks(cfg.train.batch_size) {
            if step == drop_step && drop_step > 0 {
                opt.set_learning_rate(cfg.train.lr * cfg.train.lr_drop_factor);
            }
            let images: Vec<&Image> = batch.iter().map(|&i| &samples[i].scene.image).collect();
            let targets: Vec<SceneTarget> = batch.iter().map(|&i| samples[i].target.clone()).collect();
            let views: Vec<Vec<&Image>> = (0..if cfg.arm.use_inv { cfg.loss.views.len() } else { 0 })
                .map(|e| batch.iter().map(|&i| &samples[i].views[e]).collect())
                .collect();
            let (loss, b, forwards) = batch_loss(&model, cfg, &images, &targets, &views)?;
            if !b.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, detail: format!("{b:?}") });
            }
            opt.backward_step(&loss)?;
            intervened += forwards;
            let entry = StepLog { epoch, step, lr: opt.learning_rate(), loss: b };
            writeln!(log, "{}", serde_json::to_string(&entry)?)?;
            sum.l_part += b.l_part;
            sum.l_sim += b.l_sim;
            sum.l_div += b.l_div;
            sum.l_inv += b.l_inv;
            sum.l_det += b.l_det;
            sum.total += b.total;
            sum.vanished_parts += b.vanished_parts;
            step += 1;
        }
        let k = steps_per_epoch as f64;
        let stats = EpochStats {
            lr: opt.learning_rate(),
            l_part: sum.l_part / k,
            l_sim: sum.l_sim / k,
            l_div: sum.l_div / k,
            l_inv: sum.l_inv / k,
            l_det: sum.l_det / k,
            total: sum.total / k,
            ..sum
        };
        log::info!(
            "{} seed {} epoch {epoch}: total {:.4} part {:.4} det {:.4} inv {:.4}",
            cfg.arm.label(),
            cfg.seed,
            stats.total,
            stats.l_part,
            stats.l_det,
            stats.l_inv
        );
        epochs.push(stats);
        if (epoch + 1) % cfg.train.checkpoint_every.max(1) == 0 || epoch + 1 == cfg.train.epochs {
            model.store.save(&ckpt, &meta)?;
        }
    }
    log.flush()?;
    let record = RunRecord {
        name: cfg.name.clone(),
        arm: cfg.arm.label(),
        seed: cfg.seed,
        fingerprint: cfg.fingerprint()?,
        config: cfg.to_toml()?,
        epochs,
        checkpoint: ckpt,
        metrics: None,
        intervened_forwards: intervened,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    record.save(&out_dir.join(RECORD_FILE))?;
    Ok((model, record))
}

/// Train on the configured split, then evaluate on the test split.
/// Relative manifest paths resolve against `base_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path, out_dir: &Path) -> Result<(ParsingModel, RunRecord)> {
    let manifest_path = if cfg.data.manifest.is_absolute() { cfg.data.manifest.clone() } else { base_dir.join(&cfg.data.manifest) };
    let manifest = Manifest::load(&manifest_path)?;
    let train_scenes = manifest.load_split(&cfg.data.train_split)?;
    let (model, mut record) = train(cfg, &train_scenes, out_dir)?;
    let test = manifest.load_split(&cfg.data.test_split)?;
    if !test.is_empty() {
        record.metrics = Some(evaluate_scenes(&model, &test, &cfg.eval, MaskSource::Fused)?);
        record.save(&out_dir.join(RECORD_FILE))?;
    }
    Ok((model, record))
}
