//! Inference and dataset evaluation.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::config::{EvalConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::metrics::{merge_semantic, GroundTruthPerson, MetricsAccumulator, MetricsReport, ParsedPerson};
use crate::model::{ForwardOutput, ParsingModel};
use crate::nn::read_checkpoint;
use crate::synth::{LabeledScene, Manifest};

/// Which segmentation output to read at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// The model's inference masks (fused when both branches exist).
    Fused,
    Content,
    Context,
}

/// Parsed persons for one image plus the merged semantic map.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrediction {
    pub persons: Vec<ParsedPerson>,
    pub semantic: Vec<u8>,
}

fn source_logits(out: &ForwardOutput, source: MaskSource) -> Result<&Tensor> {
    match source {
        MaskSource::Fused => Ok(&out.mask_logits),
        MaskSource::Content => out.content_logits.as_ref().ok_or_else(|| Error::InvalidArgument("model has no content branch".into())),
        MaskSource::Context => out.context_logits.as_ref().ok_or_else(|| Error::InvalidArgument("model has no context branch".into())),
    }
}

/// Queries kept for an image: person probability above the threshold,
/// highest first (ties to the lower query), at most `max` of them.
pub fn select_queries(person_probs: &[f64], threshold: f64, max: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..person_probs.len()).filter(|&q| person_probs[q] > threshold).collect();
    keep.sort_by(|&a, &b| person_probs[b].total_cmp(&person_probs[a]).then(a.cmp(&b)));
    keep.truncate(max);
    keep
}

/// Nearest-neighbour upsampling of per-cell argmax labels to the image.
/// Returns the label map and the probability of the chosen label.
pub fn upsample_labels(probs: &[Vec<f32>], grid: usize, size: usize) -> (Vec<u8>, Vec<f32>) {
    let stride = size / grid;
    let cells = grid * grid;
    let mut cell_label = vec![0u8; cells];
    let mut cell_conf = vec![0f32; cells];
    for x in 0..cells {
        let mut best = 0;
        for c in 1..probs.len() {
            if probs[c][x] > probs[best][x] {
                best = c;
            }
        }
        cell_label[x] = best as u8;
        cell_conf[x] = probs[best][x];
    }
    let mut labels = vec![0u8; size * size];
    let mut conf = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let cell = (y / stride) * grid + x / stride;
            labels[y * size + x] = cell_label[cell];
            conf[y * size + x] = cell_conf[cell];
        }
    }
    (labels, conf)
}

/// Run inference on `scenes` in batches.
pub fn predict(model: &ParsingModel, scenes: &[LabeledScene], cfg: &EvalConfig, source: MaskSource) -> Result<Vec<ScenePrediction>> {
    let size = model.config.image_size;
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(cfg.batch_size) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let fwd = model.forward_images(&images)?;
        let probs = candle_nn::ops::softmax(&source_logits(&fwd, source)?.detach(), 1)?.to_dtype(DType::F32)?.to_vec3::<f32>()?;
        let person = fwd.person_probs()?;
        for (i, pp) in person.iter().enumerate() {
            let mut persons = Vec::new();
            let mut labels = Vec::new();
            let mut confs = Vec::new();
            for q in select_queries(pp, cfg.score_threshold, cfg.max_instances) {
                let (lab, conf) = upsample_labels(&probs[i * fwd.num_queries + q], fwd.grid, size);
                persons.push(ParsedPerson { score: pp[q], query: q, labels: lab.clone() });
                labels.push(lab);
                confs.push(conf);
            }
            out.push(ScenePrediction { persons, semantic: merge_semantic(&labels, &confs, size * size) });
        }
    }
    Ok(out)
}

pub fn ground_truth_persons(scene: &LabeledScene) -> Vec<GroundTruthPerson> {
    scene.instances.iter().map(|inst| GroundTruthPerson { labels: inst.label_map(), presence: inst.part_presence }).collect()
}

/// Predictions that reproduce the ground truth exactly.
pub fn oracle_predictions(scene: &LabeledScene) -> ScenePrediction {
    let persons =
        scene.instances.iter().enumerate().map(|(q, inst)| ParsedPerson { score: 1.0, query: q, labels: inst.label_map() }).collect();
    ScenePrediction { persons, semantic: scene.label_map() }
}

pub fn score_predictions(scenes: &[LabeledScene], preds: &[ScenePrediction]) -> Result<MetricsReport> {
    if scenes.len() != preds.len() {
        return Err(Error::Shape("one prediction per scene is required".into()));
    }
    let mut acc = MetricsAccumulator::new();
    for (scene, pred) in scenes.iter().zip(preds) {
        acc.add_image(&pred.persons, &ground_truth_persons(scene), &pred.semantic, &scene.label_map())?;
    }
    Ok(acc.finish())
}

pub fn evaluate_scenes(model: &ParsingModel, scenes: &[LabeledScene], cfg: &EvalConfig, source: MaskSource) -> Result<MetricsReport> {
    score_predictions(scenes, &predict(model, scenes, cfg, source)?)
}

/// Rebuild a model from a checkpoint written by the trainer.
pub fn load_model(checkpoint: &Path) -> Result<(ParsingModel, ExperimentConfig)> {
    if !checkpoint.exists() {
        return Err(Error::NotFound(checkpoint.to_path_buf()));
    }
    let (_, meta) = read_checkpoint(checkpoint)?;
    let config = meta
        .get("config")
        .ok_or_else(|| Error::format("checkpoint", "missing config echo"))
        .and_then(|text| ExperimentConfig::from_toml(text))?;
    let mut model = ParsingModel::new(&config.model, &config.arm, config.seed, DType::F32)?;
    model.store.load(checkpoint)?;
    Ok((model, config))
}

/// Evaluate a checkpoint on one split of a manifest. When the manifest has
/// no such split, every record is used.
pub fn evaluate_checkpoint(checkpoint: &Path, manifest: &Path, split: Option<&str>) -> Result<MetricsReport> {
    let (model, config) = load_model(checkpoint)?;
    let manifest = Manifest::load(manifest)?;
    let split = split.unwrap_or(&config.data.test_split);
    let scenes = if manifest.split(split).next().is_some() { manifest.load_split(split)? } else { manifest.load_all()? };
    evaluate_scenes(&model, &scenes, &config.eval, MaskSource::Fused)
}

/// Metadata stored next to the parameters of every checkpoint.
pub fn checkpoint_metadata(config: &ExperimentConfig) -> Result<HashMap<String, String>> {
    let mut meta = HashMap::new();
    meta.insert("config".to_string(), config.to_toml()?);
    meta.insert("arm".to_string(), config.arm.label());
    Ok(meta)
}
