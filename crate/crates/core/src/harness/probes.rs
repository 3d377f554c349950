//! Measurements on trained representations: invariance under style
//! interventions, content/context similarity, and affinity sharpness.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::evaluate::{evaluate_scenes, MaskSource};
use super::train::assign;
use crate::error::{Error, Result};
use crate::losses::{cosine, phi_aggregate, MatchedTargets};
use crate::model::ParsingModel;
use crate::synth::{apply_intervention, InterventionKind, InterventionSpec, LabeledScene};
use crate::targets::SceneTarget;

/// Probe results for one model on one scene set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Mean cosine of content part vectors, original vs restyled scene.
    pub content_invariance: Option<f64>,
    /// Mean cosine between content and context part vectors.
    pub content_context_cosine: Option<f64>,
    /// Mean affinity on a part's ground-truth cells minus the mean elsewhere.
    pub affinity_contrast: Option<f64>,
    pub miou_fused: f64,
    pub miou_content: Option<f64>,
    pub miou_context: Option<f64>,
    pub scenes: usize,
    pub part_vectors: usize,
}

/// Sums of masked values, accumulated across batches.
#[derive(Default)]
struct Mean {
    sum: f64,
    count: f64,
}

impl Mean {
    fn add(&mut self, values: &Tensor, mask: &Tensor) -> Result<()> {
        let v = values.to_dtype(DType::F64)?;
        let m = mask.to_dtype(DType::F64)?;
        self.sum += (v * &m)?.sum_all()?.to_scalar::<f64>()?;
        self.count += m.sum_all()?.to_scalar::<f64>()?;
        Ok(())
    }

    fn get(&self) -> Option<f64> {
        (self.count > 0.0).then(|| self.sum / self.count)
    }
}

/// Run every probe. Restyled views come from the random-style
/// intervention seeded with `view_seed`.
pub fn probe(model: &ParsingModel, cfg: &ExperimentConfig, scenes: &[LabeledScene], view_seed: u64) -> Result<ProbeReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("probes need at least one scene".into()));
    }
    let grid = model.config.grid();
    let spec = InterventionSpec::on_limbs(InterventionKind::RandomStyle, view_seed);
    let mut invariance = Mean::default();
    let mut similarity = Mean::default();
    let mut inside = Mean::default();
    let mut outside = Mean::default();
    let mut vectors = 0;
    for chunk in scenes.chunks(cfg.eval.batch_size) {
        let targets: Vec<SceneTarget> = chunk.iter().map(|s| SceneTarget::from_scene(s, grid)).collect::<Result<_>>()?;
        let views: Vec<LabeledScene> = chunk.iter().map(|s| apply_intervention(s, &spec)).collect::<Result<_>>()?;
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let out = model.forward_images(&images)?;
        let assignments = assign(&out, &targets, cfg)?;
        let m = MatchedTargets::build(&targets, &assignments, out.num_queries, DType::F32, model.device())?;
        if m.matched == 0 {
            continue;
        }
        vectors += m.part_valid.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()? as usize;
        if let Some(content) = &out.content {
            let base = phi_aggregate(&content.detach(), &m)?;
            let view_images: Vec<_> = views.iter().map(|s| &s.image).collect();
            let view = model.forward_images(&view_images)?;
            let moved = phi_aggregate(&view.content.as_ref().expect("same arm").detach(), &m)?;
            invariance.add(&cosine(&base, &moved)?, &m.part_valid)?;
            if let Some(context) = &out.context {
                let ctx = phi_aggregate(&context.detach(), &m)?;
                similarity.add(&cosine(&base, &ctx)?, &m.part_valid)?;
            }
        }
        if let Some(affinity) = &out.affinity {
            let (b, n, c, hw) = affinity.dims4()?;
            let picked = affinity.detach().reshape((b * n, c, hw))?.index_select(&m.query_index, 0)?;
            inside.add(&picked, &m.part_masks)?;
            outside.add(&picked, &(1.0 - &m.part_masks)?)?;
        }
    }
    let branch = |source| -> Result<Option<f64>> {
        let present = match source {
            MaskSource::Content => model.causal.is_some() && model.arm.branches != crate::model::Branches::Context,
            MaskSource::Context => model.causal.is_some() && model.arm.branches != crate::model::Branches::Content,
            MaskSource::Fused => true,
        };
        if !present {
            return Ok(None);
        }
        Ok(Some(evaluate_scenes(model, scenes, &cfg.eval, source)?.miou))
    };
    Ok(ProbeReport {
        content_invariance: invariance.get(),
        content_context_cosine: similarity.get(),
        affinity_contrast: inside.get().zip(outside.get()).map(|(a, b)| a - b),
        miou_fused: branch(MaskSource::Fused)?.unwrap_or(0.0),
        miou_content: branch(MaskSource::Content)?,
        miou_context: branch(MaskSource::Context)?,
        scenes: scenes.len(),
        part_vectors: vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArmConfig;
    use crate::parser::ModelConfig;
    use crate::synth::{generate_scene, SceneConfig, StyleId};

    #[test]
    fn probes_on_untrained_models() {
        let scene_cfg = SceneConfig { image_size: 32, scale_range: (0.35, 0.4), ..Default::default() };
        let scenes: Vec<_> = (0..3).map(|s| generate_scene(&scene_cfg, 1 + s as usize, StyleId::Natural, s).unwrap()).collect();
        let mut cfg = ExperimentConfig::default();
        cfg.model = ModelConfig { image_size: 32, stride: 4, dim: 8, num_queries: 4, decoder_layers: 1, heads: 2, kernel_hidden: 8 };
        let full = ParsingModel::new(&cfg.model, &ArmConfig::full(), 0, DType::F32).unwrap();
        let r = probe(&full, &cfg, &scenes, 0).unwrap();
        let inv = r.content_invariance.unwrap();
        assert!((-1.0..=1.0 + 1e-6).contains(&inv));
        assert!(r.content_context_cosine.is_some());
        assert!(r.miou_content.is_some() && r.miou_context.is_some());
        assert!(r.part_vectors > 0);

        let base = ParsingModel::new(&cfg.model, &ArmConfig::baseline(), 0, DType::F32).unwrap();
        let r = probe(&base, &cfg, &scenes, 0).unwrap();
        assert!(r.content_invariance.is_none() && r.affinity_contrast.is_none());
        assert!(r.miou_content.is_none());
    }
}
