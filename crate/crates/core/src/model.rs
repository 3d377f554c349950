//! The full parser: instance branch plus either the plain segmentation head
//! or the causal factor separation head.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::cfs::{aggregate, compute_affinity, fuse_masks, mask_probs, CausalKernels, PartClassifier, Segmentor};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::parser::{reference_points, FeatureMap, ModelConfig, ParserCore};
use crate::synth::{Image, NUM_PARTS};

/// Which causal representations feed the segmentor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    #[default]
    Both,
    Content,
    Context,
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmConfig {
    pub use_cfs: bool,
    pub branches: Branches,
    pub use_div: bool,
    pub use_inv: bool,
}

impl Default for ArmConfig {
    fn default() -> Self {
        ArmConfig { use_cfs: true, branches: Branches::Both, use_div: true, use_inv: true }
    }
}

impl ArmConfig {
    pub fn baseline() -> Self {
        ArmConfig { use_cfs: false, branches: Branches::Both, use_div: false, use_inv: false }
    }

    pub fn cfs_only(branches: Branches) -> Self {
        ArmConfig { use_cfs: true, branches, use_div: false, use_inv: false }
    }

    pub fn full() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if (self.use_div || self.use_inv) && !self.use_cfs {
            return Err(Error::Config("use_div and use_inv require use_cfs".into()));
        }
        if self.use_div && self.branches != Branches::Both {
            return Err(Error::Config("use_div needs both content and context branches".into()));
        }
        Ok(())
    }

    /// Short stable name used in tables and cache keys.
    pub fn label(&self) -> String {
        if !self.use_cfs {
            return "baseline".into();
        }
        let reps = match self.branches {
            Branches::Both => "cfs",
            Branches::Content => "cfs_content",
            Branches::Context => "cfs_context",
        };
        match (self.use_div, self.use_inv) {
            (false, false) => reps.into(),
            (true, true) => format!("{reps}+cil"),
            (true, false) => format!("{reps}+div"),
            (false, true) => format!("{reps}+inv"),
        }
    }
}

/// Everything one forward pass produces. Spatial tensors are flattened:
/// per-instance maps are `(b*N, channels, h*w)`.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub batch: usize,
    pub num_queries: usize,
    pub grid: usize,
    pub features: FeatureMap,
    pub f_o: Tensor,
    pub cross_attention: Tensor,
    pub class_logits: Tensor,
    pub boxes: Tensor,
    pub part_logits: Tensor,
    pub instance_features: Tensor,
    pub affinity: Option<Tensor>,
    pub content: Option<Tensor>,
    pub context: Option<Tensor>,
    pub content_logits: Option<Tensor>,
    pub context_logits: Option<Tensor>,
    /// Logits used for inference and matching.
    pub mask_logits: Tensor,
}

impl ForwardOutput {
    /// Logits that receive the part loss.
    pub fn branch_logits(&self) -> Vec<&Tensor> {
        let branches: Vec<&Tensor> = self.content_logits.iter().chain(self.context_logits.iter()).collect();
        if branches.is_empty() {
            vec![&self.mask_logits]
        } else {
            branches
        }
    }

    /// Causal representations present in this arm.
    pub fn representations(&self) -> Vec<&Tensor> {
        self.content.iter().chain(self.context.iter()).collect()
    }

    /// Person probability per query, `(b, N)`.
    pub fn person_probs(&self) -> Result<Vec<Vec<f64>>> {
        let p = candle_nn::ops::softmax(&self.class_logits.detach(), 2)?.narrow(2, 0, 1)?.squeeze(2)?;
        Ok(p.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    pub fn boxes_vec(&self) -> Result<Vec<Vec<[f64; 4]>>> {
        let b = self.boxes.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?;
        Ok(b.into_iter().map(|img| img.into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect()).collect())
    }

    /// Class probabilities of the inference masks, `(b*N, C+1, hw)`.
    pub fn mask_probabilities(&self) -> Result<Tensor> {
        mask_probs(&self.mask_logits.detach())
    }
}

pub struct ParsingModel {
    pub store: ParamStore,
    pub config: ModelConfig,
    pub arm: ArmConfig,
    pub core: ParserCore,
    pub part_classifier: PartClassifier,
    pub segmentor: Segmentor,
    pub causal: Option<CausalKernels>,
}

impl ParsingModel {
    pub fn new(config: &ModelConfig, arm: &ArmConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        arm.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let core = ParserCore::new(&mut store, config)?;
        let part_classifier = PartClassifier::new(&mut store, config.dim, NUM_PARTS)?;
        let segmentor = Segmentor::new(&mut store, config.dim, NUM_PARTS)?;
        let causal = if arm.use_cfs { Some(CausalKernels::new(&mut store, config.dim, config.kernel_hidden)?) } else { None };
        Ok(ParsingModel { store, config: config.clone(), arm: *arm, core, part_classifier, segmentor, causal })
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Stack images into a `(b, 3, H, W)` tensor.
    pub fn images_to_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let size = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * 3 * size * size);
        for img in images {
            if img.size != size {
                return Err(Error::Shape(format!("image is {}px, model expects {size}px", img.size)));
            }
            for c in 0..3 {
                data.extend(img.data.iter().skip(c).step_by(3).copied());
            }
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, size, size), self.device())?.to_dtype(self.store.dtype())?)
    }

    pub fn forward_images(&self, images: &[&Image]) -> Result<ForwardOutput> {
        self.forward(&self.images_to_tensor(images)?)
    }

    pub fn forward(&self, images: &Tensor) -> Result<ForwardOutput> {
        let features = self.core.backbone.forward(images)?;
        let (b, _, h, w) = features.dims()?;
        let decoded = self.core.decoder.forward(&features)?;
        let reference = reference_points(&decoded.cross_attention, h, w)?;
        let (class_logits, boxes) = self.core.detect.forward_with_reference(&decoded.f_o, &reference)?;
        let part_logits = self.part_classifier.forward(&decoded.f_o)?;
        let instance_features = self.core.instance_features(&features, &decoded.f_o, &boxes, &decoded.cross_attention)?;
        let n = decoded.f_o.dim(1)?;
        let mut out = ForwardOutput {
            batch: b,
            num_queries: n,
            grid: h,
            features: features.clone(),
            f_o: decoded.f_o,
            cross_attention: decoded.cross_attention,
            class_logits,
            boxes,
            part_logits: part_logits.clone(),
            instance_features: instance_features.clone(),
            affinity: None,
            content: None,
            context: None,
            content_logits: None,
            context_logits: None,
            mask_logits: instance_features.clone(),
        };
        debug_assert_eq!(h, w);
        match &self.causal {
            None => {
                out.mask_logits = self.segmentor.forward(&instance_features)?;
            }
            Some(kernels) => {
                let flat = features.flat()?;
                let affinity = compute_affinity(self.part_classifier.prototypes(), &part_logits, &flat)?;
                let (content_agg, context_agg) = aggregate(&flat, &affinity)?;
                if self.arm.branches != Branches::Context {
                    let p = CausalKernels::represent(&kernels.content, &content_agg, &instance_features)?;
                    out.content_logits = Some(self.segmentor.forward(&p)?);
                    out.content = Some(p);
                }
                if self.arm.branches != Branches::Content {
                    let p = CausalKernels::represent(&kernels.context, &context_agg, &instance_features)?;
                    out.context_logits = Some(self.segmentor.forward(&p)?);
                    out.context = Some(p);
                }
                out.mask_logits = match (&out.content_logits, &out.context_logits) {
                    (Some(c), Some(t)) => fuse_masks(c, t)?,
                    (Some(c), None) => c.clone(),
                    (None, Some(t)) => t.clone(),
                    (None, None) => unreachable!("at least one branch is active"),
                };
                out.affinity = Some(affinity);
            }
        }
        Ok(out)
    }
}
