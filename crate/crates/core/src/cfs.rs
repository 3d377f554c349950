//! Causal factor separation: part affinities, content/context aggregation,
//! causal representations and mask segmentation.
//!
//! Shapes use `b` for batch, `N` for queries, `C` for part classes, `d` for
//! channels and `hw` for flattened feature cells.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::parser::{apply_kernels, KernelGenerator};

/// Part-presence classifier whose weight matrix doubles as the part
/// prototypes used by the affinity.
#[derive(Debug, Clone)]
pub struct PartClassifier {
    pub linear: Linear,
}

impl PartClassifier {
    pub fn new(store: &mut ParamStore, dim: usize, classes: usize) -> Result<Self> {
        Ok(PartClassifier { linear: Linear::new(store, "part_cls", dim, classes)? })
    }

    /// Part logits `(b, N, C)`.
    pub fn forward(&self, f_o: &Tensor) -> Result<Tensor> {
        self.linear.forward(f_o)
    }

    /// Prototype matrix `(C, d)`; row `j` is the weight vector of part `j`.
    pub fn prototypes(&self) -> &Tensor {
        &self.linear.weight
    }
}

/// `A[n, j, x] = sigmoid(sigmoid(c_a[n, j]) * <w_j, F[:, x]>)`.
///
/// `prototypes`: `(C, d)`, `part_logits`: `(b, N, C)`, `features`: `(b, d, hw)`.
/// Returns `(b, N, C, hw)`.
pub fn compute_affinity(prototypes: &Tensor, part_logits: &Tensor, features: &Tensor) -> Result<Tensor> {
    let (c, d) = prototypes.dims2()?;
    let (b, _, lc) = part_logits.dims3()?;
    let (fb, fd, _) = features.dims3()?;
    if lc != c || fd != d || fb != b {
        return Err(Error::Shape(format!(
            "affinity: prototypes {:?}, logits {:?}, features {:?}",
            prototypes.dims(),
            part_logits.dims(),
            features.dims()
        )));
    }
    let response = prototypes.broadcast_matmul(features)?.unsqueeze(1)?; // (b, 1, C, hw)
    let gate = candle_nn::ops::sigmoid(part_logits)?.unsqueeze(3)?; // (b, N, C, 1)
    Ok(candle_nn::ops::sigmoid(&response.broadcast_mul(&gate)?)?)
}

/// Content and context aggregates `(b, N, C, d)`.
///
/// Content pools the features with each part's affinity; context pools them
/// with the clamped sum of the other parts' affinities. Both are averaged
/// over cells.
pub fn aggregate(features: &Tensor, affinity: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, d, hw) = features.dims3()?;
    let (ab, n, c, ahw) = affinity.dims4()?;
    if ab != b || ahw != hw {
        return Err(Error::Shape(format!("aggregate: features {:?}, affinity {:?}", features.dims(), affinity.dims())));
    }
    let cells = features.transpose(1, 2)?.unsqueeze(1)?.broadcast_as((b, n, hw, d))?.contiguous()?;
    let others = affinity.sum_keepdim(2)?.broadcast_as((b, n, c, hw))?.sub(affinity)?.clamp(0.0, 1.0)?;
    let content = (affinity.matmul(&cells)? / hw as f64)?;
    let context = (others.matmul(&cells)? / hw as f64)?;
    Ok((content, context))
}

/// The two branches of the separation head.
#[derive(Debug, Clone)]
pub struct CausalKernels {
    pub content: KernelGenerator,
    pub context: KernelGenerator,
}

impl CausalKernels {
    pub fn new(store: &mut ParamStore, dim: usize, hidden: usize) -> Result<Self> {
        Ok(CausalKernels {
            content: KernelGenerator::new(store, "content_kernel", dim, hidden, dim, dim)?,
            context: KernelGenerator::new(store, "context_kernel", dim, hidden, dim, dim)?,
        })
    }

    /// Causal representations `(b*N, d, hw)` from one aggregate
    /// `(b, N, C, d)` and the instance features `(b*N, d, hw)`. The
    /// aggregate is averaged over parts before generating the kernel.
    pub fn represent(generator: &KernelGenerator, aggregate: &Tensor, instance_features: &Tensor) -> Result<Tensor> {
        let pooled = aggregate.mean(2)?;
        let (kernel, bias) = generator.forward(&pooled)?;
        apply_kernels(instance_features, &kernel, &bias, true)
    }

    /// `(content representation, context representation)`.
    pub fn build(&self, content: &Tensor, context: &Tensor, instance_features: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((Self::represent(&self.content, content, instance_features)?, Self::represent(&self.context, context, instance_features)?))
    }
}

/// Shared 1x1 segmentor: `(M, d, hw)` -> logits `(M, C+1, hw)`, channel 0
/// being background.
#[derive(Debug, Clone)]
pub struct Segmentor {
    pub linear: Linear,
}

impl Segmentor {
    pub fn new(store: &mut ParamStore, dim: usize, classes: usize) -> Result<Self> {
        Ok(Segmentor { linear: Linear::new(store, "segment", dim, classes + 1)? })
    }

    pub fn forward(&self, reps: &Tensor) -> Result<Tensor> {
        let logits = reps.transpose(1, 2)?.contiguous()?;
        Ok(self.linear.forward(&logits)?.transpose(1, 2)?.contiguous()?)
    }
}

/// Per-cell class distribution of `(M, C+1, hw)` logits.
pub fn mask_probs(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, 1)?)
}

/// Mean of the two branch logits; apply [`mask_probs`] for probabilities.
pub fn fuse_masks(content_logits: &Tensor, context_logits: &Tensor) -> Result<Tensor> {
    if content_logits.dims() != context_logits.dims() {
        return Err(Error::Shape("fused masks must share a shape".into()));
    }
    Ok(((content_logits + context_logits)? * 0.5)?)
}

/// Sum over the part axis of an affinity tensor; handy for probes.
pub fn affinity_total(affinity: &Tensor) -> Result<Tensor> {
    Ok(affinity.sum(D::Minus2)?)
}
