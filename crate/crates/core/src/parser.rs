//! Backbone, query decoder, detection heads and instance-aware features.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};

/// Extra channels appended to the feature map before the instance kernels:
/// offsets `u, v` from the instance's box center in box units, a box prior
/// `exp(-4 (u^2 + v^2))`, and the query's cross-attention map (head mean,
/// scaled so a uniform map is 1).
pub const LOCATION_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub stride: usize,
    pub dim: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Hidden width of the kernel-generating perceptrons.
    pub kernel_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { image_size: 128, stride: 8, dim: 64, num_queries: 10, decoder_layers: 2, heads: 4, kernel_hidden: 64 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stride, 2 | 4 | 8 | 16) {
            return Err(Error::Config(format!("stride must be 2, 4, 8 or 16, got {}", self.stride)));
        }
        if !self.image_size.is_multiple_of(self.stride) {
            return Err(Error::Config("image_size must be a multiple of stride".into()));
        }
        if self.grid() < 8 {
            return Err(Error::Config("feature grid must be at least 8x8".into()));
        }
        if self.dim < 4 || !self.dim.is_multiple_of(4) {
            return Err(Error::Config("dim must be a positive multiple of 4".into()));
        }
        if self.num_queries == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("num_queries and decoder_layers must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config("dim must be divisible by heads".into()));
        }
        Ok(())
    }

    /// Side of the square feature grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.stride
    }
}

/// Image-level features `(batch, dim, h, w)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.values.dims4()?)
    }

    /// `(batch, dim, h*w)`.
    pub fn flat(&self) -> Result<Tensor> {
        let (b, d, h, w) = self.dims()?;
        Ok(self.values.reshape((b, d, h * w))?)
    }
}

/// Strided convolutional encoder: four 3x3 blocks.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub blocks: Vec<Conv2d>,
    pub norms: Vec<LayerNorm>,
    stride: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        // at least 8 channels per block so the per-pixel norm is well conditioned
        let channels = [3, (d / 4).max(8), (d / 2).max(8), d, d];
        let strides: [usize; 4] = match cfg.stride {
            2 => [2, 1, 1, 1],
            4 => [2, 2, 1, 1],
            8 => [2, 2, 2, 1],
            _ => [2, 2, 2, 2],
        };
        let blocks = (0..4)
            .map(|i| Conv2d::new(store, &format!("backbone.{i}"), channels[i], channels[i + 1], 3, strides[i]))
            .collect::<Result<_>>()?;
        let norms = (0..4).map(|i| LayerNorm::new(store, &format!("backbone.{i}.norm"), channels[i + 1])).collect::<Result<_>>()?;
        Ok(Backbone { blocks, norms, stride: cfg.stride })
    }

    /// `images`: `(batch, 3, H, W)`.
    pub fn forward(&self, images: &Tensor) -> Result<FeatureMap> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 image channels, got {c}")));
        }
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::Shape(format!("image size {h}x{w} is not a multiple of stride {}", self.stride)));
        }
        let mut x = images.clone();
        for (block, norm) in self.blocks.iter().zip(&self.norms) {
            let y = block.forward(&x)?.permute((0, 2, 3, 1))?;
            x = norm.forward(&y)?.relu()?.permute((0, 3, 1, 2))?.contiguous()?;
        }
        Ok(FeatureMap { values: x, stride: self.stride })
    }
}

/// Fixed 2D sinusoidal encoding, `(h*w, dim)`.
pub fn positional_encoding(h: usize, w: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let quarter = dim / 4;
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = ((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64);
            let mut row = Vec::with_capacity(dim);
            for (pos, _) in [(fy, 0), (fx, 1)] {
                for k in 0..quarter {
                    let freq = std::f64::consts::PI * (k + 1) as f64;
                    row.push((pos * freq).sin());
                    row.push((pos * freq).cos());
                }
            }
            row.resize(dim, 0.0);
            data.extend(row);
        }
    }
    Ok(Tensor::from_vec(data, (h * w, dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: Mlp,
    norms: [LayerNorm; 3],
}

/// Output of the query decoder.
#[derive(Debug, Clone)]
pub struct Decoded {
    /// Instance features `(batch, N, dim)`.
    pub f_o: Tensor,
    /// Cross-attention weights of the last layer `(batch, heads, N, h*w)`.
    pub cross_attention: Tensor,
}

#[derive(Debug, Clone)]
pub struct QueryDecoder {
    layers: Vec<DecoderLayer>,
    pub queries: Tensor,
}

impl QueryDecoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        let queries = store.param("decoder.queries", &[cfg.num_queries, d], Init::Uniform(1.0))?;
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                Ok(DecoderLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self"), d, cfg.heads)?,
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross"), d, cfg.heads)?,
                    ffn: Mlp::new(store, &format!("{p}.ffn"), d, 2 * d, d)?,
                    norms: [
                        LayerNorm::new(store, &format!("{p}.norm0"), d)?,
                        LayerNorm::new(store, &format!("{p}.norm1"), d)?,
                        LayerNorm::new(store, &format!("{p}.norm2"), d)?,
                    ],
                })
            })
            .collect::<Result<_>>()?;
        Ok(QueryDecoder { layers, queries })
    }

    /// Decode with the model's own learnable queries.
    pub fn forward(&self, features: &FeatureMap) -> Result<Decoded> {
        self.decode(features, &self.queries)
    }

    /// Decode an arbitrary `(N, dim)` query set against `features`.
    pub fn decode(&self, features: &FeatureMap, queries: &Tensor) -> Result<Decoded> {
        let (b, d, h, w) = features.dims()?;
        let (_, qd) = queries.dims2()?;
        if qd != d {
            return Err(Error::Shape(format!("query dim {qd} does not match feature dim {d}")));
        }
        let memory = features.flat()?.transpose(1, 2)?.contiguous()?; // (b, hw, d)
        let pos = positional_encoding(h, w, d, memory.dtype(), memory.device())?;
        // Position goes into values as well as keys so each decoded row
        // carries the attention-weighted location it looked at.
        let keys = memory.broadcast_add(&pos)?;
        let mut tgt = queries.unsqueeze(0)?.broadcast_as((b, queries.dim(0)?, d))?.contiguous()?;
        let mut cross = None;
        for layer in &self.layers {
            let (sa, _) = layer.self_attn.forward(&tgt, &tgt, &tgt)?;
            tgt = layer.norms[0].forward(&(tgt + sa)?)?;
            let (ca, attn) = layer.cross_attn.forward(&tgt, &keys, &keys)?;
            tgt = layer.norms[1].forward(&(tgt + ca)?)?;
            let ff = layer.ffn.forward(&tgt)?;
            tgt = layer.norms[2].forward(&(tgt + ff)?)?;
            cross = Some(attn);
        }
        Ok(Decoded { f_o: tgt, cross_attention: cross.expect("at least one decoder layer") })
    }
}

/// Person classifier and box regressor applied to each instance feature.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub classifier: Linear,
    /// Two-layer perceptron; its output layer is the linear map whose bias
    /// alone sets the boxes when its weight is zero.
    pub regressor: Mlp,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(DetectionHead {
            classifier: Linear::new(store, "detect.cls", cfg.dim, 2)?,
            regressor: Mlp::new(store, "detect.box", cfg.dim, cfg.dim, 4)?,
        })
    }

    /// Returns `(class_logits (b, N, 2), boxes (b, N, 4))`. Column 0 of the
    /// logits is "person", column 1 "no person". Boxes are `cx, cy, w, h`
    /// squashed into (0, 1).
    pub fn forward(&self, f_o: &Tensor) -> Result<(Tensor, Tensor)> {
        let logits = self.classifier.forward(f_o)?;
        let boxes = candle_nn::ops::sigmoid(&self.regressor.forward(f_o)?)?;
        Ok((logits, boxes))
    }

    /// Like [`forward`](Self::forward), but box centers are offsets (in
    /// logit space) from `reference`, a `(b, N, 2)` point per query.
    pub fn forward_with_reference(&self, f_o: &Tensor, reference: &Tensor) -> Result<(Tensor, Tensor)> {
        let logits = self.classifier.forward(f_o)?;
        let raw = self.regressor.forward(f_o)?;
        let r = reference.clamp(1e-3, 1.0 - 1e-3)?;
        let r_logit = (r.log()? - (1.0 - &r)?.log()?)?;
        let center = (raw.narrow(2, 0, 2)? + r_logit)?;
        let boxes = candle_nn::ops::sigmoid(&Tensor::cat(&[center, raw.narrow(2, 2, 2)?], 2)?)?;
        Ok((logits, boxes))
    }
}

/// Attention-weighted mean cell center per query, `(b, N, 2)` as `(x, y)`.
/// `attention` is `(b, heads, N, h*w)`.
pub fn reference_points(attention: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let mut grid = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            grid.push((x as f64 + 0.5) / w as f64);
            grid.push((y as f64 + 0.5) / h as f64);
        }
    }
    let grid = Tensor::from_vec(grid, (h * w, 2), attention.device())?.to_dtype(attention.dtype())?;
    Ok(attention.mean(1)?.broadcast_matmul(&grid)?)
}

/// A perceptron that emits a `d_out x d_in` 1x1 kernel and a `d_out` bias.
/// The kernel starts near the identity on the first `d_out` inputs.
#[derive(Debug, Clone)]
pub struct KernelGenerator {
    pub hidden: Linear,
    pub out: Linear,
    pub d_in: usize,
    pub d_out: usize,
}

impl KernelGenerator {
    pub fn new(store: &mut ParamStore, name: &str, d_embed: usize, hidden: usize, d_in: usize, d_out: usize) -> Result<Self> {
        let n_out = d_out * d_in + d_out;
        let hidden_layer = Linear::new(store, &format!("{name}.0"), d_embed, hidden)?;
        let weight = store.param(&format!("{name}.1.weight"), &[n_out, hidden], Init::Uniform(0.1 / (hidden as f64).sqrt()))?;
        let mut bias = vec![0.0; n_out];
        for i in 0..d_out.min(d_in) {
            bias[i * d_in + i] = 1.0;
        }
        // Inputs past the identity block start with random weights so every
        // output channel responds to them from the first step.
        if d_in > d_out {
            for i in 0..d_out {
                let row = store.sample(d_in - d_out, Init::Uniform(1.0));
                bias[i * d_in + d_out..(i + 1) * d_in].copy_from_slice(&row);
            }
        }
        let bias = store.param_from_values(&format!("{name}.1.bias"), &[n_out], bias)?;
        Ok(KernelGenerator { hidden: hidden_layer, out: Linear { weight, bias: Some(bias) }, d_in, d_out })
    }

    /// `embed`: `(b, N, d_embed)` -> kernels `(b*N, d_out, d_in)`, bias `(b*N, d_out, 1)`.
    pub fn forward(&self, embed: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, _) = embed.dims3()?;
        let params = self.out.forward(&self.hidden.forward(embed)?.relu()?)?;
        let params = params.reshape((b * n, self.d_out * self.d_in + self.d_out))?;
        let kernel = params.narrow(1, 0, self.d_out * self.d_in)?.reshape((b * n, self.d_out, self.d_in))?;
        let bias = params.narrow(1, self.d_out * self.d_in, self.d_out)?.reshape((b * n, self.d_out, 1))?;
        Ok((kernel, bias))
    }
}

/// Apply per-instance 1x1 kernels: `relu(kernel @ input + bias)`.
///
/// `input`: `(M, d_in, hw)`, `kernel`: `(M, d_out, d_in)`, `bias`: `(M, d_out, 1)`.
pub fn apply_kernels(input: &Tensor, kernel: &Tensor, bias: &Tensor, relu: bool) -> Result<Tensor> {
    let (m, d_in, _) = input.dims3()?;
    let (mk, _, kd_in) = kernel.dims3()?;
    if m != mk || d_in != kd_in {
        return Err(Error::Shape(format!("kernel {:?} cannot be applied to input {:?}", kernel.dims(), input.dims())));
    }
    let y = kernel.matmul(input)?.broadcast_add(bias)?;
    Ok(if relu { y.relu()? } else { y })
}

/// Box-relative coordinates `(b*N, 2, h*w)` for each instance. Box sizes are
/// floored at 0.1 so offsets stay bounded.
pub fn relative_coords(boxes: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, _) = boxes.dims3()?;
    let boxes = boxes.detach().reshape((b * n, 4, 1))?;
    let dev = boxes.device();
    let mut gx = Vec::with_capacity(h * w);
    let mut gy = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            gx.push((x as f64 + 0.5) / w as f64);
            gy.push((y as f64 + 0.5) / h as f64);
        }
    }
    let gx = Tensor::from_vec(gx, (1, 1, h * w), dev)?.to_dtype(boxes.dtype())?;
    let gy = Tensor::from_vec(gy, (1, 1, h * w), dev)?.to_dtype(boxes.dtype())?;
    let cx = boxes.narrow(1, 0, 1)?;
    let cy = boxes.narrow(1, 1, 1)?;
    let bw = boxes.narrow(1, 2, 1)?.clamp(0.1, 1.0)?;
    let bh = boxes.narrow(1, 3, 1)?.clamp(0.1, 1.0)?;
    let u = gx.broadcast_sub(&cx)?.broadcast_div(&bw)?;
    let v = gy.broadcast_sub(&cy)?.broadcast_div(&bh)?;
    Ok(Tensor::cat(&[u, v], 1)?)
}

/// The instance-level half of the network: backbone, decoder, detection and
/// the instance kernel generator.
#[derive(Debug, Clone)]
pub struct ParserCore {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub decoder: QueryDecoder,
    pub detect: DetectionHead,
    pub instance_kernels: KernelGenerator,
}

impl ParserCore {
    pub fn new(store: &mut ParamStore, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        Ok(ParserCore {
            config: config.clone(),
            backbone: Backbone::new(store, config)?,
            decoder: QueryDecoder::new(store, config)?,
            detect: DetectionHead::new(store, config)?,
            instance_kernels: KernelGenerator::new(store, "inst_kernel", d, config.kernel_hidden, d + LOCATION_CHANNELS, d)?,
        })
    }

    /// Instance-aware features `(b*N, dim, h*w)` from `F (b, d, h, w)`.
    /// `attention` is the last decoder layer's `(b, heads, N, h*w)` map.
    pub fn instance_features(&self, features: &FeatureMap, f_o: &Tensor, boxes: &Tensor, attention: &Tensor) -> Result<Tensor> {
        let (b, d, h, w) = features.dims()?;
        let (fb, n, fd) = f_o.dims3()?;
        if fb != b || fd != d {
            return Err(Error::Shape(format!("instance features {:?} do not match feature map {:?}", f_o.dims(), features.values.dims())));
        }
        let (kernel, bias) = self.instance_kernels.forward(f_o)?;
        let flat = features.flat()?.unsqueeze(1)?.broadcast_as((b, n, d, h * w))?.reshape((b * n, d, h * w))?;
        let attn = (attention.mean(1)? * (h * w) as f64)?.reshape((b * n, 1, h * w))?;
        let uv = relative_coords(boxes, h, w)?;
        let prior = (uv.sqr()?.sum_keepdim(1)? * -4.0)?.exp()?;
        let input = Tensor::cat(&[flat, uv, prior, attn], 1)?;
        apply_kernels(&input, &kernel, &bias, true)
    }
}

/// Flatten a `(b, N, ...)` tensor to `(b*N, ...)`.
pub fn merge_batch(t: &Tensor) -> Result<Tensor> {
    let dims = t.dims();
    let mut shape = vec![dims[0] * dims[1]];
    shape.extend_from_slice(&dims[2..]);
    Ok(t.reshape(shape)?)
}

/// Softmax over the class axis of `(M, C+1, hw)` logits.
pub fn class_softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, 1)?)
}

/// Sum over the last axis; convenience for tests and probes.
pub fn sum_last(t: &Tensor) -> Result<Tensor> {
    Ok(t.sum(D::Minus1)?)
}
