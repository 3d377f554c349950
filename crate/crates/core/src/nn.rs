//! Parameter storage and the handful of layers the parser needs.
//!
//! Parameters are drawn from one seeded ChaCha stream in creation order, so a
//! model built twice from the same seed is bit-identical.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "hparse-ckpt-v1";
const METADATA_KEY: &str = "__hparse__";

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(-b, b) with b = 1/sqrt(fan_in).
    FanIn(usize),
    Uniform(f64),
    Const(f64),
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore { vars: BTreeMap::new(), dtype, device: Device::Cpu, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Create a parameter. Names must be unique.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let values = self.sample(shape.iter().product(), init);
        self.param_from_values(name, shape, values)
    }

    /// Draw `n` initial values from the store's generator.
    pub fn sample(&mut self, n: usize, init: Init) -> Vec<f64> {
        match init {
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-b..=b)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Const(c) => vec![c; n],
        }
    }

    pub fn param_from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Safetensors file with every parameter plus string metadata.
    pub fn save(&self, path: &Path, metadata: &HashMap<String, String>) -> Result<()> {
        let tensors: Vec<(String, Tensor)> =
            self.vars.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().to_dtype(DType::F32)?))).collect::<Result<_>>()?;
        // Safetensors writes its metadata map in hash order, so everything
        // goes under one key as sorted JSON to keep files byte-stable.
        let mut sorted: BTreeMap<&str, &str> = metadata.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        sorted.insert("format", CHECKPOINT_FORMAT);
        let meta = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&sorted)?)]);
        let views: Vec<(String, TensorView)> = tensors.iter().map(|(k, t)| Ok((k.clone(), TensorView::new(t)?))).collect::<Result<_>>()?;
        safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        Ok(())
    }

    /// Overwrite every parameter from a checkpoint; returns its metadata.
    pub fn load(&mut self, path: &Path) -> Result<HashMap<String, String>> {
        let (tensors, meta) = read_checkpoint(path)?;
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::format("checkpoint", "missing or unknown format tag"));
        }
        for (name, var) in &self.vars {
            let t = tensors.get(name).ok_or_else(|| Error::format("checkpoint", format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!("checkpoint tensor `{name}` has shape {:?}, model expects {:?}", t.dims(), var.dims())));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(meta)
    }
}

/// Read tensors and metadata of a checkpoint written by [`ParamStore::save`].
pub fn read_checkpoint(path: &Path) -> Result<(HashMap<String, Tensor>, HashMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let meta = match header.metadata().as_ref().and_then(|m| m.get(METADATA_KEY)) {
        Some(json) => serde_json::from_str(json)?,
        None => HashMap::new(),
    };
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != safetensors::Dtype::F32 {
            return Err(Error::format("checkpoint", "tensors must be f32"));
        }
        let values: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.insert(name, Tensor::from_vec(values, view.shape(), &Device::Cpu)?);
    }
    Ok((tensors, meta))
}

struct TensorView {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl TensorView {
    fn new(t: &Tensor) -> Result<Self> {
        let values = t.flatten_all()?.to_vec1::<f32>()?;
        Ok(TensorView { shape: t.dims().to_vec(), bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect() })
    }
}

impl safetensors::View for TensorView {
    fn dtype(&self) -> safetensors::Dtype {
        safetensors::Dtype::F32
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> std::borrow::Cow<'_, [u8]> {
        std::borrow::Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: store.param(&format!("{name}.weight"), &[d_out, d_in], Init::FanIn(d_in))?,
            bias: Some(store.param(&format!("{name}.bias"), &[d_out], Init::FanIn(d_in))?),
        })
    }

    /// Applies to the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        Ok(Conv2d {
            weight: store.param(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], Init::FanIn(fan_in))?,
            bias: store.param(&format!("{name}.bias"), &[c_out], Init::FanIn(fan_in))?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.param(&format!("{name}.gamma"), &[dim], Init::Const(1.0))?,
            beta: store.param(&format!("{name}.beta"), &[dim], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::new(store, &format!("{name}.0"), d_in, d_hidden)?,
            out: Linear::new(store, &format!("{name}.1"), d_hidden, d_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.relu()?)
    }
}

/// Standard multi-head attention over `(batch, len, dim)` inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    /// Returns the output and the attention weights `(batch, heads, len_q, len_k)`.
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, lq, dim) = query.dims3()?;
        let lk = key.dim(1)?;
        let dh = dim / self.heads;
        let split = |t: Tensor, len: usize| -> Result<Tensor> { Ok(t.reshape((b, len, self.heads, dh))?.transpose(1, 2)?.contiguous()?) };
        let q = split(self.q.forward(query)?, lq)?;
        let k = split(self.k.forward(key)?, lk)?;
        let v = split(self.v.forward(value)?, lk)?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, dim))?;
        Ok((self.o.forward(&ctx)?, attn))
    }
}
