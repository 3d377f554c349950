//! One forward pass of an untrained full model: part affinities, the
//! content and context representations, and their masks.
//!
//!     cargo run --release --example causal_factor_separation

use candle_core::{DType, D};
use hparse::harness::ProtocolConfig;
use hparse::model::{ArmConfig, ParsingModel};
use hparse::synth::{generate_scene, StyleId};

fn main() -> hparse::Result<()> {
    let p = ProtocolConfig::desk();
    let model = ParsingModel::new(&p.base.model, &ArmConfig::full(), 0, DType::F32)?;
    println!("{} parameters", model.store.num_params());
    let scenes: Vec<_> = (0..2).map(|s| generate_scene(&p.dataset.scene, 2, StyleId::Natural, s)).collect::<hparse::Result<_>>()?;
    let out = model.forward_images(&scenes.iter().map(|s| &s.image).collect::<Vec<_>>())?;

    let affinity = out.affinity.as_ref().expect("full arm");
    let (content, context) = (out.content.as_ref().unwrap(), out.context.as_ref().unwrap());
    println!("affinity      {:?}", affinity.dims());
    println!("content rep   {:?}", content.dims());
    println!("context rep   {:?}", context.dims());
    println!("fused logits  {:?}", out.mask_logits.dims());
    let lo = affinity.flatten_all()?.min(0)?.to_scalar::<f32>()?;
    let hi = affinity.flatten_all()?.max(0)?.to_scalar::<f32>()?;
    println!("affinity range ({lo:.4}, {hi:.4})");

    // Cosine between the two representations, per query, averaged.
    let dot = (content * context)?.sum(D::Minus1)?.sum(D::Minus1)?;
    let norm = |t: &candle_core::Tensor| t.sqr()?.sum(D::Minus1)?.sum(D::Minus1)?.sqrt();
    let cos = (dot / (norm(content)? * norm(context)?)?)?.mean_all()?.to_scalar::<f32>()?;
    println!("mean content/context cosine {cos:.4}");
    Ok(())
}
