//! Train a short full-arm model, probe its factors, and write heatmaps plus
//! a loss-curve report.
//!
//!     cargo run --release --example probe_and_visualize -- [epochs]

use std::path::PathBuf;

use hparse::harness::probes::probe;
use hparse::harness::report::{dump_visualizations, write_report};
use hparse::harness::train::train;
use hparse::harness::ProtocolConfig;
use hparse::synth::make_dataset;

fn main() -> hparse::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let protocol = ProtocolConfig::desk();
    let mut cfg = protocol.base.clone();
    cfg.train.epochs = std::env::args().nth(1).map_or(5, |e| e.parse().expect("epochs must be an integer"));

    let out = PathBuf::from("target/example-runs/probe_and_visualize");
    let manifest = make_dataset(&protocol.dataset, &out.join("data"), true)?;
    let train_scenes = manifest.load_split(&protocol.train_split)?;
    let test_scenes = manifest.load_split(&protocol.test_split)?;
    let (model, _) = train(&cfg, &train_scenes, &out.join("runs").join(cfg.arm.label()))?;

    let p = probe(&model, &cfg, &test_scenes[..test_scenes.len().min(16)], 7)?;
    println!("content invariance      {:?}", p.content_invariance);
    println!("content/context cosine  {:?}", p.content_context_cosine);
    println!("affinity contrast       {:?}", p.affinity_contrast);
    println!("mIoU fused / content / context  {:.3} / {:?} / {:?}", p.miou_fused, p.miou_content, p.miou_context);

    let pngs = dump_visualizations(&model, &test_scenes[..4], &cfg.eval, &out.join("vis"))?;
    println!("{} heatmap sheets under {}", pngs.len(), out.join("vis").display());
    write_report(&out.join("runs"), &out.join("report"))?;
    println!("report at {}", out.join("report/report.md").display());
    Ok(())
}
