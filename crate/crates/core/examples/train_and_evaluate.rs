//! Train one arm of the desk preset and score it on the natural test split.
//!
//!     cargo run --release --example train_and_evaluate -- [arm] [epochs]
//!
//! `arm` is one of baseline, cfs, cfs_content, cfs_context, cfs+cil.

use std::path::PathBuf;

use hparse::harness::evaluate::{evaluate_scenes, MaskSource};
use hparse::harness::train::train;
use hparse::harness::ProtocolConfig;
use hparse::model::{ArmConfig, Branches};
use hparse::synth::make_dataset;

fn main() -> hparse::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let arm = match args.next().as_deref().unwrap_or("cfs+cil") {
        "baseline" => ArmConfig::baseline(),
        "cfs" => ArmConfig::cfs_only(Branches::Both),
        "cfs_content" => ArmConfig::cfs_only(Branches::Content),
        "cfs_context" => ArmConfig::cfs_only(Branches::Context),
        _ => ArmConfig::full(),
    };
    let protocol = ProtocolConfig::desk();
    let mut cfg = protocol.base.clone();
    cfg.arm = arm;
    if let Some(e) = args.next() {
        cfg.train.epochs = e.parse().expect("epochs must be an integer");
    }

    let out = PathBuf::from("target/example-runs/train_and_evaluate");
    let manifest = make_dataset(&protocol.dataset, &out.join("data"), true)?;
    let train_scenes = manifest.load_split(&protocol.train_split)?;
    let test_scenes = manifest.load_split(&protocol.test_split)?;

    let (model, record) = train(&cfg, &train_scenes, &out.join(arm.label()))?;
    println!("{} trained in {:.1}s", record.arm, record.wall_seconds);
    let report = evaluate_scenes(&model, &test_scenes, &cfg.eval, MaskSource::Fused)?;
    println!("{}", report.table());
    Ok(())
}
