//! Run one comparison protocol on the desk preset and print its table.
//!
//! cargo run --release --example protocol -- [ablation|generalization|robustness] [out_dir] [seeds]

use std::path::PathBuf;

use hparse::harness::{ProtocolConfig, ProtocolKind, ProtocolRunner};

fn main() -> hparse::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let kind: ProtocolKind = args.next().as_deref().unwrap_or("ablation").parse()?;
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| "target/example-runs/protocol".into());
    let mut config = ProtocolConfig::desk();
    if let Some(n) = args.next() {
        let n: u64 = n.parse().map_err(|_| hparse::Error::InvalidArgument("seeds must be a number".into()))?;
        config.seeds = (0..n).collect();
    }
    let runner = ProtocolRunner::new(config, &out)?;
    let table = runner.run(kind)?;
    println!("{}", table.markdown());
    Ok(())
}
