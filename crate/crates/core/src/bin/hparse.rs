use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hparse::harness::evaluate::{evaluate_checkpoint, load_model};
use hparse::harness::report::{dump_visualizations, write_report};
use hparse::harness::train::run_experiment;
use hparse::harness::{ExperimentConfig, ProtocolConfig, ProtocolKind, ProtocolRunner};
use hparse::synth::{make_dataset, DatasetConfig, Manifest};
use hparse::{Error, Result};

/// Scenes kept for `--dump-vis`.
const VIS_SCENES: usize = 8;

#[derive(Parser)]
#[command(name = "hparse", version, about = "Multiple human parsing on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write affinity and representation heatmaps to this directory.
    #[arg(long, global = true)]
    dump_vis: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset and its manifest.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        /// Replace an existing manifest.
        #[arg(long)]
        force: bool,
    },
    /// Train one model and evaluate it on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Split to score; defaults to the checkpoint's test split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Run a comparison protocol over every seed of the config.
    Protocol {
        kind: ProtocolKind,
        #[arg(long)]
        config: PathBuf,
    },
    /// Render loss curves and tables for a directory of runs.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { config, force } => {
            let mut cfg = DatasetConfig::from_toml(&std::fs::read_to_string(&config)?)?;
            if let Some(seed) = cli.seed {
                cfg.seed_base = seed;
            }
            let out = cli.out.unwrap_or_else(|| PathBuf::from("data"));
            let manifest = make_dataset(&cfg, &out, force)?;
            println!("wrote {} scenes to {}", manifest.records.len(), out.display());
        }
        Command::Train { config } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let out = cli.out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-s{}", cfg.name, cfg.seed)));
            let (model, record) = run_experiment(&cfg, &config_dir(&config), &out)?;
            if let Some(m) = &record.metrics {
                println!("{}", m.table());
            }
            if let Some(dir) = cli.dump_vis {
                let manifest = Manifest::load(&config_dir(&config).join(&cfg.data.manifest))?;
                let scenes = manifest.load_split(&cfg.data.test_split)?;
                dump_visualizations(&model, &scenes[..scenes.len().min(VIS_SCENES)], &cfg.eval, &dir)?;
            }
            println!("run written to {}", out.display());
        }
        Command::Eval { ckpt, manifest, split } => {
            let report = evaluate_checkpoint(&ckpt, &manifest, split.as_deref())?;
            println!("{}", report.table());
            if let Some(out) = cli.out {
                std::fs::create_dir_all(&out)?;
                std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
            }
            if let Some(dir) = cli.dump_vis {
                let (model, cfg) = load_model(&ckpt)?;
                let m = Manifest::load(&manifest)?;
                let name = split.unwrap_or(cfg.data.test_split.clone());
                let mut scenes = m.load_split(&name)?;
                if scenes.is_empty() {
                    scenes = m.load_all()?;
                }
                scenes.truncate(VIS_SCENES);
                dump_visualizations(&model, &scenes, &cfg.eval, &dir)?;
            }
        }
        Command::Protocol { kind, config } => {
            let mut cfg = ProtocolConfig::load(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seeds = vec![seed];
            }
            let out = cli.out.unwrap_or_else(|| PathBuf::from("protocol"));
            let runner = ProtocolRunner::new(cfg, &out)?;
            let table = runner.run(kind)?;
            println!("{}", table.markdown());
            if let Some(dir) = cli.dump_vis {
                let scenes = runner.manifest.load_split(&runner.config.test_split)?;
                let scenes = &scenes[..scenes.len().min(VIS_SCENES)];
                let arms: Vec<String> = table.cells.iter().map(|c| c.arm.clone()).collect();
                for arm in hparse::harness::protocol::ablation_arms() {
                    if !arms.contains(&arm.label()) {
                        continue;
                    }
                    let seed = runner.config.seeds[0];
                    let (model, _) = runner.trained(arm, seed)?;
                    dump_visualizations(&model, scenes, &runner.config.base.eval, &dir.join(format!("{}-s{seed}", arm.label())))?;
                }
            }
        }
        Command::Report { runs } => {
            if cli.dump_vis.is_some() {
                return Err(Error::InvalidArgument("--dump-vis applies to train, eval and protocol".into()));
            }
            let out = cli.out.unwrap_or_else(|| runs.join("report"));
            let md = write_report(&runs, &out)?;
            println!("{md}");
            println!("report written to {}", out.display());
        }
    }
    Ok(())
}
