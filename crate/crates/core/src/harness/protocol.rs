//! Ablation, generalization and robustness protocols over cached runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{hex_digest, read_text, ExperimentConfig, ProtocolConfig};
use super::evaluate::{evaluate_scenes, load_model, MaskSource};
use super::probes::{probe, ProbeReport};
use super::train::{train, RunRecord, CHECKPOINT_FILE, RECORD_FILE};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{ArmConfig, Branches, ParsingModel};
use crate::synth::{apply_intervention, make_dataset, InterventionKind, InterventionSpec, LabeledScene, Manifest, MANIFEST_FILE};

pub const DATASET_STAMP: &str = "dataset.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Ablation,
    Generalization,
    Robustness,
}

impl ProtocolKind {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Ablation => "ablation",
            ProtocolKind::Generalization => "generalization",
            ProtocolKind::Robustness => "robustness",
        }
    }
}

impl std::str::FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablation" => Ok(ProtocolKind::Ablation),
            "generalization" => Ok(ProtocolKind::Generalization),
            "robustness" => Ok(ProtocolKind::Robustness),
            _ => Err(Error::InvalidArgument(format!("unknown protocol `{s}`"))),
        }
    }
}

/// Pin tensor kernels to one thread. Reductions then run in a fixed order.
pub fn enter_strict_mode() {
    std::env::set_var("RAYON_NUM_THREADS", "1");
}

/// The five ablation arms, in table order.
pub fn ablation_arms() -> Vec<ArmConfig> {
    vec![
        ArmConfig::baseline(),
        ArmConfig::cfs_only(Branches::Both),
        ArmConfig::cfs_only(Branches::Content),
        ArmConfig::cfs_only(Branches::Context),
        ArmConfig::full(),
    ]
}

/// One cell of a protocol table: a metric for one arm on one evaluation
/// set, with the per-seed values it averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub arm: String,
    pub set: String,
    pub metric: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

impl Cell {
    fn new(arm: &str, set: &str, metric: &str, per_seed: Vec<f64>) -> Self {
        let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
        Cell { arm: arm.into(), set: set.into(), metric: metric.into(), per_seed, mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTable {
    pub kind: ProtocolKind,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
    /// Probe results per arm and seed, where the protocol collects them.
    pub probes: Vec<(String, u64, ProbeReport)>,
    /// `(arm, seed, set, report)` for every evaluation behind the cells.
    pub reports: Vec<(String, u64, String, MetricsReport)>,
}

impl ProtocolTable {
    pub fn cell(&self, arm: &str, set: &str, metric: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.arm == arm && c.set == set && c.metric == metric)
    }

    pub fn mean(&self, arm: &str, set: &str, metric: &str) -> Result<f64> {
        self.cell(arm, set, metric).map(|c| c.mean).ok_or_else(|| Error::InvalidArgument(format!("no cell {arm}/{set}/{metric}")))
    }

    /// Markdown with one row per (arm, set) and one column per metric.
    pub fn markdown(&self) -> String {
        let mut metrics: Vec<&str> = Vec::new();
        let mut rows: Vec<(&str, &str)> = Vec::new();
        for c in &self.cells {
            if !metrics.contains(&c.metric.as_str()) {
                metrics.push(&c.metric);
            }
            if !rows.contains(&(c.arm.as_str(), c.set.as_str())) {
                rows.push((&c.arm, &c.set));
            }
        }
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let mut s = format!("## {} (seeds {})\n\n| arm | set |", self.kind.name(), seeds.join(", "));
        for m in &metrics {
            s.push_str(&format!(" {m} |"));
        }
        s.push_str("\n|---|---|");
        s.push_str(&"---:|".repeat(metrics.len()));
        s.push('\n');
        for (arm, set) in rows {
            s.push_str(&format!("| {arm} | {set} |"));
            for m in &metrics {
                match self.cell(arm, set, m) {
                    Some(c) => s.push_str(&format!(" {:.2} |", 100.0 * c.mean)),
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        if !self.probes.is_empty() {
            s.push_str("\n| arm | seed | content invariance | content/context cosine | affinity contrast | mIoU fused | mIoU content | mIoU context |\n");
            s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            for (arm, seed, p) in &self.probes {
                s.push_str(&format!(
                    "| {arm} | {seed} | {} | {} | {} | {:.4} | {} | {} |\n",
                    opt(p.content_invariance),
                    opt(p.content_context_cosine),
                    opt(p.affinity_contrast),
                    p.miou_fused,
                    opt(p.miou_content),
                    opt(p.miou_context)
                ));
            }
        }
        s
    }

    /// Write `<kind>.md` and `<kind>.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{}.md", self.kind.name())), self.markdown())?;
        fs::write(dir.join(format!("{}.json", self.kind.name())), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Owns the output directory: the generated dataset, the run cache and
/// the tables.
pub struct ProtocolRunner {
    pub config: ProtocolConfig,
    pub out: PathBuf,
    pub manifest: Manifest,
}

impl ProtocolRunner {
    /// Generate the dataset under `out/data` unless an identical one is
    /// already there.
    pub fn new(config: ProtocolConfig, out: &Path) -> Result<Self> {
        config.validate()?;
        if config.strict {
            enter_strict_mode();
        }
        let data = out.join("data");
        let stamp = toml::to_string(&config.dataset).map_err(|e| Error::Config(e.to_string()))?;
        let stamp_path = data.join(DATASET_STAMP);
        let fresh = read_text(&stamp_path).ok().as_deref() == Some(stamp.as_str()) && data.join(MANIFEST_FILE).exists();
        let manifest = if fresh {
            Manifest::load(&data.join(MANIFEST_FILE))?
        } else {
            let m = make_dataset(&config.dataset, &data, true)?;
            fs::write(&stamp_path, &stamp)?;
            m
        };
        Ok(ProtocolRunner { config, out: out.to_path_buf(), manifest })
    }

    pub fn experiment(&self, arm: ArmConfig, seed: u64) -> ExperimentConfig {
        let mut cfg = self.config.base.clone();
        cfg.name = format!("{}-s{seed}", arm.label());
        cfg.arm = arm;
        cfg.seed = seed;
        cfg.data.manifest = self.out.join("data").join(MANIFEST_FILE);
        cfg.data.train_split = self.config.train_split.clone();
        cfg.data.test_split = self.config.test_split.clone();
        cfg
    }

    /// Cache directory of one run. The key covers the training config and
    /// everything that shapes the training split, so other splits can
    /// change without invalidating trained models.
    pub fn run_dir(&self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let d = &self.config.dataset;
        let at = d.splits.iter().position(|s| s.name == cfg.data.train_split);
        let train = at.map(|i| &d.splits[i]);
        // scene seeds are numbered across splits, so earlier splits shift them
        let offset: usize = d.splits[..at.unwrap_or(0)].iter().map(|s| s.size).sum();
        let key = serde_json::json!({
            "run": cfg.fingerprint()?,
            "scene": d.scene,
            "seed_base": d.seed_base,
            "max_persons": d.max_persons,
            "train": train,
            "train_offset": offset,
        });
        let digest = hex_digest(serde_json::to_string(&key)?.as_bytes());
        Ok(self.out.join("runs").join(format!("{}-s{}-{digest}", cfg.arm.label(), cfg.seed)))
    }

    /// Train `arm` with `seed`, or reload it from the run cache.
    pub fn trained(&self, arm: ArmConfig, seed: u64) -> Result<(ParsingModel, RunRecord)> {
        let cfg = self.experiment(arm, seed);
        let dir = self.run_dir(&cfg)?;
        let (ckpt, record) = (dir.join(CHECKPOINT_FILE), dir.join(RECORD_FILE));
        if ckpt.exists() && record.exists() {
            let (model, _) = load_model(&ckpt)?;
            log::info!("reusing {}", dir.display());
            return Ok((model, RunRecord::load(&record)?));
        }
        let scenes = self.manifest.load_split(&self.config.train_split)?;
        train(&cfg, &scenes, &dir)
    }

    fn split(&self, name: &str) -> Result<Vec<LabeledScene>> {
        self.manifest.load_split(name)
    }

    pub fn run(&self, kind: ProtocolKind) -> Result<ProtocolTable> {
        let table = match kind {
            ProtocolKind::Ablation => self.ablation()?,
            ProtocolKind::Generalization => self.generalization()?,
            ProtocolKind::Robustness => self.robustness()?,
        };
        table.write(&self.out.join("tables"))?;
        Ok(table)
    }

    fn table(&self, kind: ProtocolKind) -> ProtocolTable {
        ProtocolTable { kind, seeds: self.config.seeds.clone(), cells: Vec::new(), probes: Vec::new(), reports: Vec::new() }
    }

    /// Evaluate `arms` on named scene sets for every seed and tabulate
    /// `metrics` from each report.
    fn tabulate(
        &self,
        table: &mut ProtocolTable,
        arms: &[ArmConfig],
        sets: &[(String, Vec<LabeledScene>)],
        metrics: &[(&str, fn(&MetricsReport) -> f64)],
    ) -> Result<()> {
        for arm in arms {
            let label = arm.label();
            let mut values = vec![vec![Vec::new(); metrics.len()]; sets.len()];
            for &seed in &self.config.seeds {
                let (model, _) = self.trained(*arm, seed)?;
                for (si, (set, scenes)) in sets.iter().enumerate() {
                    let report = evaluate_scenes(&model, scenes, &self.config.base.eval, MaskSource::Fused)?;
                    for (mi, (_, f)) in metrics.iter().enumerate() {
                        values[si][mi].push(f(&report));
                    }
                    table.reports.push((label.clone(), seed, set.clone(), report));
                }
            }
            for (si, (set, _)) in sets.iter().enumerate() {
                for (mi, (name, _)) in metrics.iter().enumerate() {
                    table.cells.push(Cell::new(&label, set, name, std::mem::take(&mut values[si][mi])));
                }
            }
        }
        Ok(())
    }

    pub fn ablation(&self) -> Result<ProtocolTable> {
        let mut table = self.table(ProtocolKind::Ablation);
        let test = vec![(self.config.test_split.clone(), self.split(&self.config.test_split)?)];
        self.tabulate(
            &mut table,
            &ablation_arms(),
            &test,
            &[("ap_vol", |r| r.ap_p_vol), ("ap50", |r| ap_at(r, 0.5)), ("miou", |r| r.miou), ("pcp50", |r| r.pcp50)],
        )?;
        Ok(table)
    }

    pub fn generalization(&self) -> Result<ProtocolTable> {
        let mut table = self.table(ProtocolKind::Generalization);
        let sets = [&self.config.test_split, &self.config.cartoon_split, &self.config.sketch_split]
            .into_iter()
            .map(|name| Ok((name.clone(), self.split(name)?)))
            .collect::<Result<Vec<_>>>()?;
        let arms = [ArmConfig::cfs_only(Branches::Both), ArmConfig::full()];
        self.tabulate(&mut table, &arms, &sets, &[("miou", |r| r.miou), ("ap_vol", |r| r.ap_p_vol)])?;
        let probe_scenes: Vec<_> = sets[0].1.iter().take(self.config.probe_scenes).cloned().collect();
        for arm in arms {
            for &seed in &self.config.seeds {
                let (model, _) = self.trained(arm, seed)?;
                let cfg = self.experiment(arm, seed);
                table.probes.push((arm.label(), seed, probe(&model, &cfg, &probe_scenes, seed)?));
            }
        }
        Ok(table)
    }

    /// Intervened copies of the test split, one set per kind and seed.
    pub fn intervened_sets(&self, kind: InterventionKind) -> Result<Vec<Vec<LabeledScene>>> {
        let test = self.split(&self.config.test_split)?;
        self.config
            .intervention_seeds
            .iter()
            .map(|&seed| {
                test.iter()
                    .enumerate()
                    .map(|(i, s)| {
                        apply_intervention(s, &InterventionSpec::on_limbs(kind, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn robustness(&self) -> Result<ProtocolTable> {
        let mut table = self.table(ProtocolKind::Robustness);
        let arms = [ArmConfig::cfs_only(Branches::Both), ArmConfig::full()];
        let kinds: Vec<(InterventionKind, Vec<Vec<LabeledScene>>)> =
            InterventionKind::ALL.into_iter().map(|k| Ok((k, self.intervened_sets(k)?))).collect::<Result<_>>()?;
        for arm in arms {
            let label = arm.label();
            let mut per_kind = vec![Vec::new(); kinds.len()];
            for &seed in &self.config.seeds {
                let (model, _) = self.trained(arm, seed)?;
                for (ki, (kind, sets)) in kinds.iter().enumerate() {
                    let mut sum = 0.0;
                    for (iseed, scenes) in self.config.intervention_seeds.iter().zip(sets) {
                        let report = evaluate_scenes(&model, scenes, &self.config.base.eval, MaskSource::Fused)?;
                        sum += report.miou;
                        table.reports.push((label.clone(), seed, format!("{}#{iseed}", kind.name()), report));
                    }
                    per_kind[ki].push(sum / sets.len() as f64);
                }
            }
            for (ki, (kind, _)) in kinds.iter().enumerate() {
                table.cells.push(Cell::new(&label, kind.name(), "miou", std::mem::take(&mut per_kind[ki])));
            }
        }
        Ok(table)
    }
}

fn ap_at(r: &MetricsReport, t: f64) -> f64 {
    r.ap_p.iter().find(|(x, _)| (x - t).abs() < 1e-9).map_or(0.0, |(_, ap)| *ap)
}
