//! On-disk datasets: PNG images, JSON label sidecars and a JSON-lines manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    generate_scene, mix_seed, persons_for_seed, rle_decode, rle_encode, Image, Instance, LabeledScene, Mask, PartClass, SceneConfig,
    StyleId, MAX_PERSONS, NUM_PARTS,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const LABEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub size: usize,
    /// Styles assigned round-robin over the split.
    pub styles: Vec<StyleId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub seed_base: u64,
    #[serde(default = "default_max_persons")]
    pub max_persons: usize,
    pub splits: Vec<SplitSpec>,
}

fn default_max_persons() -> usize {
    MAX_PERSONS
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.splits.is_empty() {
            return Err(Error::Config("dataset needs at least one split".into()));
        }
        if !(1..=MAX_PERSONS).contains(&self.max_persons) {
            return Err(Error::Config(format!("max_persons must be in 1..={MAX_PERSONS}")));
        }
        for s in &self.splits {
            if s.size == 0 || s.styles.is_empty() {
                return Err(Error::Config(format!("split `{}` is empty", s.name)));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub split: String,
    pub index: usize,
    pub image: String,
    pub labels: String,
    pub style: StyleId,
    pub seed: u64,
    pub num_persons: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => e.into(),
        })?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestRecord>, _>>()?;
        Ok(Manifest { root: path.parent().map(Path::to_path_buf).unwrap_or_default(), records })
    }

    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ManifestRecord> + 'a {
        self.records.iter().filter(move |r| r.split == name)
    }

    pub fn load_split(&self, name: &str) -> Result<Vec<LabeledScene>> {
        self.split(name).map(|r| load_scene(&self.root, r)).collect()
    }

    pub fn load_all(&self) -> Result<Vec<LabeledScene>> {
        self.records.iter().map(|r| load_scene(&self.root, r)).collect()
    }

    fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPart {
    pub class: PartClass,
    pub rle: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelInstance {
    pub bbox: [f64; 4],
    pub part_presence: [bool; NUM_PARTS],
    pub palette_seed: u64,
    pub parts: Vec<LabelPart>,
}

/// Sidecar label document stored next to each scene image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFile {
    pub format_version: u32,
    pub size: usize,
    pub style: StyleId,
    pub scene_seed: u64,
    pub instances: Vec<LabelInstance>,
}

impl LabelFile {
    pub fn from_scene(scene: &LabeledScene) -> Self {
        LabelFile {
            format_version: LABEL_FORMAT_VERSION,
            size: scene.size(),
            style: scene.style,
            scene_seed: scene.scene_seed,
            instances: scene
                .instances
                .iter()
                .map(|inst| LabelInstance {
                    bbox: inst.bbox,
                    part_presence: inst.part_presence,
                    palette_seed: inst.palette_seed,
                    parts: PartClass::ALL
                        .into_iter()
                        .map(|p| LabelPart { class: p, rle: rle_encode(&inst.part_masks[p.index()]) })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn into_instances(self) -> Result<Vec<Instance>> {
        if self.format_version != LABEL_FORMAT_VERSION {
            return Err(Error::format("label file", format!("unsupported format_version {}", self.format_version)));
        }
        self.instances
            .into_iter()
            .map(|li| {
                let mut masks: [Mask; NUM_PARTS] = std::array::from_fn(|_| Mask::empty(self.size));
                for part in li.parts {
                    masks[part.class.index()] = rle_decode(&part.rle, self.size)?;
                }
                let inst = Instance::from_masks(masks, li.palette_seed);
                if inst.part_presence != li.part_presence {
                    return Err(Error::format("label file", "part_presence disagrees with masks"));
                }
                Ok(inst)
            })
            .collect()
    }
}

pub fn read_label_file(path: &Path) -> Result<LabelFile> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Write `<stem>.png` and `<stem>.json` into `dir`.
pub fn write_scene(scene: &LabeledScene, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    scene.image.to_rgb8().save(dir.join(format!("{stem}.png")))?;
    let labels = serde_json::to_string(&LabelFile::from_scene(scene))?;
    fs::write(dir.join(format!("{stem}.json")), labels)?;
    Ok(())
}

pub fn load_scene(root: &Path, record: &ManifestRecord) -> Result<LabeledScene> {
    let img_path = root.join(&record.image);
    if !img_path.exists() {
        return Err(Error::NotFound(img_path));
    }
    let image = Image::from_rgb8(&image::open(&img_path)?.to_rgb8())?;
    let labels = read_label_file(&root.join(&record.labels))?;
    if labels.size != image.size {
        return Err(Error::format("label file", "size disagrees with image"));
    }
    let style = labels.style;
    let scene_seed = labels.scene_seed;
    Ok(LabeledScene { image, instances: labels.into_instances()?, style, scene_seed })
}

/// Render every split and write the manifest. Seeds never repeat across
/// splits because each scene takes the next index of one global counter.
pub fn make_dataset(config: &DatasetConfig, out_dir: &Path, force: bool) -> Result<Manifest> {
    config.validate()?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(Error::AlreadyExists(manifest_path));
    }
    fs::create_dir_all(out_dir)?;
    let mut records = Vec::new();
    let mut global = 0u64;
    for split in &config.splits {
        for index in 0..split.size {
            let seed = mix_seed(config.seed_base, global);
            global += 1;
            let style = split.styles[index % split.styles.len()];
            let num_persons = persons_for_seed(seed, config.max_persons);
            let scene = generate_scene(&config.scene, num_persons, style, seed)?;
            let stem = format!("{index:06}");
            write_scene(&scene, &out_dir.join(&split.name), &stem)?;
            records.push(ManifestRecord {
                split: split.name.clone(),
                index,
                image: format!("{}/{stem}.png", split.name),
                labels: format!("{}/{stem}.json", split.name),
                style,
                seed,
                num_persons,
            });
        }
    }
    let manifest = Manifest { root: out_dir.to_path_buf(), records };
    let mut f = fs::File::create(&manifest_path)?;
    f.write_all(manifest.to_jsonl()?.as_bytes())?;
    fs::write(out_dir.join("dataset.toml"), toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(train: usize, test: usize) -> DatasetConfig {
        DatasetConfig {
            scene: SceneConfig { image_size: 32, ..Default::default() },
            seed_base: 5,
            max_persons: 4,
            splits: vec![
                SplitSpec { name: "train".into(), size: train, styles: vec![StyleId::Natural] },
                SplitSpec { name: "test".into(), size: test, styles: vec![StyleId::Sketch] },
            ],
        }
    }

    #[test]
    fn manifest_counts_and_disjoint_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(&config(200, 50), dir.path(), false).unwrap();
        assert_eq!(m.records.len(), 250);
        let mut seeds: Vec<u64> = m.records.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 250);
        assert!(m.split("test").all(|r| r.style == StyleId::Sketch));
    }

    #[test]
    fn manifest_is_byte_identical_and_guarded() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        make_dataset(&config(6, 3), a.path(), false).unwrap();
        make_dataset(&config(6, 3), b.path(), false).unwrap();
        let ma = fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let mb = fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, mb);
        assert!(matches!(make_dataset(&config(6, 3), a.path(), false), Err(Error::AlreadyExists(_))));
        assert!(make_dataset(&config(6, 3), a.path(), true).is_ok());
    }

    #[test]
    fn empty_split_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(make_dataset(&config(0, 3), dir.path(), false).is_err());
    }

    #[test]
    fn scenes_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(3, 1);
        let m = make_dataset(&cfg, dir.path(), false).unwrap();
        let reloaded = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(reloaded.records, m.records);
        for r in &reloaded.records {
            let from_disk = load_scene(&reloaded.root, r).unwrap();
            let fresh = generate_scene(&cfg.scene, r.num_persons, r.style, r.seed).unwrap();
            assert_eq!(from_disk, fresh);
        }
    }
}
