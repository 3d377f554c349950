//! Deterministic multi-person scene generator with part-level ground truth.
//!
//! A scene is described by its geometry (who owns which pixel) and an
//! appearance derived from the scene seed. The three render styles only
//! change appearance, so labels are bit-identical across styles for a given
//! seed. Interventions edit either the geometry (removing or occluding parts)
//! or the style.

mod dataset;
mod geometry;
mod intervention;
mod render;
mod rle;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    load_scene, make_dataset, read_label_file, write_scene, DatasetConfig, LabelFile, Manifest, ManifestRecord, SplitSpec, MANIFEST_FILE,
};
pub use geometry::{OwnerMap, PersonSpec, MAX_SCALE, MIN_SCALE};
pub use intervention::{apply_intervention, InterventionKind, InterventionSpec};
pub use rle::{rle_decode, rle_encode};

/// Number of part classes (background excluded).
pub const NUM_PARTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartClass {
    Head,
    Torso,
    LeftLimbs,
    RightLimbs,
}

impl PartClass {
    pub const ALL: [PartClass; NUM_PARTS] = [PartClass::Head, PartClass::Torso, PartClass::LeftLimbs, PartClass::RightLimbs];

    /// Index among the parts, 0..NUM_PARTS. Label maps use `index() + 1`.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PartClass::Head => "head",
            PartClass::Torso => "torso",
            PartClass::LeftLimbs => "left_limbs",
            PartClass::RightLimbs => "right_limbs",
        }
    }

    pub fn limbs() -> Vec<PartClass> {
        vec![PartClass::LeftLimbs, PartClass::RightLimbs]
    }
}

impl FromStr for PartClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PartClass::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown part class `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleId {
    Natural,
    Cartoon,
    Sketch,
}

impl StyleId {
    pub const ALL: [StyleId; 3] = [StyleId::Natural, StyleId::Cartoon, StyleId::Sketch];

    pub fn name(self) -> &'static str {
        match self {
            StyleId::Natural => "natural",
            StyleId::Cartoon => "cartoon",
            StyleId::Sketch => "sketch",
        }
    }

    /// The other styles, in canonical order.
    pub fn others(self) -> Vec<StyleId> {
        StyleId::ALL.into_iter().filter(|s| *s != self).collect()
    }
}

impl fmt::Display for StyleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StyleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StyleId::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown style `{s}`")))
    }
}

/// Square binary map stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub size: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(size: usize) -> Self {
        Mask { size, data: vec![false; size * size] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.size + x]
    }

    /// Pixel bounds `(x0, y0, x1, y1)` with exclusive upper corner.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.size {
            for x in 0..self.size {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        b
    }
}

/// RGB image with channels interleaved, values in [0,1] on a 1/255 lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&rgb);
        }
        Image { size, data }
    }

    pub fn pixel(&self, idx: usize) -> [f32; 3] {
        [self.data[3 * idx], self.data[3 * idx + 1], self.data[3 * idx + 2]]
    }

    pub fn set_pixel(&mut self, idx: usize, rgb: [f32; 3]) {
        self.data[3 * idx..3 * idx + 3].copy_from_slice(&rgb);
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.size as u32, self.size as u32, bytes).expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        if img.width() != img.height() {
            return Err(Error::format("image", "scenes are square"));
        }
        Ok(Image { size: img.width() as usize, data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect() })
    }
}

/// Ground truth for one person.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub part_masks: [Mask; NUM_PARTS],
    /// Normalized `cx, cy, w, h`.
    pub bbox: [f64; 4],
    pub part_presence: [bool; NUM_PARTS],
    pub palette_seed: u64,
}

impl Instance {
    pub(crate) fn from_masks(part_masks: [Mask; NUM_PARTS], palette_seed: u64) -> Self {
        let mut inst = Instance { part_masks, bbox: [0.0; 4], part_presence: [false; NUM_PARTS], palette_seed };
        inst.refresh();
        inst
    }

    /// Recompute presence flags and the tight box after mask edits.
    pub(crate) fn refresh(&mut self) {
        let size = self.part_masks[0].size;
        for (flag, mask) in self.part_presence.iter_mut().zip(&self.part_masks) {
            *flag = !mask.is_empty();
        }
        self.bbox = match self.union_mask().bounds() {
            Some((x0, y0, x1, y1)) => {
                let s = size as f64;
                [(x0 + x1) as f64 / (2.0 * s), (y0 + y1) as f64 / (2.0 * s), (x1 - x0) as f64 / s, (y1 - y0) as f64 / s]
            }
            None => [0.0; 4],
        };
    }

    pub fn union_mask(&self) -> Mask {
        let size = self.part_masks[0].size;
        let mut out = Mask::empty(size);
        for m in &self.part_masks {
            for (o, &b) in out.data.iter_mut().zip(&m.data) {
                *o |= b;
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        !self.part_presence.iter().any(|&p| p)
    }

    /// Per-pixel label in 0..=NUM_PARTS (0 = background).
    pub fn label_map(&self) -> Vec<u8> {
        let size = self.part_masks[0].size;
        let mut out = vec![0u8; size * size];
        for (p, m) in self.part_masks.iter().enumerate() {
            for (o, &b) in out.iter_mut().zip(&m.data) {
                if b {
                    *o = p as u8 + 1;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub image: Image,
    pub instances: Vec<Instance>,
    pub style: StyleId,
    pub scene_seed: u64,
}

impl LabeledScene {
    pub fn size(&self) -> usize {
        self.image.size
    }

    /// Semantic label map over all instances.
    pub fn label_map(&self) -> Vec<u8> {
        let size = self.size();
        let mut out = vec![0u8; size * size];
        for inst in &self.instances {
            for (o, l) in out.iter_mut().zip(inst.label_map()) {
                if l != 0 {
                    *o = l;
                }
            }
        }
        out
    }

    pub(crate) fn owner_map(&self) -> OwnerMap {
        let mut map = OwnerMap::empty(self.size());
        for (i, inst) in self.instances.iter().enumerate() {
            for part in PartClass::ALL {
                for (cell, &b) in map.cells.iter_mut().zip(&inst.part_masks[part.index()].data) {
                    if b {
                        *cell = Some((i as u8, part));
                    }
                }
            }
        }
        map
    }

    /// Same geometry rendered in another style.
    pub fn restyle(&self, style: StyleId) -> LabeledScene {
        let palettes: Vec<u64> = self.instances.iter().map(|i| i.palette_seed).collect();
        let image = render::render(&self.owner_map(), &palettes, self.scene_seed, style);
        LabeledScene { image, instances: self.instances.clone(), style, scene_seed: self.scene_seed }
    }
}

/// Generator settings shared by every scene of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Sampling range for person height, inside `[MIN_SCALE, MAX_SCALE]`.
    pub scale_range: (f64, f64),
    /// Maximum box IoU allowed between two placed people.
    pub max_overlap: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { image_size: 128, scale_range: (0.25, 0.4), max_overlap: 0.25 }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(MIN_SCALE..=MAX_SCALE).contains(&lo) || !(MIN_SCALE..=MAX_SCALE).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("scale_range must lie inside [{MIN_SCALE}, {MAX_SCALE}], got {:?}", self.scale_range)));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        Ok(())
    }
}

pub const MAX_PERSONS: usize = 4;

/// Sample the people of a scene. Geometry depends only on the seed.
pub fn sample_people(config: &SceneConfig, num_persons: usize, seed: u64) -> Vec<PersonSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut people: Vec<PersonSpec> = Vec::with_capacity(num_persons);
    for _ in 0..num_persons {
        let mut best: Option<(f64, PersonSpec)> = None;
        for _ in 0..24 {
            let cand = PersonSpec::sample(&mut rng, config.scale_range);
            let overlap = people.iter().map(|p| extent_iou(&p.extent(), &cand.extent())).fold(0.0, f64::max);
            if overlap <= config.max_overlap {
                best = Some((overlap, cand));
                break;
            }
            if best.as_ref().is_none_or(|(o, _)| overlap < *o) {
                best = Some((overlap, cand));
            }
        }
        people.push(best.expect("at least one candidate").1);
    }
    people
}

fn extent_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

/// Render a scene with `num_persons` people in the given style.
pub fn generate_scene(config: &SceneConfig, num_persons: usize, style: StyleId, seed: u64) -> Result<LabeledScene> {
    if !(1..=MAX_PERSONS).contains(&num_persons) {
        return Err(Error::InvalidArgument(format!("num_persons must be in 1..={MAX_PERSONS}, got {num_persons}")));
    }
    config.validate()?;
    let people = sample_people(config, num_persons, seed);
    let owners = OwnerMap::from_people(&people, config.image_size);
    let instances = instances_from_owners(&owners, &people);
    let palettes: Vec<u64> = people.iter().map(|p| p.palette_seed).collect();
    let image = render::render(&owners, &palettes, seed, style);
    Ok(LabeledScene { image, instances, style, scene_seed: seed })
}

fn instances_from_owners(owners: &OwnerMap, people: &[PersonSpec]) -> Vec<Instance> {
    people
        .iter()
        .enumerate()
        .map(|(i, person)| {
            let mut masks: [Mask; NUM_PARTS] = std::array::from_fn(|_| Mask::empty(owners.size));
            for (idx, cell) in owners.cells.iter().enumerate() {
                if let Some((inst, part)) = cell {
                    if *inst as usize == i {
                        masks[part.index()].data[idx] = true;
                    }
                }
            }
            Instance::from_masks(masks, person.palette_seed)
        })
        .collect()
}

/// Scene seeds for a dataset index; splitmix keeps neighbouring seeds unrelated.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random number of people for a scene seed, in `1..=max_persons`.
pub fn persons_for_seed(seed: u64, max_persons: usize) -> usize {
    let mut rng = rng_for(seed, 7);
    rng.random_range(1..=max_persons.clamp(1, MAX_PERSONS))
}
