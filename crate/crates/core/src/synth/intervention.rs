use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{geometry::OwnerMap, render, rng_for, LabeledScene, PartClass};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    /// Keep only the target parts; everything else becomes background.
    ContentOnly,
    /// Occlude a random subset of non-target parts with background rectangles.
    RandomMask,
    /// Re-render in a different, randomly chosen style.
    RandomStyle,
}

impl InterventionKind {
    pub const ALL: [InterventionKind; 3] = [InterventionKind::ContentOnly, InterventionKind::RandomMask, InterventionKind::RandomStyle];

    pub fn name(self) -> &'static str {
        match self {
            InterventionKind::ContentOnly => "content_only",
            InterventionKind::RandomMask => "random_mask",
            InterventionKind::RandomStyle => "random_style",
        }
    }
}

impl FromStr for InterventionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InterventionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown intervention kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub kind: InterventionKind,
    pub target_part_group: Vec<PartClass>,
    pub seed: u64,
}

impl InterventionSpec {
    /// Intervention targeting the limbs, the default part group.
    pub fn on_limbs(kind: InterventionKind, seed: u64) -> Self {
        InterventionSpec { kind, target_part_group: PartClass::limbs(), seed }
    }
}

/// Apply one intervention. Instances left without any visible part are dropped.
pub fn apply_intervention(scene: &LabeledScene, spec: &InterventionSpec) -> Result<LabeledScene> {
    if scene.instances.is_empty() {
        return Err(Error::InvalidArgument("intervention needs a scene with at least one instance".into()));
    }
    let is_target = |p: PartClass| spec.target_part_group.contains(&p);
    let mut out = match spec.kind {
        InterventionKind::ContentOnly => {
            let mut out = scene.clone();
            let bg = background_like(scene);
            for inst in &mut out.instances {
                for part in PartClass::ALL.into_iter().filter(|p| !is_target(*p)) {
                    let mask = &mut inst.part_masks[part.index()];
                    for (idx, bit) in mask.data.iter_mut().enumerate() {
                        if *bit {
                            out.image.set_pixel(idx, bg.pixel(idx));
                            *bit = false;
                        }
                    }
                }
            }
            out
        }
        InterventionKind::RandomMask => {
            let mut rng = rng_for(spec.seed, 11);
            let mut out = scene.clone();
            let bg = background_like(scene);
            let size = scene.size();
            let mut rects = Vec::new();
            for inst in &scene.instances {
                for part in PartClass::ALL.into_iter().filter(|p| !is_target(*p)) {
                    if let Some(b) = inst.part_masks[part.index()].bounds() {
                        if rng.random_bool(0.5) {
                            rects.push(b);
                        }
                    }
                }
            }
            if rects.is_empty() {
                // occlude at least one part when any non-target part exists
                let candidates: Vec<_> = scene
                    .instances
                    .iter()
                    .flat_map(|inst| {
                        PartClass::ALL.into_iter().filter(|p| !is_target(*p)).filter_map(|p| inst.part_masks[p.index()].bounds())
                    })
                    .collect();
                if !candidates.is_empty() {
                    rects.push(candidates[rng.random_range(0..candidates.len())]);
                }
            }
            let owners = scene.owner_map();
            for (x0, y0, x1, y1) in rects {
                let (x0, y0) = (x0.saturating_sub(1), y0.saturating_sub(1));
                let (x1, y1) = ((x1 + 1).min(size), (y1 + 1).min(size));
                for y in y0..y1 {
                    for x in x0..x1 {
                        let idx = y * size + x;
                        match owners.cells[idx] {
                            Some((_, part)) if is_target(part) => continue,
                            Some((inst, part)) => {
                                out.instances[inst as usize].part_masks[part.index()].data[idx] = false;
                            }
                            None => {}
                        }
                        out.image.set_pixel(idx, bg.pixel(idx));
                    }
                }
            }
            out
        }
        InterventionKind::RandomStyle => {
            let mut rng = rng_for(spec.seed, 12);
            let others = scene.style.others();
            let style = others[rng.random_range(0..others.len())];
            scene.restyle(style)
        }
    };
    for inst in &mut out.instances {
        inst.refresh();
    }
    out.instances.retain(|i| !i.is_empty());
    Ok(out)
}

/// The scene's background in its own style, with no people drawn.
fn background_like(scene: &LabeledScene) -> super::Image {
    render::render(&OwnerMap::empty(scene.size()), &[], scene.scene_seed, scene.style)
}
