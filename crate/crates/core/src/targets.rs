//! Ground truth resampled to the feature grid.

use crate::error::{Error, Result};
use crate::synth::{LabeledScene, NUM_PARTS};

/// One person's targets on a `grid x grid` lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTarget {
    pub bbox: [f64; 4],
    pub presence: [bool; NUM_PARTS],
    /// Per-cell class index, 0 for background, `1 + part` otherwise. Each
    /// cell takes the class with the largest area share (ties go low).
    pub labels: Vec<u32>,
    /// Per-part cell masks: area share of at least one half.
    pub part_cells: [Vec<bool>; NUM_PARTS],
    /// Area share of the whole person per cell.
    pub foreground: Vec<f64>,
}

impl InstanceTarget {
    /// Parts present in the full-resolution labels that left no cell on the grid.
    pub fn vanished_parts(&self) -> usize {
        (0..NUM_PARTS).filter(|&p| self.presence[p] && !self.part_cells[p].iter().any(|&c| c)).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTarget {
    pub grid: usize,
    pub instances: Vec<InstanceTarget>,
}

impl SceneTarget {
    pub fn from_scene(scene: &LabeledScene, grid: usize) -> Result<Self> {
        let size = scene.size();
        if grid == 0 || !size.is_multiple_of(grid) {
            return Err(Error::Shape(format!("image size {size} is not a multiple of grid {grid}")));
        }
        let block = size / grid;
        let area = (block * block) as f64;
        let cells = grid * grid;
        let instances = scene
            .instances
            .iter()
            .map(|inst| {
                let mut share = vec![[0.0f64; NUM_PARTS]; cells];
                for (p, mask) in inst.part_masks.iter().enumerate() {
                    for y in 0..size {
                        for x in 0..size {
                            if mask.get(x, y) {
                                share[(y / block) * grid + x / block][p] += 1.0 / area;
                            }
                        }
                    }
                }
                let mut labels = Vec::with_capacity(cells);
                let mut foreground = Vec::with_capacity(cells);
                let mut part_cells: [Vec<bool>; NUM_PARTS] = std::array::from_fn(|_| vec![false; cells]);
                for (cell, s) in share.iter().enumerate() {
                    let fg: f64 = s.iter().sum();
                    let (mut best, mut best_share) = (0u32, 1.0 - fg);
                    for (p, &v) in s.iter().enumerate() {
                        if v > best_share {
                            best = p as u32 + 1;
                            best_share = v;
                        }
                        part_cells[p][cell] = v >= 0.5;
                    }
                    labels.push(best);
                    foreground.push(fg);
                }
                InstanceTarget { bbox: inst.bbox, presence: inst.part_presence, labels, part_cells, foreground }
            })
            .collect();
        Ok(SceneTarget { grid, instances })
    }
}
