//! Stick-figure layout and rasterization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PartClass;

/// One person to draw. `center` is normalized, `scale` is the body height as
/// a fraction of the image height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub center: [f64; 2],
    pub scale: f64,
    /// left arm, right arm, left leg, right leg, head tilt, torso lean.
    pub pose_angles: [f64; 6],
    pub palette_seed: u64,
}

pub const MIN_SCALE: f64 = 0.1;
pub const MAX_SCALE: f64 = 0.4;

impl PersonSpec {
    /// Sample a person whose body stays inside the unit square.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, scale_range: (f64, f64)) -> Self {
        let (lo, hi) = scale_range;
        let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let half_w = 0.45 * scale;
        let half_h = 0.56 * scale;
        let cx = rng.random_range(half_w..(1.0 - half_w));
        let cy = rng.random_range(half_h..(1.0 - half_h));
        let pose_angles = [
            rng.random_range(0.25..2.3),
            rng.random_range(0.25..2.3),
            rng.random_range(0.05..0.5),
            rng.random_range(0.05..0.5),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.15..0.15),
        ];
        PersonSpec { center: [cx, cy], scale, pose_angles, palette_seed: rng.random() }
    }

    /// Approximate normalized extent (x0, y0, x1, y1) used for placement.
    pub fn extent(&self) -> [f64; 4] {
        let hw = 0.45 * self.scale;
        let hh = 0.56 * self.scale;
        [self.center[0] - hw, self.center[1] - hh, self.center[0] + hw, self.center[1] + hh]
    }

    fn shapes(&self, size: usize) -> Vec<(Shape, PartClass)> {
        let s = size as f64;
        let h = self.scale * s;
        let (cx, cy) = (self.center[0] * s, self.center[1] * s);
        let [la, ra, ll, rl, tilt, lean] = self.pose_angles;
        let min_r = 0.75;

        let hip = (cx, cy + 0.08 * h);
        let up = (lean.sin(), -lean.cos());
        let across = (lean.cos(), lean.sin());
        let neck = (hip.0 + 0.34 * h * up.0, hip.1 + 0.34 * h * up.1);
        let head_dir = ((lean + tilt).sin(), -(lean + tilt).cos());
        let head = (neck.0 + 0.12 * h * head_dir.0, neck.1 + 0.12 * h * head_dir.1);

        let shoulder =
            |side: f64| (neck.0 - 0.03 * h * up.0 + side * 0.10 * h * across.0, neck.1 - 0.03 * h * up.1 + side * 0.10 * h * across.1);
        let hip_at = |side: f64| (hip.0 + side * 0.06 * h * across.0, hip.1 + side * 0.06 * h * across.1);
        // angles open outwards from "straight down"
        let limb = |from: (f64, f64), side: f64, angle: f64, len: f64| (from.0 + side * angle.sin() * len, from.1 + angle.cos() * len);

        let l_sh = shoulder(-1.0);
        let r_sh = shoulder(1.0);
        let l_hp = hip_at(-1.0);
        let r_hp = hip_at(1.0);
        let arm_r = (0.045 * h).max(min_r);
        let leg_r = (0.055 * h).max(min_r);

        // paint order: legs, torso, arms, head
        vec![
            (Shape::Capsule { a: l_hp, b: limb(l_hp, -1.0, ll, 0.42 * h), r: leg_r }, PartClass::LeftLimbs),
            (Shape::Capsule { a: r_hp, b: limb(r_hp, 1.0, rl, 0.42 * h), r: leg_r }, PartClass::RightLimbs),
            (Shape::Capsule { a: hip, b: neck, r: (0.12 * h).max(min_r) }, PartClass::Torso),
            (Shape::Capsule { a: l_sh, b: limb(l_sh, -1.0, la, 0.32 * h), r: arm_r }, PartClass::LeftLimbs),
            (Shape::Capsule { a: r_sh, b: limb(r_sh, 1.0, ra, 0.32 * h), r: arm_r }, PartClass::RightLimbs),
            (Shape::Disk { c: head, r: (0.10 * h).max(min_r) }, PartClass::Head),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Capsule { a: (f64, f64), b: (f64, f64), r: f64 },
    Disk { c: (f64, f64), r: f64 },
}

impl Shape {
    fn contains(&self, p: (f64, f64)) -> bool {
        match *self {
            Shape::Disk { c, r } => (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2) <= r * r,
            Shape::Capsule { a, b, r } => {
                let (vx, vy) = (b.0 - a.0, b.1 - a.1);
                let len2 = vx * vx + vy * vy;
                let t = if len2 > 0.0 { (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (qx, qy) = (a.0 + t * vx, a.1 + t * vy);
                (p.0 - qx).powi(2) + (p.1 - qy).powi(2) <= r * r
            }
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Disk { c, r } => (c.0 - r, c.1 - r, c.0 + r, c.1 + r),
            Shape::Capsule { a, b, r } => (a.0.min(b.0) - r, a.1.min(b.1) - r, a.0.max(b.0) + r, a.1.max(b.1) + r),
        }
    }
}

/// Which instance and part owns each pixel; `None` is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnerMap {
    pub size: usize,
    pub cells: Vec<Option<(u8, PartClass)>>,
}

impl OwnerMap {
    pub fn empty(size: usize) -> Self {
        OwnerMap { size, cells: vec![None; size * size] }
    }

    /// Paint people back to front: later entries occlude earlier ones.
    pub fn from_people(people: &[PersonSpec], size: usize) -> Self {
        let mut map = OwnerMap::empty(size);
        for (idx, person) in people.iter().enumerate() {
            for (shape, part) in person.shapes(size) {
                map.paint(shape, idx as u8, part);
            }
        }
        map
    }

    fn paint(&mut self, shape: Shape, inst: u8, part: PartClass) {
        let s = self.size as isize;
        let (x0, y0, x1, y1) = shape.bounds();
        let clamp = |v: f64| (v.floor() as isize).clamp(0, s - 1) as usize;
        for y in clamp(y0)..=clamp(y1) {
            for x in clamp(x0)..=clamp(x1) {
                if shape.contains((x as f64 + 0.5, y as f64 + 0.5)) {
                    self.cells[y * self.size + x] = Some((inst, part));
                }
            }
        }
    }
}
