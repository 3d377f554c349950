//! Appearance model and the three style filters.
//!
//! natural: flat part colors over a cluttered background plus Gaussian noise.
//! cartoon: the clean render quantized to four levels per channel with dark outlines.
//! sketch:  edge map of the clean render drawn on white.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{geometry::OwnerMap, rng_for, Image, PartClass, StyleId};

const NOISE_SIGMA: f32 = 0.03;

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Blob {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    color: [f32; 3],
}

fn background(size: usize, seed: u64) -> Vec<[f32; 3]> {
    let mut rng = rng_for(seed, 1);
    let base = hsv(rng.random(), rng.random_range(0.1..0.5), rng.random_range(0.35..0.85));
    let gdir = rng.random_range(0.0..std::f32::consts::TAU);
    let gamp = rng.random_range(0.05..0.2);
    let n_blobs = rng.random_range(3..7);
    let s = size as f32;
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            cx: rng.random_range(0.0..s),
            cy: rng.random_range(0.0..s),
            rx: rng.random_range(0.04..0.16) * s,
            ry: rng.random_range(0.04..0.16) * s,
            color: hsv(rng.random(), rng.random_range(0.2..0.8), rng.random_range(0.3..0.95)),
        })
        .collect();
    let (gx, gy) = (gdir.cos(), gdir.sin());
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let t = ((fx / s - 0.5) * gx + (fy / s - 0.5) * gy) * gamp;
            let mut c = [base[0] + t, base[1] + t, base[2] + t];
            for b in &blobs {
                let d = ((fx - b.cx) / b.rx).powi(2) + ((fy - b.cy) / b.ry).powi(2);
                if d <= 1.0 {
                    c = b.color;
                }
            }
            out.push(c.map(|v| v.clamp(0.0, 1.0)));
        }
    }
    out
}

/// Colors for head, torso, left limbs, right limbs of one person.
fn palette(palette_seed: u64) -> [[f32; 3]; 4] {
    let mut rng = rng_for(palette_seed, 3);
    let skin = hsv(rng.random_range(0.02..0.11), rng.random_range(0.25..0.6), rng.random_range(0.45..0.95));
    let shirt = hsv(rng.random(), rng.random_range(0.3..0.9), rng.random_range(0.3..0.95));
    let limbs = hsv(rng.random(), rng.random_range(0.3..0.9), rng.random_range(0.25..0.9));
    [skin, shirt, limbs, limbs]
}

fn clean_render(owners: &OwnerMap, palettes: &[u64], seed: u64) -> Vec<[f32; 3]> {
    let mut px = background(owners.size, seed);
    let colors: Vec<[[f32; 3]; 4]> = palettes.iter().map(|&p| palette(p)).collect();
    for (c, owner) in px.iter_mut().zip(&owners.cells) {
        if let Some((inst, part)) = owner {
            *c = colors[*inst as usize][PartClass::index(*part)];
        }
    }
    px
}

/// Per-pixel edge strength: max channel difference to the 4-neighbours.
fn edge_strength(px: &[[f32; 3]], size: usize) -> Vec<f32> {
    let diff = |a: [f32; 3], b: [f32; 3]| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()).max((a[2] - b[2]).abs());
    let mut out = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let mut e = 0.0f32;
            if x + 1 < size {
                e = e.max(diff(px[i], px[i + 1]));
            }
            if y + 1 < size {
                e = e.max(diff(px[i], px[i + size]));
            }
            out[i] = e;
        }
    }
    out
}

/// Grow a per-pixel strength map by `radius` cells (max filter).
fn dilate(values: &[f32], size: usize, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return values.to_vec();
    }
    let mut out = values.to_vec();
    for y in 0..size {
        for x in 0..size {
            let mut m = 0.0f32;
            for yy in y.saturating_sub(radius)..=(y + radius).min(size - 1) {
                for xx in x.saturating_sub(radius)..=(x + radius).min(size - 1) {
                    m = m.max(values[yy * size + xx]);
                }
            }
            out[y * size + x] = m;
        }
    }
    out
}

fn quantize8(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub(crate) fn render(owners: &OwnerMap, palettes: &[u64], seed: u64, style: StyleId) -> Image {
    let size = owners.size;
    let clean = clean_render(owners, palettes, seed);
    let line_radius = size / 96;
    let pixels: Vec<[f32; 3]> = match style {
        StyleId::Natural => {
            let mut rng = rng_for(seed, 2);
            let normal = Normal::new(0.0f32, NOISE_SIGMA).expect("valid sigma");
            clean.iter().map(|c| c.map(|v| v + normal.sample(&mut rng))).collect()
        }
        StyleId::Cartoon => {
            let edges = dilate(&edge_strength(&clean, size), size, line_radius);
            clean.iter().zip(&edges).map(|(c, &e)| if e > 0.08 { [0.06, 0.05, 0.05] } else { c.map(|v| (v * 3.0).round() / 3.0) }).collect()
        }
        StyleId::Sketch => {
            let edges = dilate(&edge_strength(&clean, size), size, line_radius);
            edges
                .iter()
                .map(|&e| {
                    let g = 0.97 - (e * 2.5).min(0.92);
                    [g, g, g]
                })
                .collect()
        }
    };
    Image { size, data: pixels.into_iter().flat_map(|c| c.map(quantize8)).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sketch_is_grey_and_mostly_white() {
        let owners = OwnerMap::empty(32);
        let img = render(&owners, &[], 3, StyleId::Sketch);
        let mut white = 0;
        for i in 0..32 * 32 {
            let [r, g, b] = img.pixel(i);
            assert_eq!(r, g);
            assert_eq!(g, b);
            if r > 0.9 {
                white += 1;
            }
        }
        assert!(white > 32 * 32 / 2);
    }

    #[test]
    fn values_on_byte_lattice() {
        let owners = OwnerMap::empty(16);
        for style in StyleId::ALL {
            let img = render(&owners, &[], 9, style);
            for v in img.data {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!((v * 255.0).round() / 255.0, v);
            }
        }
    }
}
