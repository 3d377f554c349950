//! Loss curves, tables and heatmap grids for a directory of runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;

use super::config::{read_text, EvalConfig};
use super::evaluate::select_queries;
use super::protocol::ProtocolTable;
use super::train::{EpochStats, RunRecord, RECORD_FILE};
use crate::error::{Error, Result};
use crate::model::ParsingModel;
use crate::synth::{LabeledScene, NUM_PARTS};

/// Label colors: background, then one per part class.
pub const PALETTE: [[u8; 3]; NUM_PARTS + 1] = [[0, 0, 0], [230, 60, 60], [60, 200, 80], [70, 110, 240], [240, 210, 50]];

/// A label map drawn with [`PALETTE`].
pub fn label_image(labels: &[u8], size: usize) -> image::RgbImage {
    image::RgbImage::from_fn(size as u32, size as u32, |x, y| image::Rgb(PALETTE[labels[y as usize * size + x as usize] as usize]))
}

/// Images of equal height placed left to right.
pub fn hstack(images: &[image::RgbImage]) -> image::RgbImage {
    let width = images.iter().map(|i| i.width()).sum();
    let height = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let mut out = image::RgbImage::new(width, height);
    let mut x0 = 0;
    for img in images {
        for (x, y, px) in img.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *px);
        }
        x0 += img.width();
    }
    out
}

/// Every `run.json` below `dir`, sorted by path.
pub fn find_runs(dir: &Path) -> Result<Vec<(PathBuf, RunRecord)>> {
    let mut found = Vec::new();
    walk(dir, &mut |p| {
        if p.file_name().is_some_and(|n| n == RECORD_FILE) {
            found.push((p.to_path_buf(), RunRecord::load(p)?));
        }
        Ok(())
    })?;
    found.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(found)
}

/// Every protocol table (`*.json` that parses as one) below `dir`.
pub fn find_tables(dir: &Path) -> Result<Vec<ProtocolTable>> {
    let mut paths = Vec::new();
    walk(dir, &mut |p| {
        if p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != RECORD_FILE) {
            paths.push(p.to_path_buf());
        }
        Ok(())
    })?;
    paths.sort();
    Ok(paths.iter().filter_map(|p| serde_json::from_str(&read_text(p).ok()?).ok()).collect())
}

fn walk(dir: &Path, f: &mut dyn FnMut(&Path) -> Result<()>) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            walk(&p, f)?;
        } else {
            f(&p)?;
        }
    }
    Ok(())
}

/// Per-epoch loss curves as an SVG line chart.
pub fn loss_curves_svg(title: &str, epochs: &[EpochStats]) -> String {
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let series: [(&str, &str, fn(&EpochStats) -> f64); 5] = [
        ("total", "#222222", |e| e.total),
        ("det", "#1f77b4", |e| e.l_det),
        ("part", "#d62728", |e| e.l_part),
        ("div", "#2ca02c", |e| e.l_div),
        ("inv", "#9467bd", |e| e.l_inv),
    ];
    let ymax = epochs.iter().flat_map(|e| series.iter().map(move |s| (s.2)(e))).fold(0.0f64, f64::max).max(1e-6);
    let n = epochs.len().max(2) - 1;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v / ymax;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{pad}" y="16">{title}</text>"#);
    let _ = writeln!(s, r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#, h - pad, w - pad);
    let _ = writeln!(s, r#"<text x="4" y="{}">{ymax:.3}</text>"#, pad + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}">epoch {}</text>"#, w - pad - 40.0, h - pad + 16.0, epochs.len());
    for (k, (name, color, f)) in series.iter().enumerate() {
        if epochs.iter().all(|e| f(e) == 0.0) {
            continue;
        }
        let pts: Vec<String> = epochs.iter().enumerate().map(|(i, e)| format!("{:.1},{:.1}", x(i), y(f(e)))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        let ly = pad + 14.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{name}</text>"#, w - pad - 30.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Write `report.md` plus one loss-curve SVG per run into `out`.
/// Returns the markdown.
pub fn write_report(runs_dir: &Path, out: &Path) -> Result<String> {
    let runs = find_runs(runs_dir)?;
    let tables = find_tables(runs_dir)?;
    if runs.is_empty() && tables.is_empty() {
        return Err(Error::InvalidArgument(format!("no runs or tables under {}", runs_dir.display())));
    }
    let curves = out.join("curves");
    fs::create_dir_all(&curves)?;
    let mut md = String::from("# Run report\n\n");
    if !runs.is_empty() {
        md.push_str(
            "| run | arm | seed | epochs | final loss | mIoU | AP_vol | PCP50 | curves |\n|---|---|---:|---:|---:|---:|---:|---:|---|\n",
        );
        for (path, r) in &runs {
            let stem =
                path.parent().and_then(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| r.name.clone());
            let svg = format!("{stem}.svg");
            fs::write(curves.join(&svg), loss_curves_svg(&r.name, &r.epochs))?;
            let last = r.epochs.last().map_or(f64::NAN, |e| e.total);
            let metric = |f: fn(&crate::metrics::MetricsReport) -> f64| r.metrics.as_ref().map_or("-".into(), |m| format!("{:.4}", f(m)));
            let _ = writeln!(
                md,
                "| {stem} | {} | {} | {} | {last:.4} | {} | {} | {} | [svg](curves/{svg}) |",
                r.arm,
                r.seed,
                r.epochs.len(),
                metric(|m| m.miou),
                metric(|m| m.ap_p_vol),
                metric(|m| m.pcp50)
            );
        }
        md.push('\n');
    }
    for t in &tables {
        md.push_str(&t.markdown());
        md.push('\n');
    }
    fs::write(out.join("report.md"), &md)?;
    Ok(md)
}

/// An RGB canvas of square tiles.
struct Grid {
    tile: usize,
    cols: usize,
    img: image::RgbImage,
}

impl Grid {
    fn new(tile: usize, cols: usize, rows: usize) -> Self {
        Grid { tile, cols, img: image::RgbImage::new((tile * cols) as u32, (tile * rows.max(1)) as u32) }
    }

    /// Paint tile (`row`, `col`) from a `side`x`side` color function,
    /// scaled up by nearest neighbour.
    fn paint(&mut self, row: usize, col: usize, side: usize, color: impl Fn(usize) -> [u8; 3]) {
        debug_assert!(col < self.cols);
        for y in 0..self.tile {
            for x in 0..self.tile {
                let src = (y * side / self.tile) * side + x * side / self.tile;
                let px = image::Rgb(color(src));
                self.img.put_pixel((col * self.tile + x) as u32, (row * self.tile + y) as u32, px);
            }
        }
    }
}

/// Black to red to yellow to white for values in [0, 1].
pub fn heat(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let c = |t: f32| (t.clamp(0.0, 1.0) * 255.0) as u8;
    [c(v), c(v - 1.0), c(v - 2.0)]
}

fn normalized(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-12);
    values.iter().map(|v| (v - lo) / span).collect()
}

/// Write one PNG per scene. Each row is a detected person: the image, the
/// ground-truth parsing, the predicted parsing, the affinity map of every
/// part, and the per-cell norm of the content and context representations.
/// Returns the written paths.
pub fn dump_visualizations(model: &ParsingModel, scenes: &[LabeledScene], eval: &EvalConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let size = model.config.image_size;
    let cols = 3 + NUM_PARTS + 2;
    let mut written = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let out = model.forward_images(&[&scene.image])?;
        let (n, g) = (out.num_queries, out.grid);
        let hw = g * g;
        let probs = out.mask_probabilities()?.to_dtype(DType::F32)?.to_vec3::<f32>()?;
        let affinity = match &out.affinity {
            Some(a) => Some(a.detach().to_dtype(DType::F32)?.reshape((n, NUM_PARTS, hw))?.to_vec3::<f32>()?),
            None => None,
        };
        let norms = |t: &Option<candle_core::Tensor>| -> Result<Option<Vec<Vec<f32>>>> {
            match t {
                Some(t) => Ok(Some(t.detach().to_dtype(DType::F32)?.sqr()?.sum(1)?.sqrt()?.to_vec2::<f32>()?)),
                None => Ok(None),
            }
        };
        let (content, context) = (norms(&out.content)?, norms(&out.context)?);
        let keep = select_queries(&out.person_probs()?[0], eval.score_threshold, eval.max_instances);
        let rgb = scene.image.to_rgb8();
        let gt = scene.label_map();
        let mut grid = Grid::new(size, cols, keep.len());
        for (row, &q) in keep.iter().enumerate() {
            grid.paint(row, 0, size, |i| rgb.get_pixel((i % size) as u32, (i / size) as u32).0);
            grid.paint(row, 1, size, |i| PALETTE[gt[i] as usize]);
            let p = &probs[q];
            grid.paint(row, 2, g, |i| {
                let best = (0..p.len()).fold(0, |b, c| if p[c][i] > p[b][i] { c } else { b });
                PALETTE[best]
            });
            if let Some(a) = &affinity {
                for part in 0..NUM_PARTS {
                    grid.paint(row, 3 + part, g, |i| heat(a[q][part][i]));
                }
            }
            for (k, rep) in [&content, &context].into_iter().enumerate() {
                if let Some(r) = rep {
                    let v = normalized(&r[q]);
                    grid.paint(row, 3 + NUM_PARTS + k, g, |i| heat(v[i]));
                }
            }
        }
        let path = dir.join(format!("scene_{si:04}.png"));
        grid.img.save(&path).map_err(|e| Error::format("png", e.to_string()))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_endpoints() {
        assert_eq!(heat(0.0), [0, 0, 0]);
        assert_eq!(heat(1.0), [255, 255, 255]);
        assert_eq!(heat(-3.0), [0, 0, 0]);
    }

    #[test]
    fn svg_has_one_line_per_nonzero_series() {
        let epochs: Vec<EpochStats> =
            (0..3).map(|i| EpochStats { epoch: i, total: 1.0 / (i + 1) as f64, l_det: 0.5, l_part: 0.2, ..Default::default() }).collect();
        let svg = loss_curves_svg("t", &epochs);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
