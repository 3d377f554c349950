//! Score hand-built predictions with the parsing metrics.
//!
//!     cargo run --release --example metrics_toy

use hparse::metrics::{GroundTruthPerson, MetricsAccumulator, ParsedPerson};

/// An 8x8 label map with `label` on the rectangle [x0, x1) x [y0, y1).
fn rect(x0: usize, x1: usize, y0: usize, y1: usize, label: u8) -> Vec<u8> {
    let mut v = vec![0u8; 64];
    for y in y0..y1 {
        for x in x0..x1 {
            v[y * 8 + x] = label;
        }
    }
    v
}

fn merge(maps: &[&Vec<u8>]) -> Vec<u8> {
    (0..64).map(|i| maps.iter().map(|m| m[i]).max().unwrap_or(0)).collect()
}

fn main() -> hparse::Result<()> {
    let gt_a = GroundTruthPerson { labels: rect(0, 4, 0, 4, 1), presence: [true, false, false, false] };
    let gt_b = GroundTruthPerson { labels: rect(4, 8, 4, 8, 2), presence: [false, true, false, false] };
    // One exact hit, one shifted by a column, one false positive.
    let exact = ParsedPerson { score: 0.9, query: 0, labels: rect(0, 4, 0, 4, 1) };
    let shifted = ParsedPerson { score: 0.8, query: 1, labels: rect(5, 8, 4, 8, 2) };
    let stray = ParsedPerson { score: 0.3, query: 2, labels: rect(0, 2, 6, 8, 3) };
    let preds = [exact, shifted, stray];
    let pred_sem = merge(&preds.iter().map(|p| &p.labels).collect::<Vec<_>>());
    let gt_sem = merge(&[&gt_a.labels, &gt_b.labels]);

    let mut acc = MetricsAccumulator::new();
    acc.add_image(&preds, &[gt_a, gt_b], &pred_sem, &gt_sem)?;
    let report = acc.finish();
    println!("{}", report.table());
    let aps: Vec<f64> = report.ap_p.iter().map(|(_, a)| *a).collect();
    println!("AP non-increasing over thresholds: {}", aps.windows(2).all(|w| w[1] <= w[0]));
    Ok(())
}
