//! Multi-person parsing metrics: semantic mIoU, part-based AP and PCP.
//!
//! Predictions are matched to ground truth per image, greedily in score
//! order. A prediction takes the still-free person with the highest part
//! quality (mean part IoU over the person's present parts). The matching does
//! not depend on the AP threshold, so AP never increases with it.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{PartClass, NUM_PARTS};

/// Thresholds averaged into the volume AP.
pub const AP_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// IoU of two binary maps: 1 when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("mask lengths differ: {} vs {}", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// A parsed person: a label map over the image (0 background, `1 + part`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPerson {
    pub score: f64,
    /// Query slot; breaks score ties (lower wins).
    pub query: usize,
    pub labels: Vec<u8>,
}

impl ParsedPerson {
    pub fn part_mask(&self, part: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == part + 1).collect()
    }
}

/// Ground-truth person as a label map plus its part presence.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthPerson {
    pub labels: Vec<u8>,
    pub presence: [bool; NUM_PARTS],
}

impl GroundTruthPerson {
    pub fn part_mask(&self, part: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == part + 1).collect()
    }
}

/// Per-part IoUs of `pred` against the present parts of `gt`.
pub fn part_ious(pred: &ParsedPerson, gt: &GroundTruthPerson) -> Result<Vec<f64>> {
    (0..NUM_PARTS).filter(|&p| gt.presence[p]).map(|p| mask_iou(&pred.part_mask(p), &gt.part_mask(p))).collect()
}

fn quality(ious: &[f64]) -> f64 {
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

fn score_order(a: &ParsedPerson, b: &ParsedPerson) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.query.cmp(&b.query))
}

/// Outcome of matching one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    /// `(score, query, quality if matched)` per prediction, in score order.
    pub predictions: Vec<(f64, usize, Option<f64>)>,
    /// Per ground-truth person: the part IoUs of its match, if any.
    pub gt_part_ious: Vec<Option<Vec<f64>>>,
}

pub fn match_image(preds: &[ParsedPerson], gts: &[GroundTruthPerson]) -> Result<ImageMatch> {
    let mut order: Vec<&ParsedPerson> = preds.iter().collect();
    order.sort_by(|a, b| score_order(a, b));
    let mut gt_part_ious: Vec<Option<Vec<f64>>> = vec![None; gts.len()];
    let mut predictions = Vec::with_capacity(preds.len());
    for pred in order {
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_part_ious[g].is_some() {
                continue;
            }
            let ious = part_ious(pred, gt)?;
            let q = quality(&ious);
            if q > 0.0 && best.as_ref().is_none_or(|b| q > b.1) {
                best = Some((g, q, ious));
            }
        }
        match best {
            Some((g, q, ious)) => {
                gt_part_ious[g] = Some(ious);
                predictions.push((pred.score, pred.query, Some(q)));
            }
            None => predictions.push((pred.score, pred.query, None)),
        }
    }
    Ok(ImageMatch { predictions, gt_part_ious })
}

/// VOC all-point interpolated average precision. `hits` is in descending
/// score order. `None` when there is neither a positive nor a prediction.
pub fn average_precision(hits: &[bool], positives: usize) -> Option<f64> {
    if positives == 0 {
        return if hits.is_empty() { None } else { Some(0.0) };
    }
    let mut tp = 0usize;
    let mut recall = vec![0.0];
    let mut precision = vec![1.0];
    for (i, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recall.len() {
        ap += (recall[i] - recall[i - 1]) * precision[i];
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    /// Background first, then one entry per part class.
    pub per_class_iou: Vec<f64>,
    /// `(threshold, AP)` pairs.
    pub ap_p: Vec<(f64, f64)>,
    pub ap_p_vol: f64,
    pub pcp50: f64,
    pub images: usize,
    pub instances: usize,
    pub predictions: usize,
}

impl MetricsReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>8}", "metric", "value");
        let _ = writeln!(s, "{:<16} {:>8.4}", "mIoU", self.miou);
        let names: Vec<&str> = std::iter::once("background").chain(PartClass::ALL.iter().map(|p| p.name())).collect();
        for (name, iou) in names.iter().zip(&self.per_class_iou) {
            let _ = writeln!(s, "{:<16} {:>8.4}", format!("IoU {name}"), iou);
        }
        for (t, ap) in &self.ap_p {
            let _ = writeln!(s, "{:<16} {:>8.4}", format!("AP@{t:.1}"), ap);
        }
        let _ = writeln!(s, "{:<16} {:>8.4}", "AP_vol", self.ap_p_vol);
        let _ = writeln!(s, "{:<16} {:>8.4}", "PCP50", self.pcp50);
        let _ = writeln!(s, "{:<16} {:>8}", "images", self.images);
        let _ = writeln!(s, "{:<16} {:>8}", "instances", self.instances);
        let _ = write!(s, "{:<16} {:>8}", "predictions", self.predictions);
        s
    }
}

/// Dataset-level accumulator. Images may be added in any order.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    inter: [u64; NUM_PARTS + 1],
    union: [u64; NUM_PARTS + 1],
    gt_pixels: [u64; NUM_PARTS + 1],
    scored: Vec<(f64, usize, usize, Option<f64>)>,
    positives: usize,
    parts_total: usize,
    parts_correct: usize,
    images: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one image: parsed persons, ground-truth persons, and the merged
    /// semantic label maps of prediction and ground truth.
    pub fn add_image(&mut self, preds: &[ParsedPerson], gts: &[GroundTruthPerson], pred_semantic: &[u8], gt_semantic: &[u8]) -> Result<()> {
        if pred_semantic.len() != gt_semantic.len() {
            return Err(Error::Shape("semantic maps differ in size".into()));
        }
        for (&p, &g) in pred_semantic.iter().zip(gt_semantic) {
            let (p, g) = (p as usize, g as usize);
            if p > NUM_PARTS || g > NUM_PARTS {
                return Err(Error::InvalidArgument(format!("label out of range: {p} / {g}")));
            }
            self.gt_pixels[g] += 1;
            if p == g {
                self.inter[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        let m = match_image(preds, gts)?;
        let image = self.images;
        for (score, query, q) in m.predictions {
            self.scored.push((score, image, query, q));
        }
        self.positives += gts.len();
        for (gt, ious) in gts.iter().zip(&m.gt_part_ious) {
            let present = gt.presence.iter().filter(|&&p| p).count();
            self.parts_total += present;
            if let Some(ious) = ious {
                self.parts_correct += ious.iter().filter(|&&v| v > 0.5).count();
            }
        }
        self.images += 1;
        Ok(())
    }

    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        let mut scored = self.scored.clone();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let hits: Vec<bool> = scored.iter().map(|s| s.3.is_some_and(|q| q > threshold)).collect();
        average_precision(&hits, self.positives)
    }

    pub fn finish(&self) -> MetricsReport {
        let per_class_iou: Vec<f64> =
            (0..=NUM_PARTS).map(|c| if self.union[c] == 0 { 1.0 } else { self.inter[c] as f64 / self.union[c] as f64 }).collect();
        let present: Vec<usize> = (1..=NUM_PARTS).filter(|&c| self.gt_pixels[c] > 0).collect();
        let miou = if present.is_empty() { 0.0 } else { present.iter().map(|&c| per_class_iou[c]).sum::<f64>() / present.len() as f64 };
        let ap_p: Vec<(f64, f64)> = AP_THRESHOLDS.iter().map(|&t| (t, self.ap_at(t).unwrap_or(0.0))).collect();
        let ap_p_vol = ap_p.iter().map(|(_, a)| a).sum::<f64>() / ap_p.len() as f64;
        MetricsReport {
            miou,
            per_class_iou,
            ap_p,
            ap_p_vol,
            pcp50: if self.parts_total == 0 { 0.0 } else { self.parts_correct as f64 / self.parts_total as f64 },
            images: self.images,
            instances: self.positives,
            predictions: self.scored.len(),
        }
    }
}

/// Merge per-person label maps into one semantic map: at each pixel the
/// person whose foreground label is most confident wins. `confidence[i][x]`
/// is the probability of person `i`'s label at pixel `x`.
pub fn merge_semantic(labels: &[Vec<u8>], confidence: &[Vec<f32>], len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    let mut best = vec![f32::NEG_INFINITY; len];
    for (lab, conf) in labels.iter().zip(confidence) {
        for x in 0..len {
            if lab[x] != 0 && conf[x] > best[x] {
                best[x] = conf[x];
                out[x] = lab[x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn person(labels: &[u8], score: f64, query: usize) -> ParsedPerson {
        ParsedPerson { score, query, labels: labels.to_vec() }
    }

    fn gt(labels: &[u8]) -> GroundTruthPerson {
        GroundTruthPerson { labels: labels.to_vec(), presence: std::array::from_fn(|p| labels.contains(&(p as u8 + 1))) }
    }

    #[test]
    fn iou_fixtures() {
        let a = [true, true, false, false];
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert!((mask_iou(&a, &[false, true, true, false]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_iou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert_eq!(mask_iou(&[false; 2], &[true, false]).unwrap(), 0.0);
        assert!(mask_iou(&a, &[true]).is_err());
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let g = gt(&[1, 2, 3, 4, 0, 0]);
        let mut acc = MetricsAccumulator::new();
        acc.add_image(&[person(&g.labels, 0.9, 0)], std::slice::from_ref(&g), &g.labels, &g.labels).unwrap();
        let r = acc.finish();
        assert_eq!(r.miou, 1.0);
        assert!(r.ap_p.iter().all(|&(_, a)| a == 1.0));
        assert_eq!(r.ap_p_vol, 1.0);
        assert_eq!(r.pcp50, 1.0);

        let mut acc = MetricsAccumulator::new();
        acc.add_image(&[], std::slice::from_ref(&g), &[0; 6], &g.labels).unwrap();
        let r = acc.finish();
        assert_eq!(r.miou, 0.0);
        assert_eq!(r.ap_p_vol, 0.0);
        assert_eq!(r.pcp50, 0.0);
    }

    #[test]
    fn empty_gt_cases() {
        let mut acc = MetricsAccumulator::new();
        acc.add_image(&[person(&[1, 0], 0.8, 0)], &[], &[1, 0], &[0, 0]).unwrap();
        assert_eq!(acc.ap_at(0.5), Some(0.0));
        let mut acc = MetricsAccumulator::new();
        acc.add_image(&[], &[], &[0, 0], &[0, 0]).unwrap();
        assert_eq!(acc.ap_at(0.5), None);
    }

    #[test]
    fn two_prediction_pr_curve() {
        // Two persons over 8 pixels. The top-scored prediction is a wrong
        // parse of person B (quality 0.5); the second is a perfect parse of
        // person A (quality 1).
        let a = gt(&[1, 2, 0, 0, 0, 0, 0, 0]);
        let b = gt(&[0, 0, 0, 0, 1, 2, 0, 0]);
        let p1 = person(&[0, 0, 0, 0, 1, 0, 0, 0], 0.9, 0);
        let p2 = person(&[1, 2, 0, 0, 0, 0, 0, 0], 0.8, 1);
        let m = match_image(&[p2.clone(), p1.clone()], &[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.predictions, vec![(0.9, 0, Some(0.5)), (0.8, 1, Some(1.0))]);

        let mut acc = MetricsAccumulator::new();
        acc.add_image(&[p1, p2], &[a, b], &[1, 2, 0, 0, 1, 0, 0, 0], &[1, 2, 0, 0, 1, 2, 0, 0]).unwrap();
        // threshold 0.3: hits [T, T] -> AP 1. threshold 0.6: hits [F, T]:
        // precision 1/2 at recall 1/2, so AP = 0.5 * 0.5.
        assert_eq!(acc.ap_at(0.3), Some(1.0));
        assert_eq!(acc.ap_at(0.6), Some(0.25));
        let r = acc.finish();
        assert!((r.pcp50 - 3.0 / 4.0).abs() < 1e-12);
        // head IoU 2/2, torso 1/2.
        assert!((r.miou - 0.75).abs() < 1e-12);
    }

    #[test]
    fn pcp_counts_half_the_parts() {
        let g = gt(&[1, 1, 2, 2, 3, 3, 4, 4]);
        let p = person(&[1, 1, 2, 2, 3, 0, 0, 4], 0.7, 0);
        let mut acc = MetricsAccumulator::new();
        acc.add_image(&[p], std::slice::from_ref(&g), &g.labels, &g.labels).unwrap();
        assert!((acc.finish().pcp50 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicates_leave_single_person_ap_unchanged() {
        let g = gt(&[1, 2, 3, 0]);
        let p = person(&[1, 2, 0, 0], 0.9, 0);
        let mut once = MetricsAccumulator::new();
        once.add_image(std::slice::from_ref(&p), std::slice::from_ref(&g), &p.labels, &g.labels).unwrap();
        let mut twice = MetricsAccumulator::new();
        let dup = ParsedPerson { query: 1, ..p.clone() };
        twice.add_image(&[p.clone(), dup], std::slice::from_ref(&g), &p.labels, &g.labels).unwrap();
        for t in AP_THRESHOLDS {
            assert_eq!(once.ap_at(t), twice.ap_at(t));
        }
    }

    #[test]
    fn order_invariance_and_tie_break() {
        let a = gt(&[1, 2, 0, 0]);
        let p1 = person(&[1, 2, 0, 0], 0.5, 3);
        let p2 = person(&[1, 0, 0, 0], 0.5, 1);
        let m1 = match_image(&[p1.clone(), p2.clone()], std::slice::from_ref(&a)).unwrap();
        let m2 = match_image(&[p2, p1], &[a]).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.predictions[0], (0.5, 1, Some(0.5)));
        assert_eq!(m1.predictions[1].2, None);
    }

    #[test]
    fn semantic_miou_matches_hand_tally() {
        let mut acc = MetricsAccumulator::new();
        acc.add_image(&[], &[], &[1, 1, 0, 2], &[1, 0, 0, 2]).unwrap();
        acc.add_image(&[], &[], &[3, 0, 2, 2], &[3, 3, 0, 2]).unwrap();
        let r = acc.finish();
        // head: inter 1, union 2. torso: inter 2, union 3. left: inter 1, union 2.
        assert!((r.per_class_iou[1] - 0.5).abs() < 1e-12);
        assert!((r.per_class_iou[2] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class_iou[3] - 0.5).abs() < 1e-12);
        assert!((r.miou - (0.5 + 2.0 / 3.0 + 0.5) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn merge_prefers_confident_person() {
        let labels = vec![vec![1, 0, 2], vec![3, 4, 0]];
        let conf = vec![vec![0.9, 0.1, 0.6], vec![0.8, 0.7, 0.9]];
        assert_eq!(merge_semantic(&labels, &conf, 3), vec![1, 4, 2]);
    }
}
