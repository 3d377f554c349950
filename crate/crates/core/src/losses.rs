//! Training objectives: part cross-entropy, representation diversity,
//! intervention invariance and detection.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::NUM_PARTS;
use crate::targets::SceneTarget;

/// Class weight of the "no person" label in the person cross-entropy.
pub const NO_PERSON_WEIGHT: f64 = 0.1;
const COS_EPS: f64 = 1e-12;

/// Targets gathered for the matched queries of a batch, in `(image, gt)` order.
#[derive(Debug, Clone)]
pub struct MatchedTargets {
    /// Flat `image * N + query` index of each matched query, `(K,)`.
    pub query_index: Tensor,
    /// `(K, hw)` class index per cell.
    pub labels: Tensor,
    /// `(K, C, hw)` binary part cells.
    pub part_masks: Tensor,
    /// `(K, C)` 1 where the part has at least one cell on the grid.
    pub part_valid: Tensor,
    /// `(K, C)` part presence at full resolution.
    pub presence: Tensor,
    /// `(K, 4)` boxes.
    pub boxes: Tensor,
    /// `(b*N,)` 0 for matched queries, 1 for "no person".
    pub person_class: Tensor,
    pub matched: usize,
    pub total_queries: usize,
    /// Present parts with no cell left on the grid.
    pub vanished_parts: usize,
}

impl MatchedTargets {
    /// `assignments[i]` lists `(gt, query)` pairs for image `i`.
    pub fn build(
        targets: &[SceneTarget],
        assignments: &[Vec<(usize, usize)>],
        num_queries: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if targets.len() != assignments.len() {
            return Err(Error::Shape("one assignment per image is required".into()));
        }
        let hw = targets.first().map(|t| t.grid * t.grid).unwrap_or(0);
        let mut query_index = Vec::new();
        let mut labels = Vec::new();
        let mut masks = Vec::new();
        let mut valid = Vec::new();
        let mut presence = Vec::new();
        let mut boxes = Vec::new();
        let mut person_class = vec![1u32; targets.len() * num_queries];
        let mut vanished = 0;
        for (i, (t, pairs)) in targets.iter().zip(assignments).enumerate() {
            if t.grid * t.grid != hw {
                return Err(Error::Shape("all targets in a batch must share a grid".into()));
            }
            for &(g, q) in pairs {
                let inst = t.instances.get(g).ok_or_else(|| Error::InvalidArgument(format!("no ground truth {g}")))?;
                if q >= num_queries {
                    return Err(Error::InvalidArgument(format!("query {q} out of range")));
                }
                let flat = i * num_queries + q;
                query_index.push(flat as u32);
                person_class[flat] = 0;
                labels.extend_from_slice(&inst.labels);
                for p in 0..NUM_PARTS {
                    let cells = &inst.part_cells[p];
                    masks.extend(cells.iter().map(|&c| c as u8 as f64));
                    valid.push(cells.iter().any(|&c| c) as u8 as f64);
                    presence.push(inst.presence[p] as u8 as f64);
                }
                boxes.extend_from_slice(&inst.bbox);
                vanished += inst.vanished_parts();
            }
        }
        let k = query_index.len();
        let f = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> { Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?) };
        Ok(MatchedTargets {
            query_index: Tensor::from_vec(query_index, k, device)?,
            labels: Tensor::from_vec(labels, (k, hw), device)?,
            part_masks: f(masks, &[k, NUM_PARTS, hw])?,
            part_valid: f(valid, &[k, NUM_PARTS])?,
            presence: f(presence, &[k, NUM_PARTS])?,
            boxes: f(boxes, &[k, 4])?,
            person_class: Tensor::from_vec(person_class, targets.len() * num_queries, device)?,
            matched: k,
            total_queries: targets.len() * num_queries,
            vanished_parts: vanished,
        })
    }

    fn zero(&self, like: &Tensor) -> Result<Tensor> {
        Ok(Tensor::zeros((), like.dtype(), like.device())?)
    }
}

/// Mean per-cell cross-entropy of matched `(b*N, C+1, hw)` logits.
pub fn mask_cross_entropy(logits: &Tensor, m: &MatchedTargets) -> Result<Tensor> {
    if m.matched == 0 {
        return m.zero(logits);
    }
    let picked = logits.index_select(&m.query_index, 0)?;
    let logp = candle_nn::ops::log_softmax(&picked, 1)?;
    let nll = logp.gather(&m.labels.unsqueeze(1)?, 1)?.neg()?;
    Ok(nll.mean_all()?)
}

/// Cross-entropy summed over the segmentation branches in use.
pub fn loss_part(branch_logits: &[&Tensor], m: &MatchedTargets) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for logits in branch_logits {
        let ce = mask_cross_entropy(logits, m)?;
        total = Some(match total {
            Some(t) => (t + ce)?,
            None => ce,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no segmentation branch".into()))
}

/// Masked mean of matched representations under each ground-truth part:
/// `(b*N, d, hw)` -> `(K, C, d)`. Parts with no cell give zero vectors.
pub fn phi_aggregate(reps: &Tensor, m: &MatchedTargets) -> Result<Tensor> {
    let picked = reps.index_select(&m.query_index, 0)?; // (K, d, hw)
    let sums = m.part_masks.matmul(&picked.transpose(1, 2)?.contiguous()?)?; // (K, C, d)
    let counts = m.part_masks.sum_keepdim(2)?.clamp(1.0, f64::MAX)?;
    Ok(sums.broadcast_div(&counts)?)
}

/// Cosine similarity along the last axis. Zero vectors score 0.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?;
    let nb = b.sqr()?.sum(D::Minus1)?;
    let denom = (na * nb)?.clamp(COS_EPS, f64::MAX)?.sqrt()?;
    Ok((dot / denom)?)
}

fn valid_mean(values: &Tensor, m: &MatchedTargets) -> Result<Tensor> {
    let count = m.part_valid.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count == 0.0 {
        return m.zero(values);
    }
    Ok(((values * &m.part_valid)?.sum_all()? / count)?)
}

/// Mean cosine between content and context part vectors.
pub fn similarity_term(content: &Tensor, context: &Tensor, m: &MatchedTargets) -> Result<Tensor> {
    if m.matched == 0 {
        return m.zero(content);
    }
    let sim = cosine(&phi_aggregate(content, m)?, &phi_aggregate(context, m)?)?;
    valid_mean(&sim, m)
}

/// Similarity term plus the part loss.
pub fn loss_div(content: &Tensor, context: &Tensor, part: &Tensor, m: &MatchedTargets) -> Result<Tensor> {
    Ok((similarity_term(content, context, m)? + part)?)
}

/// Mean over views of `|1 - cos|` between original and intervened part
/// vectors, for each representation supplied. `views[e][r]` pairs with
/// `originals[r]`.
pub fn loss_inv(originals: &[&Tensor], views: &[Vec<Tensor>], m: &MatchedTargets) -> Result<Tensor> {
    let like = originals.first().ok_or_else(|| Error::InvalidArgument("no representation for invariance".into()))?;
    if views.is_empty() || m.matched == 0 {
        return m.zero(like);
    }
    let base: Vec<Tensor> = originals.iter().map(|r| phi_aggregate(r, m)).collect::<Result<_>>()?;
    let mut total = m.zero(like)?;
    for view in views {
        if view.len() != originals.len() {
            return Err(Error::Shape("each view needs one tensor per representation".into()));
        }
        for (orig, rep) in base.iter().zip(view) {
            let gap = (1.0 - cosine(orig, &phi_aggregate(rep, m)?)?)?.abs()?;
            total = (total + valid_mean(&gap, m)?)?;
        }
    }
    Ok((total / views.len() as f64)?)
}

/// Numerically stable binary cross-entropy with logits, averaged.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((logits.relu()? - (logits * targets)? + softplus)?.mean_all()?)
}

/// `0.5 d^2` below 1, `d - 0.5` above, summed over coordinates and
/// averaged over rows.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let d = (pred - target)?.abs()?;
    let small = d.minimum(1.0)?;
    let per = ((small.sqr()? * 0.5)? + (d - small)?)?;
    Ok(per.sum(D::Minus1)?.mean_all()?)
}

/// Detection loss terms.
#[derive(Debug, Clone)]
pub struct DetectionTerms {
    pub person: Tensor,
    pub presence: Tensor,
    pub bbox: Tensor,
}

impl DetectionTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok(((&self.person + &self.presence)? + &self.bbox)?)
    }
}

/// Weighted person cross-entropy over all queries, part-presence BCE and
/// box smooth-L1 over matched queries.
pub fn loss_det(class_logits: &Tensor, boxes: &Tensor, part_logits: &Tensor, m: &MatchedTargets) -> Result<DetectionTerms> {
    let logits = class_logits.reshape((m.total_queries, 2))?;
    let logp = candle_nn::ops::log_softmax(&logits, 1)?;
    let nll = logp.gather(&m.person_class.unsqueeze(1)?, 1)?.squeeze(1)?.neg()?;
    let nm = (m.total_queries - m.matched) as f64;
    let weights: Vec<f64> = m.person_class.to_vec1::<u32>()?.iter().map(|&c| if c == 0 { 1.0 } else { NO_PERSON_WEIGHT }).collect();
    let weights = Tensor::from_vec(weights, m.total_queries, logits.device())?.to_dtype(logits.dtype())?;
    let person = ((nll * weights)?.sum_all()? / (m.matched as f64 + NO_PERSON_WEIGHT * nm))?;
    if m.matched == 0 {
        return Ok(DetectionTerms { person, presence: m.zero(class_logits)?, bbox: m.zero(class_logits)? });
    }
    let c = part_logits.dim(D::Minus1)?;
    let parts = part_logits.reshape((m.total_queries, c))?.index_select(&m.query_index, 0)?;
    let pred_boxes = boxes.reshape((m.total_queries, 4))?.index_select(&m.query_index, 0)?;
    Ok(DetectionTerms { person, presence: bce_with_logits(&parts, &m.presence)?, bbox: smooth_l1(&pred_boxes, &m.boxes)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub det: f64,
    pub div: f64,
    pub inv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { det: 1.0, div: 1.0, inv: 1.0 }
    }
}

/// Scalar view of one step's losses. `l_div` already contains `l_part`;
/// with unit weights `total = l_det + l_div + l_inv`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_part: f64,
    pub l_sim: f64,
    pub l_div: f64,
    pub l_inv: f64,
    pub l_det: f64,
    pub total: f64,
    pub views: usize,
    pub vanished_parts: usize,
    pub matched: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_part, self.l_sim, self.l_div, self.l_inv, self.l_det, self.total].iter().all(|v| v.is_finite())
    }
}

/// Combine the terms. `similarity` and `invariance` are `None` when the arm
/// disables them. Returns the differentiable total and its breakdown.
pub fn total_loss(
    det: &Tensor,
    part: &Tensor,
    similarity: Option<&Tensor>,
    invariance: Option<&Tensor>,
    weights: &LossWeights,
    m: &MatchedTargets,
    views: usize,
) -> Result<(Tensor, LossBreakdown)> {
    let div = match similarity {
        Some(s) => (s + part)?,
        None => part.clone(),
    };
    let mut total = ((det * weights.det)? + (&div * weights.div)?)?;
    if let Some(inv) = invariance {
        total = (total + (inv * weights.inv)?)?;
    }
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let breakdown = LossBreakdown {
        l_part: scalar(part)?,
        l_sim: similarity.map(scalar).transpose()?.unwrap_or(0.0),
        l_div: scalar(&div)?,
        l_inv: invariance.map(scalar).transpose()?.unwrap_or(0.0),
        l_det: scalar(det)?,
        total: scalar(&total)?,
        views,
        vanished_parts: m.vanished_parts,
        matched: m.matched,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::InstanceTarget;
    use crate::testutil::max_grad_error;
    use rand::{Rng, SeedableRng};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// One image on a 4x4 grid: two persons, the second missing its head.
    fn toy_targets() -> SceneTarget {
        let grid = 4;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let instances = (0..2)
            .map(|i| {
                let labels: Vec<u32> = (0..16)
                    .map(|_| {
                        let l = rng.random_range(0..=4u32);
                        if i == 1 && l == 1 {
                            0
                        } else {
                            l
                        }
                    })
                    .collect();
                let part_cells: [Vec<bool>; NUM_PARTS] = std::array::from_fn(|p| labels.iter().map(|&l| l == p as u32 + 1).collect());
                let presence = std::array::from_fn(|p| part_cells[p].iter().any(|&c| c));
                InstanceTarget {
                    bbox: [0.3 + 0.4 * i as f64, 0.5, 0.2, 0.6],
                    presence,
                    foreground: labels.iter().map(|&l| (l != 0) as u8 as f64).collect(),
                    labels,
                    part_cells,
                }
            })
            .collect();
        SceneTarget { grid, instances }
    }

    fn matched() -> MatchedTargets {
        MatchedTargets::build(&[toy_targets()], &[vec![(0, 2), (1, 0)]], 3, DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn phi_matches_loop_oracle() {
        let t = toy_targets();
        let m = matched();
        let reps = rand(&[3, 5, 16], 1);
        let phi = phi_aggregate(&reps, &m).unwrap().to_vec3::<f64>().unwrap();
        let r = reps.to_vec3::<f64>().unwrap();
        for (k, (g, q)) in [(0usize, 2usize), (1, 0)].into_iter().enumerate() {
            for p in 0..NUM_PARTS {
                let cells: Vec<usize> = (0..16).filter(|&x| t.instances[g].part_cells[p][x]).collect();
                for c in 0..5 {
                    let want = if cells.is_empty() { 0.0 } else { cells.iter().map(|&x| r[q][c][x]).sum::<f64>() / cells.len() as f64 };
                    assert!((phi[k][p][c] - want).abs() < 1e-12);
                }
            }
        }
        assert_eq!(m.part_valid.to_vec2::<f64>().unwrap()[1][0], 0.0);
    }

    #[test]
    fn phi_of_constant_field_and_single_cell() {
        let mut t = toy_targets();
        t.instances[0].part_cells[0] = (0..16).map(|x| x == 5).collect();
        let m = MatchedTargets::build(&[t], &[vec![(0, 0)]], 1, DType::F64, &Device::Cpu).unwrap();
        let reps = rand(&[1, 3, 16], 2);
        let phi = phi_aggregate(&reps, &m).unwrap().to_vec3::<f64>().unwrap();
        let r = reps.to_vec3::<f64>().unwrap();
        for c in 0..3 {
            assert_eq!(phi[0][0][c], r[0][c][5]);
        }
        let constant = Tensor::full(0.75f64, (1, 3, 16), &Device::Cpu).unwrap();
        let phi = phi_aggregate(&constant, &m).unwrap().to_vec3::<f64>().unwrap();
        for p in 0..NUM_PARTS {
            if m.part_valid.to_vec2::<f64>().unwrap()[0][p] == 1.0 {
                assert!(phi[0][p].iter().all(|&v| (v - 0.75).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn part_loss_analytic_values() {
        let m = matched();
        let uniform = Tensor::zeros((3, 5, 16), DType::F64, &Device::Cpu).unwrap();
        let ce = mask_cross_entropy(&uniform, &m).unwrap().to_scalar::<f64>().unwrap();
        assert!((ce - 5f64.ln()).abs() < 1e-12);
        let two = loss_part(&[&uniform, &uniform], &m).unwrap().to_scalar::<f64>().unwrap();
        assert!((two - 2.0 * ce).abs() < 1e-12);

        let t = toy_targets();
        let mut perfect = vec![0.0; 3 * 5 * 16];
        for (g, q) in [(0usize, 2usize), (1, 0)] {
            for (x, &l) in t.instances[g].labels.iter().enumerate() {
                perfect[q * 80 + l as usize * 16 + x] = 40.0;
            }
        }
        let perfect = Tensor::from_vec(perfect, (3, 5, 16), &Device::Cpu).unwrap();
        let ce = mask_cross_entropy(&perfect, &m).unwrap().to_scalar::<f64>().unwrap();
        assert!(ce <= 1e-6);
    }

    #[test]
    fn cosine_edge_cases() {
        let a = Tensor::new(&[[1.0f64, 0.0], [1.0, 2.0], [0.0, 0.0], [3.0, -1.0]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[[0.0f64, 5.0], [1.0, 2.0], [1.0, 1.0], [-6.0, 2.0]], &Device::Cpu).unwrap();
        let c = cosine(&a, &b).unwrap().to_vec1::<f64>().unwrap();
        assert!((c[0]).abs() < 1e-12);
        assert!((c[1] - 1.0).abs() < 1e-12);
        assert_eq!(c[2], 0.0);
        assert!((c[3] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_of_identical_reps_is_one_plus_part() {
        let m = matched();
        let p = rand(&[3, 5, 16], 3).relu().unwrap();
        let part = Tensor::new(0.25f64, &Device::Cpu).unwrap();
        let sim = similarity_term(&p, &p, &m).unwrap().to_scalar::<f64>().unwrap();
        assert!((sim - 1.0).abs() < 1e-12);
        let div = loss_div(&p, &p, &part, &m).unwrap().to_scalar::<f64>().unwrap();
        assert!((div - 1.25).abs() < 1e-12);
    }

    #[test]
    fn invariance_values() {
        let m = matched();
        let p = rand(&[3, 5, 16], 4).relu().unwrap();
        let zero_views: Vec<Vec<Tensor>> = Vec::new();
        assert_eq!(loss_inv(&[&p], &zero_views, &m).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let same = loss_inv(&[&p, &p], &[vec![p.clone(), p.clone()]], &m).unwrap();
        assert_eq!(same.to_scalar::<f64>().unwrap(), 0.0);
        let scaled = loss_inv(&[&p], &[vec![(&p * 3.5).unwrap()]], &m).unwrap();
        assert!(scaled.to_scalar::<f64>().unwrap() < 1e-12);

        // Single matched query, single part spread over two cells: the
        // original points along channel 0, one view along channel 1.
        let mut t = toy_targets();
        t.instances.truncate(1);
        t.instances[0].part_cells = std::array::from_fn(|p| (0..16).map(|x| p == 0 && x < 2).collect());
        let m = MatchedTargets::build(&[t], &[vec![(0, 0)]], 1, DType::F64, &Device::Cpu).unwrap();
        let mut orig = vec![0.0; 2 * 16];
        orig[0] = 1.0;
        orig[1] = 1.0;
        let mut ortho = vec![0.0; 2 * 16];
        ortho[16] = 2.0;
        let orig = Tensor::from_vec(orig, (1, 2, 16), &Device::Cpu).unwrap();
        let ortho = Tensor::from_vec(ortho, (1, 2, 16), &Device::Cpu).unwrap();
        let v = loss_inv(&[&orig], &[vec![ortho], vec![orig.clone()]], &m).unwrap();
        assert!((v.to_scalar::<f64>().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn invariance_matches_two_view_oracle() {
        let m = matched();
        let pc = rand(&[3, 5, 16], 5).relu().unwrap();
        let pt = rand(&[3, 5, 16], 6).relu().unwrap();
        let views: Vec<Vec<Tensor>> =
            (0..2).map(|e| vec![rand(&[3, 5, 16], 10 + e).relu().unwrap(), rand(&[3, 5, 16], 20 + e).relu().unwrap()]).collect();
        let got = loss_inv(&[&pc, &pt], &views, &m).unwrap().to_scalar::<f64>().unwrap();

        let t = toy_targets();
        let pool = |r: &Tensor, g: usize, q: usize, p: usize| -> Option<Vec<f64>> {
            let r = r.to_vec3::<f64>().unwrap();
            let cells: Vec<usize> = (0..16).filter(|&x| t.instances[g].part_cells[p][x]).collect();
            if cells.is_empty() {
                return None;
            }
            Some((0..5).map(|c| cells.iter().map(|&x| r[q][c][x]).sum::<f64>() / cells.len() as f64).collect())
        };
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let n = (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|x| x * x).sum::<f64>()).sqrt();
            if n < 1e-6 {
                0.0
            } else {
                dot / n
            }
        };
        let mut want = 0.0;
        for view in &views {
            for (r, orig) in [&pc, &pt].into_iter().enumerate() {
                let mut acc = Vec::new();
                for (g, q) in [(0usize, 2usize), (1, 0)] {
                    for p in 0..NUM_PARTS {
                        if let (Some(a), Some(b)) = (pool(orig, g, q, p), pool(&view[r], g, q, p)) {
                            acc.push((1.0 - cos(&a, &b)).abs());
                        }
                    }
                }
                want += acc.iter().sum::<f64>() / acc.len() as f64;
            }
        }
        want /= views.len() as f64;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn detection_analytic_values() {
        let m = matched();
        let zeros = Tensor::zeros((1, 3, 4), DType::F64, &Device::Cpu).unwrap();
        let class = Tensor::zeros((1, 3, 2), DType::F64, &Device::Cpu).unwrap();
        let terms = loss_det(&class, &zeros, &zeros, &m).unwrap();
        assert!((terms.presence.to_scalar::<f64>().unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((terms.person.to_scalar::<f64>().unwrap() - 2f64.ln()).abs() < 1e-12);

        let t = toy_targets();
        let mut boxes = vec![0.0; 12];
        boxes[8..12].copy_from_slice(&t.instances[0].bbox);
        boxes[0..4].copy_from_slice(&t.instances[1].bbox);
        boxes[1] += 0.3;
        let boxes = Tensor::from_vec(boxes, (1, 3, 4), &Device::Cpu).unwrap();
        let terms = loss_det(&class, &boxes, &zeros, &m).unwrap();
        let want = 0.5 * 0.3f64 * 0.3 / 2.0;
        assert!((terms.bbox.to_scalar::<f64>().unwrap() - want).abs() < 1e-12);

        let big = Tensor::new(&[[3.0f64]], &Device::Cpu).unwrap();
        let sl = smooth_l1(&big, &Tensor::new(&[[0.5f64]], &Device::Cpu).unwrap()).unwrap();
        assert!((sl.to_scalar::<f64>().unwrap() - 2.0).abs() < 1e-12);

        let mut perfect = vec![-30.0; 6];
        for q in [0, 2] {
            perfect[q * 2] = 30.0;
        }
        perfect[2] = -30.0;
        perfect[3] = 30.0;
        let perfect = Tensor::from_vec(perfect, (1, 3, 2), &Device::Cpu).unwrap();
        let person = loss_det(&perfect, &zeros, &zeros, &m).unwrap().person.to_scalar::<f64>().unwrap();
        assert!(person < 1e-9);
    }

    #[test]
    fn total_bookkeeping() {
        let m = matched();
        let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let (total, b) = total_loss(&s(0.5), &s(0.25), Some(&s(-0.125)), Some(&s(0.75)), &LossWeights::default(), &m, 2).unwrap();
        assert_eq!(b.total, total.to_scalar::<f64>().unwrap());
        assert_eq!(b.l_det + b.l_div + b.l_inv, b.total);
        assert_eq!(b.l_div, 0.125);
        let (_, off) = total_loss(&s(0.5), &s(0.25), None, None, &LossWeights::default(), &m, 0).unwrap();
        assert_eq!(off.total, 0.75);
        let (_, zero) = total_loss(&s(0.0), &s(0.0), Some(&s(0.0)), Some(&s(0.0)), &LossWeights::default(), &m, 2).unwrap();
        assert_eq!(zero.total, 0.0);
    }

    #[test]
    fn empty_matching_gives_zero_terms() {
        let t = toy_targets();
        let m = MatchedTargets::build(&[t], &[vec![]], 3, DType::F64, &Device::Cpu).unwrap();
        let logits = rand(&[3, 5, 16], 7);
        assert_eq!(mask_cross_entropy(&logits, &m).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let class = rand(&[1, 3, 2], 8);
        let terms = loss_det(&class, &rand(&[1, 3, 4], 9), &rand(&[1, 3, 4], 10), &m).unwrap();
        assert!(terms.person.to_scalar::<f64>().unwrap() > 0.0);
        assert_eq!(terms.bbox.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let m = matched();
        let logits = rand(&[3, 5, 16], 11);
        let err = max_grad_error(&logits, 60, |x| loss_part(&[x, &(x * 0.5).unwrap()], &m).unwrap());
        assert!(err < 1e-3, "part {err}");

        let pc = (rand(&[3, 8, 16], 12) + 1.5).unwrap();
        let pt = (rand(&[3, 8, 16], 13) + 1.5).unwrap();
        let part = loss_part(&[&logits], &m).unwrap();
        let err = max_grad_error(&pc, 60, |x| loss_div(x, &pt, &part, &m).unwrap());
        assert!(err < 1e-3, "div {err}");

        let views = vec![vec![(rand(&[3, 8, 16], 14) + 1.5).unwrap()], vec![(rand(&[3, 8, 16], 15) + 1.5).unwrap()]];
        let err = max_grad_error(&pc, 60, |x| loss_inv(&[x], &views, &m).unwrap());
        assert!(err < 1e-3, "inv original {err}");
        let err = max_grad_error(&views[0][0], 60, |x| loss_inv(&[&pc], &[vec![x.clone()], views[1].clone()], &m).unwrap());
        assert!(err < 1e-3, "inv view {err}");

        let class = rand(&[1, 3, 2], 16);
        let boxes = rand(&[1, 3, 4], 17).affine(0.3, 0.5).unwrap();
        let parts = rand(&[1, 3, 4], 18);
        let err = max_grad_error(&class, 6, |x| loss_det(x, &boxes, &parts, &m).unwrap().total().unwrap());
        assert!(err < 1e-3, "det class {err}");
        let err = max_grad_error(&boxes, 12, |x| loss_det(&class, x, &parts, &m).unwrap().total().unwrap());
        assert!(err < 1e-3, "det box {err}");
        let err = max_grad_error(&parts, 12, |x| loss_det(&class, &boxes, x, &m).unwrap().total().unwrap());
        assert!(err < 1e-3, "det presence {err}");
    }
}
