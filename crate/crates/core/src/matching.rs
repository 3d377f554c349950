//! One-to-one assignment of ground-truth persons to queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchWeights {
    pub class: f64,
    pub bbox: f64,
    pub mask: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights { class: 2.0, bbox: 5.0, mask: 2.0 }
    }
}

/// Minimum-cost assignment of every row to a distinct column. `cost` is
/// row-major with `rows <= cols`. Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("cost matrix rows differ in length".into()));
    }
    if n > m {
        return Err(Error::TooManyInstances { count: n, queries: m });
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    // Shortest augmenting paths with potentials; index 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Optimal assignment with deterministic tie-breaking: rows are fixed in
/// order, each to the lowest column that still admits an optimal completion.
/// Returns `(row, column)` pairs sorted by row.
pub fn match_instances(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let best = hungarian(cost)?;
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let optimum = assignment_cost(cost, &best);
    let tol = TIE_EPS * (1.0 + optimum.abs());
    let m = cost[0].len();
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(n);
    let mut fixed_cost = 0.0;
    for row in 0..n {
        let taken: Vec<usize> = fixed.iter().map(|&(_, c)| c).collect();
        let free_cols: Vec<usize> = (0..m).filter(|c| !taken.contains(c)).collect();
        let mut chosen = None;
        for &col in &free_cols {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != col).collect();
            let rest: Vec<Vec<f64>> = ((row + 1)..n).map(|r| rest_cols.iter().map(|&c| cost[r][c]).collect()).collect();
            let rest_cost = assignment_cost(&rest, &hungarian(&rest)?);
            if fixed_cost + cost[row][col] + rest_cost <= optimum + tol {
                chosen = Some(col);
                break;
            }
        }
        let col = chosen.expect("the optimal assignment admits a completion");
        fixed_cost += cost[row][col];
        fixed.push((row, col));
    }
    Ok(fixed)
}

/// Soft IoU between a predicted foreground probability map and a binary
/// target of the same length. Two empty maps score 1.
pub fn soft_iou(pred: &[f64], target: &[f64]) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        union += p + t - p * t;
    }
    if union <= 0.0 {
        1.0
    } else {
        inter / union
    }
}

/// Predictions for one image, all at feature resolution.
#[derive(Debug, Clone)]
pub struct QueryPredictions<'a> {
    pub person_prob: &'a [f64],
    pub boxes: &'a [[f64; 4]],
    /// Per-query foreground probability maps.
    pub foreground: &'a [Vec<f64>],
}

/// Targets for one image.
#[derive(Debug, Clone)]
pub struct PersonTargets<'a> {
    pub boxes: &'a [[f64; 4]],
    pub foreground: &'a [Vec<f64>],
}

/// Cost matrix with one row per target person and one column per query.
pub fn matching_cost(pred: &QueryPredictions, gt: &PersonTargets, w: &MatchWeights) -> Vec<Vec<f64>> {
    gt.boxes
        .iter()
        .zip(gt.foreground)
        .map(|(gb, gf)| {
            (0..pred.person_prob.len())
                .map(|q| {
                    let l1: f64 = pred.boxes[q].iter().zip(gb).map(|(a, b)| (a - b).abs()).sum();
                    -w.class * pred.person_prob[q] + w.bbox * l1 + w.mask * (1.0 - soft_iou(&pred.foreground[q], gf))
                })
                .collect()
        })
        .collect()
}
