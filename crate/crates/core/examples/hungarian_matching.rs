//! Match predicted queries to ground-truth persons, and compare the
//! Hungarian solver with exhaustive search on random matrices.
//!
//!     cargo run --release --example hungarian_matching

use hparse::matching::{assignment_cost, hungarian, match_instances, matching_cost, MatchWeights, PersonTargets, QueryPredictions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn exhaustive(cost: &[Vec<f64>], row: usize, used: &mut [bool]) -> f64 {
    if row == cost.len() {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for c in 0..used.len() {
        if !used[c] {
            used[c] = true;
            best = best.min(cost[row][c] + exhaustive(cost, row + 1, used));
            used[c] = false;
        }
    }
    best
}

fn main() -> hparse::Result<()> {
    // Two persons on a 4x4 grid, three queries.
    let left = vec![1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.];
    let right: Vec<f64> = left.iter().rev().copied().collect();
    let preds_fg = vec![right.clone(), vec![0.1; 16], left.clone()];
    let pred = QueryPredictions {
        person_prob: &[0.9, 0.2, 0.8],
        boxes: &[[0.75, 0.75, 0.5, 0.5], [0.5, 0.5, 0.2, 0.2], [0.25, 0.25, 0.5, 0.5]],
        foreground: &preds_fg,
    };
    let gt = PersonTargets { boxes: &[[0.25, 0.25, 0.5, 0.5], [0.75, 0.75, 0.5, 0.5]], foreground: &[left, right] };
    let cost = matching_cost(&pred, &gt, &MatchWeights::default());
    for (i, row) in cost.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:7.3}")).collect();
        println!("person {i}: {}", cells.join(" "));
    }
    println!("assignment (person, query): {:?}", match_instances(&cost)?);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=5);
        let m = rng.random_range(n..=6);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let fast = assignment_cost(&cost, &hungarian(&cost)?);
        worst = worst.max((fast - exhaustive(&cost, 0, &mut vec![false; m])).abs());
    }
    println!("200 random matrices: largest gap to exhaustive search {worst:.2e}");
    Ok(())
}
