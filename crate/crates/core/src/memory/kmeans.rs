//! Lloyd's k-means with farthest-first seeding.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::ndgrad::kernels::sq_dist;
use crate::seed;

/// Number of seeded farthest-first restarts; the lowest-SSE run wins.
pub const RESTARTS: usize = 16;

/// Clusters `points` into at most `r` centroids.
///
/// When there are no more points than clusters the points themselves are
/// returned. Otherwise each restart picks a distinct seeded first center
/// (every point when there are at most [`RESTARTS`]), adds the
/// point farthest from the chosen centers until there are `r`, then runs
/// Lloyd iterations until assignments stop changing or `max_iters` is hit.
/// An emptied cluster is re-seeded with the point farthest from its own
/// centroid. All ties resolve to the lower index.
pub fn kmeans(points: &[Vec<f64>], r: usize, seed: u64, max_iters: usize) -> Result<Vec<Vec<f64>>> {
    if r == 0 {
        return Err(Error::invalid("kmeans: r must be at least 1"));
    }
    if points.is_empty() {
        return Err(Error::invalid("kmeans: no points"));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("kmeans: points have different dimensions"));
    }
    if points.len() <= r {
        return Ok(points.to_vec());
    }
    let mut rng = seed::rng(seed);
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for first in sample(&mut rng, points.len(), RESTARTS.min(points.len())) {
        let centers = lloyd(points, farthest_first(points, r, first), max_iters);
        let cost = sse(points, &centers);
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, centers));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn farthest_first(points: &[Vec<f64>], r: usize, first: usize) -> Vec<Vec<f64>> {
    let mut centers = vec![points[first].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centers.len() < r {
        let mut far = 0;
        for (i, &v) in nearest.iter().enumerate() {
            if v > nearest[far] {
                far = i;
            }
        }
        let c = points[far].clone();
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

fn nearest_center(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let dd = sq_dist(p, c);
        if dd < best_d {
            best = i;
            best_d = dd;
        }
    }
    best
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iters: usize) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let r = centers.len();
    let mut assign: Vec<usize> = vec![usize::MAX; points.len()];
    for _ in 0..max_iters.max(1) {
        let next: Vec<usize> = points.iter().map(|p| nearest_center(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
        loop {
            let mut sums = vec![vec![0.0; d]; r];
            let mut counts = vec![0usize; r];
            for (p, &a) in points.iter().zip(&assign) {
                counts[a] += 1;
                for (s, v) in sums[a].iter_mut().zip(p) {
                    *s += v;
                }
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                for (c, (s, n)) in centers.iter_mut().zip(sums.into_iter().zip(counts)) {
                    *c = s.into_iter().map(|v| v / n as f64).collect();
                }
                break;
            };
            // the point worst served by its current centroid moves to the empty cluster
            let mut worst = None;
            let mut worst_d = -1.0;
            for (i, (p, &a)) in points.iter().zip(&assign).enumerate() {
                if counts[a] < 2 {
                    continue;
                }
                let dd = sq_dist(p, &centers[a]);
                if dd > worst_d {
                    worst = Some(i);
                    worst_d = dd;
                }
            }
            let w = worst.expect("more points than clusters");
            centers[empty] = points[w].clone();
            assign[w] = empty;
        }
    }
    centers
}

/// Within-cluster sum of squared distances to the nearest centroid.
pub fn sse(points: &[Vec<f64>], centers: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
        .sum()
}
