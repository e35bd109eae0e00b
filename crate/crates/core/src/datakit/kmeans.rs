use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AnydError, Result};

pub const MAX_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    /// Sum of squared distances to the assigned centroid after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn sq(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn assign(points: &[[f64; 2]], centroids: &[[f64; 2]]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let assignments = points
        .iter()
        .map(|&p| {
            let mut best = (0, sq(p, centroids[0]));
            for (k, &c) in centroids.iter().enumerate().skip(1) {
                let d = sq(p, c);
                if d < best.1 {
                    best = (k, d);
                }
            }
            total += best.1;
            best.0
        })
        .collect();
    (assignments, total)
}

/// Lloyd iterations from the given centroids until the assignment stops
/// changing or [`MAX_ITERATIONS`] is reached. A centroid that loses all its
/// points stays where it was.
pub fn lloyd(points: &[[f64; 2]], initial: Vec<[f64; 2]>) -> Result<KMeansResult> {
    if points.is_empty() || initial.is_empty() {
        return Err(AnydError::invalid("k-means needs points and centroids"));
    }
    let mut centroids = initial;
    let (mut assignments, obj) = assign(points, &centroids);
    let mut objective = vec![obj];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![[0.0, 0.0]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &a) in points.iter().zip(&assignments) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        for ((c, s), &n) in centroids.iter_mut().zip(&sums).zip(&counts) {
            if n > 0 {
                *c = [s[0] / n as f64, s[1] / n as f64];
            }
        }
        let (next, obj) = assign(points, &centroids);
        objective.push(obj);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(KMeansResult { assignments, centroids, objective, iterations })
}

/// Lloyd's algorithm seeded with `k` distinct input points chosen by `seed`.
pub fn kmeans_cluster(points: &[[f64; 2]], k: usize, seed: u64) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(AnydError::Data("k-means on an empty point set".into()));
    }
    if k == 0 || k > points.len() {
        return Err(AnydError::invalid(format!("k = {k} for {} points", points.len())));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AnydError::Data("non-finite point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, points.len(), k).into_vec();
    picks.sort_unstable();
    lloyd(points, picks.iter().map(|&i| points[i]).collect())
}
