use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RaplError, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            seed: 0,
            max_iters: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("at least one assignment step")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check(points: &Tensor, k: usize) -> Result<(usize, usize)> {
    let (n, d) = match points.shape() {
        [n, d] => (*n, *d),
        s => return Err(RaplError::Dimension(format!("k-means expects N×d points, got {s:?}"))),
    };
    if k == 0 {
        return Err(RaplError::InvalidArgument("k-means needs K ≥ 1".into()));
    }
    if n < k {
        return Err(RaplError::InvalidArgument(format!(
            "k-means with K = {k} needs at least {k} points, got {n}"
        )));
    }
    Ok((n, d))
}

/// k-means++ seeding: first centre uniform, later ones drawn with probability
/// proportional to the squared distance to the nearest chosen centre.
pub fn kmeans_pp_init(points: &Tensor, k: usize, seed: u64) -> Result<Tensor> {
    let (n, d) = check(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // every point coincides with a centre already
            (0..n).find(|i| !chosen.contains(i)).expect("n ≥ k")
        };
        chosen.push(next);
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let data = chosen.iter().flat_map(|&i| points.row(i).iter().copied()).collect();
    Tensor::new(vec![k, d], data)
}

/// Nearest centroid per point (ties to the lower index) and the objective.
pub fn assign(points: &Tensor, centroids: &Tensor) -> (Vec<usize>, f64) {
    let k = centroids.rows();
    let mut objective = 0.0;
    let assignments = (0..points.rows())
        .map(|i| {
            let p = points.row(i);
            let (best, dist) = (0..k)
                .map(|c| (c, sq_dist(p, centroids.row(c))))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            objective += dist;
            best
        })
        .collect();
    (assignments, objective)
}

/// Lloyd iterations from given centroids.
pub fn lloyd(points: &Tensor, init: Tensor, opts: &KMeansOptions) -> Result<KMeansResult> {
    let k = init.rows();
    let (n, d) = check(points, k)?;
    if init.shape() != [k, d] {
        return Err(RaplError::Dimension("initial centroids do not match the points".into()));
    }
    let mut centroids = init;
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let (mut assignments, objective) = assign(points, &centroids);
        history.push(objective);

        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&a| counts[a] += 1);
        // Empty clusters adopt the point farthest from its current centroid.
        for empty in 0..k {
            if counts[empty] != 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .map(|i| (i, sq_dist(points.row(i), centroids.row(assignments[i]))))
                .fold((usize::MAX, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc })
                .0;
            counts[assignments[far]] -= 1;
            assignments[far] = empty;
            counts[empty] = 1;
        }

        let mut next = vec![0.0; k * d];
        for (i, &a) in assignments.iter().enumerate() {
            next[a * d..(a + 1) * d]
                .iter_mut()
                .zip(points.row(i))
                .for_each(|(c, p)| *c += p);
        }
        for (c, &count) in counts.iter().enumerate() {
            next[c * d..(c + 1) * d].iter_mut().for_each(|v| *v /= count as f64);
        }
        let next = Tensor::new(vec![k, d], next)?;
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < opts.tol {
            break;
        }
    }
    let (assignments, objective) = assign(points, &centroids);
    history.push(objective);
    Ok(KMeansResult {
        centroids,
        assignments,
        objective_history: history,
        iterations,
    })
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &Tensor, k: usize, opts: &KMeansOptions) -> Result<KMeansResult> {
    let init = kmeans_pp_init(points, k, opts.seed)?;
    lloyd(points, init, opts)
}
