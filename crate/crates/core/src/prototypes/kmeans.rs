//! Lloyd's k-means with k-means++ seeding and seeded restarts.

use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::rng::{rng_for, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub tol: f64,
    /// Independent k-means++ initializations; the lowest-SSE run wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index of every input point.
    pub labels: Vec<usize>,
    /// Within-cluster sum of squared distances.
    pub sse: f64,
    pub iterations: usize,
    /// SSE after every assignment step of the winning run.
    pub history: Vec<f64>,
    /// Set when fewer points than requested clusters forced `k` down.
    pub clamped: bool,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest_centroid(centroids: &[Vec<f64>], z: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, z);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize]) -> f64 {
    let mut sse = 0.0;
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        *l = nearest_centroid(centroids, p).expect("at least one centroid");
        sse += sq_dist(p, &centroids[*l]);
    }
    sse
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            // guard against rounding landing on an already chosen point
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn lloyd(
    points: &[Vec<f64>],
    mut centroids: Vec<Vec<f64>>,
    cfg: &KMeansConfig,
) -> (Vec<Vec<f64>>, Vec<usize>, f64, usize, Vec<f64>) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels = vec![0; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        history.push(assign(points, &centroids, &mut labels));

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .zip(&centroids)
            .map(|((s, &c), old)| {
                if c == 0 {
                    old.clone()
                } else {
                    s.into_iter().map(|v| v / c as f64).collect()
                }
            })
            .collect();

        // empty clusters take the points farthest from their centroids
        let mut used = vec![false; points.len()];
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = (0..points.len()).filter(|&i| !used[i]).max_by(|&a, &b| {
                let da = sq_dist(&points[a], &centroids[labels[a]]);
                let db = sq_dist(&points[b], &centroids[labels[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            });
            if let Some(i) = far {
                used[i] = true;
                next[j] = points[i].clone();
            }
        }

        let shift = next
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < cfg.tol {
            break;
        }
    }
    assign(points, &centroids, &mut labels);
    hartigan(points, &mut centroids, &mut labels);
    let sse = assign(points, &centroids, &mut labels);
    history.push(sse);
    (centroids, labels, sse, iterations, history)
}

fn mean_of(points: &[Vec<f64>], labels: &[usize], j: usize, dim: usize) -> (Vec<f64>, usize) {
    let mut sum = vec![0.0; dim];
    let mut n = 0;
    for (p, _) in points.iter().zip(labels).filter(|(_, &l)| l == j) {
        sum.iter_mut().zip(p).for_each(|(s, v)| *s += v);
        n += 1;
    }
    if n > 0 {
        sum.iter_mut().for_each(|s| *s /= n as f64);
    }
    (sum, n)
}

/// Single-point transfers: move a point to another cluster whenever that
/// strictly lowers the SSE, i.e. `n_j/(n_j+1) d(x,c_j)^2 < n_i/(n_i-1) d(x,c_i)^2`.
/// Escapes Lloyd fixed points that are not local optima under point moves.
fn hartigan(points: &[Vec<f64>], centroids: &mut [Vec<f64>], labels: &mut [usize]) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut sizes = vec![0usize; k];
    for j in 0..k {
        let (c, n) = mean_of(points, labels, j, dim);
        sizes[j] = n;
        if n > 0 {
            centroids[j] = c;
        }
    }
    // each accepted move lowers the SSE, so this only bounds float noise
    for _ in 0..100 * points.len() {
        let mut moved = false;
        for (x, p) in points.iter().enumerate() {
            let from = labels[x];
            if sizes[from] < 2 {
                continue;
            }
            let n_from = sizes[from] as f64;
            let remove = n_from / (n_from - 1.0) * sq_dist(p, &centroids[from]);
            let best = (0..k)
                .filter(|&j| j != from)
                .map(|j| {
                    let n = sizes[j] as f64;
                    (j, n / (n + 1.0) * sq_dist(p, &centroids[j]))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            if let Some((to, add)) = best {
                if add < remove * (1.0 - 1e-12) {
                    labels[x] = to;
                    sizes[from] -= 1;
                    sizes[to] += 1;
                    centroids[from] = mean_of(points, labels, from, dim).0;
                    centroids[to] = mean_of(points, labels, to, dim).0;
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
}

/// Clusters `points` into `k` groups. `k` is clamped to the number of points
/// (flagged in the result). Deterministic for a fixed seed.
pub fn kmeans_with(points: &[Vec<f64>], k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(invalid("k-means needs at least one point"));
    }
    if k == 0 {
        return Err(invalid("k-means needs k >= 1"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(invalid("k-means points must share one dimension"));
    }
    let clamped = k > points.len();
    let k = k.min(points.len());

    let mut best: Option<KMeansResult> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = rng_for(seed, &[restart as u64]);
        let init = plus_plus_init(points, k, &mut rng);
        let (centroids, labels, sse, iterations, history) = lloyd(points, init, cfg);
        if best.as_ref().is_none_or(|b| sse < b.sse) {
            best = Some(KMeansResult {
                centroids,
                labels,
                sse,
                iterations,
                history,
                clamped,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeansResult> {
    kmeans_with(
        points,
        k,
        seed,
        &KMeansConfig {
            max_iters,
            tol,
            ..Default::default()
        },
    )
}
