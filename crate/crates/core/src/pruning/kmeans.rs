//! Lloyd's k-means with k-means++ seeding, used to merge patch embeddings.
//!
//! Lloyd's iteration stops at local optima, so [`kmeans`] runs several
//! seedings from the same random stream and keeps the lowest WCSS.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{MatrixRef, TensorOf};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once an iteration improves WCSS by less than this.
    pub tol: f64,
    /// Independent seedings; the best final WCSS wins.
    pub restarts: usize,
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    /// `k * d` row-major centroids.
    pub centroids: Vec<f64>,
    pub dim: usize,
    pub assignments: Vec<usize>,
    /// WCSS after seeding, then after each Lloyd iteration, for the kept run.
    pub wcss_trace: Vec<f64>,
    pub iterations: usize,
    /// Which restart was kept (0-based).
    pub best_restart: usize,
}

impl KMeansFit {
    pub fn wcss(&self) -> f64 {
        *self.wcss_trace.last().expect("trace is never empty")
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

#[inline]
fn sq_dist<S: Scalar>(x: &[S], c: &[f64]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(&a, &b)| {
            let d: f64 = a.as_() - b;
            d * d
        })
        .sum()
}

/// Nearest centroid for every point, ties to the lower centroid index.
fn assign<S: Scalar>(
    points: MatrixRef<'_, S>,
    centroids: &[f64],
    k: usize,
    labels: &mut [usize],
    dists: &mut [f64],
) {
    let d = points.cols();
    for (i, x) in points.iter_rows().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let dist = sq_dist(x, &centroids[c * d..(c + 1) * d]);
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        labels[i] = best;
        dists[i] = best_d;
    }
}

fn seed_plus_plus<S: Scalar>(points: MatrixRef<'_, S>, k: usize, r: &mut impl RngCore) -> Vec<f64> {
    let n = points.rows();
    let d = points.cols();
    let mut centroids = Vec::with_capacity(k * d);
    let mut chosen = vec![false; n];
    let push = |centroids: &mut Vec<f64>, i: usize| {
        centroids.extend(points.row(i).iter().map(|&v| -> f64 { v.as_() }));
    };
    let first = rng::below(r, n as u64) as usize;
    chosen[first] = true;
    push(&mut centroids, first);
    let mut nearest: Vec<f64> = points
        .iter_rows()
        .map(|x| sq_dist(x, &centroids[..d]))
        .collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng::unit_f64(r) * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just above the accumulated total
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every point coincides with a centroid
            chosen.iter().position(|c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        let start = centroids.len();
        push(&mut centroids, pick);
        for (i, x) in points.iter_rows().enumerate() {
            let dist = sq_dist(x, &centroids[start..start + d]);
            if dist < nearest[i] {
                nearest[i] = dist;
            }
        }
    }
    centroids
}

/// Runs k-means on the rows of `points`. Deterministic for a given `r` state.
///
/// Ties between restarts keep the earlier one.
pub fn kmeans<S: Scalar>(
    points: MatrixRef<'_, S>,
    params: KMeansParams,
    r: &mut impl RngCore,
) -> Result<KMeansFit> {
    let n = points.rows();
    let k = params.k;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cluster count {k} out of range 1..={n}")));
    }
    if params.restarts == 0 {
        return Err(Error::invalid("k-means needs at least one restart"));
    }
    let mut best = lloyd(points, params, r);
    for restart in 1..params.restarts {
        let mut fit = lloyd(points, params, r);
        if fit.wcss() < best.wcss() {
            fit.best_restart = restart;
            best = fit;
        }
    }
    Ok(best)
}

fn lloyd<S: Scalar>(points: MatrixRef<'_, S>, params: KMeansParams, r: &mut impl RngCore) -> KMeansFit {
    let n = points.rows();
    let d = points.cols();
    let k = params.k;
    let mut centroids = seed_plus_plus(points, k, r);
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    assign(points, &centroids, k, &mut labels, &mut dists);
    let mut trace = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];

    while iterations < params.max_iters {
        iterations += 1;
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for (i, x) in points.iter_rows().enumerate() {
            let c = labels[i];
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(x) {
                *s += v.as_();
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = counts[c] as f64;
                for (dst, s) in centroids[c * d..(c + 1) * d].iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s / inv;
                }
            }
        }
        // empty clusters take the point farthest from its centroid
        for c in 0..k {
            if counts[c] == 0 {
                let (far, far_d) = dists
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                if far_d <= 0.0 {
                    continue;
                }
                for (dst, &v) in centroids[c * d..(c + 1) * d].iter_mut().zip(points.row(far)) {
                    *dst = v.as_();
                }
                counts[labels[far]] -= 1;
                counts[c] = 1;
                labels[far] = c;
                dists[far] = 0.0;
            }
        }
        assign(points, &centroids, k, &mut labels, &mut dists);
        let wcss: f64 = dists.iter().sum();
        let prev = *trace.last().unwrap();
        trace.push(wcss);
        if prev - wcss < params.tol {
            break;
        }
    }

    KMeansFit {
        centroids,
        dim: d,
        assignments: labels,
        wcss_trace: trace,
        iterations,
        best_restart: 0,
    }
}

/// Merges `[N, d]` embeddings into exactly `k` centroids.
pub fn kmeans_merge<S: Scalar>(
    embeddings: &TensorOf<S>,
    params: KMeansParams,
    seed: u64,
    doc_id: &str,
) -> Result<(TensorOf<S>, KMeansFit)> {
    let m = embeddings.matrix()?;
    let mut r = rng::stream(seed, doc_id);
    let fit = kmeans(m, params, &mut r)?;
    let data = fit.centroids.iter().map(|&v| S::from_f64_lossy(v)).collect();
    let merged = TensorOf::new(vec![params.k, m.cols()], data)?;
    Ok((merged, fit))
}
