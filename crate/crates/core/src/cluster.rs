//! Spectral clustering of the affinity matrix with Davies-Bouldin selection of
//! the number of clusters.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::{AffinityMatrix, InteractionState};
use crate::linalg::{symmetric_eigen, Matrix, SymmetricEigen};
use crate::rng::{derive_seed, rng_from, tag};
use crate::{ClientId, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once the relative inertia decrease falls below this value.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest-inertia run is kept.
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-6, restarts: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit<T> {
    pub labels: Vec<usize>,
    pub centroids: Matrix<T>,
    pub inertia: T,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    sq_dist(a, b).sqrt()
}

/// Nearest centroid, lowest index on ties.
fn nearest<T: Scalar>(p: &[T], centroids: &Matrix<T>) -> (usize, T) {
    let mut best = (0, sq_dist(p, centroids.row(0)));
    for c in 1..centroids.rows() {
        let d = sq_dist(p, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Renumber labels by order of first appearance.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

fn kmeans_once<T: Scalar>(points: &Matrix<T>, k: usize, seed: u64, params: &KMeansParams) -> KMeansFit<T> {
    let n = points.rows();
    let d = points.cols();
    let mut rng = rng_from(seed, &[]);

    // k-means++ seeding
    let mut centroids = Matrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<T> = points.iter_rows().map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: T = d2.iter().copied().sum();
        let pick = if total > T::zero() {
            let target = T::of(rng.random::<f64>()) * total;
            let mut acc = T::zero();
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > T::zero() {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            let nd = sq_dist(p, centroids.row(c));
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }

    let mut labels = vec![0usize; n];
    let mut inertia = T::infinity();
    for _ in 0..params.max_iter {
        let mut current = T::zero();
        for (i, p) in points.iter_rows().enumerate() {
            let (c, dd) = nearest(p, &centroids);
            labels[i] = c;
            current += dd;
        }
        // recompute centroids; an empty cluster takes the point farthest
        // from its assigned centroid
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter_rows().enumerate() {
            counts[labels[i]] += 1;
            for (s, &x) in sums.row_mut(labels[i]).iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n).filter(|&i| counts[labels[i]] > 1).map(|i| (i, sq_dist(points.row(i), centroids.row(labels[i])))).fold(
                    None,
                    |best: Option<(usize, T)>, (i, dd)| match best {
                        Some((_, bd)) if bd >= dd => best,
                        _ => Some((i, dd)),
                    },
                );
                if let Some((i, _)) = far {
                    counts[labels[i]] -= 1;
                    for (s, &x) in sums.row_mut(labels[i]).iter_mut().zip(points.row(i)) {
                        *s -= x;
                    }
                    labels[i] = c;
                    counts[c] = 1;
                    sums.row_mut(c).copy_from_slice(points.row(i));
                }
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let inv = T::one() / T::of_usize(count);
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        let done = inertia.is_finite() && (inertia - current) <= T::of(params.tol) * inertia;
        inertia = current;
        if done || current == T::zero() {
            break;
        }
    }
    // final assignment against the final centroids
    let mut total = T::zero();
    for (i, p) in points.iter_rows().enumerate() {
        let (c, dd) = nearest(p, &centroids);
        labels[i] = c;
        total += dd;
    }
    KMeansFit { labels, centroids, inertia: total }
}

/// Seeded k-means with k-means++ initialisation and restarts.
///
/// Labels are renumbered by order of first appearance.
pub fn kmeans<T: Scalar>(points: &Matrix<T>, k: usize, seed: u64, params: &KMeansParams) -> Result<KMeansFit<T>> {
    if k == 0 || k > points.rows() {
        return Err(Error::domain(format!("cannot form {k} clusters from {} points", points.rows())));
    }
    let mut best: Option<KMeansFit<T>> = None;
    for r in 0..params.restarts.max(1) {
        let fit = kmeans_once(points, k, derive_seed(seed, &[tag::KMEANS, r as u64]), params);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    let mut fit = best.expect("at least one restart");
    let canon = canonical_labels(&fit.labels);
    let mut centroids = Matrix::zeros(k, points.cols());
    for (old, new) in fit.labels.iter().zip(&canon) {
        centroids.row_mut(*new).copy_from_slice(fit.centroids.row(*old));
    }
    fit.labels = canon;
    fit.centroids = centroids;
    Ok(fit)
}

/// Eigendecomposition of `D^{-1/2} W D^{-1/2}`, reusable across cluster counts.
#[derive(Debug, Clone)]
pub struct SpectralEmbedding<T> {
    pub eigen: SymmetricEigen<T>,
}

impl<T: Scalar> SpectralEmbedding<T> {
    pub fn new(affinity: &AffinityMatrix<T>) -> Result<Self> {
        let w = &affinity.w;
        if !w.is_symmetric() {
            return Err(Error::domain("affinity matrix must be exactly symmetric"));
        }
        let n = w.rows();
        let inv_sqrt: Vec<T> = w
            .iter_rows()
            .map(|r| {
                let deg: T = r.iter().copied().sum();
                if deg > T::zero() {
                    T::one() / deg.sqrt()
                } else {
                    T::zero()
                }
            })
            .collect();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = w[(i, j)] * (inv_sqrt[i] * inv_sqrt[j]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(Self { eigen: symmetric_eigen(&m)? })
    }

    /// Leading `n` eigenvectors as rows, each scaled to unit length.
    pub fn embedding(&self, n: usize) -> Matrix<T> {
        let rows = self.eigen.vectors.rows();
        let mut out = Matrix::zeros(rows, n);
        for i in 0..rows {
            let row = &self.eigen.vectors.row(i)[..n];
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm > T::zero() {
                for (dst, &x) in out.row_mut(i).iter_mut().zip(row) {
                    *dst = x / norm;
                }
            }
        }
        out
    }

    pub fn labels(&self, n: usize, seed: u64, params: &KMeansParams) -> Result<Vec<usize>> {
        let k = self.eigen.values.len();
        if n < 2 || n >= k {
            return Err(Error::domain(format!("cluster count {n} must satisfy 2 <= n < {k}")));
        }
        Ok(kmeans(&self.embedding(n), n, seed, params)?.labels)
    }
}

/// Normalised spectral clustering into `n` groups.
pub fn spectral_clustering<T: Scalar>(affinity: &AffinityMatrix<T>, n: usize, seed: u64) -> Result<Vec<usize>> {
    let k = affinity.len();
    if n < 2 || n >= k {
        return Err(Error::domain(format!("cluster count {n} must satisfy 2 <= n < {k}")));
    }
    SpectralEmbedding::new(affinity)?.labels(n, seed, &KMeansParams::default())
}

/// Davies-Bouldin index of a labelling of the rows of `features`.
///
/// Returns `+∞` when two centroids coincide.
pub fn davies_bouldin<T: Scalar>(features: &Matrix<T>, labels: &[usize]) -> Result<T> {
    if labels.len() != features.rows() {
        return Err(Error::shape(format!("{} labels for {} feature rows", labels.len(), features.rows())));
    }
    let n_cl = labels.iter().max().map_or(0, |m| m + 1);
    if n_cl < 2 {
        return Err(Error::domain("Davies-Bouldin needs at least two clusters"));
    }
    let d = features.cols();
    let mut centroids = Matrix::zeros(n_cl, d);
    let mut counts = vec![0usize; n_cl];
    for (row, &l) in features.iter_rows().zip(labels) {
        counts[l] += 1;
        for (c, &x) in centroids.row_mut(l).iter_mut().zip(row) {
            *c += x;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::domain(format!("cluster {empty} is empty")));
    }
    for (c, &count) in counts.iter().enumerate() {
        let inv = T::one() / T::of_usize(count);
        centroids.row_mut(c).iter_mut().for_each(|x| *x *= inv);
    }
    let mut scatter = vec![T::zero(); n_cl];
    for (row, &l) in features.iter_rows().zip(labels) {
        scatter[l] += dist(row, centroids.row(l));
    }
    for (s, &count) in scatter.iter_mut().zip(&counts) {
        *s /= T::of_usize(count);
    }
    let mut total = T::zero();
    for i in 0..n_cl {
        let mut worst = T::neg_infinity();
        for j in 0..n_cl {
            if i == j {
                continue;
            }
            let sep = dist(centroids.row(i), centroids.row(j));
            let r = if sep > T::zero() { (scatter[i] + scatter[j]) / sep } else { T::infinity() };
            worst = worst.max(r);
        }
        total += worst;
    }
    Ok(total / T::of_usize(n_cl))
}

/// Result of one cluster-splitting decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringOutcome<T> {
    pub labels: BTreeMap<ClientId, usize>,
    pub n_cl: usize,
    /// Davies-Bouldin value of every candidate count that was evaluated.
    pub db_scores: BTreeMap<usize, T>,
    /// Evaluated candidates discarded because a group fell below `k_min`.
    pub rejected: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams<T> {
    pub beta: T,
    pub n_max: usize,
    pub k_min: usize,
    pub seed: u64,
    pub kmeans: KMeansParams,
}

/// Decide whether and how to split a cluster from its interaction matrix.
///
/// Candidate counts run over `2..=min(n_max, K_c − 1)`; counts that cannot
/// give every group `k_min` members are skipped without evaluation. A
/// candidate whose labelling has a group smaller than `k_min` is rejected.
/// Among the rest the lowest Davies-Bouldin value wins (lowest count on
/// ties), and the split is vetoed when that value exceeds 1.
pub fn fedgw_cluster<T: Scalar>(state: &InteractionState<T>, params: &ClusterParams<T>) -> Result<ClusteringOutcome<T>> {
    let k_c = state.len();
    if k_c < 3 {
        return Err(Error::ClusterTooSmall(k_c));
    }
    if params.n_max < 2 {
        return Err(Error::config(format!("n_max = {} must be at least 2", params.n_max)));
    }
    let affinity = state.build_affinity(params.beta)?;
    let hi = params.n_max.min(k_c - 1);
    let feasible: Vec<usize> = (2..=hi).filter(|&n| n * params.k_min.max(1) <= k_c).collect();

    let mut db_scores = BTreeMap::new();
    let mut rejected = Vec::new();
    let mut best: Option<(usize, T, Vec<usize>)> = None;
    if !feasible.is_empty() {
        let embedding = SpectralEmbedding::new(&affinity)?;
        for &n in &feasible {
            let labels = embedding.labels(n, derive_seed(params.seed, &[tag::CLUSTERING, n as u64]), &params.kmeans)?;
            let db = davies_bouldin(&affinity.w, &labels)?;
            db_scores.insert(n, db);
            let mut sizes = vec![0usize; n];
            labels.iter().for_each(|&l| sizes[l] += 1);
            if sizes.iter().any(|&s| s < params.k_min) {
                rejected.push(n);
                continue;
            }
            if best.as_ref().is_none_or(|(_, b, _)| db < *b) {
                best = Some((n, db, labels));
            }
        }
    }
    let (n_cl, labels) = match best {
        Some((n, db, labels)) if db <= T::one() => (n, labels),
        _ => (1, vec![0; k_c]),
    };
    Ok(ClusteringOutcome { labels: state.clients().iter().copied().zip(labels).collect(), n_cl, db_scores, rejected })
}
