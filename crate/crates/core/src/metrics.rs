//! Post-hoc evaluation: Wasserstein distances between ranked class
//! histograms, the silhouette and Davies-Bouldin scores built on them, the
//! Rand index, and balanced accuracy.
//!
//! None of these feed back into clustering decisions.

use std::collections::BTreeMap;

use crate::datagen::ClassHistogram;
use crate::error::{Error, Result};
use crate::{ClientId, Scalar};

/// Class frequencies sorted in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedHistogram<T> {
    pub freqs: Vec<T>,
}

impl<T: Scalar> RankedHistogram<T> {
    pub fn from_histogram(h: &ClassHistogram<T>) -> Self {
        Self::from_freqs(&h.freqs)
    }

    pub fn from_freqs(freqs: &[T]) -> Self {
        let mut freqs = freqs.to_vec();
        freqs.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        Self { freqs }
    }
}

fn ranked_distance<T: Scalar>(a: &[T], b: &[T], p: u32) -> T {
    let c = T::of_usize(a.len());
    let sum: T = a.iter().zip(b).map(|(&x, &y)| (x - y).abs().powi(p as i32)).sum();
    (sum / c).powf(T::one() / T::of(p as f64))
}

/// p-Wasserstein distance between the empirical measures of two class
/// histograms, `((1/C) Σ |a_(i) − b_(i)|^p)^(1/p)` over descending ranks.
pub fn wasserstein_distance<T: Scalar>(a: &ClassHistogram<T>, b: &ClassHistogram<T>, p: u32) -> Result<T> {
    if a.freqs.len() != b.freqs.len() {
        return Err(Error::shape(format!("histograms have {} and {} classes", a.freqs.len(), b.freqs.len())));
    }
    if p == 0 {
        return Err(Error::domain("Wasserstein order must be at least 1"));
    }
    let (ra, rb) = (RankedHistogram::from_histogram(a), RankedHistogram::from_histogram(b));
    Ok(ranked_distance(&ra.freqs, &rb.freqs, p))
}

/// Groups positions `0..labels.len()` by label; errors on fewer than two groups.
fn groups(labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by.entry(l).or_default().push(i);
    }
    if by.len() < 2 {
        return Err(Error::domain("score is undefined for fewer than two clusters"));
    }
    Ok(by.into_values().collect())
}

fn aligned<'a, T>(
    histograms: &'a BTreeMap<ClientId, ClassHistogram<T>>,
    labels: &BTreeMap<ClientId, usize>,
) -> Result<(Vec<&'a ClassHistogram<T>>, Vec<usize>)> {
    if histograms.len() != labels.len() || histograms.keys().any(|k| !labels.contains_key(k)) {
        return Err(Error::shape("histograms and labels cover different clients"));
    }
    let hs: Vec<_> = histograms.values().collect();
    let c = hs.first().map_or(0, |h| h.freqs.len());
    if hs.iter().any(|h| h.freqs.len() != c) {
        return Err(Error::shape("histograms have differing class counts"));
    }
    Ok((hs, histograms.keys().map(|k| labels[k]).collect()))
}

/// Wasserstein-adjusted silhouette: the mean silhouette under the ranked
/// histogram distance. Singleton clusters contribute zero, as do points whose
/// intra and nearest-cluster distances are both zero.
pub fn was_score<T: Scalar>(histograms: &BTreeMap<ClientId, ClassHistogram<T>>, labels: &BTreeMap<ClientId, usize>) -> Result<T> {
    let (hs, labels) = aligned(histograms, labels)?;
    let groups = groups(&labels)?;
    let ranked: Vec<_> = hs.iter().map(|h| RankedHistogram::from_histogram(h).freqs).collect();
    let n = ranked.len();
    let mut dist = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = ranked_distance(&ranked[i], &ranked[j], 2);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mean_to = |i: usize, g: &[usize]| -> T {
        let others: Vec<_> = g.iter().filter(|&&j| j != i).collect();
        others.iter().map(|&&j| dist[i * n + j]).sum::<T>() / T::of_usize(others.len())
    };
    let mut total = T::zero();
    for (gi, g) in groups.iter().enumerate() {
        if g.len() == 1 {
            continue;
        }
        for &i in g {
            let a = mean_to(i, g);
            let b = groups.iter().enumerate().filter(|(gj, _)| *gj != gi).map(|(_, h)| mean_to(i, h)).fold(T::infinity(), T::min);
            let m = a.max(b);
            if m > T::zero() {
                total += (b - a) / m;
            }
        }
    }
    Ok(total / T::of_usize(n))
}

/// Wasserstein-adjusted Davies-Bouldin score: centroids are elementwise
/// means of ranked histograms and all distances use the ranked p=2 form.
pub fn wadb_score<T: Scalar>(histograms: &BTreeMap<ClientId, ClassHistogram<T>>, labels: &BTreeMap<ClientId, usize>) -> Result<T> {
    let (hs, labels) = aligned(histograms, labels)?;
    let groups = groups(&labels)?;
    let ranked: Vec<_> = hs.iter().map(|h| RankedHistogram::from_histogram(h).freqs).collect();
    let c = ranked[0].len();
    let centroids: Vec<Vec<T>> = groups
        .iter()
        .map(|g| {
            let inv = T::one() / T::of_usize(g.len());
            (0..c).map(|k| g.iter().map(|&i| ranked[i][k]).sum::<T>() * inv).collect()
        })
        .collect();
    let spread: Vec<T> = groups
        .iter()
        .zip(&centroids)
        .map(|(g, cen)| g.iter().map(|&i| ranked_distance(&ranked[i], cen, 2)).sum::<T>() / T::of_usize(g.len()))
        .collect();
    let m = groups.len();
    let mut total = T::zero();
    for i in 0..m {
        let mut worst = T::zero();
        for j in 0..m {
            if i == j {
                continue;
            }
            let sep = ranked_distance(&centroids[i], &centroids[j], 2);
            let ratio = if sep > T::zero() {
                (spread[i] + spread[j]) / sep
            } else if spread[i] + spread[j] > T::zero() {
                T::infinity()
            } else {
                T::zero()
            };
            worst = worst.max(ratio);
        }
        total += worst;
    }
    Ok(total / T::of_usize(m))
}

/// Fraction of item pairs on which two labelings agree about co-membership.
/// A single item has no pairs and scores 1.
pub fn rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("labelings have {} and {} items", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut agree = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / (n * (n - 1) / 2) as f64)
}

/// Rand index between two client labelings over the same client set.
pub fn rand_index_map(a: &BTreeMap<ClientId, usize>, b: &BTreeMap<ClientId, usize>) -> Result<f64> {
    if a.len() != b.len() || a.keys().any(|k| !b.contains_key(k)) {
        return Err(Error::shape("labelings cover different clients"));
    }
    let la: Vec<_> = a.values().copied().collect();
    let lb: Vec<_> = a.keys().map(|k| b[k]).collect();
    rand_index(&la, &lb)
}

/// Mean per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::shape("balanced accuracy of an empty set"));
    }
    let mut hits = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= classes {
            return Err(Error::domain(format!("label {l} outside 0..{classes}")));
        }
        seen[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let present: Vec<f64> = (0..classes).filter(|&c| seen[c] > 0).map(|c| hits[c] as f64 / seen[c] as f64).collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}
