//! Synthetic federations with Dirichlet label skew and feature-space domain
//! shifts.
//!
//! Class `c` is a unit-covariance Gaussian centred at `class_sep · e_c`.
//! Domains perturb the features after sampling: `Noisy` adds isotropic
//! Gaussian noise and `Blurred` applies a circular moving average across the
//! feature axis.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{rng_from, tag};
use crate::training::ClientDataset;
use crate::{ClientId, Scalar};

/// Class frequencies of one client, a point of the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassHistogram<T> {
    pub freqs: Vec<T>,
}

impl<T: Scalar> ClassHistogram<T> {
    pub fn new(freqs: Vec<T>) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::shape("histogram needs at least one class"));
        }
        if freqs.iter().any(|f| !f.is_finite() || *f < T::zero()) {
            return Err(Error::domain("histogram entries must be finite and non-negative"));
        }
        let sum: T = freqs.iter().copied().sum();
        if (sum - T::one()).abs().to_f64_lossy() > 1e-9 {
            return Err(Error::domain(format!("histogram sums to {sum}, not 1")));
        }
        Ok(Self { freqs })
    }

    /// Empirical class frequencies of `labels`.
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::shape("no labels to count"));
        }
        let mut counts = vec![0usize; classes];
        for &l in labels {
            *counts.get_mut(l).ok_or_else(|| Error::domain(format!("label {l} outside 0..{classes}")))? += 1;
        }
        let n = T::of_usize(labels.len());
        Self::new(counts.into_iter().map(|c| T::of_usize(c) / n).collect())
    }

    pub fn classes(&self) -> usize {
        self.freqs.len()
    }
}

/// Draws class proportions from a symmetric Dirichlet(α). `α = 0` is the
/// degenerate limit: all mass on one uniformly chosen class.
pub fn dirichlet_partition<R: Rng + ?Sized>(alpha: f64, classes: usize, rng: &mut R) -> Result<ClassHistogram<f64>> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::domain(format!("Dirichlet concentration must be finite and ≥ 0, got {alpha}")));
    }
    if classes == 0 {
        return Err(Error::shape("need at least one class"));
    }
    let one_hot = |c: usize| {
        let mut f = vec![0.0; classes];
        f[c] = 1.0;
        ClassHistogram { freqs: f }
    };
    if alpha == 0.0 {
        return Ok(one_hot(rng.random_range(0..classes)));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::domain(e.to_string()))?;
    let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        // every gamma draw underflowed: the draw is a vertex in the limit
        return Ok(one_hot(rng.random_range(0..classes)));
    }
    Ok(ClassHistogram { freqs: draws.into_iter().map(|g| g / sum).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Clean,
    Noisy,
    Blurred,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub size: usize,
    pub alpha: f64,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationSpec {
    pub clients: usize,
    pub classes: usize,
    pub dim: usize,
    pub groups: Vec<GroupSpec>,
    pub samples_per_client: usize,
    pub seed: u64,
    pub class_sep: f64,
    pub noise_scale: f64,
    pub blur_width: usize,
    pub test_fraction: f64,
}

impl FederationSpec {
    pub fn validate(&self) -> Result<()> {
        let total: usize = self.groups.iter().map(|g| g.size).sum();
        if total != self.clients {
            return Err(Error::config(format!("group sizes sum to {total}, expected K = {}", self.clients)));
        }
        if self.groups.iter().any(|g| g.size == 0) {
            return Err(Error::config("every group needs at least one client"));
        }
        if let Some(g) = self.groups.iter().find(|g| !(g.alpha >= 0.0 && g.alpha.is_finite())) {
            return Err(Error::config(format!("Dirichlet alpha must be finite and ≥ 0, got {}", g.alpha)));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.dim < self.classes {
            return Err(Error::config(format!("feature dimension {} is below the class count {}", self.dim, self.classes)));
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test fraction must lie in [0, 1)"));
        }
        if self.train_size() == 0 {
            return Err(Error::config("every client needs at least one training sample"));
        }
        if !(self.class_sep.is_finite() && self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("class separation and noise scale must be finite, noise ≥ 0"));
        }
        if self.blur_width == 0 || self.blur_width > self.dim {
            return Err(Error::config(format!("blur width must lie in 1..={}", self.dim)));
        }
        Ok(())
    }

    fn test_size(&self) -> usize {
        (self.samples_per_client as f64 * self.test_fraction).round() as usize
    }

    fn train_size(&self) -> usize {
        self.samples_per_client - self.test_size().min(self.samples_per_client)
    }

    /// Group index of every client; groups occupy consecutive ids.
    pub fn group_of(&self) -> Vec<usize> {
        self.groups.iter().enumerate().flat_map(|(g, s)| std::iter::repeat_n(g, s.size)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData<T> {
    pub id: ClientId,
    pub group: usize,
    /// Class proportions the client's labels were drawn from.
    pub histogram: ClassHistogram<f64>,
    pub train: ClientDataset<T>,
    pub test: ClientDataset<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Federation<T> {
    pub spec: FederationSpec,
    pub clients: Vec<ClientData<T>>,
    /// Whether `group` carries real ground truth rather than a placeholder.
    pub ground_truth_known: bool,
}

impl<T: Scalar> Federation<T> {
    pub fn ids(&self) -> Vec<ClientId> {
        self.clients.iter().map(|c| c.id).collect()
    }

    pub fn ground_truth(&self) -> Option<BTreeMap<ClientId, usize>> {
        self.ground_truth_known.then(|| self.clients.iter().map(|c| (c.id, c.group)).collect())
    }

    /// Empirical class frequencies of each client's training labels.
    pub fn empirical_histograms(&self) -> BTreeMap<ClientId, ClassHistogram<f64>> {
        self.clients
            .iter()
            .map(|c| (c.id, ClassHistogram::from_labels(&c.train.labels, self.spec.classes).expect("valid labels")))
            .collect()
    }

    pub fn client(&self, id: ClientId) -> Option<&ClientData<T>> {
        self.clients.get(id.0).filter(|c| c.id == id)
    }
}

fn blur(x: &mut [f64], width: usize) {
    let d = x.len();
    let src = x.to_vec();
    let start = width / 2;
    for (j, out) in x.iter_mut().enumerate() {
        let sum: f64 = (0..width).map(|o| src[(j + d + o - start) % d]).sum();
        *out = sum / width as f64;
    }
}

pub fn make_federation<T: Scalar>(spec: &FederationSpec) -> Result<Federation<T>> {
    spec.validate()?;
    let groups = spec.group_of();
    let (n, d) = (spec.samples_per_client, spec.dim);
    let n_test = spec.test_size();
    let mut clients = Vec::with_capacity(spec.clients);
    for (k, &g) in groups.iter().enumerate() {
        let group = &spec.groups[g];
        let mut rng = rng_from(spec.seed, &[tag::DATA, k as u64]);
        let histogram = dirichlet_partition(group.alpha, spec.classes, &mut rng)?;
        let picker = WeightedIndex::new(&histogram.freqs).map_err(|e| Error::domain(e.to_string()))?;
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = picker.sample(&mut rng);
            let mut x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            x[c] += spec.class_sep;
            match group.domain {
                Domain::Clean => {}
                Domain::Noisy => x.iter_mut().for_each(|v| *v += spec.noise_scale * rng.sample::<f64, _>(StandardNormal)),
                Domain::Blurred => blur(&mut x, spec.blur_width),
            }
            rows.push(x);
            labels.push(c);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (test_idx, train_idx) = order.split_at(n_test);
        let subset = |idx: &[usize]| -> Result<ClientDataset<T>> {
            let data = idx.iter().flat_map(|&i| rows[i].iter().map(|&v| T::of(v))).collect();
            ClientDataset::new(Matrix::from_vec(idx.len(), d, data)?, idx.iter().map(|&i| labels[i]).collect(), spec.classes)
        };
        let test = if test_idx.is_empty() { subset(train_idx)? } else { subset(test_idx)? };
        clients.push(ClientData { id: ClientId(k), group: g, histogram, train: subset(train_idx)?, test });
    }
    Ok(Federation { spec: spec.clone(), clients, ground_truth_known: true })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(groups: Vec<GroupSpec>, seed: u64) -> FederationSpec {
        FederationSpec {
            clients: groups.iter().map(|g| g.size).sum(),
            classes: 10,
            dim: 10,
            groups,
            samples_per_client: 100,
            seed,
            class_sep: 3.0,
            noise_scale: 1.0,
            blur_width: 3,
            test_fraction: 0.2,
        }
    }

    fn group(size: usize, alpha: f64, domain: Domain) -> GroupSpec {
        GroupSpec { size, alpha, domain }
    }

    #[test]
    fn degenerate_alpha_is_one_hot() {
        let mut rng = rng_from(1, &[]);
        for _ in 0..50 {
            let h = dirichlet_partition(0.0, 6, &mut rng).unwrap();
            assert_eq!(h.freqs.iter().filter(|&&f| f == 1.0).count(), 1);
            assert_eq!(h.freqs.iter().filter(|&&f| f == 0.0).count(), 5);
        }
        assert!(dirichlet_partition(-1.0, 3, &mut rng).is_err());
        // vanishing concentration underflows to a vertex
        let h = dirichlet_partition(1e-300, 4, &mut rng).unwrap();
        assert!((h.freqs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn high_concentration_is_near_uniform() {
        let mut rng = rng_from(2, &[]);
        let close = (0..1000)
            .filter(|_| {
                let h = dirichlet_partition(1000.0, 10, &mut rng).unwrap();
                h.freqs.iter().all(|f| (f - 0.1).abs() <= 0.05)
            })
            .count();
        assert!(close >= 990, "{close}");
    }

    #[test]
    fn mean_draw_is_uniform() {
        for alpha in [0.1f64, 0.5, 1.0, 10.0] {
            let mut rng = rng_from(3, &[alpha.to_bits()]);
            let mut mean = vec![0.0; 5];
            for _ in 0..10_000 {
                let h = dirichlet_partition(alpha, 5, &mut rng).unwrap();
                mean.iter_mut().zip(&h.freqs).for_each(|(m, f)| *m += f / 10_000.0);
            }
            assert!(mean.iter().all(|m| (m - 0.2).abs() <= 0.01), "alpha {alpha}: {mean:?}");
        }
    }

    #[test]
    fn bookkeeping_and_reproducibility() {
        let s = spec(vec![group(50, 1.0, Domain::Clean), group(50, 1.0, Domain::Noisy)], 7);
        let fed: Federation<f64> = make_federation(&s).unwrap();
        assert_eq!(fed.clients.len(), 100);
        let gt = fed.ground_truth().unwrap();
        assert_eq!(gt.values().filter(|&&g| g == 0).count(), 50);
        assert_eq!(gt.values().filter(|&&g| g == 1).count(), 50);
        assert_eq!(fed.clients[0].train.len(), 80);
        assert_eq!(fed.clients[0].test.len(), 20);
        assert_eq!(fed, make_federation(&s).unwrap());
        assert_ne!(fed, make_federation(&spec(s.groups.clone(), 8)).unwrap());

        let mut bad = s.clone();
        bad.clients = 99;
        assert!(matches!(make_federation::<f64>(&bad), Err(Error::Config(_))));
        bad = s.clone();
        bad.dim = 5;
        assert!(make_federation::<f64>(&bad).is_err());
    }

    #[test]
    fn zero_alpha_clients_hold_one_class() {
        let fed: Federation<f64> = make_federation(&spec(vec![group(20, 0.0, Domain::Clean)], 1)).unwrap();
        for c in &fed.clients {
            let first = c.train.labels[0];
            assert!(c.train.labels.iter().chain(&c.test.labels).all(|&l| l == first));
        }
    }

    #[test]
    fn labels_follow_the_drawn_histogram() {
        // chi-square goodness of fit, 9 degrees of freedom, 0.1% level
        const CRITICAL: f64 = 27.877;
        let mut s = spec(vec![group(20, 5.0, Domain::Clean)], 5);
        s.samples_per_client = 600;
        s.test_fraction = 0.0;
        let fed: Federation<f64> = make_federation(&s).unwrap();
        let rejected = fed
            .clients
            .iter()
            .filter(|c| {
                let n = c.train.len() as f64;
                let mut counts = [0.0; 10];
                c.train.labels.iter().for_each(|&l| counts[l] += 1.0);
                let chi2: f64 = counts.iter().zip(&c.histogram.freqs).map(|(o, p)| (o - n * p).powi(2) / (n * p)).sum();
                chi2 > CRITICAL
            })
            .count();
        assert_eq!(rejected, 0);
    }

    #[test]
    fn identical_groups_are_exchangeable() {
        let s = spec(vec![group(40, 1.0, Domain::Clean), group(40, 1.0, Domain::Clean)], 9);
        let fed: Federation<f64> = make_federation(&s).unwrap();
        // two-sample z test on the per-client mean of feature 0
        let stat = |g: usize| {
            let xs: Vec<f64> = fed
                .clients
                .iter()
                .filter(|c| c.group == g)
                .map(|c| c.train.features.column(0).iter().sum::<f64>() / c.train.len() as f64)
                .collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            (m, v / xs.len() as f64)
        };
        let ((m0, v0), (m1, v1)) = (stat(0), stat(1));
        assert!((m0 - m1).abs() / (v0 + v1).sqrt() < 2.576);
    }

    #[test]
    fn domains_shift_features() {
        let s = spec(vec![group(5, 1.0, Domain::Clean), group(5, 1.0, Domain::Noisy), group(5, 1.0, Domain::Blurred)], 3);
        let fed: Federation<f64> = make_federation(&s).unwrap();
        let var = |g: usize| {
            let v: Vec<f64> = fed.clients.iter().filter(|c| c.group == g).flat_map(|c| c.train.features.as_slice().to_vec()).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        assert!(var(1) > var(0) * 1.5);
        assert!(var(2) < var(0));
    }

    #[test]
    fn blur_is_a_circular_average() {
        let mut x = vec![3.0, 0.0, 0.0, 0.0];
        blur(&mut x, 3);
        assert_eq!(x, vec![1.0, 1.0, 0.0, 1.0]);
    }
}
