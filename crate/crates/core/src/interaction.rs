//! Pairwise interaction matrix, its convergence signal, unbiased perception
//! vectors and the RBF affinity matrix derived from them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::reward::check_alpha;
use crate::{ClientId, Scalar};

/// Interaction matrix of one cluster.
///
/// Entry `(k, j)` is a running average of client `k`'s round reward over the
/// rounds in which `k` and `j` were sampled together.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionState<T> {
    clients: Vec<ClientId>,
    index: BTreeMap<ClientId, usize>,
    pub p: Matrix<T>,
    /// Exponential moving average of the mean squared entry change over each
    /// round's updated block. Starts at 1.
    pub mse_signal: T,
    pub alpha: T,
    pub round: u64,
}

/// Symmetric RBF affinity between clients.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix<T> {
    pub w: Matrix<T>,
    pub beta: T,
}

impl<T: Scalar> AffinityMatrix<T> {
    pub fn len(&self) -> usize {
        self.w.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.w.rows() == 0
    }
}

/// Upper bound on an entry after `t` updates with constant step `alpha`,
/// starting from `p0`: `(1−α)^t p0 + 1 − (1−α)^{t+1}`.
pub fn entry_upper_bound<T: Scalar>(alpha: T, p0: T, t: u64) -> T {
    let keep = T::one() - alpha;
    let t = i32::try_from(t).unwrap_or(i32::MAX);
    keep.powi(t) * p0 + T::one() - keep.powi(t.saturating_add(1))
}

fn index_of(clients: &[ClientId]) -> Result<BTreeMap<ClientId, usize>> {
    let mut index = BTreeMap::new();
    for (i, &c) in clients.iter().enumerate() {
        if index.insert(c, i).is_some() {
            return Err(Error::domain(format!("client {c} listed twice")));
        }
    }
    Ok(index)
}

impl<T: Scalar> InteractionState<T> {
    /// Zero matrix over `clients`, convergence signal 1.
    pub fn new(clients: Vec<ClientId>, alpha: T) -> Result<Self> {
        check_alpha(alpha.to_f64_lossy())?;
        let index = index_of(&clients)?;
        let k = clients.len();
        Ok(Self { clients, index, p: Matrix::zeros(k, k), mse_signal: T::one(), alpha, round: 0 })
    }

    /// Rebuild a state from stored parts.
    pub fn from_parts(clients: Vec<ClientId>, p: Matrix<T>, mse_signal: T, alpha: T, round: u64) -> Result<Self> {
        check_alpha(alpha.to_f64_lossy())?;
        if p.rows() != clients.len() || !p.is_square() {
            return Err(Error::shape(format!("{}x{} matrix does not match {} clients", p.rows(), p.cols(), clients.len())));
        }
        let index = index_of(&clients)?;
        Ok(Self { clients, index, p, mse_signal, alpha, round })
    }

    pub fn clients(&self) -> &[ClientId] {
        &self.clients
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn position(&self, client: ClientId) -> Option<usize> {
        self.index.get(&client).copied()
    }

    /// Blend the sampled block toward each sampled client's round reward.
    ///
    /// Rows and columns of clients outside `sampled` are left bit-for-bit
    /// unchanged; the diagonal entries of sampled clients are part of the block.
    pub fn update_interaction(&mut self, sampled: &[ClientId], omegas: &BTreeMap<ClientId, T>) -> Result<()> {
        if sampled.len() < 3 {
            return Err(Error::CohortTooSmall { got: sampled.len(), need: 3 });
        }
        if omegas.len() != sampled.len() {
            return Err(Error::domain(format!("{} rewards supplied for {} sampled clients", omegas.len(), sampled.len())));
        }
        let mut block = Vec::with_capacity(sampled.len());
        for c in sampled {
            let pos = self.position(*c).ok_or_else(|| Error::domain(format!("client {c} is not a member of this cluster")))?;
            let omega = *omegas.get(c).ok_or_else(|| Error::domain(format!("no reward for sampled client {c}")))?;
            if !(omega > T::zero() && omega <= T::one()) {
                return Err(Error::domain(format!("reward {omega} of client {c} is outside (0, 1]")));
            }
            block.push((pos, omega));
        }
        let keep = T::one() - self.alpha;
        let mut sq = T::zero();
        for &(k, omega) in &block {
            let step = self.alpha * omega;
            for &(j, _) in &block {
                let old = self.p[(k, j)];
                let new = keep * old + step;
                self.p[(k, j)] = new;
                sq += (new - old) * (new - old);
            }
        }
        let mean_sq = sq / T::of_usize(block.len() * block.len());
        self.mse_signal = keep * self.mse_signal + self.alpha * mean_sq;
        self.round += 1;
        Ok(())
    }

    pub fn converged(&self, epsilon: T) -> bool {
        self.mse_signal < epsilon
    }

    /// Row `k` of the matrix without positions `k` and `j`, order preserved.
    pub fn extract_upv(&self, k: usize, j: usize) -> Result<Vec<T>> {
        let n = self.len();
        if k == j {
            return Err(Error::domain("perception vector needs two distinct clients"));
        }
        if k >= n || j >= n {
            return Err(Error::domain(format!("index out of range for {n} clients")));
        }
        Ok(self.p.row(k).iter().enumerate().filter(|&(l, _)| l != k && l != j).map(|(_, &v)| v).collect())
    }

    /// `W_kj = exp(−β ‖v_k^j − v_j^k‖²)` with unit diagonal.
    pub fn build_affinity(&self, beta: T) -> Result<AffinityMatrix<T>> {
        if !(beta > T::zero() && beta.is_finite()) {
            return Err(Error::config(format!("kernel spread {beta} must be positive")));
        }
        let n = self.len();
        if n < 3 {
            return Err(Error::ClusterTooSmall(n));
        }
        // Sum in client-id order so that W does not depend on the storage
        // order of the clients, down to the last bit.
        let order: Vec<usize> = self.index.values().copied().collect();
        let mut w = Matrix::identity(n);
        for k in 0..n {
            let rk = self.p.row(k);
            for j in k + 1..n {
                let rj = self.p.row(j);
                let d2: T = order.iter().filter(|&&l| l != k && l != j).map(|&l| (rk[l] - rj[l]) * (rk[l] - rj[l])).sum();
                let v = (-beta * d2).exp();
                w[(k, j)] = v;
                w[(j, k)] = v;
            }
        }
        Ok(AffinityMatrix { w, beta })
    }

    /// State of a child cluster: the rows and columns of `members`, in the
    /// given order, with the convergence signal and round counter reset.
    pub fn filter(&self, members: &[ClientId]) -> Result<Self> {
        let pos = members
            .iter()
            .map(|c| self.position(*c).ok_or_else(|| Error::domain(format!("client {c} is not a member"))))
            .collect::<Result<Vec<_>>>()?;
        let p = self.p.select(&pos, &pos);
        Self::from_parts(members.to_vec(), p, T::one(), self.alpha, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn ids(n: usize) -> Vec<ClientId> {
        (0..n).map(ClientId).collect()
    }

    fn omegas(pairs: &[(usize, f64)]) -> BTreeMap<ClientId, f64> {
        pairs.iter().map(|&(c, w)| (ClientId(c), w)).collect()
    }

    #[test]
    fn first_update_fills_sampled_rows() {
        let mut s = InteractionState::<f64>::new(ids(5), 0.1).unwrap();
        let sampled = [ClientId(0), ClientId(1), ClientId(2)];
        s.update_interaction(&sampled, &omegas(&[(0, 1.0), (1, 0.5), (2, 0.25)])).unwrap();
        for j in 0..3 {
            assert!((s.p[(0, j)] - 0.1).abs() < 1e-15);
            assert!((s.p[(1, j)] - 0.05).abs() < 1e-15);
        }
        for j in 0..5 {
            assert_eq!(s.p[(3, j)], 0.0);
            assert_eq!(s.p[(j, 4)], 0.0);
        }
        assert_eq!(s.round, 1);
        assert!(s.mse_signal < 1.0);
    }

    #[test]
    fn update_validation() {
        let mut s = InteractionState::<f64>::new(ids(5), 0.1).unwrap();
        let sampled = [ClientId(0), ClientId(1), ClientId(2)];
        assert!(matches!(s.update_interaction(&sampled[..2], &omegas(&[(0, 1.0), (1, 1.0)])), Err(Error::CohortTooSmall { .. })));
        assert!(matches!(s.update_interaction(&sampled, &omegas(&[(0, 1.0), (1, 0.0), (2, 1.0)])), Err(Error::Domain(_))));
        assert!(matches!(s.update_interaction(&sampled, &omegas(&[(0, 1.0), (1, 1.5), (2, 1.0)])), Err(Error::Domain(_))));
        assert!(s.update_interaction(&[ClientId(0), ClientId(1), ClientId(9)], &omegas(&[(0, 1.0), (1, 1.0), (9, 1.0)])).is_err());
        assert_eq!(s.round, 0);
        assert!(InteractionState::<f64>::new(ids(3), 1.0).is_err());
    }

    #[test]
    fn converged_threshold() {
        let mut s = InteractionState::<f64>::new(ids(4), 0.1).unwrap();
        assert!(!s.converged(1e-5));
        s.mse_signal = 9e-6;
        assert!(s.converged(1e-5));
    }

    #[test]
    fn constant_rewards_converge_within_bound() {
        let alpha = 0.2;
        let mut s = InteractionState::<f64>::new(ids(4), alpha).unwrap();
        let w = omegas(&[(0, 0.9), (1, 0.7), (2, 0.5), (3, 0.3)]);
        let all = ids(4);
        let mut rounds = 0;
        while !s.converged(1e-10) {
            s.update_interaction(&all, &w).unwrap();
            rounds += 1;
            let bound = entry_upper_bound(alpha, 0.0, s.round);
            assert!(s.p.as_slice().iter().all(|&x| x <= bound + 1e-12));
            assert!(rounds < 10_000);
        }
        for (k, row) in s.p.iter_rows().enumerate() {
            for &x in row {
                assert!((x - w[&ClientId(k)]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn upv_extraction() {
        let p =
            Matrix::from_rows(&[vec![0.0, 1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0, 7.0], vec![8.0, 9.0, 10.0, 11.0], vec![0.0, 1.0, 2.0, 3.0]])
                .unwrap();
        let s = InteractionState::<f64>::from_parts(ids(4), p, 1.0, 0.1, 0).unwrap();
        assert_eq!(s.extract_upv(0, 2).unwrap(), vec![1.0, 3.0]);
        assert_eq!(s.extract_upv(2, 0).unwrap().len(), 2);
        assert!(s.extract_upv(1, 1).is_err());
        // identical rows 0 and 3 give identical perception vectors
        let a = s.extract_upv(0, 3).unwrap();
        let b = s.extract_upv(3, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn affinity_of_identical_rows_is_all_ones() {
        let p = Matrix::filled(5, 5, 0.4);
        let s = InteractionState::<f64>::from_parts(ids(5), p, 1.0, 0.1, 0).unwrap();
        let w = s.build_affinity(0.5).unwrap();
        assert!(w.w.as_slice().iter().all(|&x| x == 1.0));
        assert!(InteractionState::<f64>::new(ids(2), 0.1).unwrap().build_affinity(0.5).is_err());
        assert!(s.build_affinity(0.0).is_err());
    }

    #[test]
    fn two_block_affinity() {
        // rows 0..3 read a, rows 3..6 read b; a UPV pair drawn across blocks
        // differs by (a-b) in each of the 4 retained positions.
        let (a, b, beta) = (0.8, 0.3, 0.5);
        let mut p = Matrix::zeros(6, 6);
        for k in 0..6 {
            for j in 0..6 {
                p[(k, j)] = if k < 3 { a } else { b };
            }
        }
        let s = InteractionState::<f64>::from_parts(ids(6), p, 1.0, 0.1, 0).unwrap();
        let w = s.build_affinity(beta).unwrap();
        let d2 = 4.0 * (a - b) * (a - b);
        for k in 0..6 {
            for j in 0..6 {
                let want = if (k < 3) == (j < 3) { 1.0 } else { (-beta * d2).exp() };
                assert!((w.w[(k, j)] - want).abs() < 1e-15);
            }
        }
        let w2 = s.build_affinity(2.0 * beta).unwrap();
        for (x, y) in w.w.as_slice().iter().zip(w2.w.as_slice()) {
            assert!((x * x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn filter_keeps_submatrix_and_resets_signal() {
        let mut rng = rng_from(1, &[]);
        let data: Vec<f64> = (0..25).map(|_| rng.random()).collect();
        let p = Matrix::from_vec(5, 5, data).unwrap();
        let s = InteractionState::<f64>::from_parts(ids(5), p, 0.001, 0.1, 17).unwrap();
        let child = s.filter(&[ClientId(1), ClientId(3), ClientId(4)]).unwrap();
        assert_eq!(child.p[(0, 1)], s.p[(1, 3)]);
        assert_eq!(child.p[(2, 0)], s.p[(4, 1)]);
        assert_eq!(child.mse_signal, 1.0);
        assert_eq!(child.round, 0);
    }

    proptest! {
        #[test]
        fn updates_respect_bound_and_leave_others_untouched(seed in 0u64..1000, alpha in 0.05f64..0.95) {
            let n = 12;
            let mut rng = rng_from(seed, &[]);
            let mut s = InteractionState::<f64>::new(ids(n), alpha).unwrap();
            for _ in 0..60 {
                let mut all = ids(n);
                all.shuffle(&mut rng);
                let m = rng.random_range(3..=n);
                let sampled = &all[..m];
                let w: BTreeMap<_, _> = sampled.iter().map(|&c| (c, rng.random_range(0.01..=1.0))).collect();
                let before = s.p.clone();
                s.update_interaction(sampled, &w).unwrap();
                let inside: Vec<usize> = sampled.iter().map(|c| c.0).collect();
                for k in 0..n {
                    for j in 0..n {
                        if !(inside.contains(&k) && inside.contains(&j)) {
                            prop_assert_eq!(before[(k, j)].to_bits(), s.p[(k, j)].to_bits());
                        }
                    }
                }
                let bound = entry_upper_bound(alpha, 0.0, s.round);
                prop_assert!(s.p.as_slice().iter().all(|&x| x >= 0.0 && x <= bound + 1e-12));
            }
            let w = s.build_affinity(0.5).unwrap();
            prop_assert!(w.w.is_symmetric());
            prop_assert!(w.w.as_slice().iter().all(|&x| x > 0.0 && x <= 1.0));
            for k in 0..n {
                prop_assert_eq!(w.w[(k, k)], 1.0);
            }
        }

        #[test]
        fn relabeling_is_equivariant(seed in 0u64..1000) {
            let n = 9;
            let mut rng = rng_from(seed, &[]);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut s = InteractionState::<f64>::new(ids(n), 0.3).unwrap();
            let mut t = InteractionState::<f64>::new(perm.iter().map(|&i| ClientId(i)).collect(), 0.3).unwrap();
            for _ in 0..20 {
                let mut all = ids(n);
                all.shuffle(&mut rng);
                let sampled = &all[..4];
                let w: BTreeMap<_, _> = sampled.iter().map(|&c| (c, rng.random_range(0.01..=1.0))).collect();
                s.update_interaction(sampled, &w).unwrap();
                t.update_interaction(sampled, &w).unwrap();
            }
            let ws = s.build_affinity(1.0).unwrap();
            let wt = t.build_affinity(1.0).unwrap();
            for a in 0..n {
                for b in 0..n {
                    let (pa, pb) = (t.position(ClientId(a)).unwrap(), t.position(ClientId(b)).unwrap());
                    prop_assert_eq!(s.p[(a, b)].to_bits(), t.p[(pa, pb)].to_bits());
                    prop_assert_eq!(ws.w[(a, b)].to_bits(), wt.w[(pa, pb)].to_bits());
                }
            }
            prop_assert_eq!(s.mse_signal.to_bits(), t.mse_signal.to_bits());
        }
    }
}
