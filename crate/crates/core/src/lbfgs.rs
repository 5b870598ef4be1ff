//! Limited-memory curvature storage and the two-loop recursion.
//!
//! A memory holds up to `c` curvature pairs `(s, q)` with cached
//! `rho = 1 / <q, s>`. Applying the inverse estimate to a vector costs
//! `O(c d)`; the dense reference construction is analysis-only.

use ndarray::{Array1, Array2, ArrayView1};
use std::collections::VecDeque;

/// Relative curvature guard: a pair is stored only if
/// `<q, s> > CURVATURE_GUARD * |s| * |q|`. Positive curvature is guaranteed
/// analytically, but finite precision can violate it near convergence.
pub const CURVATURE_GUARD: f64 = 1e-12;

/// One stored secant pair: iterate difference `s`, modified gradient
/// difference `q`, and `rho = 1 / <q, s>`.
#[derive(Debug, Clone)]
pub struct CurvaturePair {
    pub s: Array1<f64>,
    pub q: Array1<f64>,
    pub rho: f64,
}

/// How the inverse estimate is seeded before the stored pairs are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMode {
    /// `(H^{t,0})^{-1} = (1/gamma) I` for the configured constant `gamma`.
    #[default]
    Constant,
    /// Per-agent scaling `<s, q> / <q, q>` from the latest stored pair,
    /// falling back to the constant seed while the memory is empty.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Stored,
    /// Rejected by the curvature guard; memory unchanged.
    Skipped,
}

/// Ring of curvature pairs, oldest first.
#[derive(Debug, Clone)]
pub struct LbfgsMemory {
    capacity: usize,
    ring: VecDeque<CurvaturePair>,
    skipped: u64,
}

impl LbfgsMemory {
    pub fn new(capacity: usize) -> Self {
        LbfgsMemory {
            capacity,
            ring: VecDeque::with_capacity(capacity),
            skipped: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    /// Number of pairs rejected by the curvature guard so far.
    pub fn skipped_count(&self) -> u64 {
        self.skipped
    }

    /// Stored pairs, oldest first.
    pub fn pairs(&self) -> impl Iterator<Item = &CurvaturePair> {
        self.ring.iter()
    }

    pub fn latest(&self) -> Option<&CurvaturePair> {
        self.ring.back()
    }

    /// Stores a pair, evicting the oldest at capacity.
    ///
    /// Pairs failing the relative curvature guard are skipped (memory
    /// unchanged) and counted for diagnostics; this keeps the estimate
    /// positive definite.
    pub fn push_pair(&mut self, s: Array1<f64>, q: Array1<f64>) -> PushOutcome {
        assert_eq!(s.len(), q.len(), "pair dimensions must agree");
        let sq = s.dot(&q);
        let scale = s.dot(&s).sqrt() * q.dot(&q).sqrt();
        if sq <= CURVATURE_GUARD * scale {
            self.skipped += 1;
            return PushOutcome::Skipped;
        }
        if self.capacity == 0 {
            return PushOutcome::Stored;
        }
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(CurvaturePair { s, q, rho: 1.0 / sq });
        PushOutcome::Stored
    }

    /// Adaptive seed `<s, q> / <q, q>` from the latest pair, if any.
    pub fn adaptive_scale(&self) -> Option<f64> {
        self.latest().map(|p| p.s.dot(&p.q) / p.q.dot(&p.q))
    }

    /// Applies the inverse estimate to `h` via the two-loop recursion.
    ///
    /// `init_scale` multiplies the middle step, i.e. the seed inverse is
    /// `init_scale * I`; an empty memory therefore returns
    /// `init_scale * h`. Agrees with [`dense_inverse_oracle`] applied to
    /// the same pairs.
    pub fn two_loop(&self, h: ArrayView1<'_, f64>, init_scale: f64) -> Array1<f64> {
        assert!(init_scale > 0.0, "init_scale must be positive");
        let mut v = h.to_owned();
        // newest to oldest
        let mut alphas = Vec::with_capacity(self.ring.len());
        for pair in self.ring.iter().rev() {
            let alpha = pair.rho * pair.s.dot(&v);
            v.scaled_add(-alpha, &pair.q);
            alphas.push(alpha);
        }
        v *= init_scale;
        // oldest to newest
        for (pair, &alpha) in self.ring.iter().zip(alphas.iter().rev()) {
            let beta = pair.rho * pair.q.dot(&v);
            v.scaled_add(alpha - beta, &pair.s);
        }
        v
    }
}

/// Dense inverse estimate `(H^{t,c})^{-1}`, built by iterating the rank-two
/// inverse update `V^T M V + rho s s^T` with `V = I - rho q s^T` over the
/// stored pairs, oldest first, from the seed `init_scale * I`.
///
/// Analysis-only reference route for the two-loop recursion; `O(c d^2)`.
pub fn dense_inverse_oracle(mem: &LbfgsMemory, init_scale: f64, dim: usize) -> Array2<f64> {
    assert!(dim <= 64, "dense estimates are capped at d = 64");
    let mut inv = Array2::<f64>::eye(dim) * init_scale;
    for pair in mem.pairs() {
        let mut v = Array2::<f64>::eye(dim);
        // V = I - rho q s^T
        for i in 0..dim {
            for j in 0..dim {
                v[[i, j]] -= pair.rho * pair.q[i] * pair.s[j];
            }
        }
        let mut next = v.t().dot(&inv).dot(&v);
        for i in 0..dim {
            for j in 0..dim {
                next[[i, j]] += pair.rho * pair.s[i] * pair.s[j];
            }
        }
        inv = next;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ring_evicts_oldest() {
        let mut mem = LbfgsMemory::new(2);
        for k in 1..=3 {
            let s = array![k as f64, 0.0];
            let q = array![2.0 * k as f64, 0.0];
            assert_eq!(mem.push_pair(s, q), PushOutcome::Stored);
        }
        assert_eq!(mem.len(), 2);
        let kept: Vec<f64> = mem.pairs().map(|p| p.s[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0]);
    }

    #[test]
    fn rho_is_inverse_inner_product() {
        let mut mem = LbfgsMemory::new(1);
        mem.push_pair(array![1.0, 0.0], array![2.0, 0.0]);
        assert_abs_diff_eq!(mem.latest().unwrap().rho, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn guard_skips_nonpositive_curvature() {
        let mut mem = LbfgsMemory::new(4);
        assert_eq!(
            mem.push_pair(array![1.0, 0.0], array![-1.0, 0.0]),
            PushOutcome::Skipped
        );
        assert_eq!(
            mem.push_pair(array![0.0, 0.0], array![1.0, 1.0]),
            PushOutcome::Skipped
        );
        assert!(mem.is_empty());
        assert_eq!(mem.skipped_count(), 2);
    }

    #[test]
    fn empty_memory_scales_input() {
        let mem = LbfgsMemory::new(3);
        let r = mem.two_loop(array![2.0, 4.0].view(), 0.5);
        assert_eq!(r, array![1.0, 2.0]);
    }

    #[test]
    fn inverse_secant_identity() {
        let mut mem = LbfgsMemory::new(3);
        mem.push_pair(array![1.0, 0.0], array![2.0, 0.0]);
        let r = mem.two_loop(array![2.0, 0.0].view(), 1.0);
        assert_abs_diff_eq!(r[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r[1], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn single_pair_dense_estimate() {
        // s=(1,0), q=(2,0), seed I: rho=1/2, V = I - [[1,0],[0,0]],
        // V^T V = [[0,0],[0,1]], + rho s s^T gives [[0.5, 0], [0, 1]].
        let mut mem = LbfgsMemory::new(1);
        mem.push_pair(array![1.0, 0.0], array![2.0, 0.0]);
        let inv = dense_inverse_oracle(&mem, 1.0, 2);
        let expect = array![[0.5, 0.0], [0.0, 1.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(inv[[i, j]], expect[[i, j]], epsilon = 1e-14);
            }
        }
        // off-axis vector is untouched apart from the oracle entry
        let r = mem.two_loop(array![0.0, 1.0].view(), 1.0);
        assert_abs_diff_eq!(r[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn empty_dense_oracle_is_scaled_identity() {
        let mem = LbfgsMemory::new(5);
        let inv = dense_inverse_oracle(&mem, 0.7, 3);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.7 } else { 0.0 };
                assert_abs_diff_eq!(inv[[i, j]], expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn adaptive_scale_formula() {
        let mut mem = LbfgsMemory::new(2);
        assert!(mem.adaptive_scale().is_none());
        mem.push_pair(array![1.0, 1.0], array![2.0, 0.0]);
        // <s,q>/<q,q> = 2/4
        assert_abs_diff_eq!(mem.adaptive_scale().unwrap(), 0.5, epsilon = 1e-15);
    }

    fn random_memory(
        rng: &mut ChaCha8Rng,
        dim: usize,
        pairs: usize,
        capacity: usize,
    ) -> LbfgsMemory {
        let mut mem = LbfgsMemory::new(capacity);
        let mut stored = 0;
        while stored < pairs {
            let s = Array1::from_iter((0..dim).map(|_| rng.gen_range(-1.0..1.0)));
            let q = Array1::from_iter((0..dim).map(|_| rng.gen_range(-1.0..1.0)));
            // bias toward positive curvature so the guard accepts quickly
            let q = &q + &(&s * 1.5);
            if mem.push_pair(s, q) == PushOutcome::Stored {
                stored += 1;
            }
        }
        mem
    }

    #[test]
    fn two_loop_matches_dense_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let dim = rng.gen_range(1..=5usize);
            let c = rng.gen_range(0..=3usize);
            let mem = random_memory(&mut rng, dim, c, 3);
            let inv = dense_inverse_oracle(&mem, 0.8, dim);
            let h = Array1::from_iter((0..dim).map(|_| rng.gen_range(-2.0..2.0)));
            let via_loop = mem.two_loop(h.view(), 0.8);
            let via_dense = inv.dot(&h);
            let err = (&via_loop - &via_dense).mapv(f64::abs).sum();
            let scale = h.mapv(f64::abs).sum().max(1e-30);
            assert!(err <= 1e-10 * scale, "err {err} vs scale {scale}");
        }
    }

    #[test]
    fn dense_oracle_is_symmetric_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let dim = rng.gen_range(2..=6usize);
            let mem = random_memory(&mut rng, dim, 3, 3);
            let inv = dense_inverse_oracle(&mem, 1.3, dim);
            for i in 0..dim {
                for j in 0..dim {
                    assert_abs_diff_eq!(inv[[i, j]], inv[[j, i]], epsilon = 1e-10);
                }
            }
            let eigs = linalg::sym_eigenvalues(&inv);
            assert!(eigs.iter().all(|&v| v > 0.0), "eigs {eigs:?}");
        }
    }

    proptest! {
        #[test]
        fn two_loop_is_linear_in_h(
            seed in 0u64..500,
            scale in 0.25f64..4.0,
            alpha in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = rng.gen_range(1..=6usize);
            let c = rng.gen_range(0..=4usize);
            let mem = random_memory(&mut rng, dim, c, 4);
            let h = Array1::from_iter((0..dim).map(|_| rng.gen_range(-1.0..1.0)));
            let lhs = mem.two_loop((&h * alpha).view(), scale);
            let rhs = mem.two_loop(h.view(), scale) * alpha;
            for k in 0..dim {
                prop_assert!((lhs[k] - rhs[k]).abs() <= 1e-12 * (1.0 + rhs[k].abs()));
            }
        }

        #[test]
        fn latest_secant_is_recovered(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = rng.gen_range(1..=6usize);
            let mem = random_memory(&mut rng, dim, 3, 3);
            let latest = mem.latest().unwrap().clone();
            let r = mem.two_loop(latest.q.view(), 0.9);
            let norm = latest.s.dot(&latest.s).sqrt().max(1e-30);
            let err = (&r - &latest.s).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            prop_assert!(err <= 1e-10 * norm.max(1.0), "err {}", err);
        }
    }
}
