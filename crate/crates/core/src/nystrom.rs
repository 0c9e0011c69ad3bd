//! Nyström approximation of `W_V` and the Woodbury solver built on it.
//!
//! With a landmark subset of size `m`, `W_V ≈ Ũ diag(Ṽ) Ũᵀ` where
//! `Ũ = √(m/n) W_nm U V⁻¹`, `Ṽ = (n/m) V` and `W_mm = U V Uᵀ`. Internally
//! the solver works with `Q = Ũ Ṽ^{1/2} = W_nm U V^{-1/2}` so that
//! `W_V ≈ Q Qᵀ`, and only ever needs the `n × r` product `L Q`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MmrError, Result};
use crate::kernels::{GramBlocks, KernelOperator, KernelSpec};
use crate::parallel::Exec;
use crate::risk::Dataset;
use crate::rkhs_solver::RkhsModel;

/// Eigenvalues of `W_mm` at or below `EIG_FLOOR × λ_max` are discarded.
pub const EIG_FLOOR: f64 = 1e-12;
pub const DEFAULT_M: usize = 300;
pub const DEFAULT_DRAWS: usize = 10;

const JITTERS: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NystromFactors {
    pub u_tilde: DMatrix<f64>,
    pub v_tilde: DVector<f64>,
    pub subset: Vec<usize>,
    pub dropped_eigs: usize,
}

impl NystromFactors {
    pub fn n(&self) -> usize {
        self.u_tilde.nrows()
    }

    pub fn rank(&self) -> usize {
        self.v_tilde.len()
    }

    /// `Q = Ũ diag(Ṽ)^{1/2}`, so that `Q Qᵀ = Ũ diag(Ṽ) Ũᵀ`.
    pub fn q(&self) -> DMatrix<f64> {
        let mut q = self.u_tilde.clone();
        for (j, v) in self.v_tilde.iter().enumerate() {
            q.column_mut(j).scale_mut(v.sqrt());
        }
        q
    }

    /// Dense `Ũ diag(Ṽ) Ũᵀ`; for tests and small problems.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let q = self.q();
        &q * q.transpose()
    }
}

/// Uniform sample of `m` distinct indices out of `n`, sorted ascending.
pub fn sample_subset(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(MmrError::input(format!(
            "Nyström subset size must satisfy 1 <= m <= n (m = {m}, n = {n})"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Nyström factors of `W_V = K / n²` from a uniformly sampled landmark subset.
/// Only the `n × m` columns of `K` at the landmarks are read.
pub fn nystrom_factors<G: GramBlocks + ?Sized>(k: &G, m: usize, seed: u64) -> Result<NystromFactors> {
    let n = k.n();
    let subset = sample_subset(n, m, seed)?;
    let all: Vec<usize> = (0..n).collect();
    let n2 = (n * n) as f64;
    let w_nm = k.block(&all, &subset) / n2;
    let w_mm = DMatrix::from_fn(m, m, |a, b| w_nm[(subset[a], b)]);
    let w_mm = (&w_mm + w_mm.transpose()) * 0.5;
    let eig = w_mm.symmetric_eigen();
    let max = eig.eigenvalues.max();
    if !(max > 0.0) || !max.is_finite() {
        return Err(MmrError::numerical(
            "degenerate Nyström subset: no eigenvalue of W_mm is positive",
        ));
    }
    let keep: Vec<usize> = (0..m)
        .filter(|&i| eig.eigenvalues[i] > EIG_FLOOR * max)
        .collect();
    let r = keep.len();
    let scale = (m as f64 / n as f64).sqrt();
    let ratio = n as f64 / m as f64;
    let u = eig.eigenvectors.select_columns(&keep);
    let v = DVector::from_iterator(r, keep.iter().map(|&i| eig.eigenvalues[i]));
    let mut u_tilde = &w_nm * &u;
    for j in 0..r {
        u_tilde.column_mut(j).scale_mut(scale / v[j]);
    }
    Ok(NystromFactors {
        u_tilde,
        v_tilde: v * ratio,
        subset,
        dropped_eigs: m - r,
    })
}

/// Cholesky of a symmetric positive definite matrix with diagonal jitter
/// escalation; returns the factor and the jitter used.
pub(crate) fn cholesky_jittered(
    s: &DMatrix<f64>,
    what: &str,
) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let sym = (s + s.transpose()) * 0.5;
    let scale = sym.diagonal().amax().max(f64::MIN_POSITIVE);
    for eps in JITTERS {
        let mut a = sym.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += eps * scale;
        }
        if let Some(ch) = a.cholesky() {
            return Ok((ch, eps));
        }
    }
    Err(MmrError::numerical(format!(
        "{what} is singular after jitter up to {:e}",
        JITTERS[JITTERS.len() - 1]
    )))
}

/// Woodbury solution `α = λ⁻¹[w − Q (λ⁻¹ QᵀLQ + I)⁻¹ Qᵀ λ⁻¹ L w]` with
/// `w = Q Qᵀ y`, given `Q` and `LQ`. Returns `(α, jitter_used)`.
pub fn woodbury_alpha(
    q: &DMatrix<f64>,
    lq: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
) -> Result<(DVector<f64>, f64)> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(MmrError::input(format!("lambda must be positive, got {lambda}")));
    }
    let n = y.len();
    if q.nrows() != n || lq.shape() != q.shape() {
        return Err(MmrError::input("Nyström factor dimensions do not match the data"));
    }
    let r = q.ncols();
    let qty = q.transpose() * y;
    let w = q * &qty;
    // Qᵀ L w = (LQ)ᵀ Q Qᵀ y
    let qtlq = q.transpose() * lq;
    let mut s = &qtlq / lambda;
    for i in 0..r {
        s[(i, i)] += 1.0;
    }
    let (ch, jitter) = cholesky_jittered(&s, "Nyström inner system")?;
    let qtlw = &qtlq * &qty;
    let t = ch.solve(&(qtlw / lambda));
    let alpha = (w - q * t) / lambda;
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(MmrError::numerical("Nyström solution is not finite"));
    }
    Ok((alpha, jitter))
}

/// Nyström-accelerated fit; never forms an `n × n` matrix.
pub fn fit_nystrom(
    data: &Dataset,
    kernel_k: &KernelSpec,
    kernel_l: &KernelSpec,
    lambda: f64,
    m: usize,
    seed: u64,
) -> Result<RkhsModel> {
    fit_nystrom_with(data, kernel_k, kernel_l, lambda, m, seed, Exec::default())
}

pub fn fit_nystrom_with(
    data: &Dataset,
    kernel_k: &KernelSpec,
    kernel_l: &KernelSpec,
    lambda: f64,
    m: usize,
    seed: u64,
    exec: Exec,
) -> Result<RkhsModel> {
    if data.n() < 2 {
        return Err(MmrError::input("Nyström fit needs at least two samples"));
    }
    let k_op = KernelOperator::new(kernel_k, &data.z)?;
    let factors = nystrom_factors(&k_op, m, seed)?;
    let q = factors.q();
    let l_op = KernelOperator::new(kernel_l, &data.x)?;
    let lq = l_op.apply(&q, exec)?;
    let (alpha, jitter) = woodbury_alpha(&q, &lq, &data.y, lambda)?;
    RkhsModel::new(alpha, data.x.clone(), kernel_l.clone(), lambda, jitter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{LowDimSpec, Truth};
    use crate::kernels::gram;
    use crate::risk::weight_v;
    use crate::rkhs_solver::{fit, objective_from_grams};

    fn data(n: usize, seed: u64) -> Dataset {
        LowDimSpec {
            truth: Truth::Sin,
            n,
            seed,
        }
        .generate()
    }

    fn kernels() -> (KernelSpec, KernelSpec) {
        (KernelSpec::gaussian(1.0).unwrap(), KernelSpec::gaussian(0.5).unwrap())
    }

    #[test]
    fn full_rank_reconstructs_weight_matrix() {
        let d = data(40, 1);
        let (kk, _) = kernels();
        let k = gram(&kk, &d.z).unwrap();
        let f = nystrom_factors(&k, 40, 3).unwrap();
        let w = weight_v(&k).into_inner();
        assert!((f.reconstruct() - w).amax() < 1e-10);
        assert_eq!(f.subset, (0..40).collect::<Vec<_>>());
        assert!(f.v_tilde.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn rank_one_gram_captured_by_any_subset() {
        let z = DMatrix::from_element(12, 2, 0.7);
        let k = gram(&KernelSpec::gaussian(1.0).unwrap(), &z).unwrap();
        let w = weight_v(&k).into_inner();
        for m in [1, 3, 12] {
            let f = nystrom_factors(&k, m, 5).unwrap();
            assert_eq!(f.rank(), 1);
            assert_eq!(f.dropped_eigs, m - 1);
            assert!((f.reconstruct() - &w).amax() < 1e-10);
        }
    }

    #[test]
    fn two_points_error_vanishes_at_full_rank() {
        let z = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let k = gram(&KernelSpec::gaussian(1.0).unwrap(), &z).unwrap();
        let w = weight_v(&k).into_inner();
        let e1 = (nystrom_factors(&k, 1, 0).unwrap().reconstruct() - &w).amax();
        let e2 = (nystrom_factors(&k, 2, 0).unwrap().reconstruct() - &w).amax();
        assert!(e1 > 1e-3);
        assert!(e2 < 1e-10 && e2 < e1);
    }

    #[test]
    fn woodbury_exact_at_full_rank() {
        let (kk, kl) = kernels();
        for seed in 0..5 {
            let d = data(60, seed);
            for lambda in [1e-4, 1e-2] {
                let exact = fit(&d, &kk, &kl, lambda).unwrap();
                let ny = fit_nystrom(&d, &kk, &kl, lambda, 60, seed).unwrap();
                let rel = (&ny.alpha - &exact.alpha).norm() / exact.alpha.norm();
                assert!(rel < 1e-6, "seed {seed} lambda {lambda}: rel {rel}");
            }
        }
    }

    #[test]
    fn zero_outcome_and_bad_sizes() {
        let (kk, kl) = kernels();
        let mut d = data(20, 2);
        d.y.fill(0.0);
        let m = fit_nystrom(&d, &kk, &kl, 0.1, 5, 1).unwrap();
        assert!(m.alpha.iter().all(|v| *v == 0.0));
        assert!(fit_nystrom(&d, &kk, &kl, 0.1, 0, 1).is_err());
        assert!(fit_nystrom(&d, &kk, &kl, 0.1, 21, 1).is_err());
    }

    #[test]
    fn subset_is_deterministic() {
        assert_eq!(sample_subset(1000, 50, 9).unwrap(), sample_subset(1000, 50, 9).unwrap());
        assert_ne!(sample_subset(1000, 50, 9).unwrap(), sample_subset(1000, 50, 10).unwrap());
        let s = sample_subset(100, 100, 1).unwrap();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn accuracy_improves_with_m() {
        let (kk, kl) = kernels();
        let n = 160;
        let lambda = 1e-3;
        let mut medians = Vec::new();
        for m in [n / 8, n / 4, n / 2, n] {
            let mut objs: Vec<f64> = (0..10)
                .map(|seed| {
                    let d = data(n, 100 + seed);
                    let k = gram(&kk, &d.z).unwrap();
                    let l = gram(&kl, &d.x).unwrap();
                    let a = fit_nystrom(&d, &kk, &kl, lambda, m, seed).unwrap();
                    objective_from_grams(&k, &l, &d.y, lambda, &a.alpha).unwrap()
                })
                .collect();
            objs.sort_by(f64::total_cmp);
            medians.push((objs[4] + objs[5]) / 2.0);
        }
        for w in medians.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "{medians:?}");
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let (kk, kl) = kernels();
        let d = data(300, 4);
        let a = fit_nystrom_with(&d, &kk, &kl, 1e-3, 50, 2, Exec::Sequential).unwrap();
        let b = fit_nystrom_with(&d, &kk, &kl, 1e-3, 50, 2, Exec::default()).unwrap();
        assert_eq!(a.alpha, b.alpha);
    }
}
