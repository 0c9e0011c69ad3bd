//! Closed-form kernel MMR-IV estimator.
//!
//! With `W = W_V` and hypothesis Gram `L`, the regularized objective
//! `(y − Lα)ᵀ W (y − Lα) + λ αᵀ L α` is minimized by any solution of
//! `(L W L + λ L) α = L W y`. Cancelling one `L` gives the better conditioned
//! `(W L + λ I) α = W y`, which is always nonsingular for `λ > 0` since the
//! eigenvalues of `W L` are real and non-negative.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MmrError, Result};
use crate::kernels::{cross_apply, gram, GramMatrix, KernelSpec};
use crate::parallel::Exec;
use crate::risk::{weight_v, Dataset};

const JITTERS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];
const RESIDUAL_TOL: f64 = 1e-6;

/// Representer-expansion model `f(x) = offset + Σ αᵢ l(x, xᵢ)`. The offset is
/// zero for MMR-IV fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RkhsModel {
    pub alpha: DVector<f64>,
    pub train_x: DMatrix<f64>,
    pub kernel_l: KernelSpec,
    pub lambda: f64,
    pub jitter_used: f64,
    #[serde(default)]
    pub offset: f64,
}

impl RkhsModel {
    pub fn new(
        alpha: DVector<f64>,
        train_x: DMatrix<f64>,
        kernel_l: KernelSpec,
        lambda: f64,
        jitter_used: f64,
    ) -> Result<Self> {
        let model = RkhsModel {
            alpha,
            train_x,
            kernel_l,
            lambda,
            jitter_used,
            offset: 0.0,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.train_x.nrows() {
            return Err(MmrError::input(format!(
                "model has {} coefficients for {} training points",
                self.alpha.len(),
                self.train_x.nrows()
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(MmrError::input("model lambda must be positive"));
        }
        if self.alpha.iter().any(|v| !v.is_finite()) {
            return Err(MmrError::numerical("model coefficients are not finite"));
        }
        self.kernel_l.validate()
    }

    pub fn predict(&self, x_new: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.predict_with(x_new, Exec::default())
    }

    pub fn predict_with(&self, x_new: &DMatrix<f64>, exec: Exec) -> Result<DVector<f64>> {
        let f = cross_apply(&self.kernel_l, x_new, &self.train_x, &self.alpha, exec)?;
        Ok(f.add_scalar(self.offset))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: RkhsModel = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn fit(
    data: &Dataset,
    kernel_k: &KernelSpec,
    kernel_l: &KernelSpec,
    lambda: f64,
) -> Result<RkhsModel> {
    if data.n() < 2 {
        return Err(MmrError::input("RKHS fit needs at least two samples"));
    }
    let k = gram(kernel_k, &data.z)?;
    let l = gram(kernel_l, &data.x)?;
    let (alpha, jitter_used) = solve_alpha(&k, &l, &data.y, lambda)?;
    RkhsModel::new(alpha, data.x.clone(), kernel_l.clone(), lambda, jitter_used)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(MmrError::input(format!("lambda must be positive, got {lambda}")))
    }
}

fn check_dims(k: &GramMatrix, l: &GramMatrix, y: &DVector<f64>) -> Result<()> {
    if k.n() != l.n() || k.n() != y.len() {
        return Err(MmrError::input(format!(
            "dimension mismatch: K is {0}x{0}, L is {1}x{1}, y has {2} entries",
            k.n(),
            l.n(),
            y.len()
        )));
    }
    Ok(())
}

/// Solves for `α` from precomputed Gram matrices; returns `(α, jitter_used)`.
pub fn solve_alpha(
    k: &GramMatrix,
    l: &GramMatrix,
    y: &DVector<f64>,
    lambda: f64,
) -> Result<(DVector<f64>, f64)> {
    check_lambda(lambda)?;
    check_dims(k, l, y)?;
    let n = y.len();
    let w = weight_v(k).into_inner();
    let wy = &w * y;
    let mut a = &w * l.values();
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    let lu = a.clone().lu();
    let cond = lu_condition_estimate(lu.u().diagonal().as_slice());
    if let Some(alpha) = lu.solve(&wy) {
        if accept(&a, &alpha, &wy) {
            return Ok((alpha, 0.0));
        }
    }

    // Rank-deficient L: symmetric normal equations with L + εI.
    let base = l.values();
    let rhs_scale = wy.norm().max(f64::MIN_POSITIVE);
    for eps in JITTERS {
        let mut lj = base.clone();
        for i in 0..n {
            lj[(i, i)] += eps;
        }
        let lw = &lj * &w;
        let mut normal = &lw * &lj + &lj * lambda;
        normal = (&normal + normal.transpose()) * 0.5;
        let b = &lw * y;
        if let Some(ch) = normal.cholesky() {
            let alpha = ch.solve(&b);
            let res = (&w * (&lj * &alpha) + &alpha * lambda - &wy).norm() / rhs_scale;
            if alpha.iter().all(|v| v.is_finite()) && res < RESIDUAL_TOL {
                return Ok((alpha, eps));
            }
        }
    }
    Err(MmrError::numerical(format!(
        "RKHS system could not be solved after jitter up to {:e} (condition estimate {cond:.3e})",
        JITTERS[JITTERS.len() - 1]
    )))
}

fn accept(a: &DMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>) -> bool {
    if x.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = (a.norm() * x.norm() + b.norm()).max(f64::MIN_POSITIVE);
    (a * x - b).norm() / scale < RESIDUAL_TOL
}

pub(crate) fn lu_condition_estimate(diag: &[f64]) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for d in diag {
        lo = lo.min(d.abs());
        hi = hi.max(d.abs());
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// `(y − Lα)ᵀ W_V (y − Lα) + λ αᵀ L α`.
pub fn objective(
    data: &Dataset,
    kernel_k: &KernelSpec,
    kernel_l: &KernelSpec,
    lambda: f64,
    alpha: &DVector<f64>,
) -> Result<f64> {
    let k = gram(kernel_k, &data.z)?;
    let l = gram(kernel_l, &data.x)?;
    objective_from_grams(&k, &l, &data.y, lambda, alpha)
}

pub fn objective_from_grams(
    k: &GramMatrix,
    l: &GramMatrix,
    y: &DVector<f64>,
    lambda: f64,
    alpha: &DVector<f64>,
) -> Result<f64> {
    check_dims(k, l, y)?;
    if alpha.len() != y.len() {
        return Err(MmrError::input(format!(
            "alpha has {} entries, expected {}",
            alpha.len(),
            y.len()
        )));
    }
    let la = l.values() * alpha;
    let r = y - &la;
    let n2 = (y.len() * y.len()) as f64;
    let risk = (r.transpose() * k.values() * &r)[(0, 0)] / n2;
    Ok(risk + lambda * alpha.dot(&la))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{LowDimSpec, Truth};
    use crate::risk::empirical_risk;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(n: usize, seed: u64) -> (Dataset, KernelSpec, KernelSpec) {
        let d = LowDimSpec {
            truth: Truth::Sin,
            n,
            seed,
        }
        .generate();
        (d, KernelSpec::gaussian(1.0).unwrap(), KernelSpec::gaussian(0.5).unwrap())
    }

    fn grams(d: &Dataset, kk: &KernelSpec, kl: &KernelSpec) -> (GramMatrix, GramMatrix) {
        (gram(kk, &d.z).unwrap(), gram(kl, &d.x).unwrap())
    }

    #[test]
    fn zero_outcome_gives_zero_alpha() {
        let (mut d, kk, kl) = instance(12, 1);
        d.y.fill(0.0);
        let m = fit(&d, &kk, &kl, 0.1).unwrap();
        assert!(m.alpha.iter().all(|v| *v == 0.0));
        assert!(m.predict(&d.x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matches_pseudo_inverse_oracle() {
        for seed in 0..5 {
            let (d, kk, _) = instance(15, seed);
            let kl = KernelSpec::gaussian(0.2).unwrap();
            let lambda = 0.1;
            let m = fit(&d, &kk, &kl, lambda).unwrap();
            let (k, l) = grams(&d, &kk, &kl);
            let w = k.values() / 225.0;
            let l = l.values();
            let a = l * &w * l + l * lambda;
            let b = l * &w * &d.y;
            let svd = a.clone().svd(false, false);
            let cond = svd.singular_values.max() / svd.singular_values.min();
            assert!(cond < 1e9, "oracle unreliable: cond {cond:e}");
            let oracle = a.pseudo_inverse(1e-300).unwrap() * b;
            let rel = (&m.alpha - &oracle).norm() / oracle.norm();
            assert!(rel < 1e-6, "seed {seed}: rel {rel} cond {cond:e}");
        }
    }

    #[test]
    fn huge_lambda_shrinks_alpha() {
        let (d, kk, kl) = instance(30, 2);
        let m = fit(&d, &kk, &kl, 1e6).unwrap();
        assert!(m.alpha.norm() < 1e-4);
    }

    #[test]
    fn predict_examples() {
        let x = DMatrix::from_row_slice(1, 1, &[0.3]);
        let m = RkhsModel::new(
            DVector::from_vec(vec![2.0]),
            x.clone(),
            KernelSpec::gaussian(1.0).unwrap(),
            0.1,
            0.0,
        )
        .unwrap();
        assert_eq!(m.predict(&x).unwrap()[0], 2.0);
        assert!(m.predict(&DMatrix::zeros(1, 2)).is_err());

        let (d, kk, kl) = instance(20, 3);
        let fitted = fit(&d, &kk, &kl, 1e-3).unwrap();
        let l = gram(&kl, &d.x).unwrap();
        let expected = l.values() * &fitted.alpha;
        assert!((fitted.predict(&d.x).unwrap() - expected).amax() < 1e-12);
    }

    #[test]
    fn objective_examples() {
        let (d, kk, kl) = instance(15, 4);
        let (k, l) = grams(&d, &kk, &kl);
        let zero = DVector::zeros(15);
        let obj0 = objective(&d, &kk, &kl, 0.1, &zero).unwrap();
        let w = weight_v(&k);
        assert!((obj0 - empirical_risk(&d.y, &w).unwrap()).abs() < 1e-14);

        let lambda = 1e-3;
        let m = fit(&d, &kk, &kl, lambda).unwrap();
        let best = objective_from_grams(&k, &l, &d.y, lambda, &m.alpha).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mut p = DVector::from_fn(15, |_, _| rng.random_range(-1.0..1.0));
            p *= 0.01 / p.norm();
            let v = objective_from_grams(&k, &l, &d.y, lambda, &(&m.alpha + p)).unwrap();
            assert!(best <= v + 1e-15);
        }

        let r = &d.y - l.values() * &m.alpha;
        let no_reg = objective_from_grams(&k, &l, &d.y, 0.0, &m.alpha).unwrap();
        assert!((no_reg - empirical_risk(&r, &w).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn duplicate_treatments_still_solve() {
        let (mut d, kk, kl) = instance(10, 5);
        let first = d.x[(0, 0)];
        d.x[(1, 0)] = first;
        let m = fit(&d, &kk, &kl, 1e-4).unwrap();
        assert!(m.alpha.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_input() {
        let (d, kk, kl) = instance(10, 6);
        assert!(fit(&d, &kk, &kl, 0.0).is_err());
        assert!(fit(&d.select(&[0]), &kk, &kl, 0.1).is_err());
        let (k, l) = grams(&d, &kk, &kl);
        assert!(objective_from_grams(&k, &l, &d.y, 0.1, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn json_round_trip() {
        let (d, kk, kl) = instance(8, 7);
        let m = fit(&d, &kk, &kl, 1e-2).unwrap();
        let back = RkhsModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(RkhsModel::load(&p).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn first_order_stationarity(n in 5usize..200, seed in 0u64..1000, log_lambda in -8i32..0) {
            let (d, kk, kl) = instance(n, seed);
            let lambda = 10f64.powi(log_lambda);
            let m = fit(&d, &kk, &kl, lambda).unwrap();
            let (k, l) = grams(&d, &kk, &kl);
            let w = weight_v(&k).into_inner();
            let l = l.values();
            let rhs = l * &w * &d.y;
            let lhs = (l * &w * l + l * lambda) * &m.alpha;
            let rel = (lhs - &rhs).norm() / rhs.norm();
            prop_assert!(rel < 1e-8, "rel {}", rel);
        }
    }
}
