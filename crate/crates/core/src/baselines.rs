//! Reference estimators: two-stage least squares, polynomial 2SLS with ridge
//! penalties, and kernel ridge regression of `Y` on `X` that ignores `Z`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MmrError, Result};
use crate::kernels::{gram, KernelSpec};
use crate::parallel::Exec;
use crate::risk::Dataset;
use crate::rkhs_solver::RkhsModel;

/// First-stage F statistics below this flag a weak instrument.
pub const WEAK_F: f64 = 10.0;
const RANK_TOL: f64 = 1e-12;

/// `y ≈ X β + b` with `coefficients = [β…, b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub coefficients: DVector<f64>,
    /// First-stage F statistic per treatment column (empty for OLS).
    pub first_stage_f: Vec<f64>,
}

impl LinearModel {
    pub fn slopes(&self) -> &[f64] {
        &self.coefficients.as_slice()[..self.coefficients.len() - 1]
    }

    pub fn intercept(&self) -> f64 {
        self.coefficients[self.coefficients.len() - 1]
    }

    pub fn weak_instrument(&self) -> bool {
        self.first_stage_f.iter().any(|&f| f < WEAK_F)
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let d = self.coefficients.len() - 1;
        if x.ncols() != d {
            return Err(MmrError::input(format!(
                "linear model expects {d} columns, got {}",
                x.ncols()
            )));
        }
        Ok(with_intercept(x) * &self.coefficients)
    }
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(x.ncols(), 1.0)
}

/// Least squares via SVD; fails when the design is numerically rank deficient.
fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= RANK_TOL * smax {
        return Err(MmrError::numerical(format!(
            "{what}: design matrix is rank deficient (singular value ratio {:.3e})",
            smin / smax
        )));
    }
    svd.solve(b, 0.0)
        .map_err(|e| MmrError::numerical(format!("{what}: {e}")))
}

pub fn fit_ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<LinearModel> {
    if x.nrows() != y.len() || x.nrows() <= x.ncols() {
        return Err(MmrError::input("OLS needs more rows than columns and matching y"));
    }
    let beta = lstsq(&with_intercept(x), &DMatrix::from_column_slice(y.len(), 1, y.as_slice()), "OLS")?;
    Ok(LinearModel {
        coefficients: beta.column(0).into_owned(),
        first_stage_f: Vec::new(),
    })
}

/// Stage 1 regresses each `X` column on `[Z, 1]`; stage 2 regresses `Y` on `[X̂, 1]`.
pub fn fit_2sls(data: &Dataset) -> Result<LinearModel> {
    let (n, d, dz) = (data.n(), data.x.ncols(), data.z.ncols());
    if n <= d + dz + 1 {
        return Err(MmrError::input(format!(
            "2SLS needs n > d + d' + 1 (n = {n}, d = {d}, d' = {dz})"
        )));
    }
    let z1 = with_intercept(&data.z);
    let gamma = lstsq(&z1, &data.x, "2SLS stage 1")?;
    let x_hat = &z1 * &gamma;
    let first_stage_f = (0..d)
        .map(|j| {
            let xj = data.x.column(j);
            let mean = xj.mean();
            let tss: f64 = xj.iter().map(|v| (v - mean).powi(2)).sum();
            let rss = (xj - x_hat.column(j)).norm_squared();
            ((tss - rss) / dz as f64) / (rss / (n - dz - 1) as f64)
        })
        .collect();
    let beta = lstsq(
        &with_intercept(&x_hat),
        &DMatrix::from_column_slice(n, 1, data.y.as_slice()),
        "2SLS stage 2",
    )?;
    Ok(LinearModel {
        coefficients: beta.column(0).into_owned(),
        first_stage_f,
    })
}

/// Per-column powers `1..=degree` standardized with training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFeatures {
    pub degree: usize,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl PolyFeatures {
    fn raw(x: &DMatrix<f64>, degree: usize) -> DMatrix<f64> {
        let d = x.ncols();
        DMatrix::from_fn(x.nrows(), d * degree, |i, c| {
            let (col, p) = (c / degree, c % degree + 1);
            x[(i, col)].powi(p as i32)
        })
    }

    pub fn fit(x: &DMatrix<f64>, degree: usize) -> Self {
        let raw = Self::raw(x, degree);
        let n = raw.nrows() as f64;
        let means: Vec<f64> = raw.column_iter().map(|c| c.mean()).collect();
        let scales = raw
            .column_iter()
            .zip(&means)
            .map(|(c, m)| {
                let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        PolyFeatures {
            degree,
            means,
            scales,
        }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut f = Self::raw(x, self.degree);
        for (j, mut col) in f.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.means[j]);
            col /= self.scales[j];
        }
        f
    }
}

/// Ridge regression with an unpenalized intercept: returns `[β…, b]`.
/// The penalty is `ridge · n · ‖β‖²`.
fn ridge(a: &DMatrix<f64>, b: &DMatrix<f64>, penalty: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if penalty == 0.0 {
        return lstsq(&with_intercept(a), b, "ridge");
    }
    let a_mean = DVector::from_iterator(a.ncols(), a.column_iter().map(|c| c.mean()));
    let b_mean = DVector::from_iterator(b.ncols(), b.column_iter().map(|c| c.mean()));
    let mut ac = a.clone();
    for (j, mut col) in ac.column_iter_mut().enumerate() {
        col.add_scalar_mut(-a_mean[j]);
    }
    let mut bc = b.clone();
    for (j, mut col) in bc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-b_mean[j]);
    }
    let mut g = ac.transpose() * &ac;
    for i in 0..g.nrows() {
        g[(i, i)] += penalty * n as f64;
    }
    let beta = g
        .cholesky()
        .ok_or_else(|| MmrError::numerical("ridge system is not positive definite"))?
        .solve(&(ac.transpose() * &bc));
    let intercept = b_mean.transpose() - a_mean.transpose() * &beta;
    let p = beta.nrows();
    let mut out = DMatrix::zeros(p + 1, b.ncols());
    out.rows_mut(0, p).copy_from(&beta);
    out.row_mut(p).copy_from(&intercept);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyRidgeModel {
    pub degree: usize,
    pub ridge: f64,
    pub z_features: PolyFeatures,
    pub x_features: PolyFeatures,
    /// `(p_z + 1) × p_x`, last row is the intercept.
    pub stage1: DMatrix<f64>,
    /// Length `p_x + 1`, last entry is the intercept.
    pub stage2: DVector<f64>,
}

impl PolyRidgeModel {
    pub fn fit(data: &Dataset, degree: usize, ridge_penalty: f64) -> Result<Self> {
        if degree == 0 {
            return Err(MmrError::input("polynomial degree must be at least 1"));
        }
        if !(ridge_penalty >= 0.0) {
            return Err(MmrError::input("ridge penalty must be non-negative"));
        }
        let zf = PolyFeatures::fit(&data.z, degree);
        let xf = PolyFeatures::fit(&data.x, degree);
        let phi_z = zf.transform(&data.z);
        let phi_x = xf.transform(&data.x);
        if data.n() <= phi_z.ncols() + 1 {
            return Err(MmrError::input("too few samples for the requested degree"));
        }
        let stage1 = ridge(&phi_z, &phi_x, ridge_penalty)?;
        let x_hat = with_intercept(&phi_z) * &stage1;
        let y = DMatrix::from_column_slice(data.n(), 1, data.y.as_slice());
        let stage2 = ridge(&x_hat, &y, ridge_penalty)?.column(0).into_owned();
        Ok(PolyRidgeModel {
            degree,
            ridge: ridge_penalty,
            z_features: zf,
            x_features: xf,
            stage1,
            stage2,
        })
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() * self.degree != self.x_features.means.len() {
            return Err(MmrError::input("prediction input has the wrong number of columns"));
        }
        Ok(with_intercept(&self.x_features.transform(x)) * &self.stage2)
    }

    /// Stage-2 prediction of `y` from instruments: `g(X̂(z))`.
    fn predict_from_instruments(&self, z: &DMatrix<f64>) -> DVector<f64> {
        let x_hat = with_intercept(&self.z_features.transform(z)) * &self.stage1;
        with_intercept(&x_hat) * &self.stage2
    }
}

pub const DEFAULT_MAX_DEGREE: usize = 5;
pub const DEFAULT_RIDGE_GRID: [f64; 5] = [0.0, 1e-4, 1e-3, 1e-2, 1e-1];

/// Contiguous `k`-fold split of `0..n` after a deterministic interleave.
pub(crate) fn kfold(n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(MmrError::input(format!("{k}-fold CV is invalid for n = {n}")));
    }
    Ok((0..k).map(|f| (f..n).step_by(k).collect()).collect())
}

fn complement(n: usize, fold: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in fold {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

/// Degree and ridge chosen by `cv_folds`-fold CV on the error of predicting
/// held-out `y` from held-out `z` through both stages.
pub fn fit_poly2sls(
    data: &Dataset,
    max_degree: usize,
    ridge_grid: &[f64],
    cv_folds: usize,
) -> Result<PolyRidgeModel> {
    if max_degree == 0 {
        return Err(MmrError::input("max degree must be at least 1"));
    }
    if ridge_grid.is_empty() {
        return Err(MmrError::input("ridge grid must be non-empty"));
    }
    let n = data.n();
    let folds = kfold(n, cv_folds)?;
    let mut best: Option<(f64, usize, f64)> = None;
    for degree in 1..=max_degree {
        for &r in ridge_grid {
            let mut err = 0.0;
            let mut ok = true;
            for fold in &folds {
                let train = data.select(&complement(n, fold));
                let test = data.select(fold);
                match PolyRidgeModel::fit(&train, degree, r) {
                    Ok(m) => err += (m.predict_from_instruments(&test.z) - &test.y).norm_squared(),
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok && err.is_finite() && best.is_none_or(|b| err < b.0) {
                best = Some((err, degree, r));
            }
        }
    }
    let (_, degree, r) =
        best.ok_or_else(|| MmrError::numerical("every polynomial 2SLS candidate failed"))?;
    PolyRidgeModel::fit(data, degree, r)
}

pub const DEFAULT_DIRECT_LAMBDA_GRID: [f64; 6] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];
pub const DEFAULT_CV_FOLDS: usize = 3;

fn krr_alpha(l: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let n = y.len();
    let mut a = l.clone();
    for i in 0..n {
        a[(i, i)] += n as f64 * lambda;
    }
    let ch = a
        .cholesky()
        .ok_or_else(|| MmrError::numerical("kernel ridge system is not positive definite"))?;
    Ok(ch.solve(y))
}

/// Kernel ridge regression of `Y` on `X` with an intercept:
/// `α = (L + nλI)⁻¹ (y − ȳ)`, `λ` by k-fold CV.
pub fn fit_direct_ridge(
    data: &Dataset,
    kernel_l: &KernelSpec,
    lambda_grid: &[f64],
    cv_folds: usize,
) -> Result<RkhsModel> {
    fit_direct_ridge_with(data, kernel_l, lambda_grid, cv_folds, Exec::default())
}

pub fn fit_direct_ridge_with(
    data: &Dataset,
    kernel_l: &KernelSpec,
    lambda_grid: &[f64],
    cv_folds: usize,
    exec: Exec,
) -> Result<RkhsModel> {
    let n = data.n();
    if n < 2 {
        return Err(MmrError::input("kernel ridge needs at least two samples"));
    }
    if lambda_grid.is_empty() || lambda_grid.iter().any(|l| !(*l > 0.0)) {
        return Err(MmrError::input("lambda grid must be non-empty and positive"));
    }
    let l = gram(kernel_l, &data.x)?.into_inner();
    let folds = kfold(n, cv_folds)?;
    let errors = exec.map(folds.len(), |f| -> Result<Vec<f64>> {
        let tr = complement(n, &folds[f]);
        let te = &folds[f];
        let l_tr = l.select_rows(&tr).select_columns(&tr);
        let l_te = l.select_rows(te).select_columns(&tr);
        let y_tr = data.y.select_rows(&tr);
        let mean = y_tr.mean();
        let y_te = data.y.select_rows(te).add_scalar(-mean);
        let y_tr = y_tr.add_scalar(-mean);
        lambda_grid
            .iter()
            .map(|&lam| {
                let a = krr_alpha(&l_tr, &y_tr, lam)?;
                Ok((&l_te * a - &y_te).norm_squared())
            })
            .collect()
    });
    let mut total = vec![0.0; lambda_grid.len()];
    let mut failed = vec![false; lambda_grid.len()];
    for e in errors {
        match e {
            Ok(v) => total.iter_mut().zip(v).for_each(|(t, x)| *t += x),
            Err(_) => failed.iter_mut().for_each(|f| *f = true),
        }
    }
    let best = (0..lambda_grid.len())
        .filter(|&i| !failed[i] && total[i].is_finite())
        .min_by(|&a, &b| total[a].total_cmp(&total[b]).then(lambda_grid[b].total_cmp(&lambda_grid[a])))
        .ok_or_else(|| MmrError::numerical("kernel ridge failed for every lambda"))?;
    let lambda = lambda_grid[best];
    let mean = data.y.mean();
    let alpha = krr_alpha(&l, &data.y.add_scalar(-mean), lambda)?;
    Ok(RkhsModel::new(alpha, data.x.clone(), kernel_l.clone(), lambda, 0.0)?.with_offset(mean))
}

/// Kernel ridge regression of `Y` on `X` at a fixed `λ`.
pub fn fit_kernel_ridge(data: &Dataset, kernel_l: &KernelSpec, lambda: f64) -> Result<RkhsModel> {
    if data.n() < 2 {
        return Err(MmrError::input("kernel ridge needs at least two samples"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(MmrError::input("lambda must be positive"));
    }
    let l = gram(kernel_l, &data.x)?.into_inner();
    let mean = data.y.mean();
    let alpha = krr_alpha(&l, &data.y.add_scalar(-mean), lambda)?;
    Ok(RkhsModel::new(alpha, data.x.clone(), kernel_l.clone(), lambda, 0.0)?.with_offset(mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{LowDimSpec, Truth};
    use crate::kernels::median_heuristic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn low_dim(truth: Truth, n: usize, seed: u64) -> Dataset {
        LowDimSpec { truth, n, seed }.generate()
    }

    #[test]
    fn exact_identification() {
        let z = DMatrix::from_fn(20, 1, |i, _| i as f64 * 0.3 - 2.0);
        let x = z.clone();
        let y = x.column(0).map(|v| 2.0 * v);
        let d = Dataset::new(x, y, z, None).unwrap();
        let m = fit_2sls(&d).unwrap();
        assert!((m.slopes()[0] - 2.0).abs() < 1e-10);
        assert!(m.intercept().abs() < 1e-10);
        assert!(!m.weak_instrument());
    }

    #[test]
    fn two_stage_corrects_confounding_bias() {
        let d = low_dim(Truth::Linear, 2000, 11);
        let iv = fit_2sls(&d).unwrap();
        assert!((iv.slopes()[0] - 1.0).abs() < 0.05, "2SLS slope {}", iv.slopes()[0]);
        let ols = fit_ols(&d.x, &d.y).unwrap();
        let plim = 1.0 + 1.0 / 4.01;
        assert!((ols.slopes()[0] - plim).abs() < 0.05, "OLS slope {}", ols.slopes()[0]);
    }

    #[test]
    fn irrelevant_instrument_is_flagged() {
        let n = 500;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
        let e: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x = DMatrix::from_fn(n, 1, |i, _| e[i] + 0.1 * rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] + e[i]);
        let d = Dataset::new(x, y, z, None).unwrap();
        match fit_2sls(&d) {
            Ok(m) => assert!(m.weak_instrument(), "F = {:?}", m.first_stage_f),
            Err(e) => assert!(e.is_numerical()),
        }
    }

    #[test]
    fn instrument_equal_to_treatment_is_ols() {
        let mut d = low_dim(Truth::Sin, 300, 2);
        d.z = d.x.clone();
        let iv = fit_2sls(&d).unwrap();
        let ols = fit_ols(&d.x, &d.y).unwrap();
        assert!((iv.coefficients - ols.coefficients).amax() < 1e-10);
    }

    #[test]
    fn degree_one_unpenalized_equals_2sls() {
        let mut d = low_dim(Truth::Abs, 400, 3);
        d.z = d.z.columns(0, 1).into_owned();
        let iv = fit_2sls(&d).unwrap();
        let p = PolyRidgeModel::fit(&d, 1, 0.0).unwrap();
        let probe = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let v = p.predict(&probe).unwrap();
        assert!((v[0] - iv.intercept()).abs() < 1e-8);
        assert!((v[1] - v[0] - iv.slopes()[0]).abs() < 1e-8);
    }

    #[test]
    fn linear_truth_selects_degree_one() {
        let mut hits = 0;
        for seed in 0..10 {
            let d = low_dim(Truth::Linear, 500, 100 + seed);
            let m = fit_poly2sls(&d, DEFAULT_MAX_DEGREE, &DEFAULT_RIDGE_GRID, 5).unwrap();
            hits += usize::from(m.degree == 1);
        }
        assert!(hits >= 8, "degree 1 on {hits}/10 seeds");
    }

    #[test]
    fn poly_rejects_degree_zero() {
        let d = low_dim(Truth::Abs, 50, 4);
        assert!(PolyRidgeModel::fit(&d, 0, 0.0).is_err());
        assert!(fit_poly2sls(&d, 0, &DEFAULT_RIDGE_GRID, 3).is_err());
    }

    #[test]
    fn direct_ridge_interpolates_clean_data() {
        let x = DMatrix::from_fn(60, 1, |i, _| -3.0 + 0.1 * i as f64);
        let y = x.column(0).map(f64::sin);
        let d = Dataset::new(x.clone(), y.clone(), x.clone(), None).unwrap();
        let spec = KernelSpec::gaussian(median_heuristic(&d.x).unwrap()).unwrap();
        let m = fit_direct_ridge(&d, &spec, &DEFAULT_DIRECT_LAMBDA_GRID, 3).unwrap();
        assert_eq!(m.lambda, 1e-6);
        assert!((m.predict(&x).unwrap() - y).amax() < 1e-2);
    }

    #[test]
    fn direct_ridge_constant_outcome() {
        let mut d = low_dim(Truth::Abs, 80, 5);
        d.y.fill(2.5);
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let m = fit_direct_ridge(&d, &spec, &DEFAULT_DIRECT_LAMBDA_GRID, 3).unwrap();
        let p = m.predict(&d.x).unwrap();
        assert!(p.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn kfold_partitions() {
        let f = kfold(10, 3).unwrap();
        let mut all: Vec<usize> = f.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(kfold(3, 1).is_err());
    }
}
