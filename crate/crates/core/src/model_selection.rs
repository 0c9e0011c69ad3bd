//! Gaussian-process view of the V-statistic objective and analytic
//! leave-M-out cross-validation.
//!
//! The posterior over `f = Lα` has covariance `C = (K + (δL)⁻¹)⁻¹` and mean
//! `c = C K y`. With `δ = 1/(λn²)` the mean coincides with the fitted values
//! `Lα̂` of the closed-form solver, so `δ` plays the role of `λ`.
//!
//! For a held-out block `de`, the residual of the model refitted without the
//! `de × de` interactions is `r = (I − C_de K_de)⁻¹ (c_de − y_de)` and the CV
//! error is `Σ rᵀ K_de r` over folds.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MmrError, Result};
use crate::kernels::{median_heuristic, GramBlocks, GramMatrix, KernelOperator, KernelSpec};
use crate::nystrom::{cholesky_jittered, nystrom_factors, NystromFactors};
use crate::parallel::Exec;
use crate::risk::Dataset;

/// Default `λ` grid `{1e-8, …, 1e-1}`.
pub const DEFAULT_LAMBDA_GRID: [f64; 8] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];
/// Multipliers of the median heuristic forming the default bandwidth grid.
pub const DEFAULT_BANDWIDTH_FACTORS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

pub fn delta_from_lambda(lambda: f64, n: usize) -> f64 {
    1.0 / (lambda * (n * n) as f64)
}

pub fn lambda_from_delta(delta: f64, n: usize) -> f64 {
    1.0 / (delta * (n * n) as f64)
}

/// `{1/(λn²) : λ ∈ DEFAULT_LAMBDA_GRID}`.
pub fn default_delta_grid(n: usize) -> Vec<f64> {
    DEFAULT_LAMBDA_GRID
        .iter()
        .map(|&l| delta_from_lambda(l, n))
        .collect()
}

/// Hypothesis-kernel candidates: `base` with every bandwidth scaled by the
/// default factors. `base` is typically the median-heuristic kernel.
pub fn bandwidth_grid(base: &KernelSpec) -> Vec<KernelSpec> {
    bandwidth_grid_with(base, &DEFAULT_BANDWIDTH_FACTORS)
}

pub fn bandwidth_grid_with(base: &KernelSpec, factors: &[f64]) -> Vec<KernelSpec> {
    factors.iter().map(|&f| scale_bandwidth(base, f)).collect()
}

/// Gaussian kernels at the median heuristic of `x` times the default factors.
pub fn default_l_grid(x: &DMatrix<f64>) -> Result<Vec<KernelSpec>> {
    Ok(bandwidth_grid(&KernelSpec::Gaussian {
        sigma: median_heuristic(x)?,
    }))
}

pub fn scale_bandwidth(spec: &KernelSpec, factor: f64) -> KernelSpec {
    match spec {
        KernelSpec::Gaussian { sigma } => KernelSpec::Gaussian {
            sigma: sigma * factor,
        },
        KernelSpec::Laplacian { sigma } => KernelSpec::Laplacian {
            sigma: sigma * factor,
        },
        KernelSpec::InverseMultiquadric { c, gamma } => KernelSpec::InverseMultiquadric {
            c: c * factor,
            gamma: *gamma,
        },
        KernelSpec::SumGaussians { sigmas } => KernelSpec::SumGaussians {
            sigmas: sigmas.map(|s| s * factor),
        },
        KernelSpec::Ard { lengthscales } => KernelSpec::Ard {
            lengthscales: lengthscales.iter().map(|s| s * factor).collect(),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior {
    pub c: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub delta: f64,
    /// False when `cov` comes from the Nyström approximation.
    pub exact: bool,
}

/// Posterior mean and covariance blocks needed by the CV formula.
pub trait PosteriorBlocks {
    fn n(&self) -> usize;
    fn mean(&self) -> &DVector<f64>;
    fn cov_block(&self, idx: &[usize]) -> DMatrix<f64>;
}

impl PosteriorBlocks for GpPosterior {
    fn n(&self) -> usize {
        self.c.len()
    }

    fn mean(&self) -> &DVector<f64> {
        &self.c
    }

    fn cov_block(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.cov[(idx[a], idx[b])])
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(MmrError::input(format!("delta must be positive, got {delta}")))
    }
}

/// Exact posterior via the stable form `C = (I + δLK)⁻¹ δL`.
pub fn gp_posterior(
    k: &GramMatrix,
    l: &GramMatrix,
    y: &DVector<f64>,
    delta: f64,
) -> Result<GpPosterior> {
    check_delta(delta)?;
    let n = y.len();
    if k.n() != n || l.n() != n {
        return Err(MmrError::input("posterior: Gram sizes do not match y"));
    }
    let dl = l.values() * delta;
    let mut a = &dl * k.values();
    for i in 0..n {
        a[(i, i)] += 1.0;
    }
    let cov = a
        .lu()
        .solve(&dl)
        .filter(|c| c.iter().all(|v| v.is_finite()))
        .ok_or_else(|| MmrError::numerical("posterior system I + δLK is singular"))?;
    let cov = (&cov + cov.transpose()) * 0.5;
    let c = &cov * (k.values() * y);
    Ok(GpPosterior {
        c,
        cov,
        delta,
        exact: true,
    })
}

/// Low-rank posterior `C = δ[L − n²δ G Gᵀ]` with `G = LQ R⁻ᵀ`,
/// `R Rᵀ = n²δ QᵀLQ + I`, and mean `c = C (n² Q Qᵀ) y`. Covariance blocks are
/// evaluated on demand.
#[derive(Debug, Clone)]
pub struct LowRankPosterior {
    c: DVector<f64>,
    g: DMatrix<f64>,
    l: KernelOperator,
    delta: f64,
    n2: f64,
}

impl LowRankPosterior {
    /// `q`, `lq` and `qtlq = QᵀLQ` are reused across `δ`.
    pub fn new(
        q: &DMatrix<f64>,
        lq: &DMatrix<f64>,
        qtlq: &DMatrix<f64>,
        l: &KernelOperator,
        y: &DVector<f64>,
        delta: f64,
    ) -> Result<Self> {
        check_delta(delta)?;
        let n = y.len();
        if q.nrows() != n || lq.shape() != q.shape() || l.n() != n {
            return Err(MmrError::input("low-rank posterior: dimensions do not match"));
        }
        let r = q.ncols();
        let n2 = (n * n) as f64;
        let mut s = qtlq * (n2 * delta);
        for i in 0..r {
            s[(i, i)] += 1.0;
        }
        let (ch, _) = cholesky_jittered(&s, "posterior inner system")?;
        let v = q.transpose() * y;
        let sv = ch.solve(&(qtlq * &v));
        let c = lq * (v - sv * (n2 * delta)) * (n2 * delta);
        // G = LQ R⁻ᵀ  ⇔  Gᵀ = R⁻¹ (LQ)ᵀ
        let gt = ch
            .l_dirty()
            .solve_lower_triangular(&lq.transpose())
            .ok_or_else(|| MmrError::numerical("posterior factor is singular"))?;
        let g = gt.transpose();
        Ok(LowRankPosterior {
            c,
            g,
            l: l.clone(),
            delta,
            n2,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dense(&self) -> GpPosterior {
        let all: Vec<usize> = (0..self.c.len()).collect();
        GpPosterior {
            c: self.c.clone(),
            cov: self.cov_block(&all),
            delta: self.delta,
            exact: false,
        }
    }
}

impl PosteriorBlocks for LowRankPosterior {
    fn n(&self) -> usize {
        self.c.len()
    }

    fn mean(&self) -> &DVector<f64> {
        &self.c
    }

    fn cov_block(&self, idx: &[usize]) -> DMatrix<f64> {
        let l_de = self.l.block(idx, idx);
        let g_de = self.g.select_rows(idx);
        (l_de - &g_de * g_de.transpose() * (self.n2 * self.delta)) * self.delta
    }
}

/// Nyström posterior with a dense covariance; `l` must be the hypothesis
/// Gram on the same points as the factors.
pub fn gp_posterior_nystrom(
    factors: &NystromFactors,
    l: &GramMatrix,
    y: &DVector<f64>,
    delta: f64,
    l_spec: &KernelSpec,
    x: &DMatrix<f64>,
) -> Result<GpPosterior> {
    if factors.n() != y.len() || l.n() != y.len() {
        return Err(MmrError::input("Nyström posterior: dimensions do not match"));
    }
    let q = factors.q();
    let lq = l.values() * &q;
    let qtlq = q.transpose() * &lq;
    let op = KernelOperator::new(l_spec, x)?;
    Ok(LowRankPosterior::new(&q, &lq, &qtlq, &op, y, delta)?.dense())
}

/// Leave-M-out folds: disjoint index sets of equal size `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub leave_out: usize,
    pub folds: Vec<Vec<usize>>,
    pub repeats: usize,
}

impl CvPlan {
    pub fn new(leave_out: usize, folds: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        if leave_out == 0 {
            return Err(MmrError::input("leave-out size must be at least 1"));
        }
        if folds.is_empty() {
            return Err(MmrError::input("CV plan has no folds"));
        }
        let mut seen = vec![false; n];
        for (f, fold) in folds.iter().enumerate() {
            if fold.len() != leave_out {
                return Err(MmrError::input(format!(
                    "fold {f} has {} indices, expected {leave_out}",
                    fold.len()
                )));
            }
            for &i in fold {
                if i >= n {
                    return Err(MmrError::input(format!("fold {f} index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(MmrError::input(format!("index {i} appears in two folds")));
                }
            }
        }
        let repeats = folds.len();
        Ok(CvPlan {
            leave_out,
            folds,
            repeats,
        })
    }

    /// Random disjoint partition into `⌊n/M⌋` folds of size `M`; the
    /// `n mod M` leftover points are never held out.
    pub fn random_partition(n: usize, leave_out: usize, seed: u64) -> Result<Self> {
        if leave_out == 0 || leave_out > n {
            return Err(MmrError::input(format!(
                "leave-out size {leave_out} invalid for n = {n}"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
        let folds = idx
            .chunks_exact(leave_out)
            .map(|c| {
                let mut f = c.to_vec();
                f.sort_unstable();
                f
            })
            .collect();
        CvPlan::new(leave_out, folds, n)
    }
}

/// `Σ rᵀ K_de r` with `r = (I − C_de K_de)⁻¹ (c_de − y_de)` over folds.
pub fn lmocv_error<P, G>(posterior: &P, k: &G, y: &DVector<f64>, plan: &CvPlan) -> Result<f64>
where
    P: PosteriorBlocks + ?Sized,
    G: GramBlocks + ?Sized,
{
    let n = y.len();
    if posterior.n() != n || k.n() != n {
        return Err(MmrError::input("LMOCV: posterior, Gram and y sizes differ"));
    }
    let c = posterior.mean();
    let mut total = 0.0;
    for (f, idx) in plan.folds.iter().enumerate() {
        if idx.iter().any(|&i| i >= n) {
            return Err(MmrError::input(format!("fold {f} has an index out of range")));
        }
        let m = idx.len();
        let c_de = posterior.cov_block(idx);
        let k_de = k.block(idx, idx);
        let mut a = -(&c_de * &k_de);
        for i in 0..m {
            a[(i, i)] += 1.0;
        }
        let b = DVector::from_fn(m, |a, _| c[idx[a]] - y[idx[a]]);
        let r = a
            .lu()
            .solve(&b)
            .filter(|r| r.iter().all(|v| v.is_finite()))
            .ok_or_else(|| MmrError::numerical(format!("I − C_de K_de is singular on fold {f}")))?;
        total += (r.transpose() * &k_de * &r)[(0, 0)];
    }
    if !total.is_finite() {
        return Err(MmrError::numerical("LMOCV error is not finite"));
    }
    Ok(total)
}

/// How the posterior is computed during selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PosteriorMode {
    Exact,
    Nystrom { m: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub delta: f64,
    pub kernel_l: KernelSpec,
    pub cv_error: f64,
    pub status: String,
}

impl CvRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub delta: f64,
    pub kernel_l: KernelSpec,
    pub cv_error: f64,
    pub table: Vec<CvRow>,
}

impl Selection {
    pub fn lambda(&self, n: usize) -> f64 {
        lambda_from_delta(self.delta, n)
    }
}

/// Index of the smallest CV error; ties go to the larger `δ`.
pub fn pick_best(table: &[CvRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, row) in table.iter().enumerate() {
        if !row.is_ok() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &table[b];
                if row.cv_error < cur.cv_error
                    || (row.cv_error == cur.cv_error && row.delta > cur.delta)
                {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

fn row(delta: f64, kernel_l: &KernelSpec, res: Result<f64>) -> CvRow {
    match res {
        Ok(e) => CvRow {
            delta,
            kernel_l: kernel_l.clone(),
            cv_error: e,
            status: "ok".into(),
        },
        Err(e) => CvRow {
            delta,
            kernel_l: kernel_l.clone(),
            cv_error: f64::NAN,
            status: format!("failed: {e}"),
        },
    }
}

/// Evaluates the LMOCV error on every `(δ, l)` pair and returns the argmin.
pub fn select_hyperparams(
    data: &Dataset,
    kernel_k: &KernelSpec,
    l_grid: &[KernelSpec],
    delta_grid: &[f64],
    plan: &CvPlan,
    mode: PosteriorMode,
) -> Result<Selection> {
    select_hyperparams_with(data, kernel_k, l_grid, delta_grid, plan, mode, Exec::default())
}

pub fn select_hyperparams_with(
    data: &Dataset,
    kernel_k: &KernelSpec,
    l_grid: &[KernelSpec],
    delta_grid: &[f64],
    plan: &CvPlan,
    mode: PosteriorMode,
    exec: Exec,
) -> Result<Selection> {
    if l_grid.is_empty() || delta_grid.is_empty() {
        return Err(MmrError::input("selection grids must be non-empty"));
    }
    let k_op = KernelOperator::new(kernel_k, &data.z)?;
    let y = &data.y;
    let blocks: Vec<Vec<CvRow>> = match mode {
        PosteriorMode::Exact => {
            let k = k_op.dense(exec);
            exec.map(l_grid.len(), |j| {
                let spec = &l_grid[j];
                match KernelOperator::new(spec, &data.x) {
                    Err(e) => delta_grid
                        .iter()
                        .map(|&d| row(d, spec, Err(MmrError::input(e.to_string()))))
                        .collect(),
                    Ok(op) => {
                        let l = op.dense(Exec::Sequential);
                        delta_grid
                            .iter()
                            .map(|&d| {
                                let res = gp_posterior(&k, &l, y, d)
                                    .and_then(|p| lmocv_error(&p, &k, y, plan));
                                row(d, spec, res)
                            })
                            .collect()
                    }
                }
            })
        }
        PosteriorMode::Nystrom { m, seed } => {
            let factors = nystrom_factors(&k_op, m.min(data.n()), seed)?;
            let q = factors.q();
            exec.map(l_grid.len(), |j| {
                let spec = &l_grid[j];
                let prepared = KernelOperator::new(spec, &data.x).and_then(|op| {
                    let lq = op.apply(&q, Exec::Sequential)?;
                    let qtlq = q.transpose() * &lq;
                    Ok((op, lq, qtlq))
                });
                match prepared {
                    Err(e) => delta_grid
                        .iter()
                        .map(|&d| row(d, spec, Err(MmrError::input(e.to_string()))))
                        .collect(),
                    Ok((op, lq, qtlq)) => delta_grid
                        .iter()
                        .map(|&d| {
                            let res = LowRankPosterior::new(&q, &lq, &qtlq, &op, y, d)
                                .and_then(|p| lmocv_error(&p, &k_op, y, plan));
                            row(d, spec, res)
                        })
                        .collect(),
                }
            })
        }
    };
    let table: Vec<CvRow> = blocks.into_iter().flatten().collect();
    let best = pick_best(&table).ok_or_else(|| {
        MmrError::numerical(format!(
            "every grid point failed; first failure: {}",
            table[0].status
        ))
    })?;
    Ok(Selection {
        delta: table[best].delta,
        kernel_l: table[best].kernel_l.clone(),
        cv_error: table[best].cv_error,
        table,
    })
}
