//! Positive-definite kernels on real vectors, Gram matrices, and the median
//! bandwidth heuristic.
//!
//! Points are stored as `n × dim` matrices with one observation per row.
//! Every kernel in [`KernelSpec`] is bounded and integrally strictly positive
//! definite for the parameter ranges accepted by [`KernelSpec::validate`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MmrError, Result};
use crate::parallel::Exec;

/// Rows per block when streaming kernel-matrix products.
const STREAM_BLOCK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(-‖z − z'‖₂² / (2σ²))`
    Gaussian { sigma: f64 },
    /// `exp(-‖z − z'‖₁ / σ)`
    Laplacian { sigma: f64 },
    /// `(c² + ‖z − z'‖₂²)^(-γ)`
    InverseMultiquadric { c: f64, gamma: f64 },
    /// Equal-weight mixture of three Gaussians.
    SumGaussians { sigmas: [f64; 3] },
    /// Gaussian with one lengthscale per input dimension.
    Ard { lengthscales: Vec<f64> },
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        let k = KernelSpec::Gaussian { sigma };
        k.validate()?;
        Ok(k)
    }

    pub fn sum_gaussians(sigmas: [f64; 3]) -> Result<Self> {
        let k = KernelSpec::SumGaussians { sigmas };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(MmrError::input(format!(
                    "kernel parameter {name} must be finite and positive, got {v}"
                )))
            }
        };
        match self {
            KernelSpec::Gaussian { sigma } | KernelSpec::Laplacian { sigma } => {
                positive("sigma", *sigma)
            }
            KernelSpec::InverseMultiquadric { c, gamma } => {
                positive("c", *c)?;
                positive("gamma", *gamma)
            }
            KernelSpec::SumGaussians { sigmas } => {
                sigmas.iter().try_for_each(|s| positive("sigma", *s))
            }
            KernelSpec::Ard { lengthscales } => {
                if lengthscales.is_empty() {
                    return Err(MmrError::input("ARD kernel needs at least one lengthscale"));
                }
                lengthscales.iter().try_for_each(|s| positive("lengthscale", *s))
            }
        }
    }

    /// Short label used in result tables, e.g. `gaussian(sigma=0.7)`.
    pub fn label(&self) -> String {
        match self {
            KernelSpec::Gaussian { sigma } => format!("gaussian(sigma={sigma})"),
            KernelSpec::Laplacian { sigma } => format!("laplacian(sigma={sigma})"),
            KernelSpec::InverseMultiquadric { c, gamma } => format!("imq(c={c},gamma={gamma})"),
            KernelSpec::SumGaussians { sigmas } => format!(
                "sum_gaussians(sigmas={},{},{})",
                sigmas[0], sigmas[1], sigmas[2]
            ),
            KernelSpec::Ard { lengthscales } => format!("ard(lengthscales={lengthscales:?})"),
        }
    }

    /// The bandwidth parameters as a flat list, for CSV output.
    pub fn params(&self) -> Vec<f64> {
        match self {
            KernelSpec::Gaussian { sigma } | KernelSpec::Laplacian { sigma } => vec![*sigma],
            KernelSpec::InverseMultiquadric { c, gamma } => vec![*c, *gamma],
            KernelSpec::SumGaussians { sigmas } => sigmas.to_vec(),
            KernelSpec::Ard { lengthscales } => lengthscales.clone(),
        }
    }

    /// Evaluates `k(z, z')`.
    pub fn eval(&self, z: &[f64], z_prime: &[f64]) -> Result<f64> {
        self.validate()?;
        if z.len() != z_prime.len() {
            return Err(MmrError::input(format!(
                "kernel arguments have dimensions {} and {}",
                z.len(),
                z_prime.len()
            )));
        }
        if let KernelSpec::Ard { lengthscales } = self {
            if lengthscales.len() != z.len() {
                return Err(MmrError::input(format!(
                    "ARD kernel has {} lengthscales but inputs have dimension {}",
                    lengthscales.len(),
                    z.len()
                )));
            }
        }
        Ok(self.eval_unchecked(z, z_prime))
    }

    /// Evaluation without argument checks; callers guarantee matching dimensions.
    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            KernelSpec::Gaussian { sigma } => (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp(),
            KernelSpec::Laplacian { sigma } => {
                let l1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
                (-l1 / sigma).exp()
            }
            KernelSpec::InverseMultiquadric { c, gamma } => {
                (c * c + sq_dist(a, b)).powf(-gamma)
            }
            KernelSpec::SumGaussians { sigmas } => {
                let d2 = sq_dist(a, b);
                sigmas
                    .iter()
                    .map(|s| (-d2 / (2.0 * s * s)).exp())
                    .sum::<f64>()
                    / 3.0
            }
            KernelSpec::Ard { lengthscales } => {
                let q: f64 = a
                    .iter()
                    .zip(b)
                    .zip(lengthscales)
                    .map(|((x, y), l)| {
                        let d = (x - y) / l;
                        d * d
                    })
                    .sum();
                (-0.5 * q).exp()
            }
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        self.validate()?;
        if let KernelSpec::Ard { lengthscales } = self {
            if lengthscales.len() != dim {
                return Err(MmrError::input(format!(
                    "ARD kernel has {} lengthscales but points have dimension {dim}",
                    lengthscales.len()
                )));
            }
        }
        Ok(())
    }
}

/// Squared Euclidean distance by direct differences. Exactly symmetric in its
/// arguments and never negative.
#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Row-major copy of a point matrix, so each observation is a contiguous slice.
#[derive(Debug, Clone)]
pub(crate) struct Rows {
    data: Vec<f64>,
    n: usize,
    dim: usize,
}

impl Rows {
    pub(crate) fn new(points: &DMatrix<f64>) -> Self {
        let (n, dim) = points.shape();
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            for j in 0..dim {
                data.push(points[(i, j)]);
            }
        }
        Rows { data, n, dim }
    }

    #[inline]
    pub(crate) fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn len(&self) -> usize {
        self.n
    }
}

/// A dense symmetric kernel matrix `K[i][j] = k(p_i, p_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    values: DMatrix<f64>,
    source: String,
}

impl GramMatrix {
    /// Wraps an existing symmetric matrix. Rejects non-square or asymmetric input.
    pub fn from_matrix(values: DMatrix<f64>, source: impl Into<String>) -> Result<Self> {
        if !values.is_square() || values.nrows() == 0 {
            return Err(MmrError::input("Gram matrix must be square and non-empty"));
        }
        let n = values.nrows();
        for j in 0..n {
            for i in 0..j {
                let (a, b) = (values[(i, j)], values[(j, i)]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(MmrError::input(format!(
                        "Gram matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(GramMatrix {
            values,
            source: source.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn is_symmetric(&self) -> bool {
        self.values == self.values.transpose()
    }
}

/// Sub-blocks of a kernel matrix, either from a materialized Gram or computed
/// on demand from the points.
pub trait GramBlocks {
    fn n(&self) -> usize;
    fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64>;
}

impl GramBlocks for GramMatrix {
    fn n(&self) -> usize {
        self.n()
    }

    fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |a, b| {
            self.values[(rows[a], cols[b])]
        })
    }
}

/// A kernel bound to a point set; produces Gram blocks and kernel-matrix
/// products without storing the full `n × n` matrix.
#[derive(Debug, Clone)]
pub struct KernelOperator {
    spec: KernelSpec,
    rows: Rows,
}

impl KernelOperator {
    pub fn new(spec: &KernelSpec, points: &DMatrix<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(MmrError::input("kernel operator needs at least one point"));
        }
        spec.check_dim(points.ncols())?;
        Ok(KernelOperator {
            spec: spec.clone(),
            rows: Rows::new(points),
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    /// `n × |cols|` matrix of kernel values between all points and the given subset.
    pub fn columns(&self, cols: &[usize]) -> DMatrix<f64> {
        let n = self.rows.len();
        DMatrix::from_fn(n, cols.len(), |i, b| {
            self.spec
                .eval_unchecked(self.rows.row(i), self.rows.row(cols[b]))
        })
    }

    /// `L · rhs` computed in row blocks; memory is `O(block · n)` per worker.
    pub fn apply(&self, rhs: &DMatrix<f64>, exec: Exec) -> Result<DMatrix<f64>> {
        let n = self.rows.len();
        if rhs.nrows() != n {
            return Err(MmrError::input(format!(
                "kernel product: operator has {n} points but right-hand side has {} rows",
                rhs.nrows()
            )));
        }
        let m = rhs.ncols();
        let blocks = n.div_ceil(STREAM_BLOCK);
        let parts = exec.map(blocks, |b| {
            let r0 = b * STREAM_BLOCK;
            let r1 = (r0 + STREAM_BLOCK).min(n);
            let block = DMatrix::from_fn(r1 - r0, n, |i, j| {
                self.spec
                    .eval_unchecked(self.rows.row(r0 + i), self.rows.row(j))
            });
            block * rhs
        });
        let mut out = DMatrix::zeros(n, m);
        for (b, part) in parts.into_iter().enumerate() {
            let r0 = b * STREAM_BLOCK;
            out.rows_mut(r0, part.nrows()).copy_from(&part);
        }
        Ok(out)
    }

    /// Materializes the full Gram matrix.
    pub fn dense(&self, exec: Exec) -> GramMatrix {
        let n = self.rows.len();
        let mut data = vec![0.0; n * n];
        // Column j of the column-major buffer holds entries (i, j) for i ≤ j.
        exec.for_each_chunk_mut(&mut data, n, |j, col| {
            let pj = self.rows.row(j);
            for (i, v) in col.iter_mut().enumerate().take(j + 1) {
                *v = self.spec.eval_unchecked(self.rows.row(i), pj);
            }
        });
        let mut values = DMatrix::from_vec(n, n, data);
        for j in 0..n {
            for i in (j + 1)..n {
                values[(i, j)] = values[(j, i)];
            }
        }
        GramMatrix {
            values,
            source: self.spec.label(),
        }
    }
}

impl GramBlocks for KernelOperator {
    fn n(&self) -> usize {
        self.rows.len()
    }

    fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |a, b| {
            self.spec
                .eval_unchecked(self.rows.row(rows[a]), self.rows.row(cols[b]))
        })
    }
}

pub fn gram(spec: &KernelSpec, points: &DMatrix<f64>) -> Result<GramMatrix> {
    gram_with(spec, points, Exec::default())
}

pub fn gram_with(spec: &KernelSpec, points: &DMatrix<f64>, exec: Exec) -> Result<GramMatrix> {
    Ok(KernelOperator::new(spec, points)?.dense(exec))
}

/// `m × n` matrix `k(a_i, b_j)`; used for prediction at new points.
pub fn cross_gram(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(MmrError::input(format!(
            "cross Gram: point dimensions {} and {} differ",
            a.ncols(),
            b.ncols()
        )));
    }
    spec.check_dim(a.ncols())?;
    let (ra, rb) = (Rows::new(a), Rows::new(b));
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        spec.eval_unchecked(ra.row(i), rb.row(j))
    }))
}

/// `k(a_i, b) · coef` summed over the rows of `b`, for each row of `a`.
pub(crate) fn cross_apply(
    spec: &KernelSpec,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    coef: &DVector<f64>,
    exec: Exec,
) -> Result<DVector<f64>> {
    if a.ncols() != b.ncols() {
        return Err(MmrError::input(format!(
            "prediction inputs have {} columns but the model was trained on {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if coef.len() != b.nrows() {
        return Err(MmrError::input("coefficient length does not match training points"));
    }
    spec.check_dim(a.ncols())?;
    let (ra, rb) = (Rows::new(a), Rows::new(b));
    let out = exec.map(a.nrows(), |i| {
        let p = ra.row(i);
        (0..rb.len())
            .map(|j| spec.eval_unchecked(p, rb.row(j)) * coef[j])
            .sum::<f64>()
    });
    Ok(DVector::from_vec(out))
}

/// Median of the `n(n−1)/2` pairwise Euclidean distances. For an even count
/// the two central order statistics are averaged.
pub fn median_heuristic(points: &DMatrix<f64>) -> Result<f64> {
    let n = points.nrows();
    if n < 2 {
        return Err(MmrError::input("median heuristic needs at least two points"));
    }
    let rows = Rows::new(points);
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(sq_dist(rows.row(i), rows.row(j)).sqrt());
        }
    }
    let len = d.len();
    let hi_idx = len / 2;
    let (_, hi, _) = d.select_nth_unstable_by(hi_idx, f64::total_cmp);
    let hi = *hi;
    let med = if len % 2 == 1 {
        hi
    } else {
        // Largest element of the lower half.
        let lo = d[..hi_idx].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    if !(med > 0.0) {
        return Err(MmrError::input(
            "median interpoint distance is zero; bandwidth would be degenerate",
        ));
    }
    Ok(med)
}

/// Three-Gaussian mixture with bandwidths `(s, 0.1 s, 10 s)` where `s` is the
/// median interpoint distance.
pub fn sum_gaussians_from_median(points: &DMatrix<f64>) -> Result<KernelSpec> {
    let s = median_heuristic(points)?;
    KernelSpec::sum_gaussians([s, 0.1 * s, 10.0 * s])
}

/// Kernel selection as written in configuration files:
/// `{ family = "sum_gaussians", mode = "median" }` or
/// `{ family = "gaussian", sigma = 0.7 }`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigmas: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengthscales: Option<Vec<f64>>,
}

impl KernelConfig {
    pub fn median(family: &str) -> Self {
        KernelConfig {
            family: family.to_string(),
            mode: Some("median".to_string()),
            ..Default::default()
        }
    }

    pub fn uses_median(&self) -> bool {
        self.mode.as_deref() == Some("median")
    }

    /// Resolves to a concrete kernel, running the median heuristic on `points`
    /// when `mode = "median"`.
    pub fn resolve(&self, points: &DMatrix<f64>) -> Result<KernelSpec> {
        let missing = |what: &str| {
            MmrError::Config(format!(
                "kernel family '{}' needs '{what}' or mode = \"median\"",
                self.family
            ))
        };
        if let Some(mode) = &self.mode {
            if mode != "median" {
                return Err(MmrError::Config(format!("unknown kernel mode '{mode}'")));
            }
        }
        let median = || median_heuristic(points);
        let spec = match self.family.as_str() {
            "gaussian" => KernelSpec::Gaussian {
                sigma: match self.sigma {
                    Some(s) => s,
                    None if self.uses_median() => median()?,
                    None => return Err(missing("sigma")),
                },
            },
            "laplacian" => KernelSpec::Laplacian {
                sigma: match self.sigma {
                    Some(s) => s,
                    None if self.uses_median() => median()?,
                    None => return Err(missing("sigma")),
                },
            },
            "sum_gaussians" => match self.sigmas {
                Some(sigmas) => KernelSpec::SumGaussians { sigmas },
                None if self.uses_median() => sum_gaussians_from_median(points)?,
                None => return Err(missing("sigmas")),
            },
            "inverse_multiquadric" => KernelSpec::InverseMultiquadric {
                c: self.c.ok_or_else(|| missing("c"))?,
                gamma: self.gamma.ok_or_else(|| missing("gamma"))?,
            },
            "ard" => match &self.lengthscales {
                Some(ls) => KernelSpec::Ard {
                    lengthscales: ls.clone(),
                },
                None if self.uses_median() => {
                    let cols = (0..points.ncols())
                        .map(|j| median_heuristic(&points.columns(j, 1).into_owned()))
                        .collect::<Result<Vec<_>>>()?;
                    KernelSpec::Ard { lengthscales: cols }
                }
                None => return Err(missing("lengthscales")),
            },
            other => {
                return Err(MmrError::Config(format!("unknown kernel family '{other}'")));
            }
        };
        spec.validate().map_err(|e| MmrError::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    fn families(dim: usize) -> Vec<KernelSpec> {
        vec![
            KernelSpec::Gaussian { sigma: 0.8 },
            KernelSpec::Laplacian { sigma: 1.3 },
            KernelSpec::InverseMultiquadric { c: 1.0, gamma: 0.5 },
            KernelSpec::SumGaussians {
                sigmas: [1.0, 0.1, 10.0],
            },
            KernelSpec::Ard {
                lengthscales: (0..dim).map(|d| 0.5 + d as f64).collect(),
            },
        ]
    }

    #[test]
    fn closed_form_values() {
        let g = KernelSpec::Gaussian { sigma: 1.0 };
        assert_eq!(g.eval(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 1.0);
        let v = g.eval(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.367879).abs() < 1e-6);
        let imq = KernelSpec::InverseMultiquadric { c: 1.0, gamma: 1.0 };
        assert_eq!(imq.eval(&[2.0], &[2.0]).unwrap(), 1.0);
        let sg = KernelSpec::SumGaussians {
            sigmas: [1.0, 0.1, 10.0],
        };
        assert!((sg.eval(&[5.0], &[5.0]).unwrap() - 1.0).abs() < 1e-15);
        let lap = KernelSpec::Laplacian { sigma: 2.0 };
        let v = lap.eval(&[0.0, 0.0], &[1.0, -1.0]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn eval_rejects_bad_input() {
        let g = KernelSpec::Gaussian { sigma: 1.0 };
        assert!(g.eval(&[0.0], &[0.0, 1.0]).is_err());
        let ard = KernelSpec::Ard {
            lengthscales: vec![1.0, 2.0],
        };
        assert!(ard.eval(&[0.0], &[1.0]).is_err());
        assert!(KernelSpec::Gaussian { sigma: 0.0 }.eval(&[0.0], &[0.0]).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
        assert!(KernelSpec::sum_gaussians([1.0, f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn gram_examples() {
        let g = KernelSpec::Gaussian { sigma: 1.0 };
        let k = gram(&g, &col(&[0.0, 1.0])).unwrap();
        let e = (-0.5f64).exp();
        assert_eq!(k.values()[(0, 0)], 1.0);
        assert!((k.values()[(0, 1)] - e).abs() < 1e-15);
        assert!(k.is_symmetric());
        let single = gram(&g, &col(&[4.0])).unwrap();
        assert_eq!(single.values().shape(), (1, 1));
        assert_eq!(single.values()[(0, 0)], 1.0);
        assert!(gram(&g, &DMatrix::zeros(0, 1)).is_err());
    }

    #[test]
    fn gram_parallel_and_sequential_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = DMatrix::from_fn(300, 2, |_, _| rng.random_range(-3.0..3.0));
        let spec = KernelSpec::SumGaussians {
            sigmas: [1.0, 0.1, 10.0],
        };
        let a = gram_with(&spec, &pts, Exec::Sequential).unwrap();
        let b = gram_with(&spec, &pts, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn streamed_product_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = DMatrix::from_fn(301, 1, |_, _| rng.random_range(-3.0..3.0));
        let rhs = DMatrix::from_fn(301, 4, |_, _| rng.random_range(-1.0..1.0));
        let spec = KernelSpec::Gaussian { sigma: 0.7 };
        let op = KernelOperator::new(&spec, &pts).unwrap();
        let dense = op.dense(Exec::Sequential);
        let want = dense.values() * &rhs;
        let got = op.apply(&rhs, Exec::default()).unwrap();
        assert!((want - got).amax() < 1e-12);
        let idx = [3usize, 17, 200];
        assert_eq!(op.block(&idx, &idx), dense.block(&idx, &idx));
        let c = op.columns(&idx);
        assert_eq!(c.column(1), dense.values().column(17));
    }

    #[test]
    fn identity_subset_gram_equals_full() {
        let pts = col(&[0.1, -0.4, 2.0, 1.1]);
        let spec = KernelSpec::Gaussian { sigma: 1.0 };
        let op = KernelOperator::new(&spec, &pts).unwrap();
        let all: Vec<usize> = (0..4).collect();
        assert_eq!(op.block(&all, &all), gram(&spec, &pts).unwrap().into_inner());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_heuristic(&col(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(median_heuristic(&col(&[0.0, 1.0, 3.0])).unwrap(), 2.0);
        // Distances {1, 2, 3, 1, 2, 1}: sorted 1,1,1,2,2,3 -> (1 + 2) / 2.
        assert_eq!(median_heuristic(&col(&[0.0, 1.0, 2.0, 3.0])).unwrap(), 1.5);
        assert!(median_heuristic(&col(&[0.0, 0.0, 0.0])).is_err());
        assert!(median_heuristic(&col(&[1.0])).is_err());
    }

    #[test]
    fn sum_gaussians_bandwidths_follow_median() {
        let k = sum_gaussians_from_median(&col(&[0.0, 1.0])).unwrap();
        assert_eq!(
            k,
            KernelSpec::SumGaussians {
                sigmas: [1.0, 0.1, 10.0]
            }
        );
        let k = sum_gaussians_from_median(&col(&[0.0, 2.0])).unwrap();
        match k {
            KernelSpec::SumGaussians { sigmas } => {
                assert_eq!(sigmas[0], 2.0);
                assert!((sigmas[1] - 0.2).abs() < 1e-15);
                assert_eq!(sigmas[2], 20.0);
            }
            _ => unreachable!(),
        }
        assert!(sum_gaussians_from_median(&col(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn symmetry_and_boundedness_all_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for spec in families(3) {
            for _ in 0..1000 {
                let a: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
                let b: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
                let (ab, ba) = (spec.eval(&a, &b).unwrap(), spec.eval(&b, &a).unwrap());
                assert_eq!(ab, ba, "{spec:?}");
                let aa = spec.eval(&a, &a).unwrap();
                assert!(aa.is_finite() && aa > 0.0 && aa <= 1.0);
            }
        }
    }

    #[test]
    fn gram_psd_spot_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts = DMatrix::from_fn(50, 3, |_, _| rng.random_range(-3.0..3.0));
        for spec in families(3) {
            let k = gram(&spec, &pts).unwrap();
            assert!(k.is_symmetric());
            for i in 0..50 {
                assert_eq!(
                    k.values()[(i, i)],
                    spec.eval(
                        &pts.row(i).iter().copied().collect::<Vec<_>>(),
                        &pts.row(i).iter().copied().collect::<Vec<_>>()
                    )
                    .unwrap()
                );
            }
            let eig = SymmetricEigen::new(k.into_inner()).eigenvalues;
            let (lo, hi) = (eig.min(), eig.max());
            assert!(lo >= -1e-8 * hi, "{spec:?}: min eig {lo}, max {hi}");
        }
    }

    #[test]
    fn config_resolution() {
        let pts = col(&[0.0, 1.0, 3.0]);
        let k = KernelConfig::median("sum_gaussians").resolve(&pts).unwrap();
        assert_eq!(
            k,
            KernelSpec::SumGaussians {
                sigmas: [2.0, 0.2, 20.0]
            }
        );
        let cfg: KernelConfig = toml::from_str("family = \"gaussian\"\nsigma = 0.7").unwrap();
        assert_eq!(
            cfg.resolve(&pts).unwrap(),
            KernelSpec::Gaussian { sigma: 0.7 }
        );
        let bad: KernelConfig = toml::from_str("family = \"gaussian\"").unwrap();
        assert!(bad.resolve(&pts).is_err());
        let unknown: KernelConfig = toml::from_str("family = \"cosine\"\nsigma = 1.0").unwrap();
        assert!(unknown.resolve(&pts).is_err());
    }

    #[test]
    fn spec_serde_round_trip() {
        for spec in families(2) {
            let s = serde_json::to_string(&spec).unwrap();
            let back: KernelSpec = serde_json::from_str(&s).unwrap();
            assert_eq!(spec, back);
        }
    }
}
