//! Empirical maximum-moment-restriction risks.
//!
//! With residuals `r = y − f(x)` and instrument Gram `K`, the V-statistic risk
//! is `rᵀ W_V r` with `W_V = K / n²`, and the U-statistic risk is `rᵀ W_U r`
//! with `W_U = (K − diag K) / (n(n−1))`. Both estimate
//! `E[(Y − f(X))(Y' − f(X')) k(Z, Z')]` over independent copies.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::datagen::Scenario;
use crate::error::{MmrError, Result};
use crate::kernels::{GramMatrix, KernelSpec};

/// Aligned treatment, outcome, and instrument columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub z: DMatrix<f64>,
    /// True structural values `f*(x)`, for scoring only.
    pub f_star: Option<DVector<f64>>,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        z: DMatrix<f64>,
        f_star: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(MmrError::input("dataset must have at least one row"));
        }
        if x.nrows() != n || z.nrows() != n {
            return Err(MmrError::input(format!(
                "row counts differ: x has {}, y has {n}, z has {}",
                x.nrows(),
                z.nrows()
            )));
        }
        if x.ncols() == 0 || z.ncols() == 0 {
            return Err(MmrError::input("x and z need at least one column"));
        }
        if let Some(f) = &f_star {
            if f.len() != n {
                return Err(MmrError::input("f_star length does not match row count"));
            }
        }
        let finite = x.iter().chain(y.iter()).chain(z.iter()).all(|v| v.is_finite())
            && f_star.as_ref().is_none_or(|f| f.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(MmrError::input("dataset contains non-finite values"));
        }
        Ok(Dataset { x, y, z, f_star })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            z: self.z.select_rows(idx),
            f_star: self.f_star.as_ref().map(|f| f.select_rows(idx)),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.x.ncols() != other.x.ncols() || self.z.ncols() != other.z.ncols() {
            return Err(MmrError::input("cannot concatenate datasets of different widths"));
        }
        let stack = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
            m.rows_mut(0, a.nrows()).copy_from(a);
            m.rows_mut(a.nrows(), b.nrows()).copy_from(b);
            m
        };
        let stack_v = |a: &DVector<f64>, b: &DVector<f64>| {
            DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
        };
        let f_star = match (&self.f_star, &other.f_star) {
            (Some(a), Some(b)) => Some(stack_v(a, b)),
            _ => None,
        };
        Ok(Dataset {
            x: stack(&self.x, &other.x),
            y: stack_v(&self.y, &other.y),
            z: stack(&self.z, &other.z),
            f_star,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightVariant {
    V,
    U,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    values: DMatrix<f64>,
    variant: WeightVariant,
}

impl WeightMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn variant(&self) -> WeightVariant {
        self.variant
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }
}

/// `W_V = K / n²`.
pub fn weight_v(k: &GramMatrix) -> WeightMatrix {
    let n = k.n() as f64;
    WeightMatrix {
        values: k.values() / (n * n),
        variant: WeightVariant::V,
    }
}

/// `W_U = (K − diag K) / (n(n−1))`; the diagonal is exactly zero.
pub fn weight_u(k: &GramMatrix) -> Result<WeightMatrix> {
    let n = k.n();
    if n < 2 {
        return Err(MmrError::input("U-statistic weights need n >= 2"));
    }
    let scale = (n * (n - 1)) as f64;
    let mut values = k.values() / scale;
    values.fill_diagonal(0.0);
    Ok(WeightMatrix {
        values,
        variant: WeightVariant::U,
    })
}

/// `rᵀ W r`.
pub fn empirical_risk(residuals: &DVector<f64>, w: &WeightMatrix) -> Result<f64> {
    if residuals.len() != w.n() {
        return Err(MmrError::input(format!(
            "residual length {} does not match weight matrix dimension {}",
            residuals.len(),
            w.n()
        )));
    }
    let q = residuals.dot(&(w.values() * residuals));
    Ok(match w.variant {
        // PSD in exact arithmetic; clamp rounding noise.
        WeightVariant::V => q.max(0.0),
        WeightVariant::U => q,
    })
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloRisk {
    pub estimate: f64,
    pub std_error: f64,
    pub reps: usize,
}

/// Estimates the population risk `E[(Y − f(X))(Y' − f(X')) k(Z, Z')]` from
/// `reps` independent pairs of draws from `scenario`.
pub fn population_risk_mc<F>(
    f: F,
    scenario: &Scenario,
    kernel: &KernelSpec,
    reps: usize,
    seed: u64,
) -> Result<MonteCarloRisk>
where
    F: Fn(&[f64]) -> f64,
{
    if reps == 0 {
        return Err(MmrError::input("population risk needs reps >= 1"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let first = scenario.sample(reps, rng.random())?;
    let second = scenario.sample(reps, rng.random())?;
    let row = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<_>>();
    let terms: Vec<f64> = (0..reps)
        .map(|i| {
            let (x, xp) = (row(&first.x, i), row(&second.x, i));
            let (z, zp) = (row(&first.z, i), row(&second.z, i));
            let r = first.y[i] - f(&x);
            let rp = second.y[i] - f(&xp);
            kernel.eval(&z, &zp).map(|k| r * rp * k)
        })
        .collect::<Result<_>>()?;
    let mean = terms.iter().sum::<f64>() / reps as f64;
    let std_error = if reps > 1 {
        let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        (var / reps as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(MonteCarloRisk {
        estimate: mean,
        std_error,
        reps,
    })
}
