//! Empirical checks of the estimator's theoretical properties: consistency,
//! asymptotic normality of the linear estimator, indefiniteness of the
//! U-statistic weights, and identification of `f*` by the V-risk.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::datagen::{split_seed, LowDimSpec, Scenario, Truth};
use crate::error::{MmrError, Result};
use crate::harness::{run_repetition, ExperimentConfig, Method, RecordStatus, ScenarioConfig};
use crate::kernels::{sum_gaussians_from_median, GramMatrix, KernelOperator};
use crate::parallel::Exec;
use crate::risk::weight_u;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyRow {
    pub n: usize,
    pub median_mse: f64,
    pub mses: Vec<f64>,
    pub failed: usize,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Median test error of `method` at each sample size, one repetition per
/// seed. Method settings come from `base`; its scenario, methods, and `n`
/// are replaced.
pub fn consistency_sweep(
    base: &ExperimentConfig,
    scenario: &ScenarioConfig,
    method: Method,
    n_list: &[usize],
    seeds: &[u64],
) -> Result<Vec<ConsistencyRow>> {
    if n_list.is_empty() || seeds.is_empty() {
        return Err(MmrError::input("consistency sweep needs sample sizes and seeds"));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MmrError::input("sample sizes must be strictly increasing"));
    }
    let mut cfg = base.clone();
    cfg.scenario = scenario.clone();
    cfg.methods = vec![method];
    n_list
        .iter()
        .map(|&n| {
            cfg.n = n;
            cfg.validate()?;
            let mut mses = Vec::with_capacity(seeds.len());
            for &s in seeds {
                let r = run_repetition(&cfg, method, s);
                match r.status {
                    RecordStatus::Ok => mses.push(r.test_mse),
                    RecordStatus::Failed { numerical: false, message } => {
                        return Err(MmrError::input(message))
                    }
                    RecordStatus::Failed { .. } => {}
                }
            }
            Ok(ConsistencyRow {
                n,
                median_mse: median(&mses),
                failed: seeds.len() - mses.len(),
                mses,
            })
        })
        .collect()
}

pub const SKEW_THRESHOLD: f64 = 0.2;
pub const KURTOSIS_THRESHOLD: f64 = 0.5;
pub const MIN_REPLICATIONS: usize = 30;

/// Moments of a sample: mean, unbiased variance, standardized skewness, and
/// excess kurtosis (both from central moments with `1/R` normalization).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShapeStats {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

pub fn shape_stats(v: &[f64]) -> Result<ShapeStats> {
    let r = v.len();
    if r < 2 {
        return Err(MmrError::input("shape statistics need at least two values"));
    }
    let rf = r as f64;
    let mean = v.iter().sum::<f64>() / rf;
    let moment = |p: i32| v.iter().map(|x| (x - mean).powi(p)).sum::<f64>() / rf;
    let (m2, m3, m4) = (moment(2), moment(3), moment(4));
    if !(m2 > 0.0) {
        return Err(MmrError::numerical("sample has zero variance"));
    }
    Ok(ShapeStats {
        mean,
        variance: m2 * rf / (rf - 1.0),
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalityReport {
    pub n: usize,
    /// Replications requested.
    pub replications: usize,
    /// Replications dropped after a failed fit.
    pub dropped: usize,
    /// `√n(θ̂ − θ*)` per kept replication.
    pub estimates: Vec<f64>,
    pub stats: ShapeStats,
    /// Mean of `θ̂` and its standard error.
    pub theta_mean: f64,
    pub theta_se: f64,
    pub skew_threshold: f64,
    pub kurtosis_threshold: f64,
    pub pass: bool,
}

fn normality_report(n: usize, replications: usize, estimates: Vec<f64>) -> Result<NormalityReport> {
    let stats = shape_stats(&estimates)?;
    let kept = estimates.len();
    let root_n = (n as f64).sqrt();
    let pass = stats.skewness.abs() < SKEW_THRESHOLD
        && stats.excess_kurtosis.abs() < KURTOSIS_THRESHOLD;
    Ok(NormalityReport {
        n,
        replications,
        dropped: replications - kept,
        theta_mean: 1.0 + stats.mean / root_n,
        theta_se: (stats.variance / kept as f64).sqrt() / root_n,
        estimates,
        stats,
        skew_threshold: SKEW_THRESHOLD,
        kurtosis_threshold: KURTOSIS_THRESHOLD,
        pass,
    })
}

/// `θ̂ = xᵀWy / (xᵀWx + λ)` with `W = K/n²` and `λ = 1/n`, for the linear
/// model `f_θ(x) = θx` on one low-dim linear-truth sample.
pub fn linear_theta(x: &[f64], y: &[f64], z: &DMatrix<f64>, exec: Exec) -> Result<f64> {
    let n = x.len();
    let k = sum_gaussians_from_median(z)?;
    let op = KernelOperator::new(&k, z)?;
    let rhs = DMatrix::from_fn(n, 2, |i, j| if j == 0 { x[i] } else { y[i] });
    let kr = op.apply(&rhs, exec)?;
    let nf = n as f64;
    let xkx: f64 = (0..n).map(|i| x[i] * kr[(i, 0)]).sum();
    let xky: f64 = (0..n).map(|i| x[i] * kr[(i, 1)]).sum();
    let theta = (xky / (nf * nf)) / (xkx / (nf * nf) + 1.0 / nf);
    if !theta.is_finite() {
        return Err(MmrError::numerical("linear estimator is not finite"));
    }
    Ok(theta)
}

/// Replicates the linear estimator `r` times at sample size `n` on the
/// low-dim linear scenario (`θ* = 1`) and checks the shape of
/// `√n(θ̂ − 1)` against a Gaussian. Replication `i` uses `split_seed(seed, i)`.
pub fn asymptotic_normality_check(n: usize, r: usize, seed: u64) -> Result<NormalityReport> {
    asymptotic_normality_check_with(n, r, seed, Exec::default())
}

pub fn asymptotic_normality_check_with(
    n: usize,
    r: usize,
    seed: u64,
    exec: Exec,
) -> Result<NormalityReport> {
    if r < MIN_REPLICATIONS {
        return Err(MmrError::input(format!(
            "normality check needs at least {MIN_REPLICATIONS} replications"
        )));
    }
    if n < 3 {
        return Err(MmrError::input("normality check needs n >= 3"));
    }
    let thetas = exec.map(r, |i| {
        let d = LowDimSpec {
            truth: Truth::Linear,
            n,
            seed: split_seed(seed, i as u64),
        }
        .generate();
        linear_theta(d.x.as_slice(), d.y.as_slice(), &d.z, Exec::Sequential)
    });
    let root_n = (n as f64).sqrt();
    let estimates: Vec<f64> = thetas
        .into_iter()
        .filter_map(|t| t.ok())
        .map(|t| root_n * (t - 1.0))
        .collect();
    if estimates.len() < 2 {
        return Err(MmrError::numerical("too few replications succeeded"));
    }
    normality_report(n, r, estimates)
}

/// Feeds `r` i.i.d. standard normal draws through the same statistics and
/// thresholds as [`asymptotic_normality_check`].
pub fn normality_self_test(r: usize, seed: u64) -> Result<NormalityReport> {
    use rand::{Rng, SeedableRng};
    if r < MIN_REPLICATIONS {
        return Err(MmrError::input(format!(
            "normality check needs at least {MIN_REPLICATIONS} replications"
        )));
    }
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..r)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    normality_report(1, r, draws)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WuReport {
    pub n: usize,
    pub trace: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// `1e-12 · ‖W_U‖_F`.
    pub tol: f64,
    pub trace_is_zero: bool,
    pub indefinite: bool,
}

/// Eigen-analysis of `W_U = (K − diag K)/(n(n−1))`. Failed properties are
/// reported through the flags rather than as errors.
pub fn wu_indefiniteness_check(k: &GramMatrix) -> Result<WuReport> {
    let w = weight_u(k)?.into_inner();
    let trace = w.trace();
    let tol = 1e-12 * w.norm();
    let eig = SymmetricEigen::new(w).eigenvalues;
    let min = eig.min();
    let max = eig.max();
    Ok(WuReport {
        n: k.n(),
        trace,
        min_eigenvalue: min,
        max_eigenvalue: max,
        tol,
        trace_is_zero: trace == 0.0,
        indefinite: min < -tol && tol < max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub candidate: String,
    pub v_risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationReport {
    pub rows: Vec<ProbeRow>,
    /// Candidate with the smallest V-risk.
    pub best: String,
    /// Second-smallest risk minus the smallest; 0 for one candidate.
    pub margin: f64,
}

/// A named structural-function candidate.
pub type Candidate<'a> = (&'a str, &'a (dyn Fn(&[f64]) -> f64 + Sync));

/// Empirical V-risk `rᵀ(K/n²)r` of every candidate on one sample of size `n`,
/// with `k` the sum-of-Gaussians kernel at the median heuristic of `z`.
/// Never forms the `n × n` Gram matrix.
pub fn identification_probe(
    scenario: &Scenario,
    candidates: &[Candidate<'_>],
    n: usize,
    seed: u64,
) -> Result<IdentificationReport> {
    if candidates.is_empty() {
        return Err(MmrError::input("identification probe needs at least one candidate"));
    }
    let data = scenario.sample(n, seed)?;
    let k = sum_gaussians_from_median(&data.z)?;
    let op = KernelOperator::new(&k, &data.z)?;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| data.x.row(i).iter().copied().collect())
        .collect();
    let resid = DMatrix::from_fn(n, candidates.len(), |i, c| data.y[i] - (candidates[c].1)(&rows[i]));
    let kr = op.apply(&resid, Exec::default())?;
    let n2 = (n * n) as f64;
    let out: Vec<ProbeRow> = candidates
        .iter()
        .enumerate()
        .map(|(c, (name, _))| ProbeRow {
            candidate: name.to_string(),
            v_risk: (resid.column(c).dot(&kr.column(c)) / n2).max(0.0),
        })
        .collect();
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| out[a].v_risk.total_cmp(&out[b].v_risk));
    let margin = if order.len() > 1 {
        out[order[1]].v_risk - out[order[0]].v_risk
    } else {
        0.0
    };
    Ok(IdentificationReport {
        best: out[order[0]].candidate.clone(),
        margin,
        rows: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram, KernelSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn wu_two_point_closed_form() {
        let k = GramMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]), "t")
            .unwrap();
        let r = wu_indefiniteness_check(&k).unwrap();
        assert_eq!(r.trace, 0.0);
        assert!((r.min_eigenvalue + 0.25).abs() < 1e-15);
        assert!((r.max_eigenvalue - 0.25).abs() < 1e-15);
        assert!(r.indefinite && r.trace_is_zero);
    }

    #[test]
    fn wu_identical_instruments() {
        let spec = KernelSpec::gaussian(0.8).unwrap();
        let z = DMatrix::from_row_slice(2, 1, &[0.3, 0.3]);
        let r = wu_indefiniteness_check(&gram(&spec, &z).unwrap()).unwrap();
        assert!((r.max_eigenvalue - 0.5).abs() < 1e-15);
        assert!((r.min_eigenvalue + 0.5).abs() < 1e-15);
    }

    #[test]
    fn wu_rejects_single_point() {
        let k = GramMatrix::from_matrix(DMatrix::from_element(1, 1, 1.0), "t").unwrap();
        assert!(wu_indefiniteness_check(&k).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn wu_indefinite_on_random_grams(seed in any::<u64>(), n in prop::sample::select(vec![2usize, 10, 50])) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let z = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-3.0..3.0));
            let sigma = rng.random_range(0.3..3.0);
            let k = gram(&KernelSpec::gaussian(sigma).unwrap(), &z).unwrap();
            let r = wu_indefiniteness_check(&k).unwrap();
            prop_assert!(r.trace_is_zero);
            prop_assert!(r.indefinite, "{:?}", r);
        }

        #[test]
        fn shape_stats_are_shift_and_scale_invariant(
            v in prop::collection::vec(-10.0f64..10.0, 5..40),
            a in -5.0f64..5.0,
            b in 0.1f64..10.0,
        ) {
            prop_assume!(shape_stats(&v).is_ok());
            let s = shape_stats(&v).unwrap();
            let w: Vec<f64> = v.iter().map(|x| a + b * x).collect();
            let t = shape_stats(&w).unwrap();
            prop_assert!((s.skewness - t.skewness).abs() < 1e-6);
            prop_assert!((s.excess_kurtosis - t.excess_kurtosis).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_stats_known_values() {
        let s = shape_stats(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.variance - 5.0 / 3.0).abs() < 1e-15);
        assert!(s.skewness.abs() < 1e-15);
        // m2 = 1.25, m4 = 2.5625
        assert!((s.excess_kurtosis - (2.5625 / 1.5625 - 3.0)).abs() < 1e-12);
        let e = shape_stats(&[0.0, 0.0, 0.0, 10.0]).unwrap();
        assert!(e.skewness > 1.0);
    }

    #[test]
    fn self_test_passes_on_gaussian_draws() {
        let r = normality_self_test(500, 527).unwrap();
        assert!(r.pass, "{:?}", r.stats);
        assert!(normality_self_test(10, 1).is_err());
    }

    #[test]
    fn normality_rejects_few_replications() {
        assert!(asymptotic_normality_check(100, 29, 0).is_err());
    }

    #[test]
    fn normality_small_n_still_reports() {
        let r = asymptotic_normality_check(20, 40, 3).unwrap();
        assert_eq!(r.estimates.len() + r.dropped, 40);
        assert!(r.stats.variance > 0.0);
    }

    #[test]
    fn linear_theta_matches_dense_formula() {
        let d = LowDimSpec {
            truth: Truth::Linear,
            n: 50,
            seed: 9,
        }
        .generate();
        let k = gram(&sum_gaussians_from_median(&d.z).unwrap(), &d.z).unwrap();
        let w = k.values() / 2500.0;
        let x = d.x.column(0).into_owned();
        let dense = x.dot(&(&w * &d.y)) / (x.dot(&(&w * &x)) + 0.02);
        let t = linear_theta(d.x.as_slice(), d.y.as_slice(), &d.z, Exec::Sequential).unwrap();
        assert!((t - dense).abs() < 1e-12 * dense.abs());
    }

    #[test]
    fn probe_noiseless_truth_has_zero_risk() {
        let sc = Scenario::low_dim_noiseless(Truth::Sin);
        let f = |x: &[f64]| x[0].sin();
        let rep = identification_probe(&sc, &[("f*", &f)], 200, 1).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert!(rep.rows[0].v_risk < 1e-20);
        assert_eq!(rep.margin, 0.0);
    }

    #[test]
    fn probe_prefers_truth() {
        let sc = Scenario::low_dim(Truth::Sin);
        let f = |x: &[f64]| x[0].sin();
        let g = |x: &[f64]| x[0].sin() + 1.0;
        let h = |x: &[f64]| 2.0 * x[0].sin();
        let cands: [Candidate; 3] = [("f*", &f), ("f*+1", &g), ("2f*", &h)];
        for seed in 0..3 {
            let rep = identification_probe(&sc, &cands, 1000, seed).unwrap();
            assert_eq!(rep.best, "f*");
            assert!(rep.margin > 0.0);
        }
        assert!(identification_probe(&sc, &[], 10, 0).is_err());
    }

    #[test]
    fn consistency_single_size_gives_one_row() {
        let mut base = ExperimentConfig::new(ScenarioConfig::low_dim(Truth::Linear), vec![Method::TwoSls], 100);
        base.repetitions = 1;
        let rows = consistency_sweep(&base, &ScenarioConfig::low_dim(Truth::Linear), Method::TwoSls, &[100], &[1, 2, 3])
            .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mses.len(), 3);
        assert!(consistency_sweep(&base, &ScenarioConfig::low_dim(Truth::Linear), Method::TwoSls, &[200, 100], &[1])
            .is_err());
    }
}
