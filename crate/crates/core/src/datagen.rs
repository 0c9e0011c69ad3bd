//! Seeded synthetic structural-equation generators.
//!
//! Randomness comes from ChaCha20 seeded with a `u64`. Each variable column
//! draws from its own ChaCha stream (`set_stream`), so adding a column never
//! perturbs the others and datasets are reproducible on any platform:
//!
//! | scenario   | stream | variable                         |
//! |------------|--------|----------------------------------|
//! | low-dim    | 0, 1   | `Z₁`, `Z₂`                        |
//! | low-dim    | 2      | confounder `e`                    |
//! | low-dim    | 3, 4   | `γ`, `δ`                          |
//! | Mendelian  | i      | instrument `Zᵢ` (i < d')          |
//! | Mendelian  | 1000   | confounder `e`                    |
//! | Mendelian  | 1001, 1002 | `γ`, `δ`                      |
//! | Mendelian parameters | 0, 1 | `pᵢ`, `αᵢ`                  |
//!
//! Sub-seeds for repetitions and splits come from [`split_seed`].

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MmrError, Result};
use crate::risk::Dataset;

const NOISE_SD: f64 = 0.1;

/// Derives an independent sub-seed: SplitMix64 applied to `master` mixed with
/// `index + 1`. Stable across releases.
pub fn split_seed(master: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(master ^ mix(index.wrapping_add(1)))
}

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normals(seed: u64, id: u64, n: usize, sd: f64) -> Vec<f64> {
    let mut rng = stream(seed, id);
    (0..n)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Structural function of the low-dimensional scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Abs,
    Linear,
    Sin,
    Step,
}

impl Truth {
    pub const ALL: [Truth; 4] = [Truth::Abs, Truth::Linear, Truth::Sin, Truth::Step];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Truth::Abs => x.abs(),
            Truth::Linear => x,
            Truth::Sin => x.sin(),
            Truth::Step => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Truth::Abs => "abs",
            Truth::Linear => "linear",
            Truth::Sin => "sin",
            Truth::Step => "step",
        }
    }
}

impl fmt::Display for Truth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Truth {
    type Err = MmrError;

    fn from_str(s: &str) -> Result<Self> {
        Truth::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| MmrError::Config(format!("unknown structural function '{s}'")))
    }
}

/// `Y = f*(X) + e + δ`, `X = Z₁ + e + γ`, `Z ~ U([−3, 3]²)`, `e ~ N(0, 1)`,
/// `γ, δ ~ N(0, 0.1²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowDimSpec {
    pub truth: Truth,
    pub n: usize,
    pub seed: u64,
}

impl LowDimSpec {
    pub fn generate(&self) -> Dataset {
        gen_low_dim_scaled(self.truth, self.n, self.seed, 1.0)
    }
}

pub fn gen_low_dim(spec: &LowDimSpec) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(MmrError::input("low-dim generator needs n >= 1"));
    }
    Ok(spec.generate())
}

/// Low-dim SEM with every noise term (`e`, `γ`, `δ`) multiplied by `noise`.
fn gen_low_dim_scaled(truth: Truth, n: usize, seed: u64, noise: f64) -> Dataset {
    let uniform = |id| {
        let mut rng = stream(seed, id);
        (0..n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>()
    };
    let z1 = uniform(0);
    let z2 = uniform(1);
    let e = normals(seed, 2, n, noise);
    let gamma = normals(seed, 3, n, noise * NOISE_SD);
    let delta = normals(seed, 4, n, noise * NOISE_SD);
    let x: Vec<f64> = (0..n).map(|i| z1[i] + e[i] + gamma[i]).collect();
    let f_star: Vec<f64> = x.iter().map(|&v| truth.eval(v)).collect();
    let y: Vec<f64> = (0..n).map(|i| f_star[i] + e[i] + delta[i]).collect();
    let mut z = DMatrix::zeros(n, 2);
    z.set_column(0, &DVector::from_vec(z1));
    z.set_column(1, &DVector::from_vec(z2));
    Dataset {
        x: DMatrix::from_vec(n, 1, x),
        y: DVector::from_vec(y),
        z,
        f_star: Some(DVector::from_vec(f_star)),
    }
}

/// Mendelian-randomization SEM:
/// `Y = βX + c₁e + δ`, `X = Σ αᵢZᵢ + c₂e + γ`, `Zᵢ ~ Bin(2, pᵢ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MendelianSpec {
    pub d_prime: usize,
    pub beta: f64,
    pub c1: f64,
    pub c2: f64,
    pub n: usize,
    pub seed: u64,
}

impl Default for MendelianSpec {
    fn default() -> Self {
        MendelianSpec {
            d_prime: 16,
            beta: 1.0,
            c1: 1.0,
            c2: 1.0,
            n: 10_000,
            seed: 0,
        }
    }
}

/// Per-experiment instrument frequencies `pᵢ ~ U(0.1, 0.9)` and strengths
/// `αᵢ ~ U[0.8/d', 1.2/d']`, shared by every split of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MendelianParams {
    pub beta: f64,
    pub c1: f64,
    pub c2: f64,
    pub p: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl MendelianParams {
    pub fn draw(d_prime: usize, beta: f64, c1: f64, c2: f64, seed: u64) -> Result<Self> {
        if d_prime == 0 {
            return Err(MmrError::input("Mendelian generator needs d' >= 1"));
        }
        let mut rp = stream(seed, 0);
        let mut ra = stream(seed, 1);
        let d = d_prime as f64;
        let p = (0..d_prime).map(|_| rp.random_range(0.1..0.9)).collect();
        let alpha = (0..d_prime)
            .map(|_| ra.random_range(0.8 / d..=1.2 / d))
            .collect();
        Ok(MendelianParams {
            beta,
            c1,
            c2,
            p,
            alpha,
        })
    }

    pub fn d_prime(&self) -> usize {
        self.p.len()
    }

    /// Draws `n` i.i.d. rows; `f_star = βX`.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let d = self.d_prime();
        let mut z = DMatrix::zeros(n, d);
        for (i, &p) in self.p.iter().enumerate() {
            let mut rng = stream(seed, i as u64);
            for r in 0..n {
                let a = (rng.random::<f64>() < p) as u8;
                let b = (rng.random::<f64>() < p) as u8;
                z[(r, i)] = f64::from(a + b);
            }
        }
        let e = normals(seed, 1000, n, 1.0);
        let gamma = normals(seed, 1001, n, NOISE_SD);
        let delta = normals(seed, 1002, n, NOISE_SD);
        let x: Vec<f64> = (0..n)
            .map(|r| {
                let s: f64 = (0..d).map(|i| self.alpha[i] * z[(r, i)]).sum();
                s + self.c2 * e[r] + gamma[r]
            })
            .collect();
        let f_star: Vec<f64> = x.iter().map(|v| self.beta * v).collect();
        let y: Vec<f64> = (0..n)
            .map(|r| f_star[r] + self.c1 * e[r] + delta[r])
            .collect();
        Dataset {
            x: DMatrix::from_vec(n, 1, x),
            y: DVector::from_vec(y),
            z,
            f_star: Some(DVector::from_vec(f_star)),
        }
    }
}

/// Parameters from `split_seed(seed, 0)`, rows from `split_seed(seed, 1)`.
pub fn gen_mendelian(spec: &MendelianSpec) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(MmrError::input("Mendelian generator needs n >= 1"));
    }
    let params = MendelianParams::draw(
        spec.d_prime,
        spec.beta,
        spec.c1,
        spec.c2,
        split_seed(spec.seed, 0),
    )?;
    Ok(params.sample(spec.n, split_seed(spec.seed, 1)))
}

/// A data-generating process that can be sampled repeatedly.
#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    /// Low-dim SEM; `noise` scales all noise terms (1 = standard, 0 = noiseless).
    LowDim { truth: Truth, noise: f64 },
    Mendelian(MendelianParams),
}

impl Scenario {
    pub fn low_dim(truth: Truth) -> Self {
        Scenario::LowDim { truth, noise: 1.0 }
    }

    pub fn low_dim_noiseless(truth: Truth) -> Self {
        Scenario::LowDim { truth, noise: 0.0 }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(MmrError::input("cannot sample an empty dataset"));
        }
        Ok(match self {
            Scenario::LowDim { truth, noise } => gen_low_dim_scaled(*truth, n, seed, *noise),
            Scenario::Mendelian(p) => p.sample(n, seed),
        })
    }

    /// Train, validation, and test sets of `n` rows each, drawn independently.
    pub fn splits(&self, n: usize, seed: u64) -> Result<Splits> {
        Ok(Splits {
            train: self.sample(n, split_seed(seed, 0))?,
            validation: self.sample(n, split_seed(seed, 1))?,
            test: self.sample(n, split_seed(seed, 2))?,
        })
    }

    pub fn structural(&self, x: &[f64]) -> f64 {
        match self {
            Scenario::LowDim { truth, .. } => truth.eval(x[0]),
            Scenario::Mendelian(p) => p.beta * x[0],
        }
    }

    pub fn name(&self) -> String {
        match self {
            Scenario::LowDim { truth, .. } => truth.name().to_string(),
            Scenario::Mendelian(p) => format!(
                "mendelian(d'={},c1={},c2={})",
                p.d_prime(),
                p.c1,
                p.c2
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Affine map applied to outcomes: `(y − mean) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YTransform {
    pub mean: f64,
    pub scale: f64,
}

impl YTransform {
    pub fn identity() -> Self {
        YTransform {
            mean: 0.0,
            scale: 1.0,
        }
    }

    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.mean) / self.scale)
    }

    pub fn invert(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.scale + self.mean)
    }

    fn apply_dataset(&self, d: &Dataset) -> Dataset {
        Dataset {
            x: d.x.clone(),
            y: self.apply(&d.y),
            z: d.z.clone(),
            f_star: d.f_star.as_ref().map(|f| self.apply(f)),
        }
    }
}

/// Standardizes `y` (and `f_star`) of `train` and every dataset in `others`
/// using the mean and standard deviation (n − 1 denominator) of `train.y`.
/// Returns `[train, others...]` transformed, plus the transform.
pub fn standardize_y(train: &Dataset, others: &[&Dataset]) -> Result<(Vec<Dataset>, YTransform)> {
    let n = train.n();
    if n < 2 {
        return Err(MmrError::input("standardization needs at least two rows"));
    }
    let mean = train.y.mean();
    let var = train.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let scale = var.sqrt();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(MmrError::input("outcome has zero variance; cannot standardize"));
    }
    let t = YTransform { mean, scale };
    let mut out = Vec::with_capacity(1 + others.len());
    out.push(t.apply_dataset(train));
    out.extend(others.iter().map(|d| t.apply_dataset(d)));
    Ok((out, t))
}
