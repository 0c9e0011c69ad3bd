//! Experiment orchestration: configuration, method dispatch, benchmark runs,
//! Mendelian sweeps, and result files.
//!
//! Seeds: repetition `r` of a run with master seed `s` uses
//! `split_seed(s, r)`. Within a repetition, sub-seeds are
//!
//! | index     | use                                   |
//! |-----------|---------------------------------------|
//! | 0, 1, 2   | train, validation, test samples        |
//! | 3         | Mendelian parameters (`pᵢ`, `αᵢ`)      |
//! | 4         | LMOCV fold partition                   |
//! | 5         | network initialization                 |
//! | 100 + j   | Nyström subset of draw `j`             |

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baselines::{
    self, fit_2sls, fit_kernel_ridge, fit_poly2sls, LinearModel, PolyRidgeModel,
};
use crate::datagen::{split_seed, standardize_y, MendelianParams, Scenario, Truth, YTransform};
use crate::error::{MmrError, Result};
use crate::kernels::{gram, KernelConfig, KernelSpec};
use crate::model_selection::{
    bandwidth_grid_with, delta_from_lambda, select_hyperparams_with, CvPlan, PosteriorMode, Selection,
    DEFAULT_BANDWIDTH_FACTORS, DEFAULT_LAMBDA_GRID,
};
use crate::nn_solver::{self, MlpParams, Optimizer, TrainConfig};
use crate::nystrom::{fit_nystrom_with, DEFAULT_DRAWS, DEFAULT_M};
use crate::parallel::Exec;
use crate::rkhs_solver::{self, RkhsModel};
use crate::risk::{weight_v, Dataset};

const SEED_MENDELIAN_PARAMS: u64 = 3;
const SEED_CV_PARTITION: u64 = 4;
const SEED_NN_INIT: u64 = 5;
const SEED_NYSTROM: u64 = 100;

pub const RESULTS_HEADER: [&str; 7] = [
    "scenario",
    "method",
    "seed",
    "n",
    "test_mse",
    "fit_time_ms",
    "hyperparams_json",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "mmr_rkhs")]
    MmrRkhs,
    #[serde(rename = "mmr_nystrom")]
    MmrNystrom,
    #[serde(rename = "mmr_nn")]
    MmrNn,
    #[serde(rename = "2sls")]
    TwoSls,
    #[serde(rename = "poly2sls")]
    Poly2Sls,
    #[serde(rename = "direct_krr")]
    DirectKrr,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::MmrRkhs,
        Method::MmrNystrom,
        Method::MmrNn,
        Method::TwoSls,
        Method::Poly2Sls,
        Method::DirectKrr,
    ];

    /// Identifier used in configuration files and CSV output.
    pub fn name(self) -> &'static str {
        match self {
            Method::MmrRkhs => "mmr_rkhs",
            Method::MmrNystrom => "mmr_nystrom",
            Method::MmrNn => "mmr_nn",
            Method::TwoSls => "2sls",
            Method::Poly2Sls => "poly2sls",
            Method::DirectKrr => "direct_krr",
        }
    }

    /// Human-readable label for summaries.
    pub fn display_name(self) -> &'static str {
        match self {
            Method::MmrRkhs => "MMR-IV (RKHS)",
            Method::MmrNystrom => "MMR-IV (Nystrom)",
            Method::MmrNn => "MMR-IV (NN)",
            Method::TwoSls => "2SLS",
            Method::Poly2Sls => "Poly2SLS",
            Method::DirectKrr => "DirectKRR (ignores Z)",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = MmrError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                MmrError::Config(format!(
                    "unknown method '{s}' (expected one of mmr_rkhs, mmr_nystrom, mmr_nn, 2sls, poly2sls, direct_krr)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioConfig {
    LowDim {
        truth: Truth,
        #[serde(default = "one")]
        noise: f64,
    },
    Mendelian {
        #[serde(default = "d_prime_default")]
        d_prime: usize,
        #[serde(default = "one")]
        beta: f64,
        #[serde(default = "one")]
        c1: f64,
        #[serde(default = "one")]
        c2: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn d_prime_default() -> usize {
    16
}

impl ScenarioConfig {
    pub fn low_dim(truth: Truth) -> Self {
        ScenarioConfig::LowDim { truth, noise: 1.0 }
    }

    pub fn mendelian(d_prime: usize, c1: f64, c2: f64) -> Self {
        ScenarioConfig::Mendelian {
            d_prime,
            beta: 1.0,
            c1,
            c2,
        }
    }

    pub fn is_mendelian(&self) -> bool {
        matches!(self, ScenarioConfig::Mendelian { .. })
    }

    /// The data-generating process for the repetition seeded by `rep_seed`.
    /// Mendelian instrument parameters are redrawn per repetition.
    pub fn build(&self, rep_seed: u64) -> Result<Scenario> {
        match *self {
            ScenarioConfig::LowDim { truth, noise } => {
                if !(noise >= 0.0 && noise.is_finite()) {
                    return Err(MmrError::Config("noise scale must be non-negative".into()));
                }
                Ok(Scenario::LowDim { truth, noise })
            }
            ScenarioConfig::Mendelian {
                d_prime,
                beta,
                c1,
                c2,
            } => Ok(Scenario::Mendelian(MendelianParams::draw(
                d_prime,
                beta,
                c1,
                c2,
                split_seed(rep_seed, SEED_MENDELIAN_PARAMS),
            )?)),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ScenarioConfig::LowDim { truth, noise } if *noise == 1.0 => truth.name().to_string(),
            ScenarioConfig::LowDim { truth, noise } => format!("{}(noise={noise})", truth.name()),
            ScenarioConfig::Mendelian { d_prime, c1, c2, .. } => {
                format!("mendelian(d'={d_prime},c1={c1},c2={c2})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default = "default_k")]
    pub k: KernelConfig,
    #[serde(default = "default_l")]
    pub l: KernelConfig,
}

fn default_k() -> KernelConfig {
    KernelConfig::median("sum_gaussians")
}

fn default_l() -> KernelConfig {
    KernelConfig::median("gaussian")
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection {
            k: default_k(),
            l: default_l(),
        }
    }
}

/// Settings shared by the RKHS and Nyström estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmrSettings {
    pub lambda_grid: Vec<f64>,
    /// Multipliers applied to the bandwidth of the resolved `l` kernel.
    pub bandwidth_factors: Vec<f64>,
    /// Points held out per LMOCV fold.
    pub leave_out: usize,
    /// Whether the validation split joins the training split for selection
    /// and fitting. Unset: yes for low-dim scenarios, no for Mendelian ones.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub combine_validation: Option<bool>,
    pub nystrom_m: usize,
    pub nystrom_draws: usize,
    /// Skips selection and uses this `λ` with the resolved `l` kernel.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl Default for MmrSettings {
    fn default() -> Self {
        MmrSettings {
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            bandwidth_factors: DEFAULT_BANDWIDTH_FACTORS.to_vec(),
            leave_out: 2,
            combine_validation: None,
            nystrom_m: DEFAULT_M,
            nystrom_draws: DEFAULT_DRAWS,
            lambda: None,
        }
    }
}

/// A named learning-rate grid or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LrGrid {
    Named(String),
    Values(Vec<f64>),
}

pub const WIDE_LR_GRID: [f64; 3] = [1e-3, 1e-2, 5e-2];
pub const TINY_LR_GRID: [f64; 7] = [1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];
pub const DEFAULT_NN_LAMBDA_GRID: [f64; 3] = [5e-5, 1e-4, 2e-4];

impl LrGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            LrGrid::Named(s) if s == "wide" => Ok(WIDE_LR_GRID.to_vec()),
            LrGrid::Named(s) if s == "tiny" => Ok(TINY_LR_GRID.to_vec()),
            LrGrid::Named(s) => Err(MmrError::Config(format!(
                "unknown learning-rate grid '{s}' (expected \"wide\", \"tiny\", or a list)"
            ))),
            LrGrid::Values(v) => Ok(v.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NnSettings {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr_grid: LrGrid,
    pub lambda_grid: Vec<f64>,
    pub optimizer: Optimizer,
}

impl Default for NnSettings {
    fn default() -> Self {
        NnSettings {
            hidden: vec![100, 100],
            epochs: 500,
            lr_grid: LrGrid::Named("wide".into()),
            lambda_grid: DEFAULT_NN_LAMBDA_GRID.to_vec(),
            optimizer: Optimizer::Momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Poly2SlsSettings {
    pub max_degree: usize,
    pub ridge_grid: Vec<f64>,
    pub cv_folds: usize,
}

impl Default for Poly2SlsSettings {
    fn default() -> Self {
        Poly2SlsSettings {
            max_degree: baselines::DEFAULT_MAX_DEGREE,
            ridge_grid: baselines::DEFAULT_RIDGE_GRID.to_vec(),
            cv_folds: baselines::DEFAULT_CV_FOLDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectKrrSettings {
    pub lambda_grid: Vec<f64>,
    pub cv_folds: usize,
}

impl Default for DirectKrrSettings {
    fn default() -> Self {
        DirectKrrSettings {
            lambda_grid: baselines::DEFAULT_DIRECT_LAMBDA_GRID.to_vec(),
            cv_folds: baselines::DEFAULT_CV_FOLDS,
        }
    }
}

/// Per-method settings, independent of the scenario and repetition plan.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSettings {
    pub kernel: KernelSection,
    pub mmr: MmrSettings,
    pub nn: NnSettings,
    pub poly2sls: Poly2SlsSettings,
    pub direct_krr: DirectKrrSettings,
}

fn positive_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(MmrError::Config(format!(
            "{name} must be a non-empty list of positive numbers"
        )));
    }
    Ok(())
}

impl MethodSettings {
    /// Reads either a bare settings file (`[kernel]`, `[mmr]`, ...) or a full
    /// experiment config, whose method sections are used.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| MmrError::Config(e.to_string()))?;
        let settings = if value.contains_key("scenario") {
            ExperimentConfig::from_toml(text)?.settings()
        } else {
            value
                .try_into()
                .map_err(|e: toml::de::Error| MmrError::Config(e.to_string()))?
        };
        settings.validate()?;
        Ok(settings)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| MmrError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mmr;
        positive_grid("mmr.lambda_grid", &m.lambda_grid)?;
        positive_grid("mmr.bandwidth_factors", &m.bandwidth_factors)?;
        if m.leave_out == 0 {
            return Err(MmrError::Config("mmr.leave_out must be at least 1".into()));
        }
        if m.nystrom_m == 0 || m.nystrom_draws == 0 {
            return Err(MmrError::Config(
                "mmr.nystrom_m and mmr.nystrom_draws must be at least 1".into(),
            ));
        }
        if let Some(l) = m.lambda {
            positive_grid("mmr.lambda", &[l])?;
        }
        let nn = &self.nn;
        if nn.epochs == 0 {
            return Err(MmrError::Config("nn.epochs must be at least 1".into()));
        }
        if nn.hidden.contains(&0) {
            return Err(MmrError::Config("nn.hidden layer widths must be positive".into()));
        }
        positive_grid("nn.lr_grid", &nn.lr_grid.values()?)?;
        if nn.lambda_grid.is_empty() || nn.lambda_grid.iter().any(|v| !(*v >= 0.0)) {
            return Err(MmrError::Config("nn.lambda_grid must be non-negative".into()));
        }
        let p = &self.poly2sls;
        if p.max_degree == 0 || p.cv_folds < 2 {
            return Err(MmrError::Config(
                "poly2sls needs max_degree >= 1 and cv_folds >= 2".into(),
            ));
        }
        if p.ridge_grid.is_empty() || p.ridge_grid.iter().any(|v| !(*v >= 0.0)) {
            return Err(MmrError::Config("poly2sls.ridge_grid must be non-negative".into()));
        }
        positive_grid("direct_krr.lambda_grid", &self.direct_krr.lambda_grid)?;
        if self.direct_krr.cv_folds < 2 {
            return Err(MmrError::Config("direct_krr.cv_folds must be at least 2".into()));
        }
        Ok(())
    }
}

/// A benchmark run as written in a TOML file:
///
/// ```toml
/// scenario = { kind = "low_dim", truth = "sin" }
/// methods = ["mmr_nystrom", "2sls", "direct_krr"]
/// n = 2000
/// repetitions = 10
/// seed = 527
/// output_dir = "results/sin"
///
/// [kernel]
/// k = { family = "sum_gaussians", mode = "median" }
/// l = { family = "gaussian", mode = "median" }
///
/// [mmr]
/// nystrom_m = 300
/// nystrom_draws = 10
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub methods: Vec<Method>,
    /// Rows in each of the train, validation, and test splits.
    pub n: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub mmr: MmrSettings,
    #[serde(default)]
    pub nn: NnSettings,
    #[serde(default)]
    pub poly2sls: Poly2SlsSettings,
    #[serde(default)]
    pub direct_krr: DirectKrrSettings,
}

fn default_repetitions() -> usize {
    10
}

fn default_seed() -> u64 {
    527
}

impl ExperimentConfig {
    pub fn new(scenario: ScenarioConfig, methods: Vec<Method>, n: usize) -> Self {
        let s = MethodSettings::default();
        ExperimentConfig {
            scenario,
            methods,
            n,
            repetitions: default_repetitions(),
            seed: default_seed(),
            output_dir: None,
            kernel: s.kernel,
            mmr: s.mmr,
            nn: s.nn,
            poly2sls: s.poly2sls,
            direct_krr: s.direct_krr,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| MmrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| MmrError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The effective configuration with every default filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MmrError::Config(e.to_string()))
    }

    pub fn settings(&self) -> MethodSettings {
        MethodSettings {
            kernel: self.kernel.clone(),
            mmr: self.mmr.clone(),
            nn: self.nn.clone(),
            poly2sls: self.poly2sls.clone(),
            direct_krr: self.direct_krr.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(MmrError::Config("repetitions must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(MmrError::Config("method list must be non-empty".into()));
        }
        if self.n < 4 {
            return Err(MmrError::Config("n must be at least 4".into()));
        }
        if i64::try_from(self.seed).is_err() {
            return Err(MmrError::Config("seed must fit in a signed 64-bit integer".into()));
        }
        if let ScenarioConfig::Mendelian { d_prime, .. } = self.scenario {
            if d_prime == 0 {
                return Err(MmrError::Config("d_prime must be at least 1".into()));
            }
        }
        self.settings().validate()
    }

    fn combine_validation(&self) -> bool {
        self.mmr
            .combine_validation
            .unwrap_or(!self.scenario.is_mendelian())
    }
}

/// Model persisted by `fit` and consumed by `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum ModelKind {
    Rkhs(RkhsModel),
    Mlp(MlpParams),
    Linear(LinearModel),
    PolyRidge(PolyRidgeModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub method: Method,
    /// Maps outcomes to the scale the model was fitted on.
    pub y_transform: YTransform,
    pub model: ModelKind,
    pub hyperparams: Value,
}

impl FittedModel {
    /// Predictions on the original outcome scale.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.predict_with(x, Exec::default())
    }

    pub fn predict_with(&self, x: &DMatrix<f64>, exec: Exec) -> Result<DVector<f64>> {
        let raw = match &self.model {
            ModelKind::Rkhs(m) => m.predict_with(x, exec)?,
            ModelKind::Mlp(p) => p.forward(x)?,
            ModelKind::Linear(m) => m.predict(x)?,
            ModelKind::PolyRidge(m) => m.predict(x)?,
        };
        Ok(self.y_transform.invert(&raw))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// A fitted model plus the fit time, which excludes hyperparameter selection.
#[derive(Debug, Clone)]
pub struct Fit {
    pub model: FittedModel,
    pub fit_time_ms: u64,
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

/// Data, kernels, and `λ` for an MMR fit after selection.
struct MmrPlan {
    data: Dataset,
    transform: YTransform,
    kernel_k: KernelSpec,
    kernel_l: KernelSpec,
    lambda: f64,
    hyperparams: BTreeMap<String, Value>,
}

fn select_standardized(
    method: Method,
    data: &Dataset,
    kernel_k: &KernelSpec,
    base_l: &KernelSpec,
    settings: &MethodSettings,
    seed: u64,
    exec: Exec,
) -> Result<Selection> {
    let n = data.n();
    let mmr = &settings.mmr;
    let l_grid = bandwidth_grid_with(base_l, &mmr.bandwidth_factors);
    let delta_grid: Vec<f64> = mmr
        .lambda_grid
        .iter()
        .map(|&l| delta_from_lambda(l, n))
        .collect();
    let plan = CvPlan::random_partition(n, mmr.leave_out, split_seed(seed, SEED_CV_PARTITION))?;
    let mode = match method {
        Method::MmrNystrom => PosteriorMode::Nystrom {
            m: mmr.nystrom_m.min(n),
            seed: split_seed(seed, SEED_NYSTROM),
        },
        _ => PosteriorMode::Exact,
    };
    select_hyperparams_with(data, kernel_k, &l_grid, &delta_grid, &plan, mode, exec)
}

/// LMOCV selection for an MMR method on `data` after standardizing its
/// outcome, over the grids in `settings`. The Nyström method selects on the
/// posterior built from its first subset draw.
pub fn select_mmr(method: Method, data: &Dataset, settings: &MethodSettings, seed: u64) -> Result<Selection> {
    if !matches!(method, Method::MmrRkhs | Method::MmrNystrom) {
        return Err(MmrError::input(format!("{method} has no LMOCV selection")));
    }
    settings.validate()?;
    let (sets, _) = standardize_y(data, &[])?;
    let kernel_k = settings.kernel.k.resolve(&sets[0].z)?;
    let base_l = settings.kernel.l.resolve(&sets[0].x)?;
    select_standardized(method, &sets[0], &kernel_k, &base_l, settings, seed, Exec::default())
}

fn plan_mmr(
    method: Method,
    data: &Dataset,
    settings: &MethodSettings,
    seed: u64,
    exec: Exec,
) -> Result<MmrPlan> {
    let (sets, transform) = standardize_y(data, &[])?;
    let data = sets.into_iter().next().expect("standardize_y returns the training set");
    let n = data.n();
    let kernel_k = settings.kernel.k.resolve(&data.z)?;
    let base_l = settings.kernel.l.resolve(&data.x)?;
    let mmr = &settings.mmr;
    let mut hyper = BTreeMap::new();
    let (kernel_l, lambda) = match mmr.lambda {
        Some(lambda) => (base_l, lambda),
        None => {
            let sel = select_standardized(method, &data, &kernel_k, &base_l, settings, seed, exec)?;
            hyper.insert("cv_error".into(), json!(sel.cv_error));
            hyper.insert("delta".into(), json!(sel.delta));
            hyper.insert("leave_out".into(), json!(mmr.leave_out));
            let lambda = sel.lambda(n);
            (sel.kernel_l, lambda)
        }
    };
    hyper.insert("lambda".into(), json!(lambda));
    hyper.insert("kernel_l".into(), serde_json::to_value(&kernel_l)?);
    hyper.insert("kernel_k".into(), serde_json::to_value(&kernel_k)?);
    Ok(MmrPlan {
        data,
        transform,
        kernel_k,
        kernel_l,
        lambda,
        hyperparams: hyper,
    })
}

fn to_object(map: BTreeMap<String, Value>) -> Value {
    Value::Object(map.into_iter().collect())
}

/// Network hyperparameters by 2-fold CV: train on one split, score the
/// V-statistic risk on the other, and swap.
fn select_nn(
    train: &Dataset,
    validation: &Dataset,
    kernel_k: &KernelSpec,
    nn: &NnSettings,
    seed: u64,
) -> Result<(TrainConfig, f64)> {
    let w_train = weight_v(&gram(kernel_k, &train.z)?).into_inner();
    let w_val = weight_v(&gram(kernel_k, &validation.z)?).into_inner();
    let folds = [(train, &w_train, validation, &w_val), (validation, &w_val, train, &w_train)];
    let mut best: Option<(f64, TrainConfig)> = None;
    for lr in nn.lr_grid.values()? {
        for &lambda in &nn.lambda_grid {
            let cfg = TrainConfig {
                learning_rate: lr,
                epochs: nn.epochs,
                lambda,
                seed,
                optimizer: nn.optimizer,
            };
            let mut total = 0.0;
            for (fit_on, w_fit, score_on, w_score) in folds {
                let risk = nn_solver::train_with_weights(&fit_on.x, &fit_on.y, w_fit, &nn.hidden, &cfg)
                    .and_then(|t| t.predict(&score_on.x))
                    .map(|p| {
                        let r = &score_on.y - p;
                        r.dot(&(w_score * &r))
                    });
                match risk {
                    Ok(v) if v.is_finite() => total += v,
                    _ => {
                        total = f64::INFINITY;
                        break;
                    }
                }
            }
            if total.is_finite() && best.as_ref().is_none_or(|b| total < b.0) {
                best = Some((total, cfg));
            }
        }
    }
    best.map(|(e, c)| (c, e))
        .ok_or_else(|| MmrError::numerical("every network configuration diverged"))
}

/// Fits one method. MMR methods run LMOCV selection on `train` (joined with
/// `validation` when the settings say so); the network uses `validation` for
/// 2-fold CV; baselines fit on `train`. `draw` picks the Nyström subset.
pub fn fit_method(
    method: Method,
    train: &Dataset,
    validation: Option<&Dataset>,
    settings: &MethodSettings,
    combine_validation: bool,
    seed: u64,
) -> Result<Fit> {
    settings.validate()?;
    let exec = Exec::default();
    match method {
        Method::MmrRkhs | Method::MmrNystrom => {
            let data = match (combine_validation, validation) {
                (true, Some(v)) => train.concat(v)?,
                _ => train.clone(),
            };
            let plan = plan_mmr(method, &data, settings, seed, exec)?;
            let draw_seed = split_seed(seed, SEED_NYSTROM);
            fit_planned(method, &plan, draw_seed, settings, exec)
        }
        Method::MmrNn => fit_nn(train, validation, settings, seed),
        Method::TwoSls => {
            let start = Instant::now();
            let m = fit_2sls(train)?;
            let t = elapsed_ms(start);
            let hyper = json!({
                "slopes": m.slopes(),
                "intercept": m.intercept(),
                "first_stage_f": m.first_stage_f,
                "weak_instrument": m.weak_instrument(),
            });
            Ok(Fit {
                model: FittedModel {
                    method,
                    y_transform: YTransform::identity(),
                    model: ModelKind::Linear(m),
                    hyperparams: hyper,
                },
                fit_time_ms: t,
            })
        }
        Method::Poly2Sls => {
            let p = &settings.poly2sls;
            let chosen = fit_poly2sls(train, p.max_degree, &p.ridge_grid, p.cv_folds)?;
            let start = Instant::now();
            let m = PolyRidgeModel::fit(train, chosen.degree, chosen.ridge)?;
            let t = elapsed_ms(start);
            let hyper = json!({ "degree": m.degree, "ridge": m.ridge });
            Ok(Fit {
                model: FittedModel {
                    method,
                    y_transform: YTransform::identity(),
                    model: ModelKind::PolyRidge(m),
                    hyperparams: hyper,
                },
                fit_time_ms: t,
            })
        }
        Method::DirectKrr => {
            let d = &settings.direct_krr;
            let kernel_l = settings.kernel.l.resolve(&train.x)?;
            let chosen =
                baselines::fit_direct_ridge_with(train, &kernel_l, &d.lambda_grid, d.cv_folds, exec)?;
            let start = Instant::now();
            let m = fit_kernel_ridge(train, &kernel_l, chosen.lambda)?;
            let t = elapsed_ms(start);
            let hyper = json!({
                "lambda": m.lambda,
                "kernel_l": serde_json::to_value(&kernel_l)?,
            });
            Ok(Fit {
                model: FittedModel {
                    method,
                    y_transform: YTransform::identity(),
                    model: ModelKind::Rkhs(m),
                    hyperparams: hyper,
                },
                fit_time_ms: t,
            })
        }
    }
}

fn fit_planned(
    method: Method,
    plan: &MmrPlan,
    draw_seed: u64,
    settings: &MethodSettings,
    exec: Exec,
) -> Result<Fit> {
    let mut hyper = plan.hyperparams.clone();
    let start = Instant::now();
    let model = match method {
        Method::MmrRkhs => rkhs_solver::fit(&plan.data, &plan.kernel_k, &plan.kernel_l, plan.lambda)?,
        _ => {
            let m = settings.mmr.nystrom_m.min(plan.data.n());
            hyper.insert("nystrom_m".into(), json!(m));
            fit_nystrom_with(
                &plan.data,
                &plan.kernel_k,
                &plan.kernel_l,
                plan.lambda,
                m,
                draw_seed,
                exec,
            )?
        }
    };
    let t = elapsed_ms(start);
    hyper.insert("jitter".into(), json!(model.jitter_used));
    Ok(Fit {
        model: FittedModel {
            method,
            y_transform: plan.transform,
            model: ModelKind::Rkhs(model),
            hyperparams: to_object(hyper),
        },
        fit_time_ms: t,
    })
}

fn fit_nn(
    train: &Dataset,
    validation: Option<&Dataset>,
    settings: &MethodSettings,
    seed: u64,
) -> Result<Fit> {
    let nn = &settings.nn;
    let others: Vec<&Dataset> = validation.into_iter().collect();
    let (sets, transform) = standardize_y(train, &others)?;
    let kernel_k = settings.kernel.k.resolve(&sets[0].z)?;
    let init_seed = split_seed(seed, SEED_NN_INIT);
    let lrs = nn.lr_grid.values()?;
    let (cfg, cv_risk) = match sets.get(1) {
        Some(val) if lrs.len() * nn.lambda_grid.len() > 1 => {
            let (cfg, e) = select_nn(&sets[0], val, &kernel_k, nn, init_seed)?;
            (cfg, Some(e))
        }
        _ => (
            TrainConfig {
                learning_rate: lrs[0],
                epochs: nn.epochs,
                lambda: nn.lambda_grid[0],
                seed: init_seed,
                optimizer: nn.optimizer,
            },
            None,
        ),
    };
    let start = Instant::now();
    let trained = nn_solver::train(&sets[0], &kernel_k, &nn.hidden, &cfg)?;
    let t = elapsed_ms(start);
    let hyper = json!({
        "hidden": nn.hidden,
        "learning_rate": cfg.learning_rate,
        "lambda": cfg.lambda,
        "epochs": cfg.epochs,
        "best_epoch": trained.best_epoch,
        "cv_risk": cv_risk,
    });
    Ok(Fit {
        model: FittedModel {
            method: Method::MmrNn,
            y_transform: transform,
            model: ModelKind::Mlp(trained.params),
            hyperparams: hyper,
        },
        fit_time_ms: t,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordStatus {
    Ok,
    Failed { numerical: bool, message: String },
}

/// One `(scenario, method, seed)` result row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRecord {
    pub scenario: String,
    pub method: Method,
    pub seed: u64,
    pub n: usize,
    /// `NaN` when the method failed.
    pub test_mse: f64,
    pub fit_time_ms: u64,
    pub hyperparams: Value,
    pub status: RecordStatus,
}

impl BenchmarkRecord {
    pub fn is_ok(&self) -> bool {
        self.status == RecordStatus::Ok
    }
}

fn mse(pred: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    (pred - truth).norm_squared() / truth.len() as f64
}

fn test_truth(test: &Dataset) -> Result<&DVector<f64>> {
    test.f_star
        .as_ref()
        .ok_or_else(|| MmrError::input("test set has no f_star column to score against"))
}

/// Runs `method` on the repetition seeded by `rep_seed`. Nyström fits are
/// repeated over `nystrom_draws` subsets after a single selection; the
/// reported error and fit time are averages over draws.
pub fn run_repetition(config: &ExperimentConfig, method: Method, rep_seed: u64) -> BenchmarkRecord {
    let scenario_name = config.scenario.name();
    let result = (|| -> Result<(f64, u64, Value)> {
        let scenario = config.scenario.build(rep_seed)?;
        let splits = scenario.splits(config.n, rep_seed)?;
        let truth = test_truth(&splits.test)?;
        let settings = config.settings();
        let combine = config.combine_validation();
        if method == Method::MmrNystrom {
            let data = if combine {
                splits.train.concat(&splits.validation)?
            } else {
                splits.train.clone()
            };
            let exec = Exec::default();
            let plan = plan_mmr(method, &data, &settings, rep_seed, exec)?;
            let draws = config.mmr.nystrom_draws;
            let mut errors = Vec::with_capacity(draws);
            let mut time = 0u64;
            let mut hyper = Value::Null;
            for j in 0..draws {
                let fit = fit_planned(method, &plan, split_seed(rep_seed, SEED_NYSTROM + j as u64), &settings, exec)?;
                let pred = fit.model.predict_with(&splits.test.x, exec)?;
                errors.push(mse(&pred, truth));
                time += fit.fit_time_ms;
                hyper = fit.model.hyperparams;
            }
            let mean = errors.iter().sum::<f64>() / draws as f64;
            if let Value::Object(map) = &mut hyper {
                map.insert("nystrom_draws".into(), json!(draws));
                map.insert("draw_mse_sd".into(), json!(sample_sd(&errors)));
                map.remove("jitter");
            }
            return Ok((mean, time / draws as u64, hyper));
        }
        let fit = fit_method(
            method,
            &splits.train,
            Some(&splits.validation),
            &settings,
            combine,
            rep_seed,
        )?;
        let pred = fit.model.predict(&splits.test.x)?;
        Ok((mse(&pred, truth), fit.fit_time_ms, fit.model.hyperparams))
    })();
    match result {
        Ok((test_mse, fit_time_ms, hyperparams)) if test_mse.is_finite() => BenchmarkRecord {
            scenario: scenario_name,
            method,
            seed: rep_seed,
            n: config.n,
            test_mse,
            fit_time_ms,
            hyperparams,
            status: RecordStatus::Ok,
        },
        other => {
            let (numerical, message) = match other {
                Err(e) => (e.is_numerical(), e.to_string()),
                Ok(_) => (true, "non-finite test error".to_string()),
            };
            BenchmarkRecord {
                scenario: scenario_name,
                method,
                seed: rep_seed,
                n: config.n,
                test_mse: f64::NAN,
                fit_time_ms: 0,
                hyperparams: json!({ "status": "FAILED", "error": message }),
                status: RecordStatus::Failed { numerical, message },
            }
        }
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: Method,
    pub mean_mse: f64,
    /// Sample standard deviation; 0 for a single successful repetition.
    pub sd_mse: f64,
    pub succeeded: usize,
    pub failed: usize,
}

impl fmt::Display for SummaryRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {:<22} {:.4} ± {:.4}",
            self.scenario,
            self.method.display_name(),
            self.mean_mse,
            self.sd_mse
        )?;
        if self.failed > 0 {
            write!(f, "  ({} FAILED)", self.failed)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub records: Vec<BenchmarkRecord>,
    pub summary: Vec<SummaryRow>,
}

impl BenchmarkReport {
    /// True when every record failed and every failure was numerical.
    pub fn all_failed_numerically(&self) -> bool {
        !self.records.is_empty()
            && self.records.iter().all(|r| {
                matches!(r.status, RecordStatus::Failed { numerical: true, .. })
            })
    }
}

pub fn summarize(records: &[BenchmarkRecord]) -> Vec<SummaryRow> {
    let mut groups: Vec<((String, Method), Vec<&BenchmarkRecord>)> = Vec::new();
    for r in records {
        let key = (r.scenario.clone(), r.method);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((scenario, method), rs)| {
            let ok: Vec<f64> = rs.iter().filter(|r| r.is_ok()).map(|r| r.test_mse).collect();
            let mean = if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().sum::<f64>() / ok.len() as f64
            };
            SummaryRow {
                scenario,
                method,
                mean_mse: mean,
                sd_mse: sample_sd(&ok),
                succeeded: ok.len(),
                failed: rs.len() - ok.len(),
            }
        })
        .collect()
}

/// Runs every (method, repetition) pair. Records come back ordered by the
/// config's method order, then by repetition.
pub fn run_benchmark(config: &ExperimentConfig) -> Result<BenchmarkReport> {
    run_benchmark_with(config, Exec::default())
}

pub fn run_benchmark_with(config: &ExperimentConfig, exec: Exec) -> Result<BenchmarkReport> {
    config.validate()?;
    let reps = config.repetitions;
    let jobs: Vec<(Method, u64)> = config
        .methods
        .iter()
        .flat_map(|&m| (0..reps as u64).map(move |r| (m, r)))
        .collect();
    let records = exec.map(jobs.len(), |i| {
        let (method, r) = jobs[i];
        run_repetition(config, method, split_seed(config.seed, r))
    });
    let summary = summarize(&records);
    Ok(BenchmarkReport { records, summary })
}

/// Writes the results CSV. Identical records produce identical bytes.
pub fn write_results<W: std::io::Write>(records: &[BenchmarkRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER)?;
    for r in records {
        w.write_record([
            r.scenario.clone(),
            r.method.name().to_string(),
            r.seed.to_string(),
            r.n.to_string(),
            r.test_mse.to_string(),
            r.fit_time_ms.to_string(),
            serde_json::to_string(&r.hyperparams)?,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results<R: std::io::Read>(input: R) -> Result<Vec<BenchmarkRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(MmrError::input(format!(
            "unexpected results header {header:?}, expected {RESULTS_HEADER:?}"
        )));
    }
    let bad = |what: &str, v: &str| MmrError::input(format!("invalid {what} '{v}' in results file"));
    rd.records()
        .map(|row| {
            let row = row?;
            let method: Method = row[1].parse()?;
            let seed = row[2].parse().map_err(|_| bad("seed", &row[2]))?;
            let n = row[3].parse().map_err(|_| bad("n", &row[3]))?;
            let test_mse: f64 = row[4].parse().map_err(|_| bad("test_mse", &row[4]))?;
            let fit_time_ms = row[5].parse().map_err(|_| bad("fit_time_ms", &row[5]))?;
            let hyperparams: Value = serde_json::from_str(&row[6])?;
            let status = if test_mse.is_nan() {
                let message = hyperparams
                    .get("error")
                    .and_then(Value::as_str)
                    .unwrap_or("failed")
                    .to_string();
                RecordStatus::Failed {
                    numerical: true,
                    message,
                }
            } else {
                RecordStatus::Ok
            };
            Ok(BenchmarkRecord {
                scenario: row[0].to_string(),
                method,
                seed,
                n,
                test_mse,
                fit_time_ms,
                hyperparams,
                status,
            })
        })
        .collect()
}

/// Writes `results.csv`, `summary.csv`, and `config.resolved.toml` into `dir`.
pub fn write_run(dir: &Path, config: &ExperimentConfig, report: &BenchmarkReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_results(&report.records, fs::File::create(dir.join("results.csv"))?)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["scenario", "method", "mean_mse", "sd_mse", "succeeded", "failed"])?;
    for s in &report.summary {
        w.write_record([
            s.scenario.clone(),
            s.method.name().to_string(),
            s.mean_mse.to_string(),
            s.sd_mse.to_string(),
            s.succeeded.to_string(),
            s.failed.to_string(),
        ])?;
    }
    w.flush()?;
    fs::write(dir.join("config.resolved.toml"), config.to_toml()?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    DPrime,
    C1,
    C2,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::DPrime => "d_prime",
            SweepAxis::C1 => "c1",
            SweepAxis::C2 => "c2",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::DPrime => vec![8.0, 16.0, 32.0],
            SweepAxis::C1 | SweepAxis::C2 => vec![0.5, 1.0, 2.0],
        }
    }
}

impl FromStr for SweepAxis {
    type Err = MmrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d_prime" => Ok(SweepAxis::DPrime),
            "c1" => Ok(SweepAxis::C1),
            "c2" => Ok(SweepAxis::C2),
            _ => Err(MmrError::Config(format!(
                "unknown sweep axis '{s}' (expected d_prime, c1, or c2)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub x_value: f64,
    pub report: BenchmarkReport,
}

/// One benchmark per sweep value. Parameters not on the axis come from the
/// config's Mendelian scenario (defaults `β = c1 = c2 = 1`, `d' = 16`).
pub fn run_mendelian_sweep(
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(MmrError::Config("sweep needs at least one value".into()));
    }
    let (mut d_prime, mut beta, mut c1, mut c2) = (16, 1.0, 1.0, 1.0);
    if let ScenarioConfig::Mendelian {
        d_prime: d,
        beta: b,
        c1: a,
        c2: c,
    } = config.scenario
    {
        (d_prime, beta, c1, c2) = (d, b, a, c);
    }
    values
        .iter()
        .map(|&x| {
            let mut cfg = config.clone();
            match axis {
                SweepAxis::DPrime => {
                    if !(x >= 1.0 && x.fract() == 0.0) {
                        return Err(MmrError::Config(format!("d_prime must be a positive integer, got {x}")));
                    }
                    d_prime = x as usize;
                }
                SweepAxis::C1 => c1 = x,
                SweepAxis::C2 => c2 = x,
            }
            cfg.scenario = ScenarioConfig::Mendelian {
                d_prime,
                beta,
                c1,
                c2,
            };
            Ok(SweepPoint {
                x_value: x,
                report: run_benchmark(&cfg)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotRow {
    pub x_value: f64,
    pub method: Method,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Long-format plot data: one row per (method, x value) with the median and
/// quartiles of successful test errors, ordered by method then x value.
pub fn emit_plot_data(points: &[(f64, BenchmarkRecord)]) -> Result<Vec<PlotRow>> {
    if points.is_empty() {
        return Err(MmrError::input("plot data needs at least one record"));
    }
    let mut cells: BTreeMap<(Method, u64), (f64, Vec<f64>)> = BTreeMap::new();
    for (x, r) in points {
        if !x.is_finite() {
            return Err(MmrError::input("x values must be finite"));
        }
        let key = (r.method, x.to_bits() ^ if *x < 0.0 { u64::MAX } else { 1 << 63 });
        let cell = cells.entry(key).or_insert((*x, Vec::new()));
        if r.is_ok() {
            cell.1.push(r.test_mse);
        }
    }
    Ok(cells
        .into_iter()
        .map(|((method, _), (x_value, mut v))| {
            v.sort_by(f64::total_cmp);
            let (median, p25, p75) = if v.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                (quantile(&v, 0.5), quantile(&v, 0.25), quantile(&v, 0.75))
            };
            PlotRow {
                x_value,
                method,
                median,
                p25,
                p75,
            }
        })
        .collect())
}

pub fn write_plot_data<W: std::io::Write>(rows: &[PlotRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x_value", "method", "median", "p25", "p75"])?;
    for r in rows {
        w.write_record([
            r.x_value.to_string(),
            r.method.name().to_string(),
            r.median.to_string(),
            r.p25.to_string(),
            r.p75.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Which quantity of a results row becomes the plot's x value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotAxis {
    N,
    Sweep(SweepAxis),
}

impl FromStr for PlotAxis {
    type Err = MmrError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "n" {
            Ok(PlotAxis::N)
        } else {
            s.parse().map(PlotAxis::Sweep)
        }
    }
}

/// Reads the x value of `record` along `axis`; Mendelian parameters are
/// parsed from the scenario name, e.g. `mendelian(d'=16,c1=1,c2=1)`.
pub fn x_value(record: &BenchmarkRecord, axis: PlotAxis) -> Result<f64> {
    let key = match axis {
        PlotAxis::N => return Ok(record.n as f64),
        PlotAxis::Sweep(SweepAxis::DPrime) => "d'=",
        PlotAxis::Sweep(SweepAxis::C1) => "c1=",
        PlotAxis::Sweep(SweepAxis::C2) => "c2=",
    };
    let missing = || {
        MmrError::input(format!(
            "scenario '{}' has no {} parameter",
            record.scenario,
            key.trim_end_matches('=')
        ))
    };
    let start = record.scenario.find(key).ok_or_else(missing)? + key.len();
    let rest = &record.scenario[start..];
    let end = rest.find([',', ')']).unwrap_or(rest.len());
    rest[..end].parse().map_err(|_| missing())
}

/// Dataset CSV columns: `x_0..x_{d-1}, y, z_0..z_{d'-1}, f_star` (the last
/// is optional on input). Values carry 17 significant digits.
pub fn write_dataset<W: std::io::Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let (d, dz) = (data.x.ncols(), data.z.ncols());
    let mut header: Vec<String> = (0..d).map(|j| format!("x_{j}")).collect();
    header.push("y".into());
    header.extend((0..dz).map(|j| format!("z_{j}")));
    if data.f_star.is_some() {
        header.push("f_star".into());
    }
    w.write_record(&header)?;
    let fmt = |v: f64| format!("{v:.16e}");
    for i in 0..data.n() {
        let mut row: Vec<String> = (0..d).map(|j| fmt(data.x[(i, j)])).collect();
        row.push(fmt(data.y[i]));
        row.extend((0..dz).map(|j| fmt(data.z[(i, j)])));
        if let Some(f) = &data.f_star {
            row.push(fmt(f[i]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: std::io::Read>(input: R) -> Result<Dataset> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let cols = |prefix: &str| -> Vec<usize> {
        header
            .iter()
            .enumerate()
            .filter(|(_, h)| {
                h.strip_prefix(prefix)
                    .is_some_and(|s| !s.is_empty() && s.chars().all(|c| c.is_ascii_digit()))
            })
            .map(|(i, _)| i)
            .collect()
    };
    let xs = cols("x_");
    let zs = cols("z_");
    let y = header.iter().position(|h| h == "y");
    let f = header.iter().position(|h| h == "f_star");
    let y = y.ok_or_else(|| MmrError::input("dataset has no 'y' column"))?;
    if xs.is_empty() || zs.is_empty() {
        return Err(MmrError::input("dataset needs x_0.. and z_0.. columns"));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| MmrError::input(format!("row {}: {e}", line + 1)))?;
        if vals.len() != header.len() {
            return Err(MmrError::input(format!("row {} has the wrong number of fields", line + 1)));
        }
        rows.push(vals);
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, xs.len(), |i, j| rows[i][xs[j]]);
    let z = DMatrix::from_fn(n, zs.len(), |i, j| rows[i][zs[j]]);
    let yv = DVector::from_fn(n, |i, _| rows[i][y]);
    let fv = f.map(|c| DVector::from_fn(n, |i, _| rows[i][c]));
    Dataset::new(x, yv, z, fv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: Method, mse: f64, scenario: &str) -> BenchmarkRecord {
        BenchmarkRecord {
            scenario: scenario.into(),
            method,
            seed: 1,
            n: 10,
            test_mse: mse,
            fit_time_ms: 3,
            hyperparams: json!({ "lambda": 0.1 }),
            status: RecordStatus::Ok,
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let v = serde_json::to_value(m).unwrap();
            assert_eq!(v, json!(m.name()));
        }
        assert!(matches!("svm".parse::<Method>(), Err(MmrError::Config(_))));
        assert!(Method::DirectKrr.display_name().contains("DirectKRR"));
    }

    #[test]
    fn config_parses_defaults_and_round_trips() {
        let text = r#"
            scenario = { kind = "low_dim", truth = "sin" }
            methods = ["mmr_nystrom", "2sls"]
            n = 200
            [kernel]
            k = { family = "sum_gaussians", mode = "median" }
            [mmr]
            nystrom_draws = 3
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.repetitions, 10);
        assert_eq!(cfg.seed, 527);
        assert_eq!(cfg.mmr.nystrom_m, 300);
        assert_eq!(cfg.mmr.nystrom_draws, 3);
        assert_eq!(cfg.kernel.l, KernelConfig::median("gaussian"));
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_errors_are_config_errors() {
        let bad = [
            "scenario = { kind = \"low_dim\", truth = \"sin\" }\nmethods = []\nn = 100",
            "scenario = { kind = \"low_dim\", truth = \"sin\" }\nmethods = [\"2sls\"]\nn = 100\nrepetitions = 0",
            "scenario = { kind = \"low_dim\", truth = \"cos\" }\nmethods = [\"2sls\"]\nn = 100",
            "scenario = { kind = \"low_dim\", truth = \"sin\" }\nmethods = [\"2sls\"]\nn = 100\nbogus = 1",
            "scenario = { kind = \"low_dim\", truth = \"sin\" }\nmethods = [\"mmr_nn\"]\nn = 100\n[nn]\nlr_grid = \"huge\"",
        ];
        for text in bad {
            assert!(
                matches!(ExperimentConfig::from_toml(text), Err(MmrError::Config(_))),
                "accepted: {text}"
            );
        }
    }

    #[test]
    fn one_repetition_reports_zero_sd() {
        let mut cfg = ExperimentConfig::new(
            ScenarioConfig::low_dim(Truth::Linear),
            vec![Method::TwoSls, Method::DirectKrr],
            200,
        );
        cfg.repetitions = 1;
        let report = run_benchmark(&cfg).unwrap();
        assert_eq!(report.records.len(), 2);
        for s in &report.summary {
            assert_eq!(s.sd_mse, 0.0);
            assert_eq!(s.succeeded, 1);
        }
        assert!(report.records[0].test_mse < 0.01);
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let mut cfg = ExperimentConfig::new(
            ScenarioConfig::low_dim(Truth::Linear),
            vec![Method::MmrNn, Method::TwoSls],
            50,
        );
        cfg.repetitions = 2;
        cfg.nn.hidden = vec![3];
        cfg.nn.epochs = 50;
        cfg.nn.lr_grid = LrGrid::Values(vec![1e8]);
        cfg.nn.lambda_grid = vec![0.0];
        let report = run_benchmark(&cfg).unwrap();
        assert_eq!(report.records.len(), 4);
        for r in &report.records[..2] {
            assert!(matches!(r.status, RecordStatus::Failed { numerical: true, .. }));
            assert!(r.test_mse.is_nan());
            assert_eq!(r.hyperparams["status"], "FAILED");
        }
        assert!(report.records[2..].iter().all(|r| r.is_ok()));
        assert!(!report.all_failed_numerically());
        cfg.methods = vec![Method::MmrNn];
        assert!(run_benchmark(&cfg).unwrap().all_failed_numerically());
    }

    #[test]
    fn results_csv_round_trips() {
        let mut recs = vec![
            record(Method::MmrNystrom, 0.0123456789, "sin"),
            record(Method::TwoSls, 1e-17, "mendelian(d'=8,c1=1,c2=0.5)"),
        ];
        recs.push(BenchmarkRecord {
            test_mse: f64::NAN,
            hyperparams: json!({ "status": "FAILED", "error": "boom" }),
            status: RecordStatus::Failed {
                numerical: true,
                message: "boom".into(),
            },
            ..record(Method::MmrNn, 0.0, "sin")
        });
        let mut buf = Vec::new();
        write_results(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("scenario,method,seed,n,test_mse,fit_time_ms,hyperparams_json\n"));
        let back = read_results(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0], recs[0]);
        assert_eq!(back[1], recs[1]);
        assert!(!back[2].is_ok());
    }

    #[test]
    fn plot_median_is_sorted_middle_value() {
        let vals = [0.5, 0.1, 0.9, 0.3, 0.7, 0.2, 0.8, 0.4, 0.6, 1.0, 0.05];
        let points: Vec<_> = vals.iter().map(|&v| (8.0, record(Method::TwoSls, v, "m"))).collect();
        let rows = emit_plot_data(&points).unwrap();
        assert_eq!(rows.len(), 1);
        let mut s = vals.to_vec();
        s.sort_by(f64::total_cmp);
        assert_eq!(rows[0].median, s[5]);
        assert!(rows[0].p25 <= rows[0].median && rows[0].median <= rows[0].p75);
    }

    #[test]
    fn plot_rows_ordered_by_method_then_x() {
        let points = vec![
            (32.0, record(Method::TwoSls, 0.1, "a")),
            (8.0, record(Method::TwoSls, 0.2, "a")),
            (16.0, record(Method::MmrNystrom, 0.3, "a")),
            (8.0, record(Method::MmrNystrom, 0.4, "a")),
        ];
        let rows = emit_plot_data(&points).unwrap();
        let order: Vec<(Method, f64)> = rows.iter().map(|r| (r.method, r.x_value)).collect();
        assert_eq!(
            order,
            vec![
                (Method::MmrNystrom, 8.0),
                (Method::MmrNystrom, 16.0),
                (Method::TwoSls, 8.0),
                (Method::TwoSls, 32.0)
            ]
        );
        let single = emit_plot_data(&points[..1]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].median, 0.1);
        assert!(emit_plot_data(&[]).is_err());
    }

    #[test]
    fn x_values_parse_from_scenario_names() {
        let r = record(Method::TwoSls, 0.1, "mendelian(d'=32,c1=0.5,c2=2)");
        assert_eq!(x_value(&r, PlotAxis::Sweep(SweepAxis::DPrime)).unwrap(), 32.0);
        assert_eq!(x_value(&r, PlotAxis::Sweep(SweepAxis::C1)).unwrap(), 0.5);
        assert_eq!(x_value(&r, PlotAxis::Sweep(SweepAxis::C2)).unwrap(), 2.0);
        assert_eq!(x_value(&r, PlotAxis::N).unwrap(), 10.0);
        assert!(x_value(&record(Method::TwoSls, 0.1, "sin"), PlotAxis::Sweep(SweepAxis::C1)).is_err());
    }

    #[test]
    fn dataset_csv_round_trips_exactly() {
        let data = crate::datagen::MendelianSpec {
            d_prime: 3,
            n: 25,
            ..Default::default()
        };
        let data = crate::datagen::gen_mendelian(&data).unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x_0,y,z_0,z_1,z_2,f_star\n"));
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), data);
    }

    #[test]
    fn fitted_models_survive_json() {
        let data = crate::datagen::LowDimSpec {
            truth: Truth::Abs,
            n: 60,
            seed: 4,
        }
        .generate();
        let mut settings = MethodSettings::default();
        settings.mmr.lambda_grid = vec![1e-4, 1e-2];
        settings.mmr.bandwidth_factors = vec![1.0];
        settings.nn.hidden = vec![4];
        settings.nn.epochs = 20;
        settings.nn.lr_grid = LrGrid::Values(vec![0.01]);
        settings.nn.lambda_grid = vec![1e-4];
        settings.poly2sls.max_degree = 2;
        for m in Method::ALL {
            let fit = fit_method(m, &data, None, &settings, false, 3).unwrap();
            let back = FittedModel::from_json(&fit.model.to_json().unwrap()).unwrap();
            assert_eq!(back.predict(&data.x).unwrap(), fit.model.predict(&data.x).unwrap(), "{m}");
        }
    }

    #[test]
    fn sweep_varies_only_the_axis() {
        let mut cfg = ExperimentConfig::new(
            ScenarioConfig::mendelian(4, 1.0, 1.0),
            vec![Method::TwoSls],
            100,
        );
        cfg.repetitions = 2;
        let pts = run_mendelian_sweep(&cfg, SweepAxis::C2, &[0.5, 2.0]).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].report.records[0].scenario, "mendelian(d'=4,c1=1,c2=2)");
        assert!(run_mendelian_sweep(&cfg, SweepAxis::DPrime, &[2.5]).is_err());
    }
}
