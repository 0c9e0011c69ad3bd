use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mmriv::datagen::{split_seed, Scenario, Truth};
use mmriv::diagnostics::{
    asymptotic_normality_check, consistency_sweep, identification_probe, normality_self_test,
    wu_indefiniteness_check, Candidate,
};
use mmriv::harness::{
    emit_plot_data, fit_method, read_dataset, read_results, run_benchmark, run_mendelian_sweep,
    select_mmr, write_dataset, write_plot_data, write_results, write_run, x_value,
    BenchmarkRecord, ExperimentConfig, FittedModel, LrGrid, Method, MethodSettings, PlotAxis,
    ScenarioConfig, SweepAxis,
};
use mmriv::kernels::{gram, sum_gaussians_from_median, KernelSpec};
use mmriv::risk::Dataset;
use mmriv::MmrError;

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

#[derive(Parser)]
#[command(name = "mmriv", version, about = "Kernel instrumental-variable regression by maximum moment restriction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset to CSV.
    Generate(GenerateArgs),
    /// Fit one method and save the model as JSON.
    Fit(FitArgs),
    /// Predict with a saved model.
    Predict(PredictArgs),
    /// Print the LMOCV table of an MMR estimator.
    Select(SelectArgs),
    /// Run a benchmark described by a TOML config.
    Benchmark(BenchmarkArgs),
    /// Sweep one parameter of the Mendelian randomization scenario.
    Mendelian(MendelianArgs),
    /// Run a diagnostic check.
    Diagnose(DiagnoseArgs),
    /// Aggregate results files into median and quartiles per method.
    PlotData(PlotDataArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// sin, abs, linear, step, or mendelian.
    #[arg(long, default_value = "sin")]
    scenario: String,
    /// Noise scale for the low-dimensional scenarios.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 16)]
    d_prime: usize,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    c1: f64,
    #[arg(long, default_value_t = 1.0)]
    c2: f64,
}

impl ScenarioArgs {
    fn config(&self) -> Result<ScenarioConfig> {
        Ok(if self.scenario == "mendelian" {
            ScenarioConfig::Mendelian {
                d_prime: self.d_prime,
                beta: self.beta,
                c1: self.c1,
                c2: self.c2,
            }
        } else {
            ScenarioConfig::LowDim {
                truth: self.scenario.parse::<Truth>()?,
                noise: self.noise,
            }
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    n: usize,
    /// Repetition seed; the same seed reproduces the data a benchmark
    /// repetition with that seed sees.
    #[arg(long, default_value_t = 527)]
    seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    split: Split,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SettingsArgs {
    /// TOML with `[kernel]`, `[mmr]`, `[nn]`, ... sections, or a full
    /// benchmark config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fixed `λ` (skips MMR selection) or the network penalty.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    nystrom_m: Option<usize>,
    #[arg(long)]
    leave_out: Option<usize>,
    /// Hidden layer widths, e.g. `100,100`.
    #[arg(long, value_delimiter = ',')]
    arch: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 527)]
    seed: u64,
}

impl SettingsArgs {
    fn settings(&self, method: Method) -> Result<MethodSettings> {
        let mut s = match &self.config {
            Some(p) => MethodSettings::load(p)?,
            None => MethodSettings::default(),
        };
        if let Some(l) = self.lambda {
            match method {
                Method::MmrNn => s.nn.lambda_grid = vec![l],
                _ => s.mmr.lambda = Some(l),
            }
        }
        if let Some(m) = self.nystrom_m {
            s.mmr.nystrom_m = m;
        }
        if let Some(m) = self.leave_out {
            s.mmr.leave_out = m;
        }
        if let Some(a) = &self.arch {
            s.nn.hidden = a.clone();
        }
        if let Some(lr) = self.lr {
            s.nn.lr_grid = LrGrid::Values(vec![lr]);
        }
        if let Some(e) = self.epochs {
            s.nn.epochs = e;
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation CSV: network CV split, and extra MMR selection data.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    method: Method,
    #[command(flatten)]
    settings: SettingsArgs,
    /// Model JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV in the `generate` layout; `y` and `z` columns are ignored.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "mmr_rkhs")]
    method: Method,
    #[command(flatten)]
    settings: SettingsArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunOverrides {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    nystrom_m: Option<usize>,
    #[arg(long)]
    nystrom_draws: Option<usize>,
}

impl RunOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(r) = self.repetitions {
            cfg.repetitions = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.methods {
            cfg.methods = m.clone();
        }
        if let Some(m) = self.nystrom_m {
            cfg.mmr.nystrom_m = m;
        }
        if let Some(d) = self.nystrom_draws {
            cfg.mmr.nystrom_draws = d;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.display().to_string());
        }
        cfg.validate()?;
        Ok(())
    }
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    run: RunOverrides,
}

#[derive(Args)]
struct MendelianArgs {
    /// Benchmark config; its scenario supplies the unswept parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "d_prime")]
    sweep: SweepAxis,
    /// Comma-separated sweep values; defaults to the standard grid for the axis.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[command(flatten)]
    run: RunOverrides,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(subcommand)]
    check: Diagnostic,
}

#[derive(Subcommand)]
enum Diagnostic {
    /// Shape of the sampling distribution of the linear V-statistic estimator.
    Normality {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 500)]
        replications: usize,
        #[arg(long, default_value_t = 527)]
        seed: u64,
        /// Directory for `normality_estimates.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spectrum of the U-statistic weight matrix on sampled instruments.
    Wu {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 527)]
        seed: u64,
    },
    /// V-risk of the structural function against perturbed candidates.
    Identification {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 527)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Median test error of one method over growing sample sizes.
    Consistency {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "mmr_rkhs")]
        method: Method,
        #[arg(long, value_delimiter = ',', default_value = "100,200,400,800")]
        n_list: Vec<usize>,
        /// Repetitions per sample size.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 527)]
        seed: u64,
        /// Benchmark config supplying method settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PlotDataArgs {
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<PathBuf>,
    /// n, d_prime, c1, or c2.
    #[arg(long, default_value = "n")]
    axis: PlotAxis,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Raised when every fitted method failed numerically.
#[derive(Debug)]
struct AllFailed;

impl std::fmt::Display for AllFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("every method failed numerically")
    }
}

impl std::error::Error for AllFailed {}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(
                File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
            ))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(read_dataset(f)?)
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let scenario = a.scenario.config()?.build(a.seed)?;
    let index = match a.split {
        Split::Train => 0,
        Split::Validation => 1,
        Split::Test => 2,
    };
    let data = scenario.sample(a.n, split_seed(a.seed, index))?;
    let mut out = output(a.out.as_deref())?;
    write_dataset(&data, &mut out)?;
    out.flush()?;
    Ok(())
}

fn fit(a: &FitArgs) -> Result<()> {
    let settings = a.settings.settings(a.method)?;
    let train = load_dataset(&a.data)?;
    let validation = a.validation.as_deref().map(load_dataset).transpose()?;
    let combine = settings.mmr.combine_validation.unwrap_or(true);
    let fit = fit_method(
        a.method,
        &train,
        validation.as_ref(),
        &settings,
        combine,
        a.settings.seed,
    )?;
    fit.model.save(&a.out)?;
    eprintln!(
        "{} fitted in {} ms: {}",
        a.method.display_name(),
        fit.fit_time_ms,
        fit.model.hyperparams
    );
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let model = FittedModel::load(&a.model)?;
    let data = load_dataset(&a.data)?;
    let pred = model.predict(&data.x)?;
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "prediction")?;
    for p in pred.iter() {
        writeln!(out, "{p:.16e}")?;
    }
    out.flush()?;
    if let Some(f) = &data.f_star {
        let mse = (&pred - f).norm_squared() / f.len() as f64;
        eprintln!("test_mse {mse:.6e}");
    }
    Ok(())
}

fn param_names(spec: &KernelSpec) -> Vec<String> {
    match spec {
        KernelSpec::Gaussian { .. } | KernelSpec::Laplacian { .. } => vec!["l_sigma".into()],
        KernelSpec::InverseMultiquadric { .. } => vec!["l_c".into(), "l_gamma".into()],
        KernelSpec::SumGaussians { .. } => (0..3).map(|i| format!("l_sigma_{i}")).collect(),
        KernelSpec::Ard { lengthscales } => (0..lengthscales.len())
            .map(|i| format!("l_lengthscale_{i}"))
            .collect(),
    }
}

fn select(a: &SelectArgs) -> Result<()> {
    let settings = a.settings.settings(a.method)?;
    let data = load_dataset(&a.data)?;
    let sel = select_mmr(a.method, &data, &settings, a.settings.seed)?;
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    let mut header = vec!["delta".to_string()];
    header.extend(param_names(&sel.kernel_l));
    header.extend(["cv_error".to_string(), "status".to_string()]);
    w.write_record(&header)?;
    for row in &sel.table {
        let mut rec = vec![format!("{:.16e}", row.delta)];
        rec.extend(row.kernel_l.params().iter().map(|p| format!("{p:.16e}")));
        rec.push(format!("{:.16e}", row.cv_error));
        rec.push(row.status.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    eprintln!(
        "selected delta = {:.4e} (lambda = {:.4e}), l = {}, cv_error = {:.6e}",
        sel.delta,
        sel.lambda(data.n()),
        sel.kernel_l.label(),
        sel.cv_error
    );
    Ok(())
}

fn finish(records: &[BenchmarkRecord]) -> Result<()> {
    if !records.is_empty()
        && records.iter().all(|r| {
            matches!(
                r.status,
                mmriv::harness::RecordStatus::Failed { numerical: true, .. }
            )
        })
    {
        return Err(AllFailed.into());
    }
    Ok(())
}

fn benchmark(a: &BenchmarkArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    a.run.apply(&mut cfg)?;
    let report = run_benchmark(&cfg)?;
    match &cfg.output_dir {
        Some(dir) => {
            write_run(Path::new(dir), &cfg, &report)?;
            eprintln!("wrote {dir}/results.csv");
        }
        None => write_results(&report.records, io::stdout().lock())?,
    }
    for row in &report.summary {
        eprintln!("{row}");
    }
    if report.all_failed_numerically() {
        return Err(AllFailed.into());
    }
    Ok(())
}

fn mendelian(a: &MendelianArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(
            ScenarioConfig::mendelian(16, 1.0, 1.0),
            vec![Method::MmrNystrom, Method::MmrNn, Method::TwoSls, Method::Poly2Sls],
            10_000,
        ),
    };
    if !cfg.scenario.is_mendelian() {
        bail!(MmrError::Config("mendelian needs a mendelian scenario".into()));
    }
    a.run.apply(&mut cfg)?;
    let values = a.values.clone().unwrap_or_else(|| a.sweep.default_values());
    let points = run_mendelian_sweep(&cfg, a.sweep, &values)?;
    let records: Vec<BenchmarkRecord> = points
        .iter()
        .flat_map(|p| p.report.records.iter().cloned())
        .collect();
    let tagged: Vec<(f64, BenchmarkRecord)> = points
        .iter()
        .flat_map(|p| p.report.records.iter().map(|r| (p.x_value, r.clone())))
        .collect();
    match &cfg.output_dir {
        Some(dir) => {
            let dir = Path::new(dir);
            fs::create_dir_all(dir)?;
            write_results(&records, File::create(dir.join("results.csv"))?)?;
            fs::write(dir.join("config.resolved.toml"), cfg.to_toml()?)?;
            let ok: Vec<(f64, BenchmarkRecord)> =
                tagged.into_iter().filter(|(_, r)| r.is_ok()).collect();
            if !ok.is_empty() {
                write_plot_data(&emit_plot_data(&ok)?, File::create(dir.join("plot.csv"))?)?;
            }
            eprintln!("wrote {}", dir.join("results.csv").display());
        }
        None => write_results(&records, io::stdout().lock())?,
    }
    for p in &points {
        for row in &p.report.summary {
            eprintln!("{row}");
        }
    }
    finish(&records)
}

fn print_json(v: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    match &a.check {
        Diagnostic::Normality {
            n,
            replications,
            seed,
            out,
        } => {
            let report = asymptotic_normality_check(*n, *replications, *seed)?;
            let self_test = normality_self_test(*replications, *seed)?;
            if let Some(dir) = out {
                fs::create_dir_all(dir)?;
                let mut w = csv::Writer::from_path(dir.join("normality_estimates.csv"))?;
                w.write_record(["replication", "scaled_error"])?;
                for (i, e) in report.estimates.iter().enumerate() {
                    w.write_record([i.to_string(), format!("{e:.16e}")])?;
                }
                w.flush()?;
            }
            let strip = |r: &mmriv::diagnostics::NormalityReport| -> Result<Value> {
                let mut v = serde_json::to_value(r)?;
                if let Some(o) = v.as_object_mut() {
                    o.remove("estimates");
                }
                Ok(v)
            };
            print_json(&json!({
                "check": "normality",
                "pass": report.pass && self_test.pass,
                "estimator": strip(&report)?,
                "self_test": strip(&self_test)?,
            }))
        }
        Diagnostic::Wu { scenario, n, seed } => {
            let data = scenario.config()?.build(*seed)?.sample(*n, *seed)?;
            let k = gram(&sum_gaussians_from_median(&data.z)?, &data.z)?;
            let report = wu_indefiniteness_check(&k)?;
            let mut v = serde_json::to_value(&report)?;
            v["check"] = json!("wu");
            print_json(&v)
        }
        Diagnostic::Identification {
            scenario,
            n,
            seed,
            out,
        } => {
            let sc: Scenario = scenario.config()?.build(*seed)?;
            let f = |x: &[f64]| sc.structural(x);
            let shifted = |x: &[f64]| sc.structural(x) + 1.0;
            let doubled = |x: &[f64]| 2.0 * sc.structural(x);
            let candidates: [Candidate<'_>; 3] =
                [("f_star", &f), ("f_star_plus_1", &shifted), ("two_f_star", &doubled)];
            let report = identification_probe(&sc, &candidates, *n, *seed)?;
            if let Some(dir) = out {
                fs::create_dir_all(dir)?;
                let mut w = csv::Writer::from_path(dir.join("identification.csv"))?;
                w.write_record(["candidate", "v_risk"])?;
                for r in &report.rows {
                    w.write_record([r.candidate.clone(), format!("{:.16e}", r.v_risk)])?;
                }
                w.flush()?;
            }
            let mut v = serde_json::to_value(&report)?;
            v["check"] = json!("identification");
            v["pass"] = json!(report.best == "f_star");
            print_json(&v)
        }
        Diagnostic::Consistency {
            scenario,
            method,
            n_list,
            seeds,
            seed,
            config,
            out,
        } => {
            let sc = scenario.config()?;
            let base = match config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::new(sc.clone(), vec![*method], n_list[0]),
            };
            let seed_list: Vec<u64> = (0..*seeds as u64).map(|i| split_seed(*seed, i)).collect();
            let rows = consistency_sweep(&base, &sc, *method, n_list, &seed_list)?;
            if let Some(dir) = out {
                fs::create_dir_all(dir)?;
                let mut w = csv::Writer::from_path(dir.join("consistency.csv"))?;
                w.write_record(["n", "median_mse", "failed"])?;
                for r in &rows {
                    w.write_record([
                        r.n.to_string(),
                        format!("{:.16e}", r.median_mse),
                        r.failed.to_string(),
                    ])?;
                }
                w.flush()?;
            }
            let decreasing = rows.windows(2).all(|w| w[1].median_mse <= w[0].median_mse);
            print_json(&json!({
                "check": "consistency",
                "scenario": sc.name(),
                "method": method.name(),
                "median_mse_nonincreasing": decreasing,
                "rows": rows,
            }))
        }
    }
}

fn plot_data(a: &PlotDataArgs) -> Result<()> {
    let mut points = Vec::new();
    for path in &a.results {
        let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
        for r in read_results(f)? {
            if r.is_ok() {
                points.push((x_value(&r, a.axis)?, r));
            }
        }
    }
    let rows = emit_plot_data(&points)?;
    let mut out = output(a.out.as_deref())?;
    write_plot_data(&rows, &mut out)?;
    out.flush()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Select(a) => select(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Mendelian(a) => mendelian(a),
        Command::Diagnose(a) => diagnose(a),
        Command::PlotData(a) => plot_data(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<AllFailed>().is_some() {
        return EXIT_NUMERICAL;
    }
    match err.downcast_ref::<MmrError>() {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
