use mmriv::datagen::{Scenario, Truth};
use mmriv::harness::{
    fit_method, read_dataset, read_results, run_benchmark, run_benchmark_with, write_dataset,
    write_results, ExperimentConfig, FittedModel, Method, MethodSettings, ScenarioConfig,
};
use mmriv::kernels::{gram, sum_gaussians_from_median};
use mmriv::model_selection::{gp_posterior, select_hyperparams, CvPlan, PosteriorBlocks, PosteriorMode};
use mmriv::parallel::Exec;
use mmriv::{nystrom, rkhs_solver};

fn mse(a: &nalgebra::DVector<f64>, b: &nalgebra::DVector<f64>) -> f64 {
    (a - b).norm_squared() / a.len() as f64
}

#[test]
fn select_then_fit_beats_the_mean() {
    let sc = Scenario::low_dim(Truth::Abs);
    let splits = sc.splits(300, 4).unwrap();
    let settings = MethodSettings::default();
    let fit = fit_method(Method::MmrRkhs, &splits.train, None, &settings, false, 4).unwrap();
    let f = splits.test.f_star.as_ref().unwrap();
    let pred = fit.model.predict(&splits.test.x).unwrap();
    let baseline = f.add_scalar(-f.mean()).norm_squared() / f.len() as f64;
    assert!(mse(&pred, f) < 0.5 * baseline);
}

#[test]
fn saved_model_predicts_identically() {
    let splits = Scenario::low_dim(Truth::Sin).splits(120, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for method in [Method::MmrNystrom, Method::TwoSls, Method::Poly2Sls, Method::DirectKrr] {
        let fit = fit_method(method, &splits.train, Some(&splits.validation), &MethodSettings::default(), true, 2)
            .unwrap();
        let path = dir.path().join(format!("{method}.json"));
        fit.model.save(&path).unwrap();
        let back = FittedModel::load(&path).unwrap();
        assert_eq!(back, fit.model);
        assert_eq!(back.predict(&splits.test.x).unwrap(), fit.model.predict(&splits.test.x).unwrap());
    }
}

#[test]
fn dataset_csv_round_trip_is_exact() {
    let d = ScenarioConfig::mendelian(3, 1.0, 1.0).build(6).unwrap().sample(25, 1).unwrap();
    let mut buf = Vec::new();
    write_dataset(&d, &mut buf).unwrap();
    let back = read_dataset(buf.as_slice()).unwrap();
    assert_eq!(back, d);
}

#[test]
fn full_rank_nystrom_matches_exact_after_selection() {
    let d = Scenario::low_dim(Truth::Step).sample(60, 2).unwrap();
    let k = sum_gaussians_from_median(&d.z).unwrap();
    let l_grid = mmriv::model_selection::default_l_grid(&d.x).unwrap();
    let deltas = mmriv::model_selection::default_delta_grid(60);
    let plan = CvPlan::random_partition(60, 2, 5).unwrap();
    let sel = select_hyperparams(&d, &k, &l_grid, &deltas, &plan, PosteriorMode::Exact).unwrap();
    let lambda = sel.lambda(60);
    let exact = rkhs_solver::fit(&d, &k, &sel.kernel_l, lambda).unwrap();
    let approx = nystrom::fit_nystrom(&d, &k, &sel.kernel_l, lambda, 60, 9).unwrap();
    let rel = (&exact.alpha - &approx.alpha).norm() / exact.alpha.norm();
    assert!(rel < 1e-6, "relative alpha gap {rel}");

    let post = gp_posterior(&gram(&k, &d.z).unwrap(), &gram(&sel.kernel_l, &d.x).unwrap(), &d.y, sel.delta).unwrap();
    assert!((post.mean() - exact.predict(&d.x).unwrap()).amax() < 1e-8);
}

#[test]
fn benchmark_results_survive_csv_and_ignore_strategy() {
    let mut cfg = ExperimentConfig::new(
        ScenarioConfig::low_dim(Truth::Linear),
        vec![Method::MmrRkhs, Method::TwoSls],
        50,
    );
    cfg.repetitions = 2;
    let par = run_benchmark_with(&cfg, Exec::Parallel).unwrap();
    let seq = run_benchmark_with(&cfg, Exec::Sequential).unwrap();
    let strip = |r: &[mmriv::harness::BenchmarkRecord]| {
        r.iter()
            .map(|x| (x.method, x.seed, x.test_mse.to_bits(), x.hyperparams.to_string()))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&par.records), strip(&seq.records));

    let mut buf = Vec::new();
    write_results(&par.records, &mut buf).unwrap();
    let back = read_results(buf.as_slice()).unwrap();
    assert_eq!(strip(&back), strip(&par.records));
    assert_eq!(par.summary.len(), 2);
    assert!(run_benchmark(&cfg).unwrap().summary.iter().all(|s| s.succeeded == 2));
}
