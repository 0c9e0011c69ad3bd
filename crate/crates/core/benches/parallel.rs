use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;

use mmriv::datagen::{LowDimSpec, Truth};
use mmriv::diagnostics::asymptotic_normality_check_with;
use mmriv::kernels::{gram_with, sum_gaussians_from_median, KernelOperator};
use mmriv::model_selection::{
    default_delta_grid, default_l_grid, select_hyperparams_with, CvPlan, PosteriorMode,
};
use mmriv::parallel::Exec;

const STRATEGIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn data(n: usize) -> mmriv::risk::Dataset {
    LowDimSpec {
        truth: Truth::Sin,
        n,
        seed: 7,
    }
    .generate()
}

fn bench_gram(c: &mut Criterion) {
    let d = data(1000);
    let k = sum_gaussians_from_median(&d.z).unwrap();
    let mut g = c.benchmark_group("gram_1000");
    for (name, exec) in STRATEGIES {
        g.bench_function(name, |b| b.iter(|| gram_with(&k, &d.z, exec).unwrap()));
    }
    g.finish();
}

fn bench_apply(c: &mut Criterion) {
    let d = data(4000);
    let k = sum_gaussians_from_median(&d.z).unwrap();
    let op = KernelOperator::new(&k, &d.z).unwrap();
    let rhs = DMatrix::from_fn(4000, 2, |i, j| ((i + j) as f64).sin());
    let mut g = c.benchmark_group("kernel_apply_4000");
    g.sample_size(10);
    for (name, exec) in STRATEGIES {
        g.bench_function(name, |b| b.iter(|| op.apply(&rhs, exec).unwrap()));
    }
    g.finish();
}

fn bench_selection(c: &mut Criterion) {
    let mut g = c.benchmark_group("lmocv_selection");
    g.sample_size(10);
    for n in [200, 400] {
        let d = data(n);
        let k = sum_gaussians_from_median(&d.z).unwrap();
        let l_grid = default_l_grid(&d.x).unwrap();
        let deltas = default_delta_grid(n);
        let plan = CvPlan::random_partition(n, 2, 3).unwrap();
        for (name, exec) in STRATEGIES {
            g.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| {
                    select_hyperparams_with(&d, &k, &l_grid, &deltas, &plan, PosteriorMode::Exact, exec)
                        .unwrap()
                })
            });
        }
    }
    g.finish();
}

fn bench_replications(c: &mut Criterion) {
    let mut g = c.benchmark_group("normality_replications");
    g.sample_size(10);
    for (name, exec) in STRATEGIES {
        g.bench_function(name, |b| {
            b.iter(|| asymptotic_normality_check_with(300, 40, 1, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_gram, bench_apply, bench_selection, bench_replications);
criterion_main!(benches);
