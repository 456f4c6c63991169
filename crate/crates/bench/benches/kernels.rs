use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use soh_bench::{chain_sample, module_profile, sinc};
use soh_core::curvefit::{fit_qv, FitConfig};
use soh_core::info::knn_cmi;
use soh_core::rvr::{train, RvrConfig};

fn bench_cmi(c: &mut Criterion) {
    let mut g = c.benchmark_group("knn_cmi");
    for n in [500, 2000] {
        let s = chain_sample(n, 1);
        g.bench_with_input(BenchmarkId::from_parameter(n), &s, |b, s| b.iter(|| knn_cmi(s, 5).unwrap()));
    }
    g.finish();
}

fn bench_rvr(c: &mut Criterion) {
    let mut g = c.benchmark_group("rvr_train");
    g.sample_size(20);
    for n in [100, 250] {
        let (x, y) = sinc(n, 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &(x, y), |b, (x, y)| {
            b.iter(|| train(x, y, &[], &RvrConfig::default()).unwrap())
        });
    }
    g.finish();
}

fn bench_fit(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit_qv");
    g.sample_size(20);
    for n in [200, 600] {
        let p = module_profile(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &p, |b, p| {
            b.iter(|| fit_qv(p, &FitConfig::default()).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_cmi, bench_rvr, bench_fit);
criterion_main!(benches);
