use criterion::{criterion_group, criterion_main, Criterion};

use survens_bench::cohort;
use survens_core::{fit_gbcox, fit_rsf, GbcoxParams, RsfParams};

fn learners(c: &mut Criterion) {
    let ds = cohort(500, 10, 7);
    let mut g = c.benchmark_group("fit");
    g.sample_size(10);
    g.bench_function("rsf_50_trees", |b| {
        b.iter(|| {
            fit_rsf(
                &ds,
                &RsfParams {
                    n_trees: 50,
                    ..RsfParams::default()
                },
            )
            .unwrap()
        })
    });
    g.bench_function("gbcox_50_rounds", |b| {
        b.iter(|| {
            fit_gbcox(
                &ds,
                &GbcoxParams {
                    n_rounds: 50,
                    ..GbcoxParams::default()
                },
            )
            .unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, learners);
criterion_main!(benches);
