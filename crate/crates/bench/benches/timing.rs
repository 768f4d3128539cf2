use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use iccs_core::director::trigger_grid;
use iccs_core::timing::{accuracy_report, build_schedule, execute, JitterModel, TimingLimits};

fn schedule(c: &mut Criterion) {
    let grid = trigger_grid(8, 200, 1000, 500);
    c.bench_function("build_schedule_1600", |b| {
        b.iter(|| black_box(build_schedule("bench", grid.clone(), TimingLimits::default()).unwrap()))
    });
    let s = build_schedule("bench", grid, TimingLimits::default()).unwrap();
    c.bench_function("execute_1600_bounded_uniform", |b| {
        b.iter(|| black_box(execute(&s, JitterModel::BoundedUniform { bound_ps: 30 }, 1).unwrap()))
    });
    let fired = execute(&s, JitterModel::GaussianTruncated { sigma_ps: 10, bound_ps: 30 }, 1).unwrap();
    c.bench_function("accuracy_report_1600", |b| b.iter(|| black_box(accuracy_report(&fired).unwrap())));
}

criterion_group!(benches, schedule);
criterion_main!(benches);
