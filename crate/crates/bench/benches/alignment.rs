use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use iccs_core::supervisors::{compute_centroid, run_alignment, AlignmentConfig, AlignmentRig, BenchRig};

const TARGET: (f64, f64) = (32.0, 32.0);
const GAIN: [[f64; 2]; 2] = [[0.01, 0.001], [-0.001, 0.012]];

fn centroid(c: &mut Criterion) {
    let mut rig = BenchRig::new((30.5, 33.2), GAIN, 1);
    rig.noise = 0.005;
    let frame = rig.grab().unwrap();
    c.bench_function("centroid_64x64", |b| b.iter(|| black_box(compute_centroid(&frame).unwrap())));
}

fn alignment(c: &mut Criterion) {
    let cfg = AlignmentConfig::new("bench", TARGET, [[0.012, 0.001], [-0.001, 0.011]]);
    c.bench_function("alignment_loop_15px", |b| {
        b.iter(|| {
            let mut rig = BenchRig::new((TARGET.0 - 12.0, TARGET.1 + 9.0), GAIN, 1);
            black_box(run_alignment(&cfg, &mut rig).unwrap())
        })
    });
}

criterion_group!(benches, centroid, alignment);
criterion_main!(benches);
