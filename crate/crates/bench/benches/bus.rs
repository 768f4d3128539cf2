use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use iccs_core::bus::{Bus, Endpoint};
use iccs_core::clock::SimClock;

fn request_reply(c: &mut Criterion) {
    let bus = Bus::new(SimClock::new_wall());
    let svc = bus
        .serve(&Endpoint::inproc("echo", 1), &["svc/echo"], |r| r.payload().to_vec())
        .unwrap();
    let mut g = c.benchmark_group("bus_request");
    for size in [16usize, 1024, 64 * 1024] {
        let payload = vec![7u8; size];
        g.throughput(Throughput::Bytes(size as u64));
        g.bench_with_input(BenchmarkId::from_parameter(size), &payload, |b, p| {
            b.iter(|| black_box(bus.request("svc/echo", p.clone(), Duration::from_secs(1)).unwrap()))
        });
    }
    g.finish();
    svc.stop();
}

fn publish_fanout(c: &mut Criterion) {
    let bus = Bus::new(SimClock::new_wall());
    let mut g = c.benchmark_group("bus_publish");
    for subs in [1usize, 8, 32] {
        let s: Vec<_> = (0..subs).map(|_| bus.subscribe("status/*/*").unwrap()).collect();
        g.bench_with_input(BenchmarkId::from_parameter(subs), &subs, |b, _| {
            b.iter(|| {
                bus.publish("status/fep01/beam01", b"ok".to_vec()).unwrap();
                for x in &s {
                    black_box(x.try_recv());
                }
            })
        });
    }
    g.finish();
}

criterion_group!(benches, request_reply, publish_fanout);
criterion_main!(benches);
