use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use nngp::kernel::{base_kernel, KernelRecursion};
use nngp::netsim::{sample_network, SamplerConfig};
use nngp::{Activation, Exec, InputSet, NetworkParams, QuadratureSpec};

fn inputs(k: usize) -> InputSet {
    let rows = (0..k)
        .map(|i| {
            let t = i as f64 / k as f64;
            vec![1.0 + t, (3.0 * t).sin(), (5.0 * t).cos(), t * t]
        })
        .collect();
    InputSet::new(rows).expect("distinct inputs")
}

fn layer_step(c: &mut Criterion) {
    let params = NetworkParams::new(2, 2.0, 0.1).unwrap();
    let x = inputs(24);
    let prev = base_kernel(&x, &params);
    let mut group = c.benchmark_group("layer_step");
    for act in [Activation::relu(), Activation::tanh()] {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let rec = KernelRecursion::new(&act, params, &QuadratureSpec::default(), exec).unwrap();
            group.bench_with_input(BenchmarkId::new(format!("{act}"), format!("{exec:?}")), &prev, |b, prev| {
                b.iter(|| black_box(rec.step(prev).unwrap()))
            });
        }
    }
    group.finish();
}

fn network_sampling(c: &mut Criterion) {
    let params = NetworkParams::new(3, 2.0, 0.1).unwrap();
    let x = inputs(3);
    let act = Activation::relu();
    let mut group = c.benchmark_group("sample_network");
    group.sample_size(10);
    for (label, cfg) in [
        ("conditional", SamplerConfig::new(256, 1, 2000)),
        ("explicit", SamplerConfig::new(64, 1, 200).explicit()),
    ] {
        for exec in [Exec::Sequential, Exec::Parallel] {
            group.bench_function(BenchmarkId::new(label, format!("{exec:?}")), |b| {
                b.iter(|| black_box(sample_network(&x, &params, &act, &cfg, 1, exec).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, layer_step, network_sampling);
criterion_main!(benches);
