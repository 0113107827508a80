use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use repexit::sde::{simulate_exits, SimConfig};
use repexit::{Domain, Execution, Model, SystemSpec};

fn exits(c: &mut Criterion) {
    let model = Model::new(SystemSpec::linear_identity(&[2.0, 1.0]), Domain::Box { half_width: 1.0 }, 1.0).unwrap();
    let mut group = c.benchmark_group("simulate_exits");
    group.sample_size(10);
    for n in [256u64, 2048] {
        group.throughput(Throughput::Elements(n));
        let config = SimConfig::new(0.1, n, 7);
        for (label, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(label, n), &config, |b, cfg| {
                b.iter(|| simulate_exits(&model, cfg, exec).unwrap().samples.len())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, exits);
criterion_main!(benches);
