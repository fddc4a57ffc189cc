use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use partrans::data::PatternedPatch;
use partrans::network::{Network, NetworkConfig, Sample};
use partrans::train::{evaluate, EvalSet};
use partrans::Exec;

fn modes() -> Vec<Exec> {
    vec![
        Exec::Sequential,
        #[cfg(feature = "parallel")]
        Exec::Parallel,
    ]
}

fn batch(c: &mut Criterion) {
    let net = Network::build(NetworkConfig::desk_classify(), 0).unwrap();
    let data = PatternedPatch::default().generate(32, 1).unwrap();
    let images: Vec<Vec<f64>> = (0..data.len()).map(|i| data.image(i)).collect();

    let mut g = c.benchmark_group("sample_grads_32");
    g.sample_size(10);
    for exec in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| {
                exec.map(images.len(), |i| {
                    net.sample_grad(Sample::Image { pixels: &images[i], label: data.label(i) }, false, None)
                        .map(|g| g.loss)
                })
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate_32");
    g.sample_size(10);
    for exec in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| evaluate(&net, EvalSet::Images(&data), 16, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
