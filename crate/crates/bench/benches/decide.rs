use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use multichunk::executor::{decide, estimate_entropy, ChunkSampler, Gate};
use multichunk_bench::{bench_config, fixture};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sampling(c: &mut Criterion) {
    let f = fixture(bench_config());
    let mut group = c.benchmark_group("decide");
    group.sample_size(10);
    for n in [1usize, 10, 100] {
        let gate = if n == 1 { Gate::Fixed(0) } else { Gate::Entropy };
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            b.iter(|| decide(&f.policy, &f.history, &f.ladder, n, gate, &mut rng).unwrap());
        });
    }
    group.finish();
}

fn entropy(c: &mut Criterion) {
    let f = fixture(bench_config());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = f.policy.sample_chunks(&f.history, 100, &mut rng).unwrap();
    c.bench_function("entropy_n100", |b| b.iter(|| estimate_entropy(&samples).unwrap()));
}

criterion_group!(benches, sampling, entropy);
criterion_main!(benches);
