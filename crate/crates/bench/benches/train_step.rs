use criterion::{criterion_group, criterion_main, Criterion};
use multichunk::dataset::{sample_batch, Batch};
use multichunk::train::{train_step, TrainState};
use multichunk_bench::{bench_config, fixture};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn step(c: &mut Criterion) {
    let f = fixture(bench_config());
    let cfg = &f.config;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let samples = sample_batch(
        &f.episodes,
        &f.policy.stats,
        &f.ladder,
        cfg.history_len,
        cfg.chunk_len,
        cfg.batch_size,
        &mut rng,
    )
    .unwrap();
    let batch = Batch::from_samples(&samples).unwrap();
    let mut state = TrainState::new(cfg).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("step_b64", |b| {
        b.iter(|| {
            train_step(
                &mut state.net,
                &mut state.optimizer,
                &batch,
                &f.policy.schedule,
                &mut rng,
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, step);
criterion_main!(benches);
