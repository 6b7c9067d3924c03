use multichunk::executor::{decide, Gate};
use multichunk_bench::{bench_config, fixture};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn fixture_supports_a_gated_decision() {
    let f = fixture(bench_config());
    assert_eq!(f.history.num_frequencies(), f.ladder.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = decide(&f.policy, &f.history, &f.ladder, 4, Gate::Entropy, &mut rng).unwrap();
    assert!(d.entropy.is_some());
    assert_eq!(d.executed_actions.len(), f.config.chunk_len);
}
