use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mvanet::attention::pooled_tokens;
use mvanet::kernels::attention;
use mvanet::tape::Tape;
use mvanet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pooled_vs_full(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (dim, heads, windows) = (32, 4, [4usize, 8, 16]);
    let mut group = c.benchmark_group("cross_attention");
    for side in [16usize, 32] {
        let global = Tensor::uniform(&[1, dim, side, side], -1.0, 1.0, &mut rng);
        let queries = Tensor::uniform(&[side * side / 4, 1, dim], -1.0, 1.0, &mut rng);
        let full = {
            let mut tape = Tape::new();
            let g = tape.constant(global.clone());
            let t = mvanet::attention::tokenize(&mut tape, g);
            tape.value(t).clone()
        };
        let pooled = {
            let mut tape = Tape::new();
            let g = tape.constant(global.clone());
            let t = pooled_tokens(&mut tape, g, &windows).unwrap();
            tape.value(t).clone()
        };
        group.bench_with_input(BenchmarkId::new("full", side), &side, |b, _| {
            b.iter(|| attention(&queries, &full, &full, heads))
        });
        group.bench_with_input(BenchmarkId::new("pooled", side), &side, |b, _| {
            b.iter(|| attention(&queries, &pooled, &pooled, heads))
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = pooled_vs_full
}
criterion_main!(benches);
