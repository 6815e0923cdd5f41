//! Parallel kernels against their sequential twins. Both sides return
//! identical bytes (the tests prove it), so the only question left is
//! time; run with `--no-default-features` to see the fallback cost of
//! building without the thread pool.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use unpad_core::{attention, embedding, lamb, rng, varlen};

fn ragged_qkv(
    num_seqs: usize,
    max_len: usize,
    width: usize,
    seed: u64,
) -> (Vec<f64>, Vec<usize>) {
    let mut chacha = rng::seeded(seed);
    let lengths: Vec<usize> = (0..num_seqs)
        .map(|_| 1 + (rng::uniform_f64(&mut chacha) * max_len as f64) as usize)
        .collect();
    let offsets = varlen::compute_batch_offset(&lengths).unwrap();
    let total = *offsets.last().unwrap();
    let values = (0..total * width)
        .map(|_| rng::uniform_f64(&mut chacha) * 2.0 - 1.0)
        .collect();
    (values, offsets)
}

fn bench_attention(c: &mut Criterion) {
    let cfg = attention::MhaConfig::new(4, 16).unwrap();
    let width = cfg.model_dim();
    let (q, offsets) = ragged_qkv(32, 128, width, 11);
    let (k, _) = ragged_qkv(32, 128, width, 11);
    let (v, _) = ragged_qkv(32, 128, width, 11);

    let mut group = c.benchmark_group("attention_unpadded");
    group.bench_function("parallel", |b| {
        b.iter(|| attention::mha_unpadded(black_box(&q), &k, &v, &offsets, &cfg).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| attention::mha_unpadded_seq(black_box(&q), &k, &v, &offsets, &cfg).unwrap())
    });
    group.finish();
}

fn bench_chunked_norm(c: &mut Criterion) {
    let numels: Vec<usize> = (0..64).map(|i| 1000 + (i % 7) * 500).collect();
    let tensors = lamb::TensorDesc::list_from_numels(&numels);
    let plan = lamb::plan_apex(&tensors, 256, &lamb::ChunkMetaBudget::default()).unwrap();
    let total: usize = numels.iter().sum();
    let mut chacha = rng::seeded(23);
    let grads: Vec<f64> = (0..total)
        .map(|_| rng::uniform_f64(&mut chacha) * 2.0 - 1.0)
        .collect();

    let mut group = c.benchmark_group("chunked_grad_norm");
    group.bench_function("parallel", |b| {
        b.iter(|| lamb::chunked_norm_case1(black_box(&grads), &plan).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| lamb::chunked_norm_case1_seq(black_box(&grads), &plan).unwrap())
    });
    group.finish();
}

fn bench_embedding_backward(c: &mut Criterion) {
    let (vocab, dim, num_tokens) = (512usize, 64usize, 8192usize);
    let mut chacha = rng::seeded(37);
    let tokens: Vec<usize> = (0..num_tokens)
        .map(|_| (rng::uniform_f64(&mut chacha) * vocab as f64) as usize)
        .collect();
    let grad_output: Vec<f64> = (0..num_tokens * dim)
        .map(|_| rng::uniform_f64(&mut chacha) * 2.0 - 1.0)
        .collect();

    let mut group = c.benchmark_group("embedding_backward_sorted");
    group.bench_function("parallel", |b| {
        b.iter(|| {
            embedding::backward_sorted(
                black_box(&grad_output),
                &tokens,
                vocab,
                dim,
                embedding::LaneWidth::One,
            )
            .unwrap()
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            embedding::backward_sorted_seq(
                black_box(&grad_output),
                &tokens,
                vocab,
                dim,
                embedding::LaneWidth::One,
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_attention,
    bench_chunked_norm,
    bench_embedding_backward
);
criterion_main!(benches);
