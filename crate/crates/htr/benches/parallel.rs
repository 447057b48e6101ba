//! Parallel-vs-sequential comparison for the data-parallel hot paths.
//! The same binary runs both modes via the runtime switch in
//! `htr::parallel`, so the numbers are directly comparable.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use htr::metrics::CerReport;
use htr::parallel::force_sequential;
use htr::tensor::conv::conv2d;
use htr::tensor::ops::{matmul, sum_all};
use htr::tensor::Tape;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_vec(&mut rng, 256 * 256);
    let b = rand_vec(&mut rng, 256 * 256);
    let mut group = c.benchmark_group("matmul_256");
    for (name, seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            force_sequential(seq);
            bench.iter(|| {
                let tape = Tape::<f32>::new();
                let at = tape.tensor(a.clone(), &[256, 256], false).unwrap();
                let bt = tape.tensor(b.clone(), &[256, 256], false).unwrap();
                sum_all(matmul(at, bt).unwrap()).item()
            });
        });
    }
    force_sequential(false);
    group.finish();
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = rand_vec(&mut rng, 4 * 16 * 32 * 64);
    let weight = rand_vec(&mut rng, 32 * 16 * 3 * 3);
    let mut group = c.benchmark_group("conv2d_4x16x32x64");
    group.sample_size(20);
    for (name, seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            force_sequential(seq);
            bench.iter(|| {
                let tape = Tape::<f32>::new();
                let x = tape.tensor(input.clone(), &[4, 16, 32, 64], false).unwrap();
                let w = tape.tensor(weight.clone(), &[32, 16, 3, 3], false).unwrap();
                sum_all(conv2d(x, w, None, 1, 1).unwrap()).item()
            });
        });
    }
    force_sequential(false);
    group.finish();
}

fn bench_corpus_cer(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let alphabet: Vec<char> = "abcdefgh ".chars().collect();
    let pairs: Vec<(String, String)> = (0..200)
        .map(|_| {
            let s: String =
                (0..60).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
            let mut t: Vec<char> = s.chars().collect();
            for _ in 0..6 {
                let i = rng.gen_range(0..t.len());
                t[i] = alphabet[rng.gen_range(0..alphabet.len())];
            }
            (s, t.into_iter().collect())
        })
        .collect();
    let mut group = c.benchmark_group("corpus_cer_200x60");
    for (name, seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            force_sequential(seq);
            bench.iter(|| CerReport::score(&pairs).unwrap().corpus_cer);
        });
    }
    force_sequential(false);
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_conv2d, bench_corpus_cer);
criterion_main!(benches);
