use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saat_core::attack::{pgd_attack, AttackConfig};
use saat_core::dmfl::{brute_force_mainstay, mainstay_code, mainstay_for_label};
use saat_core::evalkit::{hamming_distance, map_at_k, rank_database};
use saat_core::oracle::random_neighborhood;
use saat_core::{HashCode, HashModel, LabelVector, NetworkParams, RetrievalIndex};

fn code(rng: &mut ChaCha8Rng, k: usize) -> HashCode {
    HashCode::new((0..k).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect()).unwrap()
}

fn label(rng: &mut ChaCha8Rng, c: usize) -> LabelVector {
    LabelVector::from_classes(c, &[rng.random_range(0..c)])
}

fn database(n: usize, k: usize, c: usize) -> (Vec<HashCode>, Vec<LabelVector>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n).map(|_| (code(&mut rng, k), label(&mut rng, c))).unzip()
}

fn mainstay(c: &mut Criterion) {
    let mut g = c.benchmark_group("mainstay");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in [8usize, 12] {
        let nbhd = random_neighborhood(&mut rng, k, 25, 25);
        g.bench_with_input(BenchmarkId::new("closed_form", k), &nbhd, |b, n| b.iter(|| mainstay_code(black_box(n))));
        g.bench_with_input(BenchmarkId::new("exhaustive", k), &nbhd, |b, n| b.iter(|| brute_force_mainstay(black_box(n))));
    }
    let (codes, labels) = database(5000, 32, 10);
    g.bench_function("for_label_5000x32", |b| b.iter(|| mainstay_for_label(black_box(&labels[0]), &codes, &labels)));
    g.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut g = c.benchmark_group("retrieval");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b2) = (code(&mut rng, 64), code(&mut rng, 64));
    g.bench_function("hamming_64", |b| b.iter(|| hamming_distance(black_box(&a), black_box(&b2))));
    for n in [1000usize, 10_000] {
        let (codes, labels) = database(n, 32, 10);
        let index = RetrievalIndex::new(&codes, labels.clone()).unwrap();
        let q = code(&mut rng, 32);
        g.bench_with_input(BenchmarkId::new("rank_top100", n), &index, |b, idx| b.iter(|| rank_database(black_box(&q), idx, 100)));
        let qs: Vec<HashCode> = (0..100).map(|_| code(&mut rng, 32)).collect();
        let qy: Vec<LabelVector> = (0..100).map(|_| label(&mut rng, 10)).collect();
        g.bench_with_input(BenchmarkId::new("map_100_queries", n), &index, |b, idx| {
            b.iter(|| map_at_k(black_box(&qs), &qy, idx, n.min(5000)))
        });
    }
    g.finish();
}

fn attack(c: &mut Criterion) {
    let mut g = c.benchmark_group("pgd");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = HashModel::new(NetworkParams::init(64, &[64], 16, &mut rng).unwrap());
    let x: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let guide = code(&mut rng, 16);
    for t in [10usize, 100] {
        let cfg = AttackConfig {
            iterations: t,
            ..AttackConfig::default()
        };
        g.bench_with_input(BenchmarkId::new("single_query", t), &cfg, |b, cfg| {
            b.iter(|| pgd_attack(&model, black_box(&x), &guide, cfg))
        });
    }
    g.finish();
}

criterion_group!(benches, mainstay, retrieval, attack);
criterion_main!(benches);
