use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use omitopics::objective::{total_loss, total_loss_and_grad};
use omitopics::params::init_params;
use omitopics::seeding::{stream_rng, Stream};
use omitopics::trainer::{draw_noise, train, TrainConfig};
use omitopics_bench::{citeseq, prepared};

fn loss_and_gradient(c: &mut Criterion) {
    let (out, hyper) = citeseq(0);
    let data = prepared(&out, hyper.knn_k);
    let params = init_params(&hyper, &out.dataset.schema()).unwrap();
    let domain = &data.domains[0];
    let mut group = c.benchmark_group("objective");
    for batch_size in [16, 64] {
        let batch: Vec<usize> = (0..batch_size).collect();
        let noise = draw_noise(1, batch_size, hyper.n_topics, &mut stream_rng(0, Stream::Noise));
        group.bench_with_input(BenchmarkId::new("loss", batch_size), &batch, |b, batch| {
            b.iter(|| total_loss(black_box(&params), &hyper, domain, batch, &noise, true).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("loss_and_grad", batch_size), &batch, |b, batch| {
            b.iter(|| total_loss_and_grad(black_box(&params), &hyper, domain, batch, &noise, true).unwrap())
        });
    }
    group.finish();
}

fn training_epoch(c: &mut Criterion) {
    let (out, hyper) = citeseq(0);
    let config = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("citeseq_epoch", |b| b.iter(|| train(&out.dataset, &hyper, &config).unwrap()));
    group.finish();
}

criterion_group!(benches, loss_and_gradient, training_epoch);
criterion_main!(benches);
