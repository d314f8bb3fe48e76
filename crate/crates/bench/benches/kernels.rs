use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use oodkit::fcgm::{self, DEFAULT_ORDERS};
use oodkit::linalg::{spd_factor, spd_solve};
use oodkit::losses::oecc_loss;
use oodkit::metrics::evaluate;
use oodkit::toy::{toy_layers, INPUT_SHAPE, NUM_CLASSES};
use oodkit::{Network, OeccConfig, ScoreSample, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn gram(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("gram");
    for channels in [8, 32, 64] {
        let map = random(&mut rng, &[channels, 8, 8]);
        group.throughput(Throughput::Elements((channels * channels) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(channels), &map, |b, map| {
            b.iter(|| {
                for &p in &DEFAULT_ORDERS {
                    black_box(fcgm::gram(map, p));
                }
            })
        });
    }
    group.finish();
}

fn cholesky(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("spd");
    for n in [16, 64, 128] {
        let a = random(&mut rng, &[n, n]);
        let mut m = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                *m.at_mut(i, j) = (0..n).map(|k| a.at(i, k) * a.at(j, k)).sum();
            }
        }
        let v = random(&mut rng, &[n]);
        group.bench_with_input(BenchmarkId::new("factor", n), &m, |b, m| {
            b.iter(|| spd_factor(m, 1e-6).unwrap())
        });
        let f = spd_factor(&m, 1e-6).unwrap();
        group.bench_with_input(BenchmarkId::new("solve", n), &v, |b, v| {
            b.iter(|| spd_solve(&f, v).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut group = c.benchmark_group("metrics");
    for n in [1_000, 10_000] {
        let ins = (0..n).map(|_| rng.random::<f64>() + 0.3).collect();
        let outs = (0..n).map(|_| rng.random::<f64>()).collect();
        let sample = ScoreSample::new(ins, outs).unwrap();
        group.throughput(Throughput::Elements(2 * n as u64));
        group.bench_with_input(BenchmarkId::new("evaluate", n), &sample, |b, s| b.iter(|| evaluate(s)));
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = Network::new(INPUT_SHAPE.to_vec(), toy_layers(NUM_CLASSES), NUM_CLASSES, 0).unwrap();
    let mut shape = vec![64];
    shape.extend(INPUT_SHAPE);
    let batch = random(&mut rng, &shape);
    let upstream = Tensor::filled(&[64, NUM_CLASSES], 0.1);
    let mut group = c.benchmark_group("toy_net");
    group.throughput(Throughput::Elements(64));
    group.bench_function("forward", |b| b.iter(|| net.forward_batch(&batch).unwrap()));
    let traces = net.forward_batch(&batch).unwrap();
    group.bench_function("backward", |b| {
        b.iter(|| net.backward_batch(&traces, &upstream).unwrap())
    });
    group.finish();

    let in_logits = random(&mut rng, &[128, 10]);
    let oe_logits = random(&mut rng, &[256, 10]);
    let labels: Vec<usize> = (0..128).map(|i| i % 10).collect();
    let cfg = OeccConfig::new(0.05, 0.5, 0.9).unwrap();
    c.bench_function("oecc_loss/128+256x10", |b| {
        b.iter(|| oecc_loss(&in_logits, &labels, &oe_logits, &cfg).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().warm_up_time(Duration::from_millis(500)).measurement_time(Duration::from_secs(2));
    targets = gram, cholesky, metrics, network
}
criterion_main!(benches);
