//! Chunked forward and backward passes, run on the calling thread versus
//! through `tcvn::par`. Build with `--no-default-features` to see the
//! sequential fallback on both sides.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tcvn::datagen::{Event, Generator};
use tcvn::model::{EventClass, ModelConfig, TransformerCvn};
use tcvn::par;

fn events(n: usize) -> Vec<Event> {
    let g = Generator::default();
    (0..n as u64).map(|i| g.generate_seeded(i, EventClass::ALL[i as usize % 10])).collect()
}

fn bench(c: &mut Criterion) {
    let model = TransformerCvn::new(ModelConfig::default()).unwrap();
    let store = model.init_params(0).unwrap();
    let evs = events(64);
    let refs: Vec<&Event> = evs.iter().collect();
    let chunk = 8;
    let backend = if par::is_parallel() { "rayon" } else { "sequential" };

    let mut g = c.benchmark_group("forward_64");
    g.sample_size(10);
    g.bench_function("sequential", |b| {
        b.iter(|| refs.chunks(chunk).map(|c| model.forward_batch(&store, c).unwrap()).collect::<Vec<_>>())
    });
    g.bench_function(BenchmarkId::new("par", backend), |b| {
        b.iter(|| par::map_chunks(&refs, chunk, |c| model.forward_batch(&store, c).unwrap()))
    });
    g.finish();

    let mut g = c.benchmark_group("gradients_64");
    g.sample_size(10);
    let n = refs.len() as f64;
    g.bench_function("sequential", |b| {
        b.iter(|| {
            refs.chunks(chunk)
                .map(|c| model.loss_and_gradients(&store, c, 1.0, n).unwrap().0)
                .sum::<f64>()
        })
    });
    g.bench_function(BenchmarkId::new("par", backend), |b| {
        b.iter(|| {
            par::map_chunks(&refs, chunk, |c| model.loss_and_gradients(&store, c, 1.0, n).unwrap().0)
                .into_iter()
                .sum::<f64>()
        })
    });
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
