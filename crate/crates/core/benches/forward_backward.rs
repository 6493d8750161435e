//! Forward and forward+backward throughput of a NODE model.
//!
//! With the `parallel` feature each case runs on a one-thread rayon pool
//! (the sequential baseline) and on the default pool. Build with
//! `--no-default-features` to measure the rayon-free code path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::Rng;

use node_core::autodiff::Tape;
use node_core::model::{ArchConfig, NodeModel, Task};
use node_core::tensor::Tensor;
use node_core::train::{data_aware_init, record_loss};
use node_core::{choice::ChoiceKind, rng_from_seed};

const BATCH: usize = 512;
const FEATURES: usize = 32;

fn setup(layers: usize, trees: usize, depth: usize) -> (NodeModel, Tensor, Vec<f64>) {
    let mut rng = rng_from_seed(0);
    let x = Tensor::new(
        vec![BATCH, FEATURES],
        (0..BATCH * FEATURES).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let y = (0..BATCH).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    let arch = ArchConfig {
        num_layers: layers,
        trees_per_layer: trees,
        depth,
        tree_dim: 2,
        choice: ChoiceKind::entmax15(),
    };
    let mut model = NodeModel::new(Task::Classification { classes: 2 }, FEATURES, &arch).unwrap();
    data_aware_init(&mut model, &x, &mut rng).unwrap();
    (model, x, y)
}

fn step(model: &NodeModel, x: &Tensor, y: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let head = model.record(&mut tape, xv, None).unwrap();
    let loss = record_loss(&mut tape, model.task, head, y).unwrap();
    let grads = tape.backward(loss).unwrap();
    grads.get(0).map_or(0.0, |g| g.data()[0])
}

#[cfg(feature = "parallel")]
fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default = rayon::current_num_threads();
    let mut sizes = vec![1];
    if default > 1 {
        sizes.push(default);
    }
    sizes
        .into_iter()
        .map(|n| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            (format!("rayon-{n}"), pool)
        })
        .collect()
}

fn bench_model(c: &mut Criterion) {
    let shapes = [(1, 256, 6), (4, 64, 6)];
    let mut group = c.benchmark_group("node");
    group.sample_size(10);
    group.throughput(Throughput::Elements(BATCH as u64));
    for (layers, trees, depth) in shapes {
        let (model, x, y) = setup(layers, trees, depth);
        let shape = format!("{layers}x{trees}d{depth}");
        #[cfg(feature = "parallel")]
        for (label, pool) in pools() {
            group.bench_with_input(BenchmarkId::new(format!("forward/{label}"), &shape), &x, |b, x| {
                b.iter(|| pool.install(|| model.forward(x).unwrap()))
            });
            group.bench_with_input(BenchmarkId::new(format!("train_step/{label}"), &shape), &x, |b, x| {
                b.iter(|| pool.install(|| step(&model, x, &y)))
            });
        }
        #[cfg(not(feature = "parallel"))]
        {
            group.bench_with_input(BenchmarkId::new("forward/sequential", &shape), &x, |b, x| {
                b.iter(|| model.forward(x).unwrap())
            });
            group.bench_with_input(BenchmarkId::new("train_step/sequential", &shape), &x, |b, x| {
                b.iter(|| step(&model, x, &y))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_model);
criterion_main!(benches);
