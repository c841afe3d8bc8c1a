use apgn_bench::{batch, graph, model, predictions, videos};
use apgn_core::consolidation::consolidate;
use apgn_core::eval::{infer, rank_and_select};
use apgn_core::model::LossWeights;
use apgn_core::train::{train_step, Adam};
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

fn training(c: &mut Criterion) {
    let (model, store) = model();
    let b = batch(&videos(16));
    c.bench_function("train_step/batch16", |bench| {
        bench.iter_batched(
            || (store.clone(), Adam::new(&store)),
            |(mut s, mut adam)| train_step(&model, &mut s, &mut adam, &b, LossWeights::default(), 1e-4).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn inference(c: &mut Criterion) {
    let (model, store) = model();
    let samples = videos(32);
    c.bench_function("infer/32_videos", |bench| {
        bench.iter(|| infer(&model, &store, black_box(&samples), 32).unwrap())
    });
}

fn graph_layers(c: &mut Criterion) {
    let (p, layers) = graph(12, 160, 0);
    c.bench_function("consolidate/12x160_k2", |bench| bench.iter(|| consolidate(black_box(&p), &layers)));
}

fn ranking(c: &mut Criterion) {
    let preds = predictions(40, 64, 0);
    c.bench_function("rank_and_select/40_nms", |bench| {
        bench.iter(|| rank_and_select(black_box(&preds), 5, Some(0.55)))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = training, inference, graph_layers, ranking
}
criterion_main!(benches);
