use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use std::hint::black_box;
use vsrg_bench::desk;
use vsrg_core::cloner::{build_mapping, compose, Strategy};
use vsrg_core::eval::{pearson, spearman};
use vsrg_core::model::{cosine_loss, StudentModel};
use vsrg_core::pipeline::{run_pipeline, write_desk_inputs, PipelineConfig};
use vsrg_core::segmenter::Segmenter;
use vsrg_core::store::{Batcher, TargetKind};

fn segmenter(c: &mut Criterion) {
    let d = desk(4000, 8, 1000);
    let seg = Segmenter::new(&d.vocab);
    let bytes: usize = d.records.iter().map(|r| r.text.len()).sum();
    let mut g = c.benchmark_group("segmenter");
    g.throughput(Throughput::Bytes(bytes as u64));
    g.bench_function("encode", |b| {
        b.iter(|| d.records.iter().map(|r| seg.encode(black_box(&r.text), 128).ids.len()).sum::<usize>())
    });
    g.finish();
}

fn cloner(c: &mut Criterion) {
    let d = desk(4000, 64, 1);
    let target = vsrg_core::fixture::teacher_vocab(2000, 9).unwrap();
    let raw = Segmenter::raw(&d.vocab);
    c.bench_function("cloner/build_mapping", |b| b.iter(|| build_mapping(black_box(&target), &raw)));
    let mut mapping = build_mapping(&target, &raw);
    mapping.strategy = Strategy::Mean;
    c.bench_function("cloner/compose", |b| b.iter(|| compose(black_box(&d.teacher.embedding), &mapping).unwrap()));
}

fn distill(c: &mut Criterion) {
    let d = desk(2000, 64, 256);
    let model: StudentModel<f32> = StudentModel::from_bundle(&d.teacher).unwrap();
    let seg = Segmenter::new(&d.vocab);
    let batcher = Batcher::new(&d.dataset, &seg, 64, 32, TargetKind::Final, 0, 0).unwrap();
    let batch = batcher.batch(0);
    c.bench_function("distill/forward_backward_b64", |b| {
        b.iter(|| {
            let fwd = model.forward(&batch.ids, &batch.mask, batch.seq_len, TargetKind::Final).unwrap();
            let (_, g) = cosine_loss(&fwd.s_hat, &batch.targets, fwd.dim).unwrap();
            model.backward(&fwd, &g)
        })
    });
}

fn correlation(c: &mut Criterion) {
    let x: Vec<f64> = (0..10_000).map(|i| ((i * 7919) % 10_007) as f64).collect();
    let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + (i % 13) as f64).collect();
    c.bench_function("eval/pearson_10k", |b| b.iter(|| pearson(black_box(&x), &y).unwrap()));
    c.bench_function("eval/spearman_10k", |b| b.iter(|| spearman(black_box(&x), &y).unwrap()));
}

fn pipeline(c: &mut Criterion) {
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    let dir = std::env::temp_dir().join(format!("vsrg-bench-{}", std::process::id()));
    g.bench_function("desk", |b| {
        b.iter_batched(
            || {
                let _ = std::fs::remove_dir_all(&dir);
                PipelineConfig::load(write_desk_inputs(&dir, 42).unwrap()).unwrap()
            },
            |cfg| run_pipeline(&cfg).unwrap(),
            BatchSize::PerIteration,
        )
    });
    g.finish();
    let _ = std::fs::remove_dir_all(&dir);
}

criterion_group!(benches, segmenter, cloner, distill, correlation, pipeline);
criterion_main!(benches);
