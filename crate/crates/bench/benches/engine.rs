use criterion::{criterion_group, criterion_main, Criterion};
use everadapt_bench::{desk_pair, tensor};
use everadapt_core::losses::{mmd, KernelConfig};
use everadapt_core::trainer::ContinualTrainer;
use everadapt_core::{build_model, Graph, NormKind};
use std::hint::black_box;

fn conv1d(c: &mut Criterion) {
    let x = tensor(&[32, 8, 64], 1);
    let w = tensor(&[16, 8, 5], 2);
    let b = tensor(&[16], 3);
    c.bench_function("conv1d forward+backward 32x8x64 -> 16", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xi, wi, bi) = (g.param(&x), g.param(&w), g.param(&b));
            let y = g.conv1d(xi, wi, bi, 1, 2).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(wi).map(|v| v[0]))
        })
    });
}

fn mmd_bench(c: &mut Criterion) {
    let a = tensor(&[32, 16], 4);
    let b = tensor(&[32, 16], 5);
    let k = KernelConfig::median_heuristic(&a, &b, &[0.25, 0.5, 1.0, 2.0, 4.0]).unwrap();
    c.bench_function("mmd forward+backward 32x16 vs 32x16, 5 bandwidths", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (ai, bi) = (g.param(&a), g.param(&b));
            let m = mmd(&mut g, ai, bi, &k).unwrap();
            g.backward(m).unwrap();
            black_box(g.value(m).item())
        })
    });
}

fn training(c: &mut Criterion) {
    let (cfg, source, target) = desk_pair(22);
    let mut tc = cfg.train_config(0);
    tc.epochs = 1;
    let spec = cfg.model_spec(NormKind::Cbn);
    let mut group = c.benchmark_group("desk training");
    group.sample_size(10);
    group.bench_function("pretrain epoch, 66 segments", |bench| {
        bench.iter(|| {
            let mut model = build_model(&spec, 0).unwrap();
            let mut trainer = ContinualTrainer::new(tc.clone()).unwrap();
            black_box(trainer.pretrain_source(&mut model, &source).unwrap())
        })
    });
    let mut pretrained = build_model(&spec, 0).unwrap();
    let mut trainer = ContinualTrainer::new(tc.clone()).unwrap();
    trainer.pretrain_source(&mut pretrained, &source).unwrap();
    group.bench_function("adaptation epoch, 66 target segments", |bench| {
        bench.iter(|| {
            let mut model = pretrained.clone();
            let mut trainer = ContinualTrainer::new(tc.clone()).unwrap();
            black_box(trainer.adapt_to_domain(&mut model, &source, &target).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, conv1d, mmd_bench, training);
criterion_main!(benches);
