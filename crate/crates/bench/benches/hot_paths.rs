use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use lbe_bench::{gaussian_table, uniform};
use lbe_core::classifiers::{fit_forest, ForestHyper, ForestKind};
use lbe_core::imaging::{ncc_scores, GrayImage, Template};
use lbe_core::metrics::auroc;
use lbe_core::vae::{BetaSchedule, TrainConfig, Trainer, VaeArchitecture, VaeModel};

fn bench_auroc(c: &mut Criterion) {
    let scores = uniform(10_000, 1);
    let labels: Vec<bool> = uniform(10_000, 2).iter().zip(&scores).map(|(u, s)| u < s).collect();
    c.bench_function("auroc 10k", |b| b.iter(|| auroc(black_box(&scores), black_box(&labels)).unwrap()));
}

fn bench_forest(c: &mut Criterion) {
    let table = gaussian_table(500, 16, 3);
    let mut group = c.benchmark_group("forest fit 500x16");
    group.sample_size(10);
    for kind in [ForestKind::Rf, ForestKind::Xrt] {
        let hyper = ForestHyper::desk(kind);
        group.bench_function(format!("{kind:?} 200 trees"), |b| b.iter(|| fit_forest(&table, kind, &hyper, 7).unwrap()));
    }
    group.finish();
}

fn bench_vae_epoch(c: &mut Criterion) {
    let arch = VaeArchitecture::desk(1, 32, 16, 3);
    let model = VaeModel::new(arch).unwrap();
    let data: Vec<Vec<f64>> = (0..64).map(|i| uniform(1024, 10 + i)).collect();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let sched = BetaSchedule::default();
    let mut group = c.benchmark_group("vae");
    group.sample_size(10);
    group.bench_function("epoch of 64 images, 32x32, D=16", |b| {
        b.iter(|| {
            let mut t = Trainer::new(&model, &data, &data[..8], &cfg, &sched).unwrap();
            t.run_epoch().unwrap()
        })
    });
    group.finish();
}

fn bench_ncc(c: &mut Criterion) {
    let img = GrayImage::new(256, 256, uniform(256 * 256, 4)).unwrap();
    let tpl = Template::new(GrayImage::new(224, 224, uniform(224 * 224, 5)).unwrap()).unwrap();
    let mut group = c.benchmark_group("ncc");
    group.sample_size(10);
    group.bench_function("224 template in 256 image", |b| b.iter(|| ncc_scores(&img, &tpl).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_auroc, bench_forest, bench_vae_epoch, bench_ncc);
criterion_main!(benches);
