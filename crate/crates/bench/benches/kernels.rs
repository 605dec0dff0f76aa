use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttsnn::accelsim::{compare_designs, EnergyTable, HardwareConfig};
use ttsnn::metrics::count_report;
use ttsnn::tensor::{conv2d, merge_ptt, tt_svd, ConvGeometry, DenseTensor, TTConvCores};
use ttsnn::train::{ModelMode, ModelSpec};
use ttsnn::ttlayers::{ptt_forward, stt_forward};
use ttsnn::vbmf::{evbmf_rank, PAPER_RESNET18};

fn tt_layers(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cores = TTConvCores::<f32>::random(64, 3, 64, (16, 16, 16), &mut rng);
    let x = DenseTensor::<f32>::randn(&[8, 64, 16, 16], 1.0, &mut rng);
    let dense = merge_ptt(&cores).unwrap();
    let mut g = c.benchmark_group("conv 64->64 3x3 16x16 batch 8");
    g.bench_function("dense", |b| b.iter(|| conv2d(black_box(&x), &dense, ConvGeometry::same(3, 1)).unwrap()));
    g.bench_function("stt r16", |b| b.iter(|| stt_forward(black_box(&x), &cores, 1).unwrap()));
    g.bench_function("ptt r16", |b| b.iter(|| ptt_forward(black_box(&x), &cores, 1).unwrap()));
    g.finish();
}

fn decomposition(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = DenseTensor::<f32>::randn(&[128, 3, 3, 128], 1.0, &mut rng);
    c.bench_function("tt_svd 128x3x3x128 r24", |b| b.iter(|| tt_svd(black_box(&w), (24, 24, 24)).unwrap()));
    let m = DenseTensor::<f64>::randn(&[384, 384], 1.0, &mut rng);
    c.bench_function("evbmf 384x384", |b| b.iter(|| evbmf_rank(black_box(&m)).unwrap()));
}

fn accounting(c: &mut Criterion) {
    let spec = ModelSpec::resnet18(ModelMode::Ptt, 4, 10);
    c.bench_function("count resnet18", |b| b.iter(|| count_report(black_box(&spec), &PAPER_RESNET18).unwrap()));
    let (hw, et) = (HardwareConfig::default(), EnergyTable::default());
    c.bench_function("compare designs resnet18", |b| {
        b.iter(|| compare_designs(black_box(&spec), &PAPER_RESNET18, 0.15, &hw, &et).unwrap())
    });
}

criterion_group!(benches, tt_layers, decomposition, accounting);
criterion_main!(benches);
