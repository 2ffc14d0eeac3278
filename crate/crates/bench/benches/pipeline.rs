use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seaice_core::evaluator::{predict_scene, InferenceMode};
use seaice_core::ingest::rasterize_labels;
use seaice_core::losses::{LossKind, LossSpec};
use seaice_core::nn::Tensor;
use seaice_core::synth::{generate, SynthSpec};
use seaice_core::{normalize, ModelConfig, SegmentationModel};

fn losses(c: &mut Criterion) {
    let shape = [8, 5, 128, 128];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits: Vec<f32> = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let targets: Vec<u8> = (0..8 * 128 * 128).map(|_| rng.gen_range(0..5)).collect();
    let mut group = c.benchmark_group("loss 8x5x128x128");
    for kind in LossKind::ALL {
        let spec = LossSpec::new(kind);
        group.bench_function(kind.as_str(), |b| {
            b.iter(|| spec.evaluate(black_box(&logits), shape, &targets).unwrap())
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let model = SegmentationModel::build(&ModelConfig::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = Tensor::from_vec([1, 3, 256, 256], (0..3 * 256 * 256).map(|_| rng.gen()).collect());
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("infer 1x3x256x256", |b| b.iter(|| model.infer(black_box(&input)).unwrap()));

    let batch = Tensor::from_vec([4, 3, 128, 128], (0..4 * 3 * 128 * 128).map(|_| rng.gen()).collect());
    let targets: Vec<u8> = (0..4 * 128 * 128).map(|_| rng.gen_range(0..5)).collect();
    let loss = LossSpec::new(LossKind::Ce);
    group.bench_function("train step 4x3x128x128", |b| {
        b.iter_batched(
            || model.clone(),
            |mut m| {
                let logits = m.forward_train(&batch).unwrap();
                let out = loss.evaluate(logits.data(), logits.shape(), &targets).unwrap();
                m.backward(&Tensor::from_vec(logits.shape(), out.grad));
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn scene(c: &mut Criterion) {
    let synth = generate(&SynthSpec::strips("2018-03", 512, 512, 0)).unwrap();
    c.bench_function("rasterize 512x512 chart", |b| {
        b.iter(|| rasterize_labels(black_box(&synth.charts), &synth.stack.grid).unwrap())
    });
    let stack = normalize(&synth.stack);
    let model = SegmentationModel::build(&ModelConfig::default(), 0).unwrap();
    let mut group = c.benchmark_group("predict 512x512");
    group.sample_size(10);
    group.bench_function("single pass", |b| {
        b.iter(|| predict_scene(&model, &stack, InferenceMode::default()).unwrap())
    });
    group.bench_function("tiled 128/32", |b| {
        b.iter(|| predict_scene(&model, &stack, InferenceMode::Tiled { tile: 128, overlap: 32 }).unwrap())
    });
    group.finish();
}

criterion_group!(benches, losses, model, scene);
criterion_main!(benches);
