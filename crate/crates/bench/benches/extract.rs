//! Stage-by-stage cost of one desk-profile extraction. The networks are
//! untrained (their cost does not depend on the weights), so the stage-2 box
//! comes from the ground truth instead of the stage-1 output.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use deepbet_bench::{phantom, untrained_weights};
use deepbet_core::nn::Network;
use deepbet_core::pipeline::{expand_bbox, minimal_bbox, predict_stage1, Extractor, Mode, PipelineConfig, ROLE_STAGE1};
use deepbet_core::postprocess::clean;
use deepbet_core::preprocess::{preprocess, PreprocessConfig};
use deepbet_core::BinaryMask;

fn stages(c: &mut Criterion) {
    let (img, mask) = phantom(3);
    let weights = untrained_weights();
    let pre = preprocess(&img, &PreprocessConfig::default()).unwrap();
    let bbox = expand_bbox(&minimal_bbox(&mask, 0.5).unwrap(), 0.1, mask.dims());
    let desk = PipelineConfig::desk();
    let stage1 = Network::<f32>::from_weights(weights.require(ROLE_STAGE1).unwrap()).unwrap();
    let three = Extractor::new(&weights, desk.clone(), PreprocessConfig::default()).unwrap();
    let two = Extractor::new(
        &weights,
        PipelineConfig {
            mode: Mode::TwoD,
            ..desk.clone()
        },
        PreprocessConfig::default(),
    )
    .unwrap();

    let mut g = c.benchmark_group("extract_desk");
    g.sample_size(10);
    g.bench_function("stage1_64", |b| {
        b.iter(|| predict_stage1(black_box(&pre), &stage1, desk.stage1_size).unwrap())
    });
    g.bench_function("refine_3d_128", |b| b.iter(|| three.refine(black_box(&pre), &bbox).unwrap()));
    g.bench_function("refine_2d_128_three_views", |b| {
        b.iter(|| two.refine(black_box(&pre), &bbox).unwrap())
    });
    let p = three.refine(&pre, &bbox).unwrap();
    g.bench_function("binarize_clean", |b| {
        b.iter(|| clean(&BinaryMask::from_volume(black_box(&p), 0.5)))
    });
    g.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
