use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use deepbet_bench::{desk_3d, network, phantom, random_mask};
use deepbet_core::evaluate::dice;
use deepbet_core::nn::{Network, Tensor};
use deepbet_core::postprocess::{clean, fill_holes, largest_component};
use deepbet_core::preprocess::{preprocess, PreprocessConfig};
use deepbet_core::train::{gradients, LossConfig};
use deepbet_core::volume::{resample, Interpolation};

fn masks(c: &mut Criterion) {
    let a = random_mask([128; 3], 0.5, 1);
    let b = random_mask([128; 3], 0.5, 2);
    c.bench_function("dice_128", |bench| bench.iter(|| dice(black_box(&a), black_box(&b))));

    let sparse = random_mask([96; 3], 0.3, 3);
    let mut g = c.benchmark_group("postprocess_96");
    g.sample_size(10);
    g.bench_function("largest_component", |bench| bench.iter(|| largest_component(black_box(&sparse))));
    g.bench_function("fill_holes", |bench| bench.iter(|| fill_holes(black_box(&sparse))));
    g.bench_function("clean", |bench| bench.iter(|| clean(black_box(&sparse))));
    g.finish();
}

fn volumes(c: &mut Criterion) {
    let (img, _) = phantom(1);
    let cfg = PreprocessConfig::default();
    let mut g = c.benchmark_group("volume");
    g.sample_size(10);
    g.bench_function("preprocess_phantom", |bench| bench.iter(|| preprocess(black_box(&img), &cfg).unwrap()));
    g.bench_function("resample_to_128", |bench| {
        bench.iter(|| resample(black_box(&img), [128; 3], Interpolation::Trilinear).unwrap())
    });
    g.finish();
}

fn networks(c: &mut Criterion) {
    let net = Network::<f32>::from_weights(&network(&desk_3d(), 1)).unwrap();
    let x = Tensor::from_vec(1, [64; 3], (0..64usize.pow(3)).map(|i| (i % 17) as f32 / 17.0).collect());
    let target = Tensor::from_vec(1, [64; 3], (0..64usize.pow(3)).map(|i| (i % 3 == 0) as u8 as f32).collect());
    let loss = LossConfig::default();
    let mut g = c.benchmark_group("linknet3d_desk_64");
    g.sample_size(10);
    g.bench_function("forward", |bench| bench.iter(|| net.forward(black_box(x.clone())).unwrap()));
    g.bench_function("forward_backward", |bench| {
        bench.iter(|| gradients(&net, black_box(x.clone()), &target, &loss).unwrap())
    });
    g.finish();
}

criterion_group!(benches, masks, volumes, networks);
criterion_main!(benches);
