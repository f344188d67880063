use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use radn::data::{sample_patches, synth_distort, synth_reference, DistortionKind, PatchMode};
use radn::gradcheck::random_tensor;
use radn::nn::{patch_attention, AttentionVars};
use radn::training::{regression_step, Adam, AdamConfig};
use radn::{build_model, Model, ModelConfig, Tape, Tensor, Variant};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn f32_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    random_tensor(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).cast()
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for &(n, ch, side) in &[(64, 4, 32), (64, 8, 16), (16, 64, 8)] {
        let x = f32_tensor(&[n, ch, side, side], 1);
        let w = f32_tensor(&[ch, ch, 3, 3], 2);
        g.bench_with_input(BenchmarkId::new("fwd+bwd", format!("{n}x{ch}x{side}")), &(), |b, _| {
            b.iter(|| {
                let mut t = Tape::<f32>::new();
                let xv = t.param(x.clone());
                let wv = t.param(w.clone());
                let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
                let s = t.sum(y).unwrap();
                t.backward(s).unwrap();
                black_box(t.grad(wv).map(|g| g[0]))
            })
        });
    }
    g.finish();
}

fn deform(c: &mut Criterion) {
    let x = f32_tensor(&[64, 8, 8, 8], 3);
    let off = f32_tensor(&[64, 18, 8, 8], 4);
    let w = f32_tensor(&[8, 8, 3, 3], 5);
    c.bench_function("deform_conv fwd+bwd 64x8x8x8", |b| {
        b.iter(|| {
            let mut t = Tape::<f32>::new();
            let xv = t.param(x.clone());
            let ov = t.param(off.clone());
            let wv = t.param(w.clone());
            let y = t.deform_conv(xv, ov, wv).unwrap();
            let s = t.sum(y).unwrap();
            t.backward(s).unwrap();
            black_box(t.grad(ov).map(|g| g[0]))
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("patch_attention");
    for &(n, d) in &[(32, 8), (32, 512), (256, 64)] {
        let x = f32_tensor(&[n, d], 6);
        let ws: Vec<Tensor<f32>> = (0..4).map(|i| f32_tensor(&[d, d], 10 + i)).collect();
        g.bench_with_input(BenchmarkId::new("fwd", format!("{n}x{d}")), &(), |b, _| {
            b.iter(|| {
                let mut t = Tape::<f32>::new();
                let xv = t.constant(x.clone());
                let v: Vec<_> = ws.iter().map(|w| t.constant(w.clone())).collect();
                let w = AttentionVars {
                    query: v[0],
                    key: v[1],
                    value: v[2],
                    output: v[3],
                };
                black_box(patch_attention(&mut t, xv, &w).unwrap())
            })
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let r = synth_reference(64, 64, 1);
    let (d, _) = synth_distort(&r, DistortionKind::LocalWarp, 3, 1).unwrap();
    let a = sample_patches(&r, &d, PatchMode::TrainRandom, 32, 32, 1).unwrap();
    let bt = sample_patches(&r, &d, PatchMode::TrainRandom, 32, 32, 2).unwrap();
    let mut g = c.benchmark_group("regression_step toy 2x32 patches");
    g.sample_size(20);
    for v in Variant::ALL {
        let cfg = ModelConfig::toy(v);
        let model = Model::new(cfg.clone()).unwrap();
        let mut params = build_model(&cfg, 0).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        g.bench_function(v.to_string(), |b| {
            b.iter(|| regression_step(&model, &mut params, &mut adam, 1e-4, &[&a, &bt], &[0.5, -0.5]).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, conv, deform, attention, train_step);
criterion_main!(benches);
