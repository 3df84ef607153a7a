use candle_core::{DType, Device, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use flowedit_core::flow::{Latent, VelocityModel};
use flowedit_core::mask::{extract_mask, EditMask, ThresholdConfig};
use flowedit_core::model::{init_model, tokenize, InitScheme, ModelConfig};
use flowedit_core::shift::{adain, latents_shift, ShiftParams};
use flowedit_core::mix_kv;

fn checker_mask(rows: usize, cols: usize) -> EditMask {
    let values = (0..rows * cols).map(|i| (i / cols + i % cols) % 3 == 0).collect();
    EditMask::from_tokens(values, (rows, cols)).unwrap()
}

fn bench_mix(c: &mut Criterion) {
    let dev = Device::Cpu;
    // (batch, heads, tokens, head_dim) of the default model
    let shape = (1, 4, 64, 32);
    let t = |seed: f64| Tensor::randn(seed, 1.0, shape, &dev).unwrap().to_dtype(DType::F32).unwrap();
    let (ktg, vtg, ks, vs) = (t(0.0), t(0.1), t(0.2), t(0.3));
    let mask = checker_mask(8, 8);
    c.bench_function("mix_kv 4x64x32", |b| {
        b.iter(|| mix_kv(black_box(&ktg), &vtg, &ks, &vs, &mask, 0.9).unwrap())
    });
}

fn bench_shift(c: &mut Criterion) {
    let z = Latent::new(Tensor::randn(0f32, 1.0, (3, 32, 32), &Device::Cpu).unwrap()).unwrap();
    let r = Latent::new(Tensor::randn(0.5f32, 2.0, (3, 32, 32), &Device::Cpu).unwrap()).unwrap();
    let mask = checker_mask(8, 8);
    let params = ShiftParams::default();
    c.bench_function("adain 3x32x32", |b| b.iter(|| adain(black_box(&z), &r, 1e-6).unwrap()));
    c.bench_function("latents_shift 3x32x32", |b| {
        b.iter(|| latents_shift(black_box(&z), &mask, &params).unwrap())
    });
}

fn bench_model(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let (model, _vars) = init_model(cfg.clone(), DType::F32, InitScheme::Random, 0).unwrap();
    let prompt = tokenize("a red circle on the left", cfg.max_text_tokens).unwrap();
    let z = Latent::new(Tensor::randn(0f32, 1.0, cfg.latent_shape(), &Device::Cpu).unwrap()).unwrap();
    c.bench_function("toy model velocity", |b| {
        b.iter(|| model.velocity(black_box(&z), 0.5, &prompt, None).unwrap())
    });
}

fn bench_mask(c: &mut Criterion) {
    // one head-stacked joint attention map, 8 text + 64 visual tokens
    let attn = Tensor::rand(0f32, 1.0, (4, 72, 72), &Device::Cpu).unwrap();
    let cfg = ThresholdConfig::default();
    c.bench_function("extract_mask 72 tokens", |b| {
        b.iter(|| extract_mask(black_box(&attn), &[1, 2], 8, (8, 8), &cfg).unwrap())
    });
}

criterion_group!(benches, bench_mix, bench_shift, bench_model, bench_mask);
criterion_main!(benches);
