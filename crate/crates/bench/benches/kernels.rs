use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use s3pet_bench::{random_slices, random_tensor};
use s3pet_core::autograd::Tape;
use s3pet_core::metrics::ssim_slice;
use s3pet_core::model::ModelDims;
use s3pet_core::objectives::LossWeights;
use s3pet_core::tensor::Tensor;
use s3pet_core::trainer::{S3petNet, SliceBatch, Variant};

fn gemm(c: &mut Criterion) {
    let x = random_tensor(&[256, 64], 1);
    let w = random_tensor(&[64, 64], 2);
    let b = random_tensor(&[64], 3);
    c.bench_function("linear 256x64x64 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.param(&w), tape.param(&b));
            let y = tape.linear(xv, wv, bv).unwrap();
            let z = tape.constant(Tensor::zeros(&[256, 64]));
            let loss = tape.mean_abs_diff(y, z).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn attention(c: &mut Criterion) {
    let q = random_tensor(&[4 * 64, 64], 4);
    let k = random_tensor(&[4 * 64, 64], 5);
    let v = random_tensor(&[4 * 64, 64], 6);
    c.bench_function("attention b4 n64 d64 h4 fwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (qv, kv, vv) = (
                tape.constant(q.clone()),
                tape.constant(k.clone()),
                tape.constant(v.clone()),
            );
            black_box(tape.attention(qv, kv, vv, 4, 4).unwrap());
        })
    });
}

fn conv(c: &mut Criterion) {
    let x = random_tensor(&[2, 32, 32, 32], 7);
    let w = random_tensor(&[16, 32, 3, 3], 8);
    let b = random_tensor(&[16], 9);
    c.bench_function("conv3x3 2x32x32x32 -> 16 fwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (
                tape.constant(x.clone()),
                tape.constant(w.clone()),
                tape.constant(b.clone()),
            );
            black_box(tape.conv2d(xv, wv, bv).unwrap());
        })
    });
}

fn stage2_step(c: &mut Criterion) {
    let dims = ModelDims {
        dim: 32,
        depth: 2,
        heads: 4,
        patch: 8,
        slice: 32,
    };
    let net = S3petNet::init(0, dims, Variant::Full).unwrap();
    let (ls, ss) = (random_slices(2, 32, 10), random_slices(2, 32, 11));
    let l = SliceBatch::new(&ls.iter().collect::<Vec<_>>(), &dims).unwrap();
    let s = SliceBatch::new(&ss.iter().collect::<Vec<_>>(), &dims).unwrap();
    let w = LossWeights::default();
    c.bench_function("stage II loss + grads d32 32x32 b2", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let pass = net.forward(&mut tape, &l, &s, &w).unwrap();
            black_box(tape.backward(pass.loss).unwrap());
        })
    });
}

fn metrics(c: &mut Criterion) {
    let a: Vec<f64> = random_tensor(&[64 * 64], 12)
        .data()
        .iter()
        .map(|v| v.abs())
        .collect();
    let b: Vec<f64> = random_tensor(&[64 * 64], 13)
        .data()
        .iter()
        .map(|v| v.abs())
        .collect();
    c.bench_function("ssim 64x64", |bench| {
        bench.iter(|| black_box(ssim_slice(&a, &b, 64, 64).unwrap()))
    });
}

criterion_group!(benches, gemm, attention, conv, stage2_step, metrics);
criterion_main!(benches);
