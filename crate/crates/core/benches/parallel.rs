//! Sequential vs rayon execution of the hot kernels and of whole-scene
//! evaluation. Both modes produce identical bits; only time differs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xalign::par::Exec;
use xalign::scene::{generate_scenes, SceneConfig};
use xalign::tensor::kernels::{conv_forward, matmul, ConvGeom};
use xalign::train::{evaluate, Model, TrainConfig, Variant};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn kernels(c: &mut Criterion) {
    // the BEV encoder's widest layer at the default latent size
    let g = ConvGeom { batch: 1, in_ch: 32, out_ch: 32, groups: 1, k: 3, stride: 1, pad: 1, in_h: 32, in_w: 32, out_h: 32, out_w: 32 };
    let x = random(g.batch * g.in_ch * g.in_h * g.in_w, 1);
    let w = random(g.weight_len(), 2);
    let mut group = c.benchmark_group("conv3x3_32x32x32");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| conv_forward(exec, &g, black_box(&x), black_box(&w))));
    }
    group.finish();

    let (m, k, n) = (256, 64, 256);
    let a = random(m * k, 3);
    let bm = random(k * n, 4);
    let mut group = c.benchmark_group("matmul_256x64x256");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| matmul(exec, 1, m, k, n, black_box(&a), black_box(&bm))));
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let cfg = TrainConfig::for_variant(Variant::Baseline);
    let model = Model::from_train(&cfg).expect("default model");
    let params = model.init_params(0, false).expect("parameters");
    let scenes = generate_scenes(0, 4, &SceneConfig::from_model(&cfg.model).expect("scene config"), Exec::default()).expect("scenes");
    let refs: Vec<_> = scenes.iter().collect();
    let mut group = c.benchmark_group("evaluate_4_scenes");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| evaluate(&params, &model, black_box(&refs), 0.0, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, kernels, evaluation);
criterion_main!(benches);
