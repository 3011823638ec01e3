use criterion::{black_box, criterion_group, criterion_main, Criterion};

use depthmotion::evaluator::depth_metrics;
use depthmotion::losses::ssim_loss;
use depthmotion::networks::Models;
use depthmotion::trainer::{predict_depth, TrainConfig, Trainer};
use depthmotion::warping::warp;
use depthmotion::Tape;
use depthmotion_bench::{rigid_scene, rigid_triplet};

fn warp_and_ssim(c: &mut Criterion) {
    let s = rigid_scene(128, 416);
    let (h, w) = (s.height, s.width);
    c.bench_function("warp forward+backward 128x416", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let src = tape.constant(&[3, h, w], s.frames[0].clone());
            let depth = tape.variable(&[h, w], s.depths[1].clone());
            let motion = tape.variable(&[6], s.ego_prev.to_array().to_vec());
            let r = warp(src, depth, motion, &s.intrinsics).unwrap();
            black_box(tape.backward(r.image.mean()).unwrap());
        })
    });
    c.bench_function("ssim 128x416", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let a = tape.constant(&[3, h, w], s.frames[0].clone());
            let t = tape.constant(&[3, h, w], s.frames[1].clone());
            black_box(ssim_loss(a, t).unwrap().item())
        })
    });
    let valid = vec![true; h * w];
    c.bench_function("depth metrics 128x416", |b| {
        b.iter(|| black_box(depth_metrics(&s.depths[0], &s.depths[1], &valid, 80.0, true).unwrap()))
    });
}

fn networks(c: &mut Criterion) {
    let models = Models::new(0, 2).unwrap();
    let t = rigid_triplet(128, 416);
    c.bench_function("depth inference 128x416", |b| b.iter(|| black_box(predict_depth(&models, &t).unwrap())));
    let small = rigid_triplet(32, 96);
    let mut trainer = Trainer::new(TrainConfig::default()).unwrap();
    let batch = [&small; 4];
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("step batch 4 at 32x96", |b| b.iter(|| black_box(trainer.step(&batch).unwrap())));
    group.finish();
}

criterion_group!(benches, warp_and_ssim, networks);
criterion_main!(benches);
