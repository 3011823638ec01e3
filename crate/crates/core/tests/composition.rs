mod common;

use common::*;
use depthmotion::dataset::FrameTriplet;
use depthmotion::geometry::{Intrinsics, SE3Params};
use depthmotion::losses::LossWeights;
use depthmotion::motionmodel::{compose_warp, ego_input_mask, instance_mask, static_mask, InstanceMasks};
use depthmotion::networks::Models;
use depthmotion::synthscenes::{generate_dynamic, SceneConfig};
use depthmotion::trainer::{objective, Mode};
use depthmotion::warping::warp_with;
use depthmotion::Tape;
use proptest::prelude::*;
use rand::Rng;

fn dynamic_triplet() -> FrameTriplet {
    let cfg = SceneConfig::dynamic().with_size(16, 48);
    let t = FrameTriplet::from(&generate_dynamic(11, &cfg).unwrap());
    assert!(t.masks.frames[1].iter().any(|&k| k > 0), "scene has no object in frame 2");
    t
}

/// Random values for every zero tensor of both motion nets so that motions
/// are not identically zero.
fn randomize_heads(models: &mut Models, seed: u64) {
    let mut r = rng(seed);
    for net in [&mut models.ego, &mut models.object] {
        for t in net.params.tensors_mut() {
            if t.values().iter().all(|&v| v == 0.0) {
                t.values_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
            }
        }
    }
}

fn object_region(t: &FrameTriplet) -> Vec<bool> {
    t.masks.frames[1].iter().map(|&k| k > 0).collect()
}

#[test]
fn object_net_changes_composite_only_inside_objects() {
    let triplet = dynamic_triplet();
    let inside = object_region(&triplet);
    let n = inside.len();
    let mut base = Models::new(4, 2).unwrap();
    randomize_heads(&mut base, 40);
    let mut other = base.clone();
    let mut r = rng(41);
    for t in other.object.params.tensors_mut() {
        t.values_mut().iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
    }
    let composite = |m: &Models| {
        let tape = Tape::new();
        let bound = m.bind(&tape);
        let f = objective(&tape, &bound, &triplet, Mode::Motion, &LossWeights::default()).unwrap();
        let a = f.warps.0.image.value().to_vec();
        let b = f.warps.1.image.value().to_vec();
        (a, b)
    };
    let (a0, b0) = composite(&base);
    let (a1, b1) = composite(&other);
    let mut changed_inside = false;
    for (x, y) in [(&a0, &a1), (&b0, &b1)] {
        for i in 0..x.len() {
            if inside[i % n] {
                changed_inside |= x[i] != y[i];
            } else {
                assert_eq!(x[i], y[i], "pixel {} outside every object changed", i % n);
            }
        }
    }
    assert!(changed_inside);
}

#[test]
fn composite_outside_objects_sends_no_gradient_to_object_net() {
    let triplet = dynamic_triplet();
    let outside: Vec<f64> = object_region(&triplet).iter().map(|&o| if o { 0.0 } else { 1.0 }).collect();
    let mut models = Models::new(5, 2).unwrap();
    randomize_heads(&mut models, 50);
    let tape = Tape::new();
    let bound = models.bind(&tape);
    let f = objective(&tape, &bound, &triplet, Mode::Motion, &LossWeights::default()).unwrap();
    let (h, w) = (triplet.height, triplet.width);
    let keep = tape.constant(&[1, h, w], outside);
    let root = (f.warps.0.image * keep).sum() + (f.warps.1.image * keep).sum();
    let grads = tape.backward(root).unwrap();
    for v in &bound.object {
        assert!(grads.wrt(*v).iter().all(|&g| g == 0.0));
    }
    assert!(bound.ego.iter().any(|v| grads.wrt(*v).iter().any(|&g| g != 0.0)));
}

#[test]
fn object_pixels_send_no_gradient_to_ego_net() {
    let triplet = dynamic_triplet();
    let inside: Vec<f64> = object_region(&triplet).iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
    let mut models = Models::new(6, 2).unwrap();
    randomize_heads(&mut models, 60);
    let tape = Tape::new();
    let bound = models.bind(&tape);
    let f = objective(&tape, &bound, &triplet, Mode::Motion, &LossWeights::default()).unwrap();
    let (h, w) = (triplet.height, triplet.width);
    let keep = tape.constant(&[1, h, w], inside);
    let root = (f.warps.0.image * keep).sum() + (f.warps.1.image * keep).sum();
    let grads = tape.backward(root).unwrap();
    for v in &bound.ego {
        assert!(grads.wrt(*v).iter().all(|&g| g == 0.0));
    }
    assert!(bound.object.iter().any(|v| grads.wrt(*v).iter().any(|&g| g != 0.0)));
}

const H: usize = 20;
const W: usize = 48;

fn k() -> Intrinsics {
    Intrinsics::new(32.0, 32.0, 23.5, 9.5).unwrap()
}

fn random_image(seed: u64) -> Vec<f64> {
    uniform(&mut rng(seed), 3 * H * W, 0.0, 1.0)
}

#[test]
fn no_instances_reduce_to_ego_warp() {
    let tape = Tape::new();
    let src = tape.constant(&[3, H, W], random_image(1));
    let depth = tape.constant(&[H, W], uniform(&mut rng(2), H * W, 2.0, 9.0));
    let e = tape.constant(&[6], SE3Params::new([0.1, 0.02, 0.3], [0.01, -0.02, 0.0]).to_array().to_vec());
    let ego = warp_with(src, depth, e, false, &k()).unwrap();
    let masks = InstanceMasks::empty(H, W);
    let v = ego_input_mask(&masks.frames[0], &masks.frames[1], &masks.frames[2]);
    let full = compose_warp(&ego, depth, &[], false, &masks.frames[1], &v, &k()).unwrap();
    assert_eq!(&*full.warp.image.value(), &*ego.image.value());
    assert_eq!(full.warp.valid, ego.valid);
    assert_eq!(full.uncovered_fraction, 0.0);
}

#[test]
fn zero_object_motion_copies_ego_warp_on_covered_pixels() {
    let tape = Tape::new();
    let src = tape.constant(&[3, H, W], random_image(3));
    let depth = tape.constant(&[H, W], vec![5.0; H * W]);
    let e = tape.constant(&[6], SE3Params::translation_only([0.2, 0.0, 0.1]).to_array().to_vec());
    let ego = warp_with(src, depth, e, false, &k()).unwrap();
    let mut frames = [vec![0u8; H * W], vec![0u8; H * W], vec![0u8; H * W]];
    // object 1 in all frames, object 2 only in frame 2, a frame-1 blob
    for y in 4..10 {
        for x in 10..18 {
            frames.iter_mut().for_each(|f| f[y * W + x] = 1);
        }
        for x in 30..36 {
            frames[1][y * W + x] = 2;
        }
    }
    for y in 14..18 {
        for x in 2..6 {
            frames[0][y * W + x] = 1;
        }
    }
    let masks = InstanceMasks::new(H, W, frames, vec![0, 1]).unwrap();
    let v = ego_input_mask(&masks.frames[0], &masks.frames[1], &masks.frames[2]);
    let zero = tape.constant(&[6], vec![0.0; 6]);
    let full = compose_warp(&ego, depth, &[(1, zero), (2, zero)], false, &masks.frames[1], &v, &k()).unwrap();
    let (out, reference) = (full.warp.image.value(), ego.image.value());
    let n = H * W;
    let mut uncovered = 0;
    for i in 0..n {
        let covered = v[i] == 1.0 || masks.frames[1][i] > 0;
        if !covered {
            uncovered += 1;
        }
        for c in 0..3 {
            let expect = if covered { reference[c * n + i] } else { 0.0 };
            assert!((out[c * n + i] - expect).abs() < 1e-12);
        }
    }
    assert!(uncovered > 0);
    assert_eq!(full.uncovered_fraction, uncovered as f64 / n as f64);
}

/// Smooth, distinct textures for background and object.
fn background(x: f64, y: f64) -> [f64; 3] {
    [
        0.5 + 0.3 * (0.21 * x).sin() * (0.17 * y).cos(),
        0.45 + 0.25 * (0.13 * x + 0.4).cos(),
        0.5 + 0.2 * (0.19 * y - 0.09 * x).sin(),
    ]
}

fn object(x: f64, y: f64) -> [f64; 3] {
    [
        0.3 + 0.2 * (0.25 * x + 0.3 * y).cos(),
        0.7 + 0.15 * (0.2 * y).sin(),
        0.25 + 0.2 * (0.3 * x).sin(),
    ]
}

/// Background moves by the ego shift, the object additionally by its own
/// shift. The composite of frame 1 must reproduce frame 2: background from
/// the ego-shift oracle and the object from the object-shift oracle.
#[test]
fn composite_matches_two_shift_oracle() {
    let k = k();
    let d = 4.0;
    let (ego_px, obj_px) = (1.5, 2.25);
    let (ego_t, obj_t) = (ego_px * d / k.fx, obj_px * d / k.fx);
    let (x0, x1, y0, y1) = (16usize, 30usize, 5usize, 15usize);
    let in_object = |x: f64, y: f64| x >= x0 as f64 && x < x1 as f64 && y >= y0 as f64 && y < y1 as f64;
    let n = H * W;
    let (mut frame1, mut frame2) = (vec![0.0; 3 * n], vec![0.0; 3 * n]);
    let mut map2 = vec![0u8; n];
    let mut map1 = vec![0u8; n];
    for y in 0..H {
        for x in 0..W {
            let i = y * W + x;
            let (xf, yf) = (x as f64, y as f64);
            // frame-1 pixel xs shows what frame 2 has at xs - shift
            let back = xf - ego_px - obj_px;
            let c1 = if in_object(back, yf) { object(back, yf) } else { background(xf - ego_px, yf) };
            if in_object(back, yf) {
                map1[i] = 1;
            }
            let c2 = if in_object(xf, yf) { object(xf, yf) } else { background(xf, yf) };
            if in_object(xf, yf) {
                map2[i] = 1;
            }
            for c in 0..3 {
                frame1[c * n + i] = c1[c];
                frame2[c * n + i] = c2[c];
            }
        }
    }
    let tape = Tape::new();
    let src = tape.constant(&[3, H, W], frame1);
    let depth = tape.constant(&[H, W], vec![d; n]);
    let e = tape.constant(&[6], SE3Params::translation_only([ego_t, 0.0, 0.0]).to_array().to_vec());
    let m = tape.constant(&[6], SE3Params::translation_only([obj_t, 0.0, 0.0]).to_array().to_vec());
    let ego = warp_with(src, depth, e, false, &k).unwrap();
    let v: Vec<f64> = static_mask(&map1).iter().zip(static_mask(&map2)).map(|(a, b)| a * b).collect();
    let full = compose_warp(&ego, depth, &[(1, m)], false, &map2, &v, &k).unwrap();
    let out = full.warp.image.value();
    let object_px = instance_mask(&map2, 1);
    let (mut total, mut count) = (0.0, 0);
    for i in 0..n {
        if full.warp.valid[i] == 1.0 && (v[i] == 1.0 || object_px[i] == 1.0) {
            for c in 0..3 {
                total += (out[c * n + i] - frame2[c * n + i]).abs();
            }
            count += 3;
        }
    }
    assert!(count > 3 * n / 2, "only {} valid pixels", count / 3);
    let mean = total / count as f64;
    assert!(mean < 1e-2, "mean abs error {mean:.4}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compositing_weights_never_exceed_one(
        f1 in prop::collection::vec(0u8..4, 30),
        f2 in prop::collection::vec(0u8..4, 30),
        f3 in prop::collection::vec(0u8..4, 30),
    ) {
        let v = ego_input_mask(&f1, &f2, &f3);
        for i in 0..30 {
            let objects: f64 = (1..4).map(|k| instance_mask(&f2, k)[i]).sum();
            prop_assert!(v[i] + objects <= 1.0);
        }
        // identical maps in all frames tile the frame exactly
        let same = ego_input_mask(&f2, &f2, &f2);
        for i in 0..30 {
            let objects: f64 = (1..4).map(|k| instance_mask(&f2, k)[i]).sum();
            prop_assert_eq!(same[i] + objects, 1.0);
        }
    }
}
