//! Analytic gradients against central finite differences.

mod common;

use common::*;
use depthmotion::dataset::FrameTriplet;
use depthmotion::diff::gradcheck::rel_err;
use depthmotion::diff::{concat, conv2d, elementwise, reduce, stack_scalars, ElemOp, Padding, ReduceOp};
use depthmotion::geometry::{project, rotation_var, transform_points, unproject, Intrinsics};
use depthmotion::motionmodel::InstanceMasks;
use depthmotion::losses::{
    l2_penalty, normalize_depth, reconstruction_loss, size_constraint_loss, smoothness_loss, ssim_loss,
    ssim_reconstruction_loss, total_loss, LossWeights, ObjectMask, ScaleLosses,
};
use depthmotion::networks::{BoundModels, DepthNet, Models, MotionNet};
use depthmotion::synthscenes::{generate_dynamic, SceneConfig};
use depthmotion::trainer::{objective, Mode};
use depthmotion::warping::{bilinear_sample, warp_with};
use depthmotion::{Tape, Tensor, Var};
use rand::Rng;

const PRIMITIVE_TOL: f64 = 1e-4;
const COMPOSITE_TOL: f64 = 1e-3;

fn k_small() -> Intrinsics {
    Intrinsics::new(6.0, 5.5, 2.3, 1.8).unwrap()
}

#[test]
fn binary_elementwise_with_broadcasting() {
    let mut r = rng(1);
    for op in [ElemOp::Add, ElemOp::Sub, ElemOp::Mul, ElemOp::Div, ElemOp::Min, ElemOp::Max] {
        let a = input(&[2, 3], uniform(&mut r, 6, -2.0, 2.0));
        let b = input(&[3], away_from_zero(&mut r, 3, 0.3));
        let err = max_grad_error(&[a, b], |_, v| weighted_sum(elementwise(op, v[0], Some(v[1])).unwrap()));
        assert!(err < PRIMITIVE_TOL, "{op:?}: {err}");
    }
}

#[test]
fn unary_elementwise() {
    let mut r = rng(2);
    let x = input(&[7], away_from_zero(&mut r, 7, 0.1));
    let pos = input(&[7], uniform(&mut r, 7, 0.2, 2.0));
    let ops: Vec<(&str, Box<dyn for<'t> Fn(Var<'t>) -> Var<'t>>, &Input)> = vec![
        ("abs", Box::new(|v| elementwise(ElemOp::Abs, v, None).unwrap()), &x),
        ("exp", Box::new(|v| elementwise(ElemOp::Exp, v, None).unwrap()), &x),
        ("log", Box::new(|v| elementwise(ElemOp::Log, v, None).unwrap()), &pos),
        ("clamp", Box::new(|v| elementwise(ElemOp::Clamp { lo: -1.05, hi: 1.05 }, v, None).unwrap()), &x),
        ("relu", Box::new(|v| v.relu()), &x),
        ("sigmoid", Box::new(|v| v.sigmoid()), &x),
        ("sin", Box::new(|v| v.sin()), &x),
        ("cos", Box::new(|v| v.cos()), &x),
        ("sqrt", Box::new(|v| v.sqrt()), &pos),
        ("square", Box::new(|v| v.square()), &x),
        ("recip", Box::new(|v| v.recip()), &x),
        ("neg", Box::new(|v| -v), &x),
        ("scale+offset", Box::new(|v| v.scale(-1.7).offset(0.3)), &x),
    ];
    for (name, f, inp) in ops {
        let err = max_grad_error(std::slice::from_ref(inp), |_, v| weighted_sum(f(v[0])));
        assert!(err < PRIMITIVE_TOL, "{name}: {err}");
    }
}

#[test]
fn reductions() {
    let mut r = rng(3);
    let x = input(&[2, 3, 4], uniform(&mut r, 24, -2.0, 2.0));
    for op in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Min, ReduceOp::Max] {
        for axes in [None, Some(&[1usize][..]), Some(&[0, 2][..])] {
            let err = max_grad_error(std::slice::from_ref(&x), |_, v| weighted_sum(reduce(op, v[0], axes).unwrap()));
            assert!(err < PRIMITIVE_TOL, "{op:?} {axes:?}: {err}");
        }
    }
}

#[test]
fn shape_operations() {
    let mut r = rng(4);
    let a = input(&[3, 4], uniform(&mut r, 12, -2.0, 2.0));
    let b = input(&[4, 2], uniform(&mut r, 8, -2.0, 2.0));
    let err = max_grad_error(&[a.clone(), b], |_, v| weighted_sum(v[0].matmul(v[1])));
    assert!(err < PRIMITIVE_TOL, "matmul: {err}");
    let err = max_grad_error(std::slice::from_ref(&a), |_, v| weighted_sum(v[0].transpose()));
    assert!(err < PRIMITIVE_TOL, "transpose: {err}");
    let err = max_grad_error(std::slice::from_ref(&a), |_, v| weighted_sum(v[0].narrow(1, 1, 2)));
    assert!(err < PRIMITIVE_TOL, "narrow: {err}");
    let err = max_grad_error(std::slice::from_ref(&a), |_, v| weighted_sum(v[0].reshape(&[2, 6])));
    assert!(err < PRIMITIVE_TOL, "reshape: {err}");
    let c = input(&[2, 4], uniform(&mut r, 8, -2.0, 2.0));
    let err = max_grad_error(&[a.clone(), c], |_, v| weighted_sum(concat(&[v[0], v[1]], 0).unwrap()));
    assert!(err < PRIMITIVE_TOL, "concat: {err}");
    let s = input(&[5], uniform(&mut r, 5, -2.0, 2.0));
    let err = max_grad_error(&[s], |_, v| {
        weighted_sum(stack_scalars(&[v[0].index(3), v[0].index(0), v[0].index(3)]))
    });
    assert!(err < PRIMITIVE_TOL, "index/stack: {err}");
}

#[test]
fn convolution() {
    let mut r = rng(5);
    let x = input(&[1, 2, 5, 5], uniform(&mut r, 50, -2.0, 2.0));
    let k = input(&[3, 2, 3, 3], uniform(&mut r, 54, -2.0, 2.0));
    for (stride, pad) in [(1, Padding::Same), (1, Padding::Valid), (2, Padding::Same)] {
        let err = max_grad_error(&[x.clone(), k.clone()], |_, v| {
            weighted_sum(conv2d(v[0], v[1], stride, pad).unwrap())
        });
        assert!(err < PRIMITIVE_TOL, "conv stride {stride} {pad:?}: {err}");
    }
}

#[test]
fn spatial_filters() {
    let mut r = rng(6);
    let x = input(&[2, 6, 8], uniform(&mut r, 96, -2.0, 2.0));
    let err = max_grad_error(std::slice::from_ref(&x), |_, v| weighted_sum(v[0].avg_pool2()));
    assert!(err < PRIMITIVE_TOL, "avg_pool2: {err}");
    let err = max_grad_error(std::slice::from_ref(&x), |_, v| weighted_sum(v[0].upsample2()));
    assert!(err < PRIMITIVE_TOL, "upsample2: {err}");
    let err = max_grad_error(std::slice::from_ref(&x), |_, v| weighted_sum(v[0].box3()));
    assert!(err < PRIMITIVE_TOL, "box3: {err}");
}

/// Fractional coordinates kept away from pixel centres, where bilinear
/// interpolation has kinks.
fn off_grid(r: &mut rand_chacha::ChaCha8Rng, n: usize, max: f64) -> Vec<f64> {
    (0..n)
        .map(|_| r.random_range(0.0..max.floor()) + r.random_range(0.1..0.9))
        .map(|c: f64| c.min(max - 0.05))
        .collect()
}

#[test]
fn bilinear_sampler() {
    let mut r = rng(7);
    let (h, w) = (4, 5);
    let img = input(&[2, h, w], uniform(&mut r, 2 * h * w, -2.0, 2.0));
    let mut coords = off_grid(&mut r, 6, (w - 1) as f64);
    coords.extend(off_grid(&mut r, 6, (h - 1) as f64));
    let coords = input(&[2, 2, 3], coords);
    let err = max_grad_error(&[img, coords], |_, v| weighted_sum(bilinear_sample(v[0], v[1]).unwrap().0));
    assert!(err < PRIMITIVE_TOL, "sampler: {err}");
}

#[test]
fn camera_geometry() {
    let mut r = rng(8);
    let k = k_small();
    let depth = input(&[3, 4], uniform(&mut r, 12, 0.5, 3.0));
    let err = max_grad_error(std::slice::from_ref(&depth), |_, v| weighted_sum(unproject(v[0], &k).unwrap()));
    assert!(err < PRIMITIVE_TOL, "unproject: {err}");
    let mut pts = uniform(&mut r, 24, -1.0, 1.0);
    pts[16..].iter_mut().for_each(|z| *z = 1.0 + z.abs());
    let pts = input(&[3, 2, 4], pts);
    let err = max_grad_error(std::slice::from_ref(&pts), |_, v| weighted_sum(project(v[0], &k)));
    assert!(err < PRIMITIVE_TOL, "project: {err}");
    let err = max_grad_error(std::slice::from_ref(&depth), |_, v| weighted_sum(project(unproject(v[0], &k).unwrap(), &k)));
    assert!(err < PRIMITIVE_TOL, "projection wrt depth: {err}");
    let params = input(&[6], uniform(&mut r, 6, -0.5, 0.5));
    let err = max_grad_error(std::slice::from_ref(&params), |_, v| weighted_sum(rotation_var(v[0])));
    assert!(err < PRIMITIVE_TOL, "rotation: {err}");
    for inverse in [false, true] {
        let err = max_grad_error(&[pts.clone(), params.clone()], |_, v| {
            weighted_sum(transform_points(v[0], v[1], inverse))
        });
        assert!(err < PRIMITIVE_TOL, "transform inverse={inverse}: {err}");
    }
}

fn smooth_image(h: usize, w: usize, phase: f64) -> Vec<f64> {
    (0..3 * h * w)
        .map(|i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            0.5 + 0.3 * ((0.9 * x as f64 + 0.4 * y as f64 + phase + c as f64).sin())
        })
        .collect()
}

#[test]
fn warp_wrt_source_depth_and_motion() {
    let mut r = rng(9);
    let (h, w) = (6, 8);
    let k = Intrinsics::new(8.0, 8.0, 3.5, 2.5).unwrap();
    let src = input(&[3, h, w], smooth_image(h, w, 0.2));
    let depth = input(&[h, w], uniform(&mut r, h * w, 4.0, 6.0));
    let motion = input(&[6], vec![0.13, -0.07, 0.05, 0.01, -0.02, 0.015]);
    for inverse in [false, true] {
        let err = max_grad_error(&[src.clone(), depth.clone(), motion.clone()], |_, v| {
            let res = warp_with(v[0], v[1], v[2], inverse, &k).unwrap();
            weighted_sum(res.image)
        });
        assert!(err < COMPOSITE_TOL, "warp inverse={inverse}: {err}");
    }
}

#[test]
fn photometric_losses() {
    let mut r = rng(10);
    let (h, w) = (6, 8);
    let k = Intrinsics::new(8.0, 8.0, 3.5, 2.5).unwrap();
    let frames = [smooth_image(h, w, 0.0), smooth_image(h, w, 0.4), smooth_image(h, w, 0.9)];
    let depth = input(&[h, w], uniform(&mut r, h * w, 4.0, 6.0));
    let motion = input(&[6], vec![0.11, 0.04, -0.05, 0.02, 0.02, -0.01]);
    for (name, use_ssim) in [("reconstruction", false), ("ssim reconstruction", true)] {
        let frames = frames.clone();
        let err = max_grad_error(&[depth.clone(), motion.clone()], move |tape, v| {
            let f: Vec<Var<'_>> = frames.iter().map(|f| tape.constant(&[3, h, w], f.clone())).collect();
            let prev = warp_with(f[0], v[0], v[1], false, &k).unwrap();
            let next = warp_with(f[2], v[0], v[1], true, &k).unwrap();
            if use_ssim {
                ssim_reconstruction_loss(&prev, &next, f[1]).unwrap()
            } else {
                reconstruction_loss(&prev, &next, f[1]).unwrap()
            }
        });
        assert!(err < COMPOSITE_TOL, "{name}: {err}");
    }
    let a = input(&[3, h, w], uniform(&mut r, 3 * h * w, 0.0, 1.0));
    let b = input(&[3, h, w], uniform(&mut r, 3 * h * w, 0.0, 1.0));
    let err = max_grad_error(&[a, b], |_, v| ssim_loss(v[0], v[1]).unwrap());
    assert!(err < COMPOSITE_TOL, "ssim: {err}");
}

#[test]
fn depth_regularizers() {
    let mut r = rng(11);
    let (h, w) = (6, 8);
    let depth = input(&[h, w], uniform(&mut r, h * w, 1.0, 5.0));
    let image = input(&[3, h, w], uniform(&mut r, 3 * h * w, 0.0, 1.0));
    let err = max_grad_error(&[depth.clone(), image], |_, v| smoothness_loss(v[0], v[1]).unwrap());
    assert!(err < COMPOSITE_TOL, "smoothness: {err}");
    let err = max_grad_error(std::slice::from_ref(&depth), |_, v| weighted_sum(normalize_depth(v[0])));
    assert!(err < COMPOSITE_TOL, "normalize: {err}");

    let k = Intrinsics::new(10.0, 10.0, 3.5, 2.5).unwrap();
    let mask = |x0: usize, x1: usize, y0: usize, y1: usize| -> Vec<f64> {
        (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    };
    let objects = vec![
        ObjectMask { mask: mask(0, 3, 1, 5), category: 0 },
        ObjectMask { mask: mask(5, 8, 2, 4), category: 1 },
    ];
    let priors = input(&[2], vec![0.7, 1.9]);
    let err = max_grad_error(&[depth.clone(), priors], |_, v| {
        size_constraint_loss(v[0], &objects, v[1], &k).unwrap().0
    });
    assert!(err < COMPOSITE_TOL, "size constraint: {err}");
    let ws = input(&[2, 3], uniform(&mut r, 6, -1.0, 1.0));
    let err = max_grad_error(&[ws], |tape, v| l2_penalty(tape, &[v[0]]));
    assert!(err < COMPOSITE_TOL, "l2: {err}");
}

#[test]
fn weighted_total() {
    let mut r = rng(12);
    let comps = input(&[14], uniform(&mut r, 14, 0.0, 1.0));
    let weights = LossWeights::default();
    let err = max_grad_error(&[comps], |_, v| {
        let c = |i: usize| v[0].index(i);
        let scales: Vec<ScaleLosses<'_>> = (0..4)
            .map(|s| ScaleLosses { reconstruction: c(3 * s), ssim: c(3 * s + 1), smoothness: c(3 * s + 2) })
            .collect();
        total_loss(&scales, Some(c(12)), Some(c(13)), &weights).unwrap()
    });
    assert!(err < COMPOSITE_TOL, "total: {err}");
}

/// Finite-difference step for network parameters; smaller than the
/// primitive step so that probes rarely cross a ReLU kink.
const NET_STEP: f64 = 1e-6;

/// Checks `samples` entries of every tensor of a parameter list. `loss`
/// rebuilds the scalar from values bound to a fresh tape.
fn check_params(
    params: &mut [Tensor],
    samples: &dyn Fn(usize) -> usize,
    seed: u64,
    loss: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
) -> (f64, usize) {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|t| tape.variable(t.shape(), t.values().to_vec())).collect();
    let grads = tape.backward(loss(&tape, &vars)).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.wrt(*v)).collect();
    let eval = |params: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|t| tape.constant(t.shape(), t.values().to_vec())).collect();
        loss(&tape, &vars).item()
    };
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for ti in 0..params.len() {
        let n = params[ti].len();
        for _ in 0..samples(ti).min(n) {
            let j = r.random_range(0..n);
            let x = params[ti].values()[j];
            params[ti].values_mut()[j] = x + NET_STEP;
            let up = eval(params);
            params[ti].values_mut()[j] = x - NET_STEP;
            let down = eval(params);
            params[ti].values_mut()[j] = x;
            worst = worst.max(rel_err(analytic[ti][j], (up - down) / (2.0 * NET_STEP), FLOOR));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Gives the zero-initialized motion heads small random values so warps
/// land between pixel centres.
fn perturb_heads(models: &mut Models, seed: u64) {
    let mut r = rng(seed);
    for net in [&mut models.ego, &mut models.object] {
        for t in net.params.tensors_mut() {
            if t.values().iter().all(|&v| v == 0.0) {
                t.values_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
            }
        }
    }
}

#[test]
fn depth_network_parameters() {
    let models = Models::new(3, 2).unwrap();
    let image = smooth_image(16, 48, 0.3);
    let mut params: Vec<Tensor> = models.depth.params.tensors().to_vec();
    let (err, n) = check_params(&mut params, &|_| 6, 21, &|tape, v| {
        let img = tape.constant(&[3, 16, 48], image.clone());
        let d = DepthNet::forward(v, img).unwrap();
        d.iter().map(|&x| weighted_sum(x)).reduce(|a, b| a + b).unwrap()
    });
    assert!(err < COMPOSITE_TOL, "depth net ({n} entries): {err}");
}

#[test]
fn motion_network_parameters() {
    let mut models = Models::new(4, 2).unwrap();
    perturb_heads(&mut models, 5);
    let mut r = rng(22);
    let stacked = uniform(&mut r, 9 * 16 * 48, 0.0, 1.0);
    let mut params: Vec<Tensor> = models.ego.params.tensors().to_vec();
    let (err, n) = check_params(&mut params, &|_| 6, 23, &|tape, v| {
        let x = tape.constant(&[9, 16, 48], stacked.clone());
        let (a, b) = MotionNet::forward(v, x).unwrap();
        weighted_sum(a) + weighted_sum(b).scale(0.5)
    });
    assert!(err < COMPOSITE_TOL, "motion net ({n} entries): {err}");
}

fn tiny_dynamic() -> FrameTriplet {
    let cfg = SceneConfig::dynamic().with_size(16, 48);
    FrameTriplet::from(&generate_dynamic(5, &cfg).unwrap())
}

/// Samples entries of the tensors selected by `tensors` (checkpoint order:
/// depth, ego, object, priors).
fn objective_gradients(mode: Mode, triplet: &FrameTriplet, tensors: &dyn Fn(&str) -> bool) -> (f64, usize) {
    let mut models = Models::new(6, 2).unwrap();
    perturb_heads(&mut models, 7);
    let weights = LossWeights {
        l2_reg: 1e-3,
        ..LossWeights::default()
    };
    let named = models.named_tensors();
    let selected: Vec<bool> = named.iter().map(|(n, _)| tensors(n)).collect();
    let mut params: Vec<Tensor> = named.into_iter().map(|(_, t)| t.clone()).collect();
    let (nd, ne, no) = (models.depth.params.len(), models.ego.params.len(), models.object.params.len());
    check_params(&mut params, &|ti| if selected[ti] { 4 } else { 0 }, 24, &|tape, v| {
        let bound = BoundModels {
            depth: v[..nd].to_vec(),
            ego: v[nd..nd + ne].to_vec(),
            object: v[nd + ne..nd + ne + no].to_vec(),
            priors: v[nd + ne + no],
        };
        objective(tape, &bound, triplet, mode, &weights).unwrap().loss
    })
}

#[test]
fn full_objective_baseline() {
    let (err, n) = objective_gradients(Mode::Baseline, &tiny_dynamic(), &|_| true);
    assert!(err < COMPOSITE_TOL, "baseline objective ({n} entries): {err}");
}

#[test]
fn full_objective_motion_without_instances() {
    let mut t = tiny_dynamic();
    t.masks = InstanceMasks::empty(t.height, t.width);
    let (err, n) = objective_gradients(Mode::Motion, &t, &|_| true);
    assert!(err < COMPOSITE_TOL, "motion objective ({n} entries): {err}");
}

/// With instances present the composite stops gradients through the
/// ego-warped image, so finite differences only agree for the parameters
/// that do not feed it.
#[test]
fn full_objective_motion_object_net_and_priors() {
    let t = tiny_dynamic();
    assert!(t.masks.num_instances() > 0);
    let (err, n) = objective_gradients(Mode::Motion, &t, &|name| name.starts_with("object") || name == "priors");
    assert!(err < COMPOSITE_TOL, "motion objective ({n} entries): {err}");
}
