//! Training loop for the baseline and motion models, inference helpers and
//! online refinement.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::FrameTriplet;
use crate::diff::{Adam, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, SE3Params};
use crate::losses::{
    l2_penalty, mask_height, reconstruction_loss, size_constraint_loss, smoothness_loss, ssim_reconstruction_loss, total_loss,
    LossWeights, ObjectMask, ScaleLosses, NUM_SCALES,
};
use crate::motionmodel::{compose_warp, ego_input_mask, estimate_ego, estimate_object_motion, InstanceMasks};
use crate::networks::{BoundModels, DepthNet, Models, MotionNet};
use crate::warping::{warp_with, WarpResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Motion,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Motion => "motion",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "motion" => Ok(Mode::Motion),
            _ => Err(Error::Config(format!("mode must be baseline or motion, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub mode: Mode,
    pub num_categories: usize,
    /// Start the height priors at the scale of the untrained depth network.
    pub calibrate_priors: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0002,
            weights: LossWeights::default(),
            batch_size: 4,
            steps: 1000,
            seed: 0,
            mode: Mode::Baseline,
            num_categories: 2,
            calibrate_priors: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.num_categories == 0 {
            return Err(Error::Config("at least one object category is required".into()));
        }
        Ok(())
    }
}

/// Unweighted loss components of one step (averaged over the batch,
/// summed over scales) and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub ssim: f64,
    pub smoothness: f64,
    pub size_constraint: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.reconstruction += s * o.reconstruction;
        self.ssim += s * o.ssim;
        self.smoothness += s * o.smoothness;
        self.size_constraint += s * o.size_constraint;
        self.total += s * o.total;
    }

    fn is_finite(&self) -> bool {
        [self.reconstruction, self.ssim, self.smoothness, self.size_constraint, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L_rec={} L_ssim={} L_sm={} L_sc={} total={}",
            self.reconstruction, self.ssim, self.smoothness, self.size_constraint, self.total
        )
    }
}

/// Images of a triplet at one pyramid level.
struct Level<'t> {
    frames: [Var<'t>; 3],
    k: Intrinsics,
    masks: InstanceMasks,
}

fn pyramid<'t>(tape: &'t Tape, t: &FrameTriplet) -> Vec<Level<'t>> {
    let (h, w) = (t.height, t.width);
    let mut frames = t.frames.clone().map(|f| tape.constant(&[3, h, w], f));
    let mut masks = t.masks.clone();
    let mut levels = Vec::with_capacity(NUM_SCALES);
    for s in 0..NUM_SCALES {
        if s > 0 {
            frames = frames.map(|f| f.avg_pool2());
            masks = masks.downsampled();
        }
        levels.push(Level {
            frames,
            k: t.intrinsics.downscaled(s as u32),
            masks: masks.clone(),
        });
    }
    levels
}

fn ego_net<'a, 't>(vars: &'a [Var<'t>]) -> impl Fn(Var<'t>) -> Result<(Var<'t>, Var<'t>)> + 'a {
    move |x| MotionNet::forward(vars, x)
}

/// Everything the objective computes for one triplet.
pub struct Forward<'t> {
    /// Weighted loss including the L2 term.
    pub loss: Var<'t>,
    pub breakdown: LossBreakdown,
    /// Depth of the middle frame at each scale.
    pub depths: [Var<'t>; 4],
    pub ego: (Var<'t>, Var<'t>),
    /// Full-scale composite warps (previous, next).
    pub warps: (WarpResult<'t>, WarpResult<'t>),
    /// Per-instance `(instance, M_12, M_23)`.
    pub objects: Vec<(u8, Var<'t>, Var<'t>)>,
}

/// Builds the full training objective of one triplet on `tape`.
///
/// Pipeline order: masks, ego-motion, ego warps, object motion, composite
/// warps, losses. In baseline mode masks are ignored.
pub fn objective<'t>(
    tape: &'t Tape,
    bound: &BoundModels<'t>,
    triplet: &FrameTriplet,
    mode: Mode,
    weights: &LossWeights,
) -> Result<Forward<'t>> {
    let (h, w) = (triplet.height, triplet.width);
    let levels = pyramid(tape, triplet);
    let depths = DepthNet::forward(&bound.depth, levels[0].frames[1])?;
    let full = &levels[0];
    let v_full = match mode {
        Mode::Baseline => vec![1.0; h * w],
        Mode::Motion => ego_input_mask(&full.masks.frames[0], &full.masks.frames[1], &full.masks.frames[2]),
    };
    let ego = estimate_ego(full.frames, &v_full, &ego_net(&bound.ego))?;

    let mut scales = Vec::with_capacity(NUM_SCALES);
    let mut object_motions: Vec<(u8, Var<'t>, Var<'t>)> = Vec::new();
    let mut full_warps = None;
    for (s, lvl) in levels.iter().enumerate() {
        let depth = depths[s];
        let prev = warp_with(lvl.frames[0], depth, ego.0, false, &lvl.k)?;
        let next = warp_with(lvl.frames[2], depth, ego.1, true, &lvl.k)?;
        let (prev, next) = match mode {
            Mode::Baseline => (prev, next),
            Mode::Motion => {
                if s == 0 {
                    let net = |x| MotionNet::forward(&bound.object, x);
                    object_motions = estimate_object_motion(&prev, lvl.frames[1], &next, &lvl.masks, &net)?
                        .into_iter()
                        .map(|m| (m.instance, m.prev_to_mid, m.mid_to_next))
                        .collect();
                }
                let m = &lvl.masks;
                let v = ego_input_mask(&m.frames[0], &m.frames[1], &m.frames[2]);
                let fwd: Vec<(u8, Var<'t>)> = object_motions.iter().map(|o| (o.0, o.1)).collect();
                let bwd: Vec<(u8, Var<'t>)> = object_motions.iter().map(|o| (o.0, o.2)).collect();
                let a = compose_warp(&prev, depth, &fwd, false, &m.frames[1], &v, &lvl.k)?;
                let b = compose_warp(&next, depth, &bwd, true, &m.frames[1], &v, &lvl.k)?;
                (a.warp, b.warp)
            }
        };
        let target = lvl.frames[1];
        scales.push(ScaleLosses {
            reconstruction: reconstruction_loss(&prev, &next, target)?,
            // levels without a 3x3 interior have no SSIM term
            ssim: if lvl.masks.height >= 3 && lvl.masks.width >= 3 {
                ssim_reconstruction_loss(&prev, &next, target)?
            } else {
                tape.scalar(0.0)
            },
            smoothness: smoothness_loss(depth, target)?,
        });
        if s == 0 {
            full_warps = Some((prev, next));
        }
    }

    let size = match mode {
        Mode::Baseline => None,
        Mode::Motion => {
            let objects: Vec<ObjectMask> = (1..=triplet.masks.num_instances())
                .map(|k| ObjectMask {
                    mask: triplet.masks.instance(1, k as u8),
                    category: triplet.masks.categories[k - 1],
                })
                .filter(|o| o.mask.iter().any(|&v| v > 0.0))
                .collect();
            Some(size_constraint_loss(depths[0], &objects, bound.priors, &triplet.intrinsics)?.0)
        }
    };
    let mut trained: Vec<Var<'t>> = bound.depth.iter().chain(&bound.ego).copied().collect();
    if mode == Mode::Motion {
        trained.extend(bound.object.iter().copied());
    }
    let l2 = l2_penalty(tape, &trained.into_iter().filter(|v| matches!(v.shape().len(), 2 | 4)).collect::<Vec<_>>());
    let loss = total_loss(&scales, size, Some(l2), weights)?;
    let breakdown = LossBreakdown {
        reconstruction: scales.iter().map(|s| s.reconstruction.item()).sum(),
        ssim: scales.iter().map(|s| s.ssim.item()).sum(),
        smoothness: scales.iter().map(|s| s.smoothness.item()).sum(),
        size_constraint: size.map_or(0.0, |v| v.item()),
        total: loss.item(),
    };
    Ok(Forward {
        loss,
        breakdown,
        depths,
        ego,
        warps: full_warps.expect("scale 0 computed"),
        objects: object_motions,
    })
}

/// Owns models and optimizer state for a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub models: Models,
    pub config: TrainConfig,
    adam: Adam,
    steps_done: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let models = Models::new(config.seed, config.num_categories)?;
        Ok(Self::with_models(models, config))
    }

    pub fn with_models(models: Models, config: TrainConfig) -> Self {
        Self {
            models,
            config,
            adam: Adam::new(),
            steps_done: 0,
        }
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    fn trainable(models: &mut Models, mode: Mode) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(models.depth.params.tensors_mut());
        out.extend(models.ego.params.tensors_mut());
        if mode == Mode::Motion {
            out.extend(models.object.params.tensors_mut());
            out.push(&mut models.priors.values);
        }
        out
    }

    /// Forward and backward over the batch; gradients are left on the
    /// trainable tensors. Returns the batch-mean losses.
    pub fn accumulate_gradients(&mut self, batch: &[&FrameTriplet]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mode = self.config.mode;
        let scale = 1.0 / batch.len() as f64;
        let mut mean = LossBreakdown::default();
        for t in batch {
            let tape = Tape::new();
            let bound = self.models.bind(&tape);
            let fwd = objective(&tape, &bound, t, mode, &self.config.weights)?;
            mean.add_scaled(&fwd.breakdown, scale);
            if !fwd.breakdown.is_finite() {
                return Err(Error::NonFinite {
                    step: self.steps_done,
                    components: fwd.breakdown.to_string(),
                });
            }
            let grads = tape.backward(fwd.loss.scale(scale))?;
            let mut vars: Vec<Var<'_>> = bound.depth.iter().chain(&bound.ego).copied().collect();
            if mode == Mode::Motion {
                vars.extend(bound.object.iter().copied());
                vars.push(bound.priors);
            }
            for (var, tensor) in vars.into_iter().zip(Self::trainable(&mut self.models, mode)) {
                grads.accumulate_into(var, tensor)?;
            }
        }
        Ok(mean)
    }

    /// One optimizer step on a batch; returns the losses before the update.
    /// The first motion-mode step of a fresh run calibrates the height
    /// priors to the depth network's initial scale.
    pub fn step(&mut self, batch: &[&FrameTriplet]) -> Result<LossBreakdown> {
        if self.config.mode == Mode::Motion && self.steps_done == 0 && self.config.calibrate_priors {
            calibrate_priors(&mut self.models, batch)?;
        }
        let losses = self.accumulate_gradients(batch)?;
        let lr = self.config.learning_rate;
        let mode = self.config.mode;
        self.adam.step(&mut Self::trainable(&mut self.models, mode), lr)?;
        if mode == Mode::Motion {
            self.models.priors.project_positive();
        }
        self.steps_done += 1;
        Ok(losses)
    }
}

/// Sets each category's prior to the mean of `mean_object_depth * h / f_y`
/// over the batch's objects, so the size constraint starts near zero.
/// Categories absent from the batch keep their value.
pub fn calibrate_priors(models: &mut Models, batch: &[&FrameTriplet]) -> Result<()> {
    let cats = models.priors.num_categories();
    let mut sum = vec![0.0; cats];
    let mut count = vec![0usize; cats];
    for t in batch {
        let depth = predict_depth(models, t)?;
        for k in 1..=t.masks.num_instances() {
            let mask = t.masks.instance(1, k as u8);
            let area: f64 = mask.iter().sum();
            let cat = t.masks.categories[k - 1];
            if area == 0.0 || cat >= cats {
                continue;
            }
            let mean = depth.iter().zip(&mask).map(|(d, m)| d * m).sum::<f64>() / area;
            sum[cat] += mean * mask_height(&mask, t.width) as f64 / t.intrinsics.fy;
            count[cat] += 1;
        }
    }
    let values = models.priors.values.values_mut();
    for j in 0..cats {
        if count[j] > 0 {
            values[j] = sum[j] / count[j] as f64;
        }
    }
    models.priors.project_positive();
    Ok(())
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub losses: LossBreakdown,
}

/// Trains from the seed's initialization for `config.steps` steps. Batches
/// are drawn from a seeded shuffle of the dataset, epoch by epoch.
pub fn train(dataset: &[FrameTriplet], config: &TrainConfig) -> Result<(Models, Vec<CurveRow>)> {
    train_with_progress(dataset, config, |_| {})
}

pub fn train_with_progress(
    dataset: &[FrameTriplet],
    config: &TrainConfig,
    mut progress: impl FnMut(&CurveRow),
) -> Result<(Models, Vec<CurveRow>)> {
    if dataset.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&dataset[order.pop().expect("refilled")]);
        }
        let losses = trainer.step(&batch)?;
        let row = CurveRow { step, losses };
        progress(&row);
        curve.push(row);
    }
    Ok((trainer.models, curve))
}

pub const CURVE_HEADER: &str = "step,L_rec,L_ssim,L_sm,L_sc,total";

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.losses;
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e}\n",
            r.step, l.reconstruction, l.ssim, l.smoothness, l.size_constraint, l.total
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Depth of the middle frame at full resolution.
pub fn predict_depth(models: &Models, triplet: &FrameTriplet) -> Result<Vec<f64>> {
    predict_depth_image(models, &triplet.frames[1], triplet.height, triplet.width)
}

pub fn predict_depth_image(models: &Models, image: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let vars = models.depth.params.bind(&tape);
    let img = tape.constant(&[3, h, w], image.to_vec());
    Ok(DepthNet::forward(&vars, img)?[0].value().to_vec())
}

/// Predicted `(E_12, E_23)`; in motion mode the input is masked like in
/// training.
pub fn predict_ego(models: &Models, triplet: &FrameTriplet, mode: Mode) -> Result<(SE3Params, SE3Params)> {
    let tape = Tape::new();
    let vars = models.ego.params.bind(&tape);
    let (h, w) = (triplet.height, triplet.width);
    let frames = triplet.frames.clone().map(|f| tape.constant(&[3, h, w], f));
    let m = &triplet.masks;
    let v = match mode {
        Mode::Baseline => vec![1.0; h * w],
        Mode::Motion => ego_input_mask(&m.frames[0], &m.frames[1], &m.frames[2]),
    };
    let (a, b) = estimate_ego(frames, &v, &ego_net(&vars))?;
    Ok((SE3Params::from_slice(&a.value())?, SE3Params::from_slice(&b.value())?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    /// Optimization steps per window.
    pub steps: usize,
    pub learning_rate: f64,
    /// Keep refined weights from window to window within a sequence.
    pub carry_over: bool,
    /// Add the mirrored window to every refinement step.
    pub flip: bool,
    /// Windows whose mean inter-frame difference is below this are not
    /// refined (the camera is considered static).
    pub static_threshold: f64,
    pub mode: Mode,
    pub weights: LossWeights,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            learning_rate: 0.0002,
            carry_over: true,
            flip: true,
            static_threshold: 0.001,
            mode: Mode::Baseline,
            weights: LossWeights::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("refinement needs at least one step".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        self.weights.validate()
    }
}

/// Output for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedWindow {
    pub sequence: Option<(u64, usize)>,
    pub depth: Vec<f64>,
    pub unrefined_depth: Vec<f64>,
    pub ego: (SE3Params, SE3Params),
    pub unrefined_ego: (SE3Params, SE3Params),
    /// Refinement was skipped by the static-camera guard.
    pub skipped: bool,
}

/// Mean absolute difference of the middle frame to its neighbours.
pub fn motion_energy(t: &FrameTriplet) -> f64 {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    0.5 * (d(&t.frames[0], &t.frames[1]) + d(&t.frames[2], &t.frames[1]))
}

/// Splits a frame sequence into overlapping triplets.
pub fn windows_from_frames(
    frames: &[Vec<f64>],
    height: usize,
    width: usize,
    k: Intrinsics,
    sequence_id: u64,
) -> Result<Vec<FrameTriplet>> {
    if frames.len() < 3 {
        return Err(Error::Invalid(format!("sequence of {} frames is shorter than 3", frames.len())));
    }
    Ok((1..frames.len() - 1)
        .map(|mid| FrameTriplet {
            height,
            width,
            frames: [frames[mid - 1].clone(), frames[mid].clone(), frames[mid + 1].clone()],
            masks: InstanceMasks::empty(height, width),
            intrinsics: k,
            sequence: Some((sequence_id, mid)),
        })
        .collect())
}

/// Runs inference with online refinement over consecutive windows.
///
/// Each window is optimized for `steps` steps starting from the previous
/// window's refined weights; weights and optimizer state reset whenever the
/// sequence id changes. The emitted depth is predicted after refining.
pub fn online_refine(windows: &[FrameTriplet], checkpoint: &Models, config: &RefineConfig) -> Result<Vec<RefinedWindow>> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::Invalid("online refinement needs at least one 3-frame window".into()));
    }
    let train_cfg = TrainConfig {
        learning_rate: config.learning_rate,
        weights: config.weights,
        batch_size: if config.flip { 2 } else { 1 },
        steps: config.steps,
        seed: 0,
        mode: config.mode,
        num_categories: checkpoint.priors.num_categories(),
        calibrate_priors: false,
    };
    let mut trainer = Trainer::with_models(checkpoint.clone(), train_cfg.clone());
    let mut current_seq: Option<u64> = None;
    let mut out = Vec::with_capacity(windows.len());
    for win in windows {
        let seq = win.sequence.map(|s| s.0);
        let boundary = current_seq.is_none() || seq != current_seq || seq.is_none();
        if boundary || !config.carry_over {
            trainer = Trainer::with_models(checkpoint.clone(), train_cfg.clone());
        }
        current_seq = seq;
        let skipped = motion_energy(win) < config.static_threshold;
        if !skipped {
            let flipped = win.flipped();
            let batch: Vec<&FrameTriplet> = if config.flip { vec![win, &flipped] } else { vec![win] };
            for _ in 0..config.steps {
                trainer.step(&batch)?;
            }
        } else {
            log::info!("window {:?} looks static; refinement skipped", win.sequence);
        }
        out.push(RefinedWindow {
            sequence: win.sequence,
            depth: predict_depth(&trainer.models, win)?,
            unrefined_depth: predict_depth(checkpoint, win)?,
            ego: predict_ego(&trainer.models, win, config.mode)?,
            unrefined_ego: predict_ego(checkpoint, win, config.mode)?,
            skipped,
        });
    }
    Ok(out)
}
