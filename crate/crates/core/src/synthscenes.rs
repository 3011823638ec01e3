//! Ray-cast synthetic triplets and sequences with exact depth, ego-motion,
//! object motion and instance masks.
//!
//! The world is a textured ground plane, a back wall, optional static
//! billboards and optional moving rectangular objects standing on the
//! ground. Textures are sums of sinusoids evaluated with a Gaussian
//! prefilter, so rendered frames are band-limited and bilinear resampling
//! reproduces them closely.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{invert, Intrinsics, Pose4x4, SE3Params};
use crate::motionmodel::InstanceMasks;

/// Heights of the object categories, in scene units.
pub const CATEGORY_HEIGHTS: [f64; 2] = [1.5, 1.0];
/// Width of the Gaussian pixel prefilter.
const PREFILTER_SIGMA: f64 = 1.0;
const MAX_RETRIES: u64 = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub camera_height: f64,
    /// Range of the back wall's distance.
    pub wall_depth: (f64, f64),
    /// Static billboards per scene (inclusive range).
    pub billboards: (usize, usize),
    /// Forward camera speed per frame.
    pub forward: (f64, f64),
    /// Bound on sideways and vertical camera motion per frame.
    pub lateral: f64,
    /// Bound on each rotation angle per frame, radians.
    pub max_rotation: f64,
    /// Texture amplitude: four standard deviations, in (0, 1].
    pub contrast: f64,
    /// Texture wavelength range, scene units.
    pub wavelength: (f64, f64),
    pub num_waves: usize,
    /// Mean brightness of surfaces.
    pub brightness: f64,
    /// Moving objects per scene (inclusive range); zero for rigid scenes.
    pub objects: (usize, usize),
    /// Bound on each object's speed per frame.
    pub object_speed: f64,
    /// Range of object distances.
    pub object_depth: (f64, f64),
    /// Makes the first object move with the camera and parks the others.
    pub degenerate: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 416,
            camera_height: 1.0,
            wall_depth: (8.0, 15.0),
            billboards: (0, 2),
            forward: (0.2, 0.5),
            lateral: 0.05,
            max_rotation: 0.01,
            contrast: 0.8,
            wavelength: (0.3, 4.0),
            num_waves: 12,
            brightness: 0.5,
            objects: (0, 0),
            object_speed: 0.3,
            object_depth: (3.0, 7.0),
            degenerate: false,
        }
    }
}

impl SceneConfig {
    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    /// Scenes with 1 to 3 moving objects.
    pub fn dynamic() -> Self {
        Self {
            objects: (1, 3),
            ..Self::default()
        }
    }

    /// The first object moves with the camera and therefore shows no
    /// apparent motion; the others are parked. Camera rotation is disabled
    /// so the co-motion is exact.
    pub fn degenerate() -> Self {
        Self {
            objects: (2, 3),
            max_rotation: 0.0,
            degenerate: true,
            ..Self::default()
        }
    }

    /// Different texture statistics, a taller camera and a deeper world.
    pub fn shifted(self) -> Self {
        Self {
            wall_depth: (12.0, 20.0),
            object_depth: (4.0, 10.0),
            camera_height: 1.5,
            contrast: 0.5,
            wavelength: (0.4, 3.0),
            brightness: 0.42,
            forward: (0.2, 0.45),
            ..self
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = self.width as f64 / 2.0;
        Intrinsics::new(
            f,
            f,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
        .expect("positive focal length")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("scene size {}x{} is too small", self.height, self.width));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return bad(format!("texture contrast must be in (0,1], got {}", self.contrast));
        }
        if !(self.brightness - self.contrast / 2.0 >= 0.0 && self.brightness + self.contrast / 2.0 <= 1.0) {
            return bad(format!(
                "brightness {} with contrast {} leaves [0,1]",
                self.brightness, self.contrast
            ));
        }
        if !(self.wall_depth.0 >= 5.0 && self.wall_depth.0 <= self.wall_depth.1 && self.wall_depth.1 <= 45.0) {
            return bad(format!("wall depth range {:?} outside [5,45]", self.wall_depth));
        }
        if !(self.camera_height > 0.2 && self.camera_height <= 3.0) {
            return bad(format!("camera height {} outside (0.2,3]", self.camera_height));
        }
        if !(self.wavelength.0 > 0.0 && self.wavelength.0 <= self.wavelength.1) || self.num_waves == 0 {
            return bad(format!("bad texture band {:?} x {}", self.wavelength, self.num_waves));
        }
        if self.billboards.0 > self.billboards.1 || self.objects.0 > self.objects.1 || self.objects.1 > 3 {
            return bad("bad billboard or object count range".into());
        }
        if self.degenerate && self.objects.0 == 0 {
            return bad("degenerate preset needs at least one object".into());
        }
        let motions = [self.forward.0, self.forward.1, self.lateral, self.max_rotation, self.object_speed];
        if motions.iter().any(|m| !(m.is_finite() && *m >= 0.0)) || self.forward.0 > self.forward.1 {
            return bad("motion bounds must be finite and non-negative".into());
        }
        if self.forward.1 > 1.0 || self.lateral > 0.3 || self.max_rotation > 0.05 {
            return bad("motion bounds too large to keep the scene in view".into());
        }
        if !(self.object_depth.0 >= 3.0 && self.object_depth.0 <= self.object_depth.1 && self.object_depth.1 < self.wall_depth.0) {
            return bad(format!("object depth range {:?} must lie in [3, wall)", self.object_depth));
        }
        Ok(())
    }
}

/// Sum of prefiltered sinusoids in texture coordinates.
#[derive(Debug, Clone)]
struct Texture {
    waves: Vec<(Vector2<f64>, f64, [f64; 3])>,
    mean: [f64; 3],
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Self {
        let (lo, hi) = (cfg.wavelength.0.ln(), cfg.wavelength.1.ln());
        let mut waves = Vec::with_capacity(cfg.num_waves);
        for _ in 0..cfg.num_waves {
            let lambda = if hi > lo { rng.random_range(lo..hi).exp() } else { lo.exp() };
            let angle = rng.random_range(0.0..PI);
            let k = Vector2::new(angle.cos(), angle.sin()) / lambda;
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
            waves.push((k, phase, amp));
        }
        // Unattenuated standard deviation of contrast/4 per channel.
        for c in 0..3 {
            let power: f64 = waves.iter().map(|w| w.2[c] * w.2[c] / 2.0).sum();
            for w in &mut waves {
                w.2[c] *= cfg.contrast / 4.0 / power.sqrt();
            }
        }
        let tint = cfg.brightness.min(1.0 - cfg.brightness) - cfg.contrast / 2.0;
        let mean = [0, 1, 2].map(|_| cfg.brightness + rng.random_range(-1.0..=1.0) * tint * 0.5);
        Self { waves, mean }
    }

    /// Object paint: half the scenery contrast around a freely chosen colour.
    fn paint(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Self {
        let half = SceneConfig {
            contrast: cfg.contrast / 2.0,
            ..cfg.clone()
        };
        let mut t = Self::random(rng, &half);
        let margin = half.contrast / 2.0;
        t.mean = [0, 1, 2].map(|_| rng.random_range(margin..=1.0 - margin));
        t
    }

    /// Colour at `uv`; `jac` maps pixel steps to texture-coordinate steps.
    fn sample(&self, uv: Vector2<f64>, jac: &Matrix2<f64>) -> [f64; 3] {
        let mut out = self.mean;
        for (k, phase, amp) in &self.waves {
            let nu = jac.transpose() * k;
            let att = (-2.0 * PI * PI * PREFILTER_SIGMA * PREFILTER_SIGMA * nu.norm_squared()).exp();
            let s = (2.0 * PI * k.dot(&uv) + phase).sin() * att;
            for c in 0..3 {
                out[c] += amp[c] * s;
            }
        }
        out.map(|v| v.clamp(0.0, 1.0))
    }
}

/// An upright textured rectangle standing on the ground.
#[derive(Debug, Clone)]
struct Rect {
    /// Centre of the bottom edge at time 0, world coordinates.
    base: Vector3<f64>,
    width: f64,
    height: f64,
    /// Per-frame displacement.
    velocity: Vector3<f64>,
    texture: Texture,
    /// 1-based instance index, 0 for static scenery.
    instance: u8,
}

impl Rect {
    fn at(&self, time: f64) -> Vector3<f64> {
        self.base + self.velocity * time
    }
}

#[derive(Debug, Clone)]
struct World {
    camera_height: f64,
    wall_z: f64,
    ground: Texture,
    wall: Texture,
    rects: Vec<Rect>,
}

/// Which surface a ray hit.
#[derive(Clone, Copy)]
enum Surface {
    Ground,
    Wall,
    Rect(usize),
}

struct Hit {
    depth: f64,
    surface: Surface,
}

impl World {
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, time: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, surface: Surface| {
            if t > 1e-6 && best.as_ref().is_none_or(|b| t < b.depth) {
                best = Some(Hit { depth: t, surface });
            }
        };
        if dir.y > 1e-12 {
            consider((self.camera_height - origin.y) / dir.y, Surface::Ground);
        }
        if dir.z > 1e-12 {
            consider((self.wall_z - origin.z) / dir.z, Surface::Wall);
        }
        for (i, r) in self.rects.iter().enumerate() {
            if dir.z <= 1e-12 {
                continue;
            }
            let b = r.at(time);
            let t = (b.z - origin.z) / dir.z;
            let p = origin + dir * t;
            if (p.x - b.x).abs() <= r.width / 2.0 && p.y <= b.y && p.y >= b.y - r.height {
                consider(t, Surface::Rect(i));
            }
        }
        best
    }

    /// Texture coordinates of a ray on a given surface (no bounds check).
    fn uv(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, surface: Surface, time: f64) -> Vector2<f64> {
        match surface {
            Surface::Ground => {
                let p = origin + dir * ((self.camera_height - origin.y) / dir.y);
                Vector2::new(p.x, p.z)
            }
            Surface::Wall => {
                let p = origin + dir * ((self.wall_z - origin.z) / dir.z);
                Vector2::new(p.x, p.y)
            }
            Surface::Rect(i) => {
                let b = self.rects[i].at(time);
                let p = origin + dir * ((b.z - origin.z) / dir.z);
                Vector2::new(p.x - b.x, p.y - b.y)
            }
        }
    }

    fn texture(&self, surface: Surface) -> &Texture {
        match surface {
            Surface::Ground => &self.ground,
            Surface::Wall => &self.wall,
            Surface::Rect(i) => &self.rects[i].texture,
        }
    }

    /// Renders the view of a camera with pose `cam_to_world` at `time`:
    /// `(rgb CHW, depth, instance map)`.
    fn render(&self, cam_to_world: &Pose4x4, k: &Intrinsics, h: usize, w: usize, time: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<u8>)> {
        let rot = cam_to_world.rotation();
        let origin = cam_to_world.translation();
        let ray = |x: f64, y: f64| rot * Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
        let n = h * w;
        let mut rgb = vec![0.0; 3 * n];
        let mut depth = vec![0.0; n];
        let mut inst = vec![0u8; n];
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let dir = ray(xf, yf);
                let hit = self.intersect(&origin, &dir, time).ok_or_else(|| {
                    Error::Invalid(format!("ray through pixel ({x},{y}) hits nothing"))
                })?;
                let uv = self.uv(&origin, &dir, hit.surface, time);
                let du = self.uv(&origin, &ray(xf + 1.0, yf), hit.surface, time) - uv;
                let dv = self.uv(&origin, &ray(xf, yf + 1.0), hit.surface, time) - uv;
                let jac = Matrix2::from_columns(&[du, dv]);
                let c = self.texture(hit.surface).sample(uv, &jac);
                let i = y * w + x;
                for ch in 0..3 {
                    rgb[ch * n + i] = c[ch];
                }
                depth[i] = hit.depth;
                if let Surface::Rect(r) = hit.surface {
                    inst[i] = self.rects[r].instance;
                }
            }
        }
        Ok((rgb, depth, inst))
    }
}

/// Ground truth for one moving object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTruth {
    /// 1-based instance index in the masks.
    pub instance: u8,
    pub category: usize,
    /// Per-frame displacement in frame-2 camera coordinates.
    pub velocity: [f64; 3],
    /// Motion in the model's convention: maps the object's frame-2 points
    /// to its frame-1 position (and frame-3 points to frame-2 positions).
    pub motion: SE3Params,
    /// No apparent motion: the object moves with the camera.
    pub moves_with_camera: bool,
}

/// A rendered triplet with exact ground truth. Images are `(3,H,W)`
/// row-major in [0,1]; depths are `(H,W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub height: usize,
    pub width: usize,
    pub frames: [Vec<f64>; 3],
    pub depths: [Vec<f64>; 3],
    pub masks: InstanceMasks,
    /// `E_12`: maps frame-2 camera points into the frame-1 camera.
    pub ego_prev: SE3Params,
    /// `E_23`: maps frame-3 camera points into the frame-2 camera.
    pub ego_next: SE3Params,
    pub objects: Vec<ObjectTruth>,
    pub intrinsics: Intrinsics,
    pub seed: u64,
    /// `(sequence id, index of the middle frame)` for sequence windows.
    pub sequence: Option<(u64, usize)>,
}

fn random_step(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> SE3Params {
    let fwd = if cfg.forward.1 > cfg.forward.0 {
        rng.random_range(cfg.forward.0..cfg.forward.1)
    } else {
        cfg.forward.0
    };
    let mut sym = |b: f64| if b > 0.0 { rng.random_range(-b..b) } else { 0.0 };
    let t = [sym(cfg.lateral), sym(cfg.lateral) * 0.5, fwd];
    let r = [sym(cfg.max_rotation), sym(cfg.max_rotation), sym(cfg.max_rotation) * 0.5];
    SE3Params::new(t, r)
}

fn build_world(rng: &mut ChaCha8Rng, cfg: &SceneConfig, camera_velocity: Vector3<f64>) -> Result<(World, Vec<ObjectTruth>)> {
    let wall_z = if cfg.wall_depth.1 > cfg.wall_depth.0 {
        rng.random_range(cfg.wall_depth.0..cfg.wall_depth.1)
    } else {
        cfg.wall_depth.0
    };
    let ground = Texture::random(rng, cfg);
    let wall = Texture::random(rng, cfg);
    let k = cfg.intrinsics();
    let half_fov = (cfg.width as f64 / 2.0) / k.fx;
    let mut rects = Vec::new();
    let n_board = rng.random_range(cfg.billboards.0..=cfg.billboards.1);
    for _ in 0..n_board {
        let z = rng.random_range(cfg.object_depth.1..(cfg.object_depth.1 + wall_z) / 2.0);
        let x = rng.random_range(-0.8..0.8) * half_fov * z;
        rects.push(Rect {
            base: Vector3::new(x, cfg.camera_height, z),
            width: rng.random_range(2.0..6.0),
            height: rng.random_range(2.0..5.0),
            velocity: Vector3::zeros(),
            texture: Texture::random(rng, cfg),
            instance: 0,
        });
    }
    let n_obj = rng.random_range(cfg.objects.0..=cfg.objects.1);
    let mut truths = Vec::new();
    for i in 0..n_obj {
        let category = rng.random_range(0..CATEGORY_HEIGHTS.len());
        let (near, far) = cfg.object_depth;
        let z = if far > near { rng.random_range(near..far) } else { near };
        let degenerate = cfg.degenerate && i == 0;
        // the co-moving object drives ahead in the camera's lane, parked
        // ones stay beside it
        let offset = if degenerate {
            rng.random_range(-0.15..0.15)
        } else if cfg.degenerate {
            rng.random_range(0.35..0.65) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
        } else {
            rng.random_range(-0.6..0.6)
        };
        let x = offset * half_fov * z;
        let width = rng.random_range(1.0..2.5);
        let velocity = if degenerate {
            camera_velocity
        } else if cfg.degenerate {
            Vector3::zeros()
        } else {
            let s = cfg.object_speed;
            let mut sym = || if s > 0.0 { rng.random_range(-s..s) } else { 0.0 };
            Vector3::new(sym(), 0.0, sym())
        };
        rects.push(Rect {
            base: Vector3::new(x, cfg.camera_height, z),
            width,
            height: CATEGORY_HEIGHTS[category],
            velocity,
            texture: Texture::paint(rng, cfg),
            instance: (i + 1) as u8,
        });
        truths.push(ObjectTruth {
            instance: (i + 1) as u8,
            category,
            velocity: [velocity.x, velocity.y, velocity.z],
            motion: SE3Params::translation_only([-velocity.x, -velocity.y, -velocity.z]),
            moves_with_camera: degenerate,
        });
    }
    Ok((
        World {
            camera_height: cfg.camera_height,
            wall_z,
            ground,
            wall,
            rects,
        },
        truths,
    ))
}

/// Image-space bounding boxes of the objects at time 0 must not touch.
fn objects_overlap(world: &World, k: &Intrinsics) -> bool {
    let boxes: Vec<[f64; 4]> = world
        .rects
        .iter()
        .filter(|r| r.instance > 0)
        .map(|r| {
            let (x0, x1) = (r.base.x - r.width / 2.0, r.base.x + r.width / 2.0);
            let (y0, y1) = (r.base.y - r.height, r.base.y);
            let z = r.base.z;
            [k.fx * x0 / z + k.cx, k.fx * x1 / z + k.cx, k.fy * y0 / z + k.cy, k.fy * y1 / z + k.cy]
        })
        .collect();
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            let (a, b) = (boxes[i], boxes[j]);
            if a[0] - 1.0 <= b[1] && b[0] - 1.0 <= a[1] && a[2] - 1.0 <= b[3] && b[2] - 1.0 <= a[3] {
                return true;
            }
        }
    }
    false
}

fn categories_of(truths: &[ObjectTruth]) -> Vec<usize> {
    truths.iter().map(|t| t.category).collect()
}

fn generate_once(seed: u64, attempt: u64, cfg: &SceneConfig) -> Result<Option<SceneSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt);
    let ego_prev = random_step(&mut rng, cfg);
    // Co-motion with the camera is exact only for equal steps.
    let ego_next = if cfg.degenerate { ego_prev } else { random_step(&mut rng, cfg) };
    let (h, w) = (cfg.height, cfg.width);
    let k = cfg.intrinsics();
    // Camera 2 is the world frame; camera 1 sits at inv(E_12), camera 3 at E_23.
    let pose1 = invert(&ego_prev.to_matrix()?)?;
    let pose3 = ego_next.to_matrix()?;
    let (world, truths) = build_world(&mut rng, cfg, pose3.translation())?;
    if objects_overlap(&world, &k) {
        return Ok(None);
    }
    let (f1, d1, m1) = world.render(&pose1, &k, h, w, -1.0)?;
    let (f2, d2, m2) = world.render(&Pose4x4::identity(), &k, h, w, 0.0)?;
    let (f3, d3, m3) = world.render(&pose3, &k, h, w, 1.0)?;
    let masks = InstanceMasks::new(h, w, [m1, m2, m3], categories_of(&truths))?;
    Ok(Some(SceneSample {
        height: h,
        width: w,
        frames: [f1, f2, f3],
        depths: [d1, d2, d3],
        masks,
        ego_prev,
        ego_next,
        objects: truths,
        intrinsics: k,
        seed,
        sequence: None,
    }))
}

fn generate_with_retries(seed: u64, cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    for attempt in 0..MAX_RETRIES {
        if let Some(s) = generate_once(seed, attempt, cfg)? {
            return Ok(s);
        }
    }
    Err(Error::Invalid(format!(
        "no non-overlapping object layout within {MAX_RETRIES} attempts for seed {seed}"
    )))
}

/// A static textured scene seen by a moving camera; no objects.
pub fn generate_rigid(seed: u64, cfg: &SceneConfig) -> Result<SceneSample> {
    let cfg = SceneConfig {
        objects: (0, 0),
        degenerate: false,
        ..cfg.clone()
    };
    generate_with_retries(seed, &cfg)
}

/// A scene with moving objects. When the layout overlaps, generation is
/// retried on the next random stream of the same seed.
pub fn generate_dynamic(seed: u64, cfg: &SceneConfig) -> Result<SceneSample> {
    if cfg.objects.1 == 0 {
        return Err(Error::Config("dynamic scenes need at least one object".into()));
    }
    let cfg = SceneConfig {
        objects: (cfg.objects.0.max(1), cfg.objects.1),
        ..cfg.clone()
    };
    generate_with_retries(seed, &cfg)
}

/// Rendered frames of a rigid scene seen by a camera moving with a constant
/// per-frame step.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<f64>>,
    pub depths: Vec<Vec<f64>>,
    /// Camera-to-world pose of every frame (frame 0 is the identity).
    pub poses: Vec<Pose4x4>,
    /// The constant step, in the `E` convention.
    pub step: SE3Params,
    pub intrinsics: Intrinsics,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Triplet centred on frame `mid` (1 <= mid < len-1).
    pub fn window(&self, mid: usize) -> Result<SceneSample> {
        if mid == 0 || mid + 1 >= self.len() {
            return Err(Error::Invalid(format!(
                "window centre {mid} needs neighbours in a sequence of {}",
                self.len()
            )));
        }
        let (h, w) = (self.height, self.width);
        let blank = vec![0u8; h * w];
        Ok(SceneSample {
            height: h,
            width: w,
            frames: [self.frames[mid - 1].clone(), self.frames[mid].clone(), self.frames[mid + 1].clone()],
            depths: [self.depths[mid - 1].clone(), self.depths[mid].clone(), self.depths[mid + 1].clone()],
            masks: InstanceMasks::new(h, w, [blank.clone(), blank.clone(), blank], Vec::new())?,
            ego_prev: self.step,
            ego_next: self.step,
            objects: Vec::new(),
            intrinsics: self.intrinsics,
            seed: self.id,
            sequence: Some((self.id, mid)),
        })
    }
}

/// `len` frames of one rigid world; consecutive frames differ by a fixed
/// random step.
pub fn generate_sequence(seed: u64, cfg: &SceneConfig, len: usize) -> Result<Sequence> {
    cfg.validate()?;
    if len < 3 {
        return Err(Error::Invalid(format!("sequence needs at least 3 frames, got {len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = random_step(&mut rng, cfg);
    let cfg_rigid = SceneConfig {
        objects: (0, 0),
        degenerate: false,
        ..cfg.clone()
    };
    let (world, _) = build_world(&mut rng, &cfg_rigid, Vector3::zeros())?;
    let travel = step.translation[2] * (len - 1) as f64;
    let nearest = world.rects.iter().map(|r| r.base.z).fold(world.wall_z, f64::min);
    if nearest - travel < 2.0 {
        return Err(Error::Config(format!(
            "a {len}-frame sequence travels {travel:.2}, too close to a surface at {nearest:.2}"
        )));
    }
    let k = cfg.intrinsics();
    let step_m = step.to_matrix()?;
    let mut pose = Pose4x4::identity();
    let (mut frames, mut depths, mut poses) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..len {
        let (f, d, _) = world.render(&pose, &k, cfg.height, cfg.width, i as f64)?;
        frames.push(f);
        depths.push(d);
        poses.push(pose);
        pose = pose.compose(&step_m);
    }
    Ok(Sequence {
        id: seed,
        height: cfg.height,
        width: cfg.width,
        frames,
        depths,
        poses,
        step,
        intrinsics: k,
    })
}
