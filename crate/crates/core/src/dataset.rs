//! On-disk triplet layout: PNG frames and instance masks, PFM depth,
//! `poses.txt`, `intrinsics.txt` and a manifest listing every triplet.
//!
//! ```text
//! <root>/manifest.txt
//! <root>/<name>/frame_{1,2,3}.png   8-bit RGB
//! <root>/<name>/mask_{1,2,3}.png    8-bit instance index, 0 = background
//! <root>/<name>/depth_{1,2,3}.pfm   32-bit float, NaN = invalid
//! <root>/<name>/poses.txt
//! <root>/<name>/intrinsics.txt      9 numbers, row-major, one line
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, SE3Params};
use crate::motionmodel::InstanceMasks;
use crate::synthscenes::SceneSample;

pub const MANIFEST: &str = "manifest.txt";

/// Three aligned frames with masks and intrinsics; images are `(3,H,W)`
/// row-major in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTriplet {
    pub height: usize,
    pub width: usize,
    pub frames: [Vec<f64>; 3],
    pub masks: InstanceMasks,
    pub intrinsics: Intrinsics,
    /// `(sequence id, middle-frame index)` when the triplet is a window.
    pub sequence: Option<(u64, usize)>,
}

impl FrameTriplet {
    /// Left-right mirror of frames, masks and intrinsics.
    pub fn flipped(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let flip = |img: &Vec<f64>| -> Vec<f64> {
            let mut out = vec![0.0; img.len()];
            for row in 0..img.len() / w {
                for x in 0..w {
                    out[row * w + x] = img[row * w + w - 1 - x];
                }
            }
            out
        };
        debug_assert_eq!(self.frames[0].len(), 3 * h * w);
        Self {
            frames: [flip(&self.frames[0]), flip(&self.frames[1]), flip(&self.frames[2])],
            masks: self.masks.flipped(),
            intrinsics: self.intrinsics.flipped(w),
            ..self.clone()
        }
    }
}

/// Per-object ground truth as stored in `poses.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    pub instance: u8,
    pub category: usize,
    pub moves_with_camera: bool,
    /// Unknown motions are `None`.
    pub prev_to_mid: Option<SE3Params>,
    pub mid_to_next: Option<SE3Params>,
}

/// Optional ground truth of a triplet.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    /// Depth per frame; NaN marks invalid pixels.
    pub depths: Option<[Vec<f64>; 3]>,
    pub ego_prev: Option<SE3Params>,
    pub ego_next: Option<SE3Params>,
    pub objects: Vec<ObjectRecord>,
}

/// One triplet as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub seed: u64,
    pub preset: String,
    pub triplet: FrameTriplet,
    pub truth: GroundTruth,
}

impl From<&SceneSample> for FrameTriplet {
    fn from(s: &SceneSample) -> Self {
        Self {
            height: s.height,
            width: s.width,
            frames: s.frames.clone(),
            masks: s.masks.clone(),
            intrinsics: s.intrinsics,
            sequence: s.sequence,
        }
    }
}

impl From<&SceneSample> for GroundTruth {
    fn from(s: &SceneSample) -> Self {
        Self {
            depths: Some(s.depths.clone()),
            ego_prev: Some(s.ego_prev),
            ego_next: Some(s.ego_next),
            objects: s
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    instance: o.instance,
                    category: o.category,
                    moves_with_camera: o.moves_with_camera,
                    prev_to_mid: Some(o.motion),
                    mid_to_next: Some(o.motion),
                })
                .collect(),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png(path: &Path, chw: &[f64], h: usize, w: usize) -> Result<()> {
    let n = h * w;
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([quantize(chw[i]), quantize(chw[n + i]), quantize(chw[2 * n + i])])
    });
    img.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

pub fn read_rgb_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.into(), source: e })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut out = vec![0.0; 3 * n];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            out[c * n + i] = p[c] as f64 / 255.0;
        }
    }
    Ok((out, h, w))
}

pub fn write_gray_png(path: &Path, values: &[u8], h: usize, w: usize) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([values[y as usize * w + x as usize]]));
    img.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

pub fn read_gray_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::format(path, format!("expected 8-bit grayscale, got {:?}", img.color())));
    }
    let img = img.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw(), h, w))
}

/// Single-channel little-endian PFM, rows stored bottom to top.
pub fn write_pfm(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    let mut bytes = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for v in &values[y * w..(y + 1) * w] {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(Error::format(path, format!("expected single-channel PFM, got {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad PFM size {s}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale: f64 = fields[3].parse().map_err(|_| Error::format(path, "bad PFM scale"))?;
    if bytes.len() < pos + 4 * w * h {
        return Err(Error::format(path, "truncated PFM data"));
    }
    let mut out = vec![0.0; w * h];
    for (k, chunk) in bytes[pos..pos + 4 * w * h].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, x) = (k / w, k % w);
        out[(h - 1 - row) * w + x] = v as f64;
    }
    Ok((out, h, w))
}

fn fmt_params(p: Option<&SE3Params>) -> String {
    match p {
        Some(p) => p.to_array().iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" "),
        None => vec!["nan"; 6].join(" "),
    }
}

fn parse_params(path: &Path, tokens: &[&str]) -> Result<Option<SE3Params>> {
    let v = tokens
        .iter()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::format(path, format!("bad motion {tokens:?}")))?;
    if v.iter().all(|x| x.is_nan()) {
        return Ok(None);
    }
    SE3Params::from_slice(&v).map(Some)
}

/// `ego_prev`/`ego_next` lines with six numbers each, then one
/// `object <k> <category> <comoving 0|1> <12 numbers>` line per instance.
pub fn format_poses(t: &GroundTruth) -> String {
    let mut s = String::from("# tx ty tz rx ry rz; nan = unknown\n");
    writeln!(s, "ego_prev {}", fmt_params(t.ego_prev.as_ref())).expect("string write");
    writeln!(s, "ego_next {}", fmt_params(t.ego_next.as_ref())).expect("string write");
    for o in &t.objects {
        writeln!(
            s,
            "object {} {} {} {} {}",
            o.instance,
            o.category,
            u8::from(o.moves_with_camera),
            fmt_params(o.prev_to_mid.as_ref()),
            fmt_params(o.mid_to_next.as_ref())
        )
        .expect("string write");
    }
    s
}

pub fn parse_poses(path: &Path, text: &str) -> Result<GroundTruth> {
    let mut t = GroundTruth::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok[0] {
            "ego_prev" | "ego_next" if tok.len() == 7 => {
                let p = parse_params(path, &tok[1..])?;
                if tok[0] == "ego_prev" {
                    t.ego_prev = p;
                } else {
                    t.ego_next = p;
                }
            }
            "object" if tok.len() == 16 => {
                let bad = || Error::format(path, format!("bad object line {line:?}"));
                t.objects.push(ObjectRecord {
                    instance: tok[1].parse().map_err(|_| bad())?,
                    category: tok[2].parse().map_err(|_| bad())?,
                    moves_with_camera: tok[3] == "1",
                    prev_to_mid: parse_params(path, &tok[4..10])?,
                    mid_to_next: parse_params(path, &tok[10..16])?,
                });
            }
            _ => return Err(Error::format(path, format!("unrecognised line {line:?}"))),
        }
    }
    t.objects.sort_by_key(|o| o.instance);
    Ok(t)
}

/// Writes one triplet directory.
pub fn write_triplet(dir: &Path, triplet: &FrameTriplet, truth: &GroundTruth) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (triplet.height, triplet.width);
    for f in 0..3 {
        write_rgb_png(&dir.join(format!("frame_{}.png", f + 1)), &triplet.frames[f], h, w)?;
        write_gray_png(&dir.join(format!("mask_{}.png", f + 1)), &triplet.masks.frames[f], h, w)?;
    }
    if let Some(depths) = &truth.depths {
        for (f, d) in depths.iter().enumerate() {
            write_pfm(&dir.join(format!("depth_{}.pfm", f + 1)), d, h, w)?;
        }
    }
    let mut truth = truth.clone();
    // Categories must survive even when motions are unknown.
    for (k, &cat) in triplet.masks.categories.iter().enumerate() {
        let inst = (k + 1) as u8;
        if !truth.objects.iter().any(|o| o.instance == inst) {
            truth.objects.push(ObjectRecord {
                instance: inst,
                category: cat,
                moves_with_camera: false,
                prev_to_mid: None,
                mid_to_next: None,
            });
        }
    }
    truth.objects.sort_by_key(|o| o.instance);
    let poses = dir.join("poses.txt");
    fs::write(&poses, format_poses(&truth)).map_err(|e| Error::io(&poses, e))?;
    let intr = dir.join("intrinsics.txt");
    fs::write(&intr, triplet.intrinsics.to_line() + "\n").map_err(|e| Error::io(&intr, e))
}

/// Reads one triplet directory. Depth files are optional.
pub fn read_triplet(dir: &Path) -> Result<(FrameTriplet, GroundTruth)> {
    let mut frames = Vec::with_capacity(3);
    let mut maps = Vec::with_capacity(3);
    let mut size = None;
    for f in 1..=3 {
        let (img, h, w) = read_rgb_png(&dir.join(format!("frame_{f}.png")))?;
        let mpath = dir.join(format!("mask_{f}.png"));
        let (mask, mh, mw) = read_gray_png(&mpath)?;
        if *size.get_or_insert((h, w)) != (h, w) || (mh, mw) != (h, w) {
            return Err(Error::format(dir, "frames and masks differ in size"));
        }
        frames.push(img);
        maps.push(mask);
    }
    let (h, w) = size.expect("three frames");
    let intr_path = dir.join("intrinsics.txt");
    let text = fs::read_to_string(&intr_path).map_err(|e| Error::io(&intr_path, e))?;
    let intrinsics = Intrinsics::from_line(text.trim())?;
    let poses_path = dir.join("poses.txt");
    let mut truth = match fs::read_to_string(&poses_path) {
        Ok(text) => parse_poses(&poses_path, &text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => GroundTruth::default(),
        Err(e) => return Err(Error::io(&poses_path, e)),
    };
    let n_inst = maps.iter().flatten().copied().max().unwrap_or(0) as usize;
    let mut categories = vec![0usize; n_inst.max(truth.objects.len())];
    for o in &truth.objects {
        if o.instance == 0 || o.instance as usize > categories.len() {
            return Err(Error::format(&poses_path, format!("object index {} out of range", o.instance)));
        }
        categories[o.instance as usize - 1] = o.category;
    }
    let mut depths = Vec::with_capacity(3);
    for f in 1..=3 {
        let p = dir.join(format!("depth_{f}.pfm"));
        if p.exists() {
            let (d, dh, dw) = read_pfm(&p)?;
            if (dh, dw) != (h, w) {
                return Err(Error::format(&p, "depth size differs from frames"));
            }
            depths.push(d);
        }
    }
    truth.depths = match depths.len() {
        0 => None,
        3 => Some([depths[0].clone(), depths[1].clone(), depths[2].clone()]),
        _ => return Err(Error::format(dir, "depth must be given for all three frames or none")),
    };
    let [m1, m2, m3]: [Vec<u8>; 3] = maps.try_into().expect("three masks");
    let [f1, f2, f3]: [Vec<f64>; 3] = frames.try_into().expect("three frames");
    Ok((
        FrameTriplet {
            height: h,
            width: w,
            frames: [f1, f2, f3],
            masks: InstanceMasks::new(h, w, [m1, m2, m3], categories)?,
            intrinsics,
            sequence: None,
        },
        truth,
    ))
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub preset: String,
    pub sequence: Option<(u64, usize)>,
    /// Instances that move with the camera.
    pub comoving: Vec<u8>,
}

impl ManifestEntry {
    fn to_line(&self) -> String {
        let seq = self.sequence.map_or("-".to_string(), |(s, i)| format!("{s}:{i}"));
        let co = if self.comoving.is_empty() {
            "-".to_string()
        } else {
            self.comoving.iter().map(u8::to_string).collect::<Vec<_>>().join(",")
        };
        format!("{} seed={} preset={} sequence={seq} comoving={co}", self.name, self.seed, self.preset)
    }

    fn parse(path: &Path, line: &str) -> Result<Self> {
        let mut tok = line.split_whitespace();
        let name = tok.next().ok_or_else(|| Error::format(path, "empty manifest line"))?.to_string();
        let bad = |m: &str| Error::format(path, format!("{m} in manifest line {line:?}"));
        let mut e = ManifestEntry {
            name,
            seed: 0,
            preset: "unknown".into(),
            sequence: None,
            comoving: Vec::new(),
        };
        let mut seen_seed = false;
        for t in tok {
            let (k, v) = t.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            match k {
                "seed" => {
                    e.seed = v.parse().map_err(|_| bad("bad seed"))?;
                    seen_seed = true;
                }
                "preset" => e.preset = v.to_string(),
                "sequence" if v == "-" => {}
                "sequence" => {
                    let (s, i) = v.split_once(':').ok_or_else(|| bad("bad sequence"))?;
                    e.sequence = Some((s.parse().map_err(|_| bad("bad sequence"))?, i.parse().map_err(|_| bad("bad sequence"))?));
                }
                "comoving" if v == "-" => {}
                "comoving" => {
                    e.comoving = v
                        .split(',')
                        .map(|x| x.parse::<u8>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("bad comoving list"))?;
                }
                _ => return Err(bad(&format!("unknown key {k}"))),
            }
        }
        if !seen_seed {
            return Err(bad("missing seed"));
        }
        Ok(e)
    }
}

pub fn write_manifest(root: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::from("# name seed=<u64> preset=<name> sequence=<id:index|-> comoving=<instances|->\n");
    for e in entries {
        s.push_str(&e.to_line());
        s.push('\n');
    }
    let p = root.join(MANIFEST);
    fs::write(&p, s).map_err(|e| Error::io(&p, e))
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let p = root.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| ManifestEntry::parse(&p, l))
        .collect()
}

/// Writes samples under `root` as `triplet_<index>` plus the manifest.
pub fn write_dataset(root: &Path, samples: &[(SceneSample, String)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    let mut dirs = Vec::with_capacity(samples.len());
    for (i, (s, preset)) in samples.iter().enumerate() {
        let name = format!("triplet_{i:05}");
        let dir = root.join(&name);
        write_triplet(&dir, &FrameTriplet::from(s), &GroundTruth::from(s))?;
        entries.push(ManifestEntry {
            name,
            seed: s.seed,
            preset: preset.clone(),
            sequence: s.sequence,
            comoving: s.objects.iter().filter(|o| o.moves_with_camera).map(|o| o.instance).collect(),
        });
        dirs.push(dir);
    }
    write_manifest(root, &entries)?;
    Ok(dirs)
}

/// Reads every triplet listed in the manifest, in manifest order.
pub fn load_dataset(root: &Path) -> Result<Vec<Entry>> {
    let manifest = read_manifest(root)?;
    if manifest.is_empty() {
        return Err(Error::format(root.join(MANIFEST), "dataset lists no triplets"));
    }
    manifest
        .into_iter()
        .map(|m| {
            let (mut triplet, truth) = read_triplet(&root.join(&m.name))?;
            triplet.sequence = m.sequence;
            Ok(Entry {
                name: m.name,
                seed: m.seed,
                preset: m.preset,
                triplet,
                truth,
            })
        })
        .collect()
}
