//! Depth and motion networks, their parameter sets and checkpoints.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{concat, conv2d, Padding, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::HeightPriors;

/// Depth = 1 / (DEPTH_SCALE * sigmoid(x) + DEPTH_OFFSET).
pub const DEPTH_SCALE: f64 = 10.0;
pub const DEPTH_OFFSET: f64 = 0.01;
/// Raw motion outputs are multiplied by these.
pub const TRANSLATION_SCALE: f64 = 0.01;
pub const ROTATION_SCALE: f64 = 0.01;

const ENCODER: [usize; 4] = [16, 32, 64, 128];
const DECODER: [usize; 4] = [64, 32, 16, 16];
/// Initial head bias; gives depth close to 1 before training.
const HEAD_BIAS: f64 = -2.2;

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    fn add_conv(&mut self, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, gain: f64) {
        let fan_in = (cin * 9) as f64;
        let limit = gain * (6.0 / fan_in).sqrt();
        let w: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random_range(-limit..limit)).collect();
        self.push(format!("{name}.weight"), Tensor::new(&[cout, cin, 3, 3], w).expect("sizes"));
        self.push(format!("{name}.bias"), Tensor::zeros(&[cout, 1, 1]));
    }
}

fn conv_relu<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, stride: usize) -> Result<Var<'t>> {
    Ok((conv2d(x, w, stride, Padding::Same)? + b).relu())
}

fn crop_to<'t>(x: Var<'t>, h: usize, w: usize) -> Var<'t> {
    let s = x.shape();
    let x = if s[2] > h { x.narrow(2, 0, h) } else { x };
    if s[3] > w {
        x.narrow(3, 0, w)
    } else {
        x
    }
}

fn encoder_params(p: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, cin: usize) {
    let mut c = cin;
    for (i, &o) in ENCODER.iter().enumerate() {
        p.add_conv(rng, &format!("{prefix}.enc{}", i + 1), c, o, 1.0);
        c = o;
    }
}

/// Returns the four encoder activations, finest first.
fn encode<'t>(x: Var<'t>, vars: &mut impl Iterator<Item = Var<'t>>) -> Result<Vec<Var<'t>>> {
    let mut feats = Vec::with_capacity(4);
    let mut h = x;
    for _ in 0..4 {
        let (w, b) = (vars.next().expect("weight"), vars.next().expect("bias"));
        h = conv_relu(h, w, b, 2)?;
        feats.push(h);
    }
    Ok(feats)
}

/// Encoder-decoder producing depth at four scales.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthNet {
    pub params: ParamSet,
}

impl DepthNet {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut p = ParamSet::new();
        encoder_params(&mut p, rng, "depth", 3);
        let skips = [ENCODER[2], ENCODER[1], ENCODER[0], 3];
        let mut c = ENCODER[3];
        for (i, (&o, &s)) in DECODER.iter().zip(&skips).enumerate() {
            let level = 3 - i;
            p.add_conv(rng, &format!("depth.dec{level}"), c + s, o, 1.0);
            p.add_conv(rng, &format!("depth.head{level}"), o, 1, 0.1);
            c = o;
        }
        for t in p.tensors_mut().filter(|t| t.shape() == [1, 1, 1]) {
            t.values_mut()[0] = HEAD_BIAS;
        }
        Self { params: p }
    }

    /// Depth maps `(H,W), (H/2,W/2), (H/4,W/4), (H/8,W/8)` for a `(3,H,W)` image.
    pub fn forward<'t>(vars: &[Var<'t>], image: Var<'t>) -> Result<[Var<'t>; 4]> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("depth net expects (3,H,W), got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "depth net input {h}x{w} must be divisible by 8"
            )));
        }
        let x = image.reshape(&[1, 3, h, w]);
        let mut it = vars.iter().copied();
        let feats = encode(x, &mut it)?;
        let skips = [feats[2], feats[1], feats[0], x];
        let mut d = feats[3];
        let mut out = Vec::with_capacity(4);
        for skip in skips {
            let ss = skip.shape();
            let up = crop_to(d.upsample2(), ss[2], ss[3]);
            let cat = concat(&[up, skip], 1)?;
            let (w, b) = (it.next().expect("weight"), it.next().expect("bias"));
            d = conv_relu(cat, w, b, 1)?;
            let (hw, hb) = (it.next().expect("weight"), it.next().expect("bias"));
            let logits = conv2d(d, hw, 1, Padding::Same)? + hb;
            let depth = logits
                .sigmoid()
                .scale(DEPTH_SCALE)
                .offset(DEPTH_OFFSET)
                .recip()
                .reshape(&[ss[2], ss[3]]);
            out.push(depth);
        }
        out.reverse();
        Ok([out[0], out[1], out[2], out[3]])
    }
}

/// Encoder with global pooling and a linear head emitting two 6-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionNet {
    pub params: ParamSet,
}

impl MotionNet {
    pub fn new(rng: &mut ChaCha8Rng, prefix: &str) -> Self {
        let mut p = ParamSet::new();
        encoder_params(&mut p, rng, prefix, 9);
        p.push(format!("{prefix}.head.weight"), Tensor::zeros(&[ENCODER[3], 12]));
        p.push(format!("{prefix}.head.bias"), Tensor::zeros(&[12]));
        Self { params: p }
    }

    /// `(M_12, M_23)` from a `(9,H,W)` stack of three frames.
    pub fn forward<'t>(vars: &[Var<'t>], stacked: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let s = stacked.shape();
        if s.len() != 3 || s[0] != 9 {
            return Err(Error::Shape(format!("motion net expects (9,H,W), got {s:?}")));
        }
        let x = stacked.reshape(&[1, 9, s[1], s[2]]);
        let mut it = vars.iter().copied();
        let feats = encode(x, &mut it)?;
        let pooled = feats[3].mean_axes(&[2, 3]).reshape(&[1, ENCODER[3]]);
        let (w, b) = (it.next().expect("weight"), it.next().expect("bias"));
        let raw = pooled.matmul(w).reshape(&[12]) + b;
        let scales: Vec<f64> = (0..12)
            .map(|i| if i % 6 < 3 { TRANSLATION_SCALE } else { ROTATION_SCALE })
            .collect();
        let out = raw * raw.tape().constant(&[12], scales);
        Ok((out.narrow(0, 0, 6), out.narrow(0, 6, 6)))
    }
}

/// Everything that is trained: depth net, ego-motion net, object-motion net
/// and the height priors.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub depth: DepthNet,
    pub ego: MotionNet,
    pub object: MotionNet,
    pub priors: HeightPriors,
}

/// Models bound to one tape.
#[derive(Debug, Clone)]
pub struct BoundModels<'t> {
    pub depth: Vec<Var<'t>>,
    pub ego: Vec<Var<'t>>,
    pub object: Vec<Var<'t>>,
    pub priors: Var<'t>,
}

impl BoundModels<'_> {
    /// Every conv and linear weight (biases and priors excluded).
    pub fn weights(&self) -> Vec<Var<'_>> {
        self.depth
            .iter()
            .chain(&self.ego)
            .chain(&self.object)
            .filter(|v| matches!(v.shape().len(), 2 | 4))
            .copied()
            .collect()
    }
}

impl Models {
    pub fn new(seed: u64, num_categories: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            depth: DepthNet::new(&mut rng),
            ego: MotionNet::new(&mut rng, "ego"),
            object: MotionNet::new(&mut rng, "object"),
            priors: HeightPriors::new(&vec![1.0; num_categories.max(1)])?,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModels<'t> {
        BoundModels {
            depth: self.depth.params.bind(tape),
            ego: self.ego.params.bind(tape),
            object: self.object.params.bind(tape),
            priors: tape.leaf(&self.priors.values),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.depth.params.count() + self.ego.params.count() + self.object.params.count() + self.priors.values.len()
    }

    /// All trainable tensors in checkpoint order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.depth.params.tensors_mut());
        out.extend(self.ego.params.tensors_mut());
        out.extend(self.object.params.tensors_mut());
        out.push(&mut self.priors.values);
        out
    }

    /// Names and tensors in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor)> {
        let mut out: Vec<(&str, &Tensor)> = Vec::new();
        out.extend(self.depth.params.iter());
        out.extend(self.ego.params.iter());
        out.extend(self.object.params.iter());
        out.push(("priors", &self.priors.values));
        out
    }

    pub fn clear_grads(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::clear_grad);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.named_tensors())
    }

    /// Loads a checkpoint written by [`Models::save`]; names and shapes must
    /// match the architecture.
    pub fn load(path: &Path) -> Result<Self> {
        let loaded = load_checkpoint(path)?;
        let categories = loaded
            .iter()
            .find(|(n, _)| n == "priors")
            .map(|(_, t)| t.len())
            .ok_or_else(|| Error::format(path, "checkpoint has no priors"))?;
        let mut models = Self::new(0, categories)?;
        let expected: Vec<(String, Vec<usize>)> = models
            .named_tensors()
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        if expected.len() != loaded.len() {
            return Err(Error::format(
                path,
                format!("expected {} tensors, found {}", expected.len(), loaded.len()),
            ));
        }
        for ((name, shape), (lname, lt)) in expected.iter().zip(&loaded) {
            if name != lname || shape.as_slice() != lt.shape() {
                return Err(Error::format(
                    path,
                    format!("tensor {lname} {:?} does not match {name} {shape:?}", lt.shape()),
                ));
            }
        }
        for (dst, (_, src)) in models.tensors_mut().into_iter().zip(loaded) {
            dst.values_mut().copy_from_slice(src.values());
        }
        Ok(models)
    }
}

const CHECKPOINT_MAGIC: &str = "depthmotion-checkpoint 1";

/// Text manifest (`name dims...` per line) followed by little-endian f64
/// values in manifest order.
pub fn save_checkpoint(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut header = String::new();
    writeln!(header, "{CHECKPOINT_MAGIC}").expect("string write");
    writeln!(header, "tensors {}", tensors.len()).expect("string write");
    for (name, t) in tensors {
        if name.contains(char::is_whitespace) || name.is_empty() {
            return Err(Error::Invalid(format!("bad tensor name {name:?}")));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(header, "{name} {}", dims.join(" ")).expect("string write");
    }
    writeln!(header, "data").expect("string write");
    let mut bytes = header.into_bytes();
    for (_, t) in tensors {
        for v in t.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut next_line = || -> Result<String> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "truncated manifest"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::format(path, "manifest is not UTF-8"))?
            .to_string();
        pos += end + 1;
        Ok(line)
    };
    if next_line()? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint"));
    }
    let count: usize = next_line()?
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, "missing tensor count"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::format(path, "empty manifest line"))?
            .to_string();
        let shape = parts
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::format(path, format!("bad shape for {name}")))?;
        entries.push((name, shape));
    }
    if next_line()? != "data" {
        return Err(Error::format(path, "missing data marker"));
    }
    let mut out = Vec::with_capacity(count);
    for (name, shape) in entries {
        let n: usize = shape.iter().product();
        let end = pos + 8 * n;
        if end > bytes.len() {
            return Err(Error::format(path, format!("data for {name} is truncated")));
        }
        let values: Vec<f64> = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos = end;
        out.push((name, Tensor::new(&shape, values)?.with_grad()));
    }
    if pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after data"));
    }
    Ok(out)
}
