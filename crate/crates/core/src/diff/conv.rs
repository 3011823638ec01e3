//! 2D cross-correlation and fixed spatial filters over the last two axes.

use super::tape::Var;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k-1)/2` on each side.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

fn im2col(x: &[f64], g: &Geom, cols: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * ohw;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geom, x: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * ohw;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            x[base + ix as usize] += cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input` (N,C,H,W) with `kernel` (O,C,kh,kw).
pub fn conv2d<'t>(
    input: Var<'t>,
    kernel: Var<'t>,
    stride: usize,
    padding: Padding,
) -> Result<Var<'t>> {
    let si = input.shape();
    let sk = kernel.shape();
    if si.len() != 4 || sk.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects NCHW input and OCHW kernel, got {si:?} and {sk:?}"
        )));
    }
    if si[1] != sk[1] {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input {si:?} has {} channels, kernel {sk:?} expects {}",
            si[1], sk[1]
        )));
    }
    if stride == 0 {
        return Err(Error::Invalid("conv2d stride must be at least 1".into()));
    }
    let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
    let (o, kh, kw) = (sk[0], sk[2], sk[3]);
    let (ph, pw) = match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
        Padding::Valid => (0, 0),
    };
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(Error::Shape(format!(
            "conv2d kernel {sk:?} larger than padded input {si:?}"
        )));
    }
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (w + 2 * pw - kw) / stride + 1;
    let g = Geom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        ph,
        pw,
        oh,
        ow,
    };
    let ckk = c * kh * kw;
    let ohw = oh * ow;
    let x = input.value();
    let wk = kernel.value();
    let mut out = vec![0.0; n * o * ohw];
    let mut cols = vec![0.0; ckk * ohw];
    for b in 0..n {
        im2col(&x[b * c * h * w..(b + 1) * c * h * w], &g, &mut cols);
        super::gemm(o, ckk, ohw, &wk, false, &cols, false, &mut out[b * o * ohw..(b + 1) * o * ohw], 0.0);
    }
    let (ii, ik) = (input.id, kernel.id);
    Ok(input
        .tape
        .record(vec![n, o, oh, ow], out.into(), &[input, kernel], move |gout, sink| {
            let want_x = sink.wants(ii);
            let want_k = sink.wants(ik);
            let mut cols = vec![0.0; ckk * ohw];
            let mut dk = want_k.then(|| vec![0.0; o * ckk]);
            let mut dx = want_x.then(|| vec![0.0; n * c * h * w]);
            for b in 0..n {
                let gb = &gout[b * o * ohw..(b + 1) * o * ohw];
                if let Some(dk) = dk.as_mut() {
                    im2col(&x[b * c * h * w..(b + 1) * c * h * w], &g, &mut cols);
                    super::gemm(o, ohw, ckk, gb, false, &cols, true, dk, 1.0);
                }
                if let Some(dx) = dx.as_mut() {
                    super::gemm(ckk, o, ohw, &wk, true, gb, false, &mut cols, 0.0);
                    col2im(&cols, &g, &mut dx[b * c * h * w..(b + 1) * c * h * w]);
                }
            }
            if let Some(dk) = dk {
                sink.add(ik, &dk);
            }
            if let Some(dx) = dx {
                sink.add(ii, &dx);
            }
        }))
}

fn split_spatial(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "spatial op needs at least 2 axes, got {shape:?}");
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    (shape.iter().product::<usize>() / (h * w), h, w)
}

impl<'t> Var<'t> {
    /// 2x2 average pooling with floor semantics over the last two axes.
    pub fn avg_pool2(self) -> Var<'t> {
        let shape = self.shape();
        let (planes, h, w) = split_spatial(&shape);
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "avg_pool2 on {shape:?}");
        let v = self.value();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for x in 0..ow {
                    let s = p * h * w + 2 * y * w + 2 * x;
                    out[(p * oh + y) * ow + x] = 0.25 * (v[s] + v[s + 1] + v[s + w] + v[s + w + 1]);
                }
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let ia = self.id;
        self.tape.record(out_shape, out.into(), &[self], move |g, sink| {
            sink.with(ia, |buf| {
                for p in 0..planes {
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = 0.25 * g[(p * oh + y) * ow + x];
                            let s = p * h * w + 2 * y * w + 2 * x;
                            buf[s] += gv;
                            buf[s + 1] += gv;
                            buf[s + w] += gv;
                            buf[s + w + 1] += gv;
                        }
                    }
                }
            })
        })
    }

    /// Nearest-neighbour 2x upsampling over the last two axes.
    pub fn upsample2(self) -> Var<'t> {
        let shape = self.shape();
        let (planes, h, w) = split_spatial(&shape);
        let (oh, ow) = (2 * h, 2 * w);
        let v = self.value();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for x in 0..ow {
                    out[(p * oh + y) * ow + x] = v[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let ia = self.id;
        self.tape.record(out_shape, out.into(), &[self], move |g, sink| {
            sink.with(ia, |buf| {
                for p in 0..planes {
                    for y in 0..oh {
                        for x in 0..ow {
                            buf[(p * h + y / 2) * w + x / 2] += g[(p * oh + y) * ow + x];
                        }
                    }
                }
            })
        })
    }

    /// 3x3 mean filter without padding: (...,H,W) -> (...,H-2,W-2).
    pub fn box3(self) -> Var<'t> {
        let shape = self.shape();
        let (planes, h, w) = split_spatial(&shape);
        assert!(h >= 3 && w >= 3, "box3 on {shape:?}");
        let (oh, ow) = (h - 2, w - 2);
        let v = self.value();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..3 {
                        let row = p * h * w + (y + dy) * w + x;
                        s += v[row] + v[row + 1] + v[row + 2];
                    }
                    out[(p * oh + y) * ow + x] = s / 9.0;
                }
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let ia = self.id;
        self.tape.record(out_shape, out.into(), &[self], move |g, sink| {
            sink.with(ia, |buf| {
                for p in 0..planes {
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = g[(p * oh + y) * ow + x] / 9.0;
                            for dy in 0..3 {
                                let row = p * h * w + (y + dy) * w + x;
                                buf[row] += gv;
                                buf[row + 1] += gv;
                                buf[row + 2] += gv;
                            }
                        }
                    }
                }
            })
        })
    }
}
