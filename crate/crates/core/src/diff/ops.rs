//! Elementwise, reduction and shape primitives.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Guard applied to denominators and logarithm arguments.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
    Abs,
    Exp,
    Log,
    Clamp { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Abs,
    Exp,
    Log,
    Neg,
    Relu,
    Sigmoid,
    Sin,
    Cos,
    Sqrt,
    Square,
    Recip,
    Clamp(f64, f64),
    Scale(f64),
    Offset(f64),
}

/// Denominator with magnitude at least [`EPS`]; zero maps to `+EPS`.
#[inline]
pub fn guard(x: f64) -> f64 {
    if x.abs() >= EPS {
        x
    } else if x < 0.0 {
        -EPS
    } else {
        EPS
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!(
                    "shapes {a:?} and {b:?} are not broadcast-compatible"
                )))
            }
        };
    }
    Ok(out)
}

/// Maps each flat index of `out` onto the flat index of `src` it reads from
/// under trailing-dimension broadcasting. `None` means identity.
fn broadcast_map(out: &[usize], src: &[usize]) -> Option<Rc<[usize]>> {
    if out == src {
        return None;
    }
    let n = out.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; n];
    for i in 0..src.len() {
        let oi = i + n - src.len();
        eff[oi] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..n).rev() {
            idx[d] += 1;
            offset += eff[d];
            if idx[d] < out[d] {
                break;
            }
            offset -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map.into())
}

#[inline]
fn at(map: &Option<Rc<[usize]>>, k: usize) -> usize {
    match map {
        Some(m) => m[k],
        None => k,
    }
}

fn binary<'t>(a: Var<'t>, b: Var<'t>, op: Binary) -> Result<Var<'t>> {
    let tape = a.tape;
    let (sa, sb) = (a.shape(), b.shape());
    let out_shape = broadcast_shape(&sa, &sb)?;
    let ma = broadcast_map(&out_shape, &sa);
    let mb = broadcast_map(&out_shape, &sb);
    let (va, vb) = (a.value(), b.value());
    let total: usize = out_shape.iter().product();
    let f = |x: f64, y: f64| match op {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / guard(y),
        Binary::Min => {
            if x <= y {
                x
            } else {
                y
            }
        }
        Binary::Max => {
            if x >= y {
                x
            } else {
                y
            }
        }
    };
    let out: Vec<f64> = (0..total).map(|k| f(va[at(&ma, k)], vb[at(&mb, k)])).collect();
    let (ia, ib) = (a.id, b.id);
    Ok(tape.record(out_shape, out.into(), &[a, b], move |g, sink| {
        let partials = |x: f64, y: f64| -> (f64, f64) {
            match op {
                Binary::Add => (1.0, 1.0),
                Binary::Sub => (1.0, -1.0),
                Binary::Mul => (y, x),
                Binary::Div => {
                    let d = guard(y);
                    let db = if y.abs() >= EPS { -x / (d * d) } else { 0.0 };
                    (1.0 / d, db)
                }
                Binary::Min => {
                    if x <= y {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    }
                }
                Binary::Max => {
                    if x >= y {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    }
                }
            }
        };
        let want_a = sink.wants(ia);
        let want_b = sink.wants(ib);
        let mut ga = want_a.then(|| vec![0.0; va.len()]);
        let mut gb = want_b.then(|| vec![0.0; vb.len()]);
        for (k, &gk) in g.iter().enumerate() {
            if gk == 0.0 {
                continue;
            }
            let (ja, jb) = (at(&ma, k), at(&mb, k));
            let (da, db) = partials(va[ja], vb[jb]);
            if let Some(ga) = ga.as_mut() {
                ga[ja] += gk * da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[jb] += gk * db;
            }
        }
        if let Some(ga) = ga {
            sink.add(ia, &ga);
        }
        if let Some(gb) = gb {
            sink.add(ib, &gb);
        }
    }))
}

fn unary(a: Var<'_>, op: Unary) -> Var<'_> {
    let va = a.value();
    let f = move |x: f64| match op {
        Unary::Abs => x.abs(),
        Unary::Exp => x.exp(),
        Unary::Log => x.max(EPS).ln(),
        Unary::Neg => -x,
        Unary::Relu => x.max(0.0),
        Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Sqrt => x.max(EPS).sqrt(),
        Unary::Square => x * x,
        Unary::Recip => 1.0 / guard(x),
        Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        Unary::Scale(c) => c * x,
        Unary::Offset(c) => x + c,
    };
    let out: Rc<[f64]> = va.iter().map(|&x| f(x)).collect();
    let out_c = out.clone();
    let ia = a.id;
    a.tape.record(a.shape(), out, &[a], move |g, sink| {
        let d = |x: f64, y: f64| match op {
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Log => {
                if x >= EPS {
                    1.0 / x
                } else {
                    0.0
                }
            }
            Unary::Neg => -1.0,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Sqrt => {
                if x >= EPS {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Recip => {
                if x.abs() >= EPS {
                    -y * y
                } else {
                    0.0
                }
            }
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Scale(c) => c,
            Unary::Offset(_) => 1.0,
        };
        sink.with(ia, |buf| {
            for k in 0..g.len() {
                buf[k] += g[k] * d(va[k], out_c[k]);
            }
        });
    })
}

/// Applies `op` by kind. Binary kinds require `b`.
pub fn elementwise<'t>(op: ElemOp, a: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let need = |b: Option<Var<'t>>| {
        b.ok_or_else(|| Error::Invalid(format!("{op:?} needs two operands")))
    };
    match op {
        ElemOp::Add => binary(a, need(b)?, Binary::Add),
        ElemOp::Sub => binary(a, need(b)?, Binary::Sub),
        ElemOp::Mul => binary(a, need(b)?, Binary::Mul),
        ElemOp::Div => binary(a, need(b)?, Binary::Div),
        ElemOp::Min => binary(a, need(b)?, Binary::Min),
        ElemOp::Max => binary(a, need(b)?, Binary::Max),
        ElemOp::Abs => Ok(unary(a, Unary::Abs)),
        ElemOp::Exp => Ok(unary(a, Unary::Exp)),
        ElemOp::Log => Ok(unary(a, Unary::Log)),
        ElemOp::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::Invalid(format!("clamp bounds {lo} > {hi}")));
            }
            Ok(unary(a, Unary::Clamp(lo, hi)))
        }
    }
}

/// Reduces over `axes` (all axes when `None`); reduced axes are removed.
pub fn reduce<'t>(op: ReduceOp, a: Var<'t>, axes: Option<&[usize]>) -> Result<Var<'t>> {
    let shape = a.shape();
    let mut reduced = vec![false; shape.len()];
    match axes {
        None => reduced.iter_mut().for_each(|r| *r = true),
        Some(list) => {
            for &ax in list {
                if ax >= shape.len() {
                    return Err(Error::Shape(format!(
                        "axis {ax} out of range for shape {shape:?}"
                    )));
                }
                reduced[ax] = true;
            }
        }
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let out_len: usize = out_shape.iter().product();
    let keep_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    // map from input index to output index: broadcast of the kept shape
    let map: Rc<[usize]> = match broadcast_map(&shape, &keep_shape) {
        Some(m) => m,
        None => (0..a.len()).collect(),
    };
    let va = a.value();
    let group = (va.len() / out_len) as f64;
    let mut out = vec![
        match op {
            ReduceOp::Sum | ReduceOp::Mean => 0.0,
            ReduceOp::Min => f64::INFINITY,
            ReduceOp::Max => f64::NEG_INFINITY,
        };
        out_len
    ];
    let mut arg = vec![usize::MAX; out_len];
    for (k, &x) in va.iter().enumerate() {
        let o = map[k];
        match op {
            ReduceOp::Sum | ReduceOp::Mean => out[o] += x,
            ReduceOp::Min => {
                if x < out[o] || arg[o] == usize::MAX {
                    out[o] = x;
                    arg[o] = k;
                }
            }
            ReduceOp::Max => {
                if x > out[o] || arg[o] == usize::MAX {
                    out[o] = x;
                    arg[o] = k;
                }
            }
        }
    }
    if op == ReduceOp::Mean {
        out.iter_mut().for_each(|v| *v /= group);
    }
    let ia = a.id;
    let n_in = va.len();
    Ok(a.tape.record(out_shape, out.into(), &[a], move |g, sink| {
        sink.with(ia, |buf| match op {
            ReduceOp::Sum => (0..n_in).for_each(|k| buf[k] += g[map[k]]),
            ReduceOp::Mean => (0..n_in).for_each(|k| buf[k] += g[map[k]] / group),
            ReduceOp::Min | ReduceOp::Max => {
                for (o, &k) in arg.iter().enumerate() {
                    buf[k] += g[o];
                }
            }
        });
    }))
}

impl<'t> Var<'t> {
    fn bin(self, other: Var<'t>, op: Binary) -> Var<'t> {
        binary(self, other, op).unwrap_or_else(|e| panic!("{op:?}: {e}"))
    }

    pub fn try_add(self, o: Var<'t>) -> Result<Var<'t>> {
        binary(self, o, Binary::Add)
    }
    pub fn try_mul(self, o: Var<'t>) -> Result<Var<'t>> {
        binary(self, o, Binary::Mul)
    }
    pub fn minimum(self, o: Var<'t>) -> Var<'t> {
        self.bin(o, Binary::Min)
    }
    pub fn maximum(self, o: Var<'t>) -> Var<'t> {
        self.bin(o, Binary::Max)
    }
    pub fn abs(self) -> Var<'t> {
        unary(self, Unary::Abs)
    }
    pub fn exp(self) -> Var<'t> {
        unary(self, Unary::Exp)
    }
    pub fn ln(self) -> Var<'t> {
        unary(self, Unary::Log)
    }
    pub fn relu(self) -> Var<'t> {
        unary(self, Unary::Relu)
    }
    pub fn sigmoid(self) -> Var<'t> {
        unary(self, Unary::Sigmoid)
    }
    pub fn sin(self) -> Var<'t> {
        unary(self, Unary::Sin)
    }
    pub fn cos(self) -> Var<'t> {
        unary(self, Unary::Cos)
    }
    pub fn sqrt(self) -> Var<'t> {
        unary(self, Unary::Sqrt)
    }
    pub fn square(self) -> Var<'t> {
        unary(self, Unary::Square)
    }
    pub fn recip(self) -> Var<'t> {
        unary(self, Unary::Recip)
    }
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        unary(self, Unary::Clamp(lo, hi))
    }
    pub fn scale(self, c: f64) -> Var<'t> {
        unary(self, Unary::Scale(c))
    }
    pub fn offset(self, c: f64) -> Var<'t> {
        unary(self, Unary::Offset(c))
    }

    pub fn sum(self) -> Var<'t> {
        reduce(ReduceOp::Sum, self, None).expect("full reduction is always valid")
    }
    pub fn mean(self) -> Var<'t> {
        reduce(ReduceOp::Mean, self, None).expect("full reduction is always valid")
    }
    pub fn sum_axes(self, axes: &[usize]) -> Var<'t> {
        reduce(ReduceOp::Sum, self, Some(axes)).unwrap_or_else(|e| panic!("{e}"))
    }
    pub fn mean_axes(self, axes: &[usize]) -> Var<'t> {
        reduce(ReduceOp::Mean, self, Some(axes)).unwrap_or_else(|e| panic!("{e}"))
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.len(), "cannot reshape {:?} into {shape:?}", self.shape());
        let ia = self.id;
        self.tape
            .record(shape.to_vec(), self.value(), &[self], move |g, sink| {
                sink.add(ia, g)
            })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let shape = self.shape();
        assert!(axis < shape.len() && start + len <= shape[axis] && len > 0,
            "narrow({axis}, {start}, {len}) out of range for {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let v = self.value();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let ia = self.id;
        self.tape
            .record(out_shape, out.into(), &[self], move |g, sink| {
                sink.with(ia, |buf| {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            buf[base + j] += g[src + j];
                        }
                    }
                })
            })
    }

    /// Element `i` of a flat view, as a scalar.
    pub fn index(self, i: usize) -> Var<'t> {
        let n = self.len();
        self.reshape(&[n]).narrow(0, i, 1).reshape(&[])
    }

    /// `(m,k) x (k,n)` matrix product.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {sa:?} and {sb:?} incompatible"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(), other.value());
        let mut out = vec![0.0; m * n];
        super::gemm(m, k, n, &va, false, &vb, false, &mut out, 0.0);
        let (ia, ib) = (self.id, other.id);
        self.tape
            .record(vec![m, n], out.into(), &[self, other], move |g, sink| {
                // dA = g B^T, dB = A^T g
                sink.with(ia, |buf| super::gemm(m, n, k, g, false, &vb, true, buf, 1.0));
                sink.with(ib, |buf| super::gemm(k, m, n, &va, true, g, false, buf, 1.0));
            })
    }

    pub fn transpose(self) -> Var<'t> {
        let s = self.shape();
        assert_eq!(s.len(), 2, "transpose expects a matrix, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let v = self.value();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ia = self.id;
        self.tape.record(vec![c, r], out.into(), &[self], move |g, sink| {
            sink.with(ia, |buf| {
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            })
        })
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
    let tape: &'t Tape = first.tape;
    let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
    let base = &shapes[0];
    if axis >= base.len() {
        return Err(Error::Shape(format!("concat axis {axis} for shape {base:?}")));
    }
    for s in &shapes {
        let ok = s.len() == base.len()
            && s.iter()
                .zip(base)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::Shape(format!(
                "concat along {axis}: {base:?} vs {s:?}"
            )));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let dims: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
    let total: usize = dims.iter().sum();
    let values: Vec<Rc<[f64]>> = parts.iter().map(|p| p.value()).collect();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &d) in values.iter().zip(&dims) {
            out.extend_from_slice(&v[o * d * inner..(o + 1) * d * inner]);
        }
    }
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.record(out_shape, out.into(), parts, move |g, sink| {
        let mut offset = 0;
        for (&id, &d) in ids.iter().zip(&dims) {
            sink.with(id, |buf| {
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    let dst = o * d * inner;
                    for j in 0..d * inner {
                        buf[dst + j] += g[src + j];
                    }
                }
            });
            offset += d;
        }
    }))
}

/// Stacks scalars into a vector.
pub fn stack_scalars<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let flat: Vec<Var<'t>> = parts.iter().map(|p| p.reshape(&[1])).collect();
    concat(&flat, 0).expect("scalars always concatenate")
}

macro_rules! impl_binop {
    ($tr:ident, $method:ident, $kind:expr, $f:expr) => {
        impl<'t> $tr for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.bin(rhs, $kind)
            }
        }
        impl<'t> $tr<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let f: fn(Var<'t>, f64) -> Var<'t> = $f;
                f(self, rhs)
            }
        }
    };
}

impl_binop!(Add, add, Binary::Add, |v, c| v.offset(c));
impl_binop!(Sub, sub, Binary::Sub, |v, c| v.offset(-c));
impl_binop!(Mul, mul, Binary::Mul, |v, c| v.scale(c));
impl_binop!(Div, div, Binary::Div, |v, c| v.scale(1.0 / guard(c)));

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        unary(self, Unary::Neg)
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        (-rhs).offset(self)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs.scale(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]).unwrap(), vec![4, 2, 3]);
        assert_eq!(broadcast_shape(&[], &[5]).unwrap(), vec![5]);
        let err = broadcast_shape(&[2, 3], &[2]).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn broadcast_map_reads_expected_sources() {
        let m = broadcast_map(&[2, 3], &[3]).unwrap();
        assert_eq!(&*m, &[0, 1, 2, 0, 1, 2]);
        let m = broadcast_map(&[2, 3], &[2, 1]).unwrap();
        assert_eq!(&*m, &[0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn guard_keeps_normal_values() {
        assert_eq!(guard(2.0), 2.0);
        assert_eq!(guard(0.0), EPS);
        assert_eq!(guard(-1e-12), -EPS);
    }
}
