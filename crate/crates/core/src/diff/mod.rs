//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod conv;
pub mod gradcheck;
mod ops;
mod optim;
mod tape;
mod tensor;

pub use conv::{conv2d, Padding};
pub use ops::{concat, elementwise, guard, reduce, stack_scalars, ElemOp, ReduceOp, EPS};
pub use optim::Adam;
pub use tape::{GradSink, Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

/// `c = op(a) * op(b) + beta * c` for row-major `op(a)` (m x k) and
/// `op(b)` (k x n). A transposed operand is stored with swapped extents.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents and strides describe in-bounds views of `a`, `b` and
    // `c`, checked by the assertion above; `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
