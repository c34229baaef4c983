//! Raw row-major kernels shared by the graph and by the eager helpers.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` when a test needs a high-precision reference.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumAssign};

/// Floating-point element type of a graph.
pub trait Scalar: Float + NumAssign + Sum + Default + Debug + Send + Sync + 'static {
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;

    /// `c = alpha·a·b + beta·c` on raw strided buffers.
    ///
    /// # Safety
    /// Strides and extents must describe in-bounds accesses of each pointer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }

    fn as_f32(self) -> f32 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        f64::from(v)
    }

    fn as_f32(self) -> f32 {
        self as f32
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

pub const LN_EPS: f32 = 1e-5;

/// Mask entries at or below this value count as blocked.
const BLOCKED_THRESHOLD: f32 = super::BLOCKED * 0.5;

#[inline]
pub fn is_blocked<S: Scalar>(mask_value: S) -> bool {
    mask_value <= S::from_f32(BLOCKED_THRESHOLD)
}

/// `c = op(a) · op(b)` where `op` optionally transposes. `a` is stored as
/// `m × k` (or `k × m` when `ta`), `b` as `k × n` (or `n × k` when `tb`).
/// With `accumulate` the product is added into `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    ta: bool,
    b: &[S],
    tb: bool,
    c: &mut [S],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm lhs extent");
    assert_eq!(b.len(), k * n, "gemm rhs extent");
    assert_eq!(c.len(), m * n, "gemm output extent");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = S::zero());
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { S::one() } else { S::zero() };
    // SAFETY: the assertions above pin every buffer to the extents the
    // strides describe.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
        );
    }
}

/// Row-wise softmax restricted to unblocked entries. Blocked entries are
/// skipped entirely and written as exact zeros, so their logits never reach
/// the arithmetic. Returns the number of fully blocked rows (written as zeros).
pub fn softmax_masked_rows<S: Scalar>(logits: &[S], mask: &[S], cols: usize, out: &mut [S]) -> usize {
    let mut fully_blocked = 0;
    if cols == 0 {
        return 0;
    }
    for ((lrow, mrow), orow) in logits
        .chunks_exact(cols)
        .zip(mask.chunks_exact(cols))
        .zip(out.chunks_exact_mut(cols))
    {
        let mut max = S::neg_infinity();
        let mut any = false;
        for (&l, &m) in lrow.iter().zip(mrow) {
            if !is_blocked(m) {
                any = true;
                let v = l + m;
                if v > max {
                    max = v;
                }
            }
        }
        if !any {
            fully_blocked += 1;
            orow.iter_mut().for_each(|o| *o = S::zero());
            continue;
        }
        let mut sum = S::zero();
        for ((o, &l), &m) in orow.iter_mut().zip(lrow).zip(mrow) {
            if is_blocked(m) {
                *o = S::zero();
            } else {
                let e = (l + m - max).exp();
                *o = e;
                sum += e;
            }
        }
        let inv = S::one() / sum;
        orow.iter_mut().for_each(|o| *o *= inv);
    }
    fully_blocked
}

/// Per-row normalization followed by the affine `scale`, `shift`.
/// Writes the output and returns per-row `(mean, rstd)`.
pub fn layer_norm_rows<S: Scalar>(
    x: &[S],
    cols: usize,
    scale: &[S],
    shift: &[S],
    out: &mut [S],
) -> Vec<(S, S)> {
    let mut stats = Vec::with_capacity(x.len() / cols.max(1));
    let n = S::from(cols).unwrap_or_else(S::one);
    let eps = S::from_f32(LN_EPS);
    for (xrow, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mean = xrow.iter().copied().sum::<S>() / n;
        let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let rstd = S::one() / (var + eps).sqrt();
        for (j, (o, &v)) in orow.iter_mut().zip(xrow).enumerate() {
            *o = (v - mean) * rstd * scale[j] + shift[j];
        }
        stats.push((mean, rstd));
    }
    stats
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let k = S::from(GELU_K).unwrap();
    let c = S::from(GELU_C).unwrap();
    let half = S::from(0.5).unwrap();
    half * x * (S::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let k = S::from(GELU_K).unwrap();
    let c = S::from(GELU_C).unwrap();
    let half = S::from(0.5).unwrap();
    let three = S::from(3.0).unwrap();
    let t = (k * (x + c * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * k * (S::one() + three * c * x * x)
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[inline]
pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}
