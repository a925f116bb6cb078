//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! Everything is generic over [`Float`] so the same code runs in 32-bit for
//! training and in 64-bit for finite-difference checks. Reductions are done
//! in a fixed order, so results are reproducible run to run.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Scalar type of the numerical core.
pub trait Float:
    num_traits::Float
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// `"f32"` or `"f64"`.
    const NAME: &'static str;

    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C = alpha·A·B + beta·C` on strided row-major views.
    ///
    /// # Safety
    /// Every element addressed through the dimensions and strides must lie
    /// inside the corresponding allocation. Use [`gemm`] instead.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Float for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn of(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the leading dimension.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }
}

/// Dot product with eight independent accumulators so the compiler can
/// vectorize without reassociating a single running sum.
#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Float>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (a, &b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// A strided row-major matrix view: `(rows, cols, row stride, col stride)`.
type View = (usize, usize, usize, usize);

fn span((rows, cols, rs, cs): View) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// Safe `C = A·B + beta·C`; panics if a view does not fit its slice.
pub fn gemm<T: Float>(a: &[T], av: View, b: &[T], bv: View, beta: T, c: &mut [T], cv: View) {
    assert!(av.1 == bv.0 && av.0 == cv.0 && bv.1 == cv.1, "gemm dimensions");
    assert!(span(av) <= a.len() && span(bv) <= b.len() && span(cv) <= c.len(), "gemm view out of bounds");
    if cv.0 == 0 || cv.1 == 0 {
        return;
    }
    // SAFETY: the asserts above keep every addressed element in bounds.
    unsafe {
        T::gemm_raw(
            av.0,
            av.1,
            bv.1,
            T::one(),
            a.as_ptr(),
            av.2 as isize,
            av.3 as isize,
            b.as_ptr(),
            bv.2 as isize,
            bv.3 as isize,
            beta,
            c.as_mut_ptr(),
            cv.2 as isize,
            cv.3 as isize,
        )
    }
}

/// `y = x · Wᵀ + b` for `n` rows of `x`, with `W` stored as `out × in`.
pub fn linear<T: Float>(x: &[T], w: &Tensor<T>, b: Option<&Tensor<T>>) -> Vec<T> {
    let (out_dim, in_dim) = (w.rows(), w.cols());
    debug_assert_eq!(x.len() % in_dim, 0);
    let n = x.len() / in_dim;
    let mut y = vec![T::zero(); n * out_dim];
    gemm(
        x,
        (n, in_dim, in_dim, 1),
        &w.data,
        (in_dim, out_dim, 1, in_dim),
        T::zero(),
        &mut y,
        (n, out_dim, out_dim, 1),
    );
    if let Some(b) = b {
        for yr in y.chunks_exact_mut(out_dim) {
            for (yo, &bo) in yr.iter_mut().zip(&b.data) {
                *yo += bo;
            }
        }
    }
    y
}

/// Backward of [`linear`]: accumulates `dW += dyᵀ·x`, `db += Σ dy`, and
/// returns `dx = dy·W` when requested.
pub fn linear_backward<T: Float>(
    x: &[T],
    dy: &[T],
    w: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: Option<&mut Tensor<T>>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let (out_dim, in_dim) = (w.rows(), w.cols());
    let n = dy.len() / out_dim;
    debug_assert_eq!(x.len(), n * in_dim);
    gemm(
        dy,
        (out_dim, n, 1, out_dim),
        x,
        (n, in_dim, in_dim, 1),
        T::one(),
        &mut dw.data,
        (out_dim, in_dim, in_dim, 1),
    );
    if let Some(db) = db {
        for dyr in dy.chunks_exact(out_dim) {
            for (b, &g) in db.data.iter_mut().zip(dyr) {
                *b += g;
            }
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![T::zero(); n * in_dim];
    gemm(
        dy,
        (n, out_dim, out_dim, 1),
        &w.data,
        (out_dim, in_dim, in_dim, 1),
        T::zero(),
        &mut dx,
        (n, in_dim, in_dim, 1),
    );
    Some(dx)
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Returns the output and the per-row `(mean, rstd)`.
pub fn layer_norm<T: Float>(x: &[T], g: &Tensor<T>, b: &Tensor<T>) -> (Vec<T>, Vec<(T, T)>) {
    let d = g.numel();
    let inv_d = T::one() / T::of(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + T::of(LN_EPS)).sqrt();
        for i in 0..d {
            yr[i] = (xr[i] - mean) * rstd * g.data[i] + b.data[i];
        }
        stats.push((mean, rstd));
    }
    (y, stats)
}

pub fn layer_norm_backward<T: Float>(
    x: &[T],
    stats: &[(T, T)],
    dy: &[T],
    g: &Tensor<T>,
    dg: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Vec<T> {
    let d = g.numel();
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for ((xr, dyr), (dxr, &(mean, rstd))) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d).zip(stats))
    {
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for i in 0..d {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = dyr[i] * g.data[i];
            dg.data[i] += dyr[i] * xhat[i];
            db.data[i] += dyr[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xhat[i];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for i in 0..d {
            dxr[i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Float>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Float>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let th = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * dinner
}

#[inline]
pub fn silu<T: Float>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_grad<T: Float>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Numerically stable softmax in place.
pub fn softmax_in_place<T: Float>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// `ln Σ exp(v)`.
pub fn log_sum_exp<T: Float>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}
