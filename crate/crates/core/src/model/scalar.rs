use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a model: `f32` for training and decoding,
/// `f64` for gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// `C = beta * C + A * B` over strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "gemm operand out of bounds");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, 1);
                // SAFETY: operand extents were checked above; c does not alias a or b.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Row-major `out = a (rows x k) * w (k x n)`, overwriting `out`.
pub(crate) fn matmul<F: Scalar>(a: &[F], w: &[F], rows: usize, k: usize, n: usize, out: &mut [F]) {
    F::gemm(rows, k, n, a, k, 1, w, n, 1, F::zero(), out, n);
}

/// `dw += a^T * g` with `a: rows x k`, `g: rows x n`.
pub(crate) fn matmul_at_acc<F: Scalar>(a: &[F], g: &[F], rows: usize, k: usize, n: usize, dw: &mut [F]) {
    F::gemm(k, rows, n, a, 1, k, g, n, 1, F::one(), dw, n);
}

/// `out = g * w^T` with `g: rows x n`, `w: k x n`, overwriting `out` (rows x k).
pub(crate) fn matmul_bt<F: Scalar>(g: &[F], w: &[F], rows: usize, k: usize, n: usize, out: &mut [F]) {
    F::gemm(rows, n, k, g, n, 1, w, 1, n, F::zero(), out, k);
}

pub(crate) fn add_bias<F: Scalar>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn col_sum_acc<F: Scalar>(g: &[F], n: usize, out: &mut [F]) {
    for row in g.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let u = c * (x + F::of(0.044715) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let x2 = x * x;
    let u = c * (x + F::of(0.044715) * x2 * x);
    let t = u.tanh();
    let du = c * (F::one() + F::of(3.0 * 0.044715) * x2);
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * du
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Layer norm of one row; writes the normalized row and returns `1/std`.
pub(crate) fn layer_norm_row<F: Scalar>(x: &[F], gain: &[F], bias: &[F], xhat: &mut [F], out: &mut [F]) -> F {
    let d = F::of(x.len() as f64);
    let mean = x.iter().copied().sum::<F>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / d;
    let rstd = F::one() / (var + F::of(LN_EPS)).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = xhat[i] * gain[i] + bias[i];
    }
    rstd
}
