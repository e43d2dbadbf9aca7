//! Scalar abstraction: the whole pipeline is generic over `Real`, which is
//! implemented for `f32` (production) and `f64` (gradient checks, reference runs).

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the pipeline.
///
/// `f64` is the mode used by gradient checks and determinism tests; `f32` is
/// the fast mode the CLI defaults to. Checkpoints and dump files are always
/// 32-bit on disk regardless of the in-memory scalar.
pub trait Real:
    nalgebra::RealField
    + FromPrimitive
    + ToPrimitive
    + Copy
    + Default
    + std::iter::Sum<Self>
    + std::fmt::Display
    + Send
    + Sync
{
    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 not representable in scalar type")
    }

    fn cast_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize not representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar not representable as f64")
    }

    fn as_f32(self) -> f32 {
        <Self as ToPrimitive>::to_f32(&self).expect("scalar not representable as f32")
    }

    /// Row-major GEMM: `c = alpha * a(m*k) . b(k*n) + beta * c`.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
}

impl Real for f32 {
    fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
        assert_eq!(a.len(), m * k, "gemm lhs size");
        assert_eq!(b.len(), k * n, "gemm rhs size");
        assert_eq!(c.len(), m * n, "gemm out size");
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Real for f64 {
    fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
        assert_eq!(a.len(), m * k, "gemm lhs size");
        assert_eq!(b.len(), k * n, "gemm rhs size");
        assert_eq!(c.len(), m * n, "gemm out size");
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// SplitMix64 step, used to derive decorrelated per-task RNG seeds from a
/// base seed and a stream index (e.g. cluster center index). Keeps parallel
/// sampling schedule-independent.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
