//! Scalar abstraction so the same kernels can run in f32 (the pipeline) and
//! f64 (the finite-difference oracle in gradcheck).

use std::ops::{AddAssign, MulAssign, SubAssign};

pub trait Real:
    num_traits::Float + AddAssign + SubAssign + MulAssign + Default + std::fmt::Debug + 'static
{
    fn of(x: f32) -> Self;
    fn of_usize(n: usize) -> Self;
    fn as_f32(self) -> f32;
    /// Fused multiply-add (hardware FMA where available).
    fn fma(self, a: Self, b: Self) -> Self;
}

impl Real for f32 {
    #[inline]
    fn of(x: f32) -> Self {
        x
    }
    #[inline]
    fn of_usize(n: usize) -> Self {
        n as f32
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
    #[inline]
    fn fma(self, a: Self, b: Self) -> Self {
        self.mul_add(a, b)
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn of_usize(n: usize) -> Self {
        n as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
    #[inline]
    fn fma(self, a: Self, b: Self) -> Self {
        self.mul_add(a, b)
    }
}
