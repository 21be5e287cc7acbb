use num_traits::{Float, FloatConst};

/// Floating point scalar used by every numeric kernel.
///
/// The production pipelines run with `f32`; property tests with tight
/// tolerances instantiate the identical code paths with `f64`.
pub trait Real:
    Float + FloatConst + rustfft::FftNum + Default + std::iter::Sum + std::fmt::Display
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_usize(x: usize) -> Self {
        Self::of(x as f64)
    }
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}
