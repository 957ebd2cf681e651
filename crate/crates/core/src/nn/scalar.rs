/// Storage element of a tensor. Arithmetic happens in `f64`; values are
/// lifted on read and lowered on write.
pub trait Scalar: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    fn lift(self) -> f64;
    fn lower(x: f64) -> Self;
}

impl Scalar for f32 {
    #[inline(always)]
    fn lift(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn lower(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn lift(self) -> f64 {
        self
    }
    #[inline(always)]
    fn lower(x: f64) -> Self {
        x
    }
}
