use std::fmt::{Debug, Display};

/// Element type for tensors: `f64` for verification paths, `f32` for training.
pub trait Scalar:
    num_traits::Float + num_traits::NumCast + num_traits::NumAssignOps + Debug + Display + Default + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 value representable in scalar type")
    }

    fn to_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("scalar value representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
