//! Forward/backward kernels for the differentiable operators. The
//! [`Tape`](crate::autograd::Tape) wires them into the graph; they are also
//! usable directly on tensor values.

pub mod conv;
pub mod deform;
pub mod gemm;

pub use conv::{conv2d_forward, transpose_conv2d_forward, ConvSpec};
pub use deform::{bilinear_sample, bilinear_sample_grad, modulated_deform_conv_forward, BilinearGrad};

pub const LEAKY_SLOPE: f32 = 0.2;

#[inline]
pub fn leaky_relu(x: f32, slope: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
