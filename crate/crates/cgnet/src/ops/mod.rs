//! Forward and backward kernels for every layer primitive the network needs.
//!
//! Kernels are pure functions of their inputs; backward passes take the saved
//! forward inputs explicitly. Parallelism is only ever across output
//! elements, with a fixed per-element accumulation order, so results are
//! bitwise reproducible at any thread count.

pub mod act;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod resample;

pub use act::{
    prelu_backward, prelu_forward, relu_backward, relu_forward, sigmoid_backward, sigmoid_forward,
};
pub use conv::{conv2d_backward, conv2d_forward, ConvSpec};
pub use linear::{affine_backward, affine_forward};
pub use loss::{softmax_ce_masked, LossReduction};
pub use norm::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, BnCache,
};
pub use pool::{
    avg_pool3x3s2_backward, avg_pool3x3s2_forward, global_avg_pool_backward,
    global_avg_pool_forward, pooled_extent,
};
pub use resample::{bilinear_upsample_backward, bilinear_upsample_forward};

use crate::element::Element;
use crate::error::Result;
use crate::parallel;
use crate::tensor::Tensor;

/// Adjoint of [`Tensor::scale_channels`]: returns `(grad_x, grad_gate)` with
/// `grad_x = grad_out * gate` (broadcast) and
/// `grad_gate[n,c] = sum over h,w of grad_out * x`.
pub fn scale_channels_backward<E: Element>(
    grad_out: &Tensor<E>,
    x: &Tensor<E>,
    gate: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (n, c, h, w) = x.dims4()?;
    let grad_x = grad_out.scale_channels(gate)?;
    let plane = h * w;
    let god = grad_out.data();
    let xd = x.data();
    let mut gg = vec![E::zero(); n * c];
    parallel::for_each_chunk(&mut gg, 1, |nc, dst| {
        let mut acc = E::zero();
        let g = &god[nc * plane..(nc + 1) * plane];
        let xs = &xd[nc * plane..(nc + 1) * plane];
        for (&gv, &xv) in g.iter().zip(xs) {
            acc = acc + gv * xv;
        }
        dst[0] = acc;
    });
    Ok((grad_x, Tensor::from_vec(&[n, c], gg)?))
}
