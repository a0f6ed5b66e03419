//! Batch normalization over the channel axis of NCHW tensors.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// Per-channel batch statistics saved by the train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<E: Element> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

fn check_affine<E: Element>(c: usize, gamma: &Tensor<E>, beta: &Tensor<E>) -> Result<()> {
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::Shape(format!(
            "batchnorm gamma {:?} / beta {:?} must be [{c}]",
            gamma.dims(),
            beta.dims()
        )));
    }
    Ok(())
}

/// Train-mode forward: normalize by biased per-channel batch statistics and
/// update the running stats in place with
/// `r <- (1 - momentum) * r + momentum * batch_stat`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward_train<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &mut Tensor<E>,
    running_var: &mut Tensor<E>,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor<E>, BnCache<E>)> {
    let (n, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta)?;
    let m = n * h * w;
    if m < 2 {
        return Err(Error::InvalidArg(
            "batchnorm train mode needs at least 2 values per channel".into(),
        ));
    }
    let plane = h * w;
    let xd = x.data();

    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    {
        // One task per channel; each channel reduces in fixed n,h,w order.
        let mean_slice = &mut mean[..];
        parallel::for_each_chunk(mean_slice, 1, |ci, dst| {
            let mut acc = E::zero();
            for ni in 0..n {
                let p = &xd[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                for &v in p {
                    acc = acc + v;
                }
            }
            dst[0] = acc / E::from_f64(m as f64);
        });
    }
    {
        let mean_ref = &mean;
        parallel::for_each_chunk(&mut var, 1, |ci, dst| {
            let mu = mean_ref[ci];
            let mut acc = E::zero();
            for ni in 0..n {
                let p = &xd[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                for &v in p {
                    let d = v - mu;
                    acc = acc + d * d;
                }
            }
            dst[0] = acc / E::from_f64(m as f64);
        });
    }

    let one_m = E::from_f64(1.0 - momentum);
    let mom = E::from_f64(momentum);
    for ci in 0..c {
        let rm = running_mean.data_mut();
        rm[ci] = one_m * rm[ci] + mom * mean[ci];
        let rv = running_var.data_mut();
        rv[ci] = one_m * rv[ci] + mom * var[ci];
    }

    let y = normalize(x, gamma, beta, &mean, &var, eps)?;
    Ok((y, BnCache { mean, var }))
}

/// Inference forward using the stored running statistics.
pub fn batchnorm_forward_infer<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let (_, c, _, _) = x.dims4()?;
    check_affine(c, gamma, beta)?;
    normalize(x, gamma, beta, running_mean.data(), running_var.data(), eps)
}

fn normalize<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    mean: &[E],
    var: &[E],
    eps: f64,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = x.dims4()?;
    if mean.len() != c || var.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm stats length {} must be {c}",
            mean.len()
        )));
    }
    let plane = h * w;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let eps = E::from_f64(eps);
    let mut out = vec![E::zero(); xd.len()];
    parallel::for_each_chunk(&mut out, plane, |nc, dst| {
        let ci = nc % c;
        let inv_std = E::one() / (var[ci] + eps).sqrt();
        let (mu, ga, be) = (mean[ci], gd[ci], bd[ci]);
        let src = &xd[nc * plane..(nc + 1) * plane];
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = ga * ((v - mu) * inv_std) + be;
        }
    });
    Tensor::from_vec(&[n, c, h, w], out)
}

/// Adjoint of the train-mode forward through the batch statistics.
pub fn batchnorm_backward<E: Element>(
    grad_out: &Tensor<E>,
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    cache: &BnCache<E>,
    eps: f64,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, c, h, w) = x.dims4()?;
    if grad_out.dims() != x.dims() {
        return Err(Error::Shape(format!(
            "batchnorm backward grad {:?} vs input {:?}",
            grad_out.dims(),
            x.dims()
        )));
    }
    let plane = h * w;
    let m = n * plane;
    let m_e = E::from_f64(m as f64);
    let eps = E::from_f64(eps);
    let xd = x.data();
    let god = grad_out.data();

    // Per-channel sums of grad_out and grad_out * x_hat.
    let mut s1 = vec![E::zero(); c];
    let mut s2 = vec![E::zero(); c];
    {
        parallel::for_each_chunk(&mut s1, 1, |ci, dst| {
            let mut acc = E::zero();
            for ni in 0..n {
                let g = &god[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                for &v in g {
                    acc = acc + v;
                }
            }
            dst[0] = acc;
        });
    }
    {
        let cache_ref = cache;
        parallel::for_each_chunk(&mut s2, 1, |ci, dst| {
            let mu = cache_ref.mean[ci];
            let inv_std = E::one() / (cache_ref.var[ci] + eps).sqrt();
            let mut acc = E::zero();
            for ni in 0..n {
                let g = &god[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                let xs = &xd[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                for (&gv, &xv) in g.iter().zip(xs) {
                    acc = acc + gv * ((xv - mu) * inv_std);
                }
            }
            dst[0] = acc;
        });
    }

    let gd = gamma.data();
    let mut gx = vec![E::zero(); xd.len()];
    {
        let (s1r, s2r) = (&s1, &s2);
        let cache_ref = cache;
        parallel::for_each_chunk(&mut gx, plane, |nc, dst| {
            let ci = nc % c;
            let mu = cache_ref.mean[ci];
            let inv_std = E::one() / (cache_ref.var[ci] + eps).sqrt();
            let scale = gd[ci] * inv_std / m_e;
            let g = &god[nc * plane..(nc + 1) * plane];
            let xs = &xd[nc * plane..(nc + 1) * plane];
            for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xs) {
                let xhat = (xv - mu) * inv_std;
                *d = scale * (m_e * gv - s1r[ci] - xhat * s2r[ci]);
            }
        });
    }

    Ok((
        Tensor::from_vec(&[n, c, h, w], gx)?,
        Tensor::from_vec(&[c], s2)?,
        Tensor::from_vec(&[c], s1)?,
    ))
}
