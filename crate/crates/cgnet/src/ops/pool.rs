//! Pooling: global average over the spatial plane, and the fixed
//! 3x3/stride-2/pad-1 average pool used to downsample the injected input
//! image. The latter always divides by 9, padded zeros included.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// Mean over H, W: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool_forward<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![E::zero(); n * c];
    parallel::for_each_chunk(&mut out, 1, |nc, dst| {
        let mut acc = E::zero();
        for &v in &xd[nc * plane..(nc + 1) * plane] {
            acc = acc + v;
        }
        dst[0] = acc / E::from_f64(plane as f64);
    });
    Tensor::from_vec(&[n, c], out)
}

/// Spread `grad_out / (H*W)` uniformly over each spatial plane.
pub fn global_avg_pool_backward<E: Element>(
    grad_out: &Tensor<E>,
    h: usize,
    w: usize,
) -> Result<Tensor<E>> {
    let (n, c) = grad_out.dims2()?;
    let plane = h * w;
    let god = grad_out.data();
    let inv = E::one() / E::from_f64(plane as f64);
    let mut out = vec![E::zero(); n * c * plane];
    parallel::for_each_chunk(&mut out, plane, |nc, dst| {
        let g = god[nc] * inv;
        for v in dst.iter_mut() {
            *v = g;
        }
    });
    Tensor::from_vec(&[n, c, h, w], out)
}

pub fn pooled_extent(len: usize) -> usize {
    len.div_ceil(2)
}

/// 3x3 window, stride 2, padding 1, fixed divisor 9.
pub fn avg_pool3x3s2_forward<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, c, h, w) = x.dims4()?;
    let (h_out, w_out) = (pooled_extent(h), pooled_extent(w));
    let plane_in = h * w;
    let plane_out = h_out * w_out;
    let xd = x.data();
    let ninth = E::from_f64(1.0 / 9.0);
    let mut out = vec![E::zero(); n * c * plane_out];
    parallel::for_each_chunk(&mut out, plane_out, |nc, dst| {
        let xc = &xd[nc * plane_in..(nc + 1) * plane_in];
        for oh in 0..h_out {
            for ow in 0..w_out {
                let mut acc = E::zero();
                for u in 0..3usize {
                    let ih = (oh * 2 + u) as i64 - 1;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    for v in 0..3usize {
                        let iw = (ow * 2 + v) as i64 - 1;
                        if iw < 0 || iw as usize >= w {
                            continue;
                        }
                        acc = acc + xc[ih as usize * w + iw as usize];
                    }
                }
                dst[oh * w_out + ow] = acc * ninth;
            }
        }
    });
    Tensor::from_vec(&[n, c, h_out, w_out], out)
}

/// Transpose of the fixed average pool: each input cell gathers
/// `grad_out / 9` from every window that covers it.
pub fn avg_pool3x3s2_backward<E: Element>(
    grad_out: &Tensor<E>,
    h: usize,
    w: usize,
) -> Result<Tensor<E>> {
    let (n, c, h_out, w_out) = grad_out.dims4()?;
    if (h_out, w_out) != (pooled_extent(h), pooled_extent(w)) {
        return Err(Error::Shape(format!(
            "avg_pool backward: grad {:?} does not match input {h}x{w}",
            grad_out.dims()
        )));
    }
    let plane_in = h * w;
    let plane_out = h_out * w_out;
    let god = grad_out.data();
    let ninth = E::from_f64(1.0 / 9.0);

    // Output rows whose window covers input row t satisfy
    // oh*2 - 1 <= t <= oh*2 + 1, i.e. oh in [t/2, (t+1)/2].
    let covering = |t: usize, len_out: usize| (t / 2, t.div_ceil(2).min(len_out - 1));

    let mut out = vec![E::zero(); n * c * plane_in];
    parallel::for_each_chunk(&mut out, plane_in, |nc, dst| {
        let gp = &god[nc * plane_out..(nc + 1) * plane_out];
        for t in 0..h {
            let (oh_lo, oh_hi) = covering(t, h_out);
            for s in 0..w {
                let (ow_lo, ow_hi) = covering(s, w_out);
                let mut acc = E::zero();
                let mut oh = oh_lo;
                while oh <= oh_hi {
                    let mut ow = ow_lo;
                    while ow <= ow_hi {
                        acc = acc + gp[oh * w_out + ow];
                        ow += 1;
                    }
                    oh += 1;
                }
                dst[t * w + s] = acc * ninth;
            }
        }
    });
    Tensor::from_vec(&[n, c, h, w], out)
}
