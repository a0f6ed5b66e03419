//! Bilinear upsampling by an integer factor, with its exact transpose.
//!
//! Output cell `i` samples the input at `(i + 0.5) / f - 0.5`, clamped to the
//! valid coordinate range (half-pixel centers, no corner alignment).

use crate::element::Element;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// Per-output-index sampling plan for one axis: `(lo, hi, weight_hi)`.
fn axis_map(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    (0..len_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * len_in as f64 / len_out as f64 - 0.5)
                .clamp(0.0, (len_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_upsample_forward<E: Element>(x: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    if factor < 1 {
        return Err(Error::InvalidArg("upsample factor must be >= 1".into()));
    }
    let (n, c, h, w) = x.dims4()?;
    let (h_out, w_out) = (h * factor, w * factor);
    let ymap = axis_map(h, h_out);
    let xmap = axis_map(w, w_out);
    let xd = x.data();
    let plane_in = h * w;
    let plane_out = h_out * w_out;
    let mut out = vec![E::zero(); n * c * plane_out];
    parallel::for_each_chunk(&mut out, plane_out, |nc, dst| {
        let src = &xd[nc * plane_in..(nc + 1) * plane_in];
        for (oy, &(y0, y1, wy)) in ymap.iter().enumerate() {
            let wy = E::from_f64(wy);
            let row0 = &src[y0 * w..y0 * w + w];
            let row1 = &src[y1 * w..y1 * w + w];
            let drow = &mut dst[oy * w_out..(oy + 1) * w_out];
            for (ox, &(x0, x1, wx)) in xmap.iter().enumerate() {
                let wx = E::from_f64(wx);
                let top = row0[x0] + wx * (row0[x1] - row0[x0]);
                let bot = row1[x0] + wx * (row1[x1] - row1[x0]);
                drow[ox] = top + wy * (bot - top);
            }
        }
    });
    Tensor::from_vec(&[n, c, h_out, w_out], out)
}

/// Exact transpose of the forward map: input cell `(y, x)` gathers every
/// output contribution that referenced it.
pub fn bilinear_upsample_backward<E: Element>(
    grad_out: &Tensor<E>,
    factor: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<E>> {
    if factor < 1 {
        return Err(Error::InvalidArg("upsample factor must be >= 1".into()));
    }
    let (n, c, h_out, w_out) = grad_out.dims4()?;
    if (h_out, w_out) != (h * factor, w * factor) {
        return Err(Error::Shape(format!(
            "upsample backward: grad {:?} is not {h}x{w} times {factor}",
            grad_out.dims()
        )));
    }
    let ymap = axis_map(h, h_out);
    let xmap = axis_map(w, w_out);

    // Reverse lists: for input index t, every (out_index, weight) that read it.
    let reverse = |map: &[(usize, usize, f64)], len_in: usize| {
        let mut rev: Vec<Vec<(usize, f64)>> = vec![Vec::new(); len_in];
        for (i, &(lo, hi, wt)) in map.iter().enumerate() {
            rev[lo].push((i, 1.0 - wt));
            rev[hi].push((i, wt));
        }
        rev
    };
    let yrev = reverse(&ymap, h);
    let xrev = reverse(&xmap, w);

    let god = grad_out.data();
    let plane_in = h * w;
    let plane_out = h_out * w_out;
    let mut out = vec![E::zero(); n * c * plane_in];
    parallel::for_each_chunk(&mut out, plane_in, |nc, dst| {
        let gp = &god[nc * plane_out..(nc + 1) * plane_out];
        for (y, drow) in dst.chunks_mut(w).enumerate() {
            for (x, slot) in drow.iter_mut().enumerate() {
                let mut acc = E::zero();
                for &(oy, wy) in &yrev[y] {
                    let grow = &gp[oy * w_out..(oy + 1) * w_out];
                    let wy = E::from_f64(wy);
                    for &(ox, wx) in &xrev[x] {
                        acc = acc + wy * E::from_f64(wx) * grow[ox];
                    }
                }
                *slot = acc;
            }
        }
    });
    Tensor::from_vec(&[n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;

    #[test]
    fn factor_one_is_identity() {
        let mut rng = Pcg32::new(3, 0);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[1, 2, 3, 4], 0.0, 1.0).unwrap();
        assert_eq!(bilinear_upsample_forward(&x, 1).unwrap(), x);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 2.5).unwrap();
        let y = bilinear_upsample_forward(&x, 4).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn two_pixel_row_by_hand() {
        // [0, 1] upsampled x2: sampling points -0.25, 0.25, 0.75, 1.25 clamp
        // to [0, 1] giving 0, 0.25, 0.75, 1.
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0f64, 1.0]).unwrap();
        let y = bilinear_upsample_forward(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 4]);
        let want = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in y.data()[..4].iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_transpose() {
        let mut rng = Pcg32::new(4, 0);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[1, 2, 3, 5], 0.0, 1.0).unwrap();
        let y = bilinear_upsample_forward(&x, 3).unwrap();
        let g = Tensor::<f64>::rand_normal(&mut rng, y.dims(), 0.0, 1.0).unwrap();
        let gx = bilinear_upsample_backward(&g, 3, 3, 5).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(&a, &b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn factor_zero_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]).unwrap();
        assert!(bilinear_upsample_forward(&x, 0).is_err());
    }
}
