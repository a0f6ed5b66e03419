//! Direct 2D convolution, NCHW, with stride, zero padding, dilation and
//! grouping. `groups == in_channels == out_channels` is the channel-wise
//! (depthwise) case used by the local and surrounding context extractors.
//!
//! The forward loop walks kernel taps in `(channel, u, v)` order and adds
//! each tap's contribution over the valid output rectangle, so every output
//! element accumulates its sum in the same fixed order no matter how the
//! planes are distributed across threads.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square-kernel helper covering every convolution the network uses.
    #[allow(clippy::too_many_arguments)]
    pub fn square(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
        has_bias: bool,
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            dilation,
            groups,
            has_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.groups == 0
        {
            return Err(Error::InvalidArg("conv extents must be positive".into()));
        }
        if self.stride < 1 || self.dilation < 1 {
            return Err(Error::InvalidArg(format!(
                "stride {} and dilation {} must be >= 1",
                self.stride, self.dilation
            )));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::InvalidArg(format!(
                "groups {} must divide in {} and out {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn is_channelwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    /// Output extent: `floor((len + 2p - d*(k-1) - 1) / s) + 1`.
    fn out_extent(&self, len: usize, kernel: usize) -> Result<usize> {
        let span = len as i64 + 2 * self.padding as i64
            - self.dilation as i64 * (kernel as i64 - 1)
            - 1;
        if span < 0 {
            return Err(Error::Shape(format!(
                "empty convolution output for input extent {len}"
            )));
        }
        Ok((span / self.stride as i64) as usize + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            self.out_extent(h, self.kernel_h)?,
            self.out_extent(w, self.kernel_w)?,
        ))
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }
}

/// Output index range `lo..hi` such that `o*stride - pad + tap*dil` stays
/// inside `0..len_in`.
fn valid_out_range(len_in: usize, len_out: usize, stride: usize, pad: i64, tap_off: i64) -> (usize, usize) {
    let s = stride as i64;
    // o*s >= pad - tap_off
    let lo_num = pad - tap_off;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
    // o*s <= len_in - 1 + pad - tap_off
    let hi_num = len_in as i64 - 1 + pad - tap_off;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1).min(len_out as i64);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn check_forward_dims<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Result<(usize, usize, usize, usize, usize)> {
    spec.validate()?;
    let (n, c_in, h, w_in) = x.dims4()?;
    if c_in != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv input has {c_in} channels, spec expects {}",
            spec.in_channels
        )));
    }
    if w.dims() != spec.weight_dims() {
        return Err(Error::Shape(format!(
            "conv weight dims {:?}, spec expects {:?}",
            w.dims(),
            spec.weight_dims()
        )));
    }
    match (b, spec.has_bias) {
        (Some(b), true) => {
            if b.dims() != [spec.out_channels] {
                return Err(Error::Shape(format!(
                    "conv bias dims {:?}, expected [{}]",
                    b.dims(),
                    spec.out_channels
                )));
            }
        }
        (None, false) => {}
        _ => {
            return Err(Error::InvalidArg(
                "bias presence does not match spec.has_bias".into(),
            ))
        }
    }
    let (h_out, w_out) = spec.out_hw(h, w_in)?;
    Ok((n, h, w_in, h_out, w_out))
}

pub fn conv2d_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    let (n, h, w_in, h_out, w_out) = check_forward_dims(x, w, b, spec)?;
    let c_in = spec.in_channels;
    let c_out = spec.out_channels;
    let cpg = c_in / spec.groups;
    let out_per_group = c_out / spec.groups;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (s, d) = (spec.stride, spec.dilation);
    let pad = spec.padding as i64;
    let plane_in = h * w_in;
    let plane_out = h_out * w_out;

    let xd = x.data();
    let wd = w.data();
    let bd = b.map(|t| t.data());

    let mut out = vec![E::zero(); n * c_out * plane_out];
    parallel::for_each_chunk(&mut out, plane_out, |no, dst| {
        let ni = no / c_out;
        let o = no % c_out;
        let g = o / out_per_group;
        if let Some(bias) = bd {
            let bv = bias[o];
            for v in dst.iter_mut() {
                *v = bv;
            }
        }
        for cg in 0..cpg {
            let c = g * cpg + cg;
            let xc = &xd[(ni * c_in + c) * plane_in..(ni * c_in + c + 1) * plane_in];
            for u in 0..kh {
                let u_off = (u * d) as i64;
                let (oh_lo, oh_hi) = valid_out_range(h, h_out, s, pad, u_off);
                if oh_lo >= oh_hi {
                    continue;
                }
                for v in 0..kw {
                    let v_off = (v * d) as i64;
                    let (ow_lo, ow_hi) = valid_out_range(w_in, w_out, s, pad, v_off);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let wv = wd[((o * cpg + cg) * kh + u) * kw + v];
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * s) as i64 - pad + u_off;
                        let xrow = &xc[ih as usize * w_in..(ih as usize + 1) * w_in];
                        let orow = &mut dst[oh * w_out..(oh + 1) * w_out];
                        let iw0 = (ow_lo * s) as i64 - pad + v_off;
                        if s == 1 {
                            let src = &xrow[iw0 as usize..iw0 as usize + (ow_hi - ow_lo)];
                            for (oslot, &xv) in orow[ow_lo..ow_hi].iter_mut().zip(src) {
                                *oslot = *oslot + wv * xv;
                            }
                        } else {
                            let mut iw = iw0 as usize;
                            for oslot in orow[ow_lo..ow_hi].iter_mut() {
                                *oslot = *oslot + wv * xrow[iw];
                                iw += s;
                            }
                        }
                    }
                }
            }
        }
    });

    Tensor::from_vec(&[n, c_out, h_out, w_out], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
/// `grad_b` is `Some` exactly when the spec carries a bias.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<E: Element>(
    grad_out: &Tensor<E>,
    x: &Tensor<E>,
    w: &Tensor<E>,
    spec: &ConvSpec,
) -> Result<(Tensor<E>, Tensor<E>, Option<Tensor<E>>)> {
    spec.validate()?;
    let (n, c_in, h, w_in) = x.dims4()?;
    let (h_out, w_out) = spec.out_hw(h, w_in)?;
    if grad_out.dims() != [n, spec.out_channels, h_out, w_out] {
        return Err(Error::Shape(format!(
            "grad_out dims {:?} do not match forward output [{n}, {}, {h_out}, {w_out}]",
            grad_out.dims(),
            spec.out_channels
        )));
    }
    if w.dims() != spec.weight_dims() {
        return Err(Error::Shape(format!(
            "conv weight dims {:?}, spec expects {:?}",
            w.dims(),
            spec.weight_dims()
        )));
    }
    let c_out = spec.out_channels;
    let cpg = c_in / spec.groups;
    let out_per_group = c_out / spec.groups;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (s, d) = (spec.stride, spec.dilation);
    let pad = spec.padding as i64;
    let plane_in = h * w_in;
    let plane_out = h_out * w_out;

    let god = grad_out.data();
    let xd = x.data();
    let wd = w.data();

    // Input gradient: scatter each tap's contribution into one (n, c) plane.
    let mut gx = vec![E::zero(); n * c_in * plane_in];
    parallel::for_each_chunk(&mut gx, plane_in, |nc, dst| {
        let ni = nc / c_in;
        let c = nc % c_in;
        let g = c / cpg;
        let cg = c % cpg;
        for og in 0..out_per_group {
            let o = g * out_per_group + og;
            let go_plane = &god[(ni * c_out + o) * plane_out..(ni * c_out + o + 1) * plane_out];
            for u in 0..kh {
                let u_off = (u * d) as i64;
                let (oh_lo, oh_hi) = valid_out_range(h, h_out, s, pad, u_off);
                if oh_lo >= oh_hi {
                    continue;
                }
                for v in 0..kw {
                    let v_off = (v * d) as i64;
                    let (ow_lo, ow_hi) = valid_out_range(w_in, w_out, s, pad, v_off);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let wv = wd[((o * cpg + cg) * kh + u) * kw + v];
                    for oh in oh_lo..oh_hi {
                        let ih = ((oh * s) as i64 - pad + u_off) as usize;
                        let drow = &mut dst[ih * w_in..(ih + 1) * w_in];
                        let gorow = &go_plane[oh * w_out..(oh + 1) * w_out];
                        let iw0 = ((ow_lo * s) as i64 - pad + v_off) as usize;
                        let mut iw = iw0;
                        for &gv in gorow[ow_lo..ow_hi].iter() {
                            drow[iw] = drow[iw] + wv * gv;
                            iw += s;
                        }
                    }
                }
            }
        }
    });

    // Weight gradient: one (cpg, kh, kw) slice per output channel.
    let wslice = cpg * kh * kw;
    let mut gw = vec![E::zero(); c_out * wslice];
    parallel::for_each_chunk(&mut gw, wslice, |o, dst| {
        let g = o / out_per_group;
        for cg in 0..cpg {
            let c = g * cpg + cg;
            for u in 0..kh {
                let u_off = (u * d) as i64;
                let (oh_lo, oh_hi) = valid_out_range(h, h_out, s, pad, u_off);
                for v in 0..kw {
                    let v_off = (v * d) as i64;
                    let (ow_lo, ow_hi) = valid_out_range(w_in, w_out, s, pad, v_off);
                    let mut acc = E::zero();
                    if oh_lo < oh_hi && ow_lo < ow_hi {
                        for ni in 0..n {
                            let xc = &xd[(ni * c_in + c) * plane_in..(ni * c_in + c + 1) * plane_in];
                            let go_plane =
                                &god[(ni * c_out + o) * plane_out..(ni * c_out + o + 1) * plane_out];
                            for oh in oh_lo..oh_hi {
                                let ih = ((oh * s) as i64 - pad + u_off) as usize;
                                let xrow = &xc[ih * w_in..(ih + 1) * w_in];
                                let gorow = &go_plane[oh * w_out..(oh + 1) * w_out];
                                let iw0 = ((ow_lo * s) as i64 - pad + v_off) as usize;
                                let mut iw = iw0;
                                for &gv in gorow[ow_lo..ow_hi].iter() {
                                    acc = acc + xrow[iw] * gv;
                                    iw += s;
                                }
                            }
                        }
                    }
                    dst[(cg * kh + u) * kw + v] = acc;
                }
            }
        }
    });

    let grad_b = if spec.has_bias {
        let mut gb = vec![E::zero(); c_out];
        parallel::for_each_chunk(&mut gb, 1, |o, dst| {
            let mut acc = E::zero();
            for ni in 0..n {
                let go_plane = &god[(ni * c_out + o) * plane_out..(ni * c_out + o + 1) * plane_out];
                for &gv in go_plane {
                    acc = acc + gv;
                }
            }
            dst[0] = acc;
        });
        Some(Tensor::from_vec(&[c_out], gb)?)
    } else {
        None
    };

    Ok((
        Tensor::from_vec(&[n, c_in, h, w_in], gx)?,
        Tensor::from_vec(&spec.weight_dims(), gw)?,
        grad_b,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;

    /// Independent oracle: the convolution sum written as six nested loops
    /// straight from the definition, zero padding included.
    pub(crate) fn naive_conv2d(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
        spec: &ConvSpec,
    ) -> Tensor<f64> {
        let (n, c_in, h, w_in) = x.dims4().unwrap();
        let (h_out, w_out) = spec.out_hw(h, w_in).unwrap();
        let c_out = spec.out_channels;
        let cpg = c_in / spec.groups;
        let opg = c_out / spec.groups;
        let mut out = vec![0.0; n * c_out * h_out * w_out];
        for ni in 0..n {
            for o in 0..c_out {
                let g = o / opg;
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = b.map(|t| t.data()[o]).unwrap_or(0.0);
                        for cg in 0..cpg {
                            let c = g * cpg + cg;
                            for u in 0..spec.kernel_h {
                                for v in 0..spec.kernel_w {
                                    let ih = (oh * spec.stride) as i64 - spec.padding as i64
                                        + (u * spec.dilation) as i64;
                                    let iw = (ow * spec.stride) as i64 - spec.padding as i64
                                        + (v * spec.dilation) as i64;
                                    let xv = if ih >= 0
                                        && iw >= 0
                                        && (ih as usize) < h
                                        && (iw as usize) < w_in
                                    {
                                        x.data()[((ni * c_in + c) * h + ih as usize) * w_in
                                            + iw as usize]
                                    } else {
                                        0.0
                                    };
                                    acc += w.data()
                                        [((o * cpg + cg) * spec.kernel_h + u) * spec.kernel_w + v]
                                        * xv;
                                }
                            }
                        }
                        out[((ni * c_out + o) * h_out + oh) * w_out + ow] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, c_out, h_out, w_out], out).unwrap()
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        assert_eq!(a.dims(), b.dims());
        for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
            assert!(
                (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                "index {i}: {x} vs {y}"
            );
        }
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut rng = Pcg32::new(1, 0);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[2, 3, 4, 5], 0.0, 1.0).unwrap();
        // 1x1 conv with an identity matrix over channels.
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = Tensor::from_vec(&[3, 3, 1, 1], w).unwrap();
        let spec = ConvSpec::square(3, 3, 1, 1, 0, 1, 1, false);
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weight_gives_bias_map() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 3], 5.0).unwrap();
        let w = Tensor::<f64>::zeros(&[4, 2, 3, 3]).unwrap();
        let b = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec = ConvSpec::square(2, 4, 3, 1, 1, 1, 1, true);
        let y = conv2d_forward(&x, &w, Some(&b), &spec).unwrap();
        let (_, _, h_out, w_out) = y.dims4().unwrap();
        for o in 0..4 {
            for p in 0..h_out * w_out {
                assert_eq!(y.data()[o * h_out * w_out + p], (o + 1) as f64);
            }
        }
    }

    #[test]
    fn dilated_center_value() {
        // x[i,j] = 5i + j on a 5x5 grid, all-ones 3x3 kernel, dilation 2,
        // padding 2: the center output sums x over i,j in {0,2,4}.
        let x = Tensor::from_vec(
            &[1, 1, 5, 5],
            (0..25).map(|k| (5 * (k / 5) + k % 5) as f64).collect(),
        )
        .unwrap();
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0).unwrap();
        let spec = ConvSpec::square(1, 1, 3, 1, 2, 2, 1, false);
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y.dims(), &[1, 1, 5, 5]);
        assert_eq!(y.data()[2 * 5 + 2], 108.0);
        assert_close(&y, &naive_conv2d(&x, &w, None, &spec), 1e-12);
    }

    #[test]
    fn matches_naive_oracle_on_varied_specs() {
        let cases = [
            ConvSpec::square(3, 4, 3, 1, 1, 1, 1, true),
            ConvSpec::square(3, 4, 3, 2, 1, 1, 1, false),
            ConvSpec::square(4, 4, 3, 1, 2, 2, 4, false),
            ConvSpec::square(6, 6, 3, 1, 4, 4, 6, false),
            ConvSpec::square(4, 6, 3, 2, 1, 1, 2, true),
            ConvSpec::square(5, 7, 1, 1, 0, 1, 1, true),
        ];
        let mut rng = Pcg32::new(77, 0);
        for spec in cases {
            let x =
                Tensor::<f64>::rand_normal(&mut rng, &[2, spec.in_channels, 9, 7], 0.0, 1.0)
                    .unwrap();
            let w = Tensor::<f64>::rand_normal(&mut rng, &spec.weight_dims(), 0.0, 0.5).unwrap();
            let b = if spec.has_bias {
                Some(
                    Tensor::<f64>::rand_normal(&mut rng, &[spec.out_channels], 0.0, 0.5).unwrap(),
                )
            } else {
                None
            };
            let y = conv2d_forward(&x, &w, b.as_ref(), &spec).unwrap();
            let want = naive_conv2d(&x, &w, b.as_ref(), &spec);
            assert_close(&y, &want, 1e-12);
        }
    }

    #[test]
    fn channelwise_perturbation_stays_in_channel() {
        let spec = ConvSpec::square(4, 4, 3, 1, 2, 2, 4, false);
        let mut rng = Pcg32::new(3, 0);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[1, 4, 6, 6], 0.0, 1.0).unwrap();
        let w = Tensor::<f64>::rand_normal(&mut rng, &spec.weight_dims(), 0.0, 1.0).unwrap();
        let y0 = conv2d_forward(&x, &w, None, &spec).unwrap();
        let mut bumped = x.data().to_vec();
        bumped[2 * 36 + 7] += 1.0; // channel 2
        let x1 = Tensor::from_vec(x.dims(), bumped).unwrap();
        let y1 = conv2d_forward(&x1, &w, None, &spec).unwrap();
        for c in 0..4 {
            let changed = (0..36).any(|p| y0.data()[c * 36 + p] != y1.data()[c * 36 + p]);
            assert_eq!(changed, c == 2, "channel {c}");
        }
    }

    #[test]
    fn linearity_in_input() {
        let spec = ConvSpec::square(3, 5, 3, 2, 1, 1, 1, true);
        let mut rng = Pcg32::new(11, 0);
        let x1 = Tensor::<f64>::rand_normal(&mut rng, &[1, 3, 8, 8], 0.0, 1.0).unwrap();
        let x2 = Tensor::<f64>::rand_normal(&mut rng, &[1, 3, 8, 8], 0.0, 1.0).unwrap();
        let w = Tensor::<f64>::rand_normal(&mut rng, &spec.weight_dims(), 0.0, 1.0).unwrap();
        let b = Tensor::<f64>::rand_normal(&mut rng, &[5], 0.0, 1.0).unwrap();
        let lhs = conv2d_forward(&x1.add(&x2).unwrap(), &w, Some(&b), &spec).unwrap();
        let y1 = conv2d_forward(&x1, &w, Some(&b), &spec).unwrap();
        let y2 = conv2d_forward(&x2, &w, Some(&b), &spec).unwrap();
        // forward(x1+x2) == forward(x1) + forward(x2) - bias_map
        let (_, c_out, h_out, w_out) = lhs.dims4().unwrap();
        for o in 0..c_out {
            for p in 0..h_out * w_out {
                let i = o * h_out * w_out + p;
                let rhs = y1.data()[i] + y2.data()[i] - b.data()[o];
                let l = lhs.data()[i];
                assert!(
                    (l - rhs).abs() <= 1e-12 * (1.0 + l.abs().max(rhs.abs())),
                    "{l} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn backward_zero_grad_out() {
        let spec = ConvSpec::square(2, 3, 3, 1, 1, 1, 1, true);
        let mut rng = Pcg32::new(4, 0);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[1, 2, 5, 5], 0.0, 1.0).unwrap();
        let w = Tensor::<f64>::rand_normal(&mut rng, &spec.weight_dims(), 0.0, 1.0).unwrap();
        let go = Tensor::<f64>::zeros(&[1, 3, 5, 5]).unwrap();
        let (gx, gw, gb) = conv2d_backward(&go, &x, &w, &spec).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_identity_pointwise() {
        let mut rng = Pcg32::new(5, 0);
        let x = Tensor::<f64>::rand_normal(&mut rng, &[1, 2, 3, 3], 0.0, 1.0).unwrap();
        let mut w = vec![0.0; 4];
        w[0] = 1.0;
        w[3] = 1.0;
        let w = Tensor::from_vec(&[2, 2, 1, 1], w).unwrap();
        let spec = ConvSpec::square(2, 2, 1, 1, 0, 1, 1, false);
        let go = Tensor::<f64>::rand_normal(&mut rng, &[1, 2, 3, 3], 0.0, 1.0).unwrap();
        let (gx, _, _) = conv2d_backward(&go, &x, &w, &spec).unwrap();
        assert_eq!(gx, go);
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]).unwrap();
        let spec = ConvSpec::square(3, 4, 3, 1, 0, 4, 1, false);
        let w = Tensor::<f32>::zeros(&spec.weight_dims()).unwrap();
        // dilation 4 over a 3-tap kernel spans 9 > 4: empty output
        assert!(conv2d_forward(&x, &w, None, &spec).is_err());
        let bad_groups = ConvSpec::square(3, 4, 3, 1, 1, 1, 2, false);
        let w2 = Tensor::<f32>::zeros(&[4, 1, 3, 3]).unwrap();
        assert!(conv2d_forward(&x, &w2, None, &bad_groups).is_err());
    }
}
