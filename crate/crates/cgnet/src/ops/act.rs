//! Elementwise nonlinearities: ReLU, per-channel PReLU, and the logistic
//! sigmoid used by the global-context gate.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

pub fn relu_forward<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let mut out = x.data().to_vec();
    parallel::for_each_chunk(&mut out, 4096, |_, c| {
        for v in c.iter_mut() {
            if *v < E::zero() {
                *v = E::zero();
            }
        }
    });
    Tensor::from_vec(x.dims(), out).expect("same dims")
}

/// Gradient convention at exactly 0: the subgradient 0 is used.
pub fn relu_backward<E: Element>(grad_out: &Tensor<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    if grad_out.dims() != x.dims() {
        return Err(Error::Shape("relu backward dims mismatch".into()));
    }
    let xd = x.data();
    let mut out = grad_out.data().to_vec();
    parallel::for_each_chunk(&mut out, 4096, |i, c| {
        let base = i * 4096;
        for (j, v) in c.iter_mut().enumerate() {
            if xd[base + j] <= E::zero() {
                *v = E::zero();
            }
        }
    });
    Tensor::from_vec(x.dims(), out)
}

fn check_slope<E: Element>(x: &Tensor<E>, slope: &Tensor<E>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if slope.dims() != [c] {
        return Err(Error::Shape(format!(
            "prelu slope dims {:?}, input has {c} channels",
            slope.dims()
        )));
    }
    Ok((n, c, h * w))
}

pub fn prelu_forward<E: Element>(x: &Tensor<E>, slope: &Tensor<E>) -> Result<Tensor<E>> {
    let (_, c, plane) = check_slope(x, slope)?;
    let sd = slope.data();
    let mut out = x.data().to_vec();
    parallel::for_each_chunk(&mut out, plane, |nc, dst| {
        let a = sd[nc % c];
        for v in dst.iter_mut() {
            if *v <= E::zero() {
                *v = a * *v;
            }
        }
    });
    Tensor::from_vec(x.dims(), out)
}

/// `grad_x = grad_out * (x > 0 ? 1 : a_c)`, `grad_a[c] = sum over x <= 0 of
/// grad_out * x`.
pub fn prelu_backward<E: Element>(
    grad_out: &Tensor<E>,
    x: &Tensor<E>,
    slope: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (n, c, plane) = check_slope(x, slope)?;
    if grad_out.dims() != x.dims() {
        return Err(Error::Shape("prelu backward dims mismatch".into()));
    }
    let xd = x.data();
    let god = grad_out.data();
    let sd = slope.data();

    let mut gx = god.to_vec();
    parallel::for_each_chunk(&mut gx, plane, |nc, dst| {
        let a = sd[nc % c];
        let xs = &xd[nc * plane..(nc + 1) * plane];
        for (v, &xv) in dst.iter_mut().zip(xs) {
            if xv <= E::zero() {
                *v = a * *v;
            }
        }
    });

    let mut ga = vec![E::zero(); c];
    parallel::for_each_chunk(&mut ga, 1, |ci, dst| {
        let mut acc = E::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for p in 0..plane {
                let xv = xd[base + p];
                if xv <= E::zero() {
                    acc = acc + god[base + p] * xv;
                }
            }
        }
        dst[0] = acc;
    });

    Ok((Tensor::from_vec(x.dims(), gx)?, Tensor::from_vec(&[c], ga)?))
}

pub fn sigmoid_forward<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let mut out = x.data().to_vec();
    parallel::for_each_chunk(&mut out, 4096, |_, chunk| {
        for v in chunk.iter_mut() {
            // Stable in both tails: never exponentiates a positive argument.
            let t = (-v.abs()).exp();
            *v = if *v >= E::zero() {
                E::one() / (E::one() + t)
            } else {
                t / (E::one() + t)
            };
        }
    });
    Tensor::from_vec(x.dims(), out).expect("same dims")
}

/// Backward from the saved forward output `y`: `grad = grad_out * y * (1-y)`.
pub fn sigmoid_backward<E: Element>(grad_out: &Tensor<E>, y: &Tensor<E>) -> Result<Tensor<E>> {
    if grad_out.dims() != y.dims() {
        return Err(Error::Shape("sigmoid backward dims mismatch".into()));
    }
    let yd = y.data();
    let mut out = grad_out.data().to_vec();
    parallel::for_each_chunk(&mut out, 4096, |i, c| {
        let base = i * 4096;
        for (j, v) in c.iter_mut().enumerate() {
            let s = yd[base + j];
            *v = *v * s * (E::one() - s);
        }
    });
    Tensor::from_vec(y.dims(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;

    #[test]
    fn relu_cases() {
        let x = Tensor::from_vec(&[4], vec![-2.0f64, -0.5, 0.0, 3.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 3.0]);
        let go = Tensor::full(&[4], 1.0).unwrap();
        let gx = relu_backward(&go, &x).unwrap();
        // subgradient at 0 is 0
        assert_eq!(gx.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn prelu_matches_definition() {
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![-2.0f64, 0.0, 5.0]).unwrap();
        let a = Tensor::full(&[1], 0.25).unwrap();
        let y = prelu_forward(&x, &a).unwrap();
        assert_eq!(y.data(), &[-0.5, 0.0, 5.0]);

        // a = 0 reduces to ReLU
        let a0 = Tensor::zeros(&[1]).unwrap();
        let y0 = prelu_forward(&x, &a0).unwrap();
        assert_eq!(y0.data(), relu_forward(&x).data());

        // positive inputs pass through untouched
        let xp = Tensor::from_vec(&[1, 1, 1, 2], vec![1.5f64, 2.0]).unwrap();
        assert_eq!(prelu_forward(&xp, &a).unwrap(), xp);
    }

    #[test]
    fn prelu_backward_slope_grad() {
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![-2.0f64, 1.0, -3.0]).unwrap();
        let a = Tensor::full(&[1], 0.25).unwrap();
        let go = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0f64, 1.0, 2.0]).unwrap();
        let (gx, ga) = prelu_backward(&go, &x, &a).unwrap();
        assert_eq!(gx.data(), &[0.25, 1.0, 0.5]);
        // sum over x<=0 of go*x = 1*(-2) + 2*(-3) = -8
        assert_eq!(ga.data(), &[-8.0]);
    }

    #[test]
    fn sigmoid_values_and_saturation() {
        let x = Tensor::from_vec(&[3], vec![0.0f64, 40.0, -40.0]).unwrap();
        let y = sigmoid_forward(&x);
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
        assert!(y.data()[2].abs() < 1e-12);
        assert!(y.data().iter().all(|v| v.is_finite()));

        // sigma'(0) = 0.25
        let go = Tensor::full(&[3], 1.0).unwrap();
        let g = sigmoid_backward(&go, &y).unwrap();
        assert!((g.data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_extreme_f32_is_finite() {
        let x = Tensor::from_vec(&[2], vec![200.0f32, -200.0]).unwrap();
        let y = sigmoid_forward(&x);
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn prelu_channel_mismatch() {
        let mut rng = Pcg32::new(1, 0);
        let x = Tensor::<f32>::rand_normal(&mut rng, &[1, 3, 2, 2], 0.0, 1.0).unwrap();
        let a = Tensor::full(&[2], 0.25).unwrap();
        assert!(prelu_forward(&x, &a).is_err());
    }
}
