//! Fully connected layer on `[N, C]` feature vectors (the global-context
//! perceptron).

use crate::element::Element;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// `out = x * W^T + b` with `x: [N, C_in]`, `w: [C_out, C_in]`, `b: [C_out]`.
pub fn affine_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, c_in) = x.dims2()?;
    let (c_out, wc) = w.dims2()?;
    if wc != c_in || b.dims() != [c_out] {
        return Err(Error::Shape(format!(
            "affine: x {:?}, w {:?}, b {:?}",
            x.dims(),
            w.dims(),
            b.dims()
        )));
    }
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![E::zero(); n * c_out];
    parallel::for_each_chunk(&mut out, c_out, |ni, row| {
        let xrow = &xd[ni * c_in..(ni + 1) * c_in];
        for (o, slot) in row.iter_mut().enumerate() {
            let wrow = &wd[o * c_in..(o + 1) * c_in];
            let mut acc = bd[o];
            for (&xv, &wv) in xrow.iter().zip(wrow) {
                acc = acc + xv * wv;
            }
            *slot = acc;
        }
    });
    Tensor::from_vec(&[n, c_out], out)
}

pub fn affine_backward<E: Element>(
    grad_out: &Tensor<E>,
    x: &Tensor<E>,
    w: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, c_in) = x.dims2()?;
    let (c_out, _) = w.dims2()?;
    if grad_out.dims() != [n, c_out] {
        return Err(Error::Shape("affine backward dims mismatch".into()));
    }
    let xd = x.data();
    let wd = w.data();
    let god = grad_out.data();

    let mut gx = vec![E::zero(); n * c_in];
    parallel::for_each_chunk(&mut gx, c_in, |ni, row| {
        for (c, slot) in row.iter_mut().enumerate() {
            let mut acc = E::zero();
            for o in 0..c_out {
                acc = acc + god[ni * c_out + o] * wd[o * c_in + c];
            }
            *slot = acc;
        }
    });

    let mut gw = vec![E::zero(); c_out * c_in];
    parallel::for_each_chunk(&mut gw, c_in, |o, row| {
        for (c, slot) in row.iter_mut().enumerate() {
            let mut acc = E::zero();
            for ni in 0..n {
                acc = acc + god[ni * c_out + o] * xd[ni * c_in + c];
            }
            *slot = acc;
        }
    });

    let mut gb = vec![E::zero(); c_out];
    for o in 0..c_out {
        let mut acc = E::zero();
        for ni in 0..n {
            acc = acc + god[ni * c_out + o];
        }
        gb[o] = acc;
    }

    Ok((
        Tensor::from_vec(&[n, c_in], gx)?,
        Tensor::from_vec(&[c_out, c_in], gw)?,
        Tensor::from_vec(&[c_out], gb)?,
    ))
}
