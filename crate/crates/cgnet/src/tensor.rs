//! Dense rank-<=4 tensors in row-major N,C,H,W order.
//!
//! Tensors are immutable after construction from the caller's point of view;
//! kernels build a fresh `Vec`, fill it, and freeze it. Debug builds verify
//! that no operation ever produces a NaN or infinity.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::Pcg32;

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    dims: Vec<usize>,
    data: Vec<E>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::Shape(format!(
            "rank must be 1..={MAX_RANK}, got {}",
            dims.len()
        )));
    }
    let mut n: usize = 1;
    for &d in dims {
        if d == 0 {
            return Err(Error::Shape(format!("zero extent in dims {dims:?}")));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("dims {dims:?} overflow")))?;
    }
    Ok(n)
}

impl<E: Element> Tensor<E> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let n = check_dims(dims)?;
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![E::zero(); n],
        })
    }

    pub fn full(dims: &[usize], v: E) -> Result<Self> {
        let n = check_dims(dims)?;
        let t = Tensor {
            dims: dims.to_vec(),
            data: vec![v; n],
        };
        t.debug_check_finite();
        Ok(t)
    }

    pub fn from_vec(dims: &[usize], data: Vec<E>) -> Result<Self> {
        let n = check_dims(dims)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} expect {n} values, got {}",
                data.len()
            )));
        }
        let t = Tensor {
            dims: dims.to_vec(),
            data,
        };
        t.debug_check_finite();
        Ok(t)
    }

    /// I.i.d. Gaussian samples via Box-Muller over PCG32 uniforms. Consumes
    /// exactly `2 * ceil(len / 2)` uniform draws.
    pub fn rand_normal(rng: &mut Pcg32, dims: &[usize], mean: f64, std: f64) -> Result<Self> {
        if std < 0.0 {
            return Err(Error::InvalidArg(format!("negative std {std}")));
        }
        let n = check_dims(dims)?;
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let (z0, z1) = rng.next_normal_pair();
            data.push(E::from_f64(mean + std * z0));
            if data.len() < n {
                data.push(E::from_f64(mean + std * z1));
            }
        }
        let t = Tensor {
            dims: dims.to_vec(),
            data,
        };
        t.debug_check_finite();
        Ok(t)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Extents of a rank-4 tensor as `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!("expected rank 4, got {:?}", self.dims))),
        }
    }

    /// Extents of a rank-2 tensor as `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected rank 2, got {:?}", self.dims))),
        }
    }

    /// Same data re-labelled with new dims of equal volume.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let n = check_dims(dims)?;
        if n != self.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Concatenate along the channel axis; `self`'s channels come first.
    pub fn concat_channels(&self, other: &Tensor<E>) -> Result<Self> {
        let (n, c_a, h, w) = self.dims4()?;
        let (n_b, c_b, h_b, w_b) = other.dims4()?;
        if (n, h, w) != (n_b, h_b, w_b) {
            return Err(Error::Shape(format!(
                "concat_channels: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let plane = h * w;
        let c_out = c_a + c_b;
        let mut out = vec![E::zero(); n * c_out * plane];
        for i in 0..n {
            let dst = &mut out[i * c_out * plane..(i + 1) * c_out * plane];
            dst[..c_a * plane]
                .copy_from_slice(&self.data[i * c_a * plane..(i + 1) * c_a * plane]);
            dst[c_a * plane..]
                .copy_from_slice(&other.data[i * c_b * plane..(i + 1) * c_b * plane]);
        }
        Ok(Tensor {
            dims: vec![n, c_out, h, w],
            data: out,
        })
    }

    /// Copy of channels `from..to`.
    pub fn slice_channels(&self, from: usize, to: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if from >= to || to > c {
            return Err(Error::Shape(format!(
                "slice_channels {from}..{to} of {c} channels"
            )));
        }
        let plane = h * w;
        let c_out = to - from;
        let mut out = Vec::with_capacity(n * c_out * plane);
        for i in 0..n {
            let base = (i * c + from) * plane;
            out.extend_from_slice(&self.data[base..base + c_out * plane]);
        }
        Ok(Tensor {
            dims: vec![n, c_out, h, w],
            data: out,
        })
    }

    /// Per-channel scaling: `out[n,c,h,w] = self[n,c,h,w] * gate[n,c]`.
    pub fn scale_channels(&self, gate: &Tensor<E>) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        let (gn, gc) = gate.dims2()?;
        if (gn, gc) != (n, c) {
            return Err(Error::Shape(format!(
                "scale_channels: input {:?} vs gate {:?}",
                self.dims, gate.dims
            )));
        }
        let plane = h * w;
        let mut out = vec![E::zero(); self.len()];
        let x = &self.data;
        let g = &gate.data;
        parallel::for_each_chunk(&mut out, plane, |nc, dst| {
            let gv = g[nc];
            let src = &x[nc * plane..(nc + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * gv;
            }
        });
        let t = Tensor {
            dims: self.dims.clone(),
            data: out,
        };
        t.debug_check_finite();
        Ok(t)
    }

    /// Elementwise sum of two tensors with identical dims.
    pub fn add(&self, other: &Tensor<E>) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let mut out: Vec<E> = self.data.clone();
        let rhs = &other.data;
        parallel::for_each_chunk(&mut out, 4096, |i, c| {
            let base = i * 4096;
            for (j, v) in c.iter_mut().enumerate() {
                *v = *v + rhs[base + j];
            }
        });
        let t = Tensor {
            dims: self.dims.clone(),
            data: out,
        };
        t.debug_check_finite();
        Ok(t)
    }

    /// In debug builds, verify every element is finite.
    pub(crate) fn debug_check_finite(&self) {
        #[cfg(debug_assertions)]
        {
            if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
                panic!(
                    "non-finite value {} at flat index {pos} in tensor {:?}",
                    self.data[pos], self.dims
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_full() {
        let z = Tensor::<f32>::zeros(&[1, 2, 2, 2]).unwrap();
        assert_eq!(z.len(), 8);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let f = Tensor::<f32>::full(&[3], 2.5).unwrap();
        assert_eq!(f.data(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::zeros(&[0, 1]).is_err());
        assert!(Tensor::<f32>::zeros(&[1, 2, 3, 4, 5]).is_err());
        assert!(Tensor::<f32>::zeros(&[]).is_err());
    }

    #[test]
    fn rand_normal_zero_std_is_mean() {
        let mut rng = Pcg32::new(9, 0);
        let t = Tensor::<f32>::rand_normal(&mut rng, &[5], 1.5, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn rand_normal_deterministic() {
        let a = Tensor::<f64>::rand_normal(&mut Pcg32::new(42, 0), &[4], 0.0, 1.0).unwrap();
        let b = Tensor::<f64>::rand_normal(&mut Pcg32::new(42, 0), &[4], 0.0, 1.0).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rand_normal_negative_std_rejected() {
        let mut rng = Pcg32::new(1, 0);
        assert!(Tensor::<f32>::rand_normal(&mut rng, &[3], 0.0, -1.0).is_err());
    }

    #[test]
    fn rand_normal_moments() {
        // Statistical oracle: sample mean/std of 1e5 standard normals.
        let mut rng = Pcg32::new(123, 7);
        let t = Tensor::<f64>::rand_normal(&mut rng, &[100_000], 0.0, 1.0).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let mut rng = Pcg32::new(5, 0);
        let a = Tensor::<f32>::rand_normal(&mut rng, &[1, 2, 3, 3], 0.0, 1.0).unwrap();
        let b = Tensor::<f32>::rand_normal(&mut rng, &[1, 3, 3, 3], 0.0, 1.0).unwrap();
        let cat = a.concat_channels(&b).unwrap();
        assert_eq!(cat.dims(), &[1, 5, 3, 3]);
        assert_eq!(cat.slice_channels(0, 2).unwrap(), a);
        assert_eq!(cat.slice_channels(2, 5).unwrap(), b);
    }

    #[test]
    fn concat_channel_order() {
        let a = Tensor::<f32>::full(&[1, 2, 1, 1], 1.0).unwrap();
        let b = Tensor::<f32>::from_vec(&[1, 2, 1, 1], vec![7.0, 8.0]).unwrap();
        let cat = a.concat_channels(&b).unwrap();
        // b's channel 0 lands at output channel c_a = 2.
        assert_eq!(cat.data()[2], 7.0);
        assert_eq!(cat.data()[3], 8.0);
    }

    #[test]
    fn concat_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 2, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[1, 2, 4, 3]).unwrap();
        assert!(a.concat_channels(&b).is_err());
    }

    #[test]
    fn scale_channels_basics() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Tensor::<f32>::full(&[1, 1], 1.0).unwrap();
        assert_eq!(x.scale_channels(&ones).unwrap(), x);
        let zero = Tensor::<f32>::full(&[1, 1], 0.0).unwrap();
        assert!(x.scale_channels(&zero).unwrap().data().iter().all(|&v| v == 0.0));
        let two = Tensor::<f32>::full(&[1, 1], 2.0).unwrap();
        assert_eq!(x.scale_channels(&two).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn add_basics() {
        let a = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let z = Tensor::<f32>::zeros(&[2]).unwrap();
        assert_eq!(a.add(&z).unwrap(), a);
        let neg = Tensor::<f32>::from_vec(&[2], vec![-1.0, -2.0]).unwrap();
        assert_eq!(a.add(&neg).unwrap().data(), &[0.0, 0.0]);
        assert!(a.add(&Tensor::<f32>::zeros(&[3]).unwrap()).is_err());
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic(expected = "non-finite")]
    fn nan_is_caught_in_debug() {
        let _ = Tensor::<f32>::from_vec(&[2], vec![1.0, f32::NAN]);
    }
}
