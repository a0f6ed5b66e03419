//! Layer wrappers binding kernels to named parameters in a [`ParamStore`].
//!
//! Each layer owns parameter handles only; values live in the store. The
//! train-mode forward returns the activations the backward pass needs.

use crate::element::Element;
use crate::error::Result;
use crate::model::config::ActKind;
use crate::model::params::{ParamId, ParamKind, ParamStore};
use crate::ops;
use crate::ops::{BnCache, ConvSpec};
use crate::rng::Pcg32;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

fn gaussian_init<E: Element>(
    store: &mut ParamStore<E>,
    rng: &mut Pcg32,
    name: String,
    dims: &[usize],
    fan_in: usize,
) -> ParamId {
    let std = (2.0 / fan_in as f64).sqrt();
    let t = Tensor::rand_normal(rng, dims, 0.0, std).expect("init dims");
    store.insert(name, ParamKind::Weight, t)
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub spec: ConvSpec,
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Conv2dLayer {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut Pcg32,
        prefix: &str,
        spec: ConvSpec,
    ) -> Self {
        let fan_in = spec.in_channels / spec.groups * spec.kernel_h * spec.kernel_w;
        let w = gaussian_init(store, rng, format!("{prefix}.weight"), &spec.weight_dims(), fan_in);
        let b = spec.has_bias.then(|| {
            store.insert(
                format!("{prefix}.bias"),
                ParamKind::Weight,
                Tensor::zeros(&[spec.out_channels]).expect("bias dims"),
            )
        });
        Conv2dLayer { spec, w, b }
    }

    pub fn forward<E: Element>(&self, x: &Tensor<E>, store: &ParamStore<E>) -> Result<Tensor<E>> {
        ops::conv2d_forward(
            x,
            store.value(self.w),
            self.b.map(|id| store.value(id)),
            &self.spec,
        )
    }

    /// Accumulates weight/bias gradients into the store, returns `grad_x`.
    pub fn backward<E: Element>(
        &self,
        grad_out: &Tensor<E>,
        x: &Tensor<E>,
        store: &mut ParamStore<E>,
    ) -> Result<Tensor<E>> {
        let (gx, gw, gb) = ops::conv2d_backward(grad_out, x, store.value(self.w), &self.spec)?;
        store.add_grad(self.w, &gw);
        if let (Some(bid), Some(gb)) = (self.b, gb) {
            store.add_grad(bid, &gb);
        }
        Ok(gx)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormLayer {
    pub fn new<E: Element>(store: &mut ParamStore<E>, prefix: &str, channels: usize) -> Self {
        let gamma = store.insert(
            format!("{prefix}.gamma"),
            ParamKind::Gain,
            Tensor::full(&[channels], E::one()).expect("dims"),
        );
        let beta = store.insert(
            format!("{prefix}.beta"),
            ParamKind::Gain,
            Tensor::zeros(&[channels]).expect("dims"),
        );
        let running_mean = store.insert(
            format!("{prefix}.running_mean"),
            ParamKind::Buffer,
            Tensor::zeros(&[channels]).expect("dims"),
        );
        let running_var = store.insert(
            format!("{prefix}.running_var"),
            ParamKind::Buffer,
            Tensor::full(&[channels], E::one()).expect("dims"),
        );
        BatchNormLayer {
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward_train<E: Element>(
        &self,
        x: &Tensor<E>,
        store: &mut ParamStore<E>,
    ) -> Result<(Tensor<E>, BnCache<E>)> {
        // Running stats are updated through a scratch copy so gamma/beta can
        // be borrowed from the store at the same time.
        let gamma = store.value(self.gamma).clone();
        let beta = store.value(self.beta).clone();
        let mut rm = store.value(self.running_mean).clone();
        let mut rv = store.value(self.running_var).clone();
        let out = ops::batchnorm_forward_train(x, &gamma, &beta, &mut rm, &mut rv, BN_EPS, BN_MOMENTUM)?;
        store.get_mut(self.running_mean).value = rm;
        store.get_mut(self.running_var).value = rv;
        Ok(out)
    }

    pub fn forward_infer<E: Element>(
        &self,
        x: &Tensor<E>,
        store: &ParamStore<E>,
    ) -> Result<Tensor<E>> {
        ops::batchnorm_forward_infer(
            x,
            store.value(self.gamma),
            store.value(self.beta),
            store.value(self.running_mean),
            store.value(self.running_var),
            BN_EPS,
        )
    }

    pub fn backward<E: Element>(
        &self,
        grad_out: &Tensor<E>,
        x: &Tensor<E>,
        cache: &BnCache<E>,
        store: &mut ParamStore<E>,
    ) -> Result<Tensor<E>> {
        let (gx, gg, gb) =
            ops::batchnorm_backward(grad_out, x, store.value(self.gamma), cache, BN_EPS)?;
        store.add_grad(self.gamma, &gg);
        store.add_grad(self.beta, &gb);
        Ok(gx)
    }
}

/// ReLU or per-channel PReLU, selected at build time.
#[derive(Debug, Clone)]
pub enum ActLayer {
    Relu,
    Prelu(ParamId),
}

impl ActLayer {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        kind: ActKind,
    ) -> Self {
        match kind {
            ActKind::Relu => ActLayer::Relu,
            ActKind::Prelu => ActLayer::Prelu(store.insert(
                format!("{prefix}.slope"),
                ParamKind::Gain,
                Tensor::full(&[channels], E::from_f64(PRELU_INIT)).expect("dims"),
            )),
        }
    }

    pub fn forward<E: Element>(&self, x: &Tensor<E>, store: &ParamStore<E>) -> Result<Tensor<E>> {
        match self {
            ActLayer::Relu => Ok(ops::relu_forward(x)),
            ActLayer::Prelu(id) => ops::prelu_forward(x, store.value(*id)),
        }
    }

    /// `x` is the pre-activation input saved by the forward pass.
    pub fn backward<E: Element>(
        &self,
        grad_out: &Tensor<E>,
        x: &Tensor<E>,
        store: &mut ParamStore<E>,
    ) -> Result<Tensor<E>> {
        match self {
            ActLayer::Relu => ops::relu_backward(grad_out, x),
            ActLayer::Prelu(id) => {
                let (gx, ga) = ops::prelu_backward(grad_out, x, store.value(*id))?;
                store.add_grad(*id, &ga);
                Ok(gx)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl AffineLayer {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut Pcg32,
        prefix: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let w = gaussian_init(
            store,
            rng,
            format!("{prefix}.weight"),
            &[out_features, in_features],
            in_features,
        );
        let b = store.insert(
            format!("{prefix}.bias"),
            ParamKind::Weight,
            Tensor::zeros(&[out_features]).expect("dims"),
        );
        AffineLayer { w, b }
    }

    pub fn forward<E: Element>(&self, x: &Tensor<E>, store: &ParamStore<E>) -> Result<Tensor<E>> {
        ops::affine_forward(x, store.value(self.w), store.value(self.b))
    }

    pub fn backward<E: Element>(
        &self,
        grad_out: &Tensor<E>,
        x: &Tensor<E>,
        store: &mut ParamStore<E>,
    ) -> Result<Tensor<E>> {
        let (gx, gw, gb) = ops::affine_backward(grad_out, x, store.value(self.w))?;
        store.add_grad(self.w, &gw);
        store.add_grad(self.b, &gb);
        Ok(gx)
    }
}

/// Conv -> BN -> activation, the building unit of stage 1 and block entries.
/// The convolution never carries a bias (redundant with the BN shift).
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv2dLayer,
    pub bn: BatchNormLayer,
    pub act: ActLayer,
}

#[derive(Debug, Clone)]
pub struct ConvBnActCache<E: Element> {
    pub x: Tensor<E>,
    pub conv_out: Tensor<E>,
    pub bn_cache: BnCache<E>,
    pub bn_out: Tensor<E>,
}

impl ConvBnAct {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut Pcg32,
        prefix: &str,
        spec: ConvSpec,
        kind: ActKind,
    ) -> Self {
        debug_assert!(!spec.has_bias);
        let out_c = spec.out_channels;
        let conv = Conv2dLayer::new(store, rng, &format!("{prefix}.conv"), spec);
        let bn = BatchNormLayer::new(store, &format!("{prefix}.bn"), out_c);
        let act = ActLayer::new(store, &format!("{prefix}.act"), out_c, kind);
        ConvBnAct { conv, bn, act }
    }

    pub fn forward_train<E: Element>(
        &self,
        x: &Tensor<E>,
        store: &mut ParamStore<E>,
    ) -> Result<(Tensor<E>, ConvBnActCache<E>)> {
        let conv_out = self.conv.forward(x, store)?;
        let (bn_out, bn_cache) = self.bn.forward_train(&conv_out, store)?;
        let y = self.act.forward(&bn_out, store)?;
        Ok((
            y,
            ConvBnActCache {
                x: x.clone(),
                conv_out,
                bn_cache,
                bn_out,
            },
        ))
    }

    pub fn forward_infer<E: Element>(
        &self,
        x: &Tensor<E>,
        store: &ParamStore<E>,
    ) -> Result<Tensor<E>> {
        let conv_out = self.conv.forward(x, store)?;
        let bn_out = self.bn.forward_infer(&conv_out, store)?;
        self.act.forward(&bn_out, store)
    }

    pub fn backward<E: Element>(
        &self,
        grad_out: &Tensor<E>,
        cache: &ConvBnActCache<E>,
        store: &mut ParamStore<E>,
    ) -> Result<Tensor<E>> {
        let g = self.act.backward(grad_out, &cache.bn_out, store)?;
        let g = self.bn.backward(&g, &cache.conv_out, &cache.bn_cache, store)?;
        self.conv.backward(&g, &cache.x, store)
    }
}

/// BN -> activation, used after stage-input concatenations.
#[derive(Debug, Clone)]
pub struct BnAct {
    pub bn: BatchNormLayer,
    pub act: ActLayer,
}

#[derive(Debug, Clone)]
pub struct BnActCache<E: Element> {
    pub x: Tensor<E>,
    pub bn_cache: BnCache<E>,
    pub bn_out: Tensor<E>,
}

impl BnAct {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        kind: ActKind,
    ) -> Self {
        BnAct {
            bn: BatchNormLayer::new(store, &format!("{prefix}.bn"), channels),
            act: ActLayer::new(store, &format!("{prefix}.act"), channels, kind),
        }
    }

    pub fn forward_train<E: Element>(
        &self,
        x: &Tensor<E>,
        store: &mut ParamStore<E>,
    ) -> Result<(Tensor<E>, BnActCache<E>)> {
        let (bn_out, bn_cache) = self.bn.forward_train(x, store)?;
        let y = self.act.forward(&bn_out, store)?;
        Ok((
            y,
            BnActCache {
                x: x.clone(),
                bn_cache,
                bn_out,
            },
        ))
    }

    pub fn forward_infer<E: Element>(
        &self,
        x: &Tensor<E>,
        store: &ParamStore<E>,
    ) -> Result<Tensor<E>> {
        let bn_out = self.bn.forward_infer(x, store)?;
        self.act.forward(&bn_out, store)
    }

    pub fn backward<E: Element>(
        &self,
        grad_out: &Tensor<E>,
        cache: &BnActCache<E>,
        store: &mut ParamStore<E>,
    ) -> Result<Tensor<E>> {
        let g = self.act.backward(grad_out, &cache.bn_out, store)?;
        self.bn.backward(&g, &cache.x, &cache.bn_cache, store)
    }
}
