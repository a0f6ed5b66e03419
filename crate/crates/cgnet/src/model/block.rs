//! The context-guided block: a local 3x3 channel-wise branch, a dilated
//! surrounding-context branch, a concatenation joint extractor, and a global
//! channel gate, with optional residual connections.

use crate::element::Element;
use crate::error::Result;
use crate::model::config::{CgBlockConfig, Residual};
use crate::model::layers::{ActLayer, BatchNormLayer, Conv2dLayer, ConvBnAct, ConvBnActCache};
use crate::model::params::ParamStore;
use crate::ops;
use crate::ops::{BnCache, ConvSpec};
use crate::rng::Pcg32;
use crate::tensor::Tensor;

/// Global context extractor: pool -> affine -> ReLU -> affine -> sigmoid ->
/// per-channel scale.
#[derive(Debug, Clone)]
pub struct GlobalGate {
    fc1: crate::model::layers::AffineLayer,
    fc2: crate::model::layers::AffineLayer,
}

#[derive(Debug, Clone)]
pub struct GlobalGateCache<E: Element> {
    x: Tensor<E>,
    pooled: Tensor<E>,
    h1: Tensor<E>,
    relu_out: Tensor<E>,
    gate: Tensor<E>,
}

impl GlobalGate {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut Pcg32,
        prefix: &str,
        channels: usize,
        reduction: usize,
    ) -> Self {
        let hidden = channels / reduction;
        GlobalGate {
            fc1: crate::model::layers::AffineLayer::new(
                store,
                rng,
                &format!("{prefix}.fc1"),
                channels,
                hidden,
            ),
            fc2: crate::model::layers::AffineLayer::new(
                store,
                rng,
                &format!("{prefix}.fc2"),
                hidden,
                channels,
            ),
        }
    }

    fn gate<E: Element>(&self, x: &Tensor<E>, store: &ParamStore<E>) -> Result<GlobalGateCache<E>> {
        let pooled = ops::global_avg_pool_forward(x)?;
        let h1 = self.fc1.forward(&pooled, store)?;
        let relu_out = ops::relu_forward(&h1);
        let h2 = self.fc2.forward(&relu_out, store)?;
        let gate = ops::sigmoid_forward(&h2);
        Ok(GlobalGateCache {
            x: x.clone(),
            pooled,
            h1,
            relu_out,
            gate,
        })
    }

    pub fn forward_train<E: Element>(
        &self,
        x: &Tensor<E>,
        store: &ParamStore<E>,
    ) -> Result<(Tensor<E>, GlobalGateCache<E>)> {
        let cache = self.gate(x, store)?;
        let y = x.scale_channels(&cache.gate)?;
        Ok((y, cache))
    }

    pub fn forward_infer<E: Element>(
        &self,
        x: &Tensor<E>,
        store: &ParamStore<E>,
    ) -> Result<Tensor<E>> {
        let cache = self.gate(x, store)?;
        x.scale_channels(&cache.gate)
    }

    pub fn backward<E: Element>(
        &self,
        grad_out: &Tensor<E>,
        cache: &GlobalGateCache<E>,
        store: &mut ParamStore<E>,
    ) -> Result<Tensor<E>> {
        let (grad_x_scale, grad_gate) =
            ops::scale_channels_backward(grad_out, &cache.x, &cache.gate)?;
        let g = ops::sigmoid_backward(&grad_gate, &cache.gate)?;
        let g = self.fc2.backward(&g, &cache.relu_out, store)?;
        let g = ops::relu_backward(&g, &cache.h1)?;
        let g = self.fc1.backward(&g, &cache.pooled, store)?;
        let (_, _, h, w) = cache.x.dims4()?;
        let grad_x_pool = ops::global_avg_pool_backward(&g, h, w)?;
        grad_x_scale.add(&grad_x_pool)
    }
}

#[derive(Debug, Clone)]
pub struct CgBlock {
    pub cfg: CgBlockConfig,
    entry: ConvBnAct,
    loc: Conv2dLayer,
    sur: Conv2dLayer,
    joi_bn: BatchNormLayer,
    joi_act: ActLayer,
    /// Downsampling variant only: 1x1 conv mapping 2*out back to out.
    reduce: Option<Conv2dLayer>,
    /// Optional pointwise inter-channel mixing after the joint extractor.
    inter: Option<Conv2dLayer>,
    glo: Option<GlobalGate>,
}

#[derive(Debug, Clone)]
pub struct CgBlockCache<E: Element> {
    entry: ConvBnActCache<E>,
    a: Tensor<E>,
    cat: Tensor<E>,
    joi_bn_cache: BnCache<E>,
    bn_out: Tensor<E>,
    /// Joint feature after activation; input to `reduce`/`inter`.
    j: Tensor<E>,
    glo: Option<GlobalGateCache<E>>,
}

impl CgBlock {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut Pcg32,
        prefix: &str,
        cfg: CgBlockConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let (n_in, n_out) = (cfg.in_channels, cfg.out_channels);
        let act = cfg.activation;

        // Downsampling blocks enter through a full 3x3 stride-2 conv at full
        // width; others reduce to a half-width trunk with a pointwise conv.
        let (entry_spec, branch) = if cfg.downsample {
            (ConvSpec::square(n_in, n_out, 3, 2, 1, 1, 1, false), n_out)
        } else {
            (ConvSpec::square(n_in, n_out / 2, 1, 1, 0, 1, 1, false), n_out / 2)
        };
        let entry = ConvBnAct::new(store, rng, &format!("{prefix}.entry"), entry_spec, act);

        let loc_spec = ConvSpec::square(branch, branch, 3, 1, 1, 1, branch, false);
        let loc = Conv2dLayer::new(store, rng, &format!("{prefix}.loc"), loc_spec);
        // Without the surrounding branch a second dilation-1 channel-wise
        // conv of identical size takes its place.
        let sur_dil = if cfg.use_sur { cfg.dilation } else { 1 };
        let sur_spec = ConvSpec::square(branch, branch, 3, 1, sur_dil, sur_dil, branch, false);
        let sur = Conv2dLayer::new(store, rng, &format!("{prefix}.sur"), sur_spec);

        let joint = 2 * branch;
        let joi_bn = BatchNormLayer::new(store, &format!("{prefix}.joi.bn"), joint);
        let joi_act = ActLayer::new(store, &format!("{prefix}.joi.act"), joint, act);

        let reduce = cfg.downsample.then(|| {
            Conv2dLayer::new(
                store,
                rng,
                &format!("{prefix}.reduce"),
                ConvSpec::square(joint, n_out, 1, 1, 0, 1, 1, false),
            )
        });
        let inter = (!cfg.downsample && cfg.interchannel_1x1).then(|| {
            Conv2dLayer::new(
                store,
                rng,
                &format!("{prefix}.inter"),
                ConvSpec::square(n_out, n_out, 1, 1, 0, 1, 1, false),
            )
        });
        let glo = cfg
            .use_glo
            .then(|| GlobalGate::new(store, rng, &format!("{prefix}.glo"), n_out, cfg.glo_reduction));

        Ok(CgBlock {
            cfg,
            entry,
            loc,
            sur,
            joi_bn,
            joi_act,
            reduce,
            inter,
            glo,
        })
    }

    pub fn forward_train<E: Element>(
        &self,
        x: &Tensor<E>,
        store: &mut ParamStore<E>,
    ) -> Result<(Tensor<E>, CgBlockCache<E>)> {
        let (a, entry_cache) = self.entry.forward_train(x, store)?;
        let l = self.loc.forward(&a, store)?;
        let s = self.sur.forward(&a, store)?;
        let cat = l.concat_channels(&s)?;
        let (bn_out, joi_bn_cache) = self.joi_bn.forward_train(&cat, store)?;
        let act_out = self.joi_act.forward(&bn_out, store)?;

        let j = if let Some(reduce) = &self.reduce {
            reduce.forward(&act_out, store)?
        } else if let Some(inter) = &self.inter {
            inter.forward(&act_out, store)?
        } else {
            act_out.clone()
        };
        // In both tail shapes the cached `j`-input is act_out; rename so the
        // cache always stores the tensor fed to reduce/inter.
        let tail_in = act_out;

        let pre = if self.cfg.residual == Residual::Local {
            j.add(x)?
        } else {
            j
        };

        let (z, glo_cache) = match &self.glo {
            Some(glo) => {
                let (z, c) = glo.forward_train(&pre, store)?;
                (z, Some(c))
            }
            None => (pre, None),
        };

        let out = if self.cfg.residual == Residual::Global {
            z.add(x)?
        } else {
            z
        };

        Ok((
            out,
            CgBlockCache {
                entry: entry_cache,
                a,
                cat,
                joi_bn_cache,
                bn_out,
                j: tail_in,
                glo: glo_cache,
            },
        ))
    }

    pub fn forward_infer<E: Element>(
        &self,
        x: &Tensor<E>,
        store: &ParamStore<E>,
    ) -> Result<Tensor<E>> {
        let a = self.entry.forward_infer(x, store)?;
        let l = self.loc.forward(&a, store)?;
        let s = self.sur.forward(&a, store)?;
        let cat = l.concat_channels(&s)?;
        let bn_out = self.joi_bn.forward_infer(&cat, store)?;
        let act_out = self.joi_act.forward(&bn_out, store)?;
        let j = if let Some(reduce) = &self.reduce {
            reduce.forward(&act_out, store)?
        } else if let Some(inter) = &self.inter {
            inter.forward(&act_out, store)?
        } else {
            act_out
        };
        let pre = if self.cfg.residual == Residual::Local {
            j.add(x)?
        } else {
            j
        };
        let z = match &self.glo {
            Some(glo) => glo.forward_infer(&pre, store)?,
            None => pre,
        };
        if self.cfg.residual == Residual::Global {
            z.add(x)
        } else {
            Ok(z)
        }
    }

    pub fn backward<E: Element>(
        &self,
        grad_out: &Tensor<E>,
        cache: &CgBlockCache<E>,
        store: &mut ParamStore<E>,
    ) -> Result<Tensor<E>> {
        // Residual shortcut gradient, collected where the shortcut rejoins.
        let mut grad_x_res: Option<Tensor<E>> = None;
        if self.cfg.residual == Residual::Global {
            grad_x_res = Some(grad_out.clone());
        }

        let grad_pre = match (&self.glo, &cache.glo) {
            (Some(glo), Some(gc)) => glo.backward(grad_out, gc, store)?,
            _ => grad_out.clone(),
        };

        if self.cfg.residual == Residual::Local {
            grad_x_res = Some(grad_pre.clone());
        }

        let grad_tail = if let Some(reduce) = &self.reduce {
            reduce.backward(&grad_pre, &cache.j, store)?
        } else if let Some(inter) = &self.inter {
            inter.backward(&grad_pre, &cache.j, store)?
        } else {
            grad_pre
        };

        let grad_bn_out = self.joi_act.backward(&grad_tail, &cache.bn_out, store)?;
        let grad_cat = self
            .joi_bn
            .backward(&grad_bn_out, &cache.cat, &cache.joi_bn_cache, store)?;

        let branch = cache.a.dims()[1];
        let grad_l = grad_cat.slice_channels(0, branch)?;
        let grad_s = grad_cat.slice_channels(branch, 2 * branch)?;
        let ga_l = self.loc.backward(&grad_l, &cache.a, store)?;
        let ga_s = self.sur.backward(&grad_s, &cache.a, store)?;
        let grad_a = ga_l.add(&ga_s)?;

        let grad_x = self.entry.backward(&grad_a, &cache.entry, store)?;
        match grad_x_res {
            Some(res) => grad_x.add(&res),
            None => Ok(grad_x),
        }
    }

    pub fn has_global_gate(&self) -> bool {
        self.glo.is_some()
    }

    pub fn entry_spec(&self) -> ConvSpec {
        self.entry.conv.spec.clone()
    }

    pub fn loc_spec(&self) -> ConvSpec {
        self.loc.spec.clone()
    }

    pub fn sur_spec(&self) -> ConvSpec {
        self.sur.spec.clone()
    }

    pub fn reduce_spec(&self) -> Option<ConvSpec> {
        self.reduce.as_ref().map(|c| c.spec.clone())
    }

    pub fn inter_spec(&self) -> Option<ConvSpec> {
        self.inter.as_ref().map(|c| c.spec.clone())
    }

    /// Width of each channel-wise branch.
    pub fn branch_channels(&self) -> usize {
        self.loc.spec.in_channels
    }
}
