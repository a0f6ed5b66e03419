//! Full network assembly: three downsampling stages built from context-guided
//! blocks, stage-input fusion with optional input injection, and a 1x1
//! classifier restored to input resolution by bilinear upsampling.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::block::{CgBlock, CgBlockCache};
use crate::model::config::{CgBlockConfig, NetworkConfig, Residual, SurMode};
use crate::model::layers::{BnAct, BnActCache, Conv2dLayer, ConvBnAct, ConvBnActCache};
use crate::model::params::ParamStore;
use crate::ops;
use crate::ops::ConvSpec;
use crate::rng::Pcg32;
use crate::tensor::Tensor;

pub const UPSAMPLE_FACTOR: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Spatial extents observed during a traced forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub stage1: (usize, usize),
    pub stage2: (usize, usize),
    pub stage3: (usize, usize),
    /// Dims of the score map before upsampling: `[N, K, H/8, W/8]`.
    pub scores_pre_upsample: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Arch {
    stage1: Vec<ConvBnAct>,
    fuse1: BnAct,
    stage2_down: CgBlock,
    stage2_rest: Vec<CgBlock>,
    fuse2: BnAct,
    stage3_down: CgBlock,
    stage3_rest: Vec<CgBlock>,
    head: BnAct,
    classifier: Conv2dLayer,
}

#[derive(Debug, Clone)]
struct Tape<E: Element> {
    stage1: Vec<ConvBnActCache<E>>,
    fuse1: BnActCache<E>,
    s2_down: CgBlockCache<E>,
    s2_rest: Vec<CgBlockCache<E>>,
    fuse2: BnActCache<E>,
    s3_down: CgBlockCache<E>,
    s3_rest: Vec<CgBlockCache<E>>,
    head: BnActCache<E>,
    cls_in: Tensor<E>,
    score_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Network<E: Element> {
    cfg: NetworkConfig,
    arch: Arch,
    params: ParamStore<E>,
    tape: Option<Tape<E>>,
}

fn block_cfg(
    cfg: &NetworkConfig,
    in_channels: usize,
    out_channels: usize,
    dilation: usize,
    downsample: bool,
    use_sur: bool,
) -> CgBlockConfig {
    CgBlockConfig {
        in_channels,
        out_channels,
        dilation,
        downsample,
        residual: if downsample { Residual::None } else { cfg.residual },
        use_sur,
        use_glo: cfg.use_glo,
        interchannel_1x1: cfg.interchannel_1x1,
        glo_reduction: cfg.glo_reduction,
        activation: cfg.activation,
    }
}

impl<E: Element> Network<E> {
    pub fn build(cfg: NetworkConfig, rng: &mut Pcg32) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let [c1, c2, c3] = cfg.stage_channels;
        let (d2, d3) = (cfg.dilations[0], cfg.dilations[1]);
        let inj = if cfg.input_injection { 3 } else { 0 };
        let act = cfg.activation;

        let mut stage1 = Vec::with_capacity(3);
        stage1.push(ConvBnAct::new(
            &mut params,
            rng,
            "stage1.0",
            ConvSpec::square(3, c1, 3, 2, 1, 1, 1, false),
            act,
        ));
        for i in 1..3 {
            stage1.push(ConvBnAct::new(
                &mut params,
                rng,
                &format!("stage1.{i}"),
                ConvSpec::square(c1, c1, 3, 1, 1, 1, 1, false),
                act,
            ));
        }

        let fuse1 = BnAct::new(&mut params, "fuse1", c1 + inj, act);

        // The surrounding branch placement: everywhere for Full, only the
        // very last block of stage 3 for Single, nowhere for None.
        let sur_in = |is_last_of_net: bool| match cfg.sur_mode {
            SurMode::Full => true,
            SurMode::Single => is_last_of_net,
            SurMode::None => false,
        };

        let stage2_down = CgBlock::new(
            &mut params,
            rng,
            "stage2.0",
            block_cfg(&cfg, c1 + inj, c2, d2, true, sur_in(false)),
        )?;
        let mut stage2_rest = Vec::with_capacity(cfg.blocks_stage2 - 1);
        for i in 1..cfg.blocks_stage2 {
            stage2_rest.push(CgBlock::new(
                &mut params,
                rng,
                &format!("stage2.{i}"),
                block_cfg(&cfg, c2, c2, d2, false, sur_in(false)),
            )?);
        }

        let fuse2 = BnAct::new(&mut params, "fuse2", 2 * c2 + inj, act);

        let n_blocks = cfg.blocks_stage3;
        let stage3_down = CgBlock::new(
            &mut params,
            rng,
            "stage3.0",
            block_cfg(&cfg, 2 * c2 + inj, c3, d3, true, sur_in(n_blocks == 1)),
        )?;
        let mut stage3_rest = Vec::with_capacity(n_blocks - 1);
        for i in 1..n_blocks {
            stage3_rest.push(CgBlock::new(
                &mut params,
                rng,
                &format!("stage3.{i}"),
                block_cfg(&cfg, c3, c3, d3, false, sur_in(i == n_blocks - 1)),
            )?);
        }

        let head = BnAct::new(&mut params, "head", 2 * c3, act);
        let classifier = Conv2dLayer::new(
            &mut params,
            rng,
            "classifier",
            ConvSpec::square(2 * c3, cfg.num_classes, 1, 1, 0, 1, 1, true),
        );

        Ok(Network {
            cfg,
            arch: Arch {
                stage1,
                fuse1,
                stage2_down,
                stage2_rest,
                fuse2,
                stage3_down,
                stage3_rest,
                head,
                classifier,
            },
            params,
            tape: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    fn check_input(&self, x: &Tensor<E>) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("network input must have 3 channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input spatial dims {h}x{w} must be positive multiples of 8"
            )));
        }
        Ok((n, h, w))
    }

    fn injections(&self, x: &Tensor<E>) -> Result<Option<(Tensor<E>, Tensor<E>)>> {
        if !self.cfg.input_injection {
            return Ok(None);
        }
        let half = ops::avg_pool3x3s2_forward(x)?;
        let quarter = ops::avg_pool3x3s2_forward(&half)?;
        Ok(Some((half, quarter)))
    }

    /// Train-mode forward: updates BN running statistics and records the
    /// activations needed by [`Network::backward`].
    pub fn forward_train(&mut self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_input(x)?;
        let inj = self.injections(x)?;
        let params = &mut self.params;

        let mut s1_caches = Vec::with_capacity(3);
        let mut cur = x.clone();
        for layer in &self.arch.stage1 {
            let (y, cache) = layer.forward_train(&cur, params)?;
            s1_caches.push(cache);
            cur = y;
        }

        let cat1 = match &inj {
            Some((half, _)) => cur.concat_channels(half)?,
            None => cur,
        };
        let (g1, fuse1_cache) = self.arch.fuse1.forward_train(&cat1, params)?;

        let (first2, s2_down_cache) = self.arch.stage2_down.forward_train(&g1, params)?;
        let mut last2 = first2.clone();
        let mut s2_caches = Vec::with_capacity(self.arch.stage2_rest.len());
        for blk in &self.arch.stage2_rest {
            let (y, cache) = blk.forward_train(&last2, params)?;
            s2_caches.push(cache);
            last2 = y;
        }

        let mut cat2 = first2.concat_channels(&last2)?;
        if let Some((_, quarter)) = &inj {
            cat2 = cat2.concat_channels(quarter)?;
        }
        let (g2, fuse2_cache) = self.arch.fuse2.forward_train(&cat2, params)?;

        let (first3, s3_down_cache) = self.arch.stage3_down.forward_train(&g2, params)?;
        let mut last3 = first3.clone();
        let mut s3_caches = Vec::with_capacity(self.arch.stage3_rest.len());
        for blk in &self.arch.stage3_rest {
            let (y, cache) = blk.forward_train(&last3, params)?;
            s3_caches.push(cache);
            last3 = y;
        }

        let cat3 = first3.concat_channels(&last3)?;
        let (g3, head_cache) = self.arch.head.forward_train(&cat3, params)?;
        let scores8 = self.arch.classifier.forward(&g3, params)?;
        let (_, _, h8, w8) = scores8.dims4()?;
        let scores = ops::bilinear_upsample_forward(&scores8, UPSAMPLE_FACTOR)?;

        self.tape = Some(Tape {
            stage1: s1_caches,
            fuse1: fuse1_cache,
            s2_down: s2_down_cache,
            s2_rest: s2_caches,
            fuse2: fuse2_cache,
            s3_down: s3_down_cache,
            s3_rest: s3_caches,
            head: head_cache,
            cls_in: g3,
            score_hw: (h8, w8),
        });
        Ok(scores)
    }

    /// Pure inference forward; never mutates the parameter store, so a frozen
    /// network can serve concurrent callers.
    pub fn forward_infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.infer_traced(x)?.0)
    }

    /// Inference forward that also reports the stage output extents.
    pub fn infer_traced(&self, x: &Tensor<E>) -> Result<(Tensor<E>, ShapeTrace)> {
        self.check_input(x)?;
        let inj = self.injections(x)?;
        let params = &self.params;

        let mut cur = x.clone();
        for layer in &self.arch.stage1 {
            cur = layer.forward_infer(&cur, params)?;
        }
        let (_, _, s1h, s1w) = cur.dims4()?;

        let cat1 = match &inj {
            Some((half, _)) => cur.concat_channels(half)?,
            None => cur,
        };
        let g1 = self.arch.fuse1.forward_infer(&cat1, params)?;

        let first2 = self.arch.stage2_down.forward_infer(&g1, params)?;
        let mut last2 = first2.clone();
        for blk in &self.arch.stage2_rest {
            last2 = blk.forward_infer(&last2, params)?;
        }
        let (_, _, s2h, s2w) = last2.dims4()?;

        let mut cat2 = first2.concat_channels(&last2)?;
        if let Some((_, quarter)) = &inj {
            cat2 = cat2.concat_channels(quarter)?;
        }
        let g2 = self.arch.fuse2.forward_infer(&cat2, params)?;

        let first3 = self.arch.stage3_down.forward_infer(&g2, params)?;
        let mut last3 = first3.clone();
        for blk in &self.arch.stage3_rest {
            last3 = blk.forward_infer(&last3, params)?;
        }
        let (_, _, s3h, s3w) = last3.dims4()?;

        let cat3 = first3.concat_channels(&last3)?;
        let g3 = self.arch.head.forward_infer(&cat3, params)?;
        let scores8 = self.arch.classifier.forward(&g3, params)?;
        let trace = ShapeTrace {
            stage1: (s1h, s1w),
            stage2: (s2h, s2w),
            stage3: (s3h, s3w),
            scores_pre_upsample: scores8.dims().to_vec(),
        };
        let scores = ops::bilinear_upsample_forward(&scores8, UPSAMPLE_FACTOR)?;
        Ok((scores, trace))
    }

    pub fn forward(&mut self, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Infer => self.forward_infer(x),
        }
    }

    /// Backpropagate `grad_scores` through the recorded forward pass,
    /// accumulating parameter gradients in the store. Consumes the tape.
    pub fn backward(&mut self, grad_scores: &Tensor<E>) -> Result<()> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::InvalidArg("backward without a recorded forward".into()))?;
        let params = &mut self.params;
        let (h8, w8) = tape.score_hw;
        let [_, c2, c3] = [0, self.cfg.stage_channels[1], self.cfg.stage_channels[2]];

        let g8 = ops::bilinear_upsample_backward(grad_scores, UPSAMPLE_FACTOR, h8, w8)?;
        let g = self.arch.classifier.backward(&g8, &tape.cls_in, params)?;
        let grad_cat3 = self.arch.head.backward(&g, &tape.head, params)?;

        let grad_first3_cat = grad_cat3.slice_channels(0, c3)?;
        let mut grad_last3 = grad_cat3.slice_channels(c3, 2 * c3)?;
        for (blk, cache) in self.arch.stage3_rest.iter().zip(&tape.s3_rest).rev() {
            grad_last3 = blk.backward(&grad_last3, cache, params)?;
        }
        let grad_first3 = grad_first3_cat.add(&grad_last3)?;
        let grad_g2 = self.arch.stage3_down.backward(&grad_first3, &tape.s3_down, params)?;
        let grad_cat2 = self.arch.fuse2.backward(&grad_g2, &tape.fuse2, params)?;

        let grad_first2_cat = grad_cat2.slice_channels(0, c2)?;
        let mut grad_last2 = grad_cat2.slice_channels(c2, 2 * c2)?;
        // the injected-image slice, if any, receives no gradient
        for (blk, cache) in self.arch.stage2_rest.iter().zip(&tape.s2_rest).rev() {
            grad_last2 = blk.backward(&grad_last2, cache, params)?;
        }
        let grad_first2 = grad_first2_cat.add(&grad_last2)?;
        let grad_g1 = self.arch.stage2_down.backward(&grad_first2, &tape.s2_down, params)?;
        let grad_cat1 = self.arch.fuse1.backward(&grad_g1, &tape.fuse1, params)?;

        let c1 = self.cfg.stage_channels[0];
        let mut g = if self.cfg.input_injection {
            grad_cat1.slice_channels(0, c1)?
        } else {
            grad_cat1
        };
        for (layer, cache) in self.arch.stage1.iter().zip(&tape.stage1).rev() {
            g = layer.backward(&g, cache, params)?;
        }
        Ok(())
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn count_params(&self) -> usize {
        self.params.count_learnable()
    }

    /// Estimated forward FLOPs for a single `3 x h x w` input.
    pub fn estimate_flops(&self, h: usize, w: usize) -> Result<u64> {
        if !h.is_multiple_of(8) || !w.is_multiple_of(8) {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be divisible by 8"
            )));
        }
        let mut acc = FlopCounter::default();
        let inj = if self.cfg.input_injection { 3 } else { 0 };
        let [c1, c2, c3] = self.cfg.stage_channels;

        let (mut ch, mut cw) = (h, w);
        for layer in &self.arch.stage1 {
            let (nh, nw) = acc.conv_bn_act(&layer.conv.spec, ch, cw);
            ch = nh;
            cw = nw;
        }
        if self.cfg.input_injection {
            // two average-pool stages of the injected image
            acc.elementwise(3 * ops::pooled_extent(h) * ops::pooled_extent(w));
            acc.elementwise(
                3 * ops::pooled_extent(ops::pooled_extent(h))
                    * ops::pooled_extent(ops::pooled_extent(w)),
            );
        }
        acc.bn_act((c1 + inj) * ch * cw);

        let (bh, bw) = acc.cg_block(&self.arch.stage2_down, ch, cw);
        for blk in &self.arch.stage2_rest {
            acc.cg_block(blk, bh, bw);
        }
        acc.bn_act((2 * c2 + inj) * bh * bw);

        let (th, tw) = acc.cg_block(&self.arch.stage3_down, bh, bw);
        for blk in &self.arch.stage3_rest {
            acc.cg_block(blk, th, tw);
        }
        acc.bn_act(2 * c3 * th * tw);

        acc.conv(&self.arch.classifier.spec, th, tw);
        // bilinear restore to input resolution
        acc.elementwise(self.cfg.num_classes * h * w);
        Ok(acc.total)
    }
}

/// FLOP bookkeeping: multiply-accumulate counts double, elementwise work
/// counts 2 per output element.
#[derive(Default)]
struct FlopCounter {
    total: u64,
}

impl FlopCounter {
    fn conv(&mut self, spec: &ConvSpec, h: usize, w: usize) -> (usize, usize) {
        let (ho, wo) = spec.out_hw(h, w).expect("flops on valid dims");
        let macs = 2u64
            * (ho * wo) as u64
            * spec.out_channels as u64
            * (spec.in_channels / spec.groups) as u64
            * (spec.kernel_h * spec.kernel_w) as u64;
        self.total += macs;
        if spec.has_bias {
            self.total += (ho * wo * spec.out_channels) as u64;
        }
        (ho, wo)
    }

    fn elementwise(&mut self, count: usize) {
        self.total += 2 * count as u64;
    }

    fn bn_act(&mut self, count: usize) {
        self.elementwise(count);
        self.elementwise(count);
    }

    fn affine(&mut self, c_in: usize, c_out: usize) {
        self.total += 2 * (c_in * c_out) as u64;
    }

    fn conv_bn_act(&mut self, spec: &ConvSpec, h: usize, w: usize) -> (usize, usize) {
        let (ho, wo) = self.conv(spec, h, w);
        self.bn_act(spec.out_channels * ho * wo);
        (ho, wo)
    }

    fn cg_block(&mut self, blk: &CgBlock, h: usize, w: usize) -> (usize, usize) {
        let (eh, ew) = self.conv_bn_act(&blk.entry_spec(), h, w);
        let branch = blk.branch_channels();
        // loc + sur channel-wise pair
        self.conv(&blk.loc_spec(), eh, ew);
        self.conv(&blk.sur_spec(), eh, ew);
        self.bn_act(2 * branch * eh * ew);
        if let Some(spec) = blk.reduce_spec() {
            self.conv(&spec, eh, ew);
        }
        if let Some(spec) = blk.inter_spec() {
            self.conv(&spec, eh, ew);
        }
        let out = blk.cfg.out_channels;
        if blk.has_global_gate() {
            let hidden = out / blk.cfg.glo_reduction;
            self.elementwise(out); // global pool
            self.affine(out, hidden);
            self.elementwise(hidden); // relu
            self.affine(hidden, out);
            self.elementwise(out); // sigmoid
            self.elementwise(out * eh * ew); // channel scale
        }
        if blk.cfg.residual != Residual::None {
            self.elementwise(out * eh * ew);
        }
        (eh, ew)
    }
}
