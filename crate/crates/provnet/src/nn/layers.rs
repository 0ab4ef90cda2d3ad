//! Parameter-owning layer handles and the conv/fc blocks the three
//! architectures are assembled from. Layers hold `ParamId`s into a
//! shared [`ParamStore`]; branch sharing is expressed by two blocks
//! pointing at the same conv/linear ids while keeping their own
//! batchnorm entries.

use super::ops::{self, AvgPoolCache, BnCache, ConvCache, DropoutCache, MaxPoolCache, Mode, TconvCache};
use super::{Init, ParamId, ParamStore};
use crate::error::Result;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut RngStream,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            &[cout, cin, k, k],
            Init::KaimingFanOut(cout * k * k),
            true,
            rng,
        );
        let b = store.add(&format!("{name}.b"), &[cout], Init::Zeros, true, rng);
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        ops::conv2d_fwd(x, store.value(self.w), store.value(self.b), self.stride, self.pad)
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &ConvCache, gy: &Tensor) -> Tensor {
        let (gx, gw, gb) = ops::conv2d_bwd(cache, store.value(self.w), gy);
        store.accum_grad(self.w, &gw);
        store.accum_grad(self.b, &gb);
        gx
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TConv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
}

impl TConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_padding: usize,
        rng: &mut RngStream,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            &[cin, cout, k, k],
            Init::KaimingFanOut(cout * k * k),
            true,
            rng,
        );
        let b = store.add(&format!("{name}.b"), &[cout], Init::Zeros, true, rng);
        Self {
            w,
            b,
            stride,
            pad,
            output_padding,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, TconvCache)> {
        ops::transposed_conv2d_fwd(
            x,
            store.value(self.w),
            store.value(self.b),
            self.stride,
            self.pad,
            self.output_padding,
        )
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &TconvCache,
        x: &Tensor,
        gy: &Tensor,
    ) -> Tensor {
        let (gx, gw, gb) = ops::transposed_conv2d_bwd(cache, x, store.value(self.w), gy);
        store.accum_grad(self.w, &gw);
        store.accum_grad(self.b, &gb);
        gx
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut RngStream) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), &[c], Init::Ones, true, rng);
        let beta = store.add(&format!("{name}.beta"), &[c], Init::Zeros, true, rng);
        let run_mean = store.add(&format!("{name}.running_mean"), &[c], Init::Zeros, false, rng);
        let run_var = store.add(&format!("{name}.running_var"), &[c], Init::Ones, false, rng);
        Self {
            gamma,
            beta,
            run_mean,
            run_var,
        }
    }

    /// `spatial` = H·W for 2-D inputs, 1 for feature vectors.
    pub fn forward(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        mode: Mode,
        spatial: usize,
    ) -> (Tensor, BnCache) {
        let mut rm = store.value(self.run_mean).clone();
        let mut rv = store.value(self.run_var).clone();
        let (y, cache) = ops::batchnorm_fwd(
            x,
            store.value(self.gamma),
            store.value(self.beta),
            &mut rm,
            &mut rv,
            mode,
            BN_EPS,
            BN_MOMENTUM,
            spatial,
        );
        if mode == Mode::Train {
            *store.value_mut(self.run_mean) = rm;
            *store.value_mut(self.run_var) = rv;
        }
        (y, cache)
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &BnCache, gy: &Tensor) -> Tensor {
        let (gx, gg, gb) = ops::batchnorm_bwd(cache, store.value(self.gamma), gy);
        store.accum_grad(self.gamma, &gg);
        store.accum_grad(self.beta, &gb);
        gx
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        rng: &mut RngStream,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), &[din, dout], init, true, rng);
        let b = store.add(&format!("{name}.b"), &[dout], Init::Zeros, true, rng);
        Self { w, b }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        ops::linear_fwd(x, store.value(self.w), store.value(self.b))
    }

    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, gy: &Tensor) -> Tensor {
        let (gx, gw, gb) = ops::linear_bwd(x, store.value(self.w), gy);
        store.accum_grad(self.w, &gw);
        store.accum_grad(self.b, &gb);
        gx
    }
}

/// What follows the conv+bn+relu stack in a conv block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max2,
    Adaptive(usize, usize),
    Global,
    None,
}

pub enum PoolCache {
    Max(MaxPoolCache),
    Avg(AvgPoolCache),
    None,
}

/// conv → batchnorm → relu → pool
#[derive(Clone, Copy)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub pool: PoolKind,
}

pub struct ConvBlockCache {
    conv: ConvCache,
    bn: BnCache,
    pre_relu: Tensor,
    post_relu_shape: Vec<usize>,
    pool: PoolCache,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        pool: PoolKind,
        rng: &mut RngStream,
    ) -> Self {
        let conv = Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, stride, pad, rng);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), cout, rng);
        Self { conv, bn, pool }
    }

    /// Same conv weights as `shared`, fresh batchnorm. Used by the
    /// sharing levels: only conv/linear weights are shared, batchnorm
    /// stays branch-local.
    pub fn new_sharing_conv(
        store: &mut ParamStore,
        name: &str,
        shared: &ConvBlock,
        cout: usize,
        pool: PoolKind,
        rng: &mut RngStream,
    ) -> Self {
        let bn = BatchNorm::new(store, &format!("{name}.bn"), cout, rng);
        Self {
            conv: shared.conv,
            bn,
            pool,
        }
    }

    pub fn forward(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, ConvBlockCache)> {
        let (c, conv_cache) = self.conv.forward(store, x)?;
        let spatial = c.dim(2) * c.dim(3);
        let (b, bn_cache) = self.bn.forward(store, &c, mode, spatial);
        let r = ops::relu_fwd(&b);
        let post_relu_shape = r.shape().to_vec();
        let (y, pool_cache) = match self.pool {
            PoolKind::Max2 => {
                let (y, pc) = ops::maxpool2d_fwd(&r);
                (y, PoolCache::Max(pc))
            }
            PoolKind::Adaptive(h, w) => {
                let (y, pc) = ops::adaptive_avgpool2d_fwd(&r, h, w);
                (y, PoolCache::Avg(pc))
            }
            PoolKind::Global => {
                let (y, pc) = ops::global_avgpool_fwd(&r);
                (y, PoolCache::Avg(pc))
            }
            PoolKind::None => (r, PoolCache::None),
        };
        Ok((
            y,
            ConvBlockCache {
                conv: conv_cache,
                bn: bn_cache,
                pre_relu: b,
                post_relu_shape,
                pool: pool_cache,
            },
        ))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &ConvBlockCache, gy: &Tensor) -> Tensor {
        let gr = match (&cache.pool, self.pool) {
            (PoolCache::Max(pc), _) => ops::maxpool2d_bwd(pc, gy),
            (PoolCache::Avg(pc), PoolKind::Global) => ops::global_avgpool_bwd(pc, gy),
            (PoolCache::Avg(pc), _) => ops::adaptive_avgpool2d_bwd(pc, gy),
            (PoolCache::None, _) => gy.clone(),
        };
        let gr = gr.reshape(&cache.post_relu_shape).unwrap();
        let gb = ops::relu_bwd(&cache.pre_relu, &gr);
        let gc = self.bn.backward(store, &cache.bn, &gb);
        self.conv.backward(store, &cache.conv, &gc)
    }
}

/// linear → batchnorm → relu → dropout
#[derive(Clone, Copy)]
pub struct FcBlock {
    pub linear: Linear,
    pub bn: BatchNorm,
    pub dropout_p: f32,
}

pub struct FcBlockCache {
    x: Tensor,
    bn: BnCache,
    pre_relu: Tensor,
    /// Post-relu activation (the embedding read-out point).
    pub activation: Tensor,
    dropout: DropoutCache,
}

impl FcBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        dropout_p: f32,
        init: Init,
        rng: &mut RngStream,
    ) -> Self {
        let linear = Linear::new(store, &format!("{name}.fc"), din, dout, init, rng);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), dout, rng);
        Self {
            linear,
            bn,
            dropout_p,
        }
    }

    pub fn new_sharing_linear(
        store: &mut ParamStore,
        name: &str,
        shared: &FcBlock,
        dout: usize,
        dropout_p: f32,
        rng: &mut RngStream,
    ) -> Self {
        let bn = BatchNorm::new(store, &format!("{name}.bn"), dout, rng);
        Self {
            linear: shared.linear,
            bn,
            dropout_p,
        }
    }

    pub fn forward(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<(Tensor, FcBlockCache)> {
        let z = self.linear.forward(store, x)?;
        let (b, bn_cache) = self.bn.forward(store, &z, mode, 1);
        let r = ops::relu_fwd(&b);
        let (y, dc) = ops::dropout_fwd(&r, self.dropout_p, mode, rng)?;
        Ok((
            y,
            FcBlockCache {
                x: x.clone(),
                bn: bn_cache,
                pre_relu: b,
                activation: r,
                dropout: dc,
            },
        ))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &FcBlockCache, gy: &Tensor) -> Tensor {
        let gr = ops::dropout_bwd(&cache.dropout, gy);
        let gb = ops::relu_bwd(&cache.pre_relu, &gr);
        let gz = self.bn.backward(store, &cache.bn, &gb);
        self.linear.backward(store, &cache.x, &gz)
    }
}
