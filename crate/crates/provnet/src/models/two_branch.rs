//! Two-branch provenance network: CNN1 (task/classification) and CNN2
//! (index/attribution) towers over 28×28 inputs, with four sharing
//! levels and the optional class-conditioning of the index branch.
//!
//! Sharing merges conv (and, at level IV, first-FC) weights between the
//! towers; batchnorm stays branch-local.

use crate::error::{Error, Result};
use crate::nn::layers::{ConvBlock, ConvBlockCache, FcBlock, FcBlockCache, Linear, PoolKind};
use crate::nn::ops::Mode;
use crate::nn::{Init, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::util::argmax_rows;

use super::{size_dims, ForwardOut, ModelSpec, ParamAccounting, SizePreset, Variant};

/// How the conditional index branch obtains its class signal.
pub enum Conditioning<'a> {
    /// Ground-truth labels; training only.
    TeacherForced(&'a [usize]),
    /// argmax of the class head; the inference path.
    Predicted,
}

#[derive(Clone)]
struct Tower {
    block1: ConvBlock,
    block2: ConvBlock,
    block3: ConvBlock,
    proj: FcBlock,
    flat: usize,
}

struct TowerCache {
    b1: ConvBlockCache,
    b2: ConvBlockCache,
    b3: ConvBlockCache,
    flat_shape: Vec<usize>,
    proj: FcBlockCache,
}

impl Tower {
    fn forward(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<(Tensor, TowerCache)> {
        let n = x.dim(0);
        let (y1, b1) = self.block1.forward(store, x, mode)?;
        let (y2, b2) = self.block2.forward(store, &y1, mode)?;
        let (y3, b3) = self.block3.forward(store, &y2, mode)?;
        let flat_shape = y3.shape().to_vec();
        let flat = y3.reshape(&[n, self.flat])?;
        let (p, proj) = self.proj.forward(store, &flat, mode, rng)?;
        Ok((
            p,
            TowerCache {
                b1,
                b2,
                b3,
                flat_shape,
                proj,
            },
        ))
    }

    fn backward(&self, store: &mut ParamStore, cache: &TowerCache, g_proj: &Tensor) {
        let g = self.proj.backward(store, &cache.proj, g_proj);
        let g = g.reshape(&cache.flat_shape).unwrap();
        let g = self.block3.backward(store, &cache.b3, &g);
        let g = self.block2.backward(store, &cache.b2, &g);
        let _ = self.block1.backward(store, &cache.b1, &g);
    }
}

struct TwoBranchDims {
    convs: [usize; 3],
    proj: usize,
    task_hidden: usize,
    idx_h1: usize,
    idx_h2: usize,
    backbone_pool: PoolKind,
}

fn two_branch_dims(size: SizePreset) -> TwoBranchDims {
    if size == SizePreset::PaperA2 {
        return TwoBranchDims {
            convs: [64, 128, 256],
            proj: 2048,
            task_hidden: 512,
            idx_h1: 1280,
            idx_h2: 512,
            backbone_pool: PoolKind::Global,
        };
    }
    let d = size_dims(size);
    TwoBranchDims {
        convs: [d.c1, d.c2, d.c3],
        proj: d.fc,
        task_hidden: d.fc / 2,
        idx_h1: d.fc,
        idx_h2: 3 * d.fc / 8,
        backbone_pool: PoolKind::Adaptive(4, 4),
    }
}

#[derive(Clone)]
pub struct TwoBranchModel {
    pub spec: ModelSpec,
    cnn1: Tower,
    cnn2: Tower,
    task_hidden: FcBlock,
    task_out: Linear,
    idx_h1: FcBlock,
    idx_h2: FcBlock,
    idx_out: Linear,
    proj_width: usize,
    shared_ids: Vec<ParamId>,
}

pub struct TwoCache {
    t1: TowerCache,
    t2: TowerCache,
    task_h: FcBlockCache,
    task_head_in: Tensor,
    idx_c1: FcBlockCache,
    idx_c2: FcBlockCache,
    idx_head_in: Tensor,
    /// Columns of the projection part when conditioning was concatenated.
    split_at: Option<usize>,
}

impl TwoBranchModel {
    pub fn build(spec: &ModelSpec, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        assert_eq!(spec.variant, Variant::TwoBranch);
        let d = two_branch_dims(spec.size);
        let flat = match d.backbone_pool {
            PoolKind::Global => d.convs[2],
            PoolKind::Adaptive(h, w) => h * w * d.convs[2],
            _ => unreachable!(),
        };

        let mut shared_ids = Vec::new();
        let cnn1 = Tower {
            block1: ConvBlock::new(store, "cnn1.block1", 1, d.convs[0], 1, 1, PoolKind::Max2, rng),
            block2: ConvBlock::new(store, "cnn1.block2", d.convs[0], d.convs[1], 1, 1, PoolKind::Max2, rng),
            block3: ConvBlock::new(store, "cnn1.block3", d.convs[1], d.convs[2], 1, 1, d.backbone_pool, rng),
            proj: FcBlock::new(store, "cnn1.proj", flat, d.proj, 0.3, Init::Normal(0.02), rng),
            flat,
        };

        let n_shared_convs = spec.sharing_level.shared_convs();
        let block1 = if n_shared_convs >= 1 {
            shared_ids.extend([cnn1.block1.conv.w, cnn1.block1.conv.b]);
            ConvBlock::new_sharing_conv(store, "cnn2.block1", &cnn1.block1, d.convs[0], PoolKind::Max2, rng)
        } else {
            ConvBlock::new(store, "cnn2.block1", 1, d.convs[0], 1, 1, PoolKind::Max2, rng)
        };
        let block2 = if n_shared_convs >= 2 {
            shared_ids.extend([cnn1.block2.conv.w, cnn1.block2.conv.b]);
            ConvBlock::new_sharing_conv(store, "cnn2.block2", &cnn1.block2, d.convs[1], PoolKind::Max2, rng)
        } else {
            ConvBlock::new(store, "cnn2.block2", d.convs[0], d.convs[1], 1, 1, PoolKind::Max2, rng)
        };
        let block3 = if n_shared_convs >= 3 {
            shared_ids.extend([cnn1.block3.conv.w, cnn1.block3.conv.b]);
            ConvBlock::new_sharing_conv(store, "cnn2.block3", &cnn1.block3, d.convs[2], d.backbone_pool, rng)
        } else {
            ConvBlock::new(store, "cnn2.block3", d.convs[1], d.convs[2], 1, 1, d.backbone_pool, rng)
        };
        let proj = if spec.sharing_level.shares_first_fc() {
            shared_ids.extend([cnn1.proj.linear.w, cnn1.proj.linear.b]);
            FcBlock::new_sharing_linear(store, "cnn2.proj", &cnn1.proj, d.proj, 0.3, rng)
        } else {
            FcBlock::new(store, "cnn2.proj", flat, d.proj, 0.3, Init::Normal(0.02), rng)
        };
        let cnn2 = Tower {
            block1,
            block2,
            block3,
            proj,
            flat,
        };

        let task_hidden = FcBlock::new(store, "cnn1.head.hidden", d.proj, d.task_hidden, 0.2, Init::Normal(0.02), rng);
        let task_out = Linear::new(store, "cnn1.head.out", d.task_hidden, spec.num_classes, Init::Normal(0.02), rng);

        let idx_in = if spec.conditional {
            d.proj + spec.num_classes
        } else {
            d.proj
        };
        let idx_h1 = FcBlock::new(store, "cnn2.head.hidden1", idx_in, d.idx_h1, 0.2, Init::Normal(0.02), rng);
        let idx_h2 = FcBlock::new(store, "cnn2.head.hidden2", d.idx_h1, d.idx_h2, 0.1, Init::Normal(0.02), rng);
        let idx_out = Linear::new(store, "cnn2.head.out", d.idx_h2, spec.index_output_size, Init::Normal(0.01), rng);

        Ok(Self {
            spec: spec.clone(),
            cnn1,
            cnn2,
            task_hidden,
            task_out,
            idx_h1,
            idx_h2,
            idx_out,
            proj_width: d.proj,
            shared_ids,
        })
    }

    pub fn forward(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        mode: Mode,
        rng: &mut RngStream,
        conditioning: Conditioning<'_>,
    ) -> Result<(ForwardOut, TwoCache)> {
        let n = x.dim(0);
        if let (Conditioning::TeacherForced(_), Mode::Eval) = (&conditioning, mode) {
            return Err(Error::Param("teacher forcing is train-mode only".into()));
        }

        let (p1, t1) = self.cnn1.forward(store, x, mode, rng)?;
        let (th, task_h) = self.task_hidden.forward(store, &p1, mode, rng)?;
        let class_logits = self.task_out.forward(store, &th)?;

        let (p2, t2) = self.cnn2.forward(store, x, mode, rng)?;
        let (idx_in, split_at) = if self.spec.conditional {
            let classes: Vec<usize> = match &conditioning {
                Conditioning::TeacherForced(ys) => {
                    for &y in ys.iter() {
                        if y >= self.spec.num_classes {
                            return Err(Error::Param(format!(
                                "conditioning label {y} out of range [0,{})",
                                self.spec.num_classes
                            )));
                        }
                    }
                    ys.to_vec()
                }
                Conditioning::Predicted => argmax_rows(&class_logits),
            };
            let mut onehot = Tensor::zeros(&[n, self.spec.num_classes]);
            for (i, &y) in classes.iter().enumerate() {
                onehot.data_mut()[i * self.spec.num_classes + y] = 1.0;
            }
            (
                crate::nn::ops::concat_cols(&p2, &onehot),
                Some(self.proj_width),
            )
        } else {
            (p2, None)
        };
        let (i1, idx_c1) = self.idx_h1.forward(store, &idx_in, mode, rng)?;
        let (i2, idx_c2) = self.idx_h2.forward(store, &i1, mode, rng)?;
        let index_logits = self.idx_out.forward(store, &i2)?;
        let embedding = idx_c2.activation.clone();

        Ok((
            ForwardOut {
                class_logits: Some(class_logits),
                index_logits,
                embedding,
            },
            TwoCache {
                t1,
                t2,
                task_h,
                task_head_in: th,
                idx_c1,
                idx_c2,
                idx_head_in: i2,
                split_at,
            },
        ))
    }

    /// Accumulate gradients for both branches. The conditioning one-hot
    /// is a constant; its gradient slice is discarded.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &TwoCache,
        g_class: &Tensor,
        g_index: &Tensor,
    ) {
        let g = self.idx_out.backward(store, &cache.idx_head_in, g_index);
        let g = self.idx_h2.backward(store, &cache.idx_c2, &g);
        let g = self.idx_h1.backward(store, &cache.idx_c1, &g);
        let g_p2 = match cache.split_at {
            Some(at) => crate::nn::ops::split_cols(&g, at).0,
            None => g,
        };
        self.cnn2.backward(store, &cache.t2, &g_p2);

        let g = self.task_out.backward(store, &cache.task_head_in, g_class);
        let g_p1 = self.task_hidden.backward(store, &cache.task_h, &g);
        self.cnn1.backward(store, &cache.t1, &g_p1);
    }

    pub fn accounting(&self, store: &ParamStore) -> ParamAccounting {
        let shared: usize = self.shared_ids.iter().map(|&id| store.value(id).len()).sum();
        ParamAccounting {
            total_unique: store.num_trainable(),
            shared,
        }
    }

    /// Ids of parameters belonging only to the index branch (head +
    /// unshared tower parts); used by the w_index = 0 freeze check.
    pub fn index_branch_param_names(&self, store: &ParamStore) -> Vec<String> {
        store
            .iter()
            .filter(|p| p.name.starts_with("cnn2.") && p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }
}
