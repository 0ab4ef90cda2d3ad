//! Single-branch standalone network: three conv blocks into a deep
//! fully-connected attribution head mapping straight to training-sample
//! logits.

use crate::error::Result;
use crate::nn::layers::{ConvBlock, FcBlock, Linear, PoolKind};
use crate::nn::ops::{self, DropoutCache, Mode};
use crate::nn::{Init, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use super::{size_dims, ForwardOut, ModelSpec, ParamAccounting, Variant};

#[derive(Clone)]
pub struct SingleBranchModel {
    pub spec: ModelSpec,
    block1: ConvBlock,
    block2: ConvBlock,
    block3: ConvBlock,
    fc1: FcBlock,
    fc2: FcBlock,
    head_dropout: f32,
    head: Linear,
    flat: usize,
}

pub struct SingleCache {
    b1: crate::nn::layers::ConvBlockCache,
    b2: crate::nn::layers::ConvBlockCache,
    b3: crate::nn::layers::ConvBlockCache,
    flat_shape: Vec<usize>,
    f1: crate::nn::layers::FcBlockCache,
    f2: crate::nn::layers::FcBlockCache,
    head_drop: DropoutCache,
    head_in: Tensor,
}

impl SingleBranchModel {
    /// Deterministic parameter layout; draws follow declaration order.
    pub fn build(spec: &ModelSpec, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        assert_eq!(spec.variant, Variant::SingleBranch);
        let d = size_dims(spec.size);
        let flat = 16 * d.c3;
        let (f1, f2) = (flat / 16, flat / 4);

        let block1 = ConvBlock::new(store, "backbone.block1", 1, d.c1, 1, 1, PoolKind::Max2, rng);
        let block2 = ConvBlock::new(store, "backbone.block2", d.c1, d.c2, 1, 1, PoolKind::Max2, rng);
        let block3 = ConvBlock::new(
            store,
            "backbone.block3",
            d.c2,
            d.c3,
            1,
            1,
            PoolKind::Adaptive(4, 4),
            rng,
        );
        let fc1 = FcBlock::new(store, "head.fc1", flat, f1, 0.4, Init::Normal(0.02), rng);
        let fc2 = FcBlock::new(store, "head.fc2", f1, f2, 0.2, Init::Normal(0.02), rng);
        let head = Linear::new(
            store,
            "head.out",
            f2,
            spec.index_output_size,
            Init::Normal(0.01),
            rng,
        );
        Ok(Self {
            spec: spec.clone(),
            block1,
            block2,
            block3,
            fc1,
            fc2,
            head_dropout: 0.1,
            head,
            flat,
        })
    }

    pub fn forward(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<(ForwardOut, SingleCache)> {
        let n = x.dim(0);
        let (y1, b1) = self.block1.forward(store, x, mode)?;
        let (y2, b2) = self.block2.forward(store, &y1, mode)?;
        let (y3, b3) = self.block3.forward(store, &y2, mode)?;
        let flat_shape = y3.shape().to_vec();
        let flat = y3.reshape(&[n, self.flat])?;
        let (h1, f1) = self.fc1.forward(store, &flat, mode, rng)?;
        let (h2, f2) = self.fc2.forward(store, &h1, mode, rng)?;
        let (head_in, head_drop) = ops::dropout_fwd(&h2, self.head_dropout, mode, rng)?;
        let logits = self.head.forward(store, &head_in)?;
        let embedding = f2.activation.clone();
        Ok((
            ForwardOut {
                class_logits: None,
                index_logits: logits,
                embedding,
            },
            SingleCache {
                b1,
                b2,
                b3,
                flat_shape,
                f1,
                f2,
                head_drop,
                head_in,
            },
        ))
    }

    /// Accumulates parameter gradients from a logits gradient.
    pub fn backward(&self, store: &mut ParamStore, cache: &SingleCache, g_logits: &Tensor) {
        let g = self.head.backward(store, &cache.head_in, g_logits);
        let g = ops::dropout_bwd(&cache.head_drop, &g);
        let g = self.fc2.backward(store, &cache.f2, &g);
        let g = self.fc1.backward(store, &cache.f1, &g);
        let g = g.reshape(&cache.flat_shape).unwrap();
        let g = self.block3.backward(store, &cache.b3, &g);
        let g = self.block2.backward(store, &cache.b2, &g);
        let _ = self.block1.backward(store, &cache.b1, &g);
    }

    pub fn accounting(&self, store: &ParamStore) -> ParamAccounting {
        ParamAccounting {
            total_unique: store.num_trainable(),
            shared: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{SharingLevel, SizePreset};

    fn spec(size: SizePreset, n_out: usize) -> ModelSpec {
        ModelSpec {
            variant: Variant::SingleBranch,
            conditional: false,
            size,
            sharing_level: SharingLevel::I,
            num_classes: 10,
            index_output_size: n_out,
        }
    }

    #[test]
    fn forward_shapes_and_eval_determinism() {
        let spec = spec(SizePreset::Small, 100);
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1);
        let model = SingleBranchModel::build(&spec, &mut store, &mut rng).unwrap();
        let x = Tensor::full(&[2, 1, 28, 28], 0.4);
        let mut r1 = RngStream::new(2);
        let (o1, _) = model.forward(&mut store, &x, Mode::Eval, &mut r1).unwrap();
        assert_eq!(o1.index_logits.shape(), &[2, 100]);
        assert_eq!(o1.embedding.shape(), &[2, 512]);
        let mut r2 = RngStream::new(99);
        let (o2, _) = model.forward(&mut store, &x, Mode::Eval, &mut r2).unwrap();
        assert_eq!(o1.index_logits.data(), o2.index_logits.data());
    }

    #[test]
    fn eval_batch_composition() {
        // batch of 2 equals two batches of 1 concatenated (eval mode,
        // running stats frozen)
        let spec = spec(SizePreset::Small, 50);
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(3);
        let model = SingleBranchModel::build(&spec, &mut store, &mut rng).unwrap();
        let mut xd = vec![0.0; 2 * 784];
        rng.fill_normal(&mut xd, 0.0, 1.0);
        let x = Tensor::from_vec(&[2, 1, 28, 28], xd.clone());
        let x0 = Tensor::from_vec(&[1, 1, 28, 28], xd[..784].to_vec());
        let x1 = Tensor::from_vec(&[1, 1, 28, 28], xd[784..].to_vec());
        let mut r = RngStream::new(0);
        let (full, _) = model.forward(&mut store, &x, Mode::Eval, &mut r).unwrap();
        let (p0, _) = model.forward(&mut store, &x0, Mode::Eval, &mut r).unwrap();
        let (p1, _) = model.forward(&mut store, &x1, Mode::Eval, &mut r).unwrap();
        for j in 0..50 {
            assert_eq!(full.index_logits.data()[j], p0.index_logits.data()[j]);
            assert_eq!(full.index_logits.data()[50 + j], p1.index_logits.data()[j]);
        }
    }

    #[test]
    fn paper_a1_dims() {
        // conv 128→256→512, head 8192→512→2048→N
        let spec = spec(SizePreset::PaperA1, 1000);
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(4);
        let model = SingleBranchModel::build(&spec, &mut store, &mut rng).unwrap();
        assert_eq!(store.value(model.fc1.linear.w).shape(), &[8192, 512]);
        assert_eq!(store.value(model.fc2.linear.w).shape(), &[512, 2048]);
        assert_eq!(store.value(model.head.w).shape(), &[2048, 1000]);
    }
}
