//! Provenance VAE: conv encoder to a diagonal Gaussian latent,
//! transposed-conv decoder back to 28×28, with a class head and one
//! index head per class hanging off the pooled first decoder stage.

use serde::{Deserialize, Serialize};

use crate::data::IndexMaps;
use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm, Conv2d, ConvBlock, ConvBlockCache, Linear, PoolKind, TConv2d};
use crate::nn::ops::{self, AvgPoolCache, BnCache, ConvCache, Mode, TconvCache};
use crate::nn::{Init, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::util::{argmax, top_k_indices};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct VaeSpec {
    pub latent_dim: usize,
    pub num_classes: usize,
    /// K_y per class; head y has exactly K_y outputs, no sharing.
    pub class_counts: Vec<usize>,
}

impl VaeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Param("latent_dim must be ≥ 1".into()));
        }
        if self.class_counts.len() != self.num_classes {
            return Err(Error::Param("class_counts length must equal num_classes".into()));
        }
        Ok(())
    }
}

/// Transposed-conv block: tconv → batchnorm → relu.
struct DecBlock {
    tconv: TConv2d,
    bn: BatchNorm,
}

struct DecBlockCache {
    x: Tensor,
    tconv: TconvCache,
    bn: BnCache,
    pre_relu: Tensor,
}

impl DecBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        output_padding: usize,
        rng: &mut RngStream,
    ) -> Self {
        let tconv = TConv2d::new(
            store,
            &format!("{name}.tconv"),
            cin,
            cout,
            3,
            stride,
            pad,
            output_padding,
            rng,
        );
        let bn = BatchNorm::new(store, &format!("{name}.bn"), cout, rng);
        Self { tconv, bn }
    }

    fn forward(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, DecBlockCache)> {
        let (t, tc) = self.tconv.forward(store, x)?;
        let spatial = t.dim(2) * t.dim(3);
        let (b, bc) = self.bn.forward(store, &t, mode, spatial);
        let y = ops::relu_fwd(&b);
        Ok((
            y,
            DecBlockCache {
                x: x.clone(),
                tconv: tc,
                bn: bc,
                pre_relu: b,
            },
        ))
    }

    fn backward(&self, store: &mut ParamStore, cache: &DecBlockCache, gy: &Tensor) -> Tensor {
        let g = ops::relu_bwd(&cache.pre_relu, gy);
        let g = self.bn.backward(store, &cache.bn, &g);
        self.tconv.backward(store, &cache.tconv, &cache.x, &g)
    }
}

pub struct VaeModel {
    pub spec: VaeSpec,
    enc1: ConvBlock,
    enc2: ConvBlock,
    enc3: ConvBlock,
    fc_mu: Linear,
    fc_logvar: Linear,
    dec_fc: Linear,
    dec1: DecBlock,
    dec2: DecBlock,
    dec3: DecBlock,
    out_conv: Conv2d,
    class_head: Linear,
    index_heads: Vec<Linear>,
    enc_flat: usize,
}

pub struct VaeOut {
    pub xhat: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
    pub class_logits: Tensor,
    /// One [N, K_y] logits tensor per class head.
    pub index_logits: Vec<Tensor>,
}

pub struct VaeCache {
    e1: ConvBlockCache,
    e2: ConvBlockCache,
    e3: ConvBlockCache,
    enc_flat_shape: Vec<usize>,
    x_flat: Tensor,
    eps: Tensor,
    sigma: Tensor,
    z: Tensor,
    dec_pre_relu: Tensor,
    d1: DecBlockCache,
    gap: AvgPoolCache,
    pooled: Tensor,
    d2: DecBlockCache,
    d3: DecBlockCache,
    out_cache: ConvCache,
    xhat: Tensor,
}

impl VaeModel {
    pub fn build(spec: &VaeSpec, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let d = spec.latent_dim;
        let enc1 = ConvBlock::new(store, "enc.block1", 1, 64, 2, 1, PoolKind::None, rng);
        let enc2 = ConvBlock::new(store, "enc.block2", 64, 128, 2, 1, PoolKind::None, rng);
        let enc3 = ConvBlock::new(store, "enc.block3", 128, 256, 1, 1, PoolKind::None, rng);
        let enc_flat = 256 * 7 * 7;
        let fc_mu = Linear::new(store, "enc.mu", enc_flat, d, Init::Normal(0.02), rng);
        let fc_logvar = Linear::new(store, "enc.logvar", enc_flat, d, Init::Normal(0.02), rng);
        let dec_fc = Linear::new(store, "dec.fc", d, enc_flat, Init::Normal(0.02), rng);
        let dec1 = DecBlock::new(store, "dec.block1", 256, 128, 1, 1, 0, rng);
        let dec2 = DecBlock::new(store, "dec.block2", 128, 64, 2, 1, 1, rng);
        let dec3 = DecBlock::new(store, "dec.block3", 64, 32, 2, 1, 1, rng);
        let out_conv = Conv2d::new(store, "dec.out", 32, 1, 3, 1, 1, rng);
        let class_head = Linear::new(store, "heads.class", 128, spec.num_classes, Init::Normal(0.02), rng);
        let mut index_heads = Vec::with_capacity(spec.num_classes);
        for (y, &ky) in spec.class_counts.iter().enumerate() {
            index_heads.push(Linear::new(
                store,
                &format!("heads.index{y}"),
                128,
                ky,
                Init::Normal(0.01),
                rng,
            ));
        }
        Ok(Self {
            spec: spec.clone(),
            enc1,
            enc2,
            enc3,
            fc_mu,
            fc_logvar,
            dec_fc,
            dec1,
            dec2,
            dec3,
            out_conv,
            class_head,
            index_heads,
            enc_flat,
        })
    }

    /// x in [0,1]. Train mode samples z = μ + σ⊙ε; eval uses ε = 0.
    pub fn forward(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<(VaeOut, VaeCache)> {
        let n = x.dim(0);
        let (y1, e1) = self.enc1.forward(store, x, mode)?;
        let (y2, e2) = self.enc2.forward(store, &y1, mode)?;
        let (y3, e3) = self.enc3.forward(store, &y2, mode)?;
        let enc_flat_shape = y3.shape().to_vec();
        let x_flat = y3.reshape(&[n, self.enc_flat])?;
        let mu = self.fc_mu.forward(store, &x_flat)?;
        let logvar = self.fc_logvar.forward(store, &x_flat)?;

        let sigma = logvar.map(|v| (0.5 * v).exp());
        let mut eps = Tensor::zeros(mu.shape());
        if mode == Mode::Train {
            rng.fill_normal(eps.data_mut(), 0.0, 1.0);
        }
        let mut z = mu.clone();
        for i in 0..z.len() {
            z.data_mut()[i] += sigma.data()[i] * eps.data()[i];
        }

        let dec_lin = self.dec_fc.forward(store, &z)?;
        let dec_vol = ops::relu_fwd(&dec_lin).reshape(&[n, 256, 7, 7])?;
        let (h1, d1) = self.dec1.forward(store, &dec_vol, mode)?;
        let (pooled, gap) = ops::global_avgpool_fwd(&h1);
        let class_logits = self.class_head.forward(store, &pooled)?;
        let mut index_logits = Vec::with_capacity(self.index_heads.len());
        for head in &self.index_heads {
            index_logits.push(head.forward(store, &pooled)?);
        }
        let (h2, d2) = self.dec2.forward(store, &h1, mode)?;
        let (h3, d3) = self.dec3.forward(store, &h2, mode)?;
        let (pre_sig, out_cache) = self.out_conv.forward(store, &h3)?;
        let xhat = ops::sigmoid_fwd(&pre_sig);

        Ok((
            VaeOut {
                xhat: xhat.clone(),
                mu,
                logvar,
                z: z.clone(),
                class_logits,
                index_logits,
            },
            VaeCache {
                e1,
                e2,
                e3,
                enc_flat_shape,
                x_flat,
                eps,
                sigma,
                z,
                dec_pre_relu: dec_lin,
                d1,
                gap,
                pooled,
                d2,
                d3,
                out_cache,
                xhat,
            },
        ))
    }

    /// Accumulate gradients. `g_index` carries one [N, K_y] gradient per
    /// class head (zero rows for samples routed elsewhere).
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &VaeCache,
        g_xhat: &Tensor,
        g_mu_direct: &Tensor,
        g_logvar_direct: &Tensor,
        g_class: &Tensor,
        g_index: &[Tensor],
    ) {
        let n = cache.z.dim(0);
        // reconstruction path
        let g = ops::sigmoid_bwd(&cache.xhat, g_xhat);
        let g = {
            let (gx, gw, gb) = ops::conv2d_bwd(&cache.out_cache, store.value(self.out_conv.w), &g);
            store.accum_grad(self.out_conv.w, &gw);
            store.accum_grad(self.out_conv.b, &gb);
            gx
        };
        let g = self.dec3.backward(store, &cache.d3, &g);
        let g_h1_recon = self.dec2.backward(store, &cache.d2, &g);

        // head path into the pooled feature
        let mut g_pooled = self.class_head.backward(store, &cache.pooled, g_class);
        for (head, gi) in self.index_heads.iter().zip(g_index.iter()) {
            let g = head.backward(store, &cache.pooled, gi);
            g_pooled.add_assign(&g);
        }
        let g_h1_heads = ops::global_avgpool_bwd(&cache.gap, &g_pooled);

        let mut g_h1 = g_h1_recon;
        g_h1.add_assign(&g_h1_heads);
        let g_dec_vol = self.dec1.backward(store, &cache.d1, &g_h1);
        let g_dec_relu = g_dec_vol.reshape(&[n, self.enc_flat]).unwrap();
        let g_dec_lin = ops::relu_bwd(&cache.dec_pre_relu, &g_dec_relu);
        let g_z = self.dec_fc.backward(store, &cache.z, &g_dec_lin);

        // reparameterization: z = μ + σ⊙ε, σ = exp(½·logσ²)
        let mut g_mu = g_z.clone();
        g_mu.add_assign(g_mu_direct);
        let mut g_logvar = g_logvar_direct.clone();
        for i in 0..g_logvar.len() {
            g_logvar.data_mut()[i] +=
                g_z.data()[i] * cache.eps.data()[i] * cache.sigma.data()[i] * 0.5;
        }

        let mut g_flat = self.fc_mu.backward(store, &cache.x_flat, &g_mu);
        let g2 = self.fc_logvar.backward(store, &cache.x_flat, &g_logvar);
        g_flat.add_assign(&g2);
        let g = g_flat.reshape(&cache.enc_flat_shape).unwrap();
        let g = self.enc3.backward(store, &cache.e3, &g);
        let g = self.enc2.backward(store, &cache.e2, &g);
        let _ = self.enc1.backward(store, &cache.e1, &g);
    }
}

/// One generated sample with its provenance read-out.
#[derive(Debug, Clone, Serialize)]
pub struct GeneratedSample {
    pub predicted_class: usize,
    /// (local index, global index, softmax confidence), best first.
    pub top_k: Vec<(usize, usize, f32)>,
}

/// Sample z ~ N(0,I), decode, and read class + top-k provenance.
/// `class_filter` keeps only samples whose predicted class matches,
/// retrying up to a bounded number of extra draws.
pub fn generate(
    model: &VaeModel,
    store: &mut ParamStore,
    rng: &mut RngStream,
    n: usize,
    k: usize,
    class_filter: Option<usize>,
    maps: &IndexMaps,
) -> Result<(Tensor, Vec<GeneratedSample>)> {
    let d = model.spec.latent_dim;
    let mut images: Vec<f32> = Vec::new();
    let mut samples = Vec::new();
    let mut attempts = 0usize;
    let max_attempts = if class_filter.is_some() { 50 * n.max(1) } else { n };
    while samples.len() < n && attempts < max_attempts {
        let batch = (n - samples.len()).min(64).max(1);
        attempts += batch;
        let mut z = Tensor::zeros(&[batch, d]);
        rng.fill_normal(z.data_mut(), 0.0, 1.0);
        let dec_lin = model.dec_fc.forward(store, &z)?;
        let dec_relu = ops::relu_fwd(&dec_lin);
        let dec_vol = dec_relu.reshape(&[batch, 256, 7, 7])?;
        let (h1, _) = model.dec1.forward(store, &dec_vol, Mode::Eval)?;
        let (pooled, _) = ops::global_avgpool_fwd(&h1);
        let class_logits = model.class_head.forward(store, &pooled)?;
        let (h2, _) = model.dec2.forward(store, &h1, Mode::Eval)?;
        let (h3, _) = model.dec3.forward(store, &h2, Mode::Eval)?;
        let (pre_sig, _) = model.out_conv.forward(store, &h3)?;
        let xhat = ops::sigmoid_fwd(&pre_sig);

        for i in 0..batch {
            if samples.len() >= n {
                break;
            }
            let cls = argmax(class_logits.row(i));
            if let Some(want) = class_filter {
                if cls != want {
                    continue;
                }
            }
            let head_logits = model.index_heads[cls].forward(
                store,
                &Tensor::from_vec(&[1, 128], pooled.row(i).to_vec()),
            )?;
            let probs = crate::nn::loss::softmax_probs(&head_logits, None);
            let kk = k.min(model.spec.class_counts[cls]);
            let top = top_k_indices(probs.row(0), kk);
            let top_k: Vec<(usize, usize, f32)> = top
                .into_iter()
                .map(|local| (local, maps.local_to_global(cls, local), probs.row(0)[local]))
                .collect();
            images.extend_from_slice(&xhat.data()[i * 784..(i + 1) * 784]);
            samples.push(GeneratedSample {
                predicted_class: cls,
                top_k,
            });
        }
    }
    let count = samples.len();
    Ok((Tensor::from_vec(&[count, 1, 28, 28], images), samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> VaeSpec {
        VaeSpec {
            latent_dim: 16,
            num_classes: 3,
            class_counts: vec![4, 5, 3],
        }
    }

    #[test]
    fn shapes_and_eval_z_equals_mu() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1);
        let model = VaeModel::build(&small_spec(), &mut store, &mut rng).unwrap();
        let x = Tensor::full(&[2, 1, 28, 28], 0.5);
        let mut r = RngStream::new(2);
        let (out, _) = model.forward(&mut store, &x, Mode::Eval, &mut r).unwrap();
        assert_eq!(out.xhat.shape(), &[2, 1, 28, 28]);
        assert_eq!(out.z.data(), out.mu.data(), "eval mode must use ε = 0");
        assert!(out.xhat.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(out.index_logits.len(), 3);
        assert_eq!(out.index_logits[1].shape(), &[2, 5]);
    }

    #[test]
    fn generate_empty_and_valid_indices() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(3);
        let model = VaeModel::build(&small_spec(), &mut store, &mut rng).unwrap();
        let maps = IndexMaps::from_parts(vec![vec![0, 3, 6, 9], vec![1, 4, 7, 10, 11], vec![2, 5, 8]], 12);
        let (imgs, samples) = generate(&model, &mut store, &mut rng, 0, 5, None, &maps).unwrap();
        assert_eq!(imgs.dim(0), 0);
        assert!(samples.is_empty());

        let (imgs, samples) = generate(&model, &mut store, &mut rng, 4, 5, None, &maps).unwrap();
        assert_eq!(imgs.dim(0), 4);
        for s in &samples {
            assert!(s.top_k.len() <= model.spec.class_counts[s.predicted_class]);
            for &(local, global, conf) in &s.top_k {
                assert_eq!(maps.local_to_global(s.predicted_class, local), global);
                assert!(global < 12);
                assert!((0.0..=1.0).contains(&conf));
            }
        }
    }
}
