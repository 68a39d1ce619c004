//! The frozen feature-producing stack: a convolutional latent autoencoder,
//! a conditioning encoder, and a denoising UNet with tagged feature taps.
//!
//! The desk-scale backbone downsamples images ×8 into a 4-channel latent,
//! conditions the UNet on a 64-dimensional embedding through one
//! cross-attention per block, and exposes five activation taps: the middle
//! block plus four upsampling blocks. Every layer keeps an explicit
//! forward cache so the pre-training phase can run exact backpropagation;
//! after pre-training the stack is frozen and used purely for inference.

use ndarray::{Array1, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, sigmoid, upsample_nearest_x2,
    upsample_nearest_x2_backward, Conv2d, ConvTranspose2d, Linear, PadMode, Param,
};
use crate::schedule::Latent;
use crate::tensor::stream_rng;

/// Conditioning embedding dimension of the desk-scale stack.
pub const D_COND: usize = 64;
/// Query/key width of the per-block cross-attention.
const D_ATTN: usize = 16;
/// Sinusoidal timestep embedding width (pre-MLP).
const D_TEMB: usize = 32;

/// Conditioning vector fed to the UNet's cross-attention blocks.
#[derive(Debug, Clone)]
pub struct ConditioningVector {
    pub values: Array1<f64>,
    /// Identifier of the producing encoder: "toy-ssl" for the built-in
    /// encoder, "none" for the learned null token.
    pub source: String,
}

/// Structural metadata describing a backbone: enough to validate feature
/// shapes without loading weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneDescriptor {
    pub latent_downsample_factor: usize,
    pub latent_channels: usize,
    pub block_ids: Vec<String>,
    pub block_channels: Vec<usize>,
    pub d_cond: usize,
    /// Patch edge the conditioning encoder expects and extraction tiles to.
    pub patch_size: usize,
    /// Cross-attention placement; the desk-scale stack attaches one
    /// attention module per tapped block.
    pub cross_attention: String,
    /// Scale divisor applied to encoder output so latents are near
    /// unit-variance; calibrated during pre-training.
    pub latent_scale: f64,
    pub frozen: bool,
}

impl BackboneDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.block_ids.is_empty() {
            return Err(Error::Config("descriptor declares zero blocks".into()));
        }
        if self.block_ids[0] != "middle" {
            return Err(Error::Config(format!(
                "descriptor block list must start with \"middle\", got \"{}\"",
                self.block_ids[0]
            )));
        }
        if self.block_ids.len() != self.block_channels.len() {
            return Err(Error::Config(format!(
                "descriptor lists {} block ids but {} channel counts",
                self.block_ids.len(),
                self.block_channels.len()
            )));
        }
        if self.latent_downsample_factor == 0 || self.latent_channels == 0 {
            return Err(Error::Config("latent geometry must be positive".into()));
        }
        if !(self.latent_scale.is_finite() && self.latent_scale > 0.0) {
            return Err(Error::Config(format!("latent_scale must be positive, got {}", self.latent_scale)));
        }
        Ok(())
    }

    /// Total channel count of the concatenated per-block features.
    pub fn total_channels(&self) -> usize {
        self.block_channels.iter().sum()
    }

    fn toy() -> Self {
        BackboneDescriptor {
            latent_downsample_factor: 8,
            latent_channels: 4,
            block_ids: vec![
                "middle".into(),
                "up_1".into(),
                "up_2".into(),
                "up_3".into(),
                "up_4".into(),
            ],
            block_channels: vec![32, 16, 16, 8, 8],
            d_cond: D_COND,
            patch_size: 256,
            cross_attention: "per-block".into(),
            latent_scale: 1.0,
            frozen: false,
        }
    }
}

/// One tapped activation of a UNet forward pass.
#[derive(Debug, Clone)]
pub struct BlockActivation {
    pub block_id: String,
    pub values: Array3<f64>,
    pub timestep: usize,
}

/// Input plus pre-activation pair cached for a conv → ReLU step.
struct ConvActCache {
    x_in: Array3<f64>,
    pre: Array3<f64>,
}

fn conv_relu_forward(conv: &Conv2d, x: &Array3<f64>) -> (Array3<f64>, ConvActCache) {
    let pre = conv.forward(x);
    let y = relu(&pre);
    (y, ConvActCache { x_in: x.clone(), pre })
}

fn conv_relu_backward(
    conv: &mut Conv2d,
    cache: &ConvActCache,
    dy: &Array3<f64>,
    need_dx: bool,
) -> Option<Array3<f64>> {
    let dpre = relu_backward(&cache.pre, dy);
    conv.backward(&cache.x_in, &dpre, need_dx)
}

// ---------------------------------------------------------------------------
// Latent autoencoder
// ---------------------------------------------------------------------------

/// ×8 downsampling image encoder producing 4-channel latents.
pub struct ImageEncoder {
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    e4: Conv2d,
}

pub struct ImageEncoderCache {
    c1: ConvActCache,
    c2: ConvActCache,
    c3: ConvActCache,
    h3: Array3<f64>,
}

impl ImageEncoder {
    fn new(seed: u64) -> Self {
        let mut rng = stream_rng(seed, "init-image-encoder");
        ImageEncoder {
            e1: Conv2d::new("enc.e1", &mut rng, 3, 16, 3, 2, 1, PadMode::Replicate),
            e2: Conv2d::new("enc.e2", &mut rng, 16, 32, 3, 2, 1, PadMode::Replicate),
            e3: Conv2d::new("enc.e3", &mut rng, 32, 32, 3, 2, 1, PadMode::Replicate),
            e4: Conv2d::new("enc.e4", &mut rng, 32, 4, 1, 1, 0, PadMode::Zero),
        }
    }

    /// Raw (unscaled) forward pass with caches for backpropagation.
    pub fn forward_train(&self, x: &Array3<f64>) -> (Array3<f64>, ImageEncoderCache) {
        let (h1, c1) = conv_relu_forward(&self.e1, x);
        let (h2, c2) = conv_relu_forward(&self.e2, &h1);
        let (h3, c3) = conv_relu_forward(&self.e3, &h2);
        let z = self.e4.forward(&h3);
        (z, ImageEncoderCache { c1, c2, c3, h3 })
    }

    pub fn backward(&mut self, cache: &ImageEncoderCache, dz: &Array3<f64>) {
        let dh3 = self.e4.backward(&cache.h3, dz, true).unwrap();
        let dh2 = conv_relu_backward(&mut self.e3, &cache.c3, &dh3, true).unwrap();
        let dh1 = conv_relu_backward(&mut self.e2, &cache.c2, &dh2, true).unwrap();
        conv_relu_backward(&mut self.e1, &cache.c1, &dh1, false);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.e1.params_mut();
        p.extend(self.e2.params_mut());
        p.extend(self.e3.params_mut());
        p.extend(self.e4.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.e1.params();
        p.extend(self.e2.params());
        p.extend(self.e3.params());
        p.extend(self.e4.params());
        p
    }
}

/// ×8 upsampling decoder; only used while pre-training the autoencoder and
/// dropped from checkpoints afterwards.
pub struct ImageDecoder {
    g1: ConvTranspose2d,
    g2: ConvTranspose2d,
    g3: ConvTranspose2d,
}

pub struct ImageDecoderCache {
    z: Array3<f64>,
    p1: Array3<f64>,
    h1: Array3<f64>,
    p2: Array3<f64>,
    h2: Array3<f64>,
}

impl ImageDecoder {
    fn new(seed: u64) -> Self {
        let mut rng = stream_rng(seed, "init-image-decoder");
        ImageDecoder {
            g1: ConvTranspose2d::new("dec.g1", &mut rng, 4, 32, 4, 2, 1),
            g2: ConvTranspose2d::new("dec.g2", &mut rng, 32, 16, 4, 2, 1),
            g3: ConvTranspose2d::new("dec.g3", &mut rng, 16, 3, 4, 2, 1),
        }
    }

    pub fn forward_train(&self, z: &Array3<f64>) -> (Array3<f64>, ImageDecoderCache) {
        let p1 = self.g1.forward(z);
        let h1 = relu(&p1);
        let p2 = self.g2.forward(&h1);
        let h2 = relu(&p2);
        let rec = self.g3.forward(&h2);
        (rec, ImageDecoderCache { z: z.clone(), p1, h1, p2, h2 })
    }

    pub fn backward(&mut self, cache: &ImageDecoderCache, drec: &Array3<f64>) -> Array3<f64> {
        let dh2 = self.g3.backward(&cache.h2, drec, true).unwrap();
        let dp2 = relu_backward(&cache.p2, &dh2);
        let dh1 = self.g2.backward(&cache.h1, &dp2, true).unwrap();
        let dp1 = relu_backward(&cache.p1, &dh1);
        self.g1.backward(&cache.z, &dp1, true).unwrap()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.g1.params_mut();
        p.extend(self.g2.params_mut());
        p.extend(self.g3.params_mut());
        p
    }
}

// ---------------------------------------------------------------------------
// Conditioning encoder
// ---------------------------------------------------------------------------

/// Small strided-conv encoder standing in for a pre-trained self-supervised
/// patch embedder; produces the conditioning vector y.
pub struct ConditionEncoder {
    s1: Conv2d,
    s2: Conv2d,
    s3: Linear,
    /// Learned constant used as the unconditional token.
    pub null_cond: Param,
}

pub struct ConditionEncoderCache {
    c1: ConvActCache,
    c2: ConvActCache,
    h2_dim: (usize, usize),
    pooled: Array1<f64>,
}

impl ConditionEncoder {
    fn new(seed: u64) -> Self {
        let mut rng = stream_rng(seed, "init-condition-encoder");
        let s1 = Conv2d::new("ssl.s1", &mut rng, 3, 16, 3, 2, 1, PadMode::Replicate);
        let s2 = Conv2d::new("ssl.s2", &mut rng, 16, 32, 3, 2, 1, PadMode::Replicate);
        let s3 = Linear::new("ssl.s3", &mut rng, 32, D_COND);
        let mut null_rng = stream_rng(seed, "init-null-cond");
        let mut null = Array1::zeros(D_COND);
        crate::tensor::randn_fill(&mut null_rng, null.as_slice_mut().unwrap());
        null.mapv_inplace(|v| v * 0.02);
        ConditionEncoder { s1, s2, s3, null_cond: Param::new("ssl.null_cond", null) }
    }

    pub fn forward_train(&self, x: &Array3<f64>) -> (Array1<f64>, ConditionEncoderCache) {
        let (h1, c1) = conv_relu_forward(&self.s1, x);
        let (h2, c2) = conv_relu_forward(&self.s2, &h1);
        let pooled = global_avg_pool(&h2);
        let y = self.s3.forward(&pooled);
        let (hh, ww, _) = h2.dim();
        (y, ConditionEncoderCache { c1, c2, h2_dim: (hh, ww), pooled })
    }

    pub fn backward(&mut self, cache: &ConditionEncoderCache, dy: &Array1<f64>) {
        let dpooled = self.s3.backward(&cache.pooled, dy);
        let dh2 = global_avg_pool_backward(&dpooled, cache.h2_dim.0, cache.h2_dim.1);
        let dh1 = conv_relu_backward(&mut self.s2, &cache.c2, &dh2, true).unwrap();
        conv_relu_backward(&mut self.s1, &cache.c1, &dh1, false);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.s1.params_mut();
        p.extend(self.s2.params_mut());
        p.extend(self.s3.params_mut());
        p.push(&mut self.null_cond);
        p
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.s1.params();
        p.extend(self.s2.params());
        p.extend(self.s3.params());
        p.push(&self.null_cond);
        p
    }
}

// ---------------------------------------------------------------------------
// Cross-attention
// ---------------------------------------------------------------------------

/// Single-token cross-attention: each spatial position computes a scalar
/// gate from its query against the conditioning key and adds the gated
/// conditioning value to its channels.
pub struct CrossAttention {
    q: Conv2d,  // 1×1, C → D_ATTN
    k: Linear,  // d_cond → D_ATTN
    v: Linear,  // d_cond → C
    channels: usize,
}

pub struct CrossAttentionCache {
    x_in: Array3<f64>,
    qmap: Array3<f64>,
    kvec: Array1<f64>,
    vvec: Array1<f64>,
    gate: ndarray::Array2<f64>,
    cond: Array1<f64>,
}

impl CrossAttention {
    fn new(name: &str, seed: u64, channels: usize) -> Self {
        let mut rng = stream_rng(seed, &format!("init-attn-{name}"));
        CrossAttention {
            q: Conv2d::new(&format!("{name}.q"), &mut rng, channels, D_ATTN, 1, 1, 0, PadMode::Zero),
            k: Linear::new(&format!("{name}.k"), &mut rng, D_COND, D_ATTN),
            v: Linear::new(&format!("{name}.v"), &mut rng, D_COND, channels),
            channels,
        }
    }

    pub fn forward_train(&self, x: &Array3<f64>, cond: &Array1<f64>) -> (Array3<f64>, CrossAttentionCache) {
        let (h, w, c) = x.dim();
        debug_assert_eq!(c, self.channels);
        let qmap = self.q.forward(x);
        let kvec = self.k.forward(cond);
        let vvec = self.v.forward(cond);
        let scale = 1.0 / (D_ATTN as f64).sqrt();
        let mut gate = ndarray::Array2::zeros((h, w));
        let mut y = x.clone();
        for iy in 0..h {
            for ix in 0..w {
                let mut s = 0.0;
                for d in 0..D_ATTN {
                    s += qmap[(iy, ix, d)] * kvec[d];
                }
                let g = sigmoid(s * scale);
                gate[(iy, ix)] = g;
                for ci in 0..c {
                    y[(iy, ix, ci)] += g * vvec[ci];
                }
            }
        }
        let cache = CrossAttentionCache {
            x_in: x.clone(),
            qmap,
            kvec,
            vvec,
            gate,
            cond: cond.clone(),
        };
        (y, cache)
    }

    /// Returns (dx, dcond).
    pub fn backward(
        &mut self,
        cache: &CrossAttentionCache,
        dy: &Array3<f64>,
    ) -> (Array3<f64>, Array1<f64>) {
        let (h, w, c) = dy.dim();
        let scale = 1.0 / (D_ATTN as f64).sqrt();
        let mut dq = Array3::zeros((h, w, D_ATTN));
        let mut dk = Array1::zeros(D_ATTN);
        let mut dv = Array1::zeros(c);
        for iy in 0..h {
            for ix in 0..w {
                let g = cache.gate[(iy, ix)];
                let mut dg = 0.0;
                for ci in 0..c {
                    dg += dy[(iy, ix, ci)] * cache.vvec[ci];
                    dv[ci] += dy[(iy, ix, ci)] * g;
                }
                let ds = dg * g * (1.0 - g) * scale;
                for d in 0..D_ATTN {
                    dq[(iy, ix, d)] = ds * cache.kvec[d];
                    dk[d] += ds * cache.qmap[(iy, ix, d)];
                }
            }
        }
        let mut dx = dy.clone();
        let dx_q = self.q.backward(&cache.x_in, &dq, true).unwrap();
        dx += &dx_q;
        let mut dcond = self.k.backward(&cache.cond, &dk);
        dcond += &self.v.backward(&cache.cond, &dv);
        (dx, dcond)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.q.params_mut();
        p.extend(self.k.params_mut());
        p.extend(self.v.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.q.params();
        p.extend(self.k.params());
        p.extend(self.v.params());
        p
    }
}

// ---------------------------------------------------------------------------
// Denoising UNet
// ---------------------------------------------------------------------------

/// Sinusoidal timestep embedding: 16 log-spaced frequencies, sin half then
/// cos half.
pub fn timestep_embedding(t: usize) -> Array1<f64> {
    let half = D_TEMB / 2;
    let mut emb = Array1::zeros(D_TEMB);
    for i in 0..half {
        let freq = (-(10000.0f64).ln() * i as f64 / (half - 1) as f64).exp();
        let arg = t as f64 * freq;
        emb[i] = arg.sin();
        emb[half + i] = arg.cos();
    }
    emb
}

/// Conditional denoising UNet with one downsampling stage, a middle block,
/// and four upsampling blocks; every block carries a cross-attention and is
/// tapped for feature extraction. Predicts the clean latent.
pub struct DenoiseUNet {
    inc: Conv2d,      // 4 → 16, full resolution
    d1: Conv2d,       // 16 → 32, stride 2
    mid: Conv2d,      // 32 → 32 at half resolution
    temb1: Linear,    // 32 → 64
    temb2: Linear,    // 64 → 32
    attn_mid: CrossAttention,
    u1: Conv2d,       // 32 → 16 after nearest ×2 upsample
    attn_u1: CrossAttention,
    u2: Conv2d,       // cat(u1, inc) 32 → 16
    attn_u2: CrossAttention,
    u3: Conv2d,       // 16 → 8
    attn_u3: CrossAttention,
    u4: Conv2d,       // 8 → 8
    attn_u4: CrossAttention,
    outc: Conv2d,     // 1×1, 8 → 4
}

pub struct UNetCache {
    z_in: Array3<f64>,
    inc_c: ConvActCache,
    d1_c: ConvActCache,
    mid_x: Array3<f64>,
    mid_pre_attn: Array3<f64>,
    mid_attn: CrossAttentionCache,
    mid_pre: Array3<f64>,
    m: Array3<f64>,
    up_caches: Vec<(Array3<f64>, CrossAttentionCache, Array3<f64>)>, // (conv input, attn cache, pre-ReLU)
    a4: Array3<f64>,
    temb_in: Array1<f64>,
    temb_h_pre: Array1<f64>,
}

impl DenoiseUNet {
    fn new(seed: u64) -> Self {
        let mut rng = stream_rng(seed, "init-unet");
        DenoiseUNet {
            inc: Conv2d::new("unet.inc", &mut rng, 4, 16, 3, 1, 1, PadMode::Replicate),
            d1: Conv2d::new("unet.d1", &mut rng, 16, 32, 3, 2, 1, PadMode::Replicate),
            mid: Conv2d::new("unet.mid", &mut rng, 32, 32, 3, 1, 1, PadMode::Replicate),
            temb1: Linear::new("unet.temb1", &mut rng, D_TEMB, 64),
            temb2: Linear::new("unet.temb2", &mut rng, 64, 32),
            attn_mid: CrossAttention::new("unet.attn_mid", seed, 32),
            u1: Conv2d::new("unet.u1", &mut rng, 32, 16, 3, 1, 1, PadMode::Replicate),
            attn_u1: CrossAttention::new("unet.attn_u1", seed, 16),
            u2: Conv2d::new("unet.u2", &mut rng, 32, 16, 3, 1, 1, PadMode::Replicate),
            attn_u2: CrossAttention::new("unet.attn_u2", seed, 16),
            u3: Conv2d::new("unet.u3", &mut rng, 16, 8, 3, 1, 1, PadMode::Replicate),
            attn_u3: CrossAttention::new("unet.attn_u3", seed, 8),
            u4: Conv2d::new("unet.u4", &mut rng, 8, 8, 3, 1, 1, PadMode::Replicate),
            attn_u4: CrossAttention::new("unet.attn_u4", seed, 8),
            outc: Conv2d::new("unet.outc", &mut rng, 8, 4, 1, 1, 0, PadMode::Zero),
        }
    }

    /// Full forward pass. Returns the five tapped activations (middle,
    /// up_1..up_4), the clean-latent prediction, and the caches needed for
    /// backpropagation.
    pub fn forward_train(
        &self,
        z: &Array3<f64>,
        t: usize,
        cond: &Array1<f64>,
    ) -> (Vec<Array3<f64>>, Array3<f64>, UNetCache) {
        let (h0, inc_c) = conv_relu_forward(&self.inc, z);
        let (h1, d1_c) = conv_relu_forward(&self.d1, &h0);

        let temb_in = timestep_embedding(t);
        let temb_h_pre = self.temb1.forward(&temb_in);
        let temb_h = relu(&temb_h_pre);
        let tbias = self.temb2.forward(&temb_h);

        let mid_x = h1;
        let mut mid_pre_attn = self.mid.forward(&mid_x);
        for mut px in mid_pre_attn.rows_mut() {
            px += &tbias;
        }
        let (mid_pre, mid_attn) = self.attn_mid.forward_train(&mid_pre_attn, cond);
        let m = relu(&mid_pre);

        let m_up = upsample_nearest_x2(&m);
        let mut taps = vec![m.clone()];
        let mut up_caches = Vec::new();

        let run_up = |conv: &Conv2d,
                          attn: &CrossAttention,
                          x_in: Array3<f64>,
                          taps: &mut Vec<Array3<f64>>,
                          up_caches: &mut Vec<(Array3<f64>, CrossAttentionCache, Array3<f64>)>|
         -> Array3<f64> {
            let conv_out = conv.forward(&x_in);
            let (pre, ac) = attn.forward_train(&conv_out, cond);
            let y = relu(&pre);
            taps.push(y.clone());
            up_caches.push((x_in, ac, pre));
            y
        };

        let a1 = run_up(&self.u1, &self.attn_u1, m_up, &mut taps, &mut up_caches);
        let cat = ndarray::concatenate(Axis(2), &[a1.view(), h0.view()])
            .expect("concat shapes")
            .as_standard_layout()
            .to_owned();
        let a2 = run_up(&self.u2, &self.attn_u2, cat, &mut taps, &mut up_caches);
        let a3 = run_up(&self.u3, &self.attn_u3, a2, &mut taps, &mut up_caches);
        let a4 = run_up(&self.u4, &self.attn_u4, a3, &mut taps, &mut up_caches);
        let z0_pred = self.outc.forward(&a4);

        let cache = UNetCache {
            z_in: z.clone(),
            inc_c,
            d1_c,
            mid_x,
            mid_pre_attn,
            mid_attn,
            mid_pre,
            m,
            up_caches,
            a4,
            temb_in,
            temb_h_pre,
        };
        (taps, z0_pred, cache)
    }

    /// Backpropagates the clean-latent prediction loss gradient; accumulates
    /// parameter gradients and returns the conditioning gradient.
    pub fn backward(&mut self, cache: &UNetCache, dz0_pred: &Array3<f64>) -> Array1<f64> {
        let mut dcond_total = Array1::zeros(D_COND);
        let da4 = self.outc.backward(&cache.a4, dz0_pred, true).unwrap();

        // Upsampling blocks in reverse order.
        let (u4_in, u4_attn, u4_pre) = &cache.up_caches[3];
        let dpre = relu_backward(u4_pre, &da4);
        let (dconv, dcond) = self.attn_u4.backward(u4_attn, &dpre);
        dcond_total += &dcond;
        let da3 = self.u4.backward(u4_in, &dconv, true).unwrap();

        let (u3_in, u3_attn, u3_pre) = &cache.up_caches[2];
        let dpre = relu_backward(u3_pre, &da3);
        let (dconv, dcond) = self.attn_u3.backward(u3_attn, &dpre);
        dcond_total += &dcond;
        let da2 = self.u3.backward(u3_in, &dconv, true).unwrap();

        let (u2_in, u2_attn, u2_pre) = &cache.up_caches[1];
        let dpre = relu_backward(u2_pre, &da2);
        let (dconv, dcond) = self.attn_u2.backward(u2_attn, &dpre);
        dcond_total += &dcond;
        let dcat = self.u2.backward(u2_in, &dconv, true).unwrap();
        let da1_from_cat = dcat.slice(ndarray::s![.., .., ..16]).to_owned();
        let dh0_skip = dcat.slice(ndarray::s![.., .., 16..]).to_owned();

        let (u1_in, u1_attn, u1_pre) = &cache.up_caches[0];
        let dpre = relu_backward(u1_pre, &da1_from_cat);
        let (dconv, dcond) = self.attn_u1.backward(u1_attn, &dpre);
        dcond_total += &dcond;
        let dm_up = self.u1.backward(u1_in, &dconv, true).unwrap();
        let dm = upsample_nearest_x2_backward(&dm_up);

        // Middle block.
        let dmid_pre = relu_backward(&cache.mid_pre, &dm);
        let (dmid_conv_plus_t, dcond) = self.attn_mid.backward(&cache.mid_attn, &dmid_pre);
        dcond_total += &dcond;
        let mut dtbias = Array1::zeros(32);
        for px in dmid_conv_plus_t.rows() {
            dtbias += &px;
        }
        let dtemb_h = self.temb2.backward(&relu(&cache.temb_h_pre), &dtbias);
        let dtemb_pre = {
            let mut d = dtemb_h;
            for (dv, pv) in d.iter_mut().zip(cache.temb_h_pre.iter()) {
                if *pv <= 0.0 {
                    *dv = 0.0;
                }
            }
            d
        };
        self.temb1.backward(&cache.temb_in, &dtemb_pre);
        let dh1 = self.mid.backward(&cache.mid_x, &dmid_conv_plus_t, true).unwrap();

        // Encoder path of the UNet.
        let dh0_main = conv_relu_backward(&mut self.d1, &cache.d1_c, &dh1, true).unwrap();
        let dh0 = dh0_main + dh0_skip;
        conv_relu_backward(&mut self.inc, &cache.inc_c, &dh0, false);
        let _ = &cache.z_in;
        dcond_total
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.inc.params_mut();
        p.extend(self.d1.params_mut());
        p.extend(self.mid.params_mut());
        p.extend(self.temb1.params_mut());
        p.extend(self.temb2.params_mut());
        p.extend(self.attn_mid.params_mut());
        p.extend(self.u1.params_mut());
        p.extend(self.attn_u1.params_mut());
        p.extend(self.u2.params_mut());
        p.extend(self.attn_u2.params_mut());
        p.extend(self.u3.params_mut());
        p.extend(self.attn_u3.params_mut());
        p.extend(self.u4.params_mut());
        p.extend(self.attn_u4.params_mut());
        p.extend(self.outc.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.inc.params();
        p.extend(self.d1.params());
        p.extend(self.mid.params());
        p.extend(self.temb1.params());
        p.extend(self.temb2.params());
        p.extend(self.attn_mid.params());
        p.extend(self.u1.params());
        p.extend(self.attn_u1.params());
        p.extend(self.u2.params());
        p.extend(self.attn_u2.params());
        p.extend(self.u3.params());
        p.extend(self.attn_u3.params());
        p.extend(self.u4.params());
        p.extend(self.attn_u4.params());
        p.extend(self.outc.params());
        p
    }
}

// ---------------------------------------------------------------------------
// Assembled backbone
// ---------------------------------------------------------------------------

/// The full stack: image encoder, conditioning encoder, denoising UNet, and
/// (during pre-training only) the reconstruction decoder.
pub struct Backbone {
    pub encoder: ImageEncoder,
    pub decoder: Option<ImageDecoder>,
    pub condition: ConditionEncoder,
    pub unet: DenoiseUNet,
    pub descriptor: BackboneDescriptor,
}

impl Backbone {
    /// Fresh randomly-initialized desk-scale backbone (unfrozen, unit
    /// latent scale); must be pre-trained and calibrated before use.
    pub fn new_toy(seed: u64) -> Self {
        Backbone {
            encoder: ImageEncoder::new(seed),
            decoder: Some(ImageDecoder::new(seed)),
            condition: ConditionEncoder::new(seed),
            unet: DenoiseUNet::new(seed),
            descriptor: BackboneDescriptor::toy(),
        }
    }

    pub fn freeze(&mut self) {
        self.descriptor.frozen = true;
        self.decoder = None;
    }

    /// Encodes an image in [0,1] HWC into a scaled clean latent.
    pub fn encode_image(&self, x: &Array3<f64>) -> Result<Latent> {
        let (h, w, c) = x.dim();
        let f = self.descriptor.latent_downsample_factor;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "image dims {h}×{w} not divisible by latent downsample factor {f}"
            )));
        }
        let (z_raw, _) = self.encoder.forward_train(x);
        let z = z_raw / self.descriptor.latent_scale;
        Ok(Latent::clean(z))
    }

    /// Runs the conditioning encoder on a patch of the expected size.
    pub fn encode_condition(&self, x: &Array3<f64>) -> Result<ConditioningVector> {
        let (h, w, c) = x.dim();
        let p = self.descriptor.patch_size;
        if c != 3 || h != p || w != p {
            return Err(Error::Shape(format!(
                "conditioning encoder expects {p}×{p}×3 patches, got {h}×{w}×{c}"
            )));
        }
        let (y, _) = self.condition.forward_train(x);
        Ok(ConditioningVector { values: y, source: "toy-ssl".into() })
    }

    /// The learned unconditional token.
    pub fn null_condition(&self) -> ConditioningVector {
        ConditioningVector {
            values: self.condition.null_cond.value.view().into_dimensionality().unwrap().to_owned(),
            source: "none".into(),
        }
    }

    /// Single forward pass through the denoiser, returning one activation
    /// per descriptor block in order (middle first, then up_1..up_B).
    ///
    /// A timestep of 0 is accepted and means the clean latent was passed
    /// through without noising.
    pub fn run_unet_with_taps(
        &self,
        z_t: &Latent,
        y: &ConditioningVector,
    ) -> Result<Vec<BlockActivation>> {
        if y.values.len() != self.descriptor.d_cond {
            return Err(Error::Shape(format!(
                "conditioning dimension {} does not match backbone d_cond {}",
                y.values.len(),
                self.descriptor.d_cond
            )));
        }
        let (h, w, c) = z_t.values.dim();
        if c != self.descriptor.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels, backbone expects {}",
                self.descriptor.latent_channels
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "latent dims {h}×{w} must be even for the down/up sampling stage"
            )));
        }
        let (taps, _z0_pred, _) = self.unet.forward_train(&z_t.values, z_t.timestep, &y.values);
        Ok(taps
            .into_iter()
            .zip(self.descriptor.block_ids.iter())
            .map(|(values, id)| BlockActivation {
                block_id: id.clone(),
                values,
                timestep: z_t.timestep,
            })
            .collect())
    }

    /// All learnable parameters, in a stable order (encoder, decoder if
    /// present, conditioning encoder, UNet).
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        if let Some(dec) = self.decoder.as_mut() {
            p.extend(dec.params_mut());
        }
        p.extend(self.condition.params_mut());
        p.extend(self.unet.params_mut());
        p
    }

    /// Parameters serialized into checkpoints: everything except the
    /// transient reconstruction decoder.
    pub fn persistent_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.condition.params_mut());
        p.extend(self.unet.params_mut());
        p
    }

    /// Immutable view of the persistent parameters, in checkpoint order.
    pub fn persistent_params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.condition.params());
        p.extend(self.unet.params());
        p
    }
}
