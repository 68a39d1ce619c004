//! Fully convolutional segmentation head.
//!
//! Maps a stitched feature map `(H, W, C)` to per-pixel class scores
//! `(H_img, W_img, K)` through a four-layer stack: a 3×3 convolution that
//! reduces channels, two transposed convolutions that carry the upsampling,
//! and a final 1×1 convolution onto the class axis. Batch normalization and
//! ReLU follow every layer except the final classification layer.
//!
//! The total upsampling factor is derived from the feature/image geometry at
//! construction time and split across the two transposed convolutions. When
//! the incoming features are already at image resolution (the usual case for
//! stitched patch-grid features) both transposed convolutions run at stride 1
//! and act as plain learned refinement layers.
//!
//! The final layer starts with zero weight and bias, so a freshly built head
//! predicts the uniform distribution (all-zero logits) everywhere; training
//! moves it off that plateau. Hidden layers use fan-in-scaled Gaussian init.

use ndarray::{Array2, Array3, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    relu, relu_backward, BatchNorm2d, Conv2d, ConvTranspose2d, PadMode, Param,
};
use crate::tensor::stream_rng;

/// Default hidden widths for the three learned layers before classification.
pub const DEFAULT_WIDTHS: [usize; 3] = [256, 128, 64];

/// Batch-norm running-average momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-pixel class labels with a reserved don't-care value.
///
/// `classes` holds ids in `[0, num_classes)` plus `ignore_index` for pixels
/// excluded from losses and metrics. The ignore id is stored distinctly so
/// callers never have to guess it from the class count (it defaults to
/// `num_classes` but is carried explicitly).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub classes: Array2<u32>,
    pub num_classes: usize,
    pub ignore_index: u32,
}

impl SegmentationMask {
    /// Wraps a label image, validating that every value is a class id or the
    /// ignore id.
    pub fn new(classes: Array2<u32>, num_classes: usize, ignore_index: u32) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Parameter(format!(
                "mask needs at least 2 classes, got {num_classes}"
            )));
        }
        if (ignore_index as usize) < num_classes {
            return Err(Error::Parameter(format!(
                "ignore index {ignore_index} collides with class ids 0..{num_classes}"
            )));
        }
        for &v in classes.iter() {
            if (v as usize) >= num_classes && v != ignore_index {
                return Err(Error::Parameter(format!(
                    "mask value {v} outside 0..{num_classes} and not ignore ({ignore_index})"
                )));
            }
        }
        Ok(SegmentationMask { classes, num_classes, ignore_index })
    }

    /// Mask with the conventional ignore id `num_classes`.
    pub fn with_default_ignore(classes: Array2<u32>, num_classes: usize) -> Result<Self> {
        Self::new(classes, num_classes, num_classes as u32)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.classes.dim()
    }

    /// Number of pixels that participate in losses and metrics.
    pub fn valid_pixels(&self) -> usize {
        self.classes.iter().filter(|&&v| v != self.ignore_index).count()
    }
}

/// Per-pixel class logits `(H, W, K)`.
///
/// Values are finite by construction; softmax over the last axis yields a
/// probability distribution per pixel.
#[derive(Debug, Clone)]
pub struct ClassScores {
    pub logits: Array3<f64>,
}

impl ClassScores {
    /// Wraps logits, rejecting NaN/infinite entries.
    pub fn new(logits: Array3<f64>) -> Result<Self> {
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(
                "class scores contain non-finite logits".into(),
            ));
        }
        Ok(ClassScores { logits })
    }

    pub fn num_classes(&self) -> usize {
        self.logits.dim().2
    }

    /// Softmax over the class axis; mostly a test/debug convenience — the
    /// loss works in log space and never materializes this.
    pub fn softmax(&self) -> Array3<f64> {
        let (h, w, k) = self.logits.dim();
        let mut p = self.logits.clone();
        for y in 0..h {
            for x in 0..w {
                let mut row = p.slice_mut(ndarray::s![y, x, ..]);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - m).exp());
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
                let _ = k;
            }
        }
        p
    }
}

/// Per-pixel argmax with ties broken toward the lowest class index.
///
/// Adding a per-pixel constant to all logits leaves the result unchanged.
/// The produced mask never contains its ignore id.
pub fn predict_mask(scores: &ClassScores) -> SegmentationMask {
    let (h, w, k) = scores.logits.dim();
    let mut classes = Array2::<u32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = scores.logits[(y, x, 0)];
            for c in 1..k {
                let v = scores.logits[(y, x, c)];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            classes[(y, x)] = best as u32;
        }
    }
    SegmentationMask {
        classes,
        num_classes: k,
        ignore_index: k as u32,
    }
}

/// Geometry and width configuration for [`SegmentationHead`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Channel count of the incoming feature map.
    pub in_channels: usize,
    /// Number of output classes.
    pub num_classes: usize,
    /// Hidden widths of the three learned layers before classification.
    pub widths: [usize; 3],
    /// Spatial dims of the incoming feature map.
    pub feature_size: (usize, usize),
    /// Spatial dims of the target prediction (the original image).
    pub image_size: (usize, usize),
}

impl HeadConfig {
    pub fn new(
        in_channels: usize,
        num_classes: usize,
        widths: [usize; 3],
        feature_size: (usize, usize),
        image_size: (usize, usize),
    ) -> Self {
        HeadConfig { in_channels, num_classes, widths, feature_size, image_size }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Parameter("head widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Parameter(format!(
                "head needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Splits the feature→image upsampling factor across the two transposed
/// convolutions.
///
/// The image dims must be identical integer multiples of the feature dims;
/// the multiple is factored into two strides `(s1, s2)` with `s1 ≤ s2`,
/// chosen as the most balanced factorization. Factor 1 (features already at
/// image resolution) yields `(1, 1)`.
pub fn derive_stride_plan(
    feature_size: (usize, usize),
    image_size: (usize, usize),
) -> Result<(usize, usize)> {
    let (fh, fw) = feature_size;
    let (ih, iw) = image_size;
    if fh == 0 || fw == 0 || ih == 0 || iw == 0 {
        return Err(Error::Parameter("head geometry must be positive".into()));
    }
    if ih % fh != 0 || iw % fw != 0 || ih / fh != iw / fw {
        return Err(Error::Shape(format!(
            "image dims {ih}×{iw} are not a uniform multiple of feature dims {fh}×{fw}"
        )));
    }
    let factor = ih / fh;
    let mut s1 = 1;
    for d in 1..=factor {
        if d * d > factor {
            break;
        }
        if factor % d == 0 {
            s1 = d;
        }
    }
    Ok((s1, factor / s1))
}

/// Transposed convolution kernel/padding that realizes an exact ×`stride`
/// upsampling: kernel `stride + 2`, padding 1 gives `(i−1)·s + (s+2) − 2 = s·i`.
fn upsample_geometry(stride: usize) -> (usize, usize) {
    (stride + 2, 1)
}

/// Intermediate activations kept from a training forward pass for backward.
///
/// Batch-norm layers cache their own normalized activations internally; this
/// holds everything else except the input feature map, which the caller
/// retains and passes back to [`SegmentationHead::backward`].
pub struct HeadCache {
    b1: Array3<f64>,
    r1: Array3<f64>,
    b2: Array3<f64>,
    r2: Array3<f64>,
    b3: Array3<f64>,
    r3: Array3<f64>,
}

/// Trainable FCN mapping stitched features to class logits.
pub struct SegmentationHead {
    pub conv_in: Conv2d,
    pub bn1: BatchNorm2d,
    pub up1: ConvTranspose2d,
    pub bn2: BatchNorm2d,
    pub up2: ConvTranspose2d,
    pub bn3: BatchNorm2d,
    pub classify: Conv2d,
    pub config: HeadConfig,
    pub stride_plan: (usize, usize),
}

impl SegmentationHead {
    /// Builds a head for the given geometry, seeding all random init from
    /// `seed`. Logs the trainable parameter count at build time.
    pub fn new(config: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (s1, s2) = derive_stride_plan(config.feature_size, config.image_size)?;
        let [w1, w2, w3] = config.widths;
        let mut rng = stream_rng(seed, "init-head");
        let (k1, p1) = upsample_geometry(s1);
        let (k2, p2) = upsample_geometry(s2);
        let head = SegmentationHead {
            conv_in: Conv2d::new(
                "head.conv_in",
                &mut rng,
                config.in_channels,
                w1,
                3,
                1,
                1,
                PadMode::Zero,
            ),
            bn1: BatchNorm2d::new("head.bn1", w1, BN_MOMENTUM),
            up1: ConvTranspose2d::new("head.up1", &mut rng, w1, w2, k1, s1, p1),
            bn2: BatchNorm2d::new("head.bn2", w2, BN_MOMENTUM),
            up2: ConvTranspose2d::new("head.up2", &mut rng, w2, w3, k2, s2, p2),
            bn3: BatchNorm2d::new("head.bn3", w3, BN_MOMENTUM),
            classify: Conv2d::new_zeroed("head.classify", w3, config.num_classes, 1, 1, 0, PadMode::Zero),
            config,
            stride_plan: (s1, s2),
        };
        log::info!(
            "segmentation head built: {} trainable parameters, stride plan ×{}·×{}",
            head.param_count(),
            s1,
            s2
        );
        Ok(head)
    }

    /// Total number of trainable scalars (conv weights/biases + BN affines).
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let (h, w, c) = x.dim();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "head expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if (h, w) != self.config.feature_size {
            return Err(Error::Shape(format!(
                "head expects {}×{} features, got {h}×{w}",
                self.config.feature_size.0, self.config.feature_size.1
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass (batch statistics); returns logits plus the
    /// activation cache needed by [`backward`](Self::backward).
    pub fn forward_train(&mut self, x: &Array3<f64>) -> Result<(ClassScores, HeadCache)> {
        self.check_input(x)?;
        let c1 = self.conv_in.forward(x);
        let b1 = self.bn1.forward(&c1, true);
        let r1 = relu(&b1);
        let c2 = self.up1.forward(&r1);
        let b2 = self.bn2.forward(&c2, true);
        let r2 = relu(&b2);
        let c3 = self.up2.forward(&r2);
        let b3 = self.bn3.forward(&c3, true);
        let r3 = relu(&b3);
        let logits = self.classify.forward(&r3);
        let scores = ClassScores::new(logits)?;
        Ok((scores, HeadCache { b1, r1, b2, r2, b3, r3 }))
    }

    /// Inference-mode forward pass (running batch-norm statistics).
    pub fn forward_eval(&mut self, x: &Array3<f64>) -> Result<ClassScores> {
        self.check_input(x)?;
        let c1 = self.conv_in.forward(x);
        let r1 = relu(&self.bn1.forward(&c1, false));
        let c2 = self.up1.forward(&r1);
        let r2 = relu(&self.bn2.forward(&c2, false));
        let c3 = self.up2.forward(&r2);
        let r3 = relu(&self.bn3.forward(&c3, false));
        ClassScores::new(self.classify.forward(&r3))
    }

    /// Accumulates parameter gradients from `dlogits`. `x` must be the exact
    /// input of the matching [`forward_train`](Self::forward_train) call, and
    /// the batch-norm layers must still hold that call's caches.
    pub fn backward(&mut self, x: &Array3<f64>, cache: &HeadCache, dlogits: &Array3<f64>) {
        let d_r3 = self.classify.backward(&cache.r3, dlogits, true).unwrap();
        let d_b3 = relu_backward(&cache.b3, &d_r3);
        let d_c3 = self.bn3.backward(&d_b3);
        let d_r2 = self.up2.backward(&cache.r2, &d_c3, true).unwrap();
        let d_b2 = relu_backward(&cache.b2, &d_r2);
        let d_c2 = self.bn2.backward(&d_b2);
        let d_r1 = self.up1.backward(&cache.r1, &d_c2, true).unwrap();
        let d_b1 = relu_backward(&cache.b1, &d_r1);
        let d_c1 = self.bn1.backward(&d_b1);
        // The feature map is fixed input, so its gradient is never needed.
        self.conv_in.backward(x, &d_c1, false);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.conv_in.params_mut();
        ps.extend(self.bn1.params_mut());
        ps.extend(self.up1.params_mut());
        ps.extend(self.bn2.params_mut());
        ps.extend(self.up2.params_mut());
        ps.extend(self.bn3.params_mut());
        ps.extend(self.classify.params_mut());
        ps
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.conv_in.params();
        ps.extend(self.bn1.params());
        ps.extend(self.up1.params());
        ps.extend(self.bn2.params());
        ps.extend(self.up2.params());
        ps.extend(self.bn3.params());
        ps.extend(self.classify.params());
        ps
    }

    /// Everything a checkpoint must capture: trainable parameters plus the
    /// batch-norm running statistics.
    pub fn state_tensors(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out: Vec<(String, ArrayD<f64>)> = self
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for bn in [&self.bn1, &self.bn2, &self.bn3] {
            out.push((format!("{}.running_mean", bn.name), bn.running_mean.clone().into_dyn()));
            out.push((format!("{}.running_var", bn.name), bn.running_var.clone().into_dyn()));
        }
        out
    }

    /// Restores state captured by [`state_tensors`](Self::state_tensors).
    pub fn load_state(&mut self, tensors: &[(String, ArrayD<f64>)]) -> Result<()> {
        let mut by_name: std::collections::BTreeMap<&str, &ArrayD<f64>> =
            tensors.iter().map(|(n, v)| (n.as_str(), v)).collect();
        for p in self.params_mut() {
            let v = by_name.remove(p.name.as_str()).ok_or_else(|| {
                Error::Load(format!("head checkpoint is missing tensor {}", p.name))
            })?;
            if v.shape() != p.value.shape() {
                return Err(Error::Load(format!(
                    "head tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value.assign(v);
        }
        for bn in [&mut self.bn1, &mut self.bn2, &mut self.bn3] {
            for (field, slot) in [
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ] {
                let name = format!("{}.{field}", bn.name);
                let v = by_name.remove(name.as_str()).ok_or_else(|| {
                    Error::Load(format!("head checkpoint is missing tensor {name}"))
                })?;
                let v1 = v
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|_| Error::Load(format!("head tensor {name} is not 1-d")))?;
                if v1.len() != slot.len() {
                    return Err(Error::Load(format!(
                        "head tensor {name} has length {}, expected {}",
                        v1.len(),
                        slot.len()
                    )));
                }
                slot.assign(&v1);
            }
        }
        if let Some((name, _)) = by_name.into_iter().next() {
            return Err(Error::Load(format!(
                "head checkpoint contains unexpected tensor {name}"
            )));
        }
        Ok(())
    }
}
