//! Dataset generation, ingestion and preprocessing.
//!
//! Three corpus styles are supported:
//! * a deterministic synthetic generator (colored elliptical regions with a
//!   don't-care boundary band) used by the desk-scale training and test
//!   pipelines;
//! * region-of-interest corpora whose large annotated ROIs are cut into
//!   overlapping windows, filtered by don't-care coverage, and randomly
//!   cropped to the training resolution;
//! * fixed-size corpora whose images are simply resized to the target
//!   resolution (bilinear for pixels, nearest-neighbour for labels).
//!
//! All processed artifacts use one on-disk convention: 8-bit RGB images,
//! single-channel indexed mask images whose pixel values are class ids, a
//! JSON palette sidecar naming the classes, and a JSON manifest listing the
//! split contents.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::SegmentationMask;
use crate::tensor::{derive_seed, stream_rng};

/// Output resolution of every emitted training pair.
pub const TRAIN_SIZE: usize = 768;

/// Class count of the default synthetic corpus (plus don't-care).
pub const SYNTHETIC_CLASSES: usize = 5;

/// Display palette for the 5-class synthetic corpus: background, four region
/// colors, and the grey rendered into don't-care boundary bands.
pub const SYNTHETIC_PALETTE_K5: [[f64; 3]; 6] = [
    [0.82, 0.80, 0.78],
    [0.75, 0.10, 0.12],
    [0.10, 0.22, 0.80],
    [0.95, 0.78, 0.08],
    [0.08, 0.62, 0.25],
    [0.45, 0.45, 0.45],
];

/// Long-run per-class pixel fractions of the 5-class 768² generator
/// (indices 0..4 = classes, 5 = don't-care), measured over a large sample of
/// generated images. Fresh corpora match these within a few percent.
pub const SYNTHETIC_CLASS_PRIORS_K5: [f64; 6] = [
    0.2896, 0.1125, 0.1141, 0.1166, 0.1152, 0.2520,
];

/// Gaussian pixel noise added to rendered synthetic images.
const SYNTHETIC_NOISE_STD: f64 = 0.02;

/// Display colors for a `k`-class corpus plus one trailing don't-care color.
///
/// `k = 5` returns the tuned high-contrast palette; other class counts get a
/// deterministic hue wheel.
pub fn synthetic_palette(k: usize) -> Vec<[f64; 3]> {
    if k == SYNTHETIC_CLASSES {
        return SYNTHETIC_PALETTE_K5.to_vec();
    }
    let mut colors = vec![[0.82, 0.80, 0.78]];
    for i in 1..k {
        let h = (i - 1) as f64 / (k - 1) as f64 * 6.0;
        let x = 1.0 - (h % 2.0 - 1.0).abs();
        let (r, g, b) = match h as usize {
            0 => (1.0, x, 0.0),
            1 => (x, 1.0, 0.0),
            2 => (0.0, 1.0, x),
            3 => (0.0, x, 1.0),
            4 => (x, 0.0, 1.0),
            _ => (1.0, 0.0, x),
        };
        colors.push([0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]);
    }
    colors.push([0.45, 0.45, 0.45]);
    colors
}

/// Generates one synthetic image/mask pair.
///
/// Classes `1..k` each contribute one rotated ellipse (painted in a seeded
/// random order, so overlaps vary); class 0 is the background. A boundary
/// band — pixels whose 7×7 neighbourhood mixes classes — and a 24-pixel
/// border frame (both scaled with `size`) become don't-care. The image is
/// the palette rendering plus Gaussian noise, clamped to [0, 1].
pub fn synthetic_image(seed: u64, size: usize, k: usize) -> Result<(Array3<f64>, SegmentationMask)> {
    if k < 2 {
        return Err(Error::Parameter(format!("synthetic corpus needs k ≥ 2, got {k}")));
    }
    if size < 64 {
        return Err(Error::Parameter(format!("synthetic image size {size} is too small")));
    }
    let mut rng = stream_rng(seed, "synthetic-image");
    let scale = size as f64 / TRAIN_SIZE as f64;
    let mut mask = Array2::<u32>::zeros((size, size));

    let mut order: Vec<u32> = (1..k as u32).collect();
    order.shuffle(&mut rng);
    for &class in &order {
        let cy = rng.random_range(0.0..size as f64);
        let cx = rng.random_range(0.0..size as f64);
        let ry = rng.random_range(170.0..240.0) * scale;
        let rx = rng.random_range(170.0..240.0) * scale;
        let th = rng.random_range(0.0..std::f64::consts::PI);
        let (sin, cos) = th.sin_cos();
        let reach = ry.max(rx);
        let y0 = ((cy - reach).floor().max(0.0)) as usize;
        let y1 = ((cy + reach).ceil() as usize + 1).min(size);
        let x0 = ((cx - reach).floor().max(0.0)) as usize;
        let x1 = ((cx + reach).ceil() as usize + 1).min(size);
        for y in y0..y1 {
            let dy = y as f64 - cy;
            for x in x0..x1 {
                let dx = x as f64 - cx;
                let u = dy * cos + dx * sin;
                let v = -dy * sin + dx * cos;
                if (u / ry).powi(2) + (v / rx).powi(2) <= 1.0 {
                    mask[(y, x)] = class;
                }
            }
        }
    }

    let ignore = k as u32;
    apply_boundary_band(&mut mask, ignore);
    let frame = ((24.0 * scale).round() as usize).max(1);
    for y in 0..size {
        for x in 0..size {
            if y < frame || y >= size - frame || x < frame || x >= size - frame {
                mask[(y, x)] = ignore;
            }
        }
    }

    let palette = synthetic_palette(k);
    let mut image = Array3::<f64>::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let color = palette[mask[(y, x)] as usize];
            for c in 0..3 {
                let noise: f64 = rng.sample(rand_distr::StandardNormal);
                image[(y, x, c)] = (color[c] + SYNTHETIC_NOISE_STD * noise).clamp(0.0, 1.0);
            }
        }
    }
    let mask = SegmentationMask::new(mask, k, ignore)?;
    Ok((image, mask))
}

/// Marks pixels whose 7×7 (clamped at edges) neighbourhood contains more
/// than one class as `ignore` — a don't-care band along region boundaries.
fn apply_boundary_band(mask: &mut Array2<u32>, ignore: u32) {
    let (h, w) = mask.dim();
    let r = 3usize;
    let mut row_min = Array2::<u32>::zeros((h, w));
    let mut row_max = Array2::<u32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            let mut mn = u32::MAX;
            let mut mx = 0;
            for xx in lo..hi {
                let v = mask[(y, xx)];
                mn = mn.min(v);
                mx = mx.max(v);
            }
            row_min[(y, x)] = mn;
            row_max[(y, x)] = mx;
        }
    }
    let mut band = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            let mut mn = u32::MAX;
            let mut mx = 0;
            for yy in lo..hi {
                mn = mn.min(row_min[(yy, x)]);
                mx = mx.max(row_max[(yy, x)]);
            }
            if mn != mx {
                band.push((y, x));
            }
        }
    }
    for (y, x) in band {
        mask[(y, x)] = ignore;
    }
}

/// One image/mask pair in a manifest, as paths relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image: String,
    pub mask: String,
}

/// Windowing policy for ROI-style corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiPatchPolicy {
    /// Sliding-window side length.
    pub window: usize,
    /// Window step; the default 400 gives 50% overlap.
    pub stride: usize,
    /// Windows whose don't-care fraction strictly exceeds this are dropped.
    pub dontcare_threshold: f64,
    /// Side length of the random crop taken from each surviving window.
    pub crop: usize,
}

impl Default for RoiPatchPolicy {
    fn default() -> Self {
        RoiPatchPolicy { window: 800, stride: 400, dontcare_threshold: 0.90, crop: TRAIN_SIZE }
    }
}

impl RoiPatchPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.crop == 0 {
            return Err(Error::Parameter("patch policy dims must be positive".into()));
        }
        if self.crop > self.window {
            return Err(Error::Parameter(format!(
                "crop {} exceeds window {}",
                self.crop, self.window
            )));
        }
        if !(self.dontcare_threshold > 0.0 && self.dontcare_threshold <= 1.0) {
            return Err(Error::Parameter(format!(
                "don't-care threshold {} outside (0, 1]",
                self.dontcare_threshold
            )));
        }
        Ok(())
    }
}

/// Source-label → target-class table with its own geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMap {
    /// Keyed by source label (stringified for JSON friendliness).
    pub map: BTreeMap<String, u32>,
    pub num_classes: usize,
    pub ignore_index: u32,
}

impl ClassMap {
    pub fn lookup(&self, source: u32) -> Option<u32> {
        self.map.get(&source.to_string()).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let map: ClassMap = serde_json::from_str(&text)?;
        Ok(map)
    }
}

/// Default grouping of the 22 source annotation labels of BCSS-style corpora
/// into five categories (tumor, stroma, inflammatory, necrosis, other) plus
/// don't-care for label 0 (outside the annotated ROI).
///
/// The grouping is a convention of this implementation — the source dataset
/// does not prescribe one — and ships as an editable JSON file so it can be
/// replaced without rebuilding.
pub fn default_bcss_class_map() -> ClassMap {
    let mut map = BTreeMap::new();
    map.insert("0".to_string(), 5u32); // outside ROI → don't-care
    map.insert("1".to_string(), 0); // tumor
    map.insert("2".to_string(), 1); // stroma
    map.insert("3".to_string(), 2); // lymphocytic infiltrate
    map.insert("4".to_string(), 3); // necrosis
    for label in 5..=21u32 {
        map.insert(label.to_string(), 4); // everything else → other
    }
    ClassMap { map, num_classes: 5, ignore_index: 5 }
}

/// Split layout and metadata for a processed dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub ignore_index: u32,
    pub class_names: Vec<String>,
    pub splits: BTreeMap<String, Vec<ManifestItem>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_map: Option<ClassMap>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patching: Option<RoiPatchPolicy>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Loads a manifest and verifies every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for (split, items) in &manifest.splits {
            for item in items {
                for file in [&item.image, &item.mask] {
                    let p = base.join(file);
                    if !p.exists() {
                        return Err(Error::Load(format!(
                            "manifest split '{split}' references missing file {}",
                            p.display()
                        )));
                    }
                }
            }
        }
        Ok(manifest)
    }

    /// Absolute (image, mask) paths of a split.
    pub fn split_paths(&self, manifest_path: &Path, split: &str) -> Vec<(PathBuf, PathBuf)> {
        let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        self.splits
            .get(split)
            .map(|items| {
                items
                    .iter()
                    .map(|i| (base.join(&i.image), base.join(&i.mask)))
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Class names + display colors stored next to emitted masks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PaletteSidecar {
    pub class_names: Vec<String>,
    /// 8-bit RGB display color per class id (don't-care last).
    pub colors: Vec<[u8; 3]>,
    pub ignore_index: u32,
}

impl PaletteSidecar {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Writes an RGB image (values in [0, 1]) as an 8-bit PNG.
pub fn save_image_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image[(y, x, 0)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[(y, x, 1)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[(y, x, 2)].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Loads an RGB PNG into a float image with values in [0, 1].
pub fn load_image_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Writes a mask as a single-channel indexed PNG (pixel value = class id).
pub fn save_mask_png(path: &Path, mask: &SegmentationMask) -> Result<()> {
    if mask.ignore_index > u8::MAX as u32 {
        return Err(Error::Parameter(format!(
            "mask ids up to {} do not fit an 8-bit indexed image",
            mask.ignore_index
        )));
    }
    let (h, w) = mask.dims();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([mask.classes[(y, x)] as u8]));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Loads an indexed mask PNG, validating ids against the expected geometry.
pub fn load_mask_png(path: &Path, num_classes: usize, ignore_index: u32) -> Result<SegmentationMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut classes = Array2::<u32>::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        classes[(y as usize, x as usize)] = px.0[0] as u32;
    }
    SegmentationMask::new(classes, num_classes, ignore_index)
}

/// Applies a source-label → class table to a raw label image.
///
/// Unmapped labels are an error under `strict`, otherwise they fall through
/// to don't-care.
pub fn remap_classes(
    raw: &Array2<u32>,
    class_map: &ClassMap,
    strict: bool,
) -> Result<SegmentationMask> {
    let mut classes = Array2::<u32>::zeros(raw.dim());
    for (slot, &source) in classes.iter_mut().zip(raw.iter()) {
        *slot = match class_map.lookup(source) {
            Some(target) => target,
            None if strict => {
                return Err(Error::Config(format!(
                    "source label {source} has no class-map entry"
                )));
            }
            None => class_map.ignore_index,
        };
    }
    SegmentationMask::new(classes, class_map.num_classes, class_map.ignore_index)
}

/// Sliding windows fitting `extent`: ⌊(extent − window)/stride⌋ + 1, or 0 if
/// the window does not fit.
pub fn window_count(extent: usize, window: usize, stride: usize) -> usize {
    if extent < window {
        0
    } else {
        (extent - window) / stride + 1
    }
}

/// Cuts an annotated ROI into overlapping windows, drops windows dominated
/// by don't-care, and takes one seeded random crop from each survivor.
///
/// Windows whose don't-care fraction strictly exceeds the policy threshold
/// are excluded (exactly at the threshold is kept). An ROI smaller than the
/// window is skipped with a warning, yielding no patches. Crop positions are
/// derived per window position, so dropping one window never shifts another
/// window's crop.
pub fn extract_roi_patches(
    image: &Array3<f64>,
    mask: &SegmentationMask,
    policy: &RoiPatchPolicy,
    seed: u64,
) -> Result<Vec<(Array3<f64>, SegmentationMask)>> {
    policy.validate()?;
    let (h, w, _) = image.dim();
    if mask.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "image {h}×{w} and mask {:?} differ in shape",
            mask.dims()
        )));
    }
    if h < policy.window || w < policy.window {
        log::warn!(
            "ROI {h}×{w} is smaller than the {}² window; skipping",
            policy.window
        );
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let win_area = (policy.window * policy.window) as f64;
    let mut y0 = 0;
    while y0 + policy.window <= h {
        let mut x0 = 0;
        while x0 + policy.window <= w {
            let window_mask = mask
                .classes
                .slice(ndarray::s![y0..y0 + policy.window, x0..x0 + policy.window]);
            let dontcare = window_mask.iter().filter(|&&v| v == mask.ignore_index).count();
            if dontcare as f64 / win_area <= policy.dontcare_threshold {
                let mut rng = stream_rng(
                    derive_seed(&[
                        b"roi-crop",
                        &seed.to_le_bytes(),
                        &(y0 as u64).to_le_bytes(),
                        &(x0 as u64).to_le_bytes(),
                    ]),
                    "roi-crop",
                );
                let slack = policy.window - policy.crop;
                let oy = y0 + if slack > 0 { rng.random_range(0..=slack) } else { 0 };
                let ox = x0 + if slack > 0 { rng.random_range(0..=slack) } else { 0 };
                let img_crop = image
                    .slice(ndarray::s![oy..oy + policy.crop, ox..ox + policy.crop, ..])
                    .to_owned();
                let mask_crop = mask
                    .classes
                    .slice(ndarray::s![oy..oy + policy.crop, ox..ox + policy.crop])
                    .to_owned();
                out.push((
                    img_crop,
                    SegmentationMask::new(mask_crop, mask.num_classes, mask.ignore_index)?,
                ));
            }
            x0 += policy.stride;
        }
        y0 += policy.stride;
    }
    Ok(out)
}

/// Resizes an image/mask pair to `target`² — bilinear for pixels,
/// nearest-neighbour for labels so the label set never grows.
pub fn resize_to_target(
    image: &Array3<f64>,
    mask: &SegmentationMask,
    target: usize,
) -> Result<(Array3<f64>, SegmentationMask)> {
    if target == 0 {
        return Err(Error::Parameter("resize target must be positive".into()));
    }
    let (h, w, _) = image.dim();
    if (h, w) == (target, target) && mask.dims() == (target, target) {
        return Ok((image.clone(), mask.clone()));
    }
    // Round-trip through 8-bit buffers: corpora arrive as 8-bit files, so
    // this loses nothing, and the image crate supplies the filters.
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            rgb.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (image[(y, x, 0)].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (image[(y, x, 1)].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (image[(y, x, 2)].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
    }
    let resized = image::imageops::resize(
        &rgb,
        target as u32,
        target as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut out_img = Array3::<f64>::zeros((target, target, 3));
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            out_img[(y as usize, x as usize, c)] = px.0[c] as f64 / 255.0;
        }
    }

    let (mh, mw) = mask.dims();
    let mut out_mask = Array2::<u32>::zeros((target, target));
    for y in 0..target {
        // Nearest-neighbour index mapping (pixel-center convention).
        let sy = ((y as f64 + 0.5) * mh as f64 / target as f64 - 0.5)
            .round()
            .clamp(0.0, (mh - 1) as f64) as usize;
        for x in 0..target {
            let sx = ((x as f64 + 0.5) * mw as f64 / target as f64 - 0.5)
                .round()
                .clamp(0.0, (mw - 1) as f64) as usize;
            out_mask[(y, x)] = mask.classes[(sy, sx)];
        }
    }
    Ok((
        out_img,
        SegmentationMask::new(out_mask, mask.num_classes, mask.ignore_index)?,
    ))
}

/// Generates an `n`-image synthetic corpus under `dir` and writes images,
/// masks, a palette sidecar, and a manifest (all images in the train split).
///
/// Deterministic: the same `(n, k, seed)` regenerate byte-identical files.
pub fn generate_synthetic_dataset(
    dir: &Path,
    n: usize,
    k: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Parameter("synthetic corpus needs n ≥ 1 images".into()));
    }
    if k < 2 {
        return Err(Error::Parameter(format!("synthetic corpus needs k ≥ 2, got {k}")));
    }
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let image_seed = derive_seed(&[
            b"synthetic-dataset",
            &seed.to_le_bytes(),
            &(i as u64).to_le_bytes(),
        ]);
        let (image, mask) = synthetic_image(image_seed, TRAIN_SIZE, k)?;
        let image_rel = format!("images/{i:04}.png");
        let mask_rel = format!("masks/{i:04}.png");
        save_image_png(&dir.join(&image_rel), &image)?;
        save_mask_png(&dir.join(&mask_rel), &mask)?;
        items.push(ManifestItem { image: image_rel, mask: mask_rel });
    }

    let mut class_names: Vec<String> = vec!["background".into()];
    class_names.extend((1..k).map(|i| format!("region_{i}")));
    let palette = synthetic_palette(k);
    let sidecar = PaletteSidecar {
        class_names: class_names.clone(),
        colors: palette
            .iter()
            .map(|c| {
                [
                    (c[0] * 255.0).round() as u8,
                    (c[1] * 255.0).round() as u8,
                    (c[2] * 255.0).round() as u8,
                ]
            })
            .collect(),
        ignore_index: k as u32,
    };
    sidecar.save(&dir.join("palette.json"))?;

    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), items);
    splits.insert("val".to_string(), Vec::new());
    splits.insert("test".to_string(), Vec::new());
    let manifest = DatasetManifest {
        name: format!("synthetic-{k}c-{n}"),
        num_classes: k,
        ignore_index: k as u32,
        class_names,
        splits,
        class_map: None,
        patching: None,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Loads every (image, mask) pair of a manifest split into memory.
pub fn load_split(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    split: &str,
) -> Result<Vec<(Array3<f64>, SegmentationMask)>> {
    let mut out = Vec::new();
    for (image_path, mask_path) in manifest.split_paths(manifest_path, split) {
        let image = load_image_png(&image_path)?;
        let mask = load_mask_png(&mask_path, manifest.num_classes, manifest.ignore_index)?;
        if mask.dims() != (image.dim().0, image.dim().1) {
            return Err(Error::Load(format!(
                "{} and {} disagree in size",
                image_path.display(),
                mask_path.display()
            )));
        }
        out.push((image, mask));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_synthetic(seed: u64) -> (Array3<f64>, SegmentationMask) {
        synthetic_image(seed, 128, SYNTHETIC_CLASSES).unwrap()
    }

    #[test]
    fn synthetic_image_is_deterministic_per_seed() {
        let (img_a, mask_a) = small_synthetic(7);
        let (img_b, mask_b) = small_synthetic(7);
        let (img_c, mask_c) = small_synthetic(8);
        assert_eq!(img_a, img_b);
        assert_eq!(mask_a.classes, mask_b.classes);
        assert!(img_a != img_c || mask_a.classes != mask_c.classes);
    }

    #[test]
    fn synthetic_mask_uses_only_expected_ids() {
        let (_, mask) = small_synthetic(3);
        for &v in mask.classes.iter() {
            assert!(v <= SYNTHETIC_CLASSES as u32);
        }
        // The border frame is don't-care.
        assert_eq!(mask.classes[(0, 0)], SYNTHETIC_CLASSES as u32);
        assert_eq!(mask.classes[(127, 127)], SYNTHETIC_CLASSES as u32);
        // Some pixels must be real classes.
        assert!(mask.valid_pixels() > 0);
    }

    #[test]
    fn synthetic_image_values_stay_in_unit_range() {
        let (img, _) = small_synthetic(4);
        for &v in img.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn boundary_band_separates_touching_classes() {
        // Wherever two classes touch, the band turns mixed neighbourhoods
        // into don't-care: no remaining valid pixel may have a differently
        // classed valid 4-neighbour.
        let (_, mask) = small_synthetic(5);
        let (h, w) = mask.dims();
        let ignore = mask.ignore_index;
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                let a = mask.classes[(y, x)];
                let b = mask.classes[(y, x + 1)];
                if a != ignore && b != ignore {
                    assert_eq!(a, b, "unbuffered class boundary at ({y}, {x})");
                }
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                let a = mask.classes[(y, x)];
                let b = mask.classes[(y + 1, x)];
                if a != ignore && b != ignore {
                    assert_eq!(a, b, "unbuffered class boundary at ({y}, {x})");
                }
            }
        }
    }

    #[test]
    fn class_frequencies_track_generator_priors() {
        // Long-run pixel fractions should sit near the frozen reference
        // values; use a seed distinct from the one they were measured with.
        let n = 30;
        let mut counts = [0u64; 6];
        let mut total = 0u64;
        for i in 0..n {
            let (_, mask) = synthetic_image(9000 + i, TRAIN_SIZE, SYNTHETIC_CLASSES).unwrap();
            for &v in mask.classes.iter() {
                counts[v as usize] += 1;
            }
            total += (TRAIN_SIZE * TRAIN_SIZE) as u64;
        }
        for c in 0..6 {
            let freq = counts[c] as f64 / total as f64;
            assert!(
                (freq - SYNTHETIC_CLASS_PRIORS_K5[c]).abs() <= 0.05,
                "class {c}: frequency {freq:.4} vs prior {:.4}",
                SYNTHETIC_CLASS_PRIORS_K5[c]
            );
        }
    }

    #[test]
    fn generated_dataset_roundtrips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic_dataset(dir.path(), 2, 5, 11).unwrap();
        assert_eq!(manifest.splits["train"].len(), 2);
        let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        let pairs = load_split(&loaded, &dir.path().join("manifest.json"), "train").unwrap();
        assert_eq!(pairs.len(), 2);
        for (img, mask) in &pairs {
            assert_eq!(img.dim(), (TRAIN_SIZE, TRAIN_SIZE, 3));
            assert_eq!(mask.dims(), (TRAIN_SIZE, TRAIN_SIZE));
        }
        let sidecar = PaletteSidecar::load(&dir.path().join("palette.json")).unwrap();
        assert_eq!(sidecar.class_names.len(), 5);
        assert_eq!(sidecar.colors.len(), 6);
    }

    #[test]
    fn regeneration_with_same_seed_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(dir_a.path(), 1, 5, 13).unwrap();
        generate_synthetic_dataset(dir_b.path(), 1, 5, 13).unwrap();
        for rel in ["images/0000.png", "masks/0000.png"] {
            let a = std::fs::read(dir_a.path().join(rel)).unwrap();
            let b = std::fs::read(dir_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between regenerations");
        }
    }

    #[test]
    fn manifest_load_rejects_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(dir.path(), 1, 5, 17).unwrap();
        std::fs::remove_file(dir.path().join("images/0000.png")).unwrap();
        assert!(matches!(
            DatasetManifest::load(&dir.path().join("manifest.json")),
            Err(Error::Load(_))
        ));
    }

    #[test]
    fn mask_png_roundtrip_preserves_ids() {
        let dir = tempfile::tempdir().unwrap();
        let (_, mask) = small_synthetic(19);
        let path = dir.path().join("mask.png");
        save_mask_png(&path, &mask).unwrap();
        let back = load_mask_png(&path, mask.num_classes, mask.ignore_index).unwrap();
        assert_eq!(mask.classes, back.classes);
    }

    #[test]
    fn image_png_roundtrip_quantizes_to_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = small_synthetic(23);
        let path = dir.path().join("img.png");
        save_image_png(&path, &img).unwrap();
        let back = load_image_png(&path).unwrap();
        for (&a, &b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn identity_class_map_leaves_mask_unchanged() {
        let raw = Array2::from_shape_vec((2, 3), vec![0u32, 1, 2, 2, 1, 0]).unwrap();
        let map = ClassMap {
            map: (0..3).map(|i| (i.to_string(), i as u32)).collect(),
            num_classes: 3,
            ignore_index: 3,
        };
        let mask = remap_classes(&raw, &map, true).unwrap();
        assert_eq!(mask.classes, raw);
    }

    #[test]
    fn all_to_ignore_map_produces_ignore_mask() {
        let raw = Array2::from_shape_vec((2, 2), vec![4u32, 9, 1, 0]).unwrap();
        let map = ClassMap {
            map: [4u32, 9, 1, 0]
                .iter()
                .map(|s| (s.to_string(), 2u32))
                .collect(),
            num_classes: 2,
            ignore_index: 2,
        };
        let mask = remap_classes(&raw, &map, true).unwrap();
        assert!(mask.classes.iter().all(|&v| v == 2));
    }

    #[test]
    fn strict_remap_rejects_unmapped_labels_lenient_ignores_them() {
        let raw = Array2::from_shape_vec((1, 2), vec![0u32, 77]).unwrap();
        let map = ClassMap {
            map: [("0".to_string(), 0u32)].into_iter().collect(),
            num_classes: 2,
            ignore_index: 2,
        };
        assert!(matches!(remap_classes(&raw, &map, true), Err(Error::Config(_))));
        let lenient = remap_classes(&raw, &map, false).unwrap();
        assert_eq!(lenient.classes[(0, 0)], 0);
        assert_eq!(lenient.classes[(0, 1)], 2);
    }

    #[test]
    fn bcss_default_map_covers_all_22_labels() {
        let map = default_bcss_class_map();
        for label in 0..=21u32 {
            assert!(map.lookup(label).is_some(), "label {label} unmapped");
        }
        assert_eq!(map.lookup(0), Some(5)); // outside-ROI → don't-care
        assert_eq!(map.lookup(1), Some(0));
        assert_eq!(map.lookup(21), Some(4));
        // Targets form {tumor, stroma, inflammatory, necrosis, other} + ignore.
        let targets: std::collections::BTreeSet<u32> =
            (0..=21).map(|l| map.lookup(l).unwrap()).collect();
        assert_eq!(targets, (0..=5).collect());
    }

    fn roi_fixture(h: usize, w: usize, dontcare_frac: f64) -> (Array3<f64>, SegmentationMask) {
        let image = Array3::<f64>::from_elem((h, w, 3), 0.5);
        let cutoff = (dontcare_frac * w as f64).round() as usize;
        let classes = Array2::from_shape_fn((h, w), |(_, x)| if x < cutoff { 2u32 } else { 0 });
        (image, SegmentationMask::with_default_ignore(classes, 2).unwrap())
    }

    #[test]
    fn window_count_formula_matches_enumeration() {
        // 1600×800 ROI at stride 400: 3 windows along the long axis.
        assert_eq!(window_count(1600, 800, 400), 3);
        assert_eq!(window_count(800, 800, 400), 1);
        assert_eq!(window_count(799, 800, 400), 0);
        // Enumerated positions agree.
        let (img, mask) = roi_fixture(800, 1600, 0.0);
        let patches =
            extract_roi_patches(&img, &mask, &RoiPatchPolicy::default(), 1).unwrap();
        assert_eq!(patches.len(), 3);
    }

    #[test]
    fn half_dontcare_window_survives() {
        let (img, mask) = roi_fixture(800, 800, 0.5);
        let patches =
            extract_roi_patches(&img, &mask, &RoiPatchPolicy::default(), 1).unwrap();
        assert_eq!(patches.len(), 1);
        let (pi, pm) = &patches[0];
        assert_eq!(pi.dim(), (768, 768, 3));
        assert_eq!(pm.dims(), (768, 768));
    }

    #[test]
    fn mostly_dontcare_window_is_excluded_but_exact_threshold_kept() {
        let (img, mask) = roi_fixture(800, 800, 0.95);
        let patches =
            extract_roi_patches(&img, &mask, &RoiPatchPolicy::default(), 1).unwrap();
        assert!(patches.is_empty(), "95% don't-care must be dropped");

        // Exactly 90%: kept (the rule is strictly-greater-than).
        let (img, mask) = roi_fixture(800, 800, 0.9);
        let dontcare = mask.classes.iter().filter(|&&v| v == 2).count();
        assert_eq!(dontcare, 800 * 800 * 9 / 10);
        let patches =
            extract_roi_patches(&img, &mask, &RoiPatchPolicy::default(), 1).unwrap();
        assert_eq!(patches.len(), 1);
    }

    #[test]
    fn lowering_threshold_never_adds_patches() {
        let (img, mask) = roi_fixture(800, 1600, 0.6);
        let mut last = usize::MAX;
        for threshold in [0.9, 0.7, 0.5, 0.3] {
            let policy = RoiPatchPolicy { dontcare_threshold: threshold, ..Default::default() };
            let n = extract_roi_patches(&img, &mask, &policy, 1).unwrap().len();
            assert!(n <= last, "threshold {threshold} emitted more patches");
            last = n;
        }
    }

    #[test]
    fn undersized_roi_is_skipped_without_error() {
        let (img, mask) = roi_fixture(400, 400, 0.0);
        let patches =
            extract_roi_patches(&img, &mask, &RoiPatchPolicy::default(), 1).unwrap();
        assert!(patches.is_empty());
    }

    #[test]
    fn roi_crops_are_deterministic_per_seed() {
        let (img, mask) = roi_fixture(800, 1600, 0.2);
        let a = extract_roi_patches(&img, &mask, &RoiPatchPolicy::default(), 5).unwrap();
        let b = extract_roi_patches(&img, &mask, &RoiPatchPolicy::default(), 5).unwrap();
        assert_eq!(a.len(), b.len());
        for ((ia, ma), (ib, mb)) in a.iter().zip(&b) {
            assert_eq!(ia, ib);
            assert_eq!(ma.classes, mb.classes);
        }
    }

    #[test]
    fn policy_validation_rejects_bad_geometry() {
        let bad_crop = RoiPatchPolicy { crop: 900, ..Default::default() };
        assert!(matches!(bad_crop.validate(), Err(Error::Parameter(_))));
        let bad_threshold = RoiPatchPolicy { dontcare_threshold: 0.0, ..Default::default() };
        assert!(matches!(bad_threshold.validate(), Err(Error::Parameter(_))));
    }

    #[test]
    fn resize_reaches_target_and_preserves_label_set() {
        let (img, mask) = roi_fixture(522, 775, 0.3);
        let (ri, rm) = resize_to_target(&img, &mask, 768).unwrap();
        assert_eq!(ri.dim(), (768, 768, 3));
        assert_eq!(rm.dims(), (768, 768));
        let before: std::collections::BTreeSet<u32> = mask.classes.iter().copied().collect();
        let after: std::collections::BTreeSet<u32> = rm.classes.iter().copied().collect();
        assert!(after.is_subset(&before), "resize invented labels: {after:?} ⊄ {before:?}");
    }

    #[test]
    fn resize_of_exact_size_is_identity() {
        let (img, mask) = roi_fixture(768, 768, 0.4);
        let (ri, rm) = resize_to_target(&img, &mask, 768).unwrap();
        assert_eq!(ri, img);
        assert_eq!(rm.classes, mask.classes);
    }

    #[test]
    fn resized_constant_image_stays_constant() {
        let img = Array3::<f64>::from_elem((100, 60, 3), 0.25);
        let mask = SegmentationMask::with_default_ignore(Array2::zeros((100, 60)), 2).unwrap();
        let (ri, _) = resize_to_target(&img, &mask, 64).unwrap();
        for &v in ri.iter() {
            assert_abs_diff_eq!(v, 64.0 / 255.0, epsilon = 1e-12); // 0.25 → 64/255 after 8-bit quantization
        }
    }
}
