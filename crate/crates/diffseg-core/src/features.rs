//! Pixel-aligned feature extraction: noise the latent, run the frozen
//! denoiser, upsample the selected block activations to patch resolution,
//! and concatenate them channel-wise.

use std::ops::Range;

use ndarray::Array3;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::grid::{stitch_features, tile};
use crate::schedule::{noise_latent, NoiseSchedule, NoiseSource};
use crate::tensor::derive_seed;

/// A pixel-aligned multi-block feature tensor.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    /// Ordered channel ranges, one per selected block, disjoint and covering
    /// the full channel extent.
    pub block_slices: Vec<(String, Range<usize>)>,
    pub timestep: usize,
    /// Grid position when this map belongs to a single patch of a larger
    /// image; None for stitched or standalone maps.
    pub patch_position: Option<(usize, usize)>,
}

impl FeatureMap {
    pub fn total_channels(&self) -> usize {
        self.values.dim().2
    }

    pub fn slice_for(&self, block_id: &str) -> Option<Range<usize>> {
        self.block_slices
            .iter()
            .find(|(id, _)| id == block_id)
            .map(|(_, r)| r.clone())
    }
}

/// Corner-aligned bilinear upsampling; channels interpolated independently.
///
/// Sample oy of the target maps to source coordinate oy·(sh−1)/(th−1), so
/// the first and last rows/columns coincide exactly with the source corners.
pub fn bilinear_upsample(src: &Array3<f64>, th: usize, tw: usize) -> Result<Array3<f64>> {
    let (sh, sw, c) = src.dim();
    if th < sh || tw < sw {
        return Err(Error::Parameter(format!(
            "bilinear target {th}×{tw} is smaller than source {sh}×{sw} (downsampling unsupported)"
        )));
    }
    if th == sh && tw == sw {
        return Ok(src.clone());
    }
    // Precomputed per-axis source indices and interpolation weights.
    let axis_table = |s: usize, t: usize| -> Vec<(usize, usize, f64)> {
        (0..t)
            .map(|o| {
                if t == 1 || s == 1 {
                    return (0, 0, 0.0);
                }
                let pos = o as f64 * (s - 1) as f64 / (t - 1) as f64;
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(s - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ys = axis_table(sh, th);
    let xs = axis_table(sw, tw);
    let mut out = Array3::zeros((th, tw, c));
    let sdat = src.as_slice().expect("contiguous source");
    let odat = out.as_slice_mut().unwrap();
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let p00 = (y0 * sw + x0) * c;
            let p01 = (y0 * sw + x1) * c;
            let p10 = (y1 * sw + x0) * c;
            let p11 = (y1 * sw + x1) * c;
            let dst = (oy * tw + ox) * c;
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            for ci in 0..c {
                odat[dst + ci] = w00 * sdat[p00 + ci]
                    + w01 * sdat[p01 + ci]
                    + w10 * sdat[p10 + ci]
                    + w11 * sdat[p11 + ci];
            }
        }
    }
    Ok(out)
}

/// Extracts a pixel-aligned FeatureMap from one image patch.
///
/// Pipeline: conditioning encoder → image encoder → seeded forward noising
/// to timestep `t` (t=0 passes the clean latent straight through) → one
/// denoiser forward pass → bilinear upsample of each selected tap to patch
/// resolution → channel concatenation in descriptor block order.
pub fn extract_features(
    backbone: &Backbone,
    schedule: &NoiseSchedule,
    patch: &Array3<f64>,
    t: usize,
    block_selection: &[String],
    seed: u64,
) -> Result<FeatureMap> {
    if block_selection.is_empty() {
        return Err(Error::Parameter("block selection is empty".into()));
    }
    for id in block_selection {
        if !backbone.descriptor.block_ids.contains(id) {
            return Err(Error::Parameter(format!(
                "unknown block id \"{id}\"; backbone provides {:?}",
                backbone.descriptor.block_ids
            )));
        }
    }
    if t > schedule.num_steps() {
        return Err(Error::Timestep(format!(
            "timestep {t} outside schedule range 0..={}",
            schedule.num_steps()
        )));
    }
    let p = backbone.descriptor.patch_size;
    let cond = backbone.encode_condition(patch)?;
    let z0 = backbone.encode_image(patch)?;
    let z_t = if t == 0 { z0 } else { noise_latent(&z0, t, schedule, NoiseSource::Seed(seed))? };
    let taps = backbone.run_unet_with_taps(&z_t, &cond)?;

    let selected: Vec<&crate::backbone::BlockActivation> = taps
        .iter()
        .filter(|tap| block_selection.iter().any(|id| id == &tap.block_id))
        .collect();
    let total: usize = selected.iter().map(|tap| tap.values.dim().2).sum();
    let mut values = Array3::zeros((p, p, total));
    let mut block_slices = Vec::with_capacity(selected.len());
    let mut offset = 0;
    for tap in selected {
        let c_b = tap.values.dim().2;
        let up = bilinear_upsample(&tap.values, p, p)?;
        values.slice_mut(ndarray::s![.., .., offset..offset + c_b]).assign(&up);
        block_slices.push((tap.block_id.clone(), offset..offset + c_b));
        offset += c_b;
    }
    Ok(FeatureMap { values, block_slices, timestep: t, patch_position: None })
}

/// Tiles a full image, extracts per-patch features with per-patch noise
/// seeds derived from (run seed, image id, position), and stitches the
/// results into one full-image FeatureMap.
pub fn extract_image_features(
    backbone: &Backbone,
    schedule: &NoiseSchedule,
    image: &Array3<f64>,
    t: usize,
    block_selection: &[String],
    run_seed: u64,
    image_id: &str,
    grid_size: usize,
) -> Result<FeatureMap> {
    let patch_size = backbone.descriptor.patch_size;
    let grid = tile(image, grid_size, patch_size)?;
    let mut parts = Vec::with_capacity(grid.patches.len());
    for ((row, col), patch) in &grid.patches {
        let seed = patch_noise_seed(run_seed, image_id, *row, *col);
        let mut fm = extract_features(backbone, schedule, patch, t, block_selection, seed)?;
        fm.patch_position = Some((*row, *col));
        parts.push(((*row, *col), fm));
    }
    stitch_features(&parts)
}

/// Deterministic per-patch noise seed.
pub fn patch_noise_seed(run_seed: u64, image_id: &str, row: usize, col: usize) -> u64 {
    derive_seed(&[
        b"patch-noise",
        &run_seed.to_le_bytes(),
        image_id.as_bytes(),
        &(row as u64).to_le_bytes(),
        &(col as u64).to_le_bytes(),
    ])
}
