//! Patch-grid tiling and feature stitching: a G·P square image is split
//! into a G×G grid of P-sized patches, processed independently, and the
//! per-patch feature maps are reassembled into one full-image map.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::features::FeatureMap;

/// A complete, non-overlapping tiling of a square image.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub grid_size: usize,
    pub patch_size: usize,
    /// Row-major patches with their (row, col) grid positions.
    pub patches: Vec<((usize, usize), Array3<f64>)>,
}

/// Splits a (G·P, G·P, 3) image into G² row-major patches.
pub fn tile(x: &Array3<f64>, grid_size: usize, patch_size: usize) -> Result<PatchGrid> {
    let (h, w, c) = x.dim();
    let edge = grid_size * patch_size;
    if grid_size == 0 || patch_size == 0 {
        return Err(Error::Parameter("grid and patch sizes must be positive".into()));
    }
    if h != edge || w != edge {
        return Err(Error::Shape(format!(
            "image is {h}×{w}, expected {edge}×{edge} for a {grid_size}×{grid_size} grid of {patch_size}px patches"
        )));
    }
    let mut patches = Vec::with_capacity(grid_size * grid_size);
    for row in 0..grid_size {
        for col in 0..grid_size {
            let patch = x
                .slice(ndarray::s![
                    row * patch_size..(row + 1) * patch_size,
                    col * patch_size..(col + 1) * patch_size,
                    ..
                ])
                .to_owned();
            let _ = c;
            patches.push(((row, col), patch));
        }
    }
    Ok(PatchGrid { grid_size, patch_size, patches })
}

/// Reassembles per-patch feature maps into one (G·P, G·P, C) map.
///
/// All parts must agree on spatial size, channel count, timestep, and block
/// layout, and their positions must cover the grid exactly once.
pub fn stitch_features(parts: &[((usize, usize), FeatureMap)]) -> Result<FeatureMap> {
    if parts.is_empty() {
        return Err(Error::Grid("no patches to stitch".into()));
    }
    let g = (parts.len() as f64).sqrt().round() as usize;
    if g * g != parts.len() {
        return Err(Error::Grid(format!("{} patches do not form a square grid", parts.len())));
    }
    let first = &parts[0].1;
    let (p_h, p_w, c) = first.values.dim();
    if p_h != p_w {
        return Err(Error::Shape(format!("patch features must be square, got {p_h}×{p_w}")));
    }
    let mut seen = vec![false; g * g];
    for ((row, col), fm) in parts {
        if *row >= g || *col >= g {
            return Err(Error::Grid(format!(
                "position ({row}, {col}) outside a {g}×{g} grid"
            )));
        }
        let idx = row * g + col;
        if seen[idx] {
            return Err(Error::Grid(format!("duplicate patch position ({row}, {col})")));
        }
        seen[idx] = true;
        if fm.values.dim() != (p_h, p_w, c) {
            return Err(Error::Shape(format!(
                "patch at ({row}, {col}) has shape {:?}, expected {:?}",
                fm.values.dim(),
                (p_h, p_w, c)
            )));
        }
        if fm.timestep != first.timestep {
            return Err(Error::Parameter(format!(
                "patch at ({row}, {col}) was extracted at t={}, others at t={}",
                fm.timestep, first.timestep
            )));
        }
        if fm.block_slices != first.block_slices {
            return Err(Error::Parameter(format!(
                "patch at ({row}, {col}) has a different block layout"
            )));
        }
    }
    // seen is all-true here: g² distinct in-range positions fill the grid.
    let mut values = Array3::zeros((g * p_h, g * p_w, c));
    for ((row, col), fm) in parts {
        values
            .slice_mut(ndarray::s![
                row * p_h..(row + 1) * p_h,
                col * p_w..(col + 1) * p_w,
                ..
            ])
            .assign(&fm.values);
    }
    Ok(FeatureMap {
        values,
        block_slices: first.block_slices.clone(),
        timestep: first.timestep,
        patch_position: None,
    })
}
