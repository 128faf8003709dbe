use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::hsv::{tissue_coverage, HsvRanges};
use crate::raster::Raster;
use crate::slide::{Diagnosis, Stain, SyntheticSlide};

/// One training/evaluation tile with its provenance metadata.
#[derive(Debug, Clone)]
pub struct TileRecord {
    pub pixels: Raster,
    pub slide_id: String,
    pub magnification: u8,
    pub stain: Stain,
    pub tissue_label: String,
    pub diagnosis: Diagnosis,
    /// Tissue fraction of `pixels` under the HSV filter, in [0, 1].
    pub coverage: f64,
    /// Grid position on the source slide (row, col), tile units.
    pub grid_pos: (usize, usize),
}

pub const TILE_SIZES: [usize; 2] = [224, 392];

/// Cut a slide raster into non-overlapping L x L grid tiles, dropping
/// partial border strips, and keep tiles with coverage >= `min_coverage`.
///
/// Returns `(grid_row, grid_col, tile, coverage)`. A slide smaller than `L`
/// yields an empty list.
pub fn tile_grid_raster(
    slide: &Raster,
    l: usize,
    min_coverage: f64,
    ranges: &HsvRanges,
) -> Result<Vec<(usize, usize, Raster, f64)>> {
    if !TILE_SIZES.contains(&l) {
        return Err(CoreError::parameter(format!("tile size must be one of {TILE_SIZES:?}, got {l}")));
    }
    if !(0.0..=1.0).contains(&min_coverage) {
        return Err(CoreError::parameter("min_coverage must be in [0, 1]"));
    }
    let mut out = Vec::new();
    if slide.h < l || slide.w < l {
        return Ok(out);
    }
    for gy in 0..slide.h / l {
        for gx in 0..slide.w / l {
            let tile = slide.crop(gy * l, gx * l, l, l);
            let cov = tissue_coverage(&tile, ranges);
            if cov >= min_coverage {
                out.push((gy, gx, tile, cov));
            }
        }
    }
    Ok(out)
}

/// Tile every magnification of a synthetic slide, attaching metadata and the
/// macro-cell texture label (or "unknown" when the grid does not align).
pub fn tile_grid(
    slide: &SyntheticSlide,
    l: usize,
    min_coverage: f64,
    ranges: &HsvRanges,
) -> Result<Vec<TileRecord>> {
    let mut out = Vec::new();
    for (mag, raster) in &slide.rasters {
        for (gy, gx, tile, cov) in tile_grid_raster(raster, l, min_coverage, ranges)? {
            let tissue_label = if slide.cell == l {
                match slide.cell_labels.get(gy * slide.grid.1 + gx) {
                    Some(Some(k)) => format!("class_{k}"),
                    _ => "unknown".to_string(),
                }
            } else {
                "unknown".to_string()
            };
            out.push(TileRecord {
                pixels: tile,
                slide_id: slide.slide_id.clone(),
                magnification: *mag,
                stain: slide.stain,
                tissue_label,
                diagnosis: slide.diagnosis,
                coverage: cov,
                grid_pos: (gy, gx),
            });
        }
    }
    Ok(out)
}
