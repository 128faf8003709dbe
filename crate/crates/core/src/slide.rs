use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::raster::Raster;
use crate::rng::Rng;

/// Stain family; primarily a palette switch for synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stain {
    He,
    Ihc,
}

impl Stain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stain::He => "HE",
            Stain::Ihc => "IHC",
        }
    }

    pub fn parse(s: &str) -> Result<Stain> {
        match s {
            "HE" => Ok(Stain::He),
            "IHC" => Ok(Stain::Ihc),
            _ => Err(CoreError::parameter(format!("unknown stain '{s}'"))),
        }
    }
}

/// Most severe diagnosis recorded for a slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Diagnosis {
    Cancer,
    Precursor,
    Benign,
    BenignNeoplasm,
    Unknown,
}

pub const DIAGNOSES: [Diagnosis; 5] = [
    Diagnosis::Cancer,
    Diagnosis::Precursor,
    Diagnosis::Benign,
    Diagnosis::BenignNeoplasm,
    Diagnosis::Unknown,
];

impl Diagnosis {
    pub fn index(&self) -> usize {
        DIAGNOSES.iter().position(|d| d == self).unwrap()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Diagnosis::Cancer => "cancer",
            Diagnosis::Precursor => "precursor",
            Diagnosis::Benign => "benign",
            Diagnosis::BenignNeoplasm => "benign_neoplasm",
            Diagnosis::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Result<Diagnosis> {
        DIAGNOSES
            .iter()
            .copied()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| CoreError::parameter(format!("unknown diagnosis '{s}'")))
    }
}

pub const MAGNIFICATIONS: [u8; 4] = [5, 10, 20, 40];

pub fn magnification_index(mag: u8) -> Result<usize> {
    MAGNIFICATIONS
        .iter()
        .position(|&m| m == mag)
        .ok_or_else(|| CoreError::parameter(format!("magnification must be one of 5/10/20/40, got {mag}")))
}

/// Recipe for one synthetic slide.
#[derive(Debug, Clone)]
pub struct SlideSpec {
    pub height: usize,
    pub width: usize,
    /// Number of distinct texture classes laid out on the slide (>= 2).
    pub texture_classes: usize,
    /// Fraction of macro-cells left as bare background.
    pub background_fraction: f64,
    /// Macro-cell edge in pixels; cells align with the tile grid.
    pub cell: usize,
    pub stain: Stain,
    pub magnifications: Vec<u8>,
    pub diagnosis: Diagnosis,
}

impl SlideSpec {
    pub fn toy(diagnosis: Diagnosis) -> Self {
        SlideSpec {
            height: 672,
            width: 672,
            texture_classes: 4,
            background_fraction: 0.1,
            cell: 224,
            stain: Stain::He,
            magnifications: MAGNIFICATIONS.to_vec(),
            diagnosis,
        }
    }
}

/// A generated slide: one raster per declared magnification plus the
/// macro-cell label map that downstream probe tasks use as ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub slide_id: String,
    pub stain: Stain,
    pub diagnosis: Diagnosis,
    pub rasters: Vec<(u8, Raster)>,
    /// grid_rows x grid_cols cell labels; `None` marks background cells.
    pub cell_labels: Vec<Option<u8>>,
    pub grid: (usize, usize),
    pub cell: usize,
}

impl SyntheticSlide {
    pub fn raster(&self, mag: u8) -> Option<&Raster> {
        self.rasters.iter().find(|(m, _)| *m == mag).map(|(_, r)| r)
    }
}

const BG_BASE: [f64; 3] = [245.0, 244.0, 246.0];
const PINK: [f64; 3] = [232.0, 158.0, 200.0];
const DEEP_PURPLE: [f64; 3] = [118.0, 66.0, 160.0];
const MID_PURPLE: [f64; 3] = [170.0, 105.0, 185.0];
const IHC_BROWN: [f64; 3] = [150.0, 95.0, 60.0];

#[inline]
fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

#[inline]
fn put(img: &mut Raster, y: usize, x: usize, rgb: [f64; 3]) {
    img.set(y, x, [
        rgb[0].clamp(0.0, 255.0) as u8,
        rgb[1].clamp(0.0, 255.0) as u8,
        rgb[2].clamp(0.0, 255.0) as u8,
    ]);
}

fn paint_background(img: &mut Raster, y0: usize, x0: usize, size: usize, rng: &mut Rng) {
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            // shared luma noise keeps saturation below the tissue filter
            let n = (rng.next_f64() - 0.5) * 6.0;
            put(img, y, x, [BG_BASE[0] + n, BG_BASE[1] + n, BG_BASE[2] + n]);
        }
    }
}

/// Texture painters. Feature scales are deliberately coarse (>= ~20 px) so
/// classes stay separable after the augmentation pipeline downsamples.
fn paint_texture(img: &mut Raster, y0: usize, x0: usize, size: usize, class: u8, stain: Stain, rng: &mut Rng) {
    match class % 4 {
        0 => {
            // stripes: sinusoidal bands of pink and deep purple
            let angle = rng.uniform(-0.5, 0.5).unwrap();
            let period = rng.uniform(26.0, 36.0).unwrap();
            let phase = rng.uniform(0.0, core::f64::consts::TAU).unwrap();
            let (ca, sa) = (libm::cos(angle), libm::sin(angle));
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    let u = (x - x0) as f64 * ca + (y - y0) as f64 * sa;
                    let t = 0.5 + 0.45 * libm::sin(core::f64::consts::TAU * u / period + phase);
                    let n = (rng.next_f64() - 0.5) * 10.0;
                    let c = mix(PINK, DEEP_PURPLE, t);
                    put(img, y, x, [c[0] + n, c[1] + n, c[2] + n]);
                }
            }
        }
        1 => {
            // blobs: large nucleus-like ellipses on a pink field
            paint_field(img, y0, x0, size, PINK, 10.0, rng);
            let step = 52usize;
            for gy in (0..size).step_by(step) {
                for gx in (0..size).step_by(step) {
                    let cy = y0 as f64 + gy as f64 + rng.uniform(12.0, step as f64 - 12.0).unwrap();
                    let cx = x0 as f64 + gx as f64 + rng.uniform(12.0, step as f64 - 12.0).unwrap();
                    let r = rng.uniform(14.0, 24.0).unwrap();
                    let e = rng.uniform(0.7, 1.4).unwrap();
                    stamp_ellipse(img, y0, x0, size, cy, cx, r, e, DEEP_PURPLE);
                }
            }
        }
        2 => {
            // dots: small dense nuclei; brown accents under IHC
            paint_field(img, y0, x0, size, PINK, 10.0, rng);
            let accent = if stain == Stain::Ihc { IHC_BROWN } else { DEEP_PURPLE };
            let step = 26usize;
            for gy in (0..size).step_by(step) {
                for gx in (0..size).step_by(step) {
                    let cy = y0 as f64 + gy as f64 + rng.uniform(5.0, step as f64 - 5.0).unwrap();
                    let cx = x0 as f64 + gx as f64 + rng.uniform(5.0, step as f64 - 5.0).unwrap();
                    let r = rng.uniform(3.5, 6.0).unwrap();
                    stamp_ellipse(img, y0, x0, size, cy, cx, r, 1.0, accent);
                }
            }
        }
        _ => {
            // checks: two-tone checkerboard
            let period = rng.uniform(22.0, 30.0).unwrap();
            let phase_y = rng.uniform(0.0, period).unwrap();
            let phase_x = rng.uniform(0.0, period).unwrap();
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    let cy = (((y - y0) as f64 + phase_y) / period) as usize;
                    let cx = (((x - x0) as f64 + phase_x) / period) as usize;
                    let on = (cy + cx) % 2 == 0;
                    let n = (rng.next_f64() - 0.5) * 10.0;
                    let c = if on { PINK } else { MID_PURPLE };
                    put(img, y, x, [c[0] + n, c[1] + n, c[2] + n]);
                }
            }
        }
    }
}

fn paint_field(img: &mut Raster, y0: usize, x0: usize, size: usize, base: [f64; 3], noise: f64, rng: &mut Rng) {
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let n = (rng.next_f64() - 0.5) * noise;
            put(img, y, x, [base[0] + n, base[1] + n, base[2] + n]);
        }
    }
}

fn stamp_ellipse(img: &mut Raster, y0: usize, x0: usize, size: usize, cy: f64, cx: f64, r: f64, e: f64, color: [f64; 3]) {
    let ry = r * e;
    let rx = r / e;
    let ylo = libm::floor(cy - ry).max(y0 as f64) as usize;
    let yhi = (libm::ceil(cy + ry) as usize).min(y0 + size - 1);
    let xlo = libm::floor(cx - rx).max(x0 as f64) as usize;
    let xhi = (libm::ceil(cx + rx) as usize).min(x0 + size - 1);
    for y in ylo..=yhi {
        for x in xlo..=xhi {
            let dy = (y as f64 - cy) / ry;
            let dx = (x as f64 - cx) / rx;
            let d = dy * dy + dx * dx;
            if d <= 1.0 {
                let cur = img.get(y, x);
                let cur = [cur[0] as f64, cur[1] as f64, cur[2] as f64];
                // soft edge over the outer 25% of the radius
                let t = ((1.0 - d) / 0.25).min(1.0);
                put(img, y, x, mix(cur, color, t));
            }
        }
    }
}

/// Generate one synthetic slide: procedural stained textures on a
/// near-white background, deterministic in `(seed, spec)`.
pub fn gen_synthetic_slide(seed: u64, spec: &SlideSpec) -> Result<SyntheticSlide> {
    if spec.texture_classes < 2 {
        return Err(CoreError::parameter("slide spec needs at least 2 texture classes"));
    }
    if spec.height < spec.cell || spec.width < spec.cell {
        return Err(CoreError::parameter(format!(
            "slide {}x{} is smaller than one {}px tile",
            spec.height, spec.width, spec.cell
        )));
    }
    if spec.magnifications.is_empty() {
        return Err(CoreError::parameter("slide spec declares no magnifications"));
    }
    for &m in &spec.magnifications {
        magnification_index(m)?;
    }
    if !(0.0..=1.0).contains(&spec.background_fraction) {
        return Err(CoreError::parameter("background_fraction must be in [0, 1]"));
    }

    let mut rng = Rng::new(seed);
    let gr = spec.height / spec.cell;
    let gc = spec.width / spec.cell;
    let cells = gr * gc;

    // Cell deck: background cells first, then classes cycling so every class
    // appears whenever there are at least `texture_classes` foreground cells.
    let n_bg = libm::round(spec.background_fraction * cells as f64) as usize;
    let mut deck: Vec<Option<u8>> = Vec::with_capacity(cells);
    for _ in 0..n_bg.min(cells) {
        deck.push(None);
    }
    let mut class = 0u8;
    while deck.len() < cells {
        deck.push(Some(class));
        class = (class + 1) % spec.texture_classes as u8;
    }
    rng.shuffle(&mut deck);

    let mut rasters = Vec::with_capacity(spec.magnifications.len());
    for (mi, &mag) in spec.magnifications.iter().enumerate() {
        let mut img = Raster::new(spec.height, spec.width);
        let mag_rng = rng.fork(1000 + mi as u64);
        for cy in 0..gr {
            for cx in 0..gc {
                let mut cell_rng = mag_rng.fork((cy * gc + cx) as u64);
                let (y0, x0) = (cy * spec.cell, cx * spec.cell);
                match deck[cy * gc + cx] {
                    None => paint_background(&mut img, y0, x0, spec.cell, &mut cell_rng),
                    Some(k) => paint_texture(&mut img, y0, x0, spec.cell, k, spec.stain, &mut cell_rng),
                }
            }
        }
        rasters.push((mag, img));
    }

    Ok(SyntheticSlide {
        slide_id: format!("s{seed:08x}"),
        stain: spec.stain,
        diagnosis: spec.diagnosis,
        rasters,
        cell_labels: deck,
        grid: (gr, gc),
        cell: spec.cell,
    })
}

/// Tiles for the localized-feature probe task: a class-specific texture in
/// one random quadrant, shared filler elsewhere. Returns `(tile, label)`.
pub fn gen_localized_tiles(seed: u64, n: usize, classes: usize, size: usize) -> Result<Vec<(Raster, u8)>> {
    if classes < 2 || classes > 4 {
        return Err(CoreError::parameter("localized task supports 2..=4 classes"));
    }
    let mut rng = Rng::new(seed);
    let half = size / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut tile_rng = rng.fork(i as u64);
        let label = (i % classes) as u8;
        let mut img = Raster::new(size, size);
        paint_field(&mut img, 0, 0, size, PINK, 12.0, &mut tile_rng);
        let quadrant = rng.below(4);
        let (y0, x0) = match quadrant {
            0 => (0, 0),
            1 => (0, size - half),
            2 => (size - half, 0),
            _ => (size - half, size - half),
        };
        paint_texture(&mut img, y0, x0, half, label, Stain::He, &mut tile_rng);
        out.push((img, label));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsv::{tissue_coverage, HsvRanges};

    #[test]
    fn deterministic_per_seed() {
        let spec = SlideSpec { height: 448, width: 448, ..SlideSpec::toy(Diagnosis::Cancer) };
        let a = gen_synthetic_slide(7, &spec).unwrap();
        let b = gen_synthetic_slide(7, &spec).unwrap();
        assert_eq!(a.cell_labels, b.cell_labels);
        for ((ma, ra), (mb, rb)) in a.rasters.iter().zip(b.rasters.iter()) {
            assert_eq!(ma, mb);
            assert_eq!(ra, rb);
        }
        let c = gen_synthetic_slide(8, &spec).unwrap();
        assert_ne!(a.rasters[0].1, c.rasters[0].1);
    }

    #[test]
    fn all_classes_present() {
        let spec = SlideSpec { height: 672, width: 672, background_fraction: 0.0, ..SlideSpec::toy(Diagnosis::Benign) };
        let s = gen_synthetic_slide(3, &spec).unwrap();
        let mut seen = [false; 4];
        for l in s.cell_labels.iter().flatten() {
            seen[*l as usize] = true;
        }
        assert!(seen.iter().all(|&x| x), "labels {:?}", s.cell_labels);
    }

    #[test]
    fn background_cells_fail_tissue_filter_and_texture_cells_pass() {
        let spec = SlideSpec { height: 448, width: 448, background_fraction: 0.25, ..SlideSpec::toy(Diagnosis::Unknown) };
        let s = gen_synthetic_slide(11, &spec).unwrap();
        let ranges = HsvRanges::default();
        let raster = &s.rasters[0].1;
        for (idx, label) in s.cell_labels.iter().enumerate() {
            let (cy, cx) = (idx / s.grid.1, idx % s.grid.1);
            let tile = raster.crop(cy * 224, cx * 224, 224, 224);
            let cov = tissue_coverage(&tile, &ranges);
            match label {
                None => assert!(cov < 0.05, "background cell coverage {cov}"),
                Some(_) => assert!(cov > 0.65, "texture cell coverage {cov}"),
            }
        }
    }

    #[test]
    fn rejects_degenerate_specs() {
        let mut spec = SlideSpec::toy(Diagnosis::Cancer);
        spec.texture_classes = 1;
        assert!(gen_synthetic_slide(1, &spec).is_err());
        let mut spec = SlideSpec::toy(Diagnosis::Cancer);
        spec.height = 100;
        assert!(gen_synthetic_slide(1, &spec).is_err());
    }

    #[test]
    fn localized_tiles_have_labels_cycling() {
        let tiles = gen_localized_tiles(5, 8, 4, 224).unwrap();
        assert_eq!(tiles.len(), 8);
        for (i, (img, label)) in tiles.iter().enumerate() {
            assert_eq!(*label as usize, i % 4);
            assert_eq!((img.h, img.w), (224, 224));
        }
    }
}
