use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::raster::{bilinear_resize, Image};
use crate::rng::Rng;

/// Multi-crop geometry for extended-context translation.
///
/// `scale_range` is an area fraction of the target's own `L x L` footprint,
/// so scale 1 is a distortion-free same-size crop. The aspect range is
/// sampled log-uniformly after snapping its lower end to `1/hi`, keeping the
/// ratio band symmetric so `|log(w/h)| <= log(hi)`.
#[derive(Debug, Clone)]
pub struct EctConfig {
    pub source_size: usize,
    pub global_size: usize,
    pub local_size: usize,
    pub scale_range: (f64, f64),
    pub aspect_range: (f64, f64),
    pub n_global: usize,
    pub n_local: usize,
}

impl Default for EctConfig {
    fn default() -> Self {
        EctConfig {
            source_size: 392,
            global_size: 224,
            local_size: 98,
            scale_range: (0.9, 1.1),
            aspect_range: (0.95, 1.05),
            n_global: 2,
            n_local: 8,
        }
    }
}

impl EctConfig {
    /// Effective aspect bounds after symmetrizing: `(max(lo, 1/hi), hi)`.
    pub fn aspect_bounds(&self) -> (f64, f64) {
        let (lo, hi) = self.aspect_range;
        (lo.max(1.0 / hi), hi)
    }

    /// Largest crop edge the sampler can request for target size `l`.
    pub fn max_crop_edge(&self, l: usize) -> f64 {
        let (_, a_hi) = self.aspect_bounds();
        l as f64 * libm::sqrt(self.scale_range.1 * a_hi)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.source_size > self.global_size && self.global_size > self.local_size && self.local_size >= 1) {
            return Err(CoreError::config(format!(
                "view sizes must satisfy source > global > local >= 1, got {}/{}/{}",
                self.source_size, self.global_size, self.local_size
            )));
        }
        let (s_lo, s_hi) = self.scale_range;
        if !(s_lo > 0.0 && s_lo <= s_hi) {
            return Err(CoreError::config("scale range must be positive and ordered"));
        }
        let (a_lo, a_hi) = self.aspect_range;
        if !(a_lo > 0.0 && a_lo <= a_hi && a_hi >= 1.0) {
            return Err(CoreError::config("aspect range must be positive, ordered, and reach 1"));
        }
        for l in [self.global_size, self.local_size] {
            if self.max_crop_edge(l) > self.source_size as f64 {
                return Err(CoreError::config(format!(
                    "crop for target {l} cannot fit: {:.1} > source {}",
                    self.max_crop_edge(l),
                    self.source_size
                )));
            }
        }
        if self.n_global == 0 {
            return Err(CoreError::config("need at least one global view"));
        }
        Ok(())
    }
}

/// Axis-aligned crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl CropRect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// Intersection-over-union of two rectangles in the same source frame.
pub fn pair_iou(r1: &CropRect, r2: &CropRect) -> f64 {
    let x0 = r1.x.max(r2.x);
    let y0 = r1.y.max(r2.y);
    let x1 = (r1.x + r1.w).min(r2.x + r2.w);
    let y1 = (r1.y + r1.h).min(r2.y + r2.h);
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let inter = ((x1 - x0) * (y1 - y0)) as f64;
    let union = (r1.area() + r2.area()) as f64 - inter;
    inter / union
}

/// One geometric draw: the rectangle plus the continuous scale/aspect that
/// produced it (kept so distortion statistics can be measured pre-rounding).
#[derive(Debug, Clone, Copy)]
pub struct EctSample {
    pub rect: CropRect,
    pub scale: f64,
    pub aspect: f64,
}

fn uniform_or(lo: f64, hi: f64, rng: &mut Rng) -> f64 {
    if lo < hi {
        rng.uniform(lo, hi).unwrap()
    } else {
        hi
    }
}

/// Sample the ECT rectangle for target size `l`: area scale uniform,
/// aspect log-uniform, then pure translation over all valid positions.
pub fn sample_ect_rect(cfg: &EctConfig, l: usize, rng: &mut Rng) -> EctSample {
    let n = cfg.source_size;
    let (s_lo, s_hi) = cfg.scale_range;
    let (a_lo, a_hi) = cfg.aspect_bounds();
    let s = uniform_or(s_lo, s_hi, rng);
    let a = libm::exp(uniform_or(libm::log(a_lo), libm::log(a_hi), rng));
    let w = (libm::round(l as f64 * libm::sqrt(s * a)) as usize).clamp(1, n);
    let h = (libm::round(l as f64 * libm::sqrt(s / a)) as usize).clamp(1, n);
    let x = rng.below(n - w + 1);
    let y = rng.below(n - h + 1);
    EctSample { rect: CropRect { x, y, w, h }, scale: s, aspect: a }
}

/// Extended-context translation: near-target-size crop by translation within
/// the larger source, bilinear-resized to `l x l`.
pub fn sample_ect(source: &Image, l: usize, cfg: &EctConfig, rng: &mut Rng) -> Result<(CropRect, Image)> {
    if source.h != cfg.source_size || source.w != cfg.source_size {
        return Err(CoreError::dimension(format!(
            "ECT source must be {0}x{0}, got {1}x{2}",
            cfg.source_size, source.h, source.w
        )));
    }
    let s = sample_ect_rect(cfg, l, rng);
    let crop = source.crop(s.rect.y, s.rect.x, s.rect.h, s.rect.w);
    Ok((s.rect, bilinear_resize(&crop, l, l)?))
}

/// Standard random-resized-crop: area fraction of the full input, aspect
/// log-uniform, 10 placement attempts, then a center-crop fallback clamped
/// to the aspect bounds.
pub fn sample_crop_resize(
    image: &Image,
    l: usize,
    scale_range: (f64, f64),
    aspect_range: (f64, f64),
    rng: &mut Rng,
) -> Result<(CropRect, Image)> {
    if l == 0 {
        return Err(CoreError::parameter("crop-resize target must be >= 1"));
    }
    let (ih, iw) = (image.h, image.w);
    let area = (ih * iw) as f64;
    let (a_lo, a_hi) = aspect_range;
    let mut chosen: Option<CropRect> = None;
    for _ in 0..10 {
        let target = area * uniform_or(scale_range.0, scale_range.1, rng);
        let r = libm::exp(uniform_or(libm::log(a_lo), libm::log(a_hi), rng));
        let w = libm::round(libm::sqrt(target * r)) as usize;
        let h = libm::round(libm::sqrt(target / r)) as usize;
        if w >= 1 && h >= 1 && w <= iw && h <= ih {
            let x = rng.below(iw - w + 1);
            let y = rng.below(ih - h + 1);
            chosen = Some(CropRect { x, y, w, h });
            break;
        }
    }
    let rect = chosen.unwrap_or_else(|| {
        let in_ratio = iw as f64 / ih as f64;
        let (w, h) = if in_ratio < a_lo {
            (iw, (libm::round(iw as f64 / a_lo) as usize).min(ih))
        } else if in_ratio > a_hi {
            ((libm::round(ih as f64 * a_hi) as usize).min(iw), ih)
        } else {
            (iw, ih)
        };
        CropRect { x: (iw - w) / 2, y: (ih - h) / 2, w, h }
    });
    let crop = image.crop(rect.y, rect.x, rect.h, rect.w);
    Ok((rect, bilinear_resize(&crop, l, l)?))
}

/// DINOv2 crop-and-resize defaults for the baseline arm.
pub const CROP_RESIZE_GLOBAL_SCALE: (f64, f64) = (0.32, 1.0);
pub const CROP_RESIZE_LOCAL_SCALE: (f64, f64) = (0.05, 0.32);
pub const CROP_RESIZE_ASPECT: (f64, f64) = (0.75, 4.0 / 3.0);

/// Photometric augmentation policy; probabilities in [0, 1], jitter values
/// are maximum strengths.
#[derive(Debug, Clone)]
pub struct PhotometricPolicy {
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub grayscale_p: f64,
    /// (brightness, contrast, saturation, hue) strengths; hue in turns.
    pub jitter: (f64, f64, f64, f64),
    pub solarize_enabled: bool,
    pub solarize_p: f64,
    pub solarize_threshold: f32,
}

impl Default for PhotometricPolicy {
    fn default() -> Self {
        PhotometricPolicy {
            hflip_p: 0.5,
            vflip_p: 0.5,
            grayscale_p: 0.2,
            jitter: (0.4, 0.4, 0.2, 0.1),
            solarize_enabled: true,
            solarize_p: 0.2,
            solarize_threshold: 128.0,
        }
    }
}

impl PhotometricPolicy {
    pub fn off() -> Self {
        PhotometricPolicy {
            hflip_p: 0.0,
            vflip_p: 0.0,
            grayscale_p: 0.0,
            jitter: (0.0, 0.0, 0.0, 0.0),
            solarize_enabled: false,
            solarize_p: 0.0,
            solarize_threshold: 128.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("grayscale_p", self.grayscale_p),
            ("solarize_p", self.solarize_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

pub fn luma(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn flip_h(img: &mut Image) {
    for y in 0..img.h {
        for x in 0..img.w / 2 {
            let a = img.px(y, x);
            let b = img.px(y, img.w - 1 - x);
            img.set(y, x, b);
            img.set(y, img.w - 1 - x, a);
        }
    }
}

fn flip_v(img: &mut Image) {
    for y in 0..img.h / 2 {
        for x in 0..img.w {
            let a = img.px(y, x);
            let b = img.px(img.h - 1 - y, x);
            img.set(y, x, b);
            img.set(img.h - 1 - y, x, a);
        }
    }
}

fn rgb_to_hsv_f(rgb: [f32; 3]) -> (f32, f32, f32) {
    let (r, g, b) = (rgb[0] / 255.0, rgb[1] / 255.0, rgb[2] / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / d) % 6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let h = if h < 0.0 { h + 360.0 } else { h };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb_f(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn shift_hue(img: &mut Image, turns: f32) {
    let deg = turns * 360.0;
    for i in (0..img.data.len()).step_by(3) {
        let rgb = [img.data[i], img.data[i + 1], img.data[i + 2]];
        let (h, s, v) = rgb_to_hsv_f(rgb);
        let h = (h + deg).rem_euclid(360.0);
        let out = hsv_to_rgb_f(h, s, v);
        img.data[i] = out[0];
        img.data[i + 1] = out[1];
        img.data[i + 2] = out[2];
    }
}

/// Apply the photometric pipeline in fixed order:
/// flip-h, flip-v, jitter (brightness, contrast, saturation, hue),
/// grayscale, solarize. Returns the list of applied ops.
pub fn apply_photometric(img: &mut Image, policy: &PhotometricPolicy, rng: &mut Rng) -> Vec<String> {
    let mut log = Vec::new();
    if policy.hflip_p > 0.0 && rng.coin(policy.hflip_p) {
        flip_h(img);
        log.push(String::from("hflip"));
    }
    if policy.vflip_p > 0.0 && rng.coin(policy.vflip_p) {
        flip_v(img);
        log.push(String::from("vflip"));
    }

    let (jb, jc, js, jh) = policy.jitter;
    if jb > 0.0 {
        let f = rng.uniform((1.0 - jb).max(0.0), 1.0 + jb).unwrap() as f32;
        for v in img.data.iter_mut() {
            *v = (*v * f).clamp(0.0, 255.0);
        }
        log.push(format!("brightness({f:.4})"));
    }
    if jc > 0.0 {
        let f = rng.uniform((1.0 - jc).max(0.0), 1.0 + jc).unwrap() as f32;
        let mut mean = 0.0f64;
        for px in img.data.chunks_exact(3) {
            mean += luma([px[0], px[1], px[2]]) as f64;
        }
        let mean = (mean / (img.h * img.w) as f64) as f32;
        for v in img.data.iter_mut() {
            *v = (mean + (*v - mean) * f).clamp(0.0, 255.0);
        }
        log.push(format!("contrast({f:.4})"));
    }
    if js > 0.0 {
        let f = rng.uniform((1.0 - js).max(0.0), 1.0 + js).unwrap() as f32;
        for px in img.data.chunks_exact_mut(3) {
            let l = luma([px[0], px[1], px[2]]);
            for v in px.iter_mut() {
                *v = (l + (*v - l) * f).clamp(0.0, 255.0);
            }
        }
        log.push(format!("saturation({f:.4})"));
    }
    if jh > 0.0 {
        let f = rng.uniform(-jh, jh).unwrap() as f32;
        shift_hue(img, f);
        log.push(format!("hue({f:.4})"));
    }

    if policy.grayscale_p > 0.0 && rng.coin(policy.grayscale_p) {
        for px in img.data.chunks_exact_mut(3) {
            let l = luma([px[0], px[1], px[2]]);
            px[0] = l;
            px[1] = l;
            px[2] = l;
        }
        log.push(String::from("grayscale"));
    }
    if policy.solarize_enabled && policy.solarize_p > 0.0 && rng.coin(policy.solarize_p) {
        for v in img.data.iter_mut() {
            if *v >= policy.solarize_threshold {
                *v = 255.0 - *v;
            }
        }
        log.push(String::from("solarize"));
    }
    log
}

/// The multi-crop output for one source tile.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub global_views: Vec<(CropRect, Image)>,
    pub local_views: Vec<(CropRect, Image)>,
    /// Applied photometric ops, globals first then locals.
    pub photometric_log: Vec<Vec<String>>,
}

/// Assemble the multi-crop view set: `n_global` ECT views at the global size
/// and `n_local` at the local size, each followed by the photometric
/// pipeline, with an independent forked stream per view.
pub fn make_views(tile: &Image, policy: &PhotometricPolicy, cfg: &EctConfig, rng: &Rng) -> Result<ViewSet> {
    cfg.validate()?;
    policy.validate()?;
    let mut global_views = Vec::with_capacity(cfg.n_global);
    let mut local_views = Vec::with_capacity(cfg.n_local);
    let mut photometric_log = Vec::with_capacity(cfg.n_global + cfg.n_local);
    for v in 0..cfg.n_global + cfg.n_local {
        let mut view_rng = rng.fork(v as u64);
        let l = if v < cfg.n_global { cfg.global_size } else { cfg.local_size };
        let (rect, mut img) = sample_ect(tile, l, cfg, &mut view_rng)?;
        let log = apply_photometric(&mut img, policy, &mut view_rng);
        photometric_log.push(log);
        if v < cfg.n_global {
            global_views.push((rect, img));
        } else {
            local_views.push((rect, img));
        }
    }
    Ok(ViewSet { global_views, local_views, photometric_log })
}

/// Monte Carlo estimate of the expected IoU between two independent global
/// ECT rectangles. Returns `(mean, standard error)`.
pub fn expected_iou(cfg: &EctConfig, n_samples: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    if n_samples < 1000 {
        return Err(CoreError::parameter("expected_iou needs at least 1e3 samples"));
    }
    cfg.validate()?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let a = sample_ect_rect(cfg, cfg.global_size, rng).rect;
        let b = sample_ect_rect(cfg, cfg.global_size, rng).rect;
        let v = pair_iou(&a, &b);
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n_samples as f64;
    let var = (sum_sq / n_samples as f64 - mean * mean).max(0.0);
    Ok((mean, libm::sqrt(var / n_samples as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;

    fn source_image(n: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        let mut img = Image::new(n, n);
        for v in img.data.iter_mut() {
            *v = rng.uniform(0.0, 255.0).unwrap() as f32;
        }
        img
    }

    #[test]
    fn ect_unit_scale_is_pure_translation() {
        let cfg = EctConfig { scale_range: (1.0, 1.0), aspect_range: (1.0, 1.0), ..EctConfig::default() };
        let src = source_image(392, 1);
        let mut rng = Rng::new(2);
        let (rect, img) = sample_ect(&src, 224, &cfg, &mut rng).unwrap();
        assert_eq!((rect.w, rect.h), (224, 224));
        // resize is the identity: output equals the crop bitwise
        let crop = src.crop(rect.y, rect.x, 224, 224);
        assert_eq!(img, crop);
    }

    #[test]
    fn ect_default_edge_range_and_bounds() {
        let cfg = EctConfig::default();
        cfg.validate().unwrap();
        let mut rng = Rng::new(3);
        let mut wmin = usize::MAX;
        let mut wmax = 0;
        for _ in 0..20_000 {
            let s = sample_ect_rect(&cfg, 224, &mut rng);
            let r = s.rect;
            assert!(r.x + r.w <= 392 && r.y + r.h <= 392);
            wmin = wmin.min(r.w).min(r.h);
            wmax = wmax.max(r.w).max(r.h);
            // continuous resize factors stay inside the derived interval
            let wf = libm::sqrt(s.scale * s.aspect);
            let hf = libm::sqrt(s.scale / s.aspect);
            assert!((0.925820..=1.074710).contains(&wf), "wf {wf}");
            assert!((0.925820..=1.074710).contains(&hf), "hf {hf}");
        }
        assert!(wmin >= 207, "min edge {wmin}");
        assert!(wmax <= 241, "max edge {wmax}");
    }

    #[test]
    fn ect_distortion_bounded_but_crop_resize_not() {
        let cfg = EctConfig::default();
        let mut rng = Rng::new(5);
        let bound = libm::log(1.05);
        for _ in 0..20_000 {
            let r = sample_ect_rect(&cfg, 224, &mut rng).rect;
            let slack = 2.0 / r.w.min(r.h) as f64;
            assert!(libm::fabs(libm::log(r.w as f64 / r.h as f64)) <= bound + slack);
        }
        // the baseline violates the same bound with positive frequency
        let img = source_image(224, 7);
        let mut violations = 0;
        for _ in 0..2000 {
            let (r, _) =
                sample_crop_resize(&img, 96, CROP_RESIZE_LOCAL_SCALE, CROP_RESIZE_ASPECT, &mut rng).unwrap();
            let slack = 2.0 / r.w.min(r.h) as f64;
            if libm::fabs(libm::log(r.w as f64 / r.h as f64)) > bound + slack {
                violations += 1;
            }
        }
        assert!(violations > 0, "crop-and-resize never exceeded the ECT distortion bound");
    }

    #[test]
    fn ect_adjusted_scale_equivalence() {
        // ECT with scale s relative to the target footprint is crop-and-resize
        // with scale s*(L/N)^2 relative to the source
        let cfg = EctConfig::default();
        let f = (224.0f64 / 392.0).powi(2);
        let lo = 0.9 * f;
        let hi = 1.1 * f;
        assert!((lo - 0.2939).abs() < 1e-4);
        assert!((hi - 0.3592).abs() < 1e-4);
        let mut rng = Rng::new(11);
        for _ in 0..5000 {
            let s = sample_ect_rect(&cfg, 224, &mut rng);
            let eff = s.scale * f;
            assert!((lo..=hi).contains(&eff));
        }
    }

    #[test]
    fn ect_config_errors_at_construction() {
        let cfg = EctConfig { source_size: 230, ..EctConfig::default() };
        assert!(matches!(cfg.validate(), Err(CoreError::Config(_))));
        let cfg = EctConfig { source_size: 240, global_size: 224, local_size: 98, ..EctConfig::default() };
        // 224 * sqrt(1.1 * 1.05) = 240.7 > 240
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn crop_resize_degenerate_ranges_and_contract() {
        let img = source_image(224, 13);
        let mut rng = Rng::new(14);
        let (rect, out) = sample_crop_resize(&img, 224, (1.0, 1.0), (1.0, 1.0), &mut rng).unwrap();
        assert_eq!(rect, CropRect { x: 0, y: 0, w: 224, h: 224 });
        assert_eq!(out, img);
        for _ in 0..300 {
            let (_, out) =
                sample_crop_resize(&img, 96, CROP_RESIZE_GLOBAL_SCALE, CROP_RESIZE_ASPECT, &mut rng).unwrap();
            assert_eq!((out.h, out.w), (96, 96));
        }
    }

    #[test]
    fn iou_examples() {
        let a = CropRect { x: 0, y: 0, w: 224, h: 224 };
        assert_eq!(pair_iou(&a, &a), 1.0);
        let b = CropRect { x: 300, y: 300, w: 50, h: 50 };
        assert_eq!(pair_iou(&a, &b), 0.0);
        let c = CropRect { x: 112, y: 0, w: 224, h: 224 };
        assert!((pair_iou(&a, &c) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn expected_iou_limits_and_self_consistency() {
        // N == L with unit scale: no translation slack, IoU exactly 1
        let cfg = EctConfig {
            source_size: 225,
            global_size: 224,
            local_size: 98,
            scale_range: (1.0, 1.0),
            aspect_range: (1.0, 1.0),
            ..EctConfig::default()
        };
        let (mean, _) = expected_iou(&cfg, 2000, &mut Rng::new(1)).unwrap();
        assert!(mean > 0.98, "near-identity mean {mean}");

        // very large source: overlap vanishes
        let cfg = EctConfig { source_size: 3920, ..EctConfig::default() };
        let (mean, _) = expected_iou(&cfg, 3000, &mut Rng::new(2)).unwrap();
        assert!(mean < 0.02, "large-source mean {mean}");

        // two seeds agree within 3 stderr
        let cfg = EctConfig::default();
        let (m1, se1) = expected_iou(&cfg, 20_000, &mut Rng::new(3)).unwrap();
        let (m2, se2) = expected_iou(&cfg, 20_000, &mut Rng::new(4)).unwrap();
        let se = libm::sqrt(se1 * se1 + se2 * se2);
        assert!((m1 - m2).abs() <= 3.0 * se, "{m1} vs {m2} (se {se})");
    }

    #[test]
    fn photometric_pointwise_examples() {
        // solarization definition
        let mut img = Image::new(1, 2);
        img.set(0, 0, [200.0, 200.0, 200.0]);
        img.set(0, 1, [100.0, 100.0, 100.0]);
        let policy = PhotometricPolicy {
            solarize_enabled: true,
            solarize_p: 1.0,
            ..PhotometricPolicy::off()
        };
        apply_photometric(&mut img, &policy, &mut Rng::new(1));
        assert_eq!(img.px(0, 0), [55.0, 55.0, 55.0]);
        assert_eq!(img.px(0, 1), [100.0, 100.0, 100.0]);

        // grayscale via luma weights
        let mut img = Image::new(1, 1);
        img.set(0, 0, [30.0, 120.0, 210.0]);
        let policy = PhotometricPolicy { grayscale_p: 1.0, ..PhotometricPolicy::off() };
        apply_photometric(&mut img, &policy, &mut Rng::new(1));
        let l: f32 = 0.299 * 30.0 + 0.587 * 120.0 + 0.114 * 210.0;
        assert!((l - 103.35).abs() < 1e-4);
        for c in img.px(0, 0) {
            assert!((c - l).abs() < 1e-4);
        }
    }

    #[test]
    fn double_hflip_is_identity() {
        let mut img = source_image(9, 21);
        let orig = img.clone();
        flip_h(&mut img);
        assert_ne!(img, orig);
        flip_h(&mut img);
        assert_eq!(img, orig);
    }

    #[test]
    fn make_views_counts_and_determinism() {
        let tile = source_image(392, 31);
        let cfg = EctConfig::default();
        let policy = PhotometricPolicy::default();
        let vs1 = make_views(&tile, &policy, &cfg, &Rng::new(77)).unwrap();
        assert_eq!(vs1.global_views.len(), 2);
        assert_eq!(vs1.local_views.len(), 8);
        for (_, v) in &vs1.global_views {
            assert_eq!((v.h, v.w), (224, 224));
        }
        for (_, v) in &vs1.local_views {
            assert_eq!((v.h, v.w), (98, 98));
        }
        let vs2 = make_views(&tile, &policy, &cfg, &Rng::new(77)).unwrap();
        assert_eq!(vs1.global_views, vs2.global_views);
        assert_eq!(vs1.local_views, vs2.local_views);
        assert_eq!(vs1.photometric_log, vs2.photometric_log);
        let vs3 = make_views(&tile, &policy, &cfg, &Rng::new(78)).unwrap();
        assert_ne!(vs1.global_views, vs3.global_views);
    }

    #[test]
    fn make_views_policy_off_is_pure_geometry() {
        let tile = source_image(392, 41);
        let cfg = EctConfig::default();
        let vs = make_views(&tile, &PhotometricPolicy::off(), &cfg, &Rng::new(5)).unwrap();
        assert!(vs.photometric_log.iter().all(|l| l.is_empty()));
        for (rect, img) in vs.global_views.iter().chain(vs.local_views.iter()) {
            let l = img.h;
            let crop = tile.crop(rect.y, rect.x, rect.h, rect.w);
            let resized = bilinear_resize(&crop, l, l).unwrap();
            assert_eq!(img, &resized);
        }
    }

    #[test]
    fn raster_to_image_pipeline_smoke() {
        let tile = Raster::filled(392, 392, [230, 150, 200]).to_image();
        let vs = make_views(&tile, &PhotometricPolicy::off(), &EctConfig::default(), &Rng::new(1)).unwrap();
        for (_, v) in vs.global_views {
            for px in v.data.chunks_exact(3) {
                assert_eq!(px, &[230.0, 150.0, 200.0]);
            }
        }
    }
}
