use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// 8-bit RGB raster, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(h: usize, w: usize) -> Self {
        Raster { h, w, data: vec![0; h * w * 3] }
    }

    pub fn filled(h: usize, w: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.extend_from_slice(&rgb);
        }
        Raster { h, w, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Raster {
        assert!(y + h <= self.h && x + w <= self.w, "crop outside raster");
        let mut out = Raster::new(h, w);
        for r in 0..h {
            let src = ((y + r) * self.w + x) * 3;
            let dst = r * w * 3;
            out.data[dst..dst + w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        out
    }

    pub fn to_image(&self) -> Image {
        Image { h: self.h, w: self.w, data: self.data.iter().map(|&b| b as f32).collect() }
    }
}

/// Float RGB image on the 0..255 scale. Augmentations operate here so that
/// resampling and photometric math do not quantize intermediate values.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; h * w * 3] }
    }

    #[inline]
    pub fn px(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Round-to-nearest with clamping back to 8-bit.
    pub fn to_raster(&self) -> Raster {
        Raster {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| libm::roundf(v.clamp(0.0, 255.0)) as u8).collect(),
        }
    }

    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Image {
        assert!(y + h <= self.h && x + w <= self.w, "crop outside image");
        let mut out = Image::new(h, w);
        for r in 0..h {
            let src = ((y + r) * self.w + x) * 3;
            let dst = r * w * 3;
            out.data[dst..dst + w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        out
    }
}

/// Bilinear resize with half-pixel-center sampling and edge clamping.
///
/// Identity (a copy) when the sizes already match; errors on zero target
/// dimensions.
pub fn bilinear_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(CoreError::parameter("resize target dimensions must be >= 1"));
    }
    if img.h == 0 || img.w == 0 {
        return Err(CoreError::parameter("resize source dimensions must be >= 1"));
    }
    if out_h == img.h && out_w == img.w {
        return Ok(img.clone());
    }
    let mut out = Image::new(out_h, out_w);
    let sy = img.h as f32 / out_h as f32;
    let sx = img.w as f32 / out_w as f32;
    for oy in 0..out_h {
        let fy = (oy as f32 + 0.5) * sy - 0.5;
        let y0 = libm::floorf(fy);
        let wy = fy - y0;
        let y0i = (y0 as isize).clamp(0, img.h as isize - 1) as usize;
        let y1i = (y0 as isize + 1).clamp(0, img.h as isize - 1) as usize;
        for ox in 0..out_w {
            let fx = (ox as f32 + 0.5) * sx - 0.5;
            let x0 = libm::floorf(fx);
            let wx = fx - x0;
            let x0i = (x0 as isize).clamp(0, img.w as isize - 1) as usize;
            let x1i = (x0 as isize + 1).clamp(0, img.w as isize - 1) as usize;
            let p00 = img.px(y0i, x0i);
            let p01 = img.px(y0i, x1i);
            let p10 = img.px(y1i, x0i);
            let p11 = img.px(y1i, x1i);
            let mut rgb = [0.0f32; 3];
            for c in 0..3 {
                let top = p00[c] + (p01[c] - p00[c]) * wx;
                let bot = p10[c] + (p11[c] - p10[c]) * wx;
                rgb[c] = top + (bot - top) * wy;
            }
            out.set(oy, ox, rgb);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_is_bitwise() {
        let mut img = Image::new(5, 7);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 251) as f32;
        }
        let out = bilinear_resize(&img, 5, 7).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Raster::filled(3, 4, [120, 7, 200]).to_image();
        for (h, w) in [(1, 1), (9, 2), (17, 23)] {
            let out = bilinear_resize(&img, h, w).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let p = out.px(y, x);
                    assert_eq!(p, [120.0, 7.0, 200.0]);
                }
            }
        }
    }

    #[test]
    fn resize_half_pixel_hand_example() {
        // 1x2 row [0, 255] -> 1x4 row [0, 63.75, 191.25, 255]
        let mut img = Image::new(1, 2);
        img.set(0, 0, [0.0; 3]);
        img.set(0, 1, [255.0; 3]);
        let out = bilinear_resize(&img, 1, 4).unwrap();
        let expect = [0.0, 63.75, 191.25, 255.0];
        for (x, e) in expect.iter().enumerate() {
            assert!((out.px(0, x)[0] - e).abs() < 1e-4, "x={x}: {} vs {e}", out.px(0, x)[0]);
        }
    }

    #[test]
    fn resize_rejects_zero_target() {
        let img = Image::new(2, 2);
        assert!(bilinear_resize(&img, 0, 2).is_err());
        assert!(bilinear_resize(&img, 2, 0).is_err());
    }

    #[test]
    fn resize_preserves_value_bounds() {
        let mut rng = crate::rng::Rng::new(77);
        let mut img = Image::new(13, 9);
        for v in img.data.iter_mut() {
            *v = rng.uniform(0.0, 255.0).unwrap() as f32;
        }
        let lo = img.data.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = img.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for (h, w) in [(3, 3), (20, 31), (13, 40)] {
            let out = bilinear_resize(&img, h, w).unwrap();
            for &v in out.data.iter() {
                assert!(v >= lo - 1e-4 && v <= hi + 1e-4);
            }
        }
    }

    #[test]
    fn raster_roundtrip_and_crop() {
        let mut r = Raster::new(4, 4);
        for (i, v) in r.data.iter_mut().enumerate() {
            *v = (i * 7 % 256) as u8;
        }
        let img = r.to_image();
        assert_eq!(img.to_raster(), r);
        let c = r.crop(1, 2, 2, 2);
        assert_eq!(c.get(0, 0), r.get(1, 2));
        assert_eq!(c.get(1, 1), r.get(2, 3));
    }
}
