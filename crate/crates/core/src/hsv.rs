use crate::raster::Raster;

/// Inclusive acceptance intervals for (h, s, v).
///
/// Hue is on the half-degree 0..180 integer scale, saturation and value on
/// 0..255, matching the common 8-bit HSV convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HsvRanges {
    pub h: (u16, u16),
    pub s: (u16, u16),
    pub v: (u16, u16),
}

impl Default for HsvRanges {
    /// Tissue acceptance ranges: h in [90, 180], s in [8, 255], v in [103, 255].
    fn default() -> Self {
        HsvRanges { h: (90, 180), s: (8, 255), v: (103, 255) }
    }
}

impl HsvRanges {
    pub fn contains(&self, hsv: (u16, u16, u16)) -> bool {
        let (h, s, v) = hsv;
        h >= self.h.0 && h <= self.h.1 && s >= self.s.0 && s <= self.s.1 && v >= self.v.0 && v <= self.v.1
    }
}

/// Round `n / d` (d > 0) to the nearest integer, halves away from zero.
#[inline]
fn round_div(n: i64, d: i64) -> i64 {
    debug_assert!(d > 0);
    if n >= 0 {
        (2 * n + d) / (2 * d)
    } else {
        -((-2 * n + d) / (2 * d))
    }
}

/// 8-bit RGB to HSV with hue on the half-degree 0..180 scale.
///
/// All channels are computed in exact integer arithmetic: value is the max
/// channel, saturation is `round(255 * delta / max)`, hue is the standard
/// piecewise formula rounded to the nearest half-degree and wrapped into
/// [0, 180). Gray pixels (delta = 0) report hue 0.
pub fn rgb_to_hsv8(rgb: [u8; 3]) -> (u16, u16, u16) {
    let r = rgb[0] as i64;
    let g = rgb[1] as i64;
    let b = rgb[2] as i64;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;

    let v = max as u16;
    let s = if max == 0 { 0 } else { round_div(510 * delta, 2 * max) as u16 };
    let h = if delta == 0 {
        0
    } else {
        // 30 * t / delta is the hue in half-degree units before the sextant
        // offset; offsets are multiples of 60 half-degrees.
        let (num, offset) = if max == r {
            (30 * (g - b), 0)
        } else if max == g {
            (30 * (b - r), 60)
        } else {
            (30 * (r - g), 120)
        };
        (round_div(num, delta) + offset).rem_euclid(180) as u16
    };
    (h, s, v)
}

/// Fraction of pixels whose HSV triple falls inside all three intervals.
pub fn tissue_coverage(tile: &Raster, ranges: &HsvRanges) -> f64 {
    let total = tile.h * tile.w;
    if total == 0 {
        return 0.0;
    }
    let mut hit = 0usize;
    for px in tile.data.chunks_exact(3) {
        if ranges.contains(rgb_to_hsv8([px[0], px[1], px[2]])) {
            hit += 1;
        }
    }
    hit as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        assert_eq!(rgb_to_hsv8([255, 0, 0]), (0, 255, 255));
        let (h, s, v) = rgb_to_hsv8([128, 128, 128]);
        assert_eq!((s, v), (0, 128));
        assert_eq!(h, 0);
        // hand-evaluated pink
        assert_eq!(rgb_to_hsv8([230, 150, 200]), (161, 89, 230));
    }

    #[test]
    fn hue_stays_below_180() {
        // reds slightly below the wrap point must fold back into [0, 180)
        for b in 0..=4u8 {
            let (h, _, _) = rgb_to_hsv8([255, 0, b]);
            assert!(h < 180, "b={b} gave h={h}");
        }
        let mut rng = crate::rng::Rng::new(900);
        for _ in 0..200_000 {
            let px = [
                (rng.next_u64() & 0xFF) as u8,
                (rng.next_u64() & 0xFF) as u8,
                (rng.next_u64() & 0xFF) as u8,
            ];
            let (h, s, v) = rgb_to_hsv8(px);
            assert!(h < 180 && s <= 255 && v <= 255);
        }
    }

    #[test]
    fn coverage_examples() {
        let ranges = HsvRanges::default();
        let pink = Raster::filled(8, 8, [230, 150, 200]);
        assert_eq!(tissue_coverage(&pink, &ranges), 1.0);
        let gray = Raster::filled(8, 8, [128, 128, 128]);
        assert_eq!(tissue_coverage(&gray, &ranges), 0.0);

        // half tissue-pink / half white
        let mut half = Raster::filled(8, 8, [245, 244, 246]);
        for y in 0..4 {
            for x in 0..8 {
                half.set(y, x, [230, 150, 200]);
            }
        }
        assert!((tissue_coverage(&half, &ranges) - 0.5).abs() < 1.0 / 64.0 + 1e-12);
    }

    #[test]
    fn coverage_monotone_in_in_range_pixels() {
        let ranges = HsvRanges::default();
        let mut tile = Raster::filled(4, 4, [128, 128, 128]);
        let mut prev = tissue_coverage(&tile, &ranges);
        for i in 0..16 {
            tile.set(i / 4, i % 4, [230, 150, 200]);
            let cur = tissue_coverage(&tile, &ranges);
            assert!(cur >= prev);
            prev = cur;
        }
        assert_eq!(prev, 1.0);
    }
}
