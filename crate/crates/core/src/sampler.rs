use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::slide::{Diagnosis, Stain, DIAGNOSES};

/// One manifest row referencing a stored tile.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub slide_id: String,
    pub patient_id: String,
    pub magnification: u8,
    pub stain: Stain,
    pub tissue: String,
    pub diagnosis: Diagnosis,
    pub coverage: f64,
}

/// Tile index for training: the record list plus the seed the cohort was
/// generated from.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub seed: u64,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Balancing targets: diagnosis mix, magnification mix, the boost factor for
/// slides lacking 40x, and optional tissue flattening.
#[derive(Debug, Clone)]
pub struct SamplerTargets {
    /// Indexed by [`DIAGNOSES`] order.
    pub diagnosis_weights: [f64; 5],
    /// Indexed by [`MAGNIFICATIONS`] order (5x, 10x, 20x, 40x).
    pub magnification_weights: [f64; 4],
    pub no40x_boost: f64,
    pub tissue_flattening: bool,
}

impl Default for SamplerTargets {
    /// The production mix: cancer 40%, precursor 15%, benign 8%, benign
    /// neoplasm 2%, unknown 35%; magnifications 20/20/40/20% for 5/10/20/40x;
    /// slides without 40x drawn 1.5x more often.
    fn default() -> Self {
        SamplerTargets {
            diagnosis_weights: [0.40, 0.15, 0.08, 0.02, 0.35],
            magnification_weights: [0.20, 0.20, 0.40, 0.20],
            no40x_boost: 1.5,
            tissue_flattening: false,
        }
    }
}

impl SamplerTargets {
    pub fn validate(&self) -> Result<()> {
        for (name, ws) in [
            ("diagnosis_weights", &self.diagnosis_weights[..]),
            ("magnification_weights", &self.magnification_weights[..]),
        ] {
            if ws.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                return Err(CoreError::config(format!("{name} must be non-negative")));
            }
            let sum: f64 = ws.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CoreError::config(format!("{name} must sum to 1, got {sum}")));
            }
        }
        if !(self.no40x_boost > 0.0) {
            return Err(CoreError::config("no40x_boost must be positive"));
        }
        Ok(())
    }
}

struct SlideEntry {
    diagnosis: Diagnosis,
    tissues: Vec<String>,
    /// record indices per magnification (MAGNIFICATIONS order, per tissue id)
    tiles: [Vec<usize>; 4],
    boost: f64,
    tile_count: usize,
}

struct Stratum {
    /// slide indices and their cumulative boost weights
    slides: Vec<usize>,
    cum: Vec<f64>,
    /// tissue groups when flattening: (tissue, slide subset, cum weights, draw weight)
    tissue_groups: Vec<TissueGroup>,
}

struct TissueGroup {
    slides: Vec<usize>,
    cum: Vec<f64>,
    weight: f64,
}

/// Infinite stream of manifest indices balanced by diagnosis, magnification,
/// and (optionally) flattened tissue type.
///
/// Draw order: diagnosis by target weight; (tissue when flattening); a slide
/// within the stratum, weighted `no40x_boost` when the slide lacks 40x;
/// a magnification by target weight restricted to the slide's available
/// magnifications; and finally a tile uniformly within that (slide, mag).
pub struct BalancedSampler {
    targets: SamplerTargets,
    slides: Vec<SlideEntry>,
    strata: Vec<Stratum>,
    rng: Rng,
}

impl BalancedSampler {
    pub fn new(manifest: &Manifest, targets: &SamplerTargets, rng: Rng) -> Result<Self> {
        targets.validate()?;
        if manifest.is_empty() {
            return Err(CoreError::config("manifest is empty"));
        }

        let mut by_slide: BTreeMap<&str, usize> = BTreeMap::new();
        let mut slides: Vec<SlideEntry> = Vec::new();
        for (ri, rec) in manifest.records.iter().enumerate() {
            let mi = crate::slide::magnification_index(rec.magnification)?;
            let si = *by_slide.entry(rec.slide_id.as_str()).or_insert_with(|| {
                slides.push(SlideEntry {
                    diagnosis: rec.diagnosis,
                    tissues: Vec::new(),
                    tiles: [Vec::new(), Vec::new(), Vec::new(), Vec::new()],
                    boost: 1.0,
                    tile_count: 0,
                });
                slides.len() - 1
            });
            if slides[si].diagnosis != rec.diagnosis {
                return Err(CoreError::config(format!(
                    "slide {} carries conflicting diagnoses",
                    rec.slide_id
                )));
            }
            slides[si].tiles[mi].push(ri);
            slides[si].tile_count += 1;
            if !slides[si].tissues.contains(&rec.tissue) {
                slides[si].tissues.push(rec.tissue.clone());
            }
        }
        for s in slides.iter_mut() {
            let has_40 = !s.tiles[3].is_empty();
            s.boost = if has_40 { 1.0 } else { targets.no40x_boost };
        }

        let mut strata = Vec::with_capacity(DIAGNOSES.len());
        for (di, diag) in DIAGNOSES.iter().enumerate() {
            let members: Vec<usize> =
                (0..slides.len()).filter(|&si| slides[si].diagnosis == *diag).collect();
            if members.is_empty() && targets.diagnosis_weights[di] > 0.0 {
                return Err(CoreError::config(format!(
                    "diagnosis stratum '{}' has target weight {} but no slides",
                    diag.as_str(),
                    targets.diagnosis_weights[di]
                )));
            }
            let cum = cumulative(&members, |si| slides[si].boost);
            let tissue_groups = if targets.tissue_flattening {
                flatten_tissues(&slides, &members)
            } else {
                Vec::new()
            };
            strata.push(Stratum { slides: members, cum, tissue_groups });
        }

        Ok(BalancedSampler { targets: targets.clone(), slides, strata, rng })
    }

    /// Draw the next manifest index.
    pub fn next_index(&mut self) -> usize {
        let di = self.rng.weighted(&self.targets.diagnosis_weights).expect("validated weights");
        let stratum = &self.strata[di];
        let si = if self.targets.tissue_flattening && !stratum.tissue_groups.is_empty() {
            let gw: Vec<f64> = stratum.tissue_groups.iter().map(|g| g.weight).collect();
            let gi = self.rng.weighted(&gw).expect("tissue weights");
            let g = &stratum.tissue_groups[gi];
            g.slides[draw_cum(&g.cum, &mut self.rng)]
        } else {
            stratum.slides[draw_cum(&stratum.cum, &mut self.rng)]
        };
        let slide = &self.slides[si];

        // restrict magnification targets to what the slide has
        let mut w = [0.0f64; 4];
        let mut any = false;
        for mi in 0..4 {
            if !slide.tiles[mi].is_empty() {
                w[mi] = self.targets.magnification_weights[mi];
                any = any || w[mi] > 0.0;
            }
        }
        if !any {
            // slide only has zero-weight magnifications: draw uniformly
            for mi in 0..4 {
                if !slide.tiles[mi].is_empty() {
                    w[mi] = 1.0;
                }
            }
        }
        let mi = self.rng.weighted(&w).expect("magnification weights");
        let tiles = &slide.tiles[mi];
        tiles[self.rng.below(tiles.len())]
    }

    /// Clone with an independent deterministic stream for worker `id`.
    pub fn fork(&self, id: u64) -> BalancedSampler
    where
        Self: Sized,
    {
        BalancedSampler {
            targets: self.targets.clone(),
            slides: self.slides.iter().map(|s| SlideEntry {
                diagnosis: s.diagnosis,
                tissues: s.tissues.clone(),
                tiles: s.tiles.clone(),
                boost: s.boost,
                tile_count: s.tile_count,
            }).collect(),
            strata: self.strata.iter().map(|st| Stratum {
                slides: st.slides.clone(),
                cum: st.cum.clone(),
                tissue_groups: st.tissue_groups.iter().map(|g| TissueGroup {
                    slides: g.slides.clone(),
                    cum: g.cum.clone(),
                    weight: g.weight,
                }).collect(),
            }).collect(),
            rng: self.rng.fork(id),
        }
    }
}

impl Iterator for BalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.next_index())
    }
}

fn cumulative(members: &[usize], weight: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut cum = Vec::with_capacity(members.len());
    let mut acc = 0.0;
    for &m in members {
        acc += weight(m);
        cum.push(acc);
    }
    cum
}

fn draw_cum(cum: &[f64], rng: &mut Rng) -> usize {
    let total = *cum.last().unwrap();
    let u = rng.next_f64() * total;
    match cum.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
        Ok(i) => (i + 1).min(cum.len() - 1),
        Err(i) => i.min(cum.len() - 1),
    }
}

/// Tissue flattening: observed per-tissue tile shares within the stratum,
/// with any tissue capped at twice the uniform share and the excess mass
/// redistributed to the remaining tissues (which lifts rare ones).
fn flatten_tissues(slides: &[SlideEntry], members: &[usize]) -> Vec<TissueGroup> {
    let mut by_tissue: BTreeMap<&str, (Vec<usize>, usize)> = BTreeMap::new();
    for &si in members {
        for t in &slides[si].tissues {
            let e = by_tissue.entry(t.as_str()).or_default();
            e.0.push(si);
            e.1 += slides[si].tile_count;
        }
    }
    if by_tissue.is_empty() {
        return Vec::new();
    }
    let total: usize = by_tissue.values().map(|(_, c)| c).sum();
    let mut weights: Vec<f64> =
        by_tissue.values().map(|(_, c)| *c as f64 / total as f64).collect();
    let cap = 2.0 / weights.len() as f64;
    cap_and_redistribute(&mut weights, cap);
    by_tissue
        .into_values()
        .zip(weights)
        .map(|((slides_in, _), weight)| {
            let cum = cumulative(&slides_in, |si| slides[si].boost);
            TissueGroup { slides: slides_in, cum, weight }
        })
        .collect()
}

/// Clamp weights at `cap`, spreading the clipped mass proportionally over
/// the uncapped entries. Weights must sum to 1; cap * len >= 1 guarantees a
/// fixed point.
fn cap_and_redistribute(weights: &mut [f64], cap: f64) {
    for _ in 0..weights.len() {
        let excess: f64 = weights.iter().filter(|w| **w > cap).map(|w| w - cap).sum();
        if excess <= 1e-12 {
            return;
        }
        let free: f64 = weights.iter().filter(|w| **w <= cap).sum();
        for w in weights.iter_mut() {
            if *w > cap {
                *w = cap;
            } else if free > 0.0 {
                *w += excess * (*w / free);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::chi2_gof;
    use crate::slide::MAGNIFICATIONS;
    use alloc::vec;

    fn mk_record(slide: &str, mag: u8, diag: Diagnosis, tissue: &str) -> ManifestRecord {
        ManifestRecord {
            path: format!("{slide}_{mag}.ppm"),
            slide_id: slide.into(),
            patient_id: format!("p_{slide}"),
            magnification: mag,
            stain: Stain::He,
            tissue: tissue.into(),
            diagnosis: diag,
            coverage: 0.9,
        }
    }

    fn full_manifest() -> Manifest {
        let mut records = Vec::new();
        for (di, diag) in DIAGNOSES.iter().enumerate() {
            for s in 0..8 {
                let sid = format!("s{di}_{s}");
                for &mag in &MAGNIFICATIONS {
                    for _t in 0..2 {
                        records.push(mk_record(&sid, mag, *diag, "tissue_a"));
                    }
                }
            }
        }
        Manifest { records, seed: 0 }
    }

    #[test]
    fn default_targets_hit_paper_mix() {
        let manifest = full_manifest();
        let targets = SamplerTargets::default();
        let mut sampler = BalancedSampler::new(&manifest, &targets, Rng::new(42)).unwrap();
        let n = 1_000_000usize;
        let mut diag_counts = [0u64; 5];
        let mut mag_counts = [0u64; 4];
        for _ in 0..n {
            let rec = &manifest.records[sampler.next_index()];
            diag_counts[rec.diagnosis.index()] += 1;
            mag_counts[crate::slide::magnification_index(rec.magnification).unwrap()] += 1;
        }
        for (i, &c) in diag_counts.iter().enumerate() {
            let f = c as f64 / n as f64;
            assert!(
                (f - targets.diagnosis_weights[i]).abs() <= 0.005,
                "diagnosis {i}: {f} vs {}",
                targets.diagnosis_weights[i]
            );
        }
        for (i, &c) in mag_counts.iter().enumerate() {
            let f = c as f64 / n as f64;
            assert!((f - targets.magnification_weights[i]).abs() <= 0.005);
        }
        let (_, p) = chi2_gof(&diag_counts, &targets.diagnosis_weights).unwrap();
        assert!(p > 0.01, "diagnosis chi2 p = {p}");
        let (_, p) = chi2_gof(&mag_counts, &targets.magnification_weights).unwrap();
        assert!(p > 0.01, "magnification chi2 p = {p}");
    }

    #[test]
    fn single_stratum_gets_everything() {
        let mut records = Vec::new();
        for &mag in &MAGNIFICATIONS {
            records.push(mk_record("only", mag, Diagnosis::Precursor, "t"));
        }
        let manifest = Manifest { records, seed: 0 };
        let targets = SamplerTargets {
            diagnosis_weights: [0.0, 1.0, 0.0, 0.0, 0.0],
            ..SamplerTargets::default()
        };
        let mut sampler = BalancedSampler::new(&manifest, &targets, Rng::new(1)).unwrap();
        for _ in 0..1000 {
            let rec = &manifest.records[sampler.next_index()];
            assert_eq!(rec.diagnosis, Diagnosis::Precursor);
        }
    }

    #[test]
    fn empty_positive_stratum_is_config_error() {
        let manifest = Manifest {
            records: vec![mk_record("s", 20, Diagnosis::Cancer, "t")],
            seed: 0,
        };
        let err = match BalancedSampler::new(&manifest, &SamplerTargets::default(), Rng::new(1)) {
            Err(e) => e,
            Ok(_) => panic!("expected config error"),
        };
        match err {
            CoreError::Config(msg) => assert!(msg.contains("precursor"), "{msg}"),
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn no40x_slides_drawn_more_often() {
        let mut records = Vec::new();
        for &mag in &MAGNIFICATIONS {
            records.push(mk_record("with40", mag, Diagnosis::Cancer, "t"));
        }
        for &mag in &MAGNIFICATIONS[..3] {
            records.push(mk_record("no40", mag, Diagnosis::Cancer, "t"));
        }
        let manifest = Manifest { records, seed: 0 };
        let targets = SamplerTargets {
            diagnosis_weights: [1.0, 0.0, 0.0, 0.0, 0.0],
            ..SamplerTargets::default()
        };
        let mut sampler = BalancedSampler::new(&manifest, &targets, Rng::new(9)).unwrap();
        let mut no40 = 0usize;
        let n = 500_000;
        for _ in 0..n {
            let rec = &manifest.records[sampler.next_index()];
            if rec.slide_id == "no40" {
                no40 += 1;
            }
        }
        let ratio = no40 as f64 / (n - no40) as f64;
        assert!((ratio - 1.5).abs() < 0.03, "boost ratio {ratio}");
    }

    #[test]
    fn tissue_flattening_caps_dominant_tissue() {
        let mut records = Vec::new();
        // tissue "big" has 40 slides, "rare1".."rare4" one slide each
        for s in 0..40 {
            records.push(mk_record(&format!("big{s}"), 20, Diagnosis::Cancer, "big"));
        }
        for t in 0..4 {
            records.push(mk_record(&format!("rare{t}"), 20, Diagnosis::Cancer, &format!("rare{t}")));
        }
        let manifest = Manifest { records, seed: 0 };
        let targets = SamplerTargets {
            diagnosis_weights: [1.0, 0.0, 0.0, 0.0, 0.0],
            tissue_flattening: true,
            ..SamplerTargets::default()
        };
        let mut sampler = BalancedSampler::new(&manifest, &targets, Rng::new(4)).unwrap();
        let mut big = 0usize;
        let n = 200_000;
        for _ in 0..n {
            let rec = &manifest.records[sampler.next_index()];
            if rec.tissue == "big" {
                big += 1;
            }
        }
        let f = big as f64 / n as f64;
        // 5 tissues: dominant capped at 2/5, excess spread over the rare four
        assert!((f - 0.4).abs() < 0.01, "dominant tissue frequency {f}");
    }

    #[test]
    fn sampler_fork_streams_differ_deterministically() {
        let manifest = full_manifest();
        let sampler = BalancedSampler::new(&manifest, &SamplerTargets::default(), Rng::new(5)).unwrap();
        let mut a = sampler.fork(0);
        let mut b = sampler.fork(1);
        let mut a2 = sampler.fork(0);
        let xs: Vec<usize> = (0..32).map(|_| a.next_index()).collect();
        let ys: Vec<usize> = (0..32).map(|_| b.next_index()).collect();
        let xs2: Vec<usize> = (0..32).map(|_| a2.next_index()).collect();
        assert_eq!(xs, xs2);
        assert_ne!(xs, ys);
    }
}
