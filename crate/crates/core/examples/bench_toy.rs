// quick timing probe for the toy preset (not part of the repo tests)
use pathssl_core::train::*;
use pathssl_core::hsv::HsvRanges;
use pathssl_core::sampler::{Manifest, ManifestRecord};
use pathssl_core::slide::{gen_synthetic_slide, SlideSpec, DIAGNOSES};
use pathssl_core::tiles::tile_grid;
use std::time::Instant;

fn main() {
    let mut records = Vec::new();
    let mut tiles = Vec::new();
    for s in 0..8usize {
        let spec = SlideSpec { height: 448, width: 448, background_fraction: 0.0, ..SlideSpec::toy(DIAGNOSES[s % 5]) };
        let slide = gen_synthetic_slide(1000 + s as u64, &spec).unwrap();
        for rec in tile_grid(&slide, 224, 0.45, &HsvRanges::default()).unwrap() {
            records.push(ManifestRecord {
                path: String::new(),
                slide_id: rec.slide_id.clone(),
                patient_id: format!("p{s}"),
                magnification: rec.magnification,
                stain: rec.stain,
                tissue: rec.tissue_label.clone(),
                diagnosis: rec.diagnosis,
                coverage: rec.coverage,
            });
            tiles.push(rec.pixels);
        }
    }
    let manifest = Manifest { records, seed: 0 };
    let store = MemoryTileStore { tiles };
    let cfg = TrainConfig::toy();
    let mut tr = Trainer::new(cfg, &manifest, &store, 7).unwrap();
    let t0 = Instant::now();
    for _ in 0..20 {
        let row = tr.step().unwrap();
        if row.step % 10 == 0 { eprintln!("step {} total {:.4}", row.step, row.total); }
    }
    let dt = t0.elapsed().as_secs_f64();
    eprintln!("20 steps in {dt:.2}s -> {:.0}s for 2000 steps", dt / 20.0 * 2000.0);
}
