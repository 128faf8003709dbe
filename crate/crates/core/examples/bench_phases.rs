use pathssl_core::augment::*;
use pathssl_core::rng::Rng;
use pathssl_core::train::*;
use pathssl_core::vit::*;
use std::time::Instant;

fn main() {
    let cfg = TrainConfig::toy();
    let m = &cfg.model;
    let layout = build_layout(m);
    let mut rng = Rng::new(1);
    let params: Vec<f32> = init_params(m, &layout, &mut rng);
    let gb = 128;
    let lb = 256;
    let gx: Vec<f32> = (0..gb * 32 * 32 * 3).map(|_| rng.normal() as f32).collect();
    let lx: Vec<f32> = (0..lb * 16 * 16 * 3).map(|_| rng.normal() as f32).collect();

    let t0 = Instant::now();
    let (tg, trg) = forward(m, &layout, &params, &gx, gb, 32, &ForwardOpts::default(), true).unwrap();
    eprintln!("global fwd+trace: {:.0}ms", t0.elapsed().as_secs_f64() * 1e3);

    let t0 = Instant::now();
    let (_tl, trl) = forward(m, &layout, &params, &lx, lb, 16, &ForwardOpts::default(), true).unwrap();
    eprintln!("local fwd+trace: {:.0}ms", t0.elapsed().as_secs_f64() * 1e3);

    let t0 = Instant::now();
    let (_t2, _) = forward(m, &layout, &params, &gx, gb, 32, &ForwardOpts::default(), false).unwrap();
    eprintln!("teacher fwd: {:.0}ms", t0.elapsed().as_secs_f64() * 1e3);

    let d_tok: Vec<f32> = (0..tg.data.len()).map(|_| 0.001).collect();
    let mut grads = vec![0.0f32; layout.total];
    let t0 = Instant::now();
    backward(m, &layout, &params, &trg.unwrap(), &d_tok, &mut grads);
    eprintln!("global bwd: {:.0}ms", t0.elapsed().as_secs_f64() * 1e3);

    let tl2 = forward(m, &layout, &params, &lx, lb, 16, &ForwardOpts::default(), false).unwrap().0;
    let d_tok_l: Vec<f32> = (0..tl2.data.len()).map(|_| 0.001).collect();
    let t0 = Instant::now();
    backward(m, &layout, &params, &trl.unwrap(), &d_tok_l, &mut grads);
    eprintln!("local bwd: {:.0}ms", t0.elapsed().as_secs_f64() * 1e3);

    // view building
    let tile = pathssl_core::raster::Raster::filled(224, 224, [230, 150, 200]);
    let t0 = Instant::now();
    for i in 0..64 {
        let img = tile.to_image();
        let src = pathssl_core::raster::bilinear_resize(&img, 56, 56).unwrap();
        let _ = make_views(&src, &cfg.policy, &cfg.ect, &Rng::new(i)).unwrap();
    }
    eprintln!("views for batch 64: {:.0}ms", t0.elapsed().as_secs_f64() * 1e3);

    // heads
    let hl = pathssl_core::objective::build_head_layout(128, &cfg.head);
    let hp: Vec<f32> = pathssl_core::objective::init_head_params(&hl, &mut rng);
    let cls: Vec<f32> = (0..384 * 128).map(|_| rng.normal() as f32).collect();
    let t0 = Instant::now();
    let (lg, tr) = pathssl_core::objective::head_forward(&hl, &hp, &cls, 384);
    let dl: Vec<f32> = (0..lg.len()).map(|_| 1e-4).collect();
    let mut hg = vec![0.0f32; hl.total];
    let _ = pathssl_core::objective::head_backward(&hl, &hp, &tr, &dl, &mut hg);
    eprintln!("dino head fwd+bwd (384 rows): {:.0}ms", t0.elapsed().as_secs_f64() * 1e3);

    let t0 = Instant::now();
    let scaled: Vec<f32> = lg.iter().map(|&v| v / 0.07).collect();
    let _ = pathssl_core::objective::sinkhorn_center(&scaled, 384, 1024, 3).unwrap();
    eprintln!("sinkhorn 384x1024: {:.0}ms", t0.elapsed().as_secs_f64() * 1e3);
}
