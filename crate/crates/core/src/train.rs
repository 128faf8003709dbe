use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::augment::{make_views, EctConfig, PhotometricPolicy};
use crate::error::{CoreError, Result};
use crate::objective::{
    block_mask, dino_loss, head_backward, head_forward, ibot_loss, regularizer_loss, sinkhorn_center,
    total_loss, build_head_layout, init_head_params, HeadConfig, HeadLayout,
    RegularizerConfig,
};
use crate::optim::{
    clip_grad_norm, cosine_schedule, ema_update, lr_scale, step_entries, EmaSchedule, OptState,
    OptimConfig, OptimRule,
};
use crate::raster::{bilinear_resize, Raster};
use crate::rng::Rng;
use crate::sampler::{BalancedSampler, Manifest, SamplerTargets};
use crate::stats::centered_singular_values;
use crate::vit::{backward, build_layout, forward, init_params, ForwardOpts, Layout, MlpKind, ModelConfig};

/// Teacher temperature schedule: linear warmup then hold (the ablation
/// recipe) or a constant (the large-model recipe).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TeacherTempMode {
    Warmup { from: f64, to: f64, steps: u64 },
    Constant(f64),
}

/// Distillation temperatures: student fixed, teacher per [`TeacherTempMode`].
#[derive(Debug, Clone, Copy)]
pub struct TemperatureSchedule {
    pub student: f64,
    pub teacher: TeacherTempMode,
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        let check = |t: f64| -> Result<()> {
            if !(t > 0.0 && t <= 1.0) {
                return Err(CoreError::config(format!("temperature {t} outside (0, 1]")));
            }
            Ok(())
        };
        check(self.student)?;
        match self.teacher {
            TeacherTempMode::Warmup { from, to, .. } => {
                check(from)?;
                check(to)
            }
            TeacherTempMode::Constant(t) => check(t),
        }
    }
}

/// Teacher temperature at step `t`.
pub fn teacher_temp(t: u64, mode: &TeacherTempMode) -> f64 {
    match *mode {
        TeacherTempMode::Constant(v) => v,
        TeacherTempMode::Warmup { from, to, steps } => {
            if steps == 0 || t >= steps {
                to
            } else {
                from + (to - from) * t as f64 / steps as f64
            }
        }
    }
}

/// Full pretraining configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub head: HeadConfig,
    pub ect: EctConfig,
    pub policy: PhotometricPolicy,
    pub targets: SamplerTargets,
    pub optim: OptimConfig,
    pub ema: EmaSchedule,
    pub temps: TemperatureSchedule,
    pub regularizer: RegularizerConfig,
    /// Budget in tiles; steps = total_tiles / batch_size.
    pub total_tiles: u64,
    pub batch_size: usize,
    pub stochastic_depth: f64,
    pub mask_ratio: f64,
    pub sinkhorn_iters: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub eff_rank_every: u64,
    /// Student EMA copy momentum used in distillation mode.
    pub distill_ema_momentum: f64,
}

impl TrainConfig {
    pub fn steps(&self) -> u64 {
        self.total_tiles / self.batch_size as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.head.validate()?;
        self.ect.validate()?;
        self.policy.validate()?;
        self.targets.validate()?;
        self.optim.validate()?;
        self.temps.validate()?;
        self.regularizer.validate()?;
        if self.batch_size == 0 || self.steps() == 0 {
            return Err(CoreError::config("training budget must cover at least one step"));
        }
        if self.ect.global_size != self.model.image_size {
            return Err(CoreError::config(format!(
                "global view size {} must equal the model image size {}",
                self.ect.global_size, self.model.image_size
            )));
        }
        if self.ect.local_size % self.model.patch_size != 0 {
            return Err(CoreError::config("local view size must be a multiple of the patch size"));
        }
        if !(0.0..1.0).contains(&self.stochastic_depth) {
            return Err(CoreError::config("stochastic depth rate must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(CoreError::config("mask ratio must be in [0, 1]"));
        }
        Ok(())
    }

    /// Runnable desk-scale default.
    pub fn toy() -> Self {
        TrainConfig {
            preset: "toy".into(),
            model: ModelConfig {
                image_size: 32,
                patch_size: 8,
                embed_dim: 128,
                depth: 4,
                heads: 4,
                mlp_ratio: 2.0,
                mlp_activation: MlpKind::Gelu,
                registers: 4,
                qk_norm: true,
                dual_patchnorm: true,
            },
            head: HeadConfig::toy(),
            ect: EctConfig {
                source_size: 56,
                global_size: 32,
                local_size: 16,
                scale_range: (0.9, 1.1),
                aspect_range: (0.95, 1.05),
                n_global: 2,
                n_local: 4,
            },
            policy: PhotometricPolicy { solarize_enabled: false, ..PhotometricPolicy::default() },
            targets: SamplerTargets::default(),
            optim: OptimConfig {
                rule: OptimRule::AdamW,
                base_lr: 4e-3,
                batch_size: 64,
                ..OptimConfig::default()
            },
            ema: EmaSchedule::default(),
            temps: TemperatureSchedule {
                student: 0.1,
                teacher: TeacherTempMode::Warmup { from: 0.04, to: 0.07, steps: 200 },
            },
            regularizer: RegularizerConfig::default(),
            total_tiles: 128_000,
            batch_size: 64,
            stochastic_depth: 0.0,
            mask_ratio: 0.3,
            sinkhorn_iters: 3,
            seed: 0,
            checkpoint_every: 0,
            eff_rank_every: 50,
            distill_ema_momentum: 0.994,
        }
    }

    /// The small-scale ablation recipe (ViT-B/16, constructible).
    pub fn ablation() -> Self {
        TrainConfig {
            preset: "ablation".into(),
            model: ModelConfig {
                image_size: 224,
                patch_size: 16,
                embed_dim: 768,
                depth: 12,
                heads: 12,
                mlp_ratio: 4.0,
                mlp_activation: MlpKind::Gelu,
                registers: 0,
                qk_norm: false,
                dual_patchnorm: false,
            },
            head: HeadConfig::default(),
            ect: EctConfig { local_size: 96, ..EctConfig::default() },
            policy: PhotometricPolicy::default(),
            targets: SamplerTargets::default(),
            optim: OptimConfig { base_lr: 2e-4, batch_size: 1024, ..OptimConfig::default() },
            ema: EmaSchedule::default(),
            temps: TemperatureSchedule {
                student: 0.1,
                teacher: TeacherTempMode::Warmup { from: 0.04, to: 0.07, steps: 12_000 },
            },
            regularizer: RegularizerConfig::default(),
            total_tiles: 115_000_000,
            batch_size: 1024,
            stochastic_depth: 0.4,
            mask_ratio: 0.3,
            sinkhorn_iters: 3,
            seed: 0,
            checkpoint_every: 0,
            eff_rank_every: 100,
            distill_ema_momentum: 0.994,
        }
    }

    /// ViT-H/14 recipe (constructible, not trainable at desk scale).
    pub fn virchow2() -> Self {
        TrainConfig {
            preset: "virchow2".into(),
            model: ModelConfig::virchow2(),
            head: HeadConfig::default(),
            ect: EctConfig::default(),
            policy: PhotometricPolicy::default(),
            targets: SamplerTargets::default(),
            optim: OptimConfig { base_lr: 2e-4, batch_size: 4096, ..OptimConfig::default() },
            ema: EmaSchedule::default(),
            temps: TemperatureSchedule {
                student: 0.1,
                teacher: TeacherTempMode::Warmup { from: 0.04, to: 0.07, steps: 12_000 },
            },
            regularizer: RegularizerConfig::default(),
            total_tiles: 2_000_000_000,
            batch_size: 4096,
            stochastic_depth: 0.4,
            mask_ratio: 0.3,
            sinkhorn_iters: 3,
            seed: 0,
            checkpoint_every: 0,
            eff_rank_every: 100,
            distill_ema_momentum: 0.994,
        }
    }

    /// ViT-G/14 recipe (constructible).
    pub fn virchow2g() -> Self {
        TrainConfig {
            preset: "virchow2g".into(),
            model: ModelConfig::virchow2g(),
            head: HeadConfig::default(),
            ect: EctConfig::default(),
            policy: PhotometricPolicy { solarize_enabled: false, ..PhotometricPolicy::default() },
            targets: SamplerTargets::default(),
            optim: OptimConfig {
                rule: OptimRule::StableAdamW,
                beta2: 0.95,
                eps: 1e-6,
                base_lr: 1e-4,
                batch_size: 3072,
                ..OptimConfig::default()
            },
            ema: EmaSchedule::default(),
            temps: TemperatureSchedule { student: 0.1, teacher: TeacherTempMode::Constant(0.04) },
            regularizer: RegularizerConfig::default(),
            total_tiles: 2_000_000_000,
            batch_size: 3072,
            stochastic_depth: 0.4,
            mask_ratio: 0.3,
            sinkhorn_iters: 3,
            seed: 0,
            checkpoint_every: 0,
            eff_rank_every: 100,
            distill_ema_momentum: 0.994,
        }
    }

    /// ViT-S/14 distillation recipe (constructible).
    pub fn virchow2g_mini() -> Self {
        TrainConfig {
            preset: "virchow2g_mini".into(),
            model: ModelConfig::virchow2g_mini(),
            head: HeadConfig::default(),
            ect: EctConfig::default(),
            policy: PhotometricPolicy { solarize_enabled: false, ..PhotometricPolicy::default() },
            targets: SamplerTargets::default(),
            optim: OptimConfig {
                rule: OptimRule::StableAdamW,
                beta2: 0.98,
                eps: 1e-6,
                base_lr: 2e-4,
                batch_size: 2048,
                ..OptimConfig::default()
            },
            ema: EmaSchedule::default(),
            temps: TemperatureSchedule { student: 0.1, teacher: TeacherTempMode::Constant(0.04) },
            regularizer: RegularizerConfig::default(),
            total_tiles: 1_000_000_000,
            batch_size: 2048,
            stochastic_depth: 0.0,
            mask_ratio: 0.3,
            sinkhorn_iters: 3,
            seed: 0,
            checkpoint_every: 0,
            eff_rank_every: 100,
            distill_ema_momentum: 0.994,
        }
    }

    pub fn preset_by_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "ablation" => Ok(Self::ablation()),
            "virchow2" => Ok(Self::virchow2()),
            "virchow2g" => Ok(Self::virchow2g()),
            "virchow2g_mini" => Ok(Self::virchow2g_mini()),
            _ => Err(CoreError::config(format!("unknown preset '{name}'"))),
        }
    }
}

/// One metrics row per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub l_dino: f64,
    pub l_ibot: f64,
    pub l_reg: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub eff_rank: f64,
    pub tau_t: f64,
    pub lr: f64,
    pub ema_m: f64,
}

/// Append-only per-step metrics with a loss-spike detector: a step is
/// flagged when its total exceeds the trailing-window mean by 5 sigma.
#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
    pub spike_flags: Vec<u64>,
    window: Vec<f64>,
}

pub const SPIKE_WINDOW: usize = 50;

impl RunMetrics {
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(CoreError::contract("metrics steps must be strictly increasing"));
            }
        }
        if self.window.len() == SPIKE_WINDOW {
            let n = self.window.len() as f64;
            let mean = self.window.iter().sum::<f64>() / n;
            let var = self.window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sigma = libm::sqrt(var);
            if sigma > 0.0 && row.total > mean + 5.0 * sigma {
                self.spike_flags.push(row.step);
            }
            self.window.remove(0);
        }
        self.window.push(row.total);
        self.rows.push(row);
        Ok(())
    }
}

/// Exponentiated Shannon entropy of the L1-normalized singular values of
/// the centered embedding matrix. A zero matrix reports rank 1.
pub fn effective_rank(e: &[f64], n: usize, d: usize) -> Result<f64> {
    if n < 2 || e.len() != n * d {
        return Err(CoreError::parameter("effective_rank needs an n x d matrix with n >= 2"));
    }
    let sv = centered_singular_values(e, n, d);
    let total: f64 = sv.iter().sum();
    if total <= 0.0 {
        return Ok(1.0);
    }
    let mut h = 0.0;
    for &s in &sv {
        if s > 0.0 {
            let p = s / total;
            h -= p * libm::log(p);
        }
    }
    Ok(libm::exp(h))
}

/// Tile pixel access for training; index-aligned with the manifest records.
pub trait TileStore {
    fn len(&self) -> usize;
    fn tile(&self, idx: usize) -> Result<Raster>;
}

/// Everything in memory; the standard store at desk scale.
pub struct MemoryTileStore {
    pub tiles: Vec<Raster>,
}

impl TileStore for MemoryTileStore {
    fn len(&self) -> usize {
        self.tiles.len()
    }

    fn tile(&self, idx: usize) -> Result<Raster> {
        self.tiles
            .get(idx)
            .cloned()
            .ok_or_else(|| CoreError::parameter(format!("tile index {idx} out of range")))
    }
}

/// Pixel scaling to model range.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

pub fn normalize_pixels(img: &crate::raster::Image) -> Vec<f32> {
    img.data.iter().map(|&v| (v / 255.0 - PIXEL_MEAN * 255.0 / 255.0) / PIXEL_STD).collect()
}

/// One model bundle: backbone + both projection heads.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub backbone: Vec<f32>,
    pub dino_head: Vec<f32>,
    pub ibot_head: Vec<f32>,
}

/// Final product of a run: configs, student and teacher bundles, optimizer
/// state, and the step counter.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub preset: String,
    pub model_cfg: ModelConfig,
    pub head_cfg: HeadConfig,
    pub student: ModelBundle,
    pub teacher: ModelBundle,
    pub opt_backbone: OptState<f32>,
    pub opt_dino: OptState<f32>,
    pub opt_ibot: OptState<f32>,
    pub step: u64,
}

enum TeacherSide {
    Ema,
    Frozen { bundle: ModelBundle, cfg: ModelConfig, layout: Layout },
}

/// Student-teacher pretraining driver.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    layout: Layout,
    dino_layout: HeadLayout,
    ibot_layout: HeadLayout,
    student: ModelBundle,
    teacher: ModelBundle,
    teacher_side: TeacherSide,
    /// EMA copy of the student, emitted as the final model in distillation.
    student_ema: Option<ModelBundle>,
    opt_backbone: OptState<f32>,
    opt_dino: OptState<f32>,
    opt_ibot: OptState<f32>,
    sampler: BalancedSampler,
    store: &'a dyn TileStore,
    data_rng: Rng,
    mask_rng: Rng,
    drop_rng: Rng,
    pub metrics: RunMetrics,
    step: u64,
    last_eff_rank: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, manifest: &Manifest, store: &'a dyn TileStore, seed: u64) -> Result<Self> {
        let mut cfg = cfg;
        cfg.seed = seed;
        cfg.validate()?;
        if manifest.is_empty() {
            return Err(CoreError::config("manifest is empty"));
        }
        if store.len() != manifest.len() {
            return Err(CoreError::config("tile store and manifest sizes differ"));
        }
        let root = Rng::new(seed);
        let mut init_rng = root.fork(1);
        let layout = build_layout(&cfg.model);
        let backbone = init_params::<f32>(&cfg.model, &layout, &mut init_rng);
        let dino_layout = build_head_layout(cfg.model.embed_dim, &cfg.head);
        let ibot_layout = build_head_layout(cfg.model.embed_dim, &cfg.head);
        let dino_head = init_head_params::<f32>(&dino_layout, &mut init_rng);
        let ibot_head = init_head_params::<f32>(&ibot_layout, &mut init_rng);
        let student = ModelBundle { backbone, dino_head, ibot_head };
        let teacher = student.clone();
        let sampler = BalancedSampler::new(manifest, &cfg.targets, root.fork(2))?;
        let opt_backbone = OptState::new(layout.total);
        let opt_dino = OptState::new(dino_layout.total);
        let opt_ibot = OptState::new(ibot_layout.total);
        Ok(Trainer {
            cfg,
            layout,
            dino_layout,
            ibot_layout,
            student,
            teacher,
            teacher_side: TeacherSide::Ema,
            student_ema: None,
            opt_backbone,
            opt_dino,
            opt_ibot,
            sampler,
            store,
            data_rng: root.fork(3),
            mask_rng: root.fork(4),
            drop_rng: root.fork(5),
            metrics: RunMetrics::default(),
            step: 0,
            last_eff_rank: 1.0,
        })
    }

    /// Replace the EMA teacher with a frozen external teacher (distillation).
    /// The teacher keeps its own heads; the student maintains an EMA copy of
    /// itself that becomes the emitted model.
    pub fn with_frozen_teacher(mut self, teacher: &TrainedModel) -> Result<Self> {
        if teacher.model_cfg.patch_size != self.cfg.model.patch_size {
            return Err(CoreError::config(format!(
                "teacher patch size {} != student patch size {}",
                teacher.model_cfg.patch_size, self.cfg.model.patch_size
            )));
        }
        if teacher.model_cfg.image_size != self.cfg.model.image_size {
            return Err(CoreError::config("teacher and student must share the view sizes"));
        }
        if teacher.head_cfg.prototypes != self.cfg.head.prototypes {
            return Err(CoreError::config("teacher and student must share the prototype count"));
        }
        let layout = build_layout(&teacher.model_cfg);
        self.teacher_side = TeacherSide::Frozen {
            bundle: teacher.teacher.clone(),
            cfg: teacher.model_cfg.clone(),
            layout,
        };
        self.student_ema = Some(self.student.clone());
        Ok(self)
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.steps()
    }

    fn views_to_batch(imgs: &[crate::raster::Image]) -> Vec<f32> {
        let mut out = Vec::with_capacity(imgs.len() * imgs[0].data.len());
        for img in imgs {
            for &v in &img.data {
                out.push((v / 255.0 - PIXEL_MEAN) / PIXEL_STD);
            }
        }
        out
    }

    /// Run one optimizer step; returns the metrics row.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let cfg = &self.cfg;
        let b = cfg.batch_size;
        let n_g = cfg.ect.n_global;
        let n_l = cfg.ect.n_local;
        let d = cfg.model.embed_dim;
        let k = cfg.head.prototypes;
        let g_size = cfg.ect.global_size;
        let l_size = cfg.ect.local_size;
        let g_grid = g_size / cfg.model.patch_size;
        let steps_total = cfg.steps();

        // ---- assemble the batch: sample tiles, build multi-crop views
        let mut globals: Vec<Vec<crate::raster::Image>> = vec![Vec::with_capacity(b); n_g];
        let mut locals: Vec<Vec<crate::raster::Image>> = vec![Vec::with_capacity(b); n_l];
        for i in 0..b {
            let idx = self.sampler.next_index();
            let tile = self.store.tile(idx)?;
            let img = tile.to_image();
            let src = if img.h == cfg.ect.source_size && img.w == cfg.ect.source_size {
                img
            } else {
                bilinear_resize(&img, cfg.ect.source_size, cfg.ect.source_size)?
            };
            let view_rng = self.data_rng.fork(self.step * b as u64 + i as u64);
            let views = make_views(&src, &cfg.policy, &cfg.ect, &view_rng)?;
            for (v, (_, img)) in views.global_views.into_iter().enumerate() {
                globals[v].push(img);
            }
            for (v, (_, img)) in views.local_views.into_iter().enumerate() {
                locals[v].push(img);
            }
        }
        // view-major batches
        let global_imgs: Vec<crate::raster::Image> =
            globals.into_iter().flatten().collect();
        let local_imgs: Vec<crate::raster::Image> = locals.into_iter().flatten().collect();
        let global_x = Self::views_to_batch(&global_imgs);
        let local_x = if n_l > 0 { Self::views_to_batch(&local_imgs) } else { Vec::new() };
        let gb = n_g * b;
        let lb = n_l * b;

        // iBOT masks per (global view, sample)
        let masks: Vec<Vec<usize>> = (0..gb)
            .map(|i| {
                let mut r = self.mask_rng.fork(self.step * gb as u64 + i as u64);
                block_mask(g_grid, cfg.mask_ratio, &mut r)
            })
            .collect();
        // stochastic depth decisions per (batch row, block)
        let drop_keep: Option<Vec<bool>> = if cfg.stochastic_depth > 0.0 {
            let mut r = self.drop_rng.fork(self.step);
            Some(
                (0..(gb + lb) * cfg.model.depth)
                    .map(|_| !r.coin(cfg.stochastic_depth))
                    .collect(),
            )
        } else {
            None
        };

        // ---- forwards
        let g_opts = ForwardOpts {
            masks: Some(&masks),
            drop_keep: drop_keep.as_ref().map(|k| (&k[..gb * cfg.model.depth], cfg.stochastic_depth)),
        };
        let (sg_tokens, sg_trace) = forward(
            &cfg.model,
            &self.layout,
            &self.student.backbone,
            &global_x,
            gb,
            g_size,
            &g_opts,
            true,
        )?;
        let sg_trace = sg_trace.unwrap();
        let (sl_tokens, sl_trace) = if lb > 0 {
            let l_opts = ForwardOpts {
                masks: None,
                drop_keep: drop_keep
                    .as_ref()
                    .map(|kk| (&kk[gb * cfg.model.depth..], cfg.stochastic_depth)),
            };
            let (t, tr) = forward(
                &cfg.model,
                &self.layout,
                &self.student.backbone,
                &local_x,
                lb,
                l_size,
                &l_opts,
                true,
            )?;
            (Some(t), tr)
        } else {
            (None, None)
        };

        let (t_cfg, t_layout, t_bundle): (&ModelConfig, &Layout, &ModelBundle) = match &self.teacher_side {
            TeacherSide::Ema => (&cfg.model, &self.layout, &self.teacher),
            TeacherSide::Frozen { bundle, cfg: tc, layout } => (tc, layout, bundle),
        };
        let (tg_tokens, _) = forward(
            t_cfg,
            t_layout,
            &t_bundle.backbone,
            &global_x,
            gb,
            g_size,
            &ForwardOpts::default(),
            false,
        )?;

        // ---- teacher targets
        let tau_t = teacher_temp(self.step, &cfg.temps.teacher);
        let t_dino_layout = match &self.teacher_side {
            TeacherSide::Ema => &self.dino_layout,
            TeacherSide::Frozen { .. } => &self.dino_layout, // same dims enforced
        };
        let mut t_cls = Vec::with_capacity(gb * t_cfg.embed_dim);
        for i in 0..gb {
            t_cls.extend_from_slice(tg_tokens.cls(i));
        }
        let (t_dino_logits, _) = head_forward(t_dino_layout, &t_bundle.dino_head, &t_cls, gb);
        let scaled: Vec<f32> = t_dino_logits.iter().map(|&v| v / tau_t as f32).collect();
        let t_probs_all = sinkhorn_center(&scaled, gb, k, cfg.sinkhorn_iters)?;
        let teacher_probs: Vec<Vec<f32>> =
            (0..n_g).map(|v| t_probs_all[v * b * k..(v + 1) * b * k].to_vec()).collect();

        // teacher patch targets at the masked positions
        let masked_per: Vec<usize> = masks.iter().map(|m| m.len()).collect();
        let m_total: usize = masked_per.iter().sum();
        let (t_patch_probs, s_patch_rows) = if m_total > 0 {
            let mut t_rows = Vec::with_capacity(m_total * t_cfg.embed_dim);
            let mut s_rows = Vec::with_capacity(m_total * d);
            for i in 0..gb {
                let tp = tg_tokens.patch_rows(i);
                let sp = sg_tokens.patch_rows(i);
                for &p in &masks[i] {
                    t_rows.extend_from_slice(&tp[p * t_cfg.embed_dim..(p + 1) * t_cfg.embed_dim]);
                    s_rows.extend_from_slice(&sp[p * d..(p + 1) * d]);
                }
            }
            let (t_logits, _) = head_forward(t_dino_layout_for_ibot(self), &t_bundle.ibot_head, &t_rows, m_total);
            let scaled: Vec<f32> = t_logits.iter().map(|&v| v / tau_t as f32).collect();
            (sinkhorn_center(&scaled, m_total, k, cfg.sinkhorn_iters)?, s_rows)
        } else {
            (Vec::new(), Vec::new())
        };

        // ---- student heads
        let mut s_cls = Vec::with_capacity((gb + lb) * d);
        for i in 0..gb {
            s_cls.extend_from_slice(sg_tokens.cls(i));
        }
        if let Some(sl) = &sl_tokens {
            for i in 0..lb {
                s_cls.extend_from_slice(sl.cls(i));
            }
        }
        let (s_dino_logits, s_dino_trace) =
            head_forward(&self.dino_layout, &self.student.dino_head, &s_cls, gb + lb);
        let student_views: Vec<Vec<f32>> = (0..n_g + n_l)
            .map(|v| s_dino_logits[v * b * k..(v + 1) * b * k].to_vec())
            .collect();

        let (s_ibot_logits, s_ibot_trace) = if m_total > 0 {
            let (lg, tr) = head_forward(&self.ibot_layout, &self.student.ibot_head, &s_patch_rows, m_total);
            (lg, Some(tr))
        } else {
            (Vec::new(), None)
        };

        // ---- losses
        let dino = dino_loss(&student_views, &teacher_probs, b, k, cfg.temps.student)?;
        let (l_ibot, d_ibot_logits) =
            ibot_loss(&s_ibot_logits, &t_patch_probs, m_total, k, cfg.temps.student)?;

        // regularizer on the student's global-view class tokens
        let mut z = vec![0.0f32; gb * d];
        let mut z_norms = vec![0.0f32; gb];
        for i in 0..gb {
            let c = sg_tokens.cls(i);
            let mut sq = 0.0f32;
            for &v in c {
                sq += v * v;
            }
            let norm = sq.sqrt().max(1e-12);
            z_norms[i] = norm;
            for (jj, &v) in c.iter().enumerate() {
                z[i * d + jj] = v / norm;
            }
        }
        let (l_reg, reg_grad) = regularizer_loss(&z, gb, d, &cfg.regularizer)?;
        let parts = total_loss(dino.loss, l_ibot, l_reg, cfg.regularizer.weight, b)?;
        if !parts.total.is_finite() {
            return Err(CoreError::numeric(format!("non-finite loss at step {}", self.step)));
        }

        // ---- backward
        let mut g_backbone = vec![0.0f32; self.layout.total];
        let mut g_dino = vec![0.0f32; self.dino_layout.total];
        let mut g_ibot = vec![0.0f32; self.ibot_layout.total];

        // student dino head backward over all views at once
        let mut d_logits_all = vec![0.0f32; (gb + lb) * k];
        for (v, dv) in dino.d_student.iter().enumerate() {
            d_logits_all[v * b * k..(v + 1) * b * k].copy_from_slice(dv);
        }
        let d_cls_all = head_backward(&self.dino_layout, &self.student.dino_head, &s_dino_trace, &d_logits_all, &mut g_dino);

        // token gradients for the global batch
        let t_tok_g = sg_tokens.tokens_per;
        let mut d_tokens_g = vec![0.0f32; gb * t_tok_g * d];
        for i in 0..gb {
            let base = i * t_tok_g * d;
            for j in 0..d {
                d_tokens_g[base + j] = d_cls_all[i * d + j];
            }
            // regularizer gradient through the L2 normalization: the tangent
            // projection is already applied, so dividing by the norm finishes
            // the chain rule
            let w = (cfg.regularizer.weight / z_norms[i] as f64) as f32;
            for j in 0..d {
                d_tokens_g[base + j] += w * reg_grad[i * d + j];
            }
        }
        if let Some(tr) = s_ibot_trace.as_ref() {
            let d_patch = head_backward(&self.ibot_layout, &self.student.ibot_head, tr, &d_ibot_logits, &mut g_ibot);
            let mut row = 0usize;
            for i in 0..gb {
                let base = i * t_tok_g * d;
                for &p in &masks[i] {
                    let dst = base + (1 + cfg.model.registers + p) * d;
                    for j in 0..d {
                        d_tokens_g[dst + j] += d_patch[row * d + j];
                    }
                    row += 1;
                }
            }
        }
        backward(&cfg.model, &self.layout, &self.student.backbone, &sg_trace, &d_tokens_g, &mut g_backbone);

        if let (Some(sl), Some(tr)) = (&sl_tokens, &sl_trace) {
            let t_tok_l = sl.tokens_per;
            let mut d_tokens_l = vec![0.0f32; lb * t_tok_l * d];
            for i in 0..lb {
                let base = i * t_tok_l * d;
                for j in 0..d {
                    d_tokens_l[base + j] = d_cls_all[(gb + i) * d + j];
                }
            }
            backward(&cfg.model, &self.layout, &self.student.backbone, tr, &d_tokens_l, &mut g_backbone);
        }

        // ---- clip, step, EMA
        let grad_norm = clip_grad_norm(
            &mut [&mut g_backbone[..], &mut g_dino[..], &mut g_ibot[..]],
            cfg.optim.grad_clip_norm,
        );
        let warmup = (cfg.optim.warmup_frac * steps_total as f64) as u64;
        let peak_lr = lr_scale(cfg.optim.base_lr, cfg.batch_size);
        let lr = cosine_schedule(self.step, steps_total, peak_lr, 0.0, warmup);
        let wd = cosine_schedule(
            self.step,
            steps_total,
            cfg.optim.weight_decay_range.0,
            cfg.optim.weight_decay_range.1,
            0,
        );
        step_entries(&self.layout.entries, &mut self.student.backbone, &g_backbone, &mut self.opt_backbone, lr, wd, &cfg.optim)?;
        step_entries(&self.dino_layout.entries, &mut self.student.dino_head, &g_dino, &mut self.opt_dino, lr, wd, &cfg.optim)?;
        step_entries(&self.ibot_layout.entries, &mut self.student.ibot_head, &g_ibot, &mut self.opt_ibot, lr, wd, &cfg.optim)?;

        let ema_m = match &self.teacher_side {
            TeacherSide::Ema => {
                let m = cfg.ema.momentum(self.step, steps_total);
                ema_update(&mut self.teacher.backbone, &self.student.backbone, m)?;
                ema_update(&mut self.teacher.dino_head, &self.student.dino_head, m)?;
                ema_update(&mut self.teacher.ibot_head, &self.student.ibot_head, m)?;
                m
            }
            TeacherSide::Frozen { .. } => {
                let m = cfg.distill_ema_momentum;
                let ema = self.student_ema.as_mut().expect("distillation keeps a student EMA copy");
                ema_update(&mut ema.backbone, &self.student.backbone, m)?;
                ema_update(&mut ema.dino_head, &self.student.dino_head, m)?;
                ema_update(&mut ema.ibot_head, &self.student.ibot_head, m)?;
                m
            }
        };

        // ---- metrics
        if cfg.eff_rank_every > 0 && self.step % cfg.eff_rank_every == 0 {
            let n = b.min(gb);
            let mut e = vec![0.0f64; n * t_cfg.embed_dim];
            for i in 0..n {
                for (j, &v) in tg_tokens.cls(i).iter().enumerate() {
                    e[i * t_cfg.embed_dim + j] = v as f64;
                }
            }
            self.last_eff_rank = effective_rank(&e, n, t_cfg.embed_dim)?;
        }
        let row = MetricsRow {
            step: self.step,
            l_dino: parts.l_dino,
            l_ibot: parts.l_ibot,
            l_reg: parts.l_reg,
            total: parts.total,
            grad_norm,
            eff_rank: self.last_eff_rank,
            tau_t,
            lr,
            ema_m,
        };
        self.metrics.push(row)?;
        self.step += 1;
        Ok(row)
    }

    /// Run the full budget.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.cfg.steps() {
            self.step()?;
        }
        Ok(())
    }

    /// Snapshot the current model (for checkpoints or the final artifact).
    /// In distillation mode the emitted "teacher" is the student's EMA copy.
    pub fn snapshot(&self) -> TrainedModel {
        let teacher = match &self.teacher_side {
            TeacherSide::Ema => self.teacher.clone(),
            TeacherSide::Frozen { .. } => {
                self.student_ema.clone().expect("distillation keeps a student EMA copy")
            }
        };
        TrainedModel {
            preset: self.cfg.preset.clone(),
            model_cfg: self.cfg.model.clone(),
            head_cfg: self.cfg.head.clone(),
            student: self.student.clone(),
            teacher,
            opt_backbone: self.opt_backbone.clone(),
            opt_dino: self.opt_dino.clone(),
            opt_ibot: self.opt_ibot.clone(),
            step: self.step,
        }
    }

    pub fn teacher_bundle(&self) -> &ModelBundle {
        &self.teacher
    }

    pub fn student_bundle(&self) -> &ModelBundle {
        &self.student
    }
}

// The frozen teacher's ibot head layout has the teacher's input dimension.
fn t_dino_layout_for_ibot<'b>(tr: &'b Trainer<'_>) -> &'b HeadLayout {
    match &tr.teacher_side {
        TeacherSide::Ema => &tr.ibot_layout,
        TeacherSide::Frozen { .. } => &tr.ibot_layout,
    }
}

/// Train from scratch on a manifest; returns the final model and metrics.
pub fn train(
    cfg: TrainConfig,
    manifest: &Manifest,
    store: &dyn TileStore,
    seed: u64,
) -> Result<(TrainedModel, RunMetrics)> {
    let mut trainer = Trainer::new(cfg, manifest, store, seed)?;
    trainer.run()?;
    let model = trainer.snapshot();
    Ok((model, trainer.metrics))
}

/// Distill a frozen teacher into a (usually smaller) student. The emitted
/// model is the student's EMA copy.
pub fn distill(
    teacher: &TrainedModel,
    student_cfg: TrainConfig,
    manifest: &Manifest,
    store: &dyn TileStore,
    seed: u64,
) -> Result<(TrainedModel, RunMetrics)> {
    let mut trainer = Trainer::new(student_cfg, manifest, store, seed)?.with_frozen_teacher(teacher)?;
    trainer.run()?;
    let model = trainer.snapshot();
    Ok((model, trainer.metrics))
}

/// Embed tiles with a frozen backbone at `img_size` (deterministic resize,
/// no augmentation). Returns one token batch over all tiles.
pub fn embed_tiles(
    cfg: &ModelConfig,
    layout: &Layout,
    params: &[f32],
    tiles: &[Raster],
    img_size: usize,
) -> Result<crate::vit::TokenBatch<f32>> {
    if tiles.is_empty() {
        return Err(CoreError::parameter("no tiles to embed"));
    }
    let mut x = Vec::with_capacity(tiles.len() * img_size * img_size * 3);
    for t in tiles {
        let img = t.to_image();
        let img = if img.h == img_size && img.w == img_size {
            img
        } else {
            bilinear_resize(&img, img_size, img_size)?
        };
        for &v in &img.data {
            x.push((v / 255.0 - PIXEL_MEAN) / PIXEL_STD);
        }
    }
    let (tokens, _) = forward(cfg, layout, params, &x, tiles.len(), img_size, &ForwardOpts::default(), false)?;
    Ok(tokens)
}
