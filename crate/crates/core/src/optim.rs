use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::{rf, Real};
use crate::vit::ParamEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimRule {
    AdamW,
    StableAdamW,
}

impl OptimRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimRule::AdamW => "AdamW",
            OptimRule::StableAdamW => "StableAdamW",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "AdamW" | "adamw" => Ok(OptimRule::AdamW),
            "StableAdamW" | "stable_adamw" => Ok(OptimRule::StableAdamW),
            _ => Err(CoreError::parameter(format!("unknown optimizer '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub rule: OptimRule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    /// Weight decay follows its own cosine from `.0` to `.1`.
    pub weight_decay_range: (f64, f64),
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    /// Fraction of total steps spent in linear lr warmup.
    pub warmup_frac: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            rule: OptimRule::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr: 2e-4,
            weight_decay_range: (0.04, 0.2),
            grad_clip_norm: 3.0,
            batch_size: 1024,
            warmup_frac: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(CoreError::config(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if !(self.base_lr > 0.0) {
            return Err(CoreError::config("base_lr must be positive"));
        }
        if !(self.eps > 0.0) {
            return Err(CoreError::config("eps must be positive"));
        }
        Ok(())
    }
}

/// First/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> OptState<T> {
    pub fn new(len: usize) -> Self {
        OptState { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }
}

#[inline]
fn check_finite<T: Real>(grad: &[T]) -> bool {
    let mut acc = T::zero();
    for &g in grad {
        acc += g;
    }
    acc.is_finite()
}

/// One bias-corrected AdamW step on a single tensor:
/// `param -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * param)`.
/// `t` is the post-increment step count (1 on the first step).
pub fn adamw_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    wd: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if !check_finite(grad) {
        return Err(CoreError::numeric("non-finite gradient"));
    }
    update_moments(grad, m, v, cfg);
    apply_update(param, m, v, t, lr, wd, cfg);
    Ok(())
}

/// AdamW with root-mean-square clipping of the raw update: the effective
/// learning rate is `lr / max(1, RMS(u))` with `u = m_hat / (sqrt(v_hat) +
/// eps)` over this tensor. Bitwise identical to [`adamw_step`] whenever
/// `RMS(u) <= 1`.
pub fn stable_adamw_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    wd: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if !check_finite(grad) {
        return Err(CoreError::numeric("non-finite gradient"));
    }
    update_moments(grad, m, v, cfg);
    let rms = update_rms(m, v, t, cfg);
    let lr_eff = lr / rms.max(1.0);
    apply_update(param, m, v, t, lr_eff, wd, cfg);
    Ok(())
}

#[inline]
fn update_moments<T: Real>(grad: &[T], m: &mut [T], v: &mut [T], cfg: &OptimConfig) {
    let b1 = rf::<T>(cfg.beta1);
    let b2 = rf::<T>(cfg.beta2);
    let c1 = rf::<T>(1.0 - cfg.beta1);
    let c2 = rf::<T>(1.0 - cfg.beta2);
    for i in 0..grad.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + c1 * g;
        v[i] = b2 * v[i] + c2 * g * g;
    }
}

#[inline]
fn bias_corrections(t: u64, cfg: &OptimConfig) -> (f64, f64) {
    let c1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let c2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    (c1, c2)
}

/// RMS of the bias-corrected update direction over one tensor (f64
/// accumulation).
fn update_rms<T: Real>(m: &[T], v: &[T], t: u64, cfg: &OptimConfig) -> f64 {
    let (c1, c2) = bias_corrections(t, cfg);
    let mut acc = 0.0f64;
    for i in 0..m.len() {
        let u = raw_update(m[i], v[i], c1, c2, cfg.eps);
        let u = u.to64();
        acc += u * u;
    }
    libm::sqrt(acc / m.len() as f64)
}

#[inline(always)]
fn raw_update<T: Real>(m: T, v: T, c1: f64, c2: f64, eps: f64) -> T {
    let m_hat = m / rf::<T>(c1);
    let v_hat = v / rf::<T>(c2);
    m_hat / (v_hat.sqrt() + rf::<T>(eps))
}

#[inline]
fn apply_update<T: Real>(param: &mut [T], m: &[T], v: &[T], t: u64, lr: f64, wd: f64, cfg: &OptimConfig) {
    let (c1, c2) = bias_corrections(t, cfg);
    let lr_t = rf::<T>(lr);
    let wd_t = rf::<T>(wd);
    for i in 0..param.len() {
        let u = raw_update(m[i], v[i], c1, c2, cfg.eps);
        param[i] = param[i] - lr_t * (u + wd_t * param[i]);
    }
}

/// Step every tensor of a flat parameter buffer. Increments the state's
/// step counter; errors name the offending tensor.
pub fn step_entries<T: Real>(
    entries: &[ParamEntry],
    params: &mut [T],
    grads: &[T],
    state: &mut OptState<T>,
    lr: f64,
    wd: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t;
    for e in entries {
        let r = e.offset..e.offset + e.len;
        let res = match cfg.rule {
            OptimRule::AdamW => adamw_step(
                &mut params[r.clone()],
                &grads[r.clone()],
                &mut state.m[r.clone()],
                &mut state.v[r.clone()],
                t,
                lr,
                wd,
                cfg,
            ),
            OptimRule::StableAdamW => stable_adamw_step(
                &mut params[r.clone()],
                &grads[r.clone()],
                &mut state.m[r.clone()],
                &mut state.v[r.clone()],
                t,
                lr,
                wd,
                cfg,
            ),
        };
        res.map_err(|err| CoreError::numeric(format!("{err} in tensor '{}'", e.name)))?;
    }
    Ok(())
}

/// Cosine schedule with linear warmup: 0 -> `peak` over `warmup_steps`,
/// then a half-cosine `peak` -> `end` at `t = total`. Clamps to `end` past
/// the horizon.
pub fn cosine_schedule(t: u64, total: u64, peak: f64, end: f64, warmup_steps: u64) -> f64 {
    if t > total {
        return end;
    }
    if warmup_steps > 0 && t < warmup_steps {
        return peak * t as f64 / warmup_steps as f64;
    }
    let span = (total - warmup_steps).max(1) as f64;
    let frac = (t - warmup_steps) as f64 / span;
    end + (peak - end) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))
}

/// Square-root learning-rate scaling against the 1024 reference batch.
pub fn lr_scale(base_lr: f64, batch: usize) -> f64 {
    base_lr * libm::sqrt(batch as f64 / 1024.0)
}

/// Clip the global L2 norm across all gradient buffers to `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<T: Real>(bufs: &mut [&mut [T]], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for buf in bufs.iter() {
        for &g in buf.iter() {
            let g = g.to64();
            sq += g * g;
        }
    }
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = rf::<T>(max_norm / norm);
        for buf in bufs.iter_mut() {
            for g in buf.iter_mut() {
                *g *= s;
            }
        }
    }
    norm
}

/// EMA update `teacher = m * teacher + (1 - m) * student`.
pub fn ema_update<T: Real>(teacher: &mut [T], student: &[T], momentum: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(CoreError::dimension(format!(
            "EMA buffers differ in length: {} vs {}",
            teacher.len(),
            student.len()
        )));
    }
    let m = rf::<T>(momentum);
    let c = rf::<T>(1.0 - momentum);
    for (t, &s) in teacher.iter_mut().zip(student.iter()) {
        *t = m.mul_add(*t, c * s);
    }
    Ok(())
}

/// Teacher EMA momentum schedule (cosine from `start` to `end`).
#[derive(Debug, Clone, Copy)]
pub struct EmaSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        EmaSchedule { start: 0.994, end: 1.0 }
    }
}

impl EmaSchedule {
    pub fn momentum(&self, t: u64, total: u64) -> f64 {
        cosine_schedule(t, total, self.start, self.end, 0)
    }
}
