use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::{rf, Real};
use crate::rng::Rng;
use crate::tensor::{
    gelu, gelu_grad, ln_row_backward, ln_row_forward, matmul_acc_slices, matmul_at_acc_slices,
    matmul_bt_acc_slices, silu, silu_grad, softmax_row_inplace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlpKind {
    Gelu,
    SwiGlu,
}

/// Architecture knobs. `image_size` is the largest (global-view) input; the
/// positional table is sized for its patch grid and smaller views take the
/// top-left sub-grid.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub mlp_activation: MlpKind,
    pub registers: usize,
    pub qk_norm: bool,
    pub dual_patchnorm: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(CoreError::config(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(CoreError::config(format!(
                "embed dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(CoreError::config("depth must be >= 1"));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(CoreError::config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens per sample at the full image size: cls + registers + patches.
    pub fn tokens(&self) -> usize {
        1 + self.registers + self.n_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Hidden width of the MLP. SwiGLU uses the fused-gate convention:
    /// two thirds of `ratio * dim`, rounded up to a multiple of 8, which
    /// keeps its three matrices at the parameter cost of a plain MLP.
    pub fn mlp_hidden(&self) -> usize {
        let h = self.mlp_ratio * self.embed_dim as f64;
        match self.mlp_activation {
            MlpKind::Gelu => libm::round(h) as usize,
            MlpKind::SwiGlu => ((h * 2.0 / 3.0) as usize).div_ceil(8) * 8,
        }
    }

    /// Total parameter count in closed form (must equal the layout size).
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let pd = self.patch_dim();
        let h = self.mlp_hidden();
        let dh = self.head_dim();
        let mut n = 0;
        if self.dual_patchnorm {
            n += 2 * pd + 2 * d;
        }
        n += pd * d + d; // patch projection
        n += (1 + self.n_patches()) * d; // positional table (cls + patches)
        n += d; // cls token
        n += self.registers * d;
        n += d; // mask token
        let mut block = 2 * d // ln1
            + d * 3 * d + 3 * d // qkv
            + d * d + d // out proj
            + 2 * d; // ln2
        if self.qk_norm {
            block += 4 * dh;
        }
        block += match self.mlp_activation {
            MlpKind::Gelu => d * h + h + h * d + d,
            MlpKind::SwiGlu => 2 * (d * h + h) + h * d + d,
        };
        n += self.depth * block;
        n += 2 * d; // final norm
        n
    }

    /// Small model for experiments and tests.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            mlp_activation: MlpKind::Gelu,
            registers: 4,
            qk_norm: true,
            dual_patchnorm: true,
        }
    }

    /// ViT-H/14 with 4 registers (the 632M-parameter configuration).
    pub fn virchow2() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 14,
            embed_dim: 1280,
            depth: 32,
            heads: 16,
            mlp_ratio: 4.0,
            mlp_activation: MlpKind::SwiGlu,
            registers: 4,
            qk_norm: false,
            dual_patchnorm: false,
        }
    }

    /// ViT-G/14 with 8 registers, QKN, and DPN (the 1.9B configuration).
    pub fn virchow2g() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 14,
            embed_dim: 1792,
            depth: 48,
            heads: 28,
            mlp_ratio: 4.0,
            mlp_activation: MlpKind::SwiGlu,
            registers: 8,
            qk_norm: true,
            dual_patchnorm: true,
        }
    }

    /// ViT-S/14 with 4 registers and a plain GELU MLP (the distilled model).
    pub fn virchow2g_mini() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 14,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4.0,
            mlp_activation: MlpKind::Gelu,
            registers: 4,
            qk_norm: false,
            dual_patchnorm: false,
        }
    }
}

/// Offsets of one tensor inside the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LnOffsets {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone)]
pub struct BlockOffsets {
    pub ln1: LnOffsets,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub q_norm: Option<LnOffsets>,
    pub k_norm: Option<LnOffsets>,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2: LnOffsets,
    pub mlp: MlpOffsets,
}

#[derive(Debug, Clone)]
pub enum MlpOffsets {
    Gelu { w1: usize, b1: usize, w2: usize, b2: usize },
    SwiGlu { gate_w: usize, gate_b: usize, val_w: usize, val_b: usize, out_w: usize, out_b: usize },
}

/// Flat parameter layout: deterministic tensor order, shared by the
/// optimizer (per-tensor state), EMA updates, and the checkpoint format.
#[derive(Debug, Clone)]
pub struct Layout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
    pub patch_pre: Option<LnOffsets>,
    pub patch_w: usize,
    pub patch_b: usize,
    pub patch_post: Option<LnOffsets>,
    pub pos: usize,
    pub cls: usize,
    pub registers: usize,
    pub mask_token: usize,
    pub blocks: Vec<BlockOffsets>,
    pub final_ln: LnOffsets,
}

struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: &[usize]) -> usize {
        let len = shape.iter().product();
        let offset = self.total;
        self.entries.push(ParamEntry { name, shape: shape.to_vec(), offset, len });
        self.total += len;
        offset
    }

    fn push_ln(&mut self, name: &str, d: usize) -> LnOffsets {
        LnOffsets {
            gain: self.push(format!("{name}.gain"), &[d]),
            bias: self.push(format!("{name}.bias"), &[d]),
        }
    }
}

pub fn build_layout(cfg: &ModelConfig) -> Layout {
    let d = cfg.embed_dim;
    let pd = cfg.patch_dim();
    let h = cfg.mlp_hidden();
    let dh = cfg.head_dim();
    let mut b = LayoutBuilder { entries: Vec::new(), total: 0 };

    let patch_pre = cfg.dual_patchnorm.then(|| b.push_ln("patch_pre", pd));
    let patch_w = b.push("patch.weight".into(), &[pd, d]);
    let patch_b = b.push("patch.bias".into(), &[d]);
    let patch_post = cfg.dual_patchnorm.then(|| b.push_ln("patch_post", d));
    let pos = b.push("pos_embed".into(), &[1 + cfg.n_patches(), d]);
    let cls = b.push("cls_token".into(), &[d]);
    let registers = b.push("registers".into(), &[cfg.registers, d]);
    let mask_token = b.push("mask_token".into(), &[d]);

    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        let ln1 = b.push_ln(&format!("{p}.ln1"), d);
        let qkv_w = b.push(format!("{p}.qkv.weight"), &[d, 3 * d]);
        let qkv_b = b.push(format!("{p}.qkv.bias"), &[3 * d]);
        let (q_norm, k_norm) = if cfg.qk_norm {
            (Some(b.push_ln(&format!("{p}.q_norm"), dh)), Some(b.push_ln(&format!("{p}.k_norm"), dh)))
        } else {
            (None, None)
        };
        let proj_w = b.push(format!("{p}.proj.weight"), &[d, d]);
        let proj_b = b.push(format!("{p}.proj.bias"), &[d]);
        let ln2 = b.push_ln(&format!("{p}.ln2"), d);
        let mlp = match cfg.mlp_activation {
            MlpKind::Gelu => MlpOffsets::Gelu {
                w1: b.push(format!("{p}.mlp.fc1.weight"), &[d, h]),
                b1: b.push(format!("{p}.mlp.fc1.bias"), &[h]),
                w2: b.push(format!("{p}.mlp.fc2.weight"), &[h, d]),
                b2: b.push(format!("{p}.mlp.fc2.bias"), &[d]),
            },
            MlpKind::SwiGlu => MlpOffsets::SwiGlu {
                gate_w: b.push(format!("{p}.mlp.gate.weight"), &[d, h]),
                gate_b: b.push(format!("{p}.mlp.gate.bias"), &[h]),
                val_w: b.push(format!("{p}.mlp.val.weight"), &[d, h]),
                val_b: b.push(format!("{p}.mlp.val.bias"), &[h]),
                out_w: b.push(format!("{p}.mlp.out.weight"), &[h, d]),
                out_b: b.push(format!("{p}.mlp.out.bias"), &[d]),
            },
        };
        blocks.push(BlockOffsets { ln1, qkv_w, qkv_b, q_norm, k_norm, proj_w, proj_b, ln2, mlp });
    }
    let final_ln = b.push_ln("final_norm", d);

    Layout {
        entries: b.entries,
        total: b.total,
        patch_pre,
        patch_w,
        patch_b,
        patch_post,
        pos,
        cls,
        registers,
        mask_token,
        blocks,
        final_ln,
    }
}

/// Truncated-normal weights (sigma 0.02), zero biases, unit norm gains.
pub fn init_params<T: Real>(cfg: &ModelConfig, layout: &Layout, rng: &mut Rng) -> Vec<T> {
    let _ = cfg;
    let mut p = vec![T::zero(); layout.total];
    for e in &layout.entries {
        let buf = &mut p[e.offset..e.offset + e.len];
        if e.name.ends_with(".gain") {
            buf.iter_mut().for_each(|x| *x = T::one());
        } else if e.name.ends_with(".bias") {
            // zeros
        } else {
            for x in buf.iter_mut() {
                *x = rf::<T>(rng.trunc_normal(0.02));
            }
        }
    }
    p
}

/// Backbone output for one batch: `[cls | registers | patches]` rows after
/// the final norm.
#[derive(Debug, Clone)]
pub struct TokenBatch<T> {
    pub data: Vec<T>,
    pub batch: usize,
    pub tokens_per: usize,
    pub dim: usize,
    pub registers: usize,
    pub n_patches: usize,
}

impl<T: Real> TokenBatch<T> {
    pub fn cls(&self, i: usize) -> &[T] {
        let base = i * self.tokens_per * self.dim;
        &self.data[base..base + self.dim]
    }

    pub fn register_rows(&self, i: usize) -> &[T] {
        let base = (i * self.tokens_per + 1) * self.dim;
        &self.data[base..base + self.registers * self.dim]
    }

    pub fn patch_rows(&self, i: usize) -> &[T] {
        let base = (i * self.tokens_per + 1 + self.registers) * self.dim;
        &self.data[base..base + self.n_patches * self.dim]
    }

    pub fn sample(&self, i: usize) -> TokenOutput<'_, T> {
        TokenOutput {
            cls: self.cls(i),
            registers: self.register_rows(i),
            patches: self.patch_rows(i),
            dim: self.dim,
        }
    }
}

/// View of one sample's tokens.
pub struct TokenOutput<'a, T> {
    pub cls: &'a [T],
    pub registers: &'a [T],
    pub patches: &'a [T],
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMode {
    ClsOnly,
    ClsMean,
}

impl EmbedMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EmbedMode::ClsOnly => "cls_only",
            EmbedMode::ClsMean => "cls_mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cls_only" => Ok(EmbedMode::ClsOnly),
            "cls_mean" => Ok(EmbedMode::ClsMean),
            _ => Err(CoreError::parameter(format!("unknown embedding mode '{s}'"))),
        }
    }
}

/// Frozen-embedding extraction: the class token alone, or the class token
/// concatenated with the mean over patch tokens. Registers are always
/// excluded.
pub fn extract_embedding<T: Real>(out: &TokenOutput<'_, T>, mode: EmbedMode) -> Vec<T> {
    match mode {
        EmbedMode::ClsOnly => out.cls.to_vec(),
        EmbedMode::ClsMean => {
            let d = out.dim;
            let n = out.patches.len() / d;
            let mut v = Vec::with_capacity(2 * d);
            v.extend_from_slice(out.cls);
            let inv = T::one() / rf::<T>(n as f64);
            for j in 0..d {
                let mut s = T::zero();
                for p in 0..n {
                    s += out.patches[p * d + j];
                }
                v.push(s * inv);
            }
            v
        }
    }
}

/// Elementwise max over patch tokens (localized-feature aggregation).
pub fn patch_max<T: Real>(out: &TokenOutput<'_, T>) -> Vec<T> {
    let d = out.dim;
    let n = out.patches.len() / d;
    let mut v = out.patches[..d].to_vec();
    for p in 1..n {
        for j in 0..d {
            let x = out.patches[p * d + j];
            if x > v[j] {
                v[j] = x;
            }
        }
    }
    v
}

/// Per-forward options. `masks` lists masked patch indices per sample
/// (replaced by the mask token); `drop_keep` carries one stochastic-depth
/// decision per (sample, block) plus the drop rate.
#[derive(Default)]
pub struct ForwardOpts<'a> {
    pub masks: Option<&'a [Vec<usize>]>,
    pub drop_keep: Option<(&'a [bool], f64)>,
}

pub struct QknTrace<T> {
    q_hat: Vec<T>,
    k_hat: Vec<T>,
    q_stats: Vec<(T, T)>,
    k_stats: Vec<(T, T)>,
}

pub struct BlockTrace<T> {
    x_in: Vec<T>,
    ln1_out: Vec<T>,
    ln1_stats: Vec<(T, T)>,
    qkv: Vec<T>,
    qkn: Option<QknTrace<T>>,
    probs: Vec<T>,
    ctx: Vec<T>,
    x_mid: Vec<T>,
    ln2_out: Vec<T>,
    ln2_stats: Vec<(T, T)>,
    mlp_a: Vec<T>,
    mlp_b: Vec<T>,
    branch_scale: Vec<T>,
}

pub struct Trace<T> {
    batch: usize,
    grid: usize,
    patches_raw: Vec<T>,
    patch_pre_stats: Vec<(T, T)>,
    patch_pre_out: Vec<T>,
    proj_out: Vec<T>,
    patch_post_stats: Vec<(T, T)>,
    masks: Vec<Vec<usize>>,
    blocks: Vec<BlockTrace<T>>,
    final_in: Vec<T>,
    final_stats: Vec<(T, T)>,
}

fn fold_finite<T: Real>(xs: &[T]) -> bool {
    let mut acc = T::zero();
    for &x in xs {
        acc += x;
    }
    acc.is_finite()
}

/// Elementwise map, parallel over fixed-size chunks (deterministic: each
/// output element is a pure function of its input element).
fn map_buf<T: Real>(src: &[T], out: &mut [T], f: impl Fn(T) -> T + Sync + Send) {
    assert_eq!(src.len(), out.len());
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if src.len() >= 1 << 15 {
            const CH: usize = 1 << 14;
            out.par_chunks_mut(CH).zip(src.par_chunks(CH)).for_each(|(o, s)| {
                for (ov, &sv) in o.iter_mut().zip(s) {
                    *ov = f(sv);
                }
            });
            return;
        }
    }
    for (ov, &sv) in out.iter_mut().zip(src) {
        *ov = f(sv);
    }
}

/// Copy the head slice of each token row into a contiguous `t_tok x dh`
/// tile.
#[inline]
fn gather_tile<T: Real>(src: &[T], base: usize, stride: usize, t_tok: usize, dh: usize, out: &mut [T]) {
    for i in 0..t_tok {
        let s = base + i * stride;
        out[i * dh..(i + 1) * dh].copy_from_slice(&src[s..s + dh]);
    }
}

/// Attention forward for one sample across all heads, writing softmax
/// probabilities and the per-head context rows.
#[allow(clippy::too_many_arguments)]
fn attn_fwd_sample<T: Real>(
    qkv: &[T],
    hats: Option<(&[T], &[T])>,
    b: usize,
    t_tok: usize,
    d: usize,
    heads: usize,
    dh: usize,
    scale: T,
    probs_b: &mut [T],
    ctx_b: &mut [T],
) {
    let mut q_tile = vec![T::zero(); t_tok * dh];
    let mut k_tile = vec![T::zero(); t_tok * dh];
    let mut v_tile = vec![T::zero(); t_tok * dh];
    for hh in 0..heads {
        match hats {
            Some((qh, kh)) => {
                gather_tile(qh, b * t_tok * d + hh * dh, d, t_tok, dh, &mut q_tile);
                gather_tile(kh, b * t_tok * d + hh * dh, d, t_tok, dh, &mut k_tile);
            }
            None => {
                gather_tile(qkv, b * t_tok * 3 * d + hh * dh, 3 * d, t_tok, dh, &mut q_tile);
                gather_tile(qkv, b * t_tok * 3 * d + d + hh * dh, 3 * d, t_tok, dh, &mut k_tile);
            }
        }
        gather_tile(qkv, b * t_tok * 3 * d + 2 * d + hh * dh, 3 * d, t_tok, dh, &mut v_tile);
        for i in 0..t_tok {
            let q_row = &q_tile[i * dh..(i + 1) * dh];
            let prow = &mut probs_b[hh * t_tok * t_tok + i * t_tok..hh * t_tok * t_tok + (i + 1) * t_tok];
            for (j, pj) in prow.iter_mut().enumerate() {
                let k_row = &k_tile[j * dh..(j + 1) * dh];
                let mut s = T::zero();
                for t in 0..dh {
                    s = q_row[t].mul_add(k_row[t], s);
                }
                *pj = s * scale;
            }
            softmax_row_inplace(prow, T::one());
            let c_row = &mut ctx_b[i * d + hh * dh..i * d + hh * dh + dh];
            for j in 0..t_tok {
                let pij = prow[j];
                let v_row = &v_tile[j * dh..(j + 1) * dh];
                for t in 0..dh {
                    c_row[t] = pij.mul_add(v_row[t], c_row[t]);
                }
            }
        }
    }
}

/// Attention backward for one sample: fills this sample's `d_qkv` rows and,
/// under QKN, the normalized-query/key gradients.
#[allow(clippy::too_many_arguments)]
fn attn_bwd_sample<T: Real>(
    qkv: &[T],
    hats: Option<(&[T], &[T])>,
    probs_b: &[T],
    d_ctx_b: &[T],
    b: usize,
    t_tok: usize,
    d: usize,
    heads: usize,
    dh: usize,
    scale: T,
    d_qkv_b: &mut [T],
    mut d_hats_b: Option<(&mut [T], &mut [T])>,
) {
    let mut q_tile = vec![T::zero(); t_tok * dh];
    let mut k_tile = vec![T::zero(); t_tok * dh];
    let mut v_tile = vec![T::zero(); t_tok * dh];
    let mut dq_tile = vec![T::zero(); t_tok * dh];
    let mut dk_tile = vec![T::zero(); t_tok * dh];
    let mut dv_tile = vec![T::zero(); t_tok * dh];
    let mut d_logits = vec![T::zero(); t_tok];
    for hh in 0..heads {
        match hats {
            Some((qh, kh)) => {
                gather_tile(qh, b * t_tok * d + hh * dh, d, t_tok, dh, &mut q_tile);
                gather_tile(kh, b * t_tok * d + hh * dh, d, t_tok, dh, &mut k_tile);
            }
            None => {
                gather_tile(qkv, b * t_tok * 3 * d + hh * dh, 3 * d, t_tok, dh, &mut q_tile);
                gather_tile(qkv, b * t_tok * 3 * d + d + hh * dh, 3 * d, t_tok, dh, &mut k_tile);
            }
        }
        gather_tile(qkv, b * t_tok * 3 * d + 2 * d + hh * dh, 3 * d, t_tok, dh, &mut v_tile);
        dq_tile.iter_mut().for_each(|v| *v = T::zero());
        dk_tile.iter_mut().for_each(|v| *v = T::zero());
        dv_tile.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..t_tok {
            let prow = &probs_b[hh * t_tok * t_tok + i * t_tok..hh * t_tok * t_tok + (i + 1) * t_tok];
            let dctx_row = &d_ctx_b[i * d + hh * dh..i * d + hh * dh + dh];
            for j in 0..t_tok {
                let v_row = &v_tile[j * dh..(j + 1) * dh];
                let dv_row = &mut dv_tile[j * dh..(j + 1) * dh];
                let mut dp = T::zero();
                let pij = prow[j];
                for t in 0..dh {
                    dp = dctx_row[t].mul_add(v_row[t], dp);
                    dv_row[t] = pij.mul_add(dctx_row[t], dv_row[t]);
                }
                d_logits[j] = dp;
            }
            let mut dot = T::zero();
            for j in 0..t_tok {
                dot = prow[j].mul_add(d_logits[j], dot);
            }
            for j in 0..t_tok {
                d_logits[j] = prow[j] * (d_logits[j] - dot) * scale;
            }
            let dq_row_i = i * dh;
            for j in 0..t_tok {
                let dl = d_logits[j];
                let k_row = &k_tile[j * dh..(j + 1) * dh];
                let q_row = &q_tile[i * dh..(i + 1) * dh];
                for t in 0..dh {
                    dq_tile[dq_row_i + t] = dl.mul_add(k_row[t], dq_tile[dq_row_i + t]);
                    dk_tile[j * dh + t] = dl.mul_add(q_row[t], dk_tile[j * dh + t]);
                }
            }
        }
        // scatter tiles back
        for i in 0..t_tok {
            let vdst = i * 3 * d + 2 * d + hh * dh;
            for t in 0..dh {
                d_qkv_b[vdst + t] += dv_tile[i * dh + t];
            }
            match d_hats_b.as_mut() {
                Some((dq, dk)) => {
                    let hdst = i * d + hh * dh;
                    for t in 0..dh {
                        dq[hdst + t] += dq_tile[i * dh + t];
                        dk[hdst + t] += dk_tile[i * dh + t];
                    }
                }
                None => {
                    let qdst = i * 3 * d + hh * dh;
                    let kdst = i * 3 * d + d + hh * dh;
                    for t in 0..dh {
                        d_qkv_b[qdst + t] += dq_tile[i * dh + t];
                        d_qkv_b[kdst + t] += dk_tile[i * dh + t];
                    }
                }
            }
        }
    }
}


fn add_bias_rows<T: Real>(buf: &mut [T], bias: &[T]) {
    let w = bias.len();
    for row in buf.chunks_exact_mut(w) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Full forward pass over a batch of images.
///
/// `images` holds `batch` frames of `img_size * img_size * 3` floats already
/// scaled to model range. `img_size` may be smaller than the configured
/// image size; patches then use the top-left sub-grid of the positional
/// table. Returns a numeric error naming the block if activations go
/// non-finite.
pub fn forward<T: Real>(
    cfg: &ModelConfig,
    layout: &Layout,
    params: &[T],
    images: &[T],
    batch: usize,
    img_size: usize,
    opts: &ForwardOpts<'_>,
    want_trace: bool,
) -> Result<(TokenBatch<T>, Option<Trace<T>>)> {
    let ps = cfg.patch_size;
    if img_size == 0 || img_size % ps != 0 || img_size > cfg.image_size {
        return Err(CoreError::dimension(format!(
            "forward image size {img_size} incompatible with model (patch {ps}, max {})",
            cfg.image_size
        )));
    }
    if images.len() != batch * img_size * img_size * 3 {
        return Err(CoreError::dimension("image buffer length mismatch"));
    }
    let grid = img_size / ps;
    let p_count = grid * grid;
    let d = cfg.embed_dim;
    let pd = cfg.patch_dim();
    let t_tok = 1 + cfg.registers + p_count;
    let rows_p = batch * p_count;
    let rows = batch * t_tok;

    // patchify
    let mut patches_raw = vec![T::zero(); rows_p * pd];
    for b in 0..batch {
        let img = &images[b * img_size * img_size * 3..(b + 1) * img_size * img_size * 3];
        for py in 0..grid {
            for px in 0..grid {
                let dst = ((b * p_count) + py * grid + px) * pd;
                for y in 0..ps {
                    let src = ((py * ps + y) * img_size + px * ps) * 3;
                    let n = ps * 3;
                    patches_raw[dst + y * n..dst + (y + 1) * n].copy_from_slice(&img[src..src + n]);
                }
            }
        }
    }

    // optional pre-norm, projection, optional post-norm
    let mut patch_pre_stats = Vec::new();
    let mut patch_pre_out: Vec<T> = Vec::new();
    let proj_in: &[T] = if let Some(ln) = layout.patch_pre {
        patch_pre_stats.reserve(rows_p);
        patch_pre_out.resize(rows_p * pd, T::zero());
        let gain = &params[ln.gain..ln.gain + pd];
        let bias = &params[ln.bias..ln.bias + pd];
        for (xr, or) in patches_raw.chunks_exact(pd).zip(patch_pre_out.chunks_exact_mut(pd)) {
            patch_pre_stats.push(ln_row_forward(xr, gain, bias, or));
        }
        &patch_pre_out
    } else {
        &patches_raw
    };
    let mut proj_out = vec![T::zero(); rows_p * d];
    matmul_acc_slices(&mut proj_out, proj_in, &params[layout.patch_w..layout.patch_w + pd * d], rows_p, pd, d);
    add_bias_rows(&mut proj_out, &params[layout.patch_b..layout.patch_b + d]);

    let mut patch_post_stats = Vec::new();
    let mut post_out: Vec<T> = Vec::new();
    let patch_tokens: &[T] = if let Some(ln) = layout.patch_post {
        patch_post_stats.reserve(rows_p);
        post_out.resize(rows_p * d, T::zero());
        let gain = &params[ln.gain..ln.gain + d];
        let bias = &params[ln.bias..ln.bias + d];
        for (xr, or) in proj_out.chunks_exact(d).zip(post_out.chunks_exact_mut(d)) {
            patch_post_stats.push(ln_row_forward(xr, gain, bias, or));
        }
        &post_out
    } else {
        &proj_out
    };

    // token assembly: [cls | registers | patches] plus positions; registers
    // carry no positional embedding, masked patches become the mask token
    let masks: Vec<Vec<usize>> = match opts.masks {
        Some(m) => {
            if m.len() != batch {
                return Err(CoreError::dimension("mask list length must equal batch"));
            }
            m.to_vec()
        }
        None => vec![Vec::new(); batch],
    };
    let full_grid = cfg.grid();
    let mut x = vec![T::zero(); rows * d];
    let cls_p = &params[layout.cls..layout.cls + d];
    let mask_tok = &params[layout.mask_token..layout.mask_token + d];
    for b in 0..batch {
        let base = b * t_tok * d;
        for j in 0..d {
            x[base + j] = cls_p[j] + params[layout.pos + j];
        }
        for r in 0..cfg.registers {
            let src = layout.registers + r * d;
            x[base + (1 + r) * d..base + (2 + r) * d].copy_from_slice(&params[src..src + d]);
        }
        for p in 0..p_count {
            let masked = masks[b].contains(&p);
            let dst = base + (1 + cfg.registers + p) * d;
            let (py, px) = (p / grid, p % grid);
            let pos_row = layout.pos + (1 + py * full_grid + px) * d;
            let src = (b * p_count + p) * d;
            for j in 0..d {
                let val = if masked { mask_tok[j] } else { patch_tokens[src + j] };
                x[dst + j] = val + params[pos_row + j];
            }
        }
    }

    let mut trace = want_trace.then(|| Trace {
        batch,
        grid,
        patches_raw: Vec::new(),
        patch_pre_stats,
        patch_pre_out: Vec::new(),
        proj_out: Vec::new(),
        patch_post_stats,
        masks: masks.clone(),
        blocks: Vec::with_capacity(cfg.depth),
        final_in: Vec::new(),
        final_stats: Vec::new(),
    });
    if let Some(tr) = trace.as_mut() {
        tr.patches_raw = patches_raw;
        tr.patch_pre_out = patch_pre_out;
        tr.proj_out = proj_out;
    }

    let h = cfg.mlp_hidden();
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = rf::<T>(1.0 / libm::sqrt(dh as f64));

    for (bi, blk) in layout.blocks.iter().enumerate() {
        let branch_scale: Vec<T> = match opts.drop_keep {
            Some((keep, rate)) => (0..batch)
                .map(|b| if keep[b * cfg.depth + bi] { rf::<T>(1.0 / (1.0 - rate)) } else { T::zero() })
                .collect(),
            None => vec![T::one(); batch],
        };

        // attention
        let mut ln1_out = vec![T::zero(); rows * d];
        let mut ln1_stats = Vec::with_capacity(rows);
        {
            let gain = &params[blk.ln1.gain..blk.ln1.gain + d];
            let bias = &params[blk.ln1.bias..blk.ln1.bias + d];
            for (xr, or) in x.chunks_exact(d).zip(ln1_out.chunks_exact_mut(d)) {
                ln1_stats.push(ln_row_forward(xr, gain, bias, or));
            }
        }
        let mut qkv = vec![T::zero(); rows * 3 * d];
        matmul_acc_slices(&mut qkv, &ln1_out, &params[blk.qkv_w..blk.qkv_w + d * 3 * d], rows, d, 3 * d);
        add_bias_rows(&mut qkv, &params[blk.qkv_b..blk.qkv_b + 3 * d]);

        // optional per-head layer norm of queries and keys
        let qkn = if cfg.qk_norm {
            let qn = blk.q_norm.unwrap();
            let kn = blk.k_norm.unwrap();
            let qg = &params[qn.gain..qn.gain + dh];
            let qb = &params[qn.bias..qn.bias + dh];
            let kg = &params[kn.gain..kn.gain + dh];
            let kb = &params[kn.bias..kn.bias + dh];
            let mut q_hat = vec![T::zero(); rows * d];
            let mut k_hat = vec![T::zero(); rows * d];
            let mut q_stats = Vec::with_capacity(rows * heads);
            let mut k_stats = Vec::with_capacity(rows * heads);
            for r in 0..rows {
                for hh in 0..heads {
                    let off = r * 3 * d + hh * dh;
                    let dst = r * d + hh * dh;
                    q_stats.push(ln_row_forward(&qkv[off..off + dh], qg, qb, &mut q_hat[dst..dst + dh]));
                    let koff = r * 3 * d + d + hh * dh;
                    k_stats.push(ln_row_forward(&qkv[koff..koff + dh], kg, kb, &mut k_hat[dst..dst + dh]));
                }
            }
            Some(QknTrace { q_hat, k_hat, q_stats, k_stats })
        } else {
            None
        };

        let mut probs = vec![T::zero(); batch * heads * t_tok * t_tok];
        let mut ctx = vec![T::zero(); rows * d];
        {
            let hats = qkn.as_ref().map(|t| (&t.q_hat[..], &t.k_hat[..]));
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                probs
                    .par_chunks_mut(heads * t_tok * t_tok)
                    .zip(ctx.par_chunks_mut(t_tok * d))
                    .enumerate()
                    .for_each(|(b, (pb, cb))| {
                        attn_fwd_sample(&qkv, hats, b, t_tok, d, heads, dh, scale, pb, cb)
                    });
            }
            #[cfg(not(feature = "parallel"))]
            for b in 0..batch {
                attn_fwd_sample(
                    &qkv,
                    hats,
                    b,
                    t_tok,
                    d,
                    heads,
                    dh,
                    scale,
                    &mut probs[b * heads * t_tok * t_tok..(b + 1) * heads * t_tok * t_tok],
                    &mut ctx[b * t_tok * d..(b + 1) * t_tok * d],
                );
            }
        }

        let mut attn_out = vec![T::zero(); rows * d];
        matmul_acc_slices(&mut attn_out, &ctx, &params[blk.proj_w..blk.proj_w + d * d], rows, d, d);
        add_bias_rows(&mut attn_out, &params[blk.proj_b..blk.proj_b + d]);
        let mut x_mid = x.clone();
        for b in 0..batch {
            let s = branch_scale[b];
            if s == T::zero() {
                continue;
            }
            let base = b * t_tok * d;
            for j in 0..t_tok * d {
                x_mid[base + j] = s.mul_add(attn_out[base + j], x_mid[base + j]);
            }
        }

        // MLP
        let mut ln2_out = vec![T::zero(); rows * d];
        let mut ln2_stats = Vec::with_capacity(rows);
        {
            let gain = &params[blk.ln2.gain..blk.ln2.gain + d];
            let bias = &params[blk.ln2.bias..blk.ln2.bias + d];
            for (xr, or) in x_mid.chunks_exact(d).zip(ln2_out.chunks_exact_mut(d)) {
                ln2_stats.push(ln_row_forward(xr, gain, bias, or));
            }
        }
        let (mlp_a, mlp_b, mlp_out) = match &blk.mlp {
            MlpOffsets::Gelu { w1, b1, w2, b2 } => {
                let mut pre = vec![T::zero(); rows * h];
                matmul_acc_slices(&mut pre, &ln2_out, &params[*w1..*w1 + d * h], rows, d, h);
                add_bias_rows(&mut pre, &params[*b1..*b1 + h]);
                let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
                let mut out = vec![T::zero(); rows * d];
                matmul_acc_slices(&mut out, &act, &params[*w2..*w2 + h * d], rows, h, d);
                add_bias_rows(&mut out, &params[*b2..*b2 + d]);
                (pre, Vec::new(), out)
            }
            MlpOffsets::SwiGlu { gate_w, gate_b, val_w, val_b, out_w, out_b } => {
                let mut gate = vec![T::zero(); rows * h];
                matmul_acc_slices(&mut gate, &ln2_out, &params[*gate_w..*gate_w + d * h], rows, d, h);
                add_bias_rows(&mut gate, &params[*gate_b..*gate_b + h]);
                let mut val = vec![T::zero(); rows * h];
                matmul_acc_slices(&mut val, &ln2_out, &params[*val_w..*val_w + d * h], rows, d, h);
                add_bias_rows(&mut val, &params[*val_b..*val_b + h]);
                let act: Vec<T> = gate.iter().zip(val.iter()).map(|(&g, &v)| silu(g) * v).collect();
                let mut out = vec![T::zero(); rows * d];
                matmul_acc_slices(&mut out, &act, &params[*out_w..*out_w + h * d], rows, h, d);
                add_bias_rows(&mut out, &params[*out_b..*out_b + d]);
                (gate, val, out)
            }
        };
        let mut x_out = x_mid.clone();
        for b in 0..batch {
            let s = branch_scale[b];
            if s == T::zero() {
                continue;
            }
            let base = b * t_tok * d;
            for j in 0..t_tok * d {
                x_out[base + j] = s.mul_add(mlp_out[base + j], x_out[base + j]);
            }
        }

        if !fold_finite(&x_out) {
            return Err(CoreError::numeric(format!("non-finite activations after block {bi}")));
        }

        if let Some(tr) = trace.as_mut() {
            tr.blocks.push(BlockTrace {
                x_in: core::mem::replace(&mut x, x_out),
                ln1_out,
                ln1_stats,
                qkv,
                qkn,
                probs,
                ctx,
                x_mid,
                ln2_out,
                ln2_stats,
                mlp_a,
                mlp_b,
                branch_scale,
            });
        } else {
            x = x_out;
        }
    }

    // final norm
    let mut out = vec![T::zero(); rows * d];
    let mut final_stats = Vec::with_capacity(rows);
    {
        let gain = &params[layout.final_ln.gain..layout.final_ln.gain + d];
        let bias = &params[layout.final_ln.bias..layout.final_ln.bias + d];
        for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            final_stats.push(ln_row_forward(xr, gain, bias, or));
        }
    }
    if let Some(tr) = trace.as_mut() {
        tr.final_in = x;
        tr.final_stats = final_stats;
    }

    Ok((
        TokenBatch { data: out, batch, tokens_per: t_tok, dim: d, registers: cfg.registers, n_patches: p_count },
        trace,
    ))
}

/// Backward pass: accumulates parameter gradients into `grads` given the
/// gradient at the output tokens. No gradient flows to the input image.
pub fn backward<T: Real>(
    cfg: &ModelConfig,
    layout: &Layout,
    params: &[T],
    trace: &Trace<T>,
    d_tokens: &[T],
    grads: &mut [T],
) {
    assert_eq!(grads.len(), layout.total);
    let d = cfg.embed_dim;
    let pd = cfg.patch_dim();
    let h = cfg.mlp_hidden();
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let batch = trace.batch;
    let grid = trace.grid;
    let p_count = grid * grid;
    let t_tok = 1 + cfg.registers + p_count;
    let rows = batch * t_tok;
    let rows_p = batch * p_count;
    let scale = rf::<T>(1.0 / libm::sqrt(dh as f64));
    assert_eq!(d_tokens.len(), rows * d);

    // final norm backward
    let mut dx = vec![T::zero(); rows * d];
    {
        let gain = params[layout.final_ln.gain..layout.final_ln.gain + d].to_vec();
        let (gslice, bslice) = split_two(grads, layout.final_ln.gain, layout.final_ln.bias, d);
        for r in 0..rows {
            let (mean, rstd) = trace.final_stats[r];
            ln_row_backward(
                &trace.final_in[r * d..(r + 1) * d],
                &gain,
                mean,
                rstd,
                &d_tokens[r * d..(r + 1) * d],
                &mut dx[r * d..(r + 1) * d],
                gslice,
                bslice,
            );
        }
    }

    for (bi, blk) in layout.blocks.iter().enumerate().rev() {
        let tr = &trace.blocks[bi];

        // MLP branch backward: x_out = x_mid + s * mlp(ln2(x_mid))
        let mut d_mlp_out = vec![T::zero(); rows * d];
        for b in 0..batch {
            let s = tr.branch_scale[b];
            if s == T::zero() {
                continue;
            }
            let base = b * t_tok * d;
            for j in 0..t_tok * d {
                d_mlp_out[base + j] = s * dx[base + j];
            }
        }
        let mut d_ln2 = vec![T::zero(); rows * d];
        match &blk.mlp {
            MlpOffsets::Gelu { w1, b1, w2, b2 } => {
                let act: Vec<T> = tr.mlp_a.iter().map(|&v| gelu(v)).collect();
                matmul_at_acc_slices(&mut grads[*w2..*w2 + h * d], &act, &d_mlp_out, rows, h, d);
                add_bias_grad(&mut grads[*b2..*b2 + d], &d_mlp_out, d);
                let mut d_act = vec![T::zero(); rows * h];
                matmul_bt_acc_slices(&mut d_act, &d_mlp_out, &params[*w2..*w2 + h * d], rows, d, h);
                for (da, &pre) in d_act.iter_mut().zip(tr.mlp_a.iter()) {
                    *da *= gelu_grad(pre);
                }
                matmul_at_acc_slices(&mut grads[*w1..*w1 + d * h], &tr.ln2_out, &d_act, rows, d, h);
                add_bias_grad(&mut grads[*b1..*b1 + h], &d_act, h);
                matmul_bt_acc_slices(&mut d_ln2, &d_act, &params[*w1..*w1 + d * h], rows, h, d);
            }
            MlpOffsets::SwiGlu { gate_w, gate_b, val_w, val_b, out_w, out_b } => {
                let act: Vec<T> =
                    tr.mlp_a.iter().zip(tr.mlp_b.iter()).map(|(&g, &v)| silu(g) * v).collect();
                matmul_at_acc_slices(&mut grads[*out_w..*out_w + h * d], &act, &d_mlp_out, rows, h, d);
                add_bias_grad(&mut grads[*out_b..*out_b + d], &d_mlp_out, d);
                let mut d_act = vec![T::zero(); rows * h];
                matmul_bt_acc_slices(&mut d_act, &d_mlp_out, &params[*out_w..*out_w + h * d], rows, d, h);
                let mut d_gate = vec![T::zero(); rows * h];
                let mut d_val = vec![T::zero(); rows * h];
                for i in 0..rows * h {
                    let g = tr.mlp_a[i];
                    let v = tr.mlp_b[i];
                    d_gate[i] = d_act[i] * v * silu_grad(g);
                    d_val[i] = d_act[i] * silu(g);
                }
                matmul_at_acc_slices(&mut grads[*gate_w..*gate_w + d * h], &tr.ln2_out, &d_gate, rows, d, h);
                add_bias_grad(&mut grads[*gate_b..*gate_b + h], &d_gate, h);
                matmul_at_acc_slices(&mut grads[*val_w..*val_w + d * h], &tr.ln2_out, &d_val, rows, d, h);
                add_bias_grad(&mut grads[*val_b..*val_b + h], &d_val, h);
                matmul_bt_acc_slices(&mut d_ln2, &d_gate, &params[*gate_w..*gate_w + d * h], rows, h, d);
                let mut d_ln2_v = vec![T::zero(); rows * d];
                matmul_bt_acc_slices(&mut d_ln2_v, &d_val, &params[*val_w..*val_w + d * h], rows, h, d);
                for (a, b) in d_ln2.iter_mut().zip(d_ln2_v.iter()) {
                    *a += *b;
                }
            }
        }
        {
            let gain = params[blk.ln2.gain..blk.ln2.gain + d].to_vec();
            let (gslice, bslice) = split_two(grads, blk.ln2.gain, blk.ln2.bias, d);
            let mut d_row = vec![T::zero(); d];
            for r in 0..rows {
                let (mean, rstd) = tr.ln2_stats[r];
                ln_row_backward(
                    &tr.x_mid[r * d..(r + 1) * d],
                    &gain,
                    mean,
                    rstd,
                    &d_ln2[r * d..(r + 1) * d],
                    &mut d_row,
                    gslice,
                    bslice,
                );
                for j in 0..d {
                    dx[r * d + j] += d_row[j];
                }
            }
        }

        // attention branch backward: x_mid = x_in + s * proj(attn(ln1(x_in)))
        let mut d_attn_out = vec![T::zero(); rows * d];
        for b in 0..batch {
            let s = tr.branch_scale[b];
            if s == T::zero() {
                continue;
            }
            let base = b * t_tok * d;
            for j in 0..t_tok * d {
                d_attn_out[base + j] = s * dx[base + j];
            }
        }
        matmul_at_acc_slices(&mut grads[blk.proj_w..blk.proj_w + d * d], &tr.ctx, &d_attn_out, rows, d, d);
        add_bias_grad(&mut grads[blk.proj_b..blk.proj_b + d], &d_attn_out, d);
        let mut d_ctx = vec![T::zero(); rows * d];
        matmul_bt_acc_slices(&mut d_ctx, &d_attn_out, &params[blk.proj_w..blk.proj_w + d * d], rows, d, d);

        // per-(sample, head) attention backward into d_qkv
        let mut d_qkv = vec![T::zero(); rows * 3 * d];
        let mut d_qhat = if cfg.qk_norm { vec![T::zero(); rows * d] } else { Vec::new() };
        let mut d_khat = if cfg.qk_norm { vec![T::zero(); rows * d] } else { Vec::new() };
        {
            let mut d_logits = vec![T::zero(); t_tok];
            for b in 0..batch {
                for hh in 0..heads {
                    let p_base = (b * heads + hh) * t_tok * t_tok;
                    for i in 0..t_tok {
                        let prow = &tr.probs[p_base + i * t_tok..p_base + (i + 1) * t_tok];
                        let c_off = (b * t_tok + i) * d + hh * dh;
                        let dctx_row = &d_ctx[c_off..c_off + dh];
                        for j in 0..t_tok {
                            let v_off = (b * t_tok + j) * 3 * d + 2 * d + hh * dh;
                            let mut dp = T::zero();
                            for t in 0..dh {
                                dp = dctx_row[t].mul_add(tr.qkv[v_off + t], dp);
                                d_qkv[v_off + t] = prow[j].mul_add(dctx_row[t], d_qkv[v_off + t]);
                            }
                            d_logits[j] = dp;
                        }
                        let mut dot = T::zero();
                        for j in 0..t_tok {
                            dot = prow[j].mul_add(d_logits[j], dot);
                        }
                        for j in 0..t_tok {
                            d_logits[j] = prow[j] * (d_logits[j] - dot) * scale;
                        }
                        for j in 0..t_tok {
                            let dl = d_logits[j];
                            if let Some(qkn) = &tr.qkn {
                                let q_off = (b * t_tok + i) * d + hh * dh;
                                let k_off = (b * t_tok + j) * d + hh * dh;
                                for t in 0..dh {
                                    d_qhat[q_off + t] = dl.mul_add(qkn.k_hat[k_off + t], d_qhat[q_off + t]);
                                    d_khat[k_off + t] = dl.mul_add(qkn.q_hat[q_off + t], d_khat[k_off + t]);
                                }
                            } else {
                                let q_off = (b * t_tok + i) * 3 * d + hh * dh;
                                let k_off = (b * t_tok + j) * 3 * d + d + hh * dh;
                                for t in 0..dh {
                                    let qv = tr.qkv[q_off + t];
                                    let kv = tr.qkv[k_off + t];
                                    d_qkv[q_off + t] = dl.mul_add(kv, d_qkv[q_off + t]);
                                    d_qkv[k_off + t] = dl.mul_add(qv, d_qkv[k_off + t]);
                                }
                            }
                        }
                    }
                }
            }
        }

        // QKN backward into d_qkv
        if let Some(qkn) = &tr.qkn {
            let qn = blk.q_norm.unwrap();
            let kn = blk.k_norm.unwrap();
            let qg_par = params[qn.gain..qn.gain + dh].to_vec();
            let kg_par = params[kn.gain..kn.gain + dh].to_vec();
            let mut d_row = vec![T::zero(); dh];
            for r in 0..rows {
                for hh in 0..heads {
                    let idx = r * heads + hh;
                    let hat_off = r * d + hh * dh;
                    {
                        let (gq, bq) = split_two(grads, qn.gain, qn.bias, dh);
                        let (mean, rstd) = qkn.q_stats[idx];
                        let q_off = r * 3 * d + hh * dh;
                        ln_row_backward(
                            &tr.qkv[q_off..q_off + dh],
                            &qg_par,
                            mean,
                            rstd,
                            &d_qhat[hat_off..hat_off + dh],
                            &mut d_row,
                            gq,
                            bq,
                        );
                        for t in 0..dh {
                            d_qkv[q_off + t] += d_row[t];
                        }
                    }
                    {
                        let (gk, bk) = split_two(grads, kn.gain, kn.bias, dh);
                        let (mean, rstd) = qkn.k_stats[idx];
                        let k_off = r * 3 * d + d + hh * dh;
                        ln_row_backward(
                            &tr.qkv[k_off..k_off + dh],
                            &kg_par,
                            mean,
                            rstd,
                            &d_khat[hat_off..hat_off + dh],
                            &mut d_row,
                            gk,
                            bk,
                        );
                        for t in 0..dh {
                            d_qkv[k_off + t] += d_row[t];
                        }
                    }
                }
            }
        }

        // qkv projection and ln1 backward
        matmul_at_acc_slices(&mut grads[blk.qkv_w..blk.qkv_w + d * 3 * d], &tr.ln1_out, &d_qkv, rows, d, 3 * d);
        add_bias_grad(&mut grads[blk.qkv_b..blk.qkv_b + 3 * d], &d_qkv, 3 * d);
        let mut d_ln1 = vec![T::zero(); rows * d];
        matmul_bt_acc_slices(&mut d_ln1, &d_qkv, &params[blk.qkv_w..blk.qkv_w + d * 3 * d], rows, 3 * d, d);
        {
            let gain = params[blk.ln1.gain..blk.ln1.gain + d].to_vec();
            let (gslice, bslice) = split_two(grads, blk.ln1.gain, blk.ln1.bias, d);
            let mut d_row = vec![T::zero(); d];
            for r in 0..rows {
                let (mean, rstd) = tr.ln1_stats[r];
                ln_row_backward(
                    &tr.x_in[r * d..(r + 1) * d],
                    &gain,
                    mean,
                    rstd,
                    &d_ln1[r * d..(r + 1) * d],
                    &mut d_row,
                    gslice,
                    bslice,
                );
                for j in 0..d {
                    dx[r * d + j] += d_row[j];
                }
            }
        }
    }

    // token assembly backward
    let full_grid = cfg.grid();
    let mut d_patch_tokens = vec![T::zero(); rows_p * d];
    for b in 0..batch {
        let base = b * t_tok * d;
        for j in 0..d {
            grads[layout.cls + j] += dx[base + j];
            grads[layout.pos + j] += dx[base + j];
        }
        for r in 0..cfg.registers {
            let dst = layout.registers + r * d;
            for j in 0..d {
                grads[dst + j] += dx[base + (1 + r) * d + j];
            }
        }
        for p in 0..p_count {
            let src = base + (1 + cfg.registers + p) * d;
            let (py, px) = (p / grid, p % grid);
            let pos_row = layout.pos + (1 + py * full_grid + px) * d;
            let masked = trace.masks[b].contains(&p);
            for j in 0..d {
                let g = dx[src + j];
                grads[pos_row + j] += g;
                if masked {
                    grads[layout.mask_token + j] += g;
                } else {
                    d_patch_tokens[(b * p_count + p) * d + j] = g;
                }
            }
        }
    }

    // patch post-norm backward
    let d_proj = if let Some(ln) = layout.patch_post {
        let gain = params[ln.gain..ln.gain + d].to_vec();
        let (gslice, bslice) = split_two(grads, ln.gain, ln.bias, d);
        let mut d_proj = vec![T::zero(); rows_p * d];
        for r in 0..rows_p {
            let (mean, rstd) = trace.patch_post_stats[r];
            ln_row_backward(
                &trace.proj_out[r * d..(r + 1) * d],
                &gain,
                mean,
                rstd,
                &d_patch_tokens[r * d..(r + 1) * d],
                &mut d_proj[r * d..(r + 1) * d],
                gslice,
                bslice,
            );
        }
        d_proj
    } else {
        d_patch_tokens
    };

    // projection backward
    let proj_in: &[T] =
        if layout.patch_pre.is_some() { &trace.patch_pre_out } else { &trace.patches_raw };
    matmul_at_acc_slices(&mut grads[layout.patch_w..layout.patch_w + pd * d], proj_in, &d_proj, rows_p, pd, d);
    add_bias_grad(&mut grads[layout.patch_b..layout.patch_b + d], &d_proj, d);

    // patch pre-norm backward (gradient stops at the raw pixels)
    if let Some(ln) = layout.patch_pre {
        let mut d_pre = vec![T::zero(); rows_p * pd];
        matmul_bt_acc_slices(&mut d_pre, &d_proj, &params[layout.patch_w..layout.patch_w + pd * d], rows_p, d, pd);
        let gain = params[ln.gain..ln.gain + pd].to_vec();
        let (gslice, bslice) = split_two(grads, ln.gain, ln.bias, pd);
        let mut sink = vec![T::zero(); pd];
        for r in 0..rows_p {
            let (mean, rstd) = trace.patch_pre_stats[r];
            ln_row_backward(
                &trace.patches_raw[r * pd..(r + 1) * pd],
                &gain,
                mean,
                rstd,
                &d_pre[r * pd..(r + 1) * pd],
                &mut sink,
                gslice,
                bslice,
            );
        }
    }
}

fn add_bias_grad<T: Real>(dst: &mut [T], dy: &[T], width: usize) {
    for row in dy.chunks_exact(width) {
        for (g, &v) in dst.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// Two disjoint mutable slices of the gradient buffer (gain at `a`, bias at
/// `b`, both of length `len`).
fn split_two<T>(buf: &mut [T], a: usize, b: usize, len: usize) -> (&mut [T], &mut [T]) {
    assert!(a + len <= b, "offsets must be ordered and disjoint");
    let (left, right) = buf.split_at_mut(b);
    (&mut left[a..a + len], &mut right[..len])
}
