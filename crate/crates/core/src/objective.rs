use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::{rf, Real};
use crate::rng::Rng;
use crate::tensor::{gelu, gelu_grad, matmul_acc_slices, matmul_at_acc_slices, matmul_bt_acc_slices};
use crate::vit::ParamEntry;

/// Projection head: `layers` linear layers with GELU between (input ->
/// hidden -> ... -> bottleneck), an L2 normalization, and a weight-normalized
/// prototype layer.
#[derive(Debug, Clone)]
pub struct HeadConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub prototypes: usize,
    pub shared_heads: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { layers: 3, hidden_dim: 2048, bottleneck_dim: 384, prototypes: 131072, shared_heads: false }
    }
}

impl HeadConfig {
    /// Cheap head for toy runs (prototype count from the toy default).
    pub fn toy() -> Self {
        HeadConfig { layers: 3, hidden_dim: 256, bottleneck_dim: 128, prototypes: 1024, shared_heads: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prototypes < 2 {
            return Err(CoreError::config("need at least 2 prototypes"));
        }
        if self.layers == 0 {
            return Err(CoreError::config("head needs at least 1 layer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
    /// (weight offset, bias offset, in dim, out dim) per linear layer.
    pub linears: Vec<(usize, usize, usize, usize)>,
    /// Prototype matrix offset, `prototypes x bottleneck`.
    pub proto: usize,
    pub input_dim: usize,
    pub cfg: HeadConfig,
}

pub fn build_head_layout(input_dim: usize, cfg: &HeadConfig) -> HeadLayout {
    let mut entries: Vec<ParamEntry> = Vec::new();
    let mut total = 0usize;
    let push = |entries: &mut Vec<ParamEntry>, total: &mut usize, name: alloc::string::String, shape: &[usize]| {
        let len: usize = shape.iter().product();
        let offset = *total;
        entries.push(ParamEntry { name, shape: shape.to_vec(), offset, len });
        *total += len;
        offset
    };
    let mut dims = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let din = if i == 0 { input_dim } else { cfg.hidden_dim };
        let dout = if i + 1 == cfg.layers { cfg.bottleneck_dim } else { cfg.hidden_dim };
        dims.push((din, dout));
    }
    let mut linears = Vec::with_capacity(cfg.layers);
    for (i, (din, dout)) in dims.iter().enumerate() {
        let w = push(&mut entries, &mut total, format!("layer{i}.weight"), &[*din, *dout]);
        let b = push(&mut entries, &mut total, format!("layer{i}.bias"), &[*dout]);
        linears.push((w, b, *din, *dout));
    }
    let proto = push(&mut entries, &mut total, "prototypes".into(), &[cfg.prototypes, cfg.bottleneck_dim]);
    HeadLayout { entries, total, linears, proto, input_dim, cfg: cfg.clone() }
}

pub fn init_head_params<T: Real>(layout: &HeadLayout, rng: &mut Rng) -> Vec<T> {
    let mut p = vec![T::zero(); layout.total];
    for e in &layout.entries {
        if e.name.ends_with(".bias") {
            continue;
        }
        for x in p[e.offset..e.offset + e.len].iter_mut() {
            *x = rf::<T>(rng.trunc_normal(0.02));
        }
    }
    p
}

pub struct HeadTrace<T> {
    /// Input and each post-GELU activation feeding the next linear layer.
    layer_in: Vec<Vec<T>>,
    /// Pre-activation outputs of each linear layer.
    pre: Vec<Vec<T>>,
    /// Bottleneck after L2 normalization.
    z_hat: Vec<T>,
    /// Bottleneck norms before normalization.
    z_norm: Vec<T>,
    /// Row-normalized prototype matrix and original row norms.
    proto_hat: Vec<T>,
    proto_norm: Vec<T>,
    rows: usize,
}

const NORM_FLOOR: f64 = 1e-12;

/// Head forward: `x` is `rows x input_dim`; returns prototype logits
/// (`rows x prototypes`, cosine scores of the normalized bottleneck against
/// normalized prototype rows).
pub fn head_forward<T: Real>(layout: &HeadLayout, params: &[T], x: &[T], rows: usize) -> (Vec<T>, HeadTrace<T>) {
    let cfg = &layout.cfg;
    let mut layer_in = Vec::with_capacity(cfg.layers);
    let mut pre = Vec::with_capacity(cfg.layers);
    let mut cur = x.to_vec();
    for (li, (w, b, din, dout)) in layout.linears.iter().enumerate() {
        let mut out = vec![T::zero(); rows * dout];
        matmul_acc_slices(&mut out, &cur, &params[*w..*w + din * dout], rows, *din, *dout);
        for row in out.chunks_exact_mut(*dout) {
            for (v, &bb) in row.iter_mut().zip(&params[*b..*b + dout]) {
                *v += bb;
            }
        }
        layer_in.push(cur);
        pre.push(out.clone());
        cur = if li + 1 == cfg.layers { out } else { out.iter().map(|&v| gelu(v)).collect() };
    }

    // L2 normalize the bottleneck
    let bd = cfg.bottleneck_dim;
    let mut z_norm = Vec::with_capacity(rows);
    let mut z_hat = cur;
    for row in z_hat.chunks_exact_mut(bd) {
        let mut sq = T::zero();
        for &v in row.iter() {
            sq = v.mul_add(v, sq);
        }
        let n = sq.sqrt().max(rf::<T>(NORM_FLOOR));
        z_norm.push(n);
        let inv = T::one() / n;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }

    // normalize prototype rows
    let k = cfg.prototypes;
    let mut proto_hat = params[layout.proto..layout.proto + k * bd].to_vec();
    let mut proto_norm = Vec::with_capacity(k);
    for row in proto_hat.chunks_exact_mut(bd) {
        let mut sq = T::zero();
        for &v in row.iter() {
            sq = v.mul_add(v, sq);
        }
        let n = sq.sqrt().max(rf::<T>(NORM_FLOOR));
        proto_norm.push(n);
        let inv = T::one() / n;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }

    let mut logits = vec![T::zero(); rows * k];
    matmul_bt_acc_slices(&mut logits, &z_hat, &proto_hat, rows, bd, k);
    (logits, HeadTrace { layer_in, pre, z_hat, z_norm, proto_hat, proto_norm, rows })
}

/// Head backward: gradients of the logits propagate into head parameters
/// (accumulated into `grads`) and into the head input (returned).
pub fn head_backward<T: Real>(
    layout: &HeadLayout,
    params: &[T],
    trace: &HeadTrace<T>,
    d_logits: &[T],
    grads: &mut [T],
) -> Vec<T> {
    let cfg = &layout.cfg;
    let rows = trace.rows;
    let bd = cfg.bottleneck_dim;
    let k = cfg.prototypes;

    // logits = z_hat @ proto_hat^T
    let mut d_zhat = vec![T::zero(); rows * bd];
    matmul_acc_slices(&mut d_zhat, d_logits, &trace.proto_hat, rows, k, bd);
    let mut d_proto_hat = vec![T::zero(); k * bd];
    matmul_at_acc_slices(&mut d_proto_hat, d_logits, &trace.z_hat, rows, k, bd);

    // prototype row normalization backward
    {
        let dst = &mut grads[layout.proto..layout.proto + k * bd];
        for (r, (dp_row, ph_row)) in
            d_proto_hat.chunks_exact(bd).zip(trace.proto_hat.chunks_exact(bd)).enumerate()
        {
            let inv = T::one() / trace.proto_norm[r];
            let mut dot = T::zero();
            for j in 0..bd {
                dot = dp_row[j].mul_add(ph_row[j], dot);
            }
            for j in 0..bd {
                dst[r * bd + j] += (dp_row[j] - dot * ph_row[j]) * inv;
            }
        }
    }

    // bottleneck normalization backward
    let mut d_z = vec![T::zero(); rows * bd];
    for r in 0..rows {
        let zh = &trace.z_hat[r * bd..(r + 1) * bd];
        let dzh = &d_zhat[r * bd..(r + 1) * bd];
        let inv = T::one() / trace.z_norm[r];
        let mut dot = T::zero();
        for j in 0..bd {
            dot = dzh[j].mul_add(zh[j], dot);
        }
        for j in 0..bd {
            d_z[r * bd + j] = (dzh[j] - dot * zh[j]) * inv;
        }
    }

    // linear layers backward
    let mut d_cur = d_z;
    for (li, (w, b, din, dout)) in layout.linears.iter().enumerate().rev() {
        if li + 1 != cfg.layers {
            // gradient arrived at a post-GELU activation
            for (dv, &p) in d_cur.iter_mut().zip(trace.pre[li].iter()) {
                *dv *= gelu_grad(p);
            }
        }
        matmul_at_acc_slices(&mut grads[*w..*w + din * dout], &trace.layer_in[li], &d_cur, rows, *din, *dout);
        {
            let dst = &mut grads[*b..*b + dout];
            for row in d_cur.chunks_exact(*dout) {
                for (g, &v) in dst.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        let mut d_in = vec![T::zero(); rows * din];
        matmul_bt_acc_slices(&mut d_in, &d_cur, &params[*w..*w + din * dout], rows, *dout, *din);
        d_cur = d_in;
    }
    d_cur
}

/// Unnormalized von Mises-Fisher kernel `exp(kappa * x . y)` on unit vectors.
pub fn vmf_kernel<T: Real>(x: &[T], y: &[T], kappa: f64) -> Result<T> {
    for v in [x, y] {
        let n: f64 = v.iter().map(|a| a.to64() * a.to64()).sum::<f64>();
        if (libm::sqrt(n) - 1.0).abs() > 1e-6 {
            return Err(CoreError::contract(format!("vmf_kernel input norm {} is not 1", libm::sqrt(n))));
        }
    }
    let mut dot = T::zero();
    for (a, b) in x.iter().zip(y.iter()) {
        dot = a.mul_add(*b, dot);
    }
    Ok((rf::<T>(kappa) * dot).exp())
}

/// Resubstitution kernel-density entropy with the vMF kernel:
/// `H = -(1/n) sum_i log sum_j exp(kappa z_i . z_j)`, including the j = i
/// self term, which bounds every per-sample gradient.
///
/// Inputs must be row-normalized; the returned gradient is projected onto
/// the tangent space of the sphere at each row (matching backpropagation
/// through an upstream L2 normalization).
pub fn kde_entropy<T: Real>(z: &[T], n: usize, d: usize, kappa: f64) -> (f64, Vec<T>) {
    assert_eq!(z.len(), n * d);
    assert!(n >= 1);
    let kap = rf::<T>(kappa);
    // pairwise kernels, shifted by the self-similarity bound for stability
    let mut kmat = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i..n {
            let mut dot = T::zero();
            for t in 0..d {
                dot = z[i * d + t].mul_add(z[j * d + t], dot);
            }
            let v = (kap * (dot - T::one())).exp();
            kmat[i * n + j] = v;
            kmat[j * n + i] = v;
        }
    }
    let mut s = vec![T::zero(); n];
    let mut h = 0.0f64;
    for i in 0..n {
        let mut acc = T::zero();
        for j in 0..n {
            acc += kmat[i * n + j];
        }
        s[i] = acc;
        // log S_i = kappa + log(sum of shifted kernels)
        h -= kappa + acc.to64().ln();
    }
    let h = h / n as f64;

    // dH/dz_a = -(1/n)[ (kappa/S_a) (sum_j k_aj z_j + k_aa z_a)
    //                 + kappa sum_{i!=a} (k_ia / S_i) z_i ]
    // (the extra k_aa z_a is the self-term derivative: d exp(k z.z)/dz = 2k z)
    let scale = -kappa / n as f64;
    let mut grad = vec![T::zero(); n * d];
    for a in 0..n {
        for j in 0..n {
            let mut w = (kmat[a * n + j] / s[a]).to64();
            if j == a {
                w += w;
            } else {
                w += (kmat[j * n + a] / s[j]).to64();
            }
            let w = rf::<T>(w * scale);
            for t in 0..d {
                grad[a * d + t] = w.mul_add(z[j * d + t], grad[a * d + t]);
            }
        }
    }
    tangent_project(&mut grad, z, n, d);
    (h, grad)
}

/// Kozachenko-Leonenko nearest-neighbor entropy:
/// `H = (1/n) sum_i log max(d(z_i, z_nn(i)), eps)` with Euclidean distance.
/// Gradient is tangent-projected like [`kde_entropy`]; a pair at the eps
/// floor contributes zero gradient.
pub fn koleo_entropy<T: Real>(z: &[T], n: usize, d: usize, eps: f64) -> Result<(f64, Vec<T>)> {
    assert_eq!(z.len(), n * d);
    if n < 2 {
        return Err(CoreError::parameter("koleo_entropy needs at least 2 samples"));
    }
    let mut h = 0.0f64;
    let mut grad = vec![T::zero(); n * d];
    for i in 0..n {
        let mut best = f64::INFINITY;
        let mut best_j = usize::MAX;
        for j in 0..n {
            if j == i {
                continue;
            }
            let mut sq = 0.0f64;
            for t in 0..d {
                let c = (z[i * d + t] - z[j * d + t]).to64();
                sq += c * c;
            }
            if sq < best {
                best = sq;
                best_j = j;
            }
        }
        let dist = libm::sqrt(best);
        let floored = dist.max(eps);
        h += floored.ln();
        if dist > eps {
            // d log d / dz_i = (z_i - z_j*) / d^2, mirrored for z_j*
            let w = rf::<T>(1.0 / (n as f64 * best));
            for t in 0..d {
                let diff = z[i * d + t] - z[best_j * d + t];
                grad[i * d + t] = w.mul_add(diff, grad[i * d + t]);
                grad[best_j * d + t] = grad[best_j * d + t] - w * diff;
            }
        }
    }
    tangent_project(&mut grad, z, n, d);
    Ok((h / n as f64, grad))
}

fn tangent_project<T: Real>(grad: &mut [T], z: &[T], n: usize, d: usize) {
    for i in 0..n {
        let g = &mut grad[i * d..(i + 1) * d];
        let zi = &z[i * d..(i + 1) * d];
        let mut dot = T::zero();
        for t in 0..d {
            dot = g[t].mul_add(zi[t], dot);
        }
        for t in 0..d {
            g[t] = g[t] - dot * zi[t];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegKind {
    None,
    Koleo,
    Kde,
}

impl RegKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegKind::None => "none",
            RegKind::Koleo => "koleo",
            RegKind::Kde => "kde",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RegKind::None),
            "koleo" | "KoLeo" => Ok(RegKind::Koleo),
            "kde" | "KDE" => Ok(RegKind::Kde),
            _ => Err(CoreError::parameter(format!("unknown regularizer '{s}'"))),
        }
    }
}

/// Entropy regularizer configuration: kind, vMF concentration, KoLeo
/// distance floor, and the loss weight.
#[derive(Debug, Clone)]
pub struct RegularizerConfig {
    pub kind: RegKind,
    pub kappa: f64,
    pub eps: f64,
    pub weight: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig { kind: RegKind::Kde, kappa: 5.0, eps: 1e-8, weight: 0.05 }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(CoreError::config("vMF concentration must be positive"));
        }
        if !(self.eps > 0.0) {
            return Err(CoreError::config("KoLeo eps must be positive"));
        }
        if self.weight < 0.0 {
            return Err(CoreError::config("regularizer weight must be >= 0"));
        }
        Ok(())
    }
}

/// Regularizer loss `-H` (minimizing the loss maximizes entropy), with the
/// unweighted gradient. `RegKind::None` contributes zero.
pub fn regularizer_loss<T: Real>(z: &[T], n: usize, d: usize, cfg: &RegularizerConfig) -> Result<(f64, Vec<T>)> {
    cfg.validate()?;
    match cfg.kind {
        RegKind::None => Ok((0.0, vec![T::zero(); n * d])),
        RegKind::Kde => {
            let (h, mut g) = kde_entropy(z, n, d, cfg.kappa);
            g.iter_mut().for_each(|v| *v = -*v);
            Ok((-h, g))
        }
        RegKind::Koleo => {
            let (h, mut g) = koleo_entropy(z, n, d, cfg.eps)?;
            g.iter_mut().for_each(|v| *v = -*v);
            Ok((-h, g))
        }
    }
}

/// Log-space Sinkhorn-Knopp normalization of teacher logits: alternating
/// column (uniform prototype mass n/K) and row (sum 1) balancing, finishing
/// with an exact row normalization.
pub fn sinkhorn_center<T: Real>(logits: &[T], n: usize, k: usize, iters: usize) -> Result<Vec<T>> {
    if n == 0 || k == 0 || logits.len() != n * k {
        return Err(CoreError::dimension("sinkhorn_center shape mismatch"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::numeric("sinkhorn_center requires finite logits"));
    }
    let l: Vec<f64> = logits.iter().map(|v| v.to64()).collect();
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; k];
    let log_col_target = libm::log(n as f64 / k as f64);
    for it in 0..iters {
        // column potentials: v_j = log(n/K) - lse_i(L_ij + u_i)
        for j in 0..k {
            let mut m = f64::NEG_INFINITY;
            for i in 0..n {
                m = m.max(l[i * k + j] + u[i]);
            }
            let mut s = 0.0;
            for i in 0..n {
                s += libm::exp(l[i * k + j] + u[i] - m);
            }
            v[j] = log_col_target - (m + libm::log(s));
        }
        // row potentials; the last iteration defers to the exact final
        // row normalization below
        if it + 1 < iters {
            for i in 0..n {
                let mut m = f64::NEG_INFINITY;
                for j in 0..k {
                    m = m.max(l[i * k + j] + v[j]);
                }
                let mut s = 0.0;
                for j in 0..k {
                    s += libm::exp(l[i * k + j] + v[j] - m);
                }
                u[i] = -(m + libm::log(s));
            }
        }
    }
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for j in 0..k {
            m = m.max(l[i * k + j] + v[j]);
        }
        let mut s = 0.0;
        for j in 0..k {
            s += libm::exp(l[i * k + j] + v[j] - m);
        }
        let log_z = m + libm::log(s);
        for j in 0..k {
            out[i * k + j] = rf::<T>(libm::exp(l[i * k + j] + v[j] - log_z));
        }
    }
    Ok(out)
}

/// Mean cross-entropy of teacher probability rows against the student's
/// tempered softmax. Returns the loss and `d loss / d student_logits`
/// (including the 1/rows averaging).
pub fn cross_entropy_rows<T: Real>(
    teacher_probs: &[T],
    student_logits: &[T],
    rows: usize,
    k: usize,
    student_temp: f64,
) -> Result<(f64, Vec<T>)> {
    if teacher_probs.len() != rows * k || student_logits.len() != rows * k {
        return Err(CoreError::dimension("cross_entropy_rows shape mismatch"));
    }
    if !(student_temp > 0.0) {
        return Err(CoreError::parameter("student temperature must be positive"));
    }
    if rows == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv_t = rf::<T>(1.0 / student_temp);
    let inv_rows = 1.0 / rows as f64;
    let mut loss = 0.0f64;
    let mut d = vec![T::zero(); rows * k];
    let mut probs = vec![T::zero(); k];
    for r in 0..rows {
        let z = &student_logits[r * k..(r + 1) * k];
        let t = &teacher_probs[r * k..(r + 1) * k];
        let mut m = z[0];
        for &v in z.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for j in 0..k {
            let e = ((z[j] - m) * inv_t).exp();
            probs[j] = e;
            sum += e;
        }
        let log_sum = sum.to64().ln();
        let inv_sum = T::one() / sum;
        for j in 0..k {
            let log_s = (z[j] - m).to64() / student_temp - log_sum;
            loss -= t[j].to64() * log_s * inv_rows;
            d[r * k + j] = (probs[j] * inv_sum - t[j]) * inv_t * rf::<T>(inv_rows);
        }
    }
    Ok((loss, d))
}

/// Multi-view distillation loss output.
pub struct DinoLoss<T> {
    pub loss: f64,
    /// Per student view, `batch x K` gradient.
    pub d_student: Vec<Vec<T>>,
    pub n_pairs: usize,
}

/// For every (teacher global view g, student view v) pair with v != g:
/// cross-entropy of the teacher's centered probabilities against the
/// student's tempered softmax, averaged over pairs and batch. Gradients
/// flow only to the student logits.
pub fn dino_loss<T: Real>(
    student_logits: &[Vec<T>],
    teacher_probs: &[Vec<T>],
    batch: usize,
    k: usize,
    student_temp: f64,
) -> Result<DinoLoss<T>> {
    let n_global = teacher_probs.len();
    let n_views = student_logits.len();
    if n_global == 0 || n_views < 2 {
        return Err(CoreError::parameter("dino_loss needs >= 1 teacher view and >= 2 student views"));
    }
    let n_pairs = n_global * (n_views - 1);
    let mut loss = 0.0f64;
    let mut d_student: Vec<Vec<T>> = student_logits.iter().map(|v| vec![T::zero(); v.len()]).collect();
    let pair_w = 1.0 / n_pairs as f64;
    for (g, t_probs) in teacher_probs.iter().enumerate() {
        for (v, s_logits) in student_logits.iter().enumerate() {
            if v == g {
                continue;
            }
            let (l, d) = cross_entropy_rows(t_probs, s_logits, batch, k, student_temp)?;
            loss += l * pair_w;
            let w = rf::<T>(pair_w);
            for (acc, dv) in d_student[v].iter_mut().zip(d.iter()) {
                *acc = w.mul_add(*dv, *acc);
            }
        }
    }
    Ok(DinoLoss { loss, d_student, n_pairs })
}

/// Masked-token loss: cross-entropy of teacher patch prototypes against the
/// student's at masked positions only, averaged over masked tokens. Empty
/// mask = zero loss.
pub fn ibot_loss<T: Real>(
    student_patch_logits: &[T],
    teacher_patch_probs: &[T],
    masked_tokens: usize,
    k: usize,
    student_temp: f64,
) -> Result<(f64, Vec<T>)> {
    if masked_tokens == 0 {
        return Ok((0.0, Vec::new()));
    }
    cross_entropy_rows(teacher_patch_probs, student_patch_logits, masked_tokens, k, student_temp)
}

/// Block-random masking over a `grid x grid` patch lattice: random
/// rectangles accumulate until exactly `round(ratio * n)` cells are masked
/// (the final block is truncated). Returns sorted patch indices.
pub fn block_mask(grid: usize, ratio: f64, rng: &mut Rng) -> Vec<usize> {
    let n = grid * grid;
    let target = libm::round(ratio * n as f64) as usize;
    let mut masked = vec![false; n];
    let mut count = 0usize;
    while count < target {
        let bw = 1 + rng.below(3.min(grid));
        let bh = 1 + rng.below(3.min(grid));
        let x0 = rng.below(grid.saturating_sub(bw) + 1);
        let y0 = rng.below(grid.saturating_sub(bh) + 1);
        'block: for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let idx = y * grid + x;
                if !masked[idx] {
                    masked[idx] = true;
                    count += 1;
                    if count == target {
                        break 'block;
                    }
                }
            }
        }
    }
    (0..n).filter(|&i| masked[i]).collect()
}

/// Loss components of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l_dino: f64,
    pub l_ibot: f64,
    pub l_reg: f64,
    pub total: f64,
    pub n: usize,
}

/// Combine components: `total = l_dino + l_ibot + weight * l_reg`.
pub fn total_loss(l_dino: f64, l_ibot: f64, l_reg: f64, weight: f64, n: usize) -> Result<LossParts> {
    let total = l_dino + l_ibot + weight * l_reg;
    if !total.is_finite() {
        return Err(CoreError::numeric(format!(
            "non-finite loss: dino {l_dino}, ibot {l_ibot}, reg {l_reg}"
        )));
    }
    Ok(LossParts { l_dino, l_ibot, l_reg, total, n })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<f64> {
        let mut z: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
        crate::tensor::l2_normalize_rows(&mut z, d);
        z
    }

    #[test]
    fn vmf_examples() {
        let e1 = [1.0f64, 0.0, 0.0];
        let e2 = [0.0f64, 1.0, 0.0];
        let neg = [-1.0f64, 0.0, 0.0];
        assert!((vmf_kernel(&e1, &e1, 5.0).unwrap() - 148.4131591025766).abs() < 1e-9);
        assert!((vmf_kernel(&e1, &e2, 5.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((vmf_kernel(&e1, &neg, 5.0).unwrap() - 0.006737946999085467).abs() < 1e-12);
        let bad = [0.5f64, 0.0, 0.0];
        assert!(matches!(vmf_kernel(&bad, &e1, 5.0), Err(CoreError::Contract(_))));
    }

    #[test]
    fn kde_hand_examples_to_1e9() {
        let z1 = [1.0f64, 0.0];
        let (h1, _) = kde_entropy(&z1, 1, 2, 5.0);
        assert!((h1 - (-5.0)).abs() < 1e-9, "{h1}");

        let z2 = [1.0f64, 0.0, 1.0, 0.0];
        let (h2, _) = kde_entropy(&z2, 2, 2, 5.0);
        assert!((h2 - (-(5.0 + core::f64::consts::LN_2))).abs() < 1e-9, "{h2}");

        let z3 = [1.0f64, 0.0, -1.0, 0.0];
        let (h3, _) = kde_entropy(&z3, 2, 2, 5.0);
        let expect = -((libm::exp(5.0) + libm::exp(-5.0)).ln());
        assert!((h3 - expect).abs() < 1e-9, "{h3} vs {expect}");
        assert!((expect - (-5.000045398899218)).abs() < 1e-9);
    }

    #[test]
    fn koleo_hand_examples() {
        let anti = [1.0f64, 0.0, -1.0, 0.0];
        let (h, _) = koleo_entropy(&anti, 2, 2, 1e-8).unwrap();
        assert!((h - core::f64::consts::LN_2).abs() < 1e-12);

        let coincident = [1.0f64, 0.0, 1.0, 0.0];
        let (h, g) = koleo_entropy(&coincident, 2, 2, 1e-8).unwrap();
        assert!((h - (1e-8f64).ln()).abs() < 1e-9);
        assert!(g.iter().all(|&v| v == 0.0), "floored pair has zero gradient");

        let c = |a: f64| [libm::cos(a), libm::sin(a)];
        let mut z = alloc::vec::Vec::new();
        for i in 0..3 {
            z.extend_from_slice(&c(i as f64 * core::f64::consts::TAU / 3.0));
        }
        let (h, _) = koleo_entropy(&z, 3, 2, 1e-8).unwrap();
        assert!((h - 0.5493061443340548).abs() < 1e-9, "{h}");

        assert!(koleo_entropy(&[1.0f64, 0.0], 1, 2, 1e-8).is_err());
    }

    #[test]
    fn kde_invariances() {
        let mut rng = Rng::new(5);
        let (n, d) = (8, 6);
        let z = unit_rows(n, d, &mut rng);
        let (h, _) = kde_entropy(&z, n, d, 5.0);

        // row permutation
        let mut zp = z.clone();
        zp.rotate_left(2 * d);
        let (hp, _) = kde_entropy(&zp, n, d, 5.0);
        assert!((h - hp).abs() < 1e-12);

        // random rotation (Gram-Schmidt of a random matrix)
        let mut q = vec![0.0f64; d * d];
        for v in q.iter_mut() {
            *v = rng.normal();
        }
        for i in 0..d {
            for j in 0..i {
                let dot: f64 = (0..d).map(|t| q[i * d + t] * q[j * d + t]).sum();
                for t in 0..d {
                    q[i * d + t] -= dot * q[j * d + t];
                }
            }
            let norm: f64 = (0..d).map(|t| q[i * d + t] * q[i * d + t]).sum::<f64>().sqrt();
            for t in 0..d {
                q[i * d + t] /= norm;
            }
        }
        let mut zr = vec![0.0f64; n * d];
        for i in 0..n {
            for j in 0..d {
                let mut s = 0.0;
                for t in 0..d {
                    s += z[i * d + t] * q[t * d + j];
                }
                zr[i * d + j] = s;
            }
        }
        let (hr, _) = kde_entropy(&zr, n, d, 5.0);
        assert!((h - hr).abs() < 1e-9, "{h} vs {hr}");
    }

    #[test]
    fn kde_gradient_bounded_on_coincident_cluster() {
        // every point identical: KoLeo would blow up, KDE stays <= 2 kappa
        let kappa = 5.0;
        let (n, d) = (16, 8);
        let mut rng = Rng::new(9);
        let row = unit_rows(1, d, &mut rng);
        let mut z = alloc::vec::Vec::new();
        for _ in 0..n {
            z.extend_from_slice(&row);
        }
        let (_, g) = kde_entropy(&z, n, d, kappa);
        for i in 0..n {
            let norm: f64 = (0..d).map(|t| g[i * d + t] * g[i * d + t]).sum::<f64>().sqrt();
            assert!(norm <= 2.0 * kappa + 1e-9, "grad norm {norm}");
        }
    }

    #[test]
    fn kde_koleo_gradient_contrast_on_tight_cluster() {
        // pair distance below 1e-3: KoLeo per-sample gradient dominates KDE's
        let d = 8;
        let mut rng = Rng::new(11);
        let base = unit_rows(1, d, &mut rng);
        let mut z = base.clone();
        let mut near = base.clone();
        near[0] += 1e-4;
        crate::tensor::l2_normalize_rows(&mut near, d);
        z.extend_from_slice(&near);
        z.extend_from_slice(&unit_rows(2, d, &mut rng));
        let n = 4;
        let (_, gk) = kde_entropy(&z, n, d, 5.0);
        let (_, gl) = koleo_entropy(&z, n, d, 1e-8).unwrap();
        let norm = |g: &[f64], i: usize| (0..d).map(|t| g[i * d + t] * g[i * d + t]).sum::<f64>().sqrt();
        let kde_max = (0..n).map(|i| norm(&gk, i)).fold(0.0, f64::max);
        let koleo_max = (0..n).map(|i| norm(&gl, i)).fold(0.0, f64::max);
        assert!(koleo_max > kde_max, "koleo {koleo_max} vs kde {kde_max}");
        assert!(kde_max <= 10.0 + 1e-9);
    }

    /// Finite differences through renormalization: f(Z) = H(normalize(Z)).
    fn fd_check(reg: RegKind) {
        let (n, d) = (8, 16);
        let mut rng = Rng::new(21);
        let z = unit_rows(n, d, &mut rng);
        let cfg = RegularizerConfig { kind: reg, ..RegularizerConfig::default() };
        let (_, grad) = regularizer_loss(&z, n, d, &cfg).unwrap();
        let f = |zz: &[f64]| -> f64 {
            let mut zn = zz.to_vec();
            crate::tensor::l2_normalize_rows(&mut zn, d);
            regularizer_loss(&zn, n, d, &cfg).unwrap().0
        };
        let h = 1e-6;
        for i in 0..n * d {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
            assert!(rel <= 1e-5, "{reg:?} [{i}]: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn kde_gradient_matches_fd() {
        fd_check(RegKind::Kde);
    }

    #[test]
    fn koleo_gradient_matches_fd() {
        fd_check(RegKind::Koleo);
    }

    #[test]
    fn regularizer_none_is_zero() {
        let z = [1.0f64, 0.0, 0.0, 1.0];
        let cfg = RegularizerConfig { kind: RegKind::None, ..RegularizerConfig::default() };
        let (l, g) = regularizer_loss(&z, 2, 2, &cfg).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sinkhorn_uniform_and_hand_example() {
        let logits = vec![0.5f64; 4 * 8];
        let p = sinkhorn_center(&logits, 4, 8, 3).unwrap();
        for &v in &p {
            assert!((v - 1.0 / 8.0).abs() < 1e-12);
        }

        // [[ln2, 0], [0, ln2]] is already balanced after one column+row
        // pass: [[2/3, 1/3], [1/3, 2/3]]
        let l2 = vec![core::f64::consts::LN_2, 0.0, 0.0, core::f64::consts::LN_2];
        let p = sinkhorn_center(&l2, 2, 2, 3).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-9, "{p:?}");
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-9);
        assert!((p[2] - 1.0 / 3.0).abs() < 1e-9);
        assert!((p[3] - 2.0 / 3.0).abs() < 1e-9);
        assert!(p[0] > p[1] && p[3] > p[2]);
    }

    #[test]
    fn sinkhorn_row_and_column_balance() {
        let (n, k) = (64, 256);
        let mut rng = Rng::new(3);
        let logits: Vec<f64> = (0..n * k).map(|_| rng.normal()).collect();
        let p = sinkhorn_center(&logits, n, k, 3).unwrap();
        for row in p.chunks_exact(k) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
        }
        let target = n as f64 / k as f64;
        for j in 0..k {
            let s: f64 = (0..n).map(|i| p[i * k + j]).sum();
            assert!((s / target - 1.0).abs() <= 1e-3, "col {j} sum {s}");
        }
    }

    #[test]
    fn sinkhorn_column_deviation_decreases_with_iters() {
        let (n, k) = (32, 64);
        let mut rng = Rng::new(8);
        let logits: Vec<f64> = (0..n * k).map(|_| 2.0 * rng.normal()).collect();
        let target = n as f64 / k as f64;
        let dev = |iters: usize| -> f64 {
            let p = sinkhorn_center(&logits, n, k, iters).unwrap();
            (0..k)
                .map(|j| ((0..n).map(|i| p[i * k + j]).sum::<f64>() / target - 1.0).abs())
                .fold(0.0, f64::max)
        };
        let (d1, d2, d3) = (dev(1), dev(2), dev(3));
        assert!(d2 <= d1 + 1e-12, "{d1} -> {d2}");
        assert!(d3 <= d2 + 1e-12, "{d2} -> {d3}");
    }

    #[test]
    fn dino_loss_uniform_teacher_and_pair_count() {
        let b = 3;
        let k = 4;
        let uniform = vec![0.25f64; b * k];
        // constant student logits: CE against uniform equals ln K
        let student: Vec<Vec<f64>> = (0..10).map(|_| vec![0.7f64; b * k]).collect();
        let teacher = vec![uniform.clone(), uniform.clone()];
        let out = dino_loss(&student, &teacher, b, k, 0.1).unwrap();
        assert_eq!(out.n_pairs, 18);
        assert!((out.loss - (4.0f64).ln()).abs() < 1e-9, "{}", out.loss);

        // permutation invariance of the CE under a uniform teacher
        let mut rng = Rng::new(2);
        let logits: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let mut permuted = logits.clone();
        permuted.swap(0, 3);
        permuted.swap(1, 2);
        let (l1, _) = cross_entropy_rows(&uniform[..k], &logits, 1, k, 0.1).unwrap();
        let (l2, _) = cross_entropy_rows(&uniform[..k], &permuted, 1, k, 0.1).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(l1 >= (4.0f64).ln() - 1e-12);
    }

    #[test]
    fn dino_loss_gradient_matches_fd() {
        let b = 2;
        let k = 5;
        let mut rng = Rng::new(13);
        let mut mk_probs = |rng: &mut Rng| -> Vec<f64> {
            let mut p: Vec<f64> = (0..b * k).map(|_| rng.next_f64() + 0.1).collect();
            for row in p.chunks_exact_mut(k) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            p
        };
        let teacher = vec![mk_probs(&mut rng), mk_probs(&mut rng)];
        let student: Vec<Vec<f64>> =
            (0..4).map(|_| (0..b * k).map(|_| rng.normal()).collect()).collect();
        let out = dino_loss(&student, &teacher, b, k, 0.1).unwrap();
        let h = 1e-6;
        for v in 0..student.len() {
            for i in 0..b * k {
                let mut sp = student.clone();
                sp[v][i] += h;
                let lp = dino_loss(&sp, &teacher, b, k, 0.1).unwrap().loss;
                let mut sm = student.clone();
                sm[v][i] -= h;
                let lm = dino_loss(&sm, &teacher, b, k, 0.1).unwrap().loss;
                let fd = (lp - lm) / (2.0 * h);
                let g = out.d_student[v][i];
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-4);
                assert!(rel <= 1e-5, "view {v} idx {i}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn dino_loss_minimized_when_student_matches_teacher() {
        // gradient descent on the student logits against a fixed teacher
        // converges to softmax(student/temp) == teacher
        let b = 1;
        let k = 4;
        let teacher = vec![vec![0.4f64, 0.3, 0.2, 0.1], vec![0.4f64, 0.3, 0.2, 0.1]];
        let mut student = vec![vec![0.0f64; k], vec![0.0f64; k], vec![0.0f64; k]];
        let temp = 0.5;
        for _ in 0..8000 {
            let out = dino_loss(&student, &teacher, b, k, temp).unwrap();
            for v in 0..student.len() {
                for i in 0..k {
                    student[v][i] -= out.d_student[v][i];
                }
            }
        }
        for v in &student {
            let mut probs = v.clone();
            crate::tensor::softmax_row_inplace(&mut probs, temp);
            for (p, t) in probs.iter().zip(teacher[0].iter()) {
                assert!((p - t).abs() < 1e-4, "{p} vs {t}");
            }
        }
    }

    #[test]
    fn ibot_loss_edges_and_fd() {
        let (l, g) = ibot_loss::<f64>(&[], &[], 0, 7, 0.1).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.is_empty());

        let k = 6;
        let m = 5;
        let uniform = vec![1.0 / k as f64; m * k];
        let logits = vec![0.3f64; m * k];
        let (l, _) = ibot_loss(&logits, &uniform, m, k, 0.1).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-9);

        let mut rng = Rng::new(4);
        let logits: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let mut probs: Vec<f64> = (0..m * k).map(|_| rng.next_f64() + 0.05).collect();
        for row in probs.chunks_exact_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let (_, grad) = ibot_loss(&logits, &probs, m, k, 0.1).unwrap();
        let h = 1e-6;
        for i in 0..m * k {
            let mut lp = logits.clone();
            lp[i] += h;
            let (a, _) = ibot_loss(&lp, &probs, m, k, 0.1).unwrap();
            let mut lm = logits.clone();
            lm[i] -= h;
            let (b, _) = ibot_loss(&lm, &probs, m, k, 0.1).unwrap();
            let fd = (a - b) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-4);
            assert!(rel <= 1e-5);
        }
    }

    #[test]
    fn block_mask_hits_target_count() {
        let mut rng = Rng::new(7);
        for _ in 0..50 {
            let m = block_mask(8, 0.3, &mut rng);
            // round(0.3 * 64) = 19
            assert_eq!(m.len(), 19);
            assert!(m.windows(2).all(|w| w[0] < w[1]));
            assert!(m.iter().all(|&i| i < 64));
        }
        let empty = block_mask(8, 0.0, &mut rng);
        assert!(empty.is_empty());
    }

    #[test]
    fn head_forward_shapes_and_gradcheck() {
        let cfg = HeadConfig { layers: 3, hidden_dim: 12, bottleneck_dim: 6, prototypes: 10, shared_heads: false };
        let layout = build_head_layout(8, &cfg);
        let mut rng = Rng::new(15);
        let mut params: Vec<f64> = init_head_params(&layout, &mut rng);
        // scale weights up so bottleneck norms are O(1); near-zero norms
        // make the normalization too curved for finite differences
        params.iter_mut().for_each(|v| *v *= 10.0);
        let rows = 3;
        let x: Vec<f64> = (0..rows * 8).map(|_| rng.normal()).collect();
        let (logits, trace) = head_forward(&layout, &params, &x, rows);
        assert_eq!(logits.len(), rows * 10);
        assert!(logits.iter().all(|v| v.abs() <= 1.0 + 1e-9), "cosine logits bounded");

        let m: Vec<f64> = (0..rows * 10).map(|_| rng.normal()).collect();
        let loss = |p: &[f64], xx: &[f64]| -> f64 {
            let (lg, _) = head_forward(&layout, p, xx, rows);
            lg.iter().zip(m.iter()).map(|(a, b)| a * b).sum()
        };
        let mut grads = vec![0.0f64; layout.total];
        let d_input = head_backward(&layout, &params, &trace, &m, &mut grads);

        let h = 1e-6;
        let mut rng2 = Rng::new(99);
        for e in &layout.entries {
            for _ in 0..e.len.min(5) {
                let i = e.offset + rng2.below(e.len);
                let mut p = params.clone();
                p[i] += h;
                let lp = loss(&p, &x);
                p[i] -= 2.0 * h;
                let lm = loss(&p, &x);
                let fd = (lp - lm) / (2.0 * h);
                let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-4);
                assert!(rel <= 1e-4, "{} [{i}]: {fd} vs {}", e.name, grads[i]);
            }
        }
        for i in 0..rows * 8 {
            let mut xp = x.clone();
            xp[i] += h;
            let lp = loss(&params, &xp);
            let mut xm = x.clone();
            xm[i] -= h;
            let lm = loss(&params, &xm);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - d_input[i]).abs() / fd.abs().max(d_input[i].abs()).max(1e-4);
            assert!(rel <= 1e-4, "input [{i}]: {fd} vs {}", d_input[i]);
        }
    }

    #[test]
    fn total_loss_composition() {
        let p = total_loss(1.5, 0.5, 2.0, 0.0, 64).unwrap();
        assert_eq!(p.total, 2.0);
        let p = total_loss(1.5, 0.5, 2.0, 0.05, 64).unwrap();
        assert!((p.total - 2.1).abs() < 1e-12);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.05, 1).is_err());

        // doubling the weight doubles the regularizer's contribution: the
        // returned gradient is unweighted and the trainer scales it
        let mut rng = Rng::new(1);
        let z = unit_rows(6, 4, &mut rng);
        let cfg = RegularizerConfig::default();
        let (_, g) = regularizer_loss(&z, 6, 4, &cfg).unwrap();
        let contrib1: f64 = g.iter().map(|v| v * 0.05).sum();
        let contrib2: f64 = g.iter().map(|v| v * 0.10).sum();
        assert!((contrib2 - 2.0 * contrib1).abs() < 1e-12);
    }
}
