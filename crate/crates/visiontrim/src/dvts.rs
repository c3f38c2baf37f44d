//! Dominant vision token selection.
//!
//! Fuses two importance signals over the visual tokens: the \[CLS\] attention
//! distribution averaged across heads (global semantics) and a windowed
//! dual-kernel affinity over the token grid (local spatial continuity,
//! "LTAM"). The fused distribution drives top-K retention.
//!
//! Tie-breaks resolve to the lowest index everywhere in this crate.

use crate::error::{Error, Result};
use crate::tensor::{mean_and_variance, row_softmax, softmax64, Tensor};

/// N×d visual token features, optionally tagged with their grid layout.
#[derive(Debug, Clone)]
pub struct TokenSet {
    features: Tensor,
    grid: Option<TokenGrid>,
}

impl TokenSet {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::validation(format!(
                "token features must be rank-2 (N×d), got rank {}",
                features.rank()
            )));
        }
        Ok(TokenSet { features, grid: None })
    }

    pub fn with_grid(features: Tensor, grid: TokenGrid) -> Result<Self> {
        let set = TokenSet::new(features)?;
        if set.len() != grid.len() {
            return Err(Error::validation(format!(
                "grid {}×{} does not cover {} tokens",
                grid.height(),
                grid.width(),
                set.len()
            )));
        }
        Ok(TokenSet { grid: Some(grid), ..set })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // nrows >= 1 by tensor invariant
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn grid(&self) -> Option<&TokenGrid> {
        self.grid.as_ref()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        self.features.row(i)
    }

    /// Sub-set consisting of the given rows, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Result<TokenSet> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::validation(format!("token index {i} out of range")));
            }
            data.extend_from_slice(self.token(i));
        }
        TokenSet::new(Tensor::matrix(indices.len(), d, data)?)
    }
}

/// Row-major H_g×W_g layout; token i sits at (x, y) = (i / W_g, i % W_g).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("grid dims must be positive"));
        }
        Ok(TokenGrid { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coords(&self, i: usize) -> (i64, i64) {
        ((i / self.width) as i64, (i % self.width) as i64)
    }
}

/// Per-head \[CLS\] query vectors and token key vectors.
///
/// `d_k` is the model's key dimension used as the attention scale; it is an
/// explicit field rather than being read off the stored head dim, because
/// upstream per-head splits may leave the serialized dim different from the
/// scale the model applied.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    q_cls: Tensor,
    keys: Tensor,
    d_k: usize,
}

impl AttentionInputs {
    pub fn new(q_cls: Tensor, keys: Tensor, d_k: usize) -> Result<Self> {
        if q_cls.rank() != 2 {
            return Err(Error::validation("q_cls must be rank-2 (H×dim)"));
        }
        if keys.rank() != 3 {
            return Err(Error::validation("keys must be rank-3 (H×N×dim)"));
        }
        let (h, dim) = (q_cls.dims()[0], q_cls.dims()[1]);
        if keys.dims()[0] != h {
            return Err(Error::validation(format!(
                "head count mismatch: q_cls has {h}, keys has {}",
                keys.dims()[0]
            )));
        }
        if keys.dims()[2] != dim {
            return Err(Error::validation(format!(
                "key dim mismatch: q_cls dim {dim}, keys dim {}",
                keys.dims()[2]
            )));
        }
        if d_k == 0 {
            return Err(Error::validation("d_k must be positive"));
        }
        Ok(AttentionInputs { q_cls, keys, d_k })
    }

    pub fn heads(&self) -> usize {
        self.q_cls.dims()[0]
    }

    pub fn tokens(&self) -> usize {
        self.keys.dims()[1]
    }
}

/// H×N matrix whose rows are attention distributions over the tokens.
#[derive(Debug, Clone)]
pub struct ClsAttention {
    rows: Tensor,
}

impl ClsAttention {
    pub fn new(rows: Tensor) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(Error::validation("attention rows must be rank-2 (H×N)"));
        }
        for h in 0..rows.nrows() {
            let mut sum = 0.0f64;
            for &v in rows.row(h) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::validation(format!(
                        "attention entry {v} in head {h} outside [0, 1]"
                    )));
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::validation(format!(
                    "attention head {h} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(ClsAttention { rows })
    }

    pub fn heads(&self) -> usize {
        self.rows.nrows()
    }

    pub fn tokens(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }
}

/// Window size and kernel weights for the local affinity sweep.
///
/// `w1` and `w2` sit in kernel denominators and must be positive; `w3` only
/// scales the positional term and may be zero.
#[derive(Debug, Clone, Copy)]
pub struct LtamParams {
    pub kernel_size: usize,
    pub w1: f32,
    pub w2: f32,
    pub w3: f32,
    pub sigma_floor: f32,
}

impl Default for LtamParams {
    fn default() -> Self {
        LtamParams {
            kernel_size: 3,
            w1: 0.3,
            w2: 0.3,
            w3: 0.5,
            sigma_floor: 1e-6,
        }
    }
}

impl LtamParams {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::validation(format!(
                "kernel_size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if !(self.w1.is_finite() && self.w2.is_finite() && self.w3.is_finite()) {
            return Err(Error::validation("kernel weights must be finite"));
        }
        if self.w1 <= 0.0 || self.w2 <= 0.0 {
            return Err(Error::validation("w1 and w2 must be positive (kernel denominators)"));
        }
        if self.w3 < 0.0 {
            return Err(Error::validation("w3 must be nonnegative"));
        }
        if !(self.sigma_floor.is_finite() && self.sigma_floor > 0.0) {
            return Err(Error::validation("sigma_floor must be positive"));
        }
        Ok(())
    }
}

/// Length-N probability vector over visual tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    values: Vec<f32>,
}

impl ImportanceScores {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("importance scores cannot be empty"));
        }
        let mut sum = 0.0f64;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
            if v < 0.0 {
                return Err(Error::validation(format!("negative score {v} at index {i}")));
            }
            sum += v as f64;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!("scores sum to {sum}, expected 1")));
        }
        Ok(ImportanceScores { values })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::validation("importance scores cannot be empty"));
        }
        ImportanceScores::new(vec![(1.0f64 / n as f64) as f32; n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }
}

/// Scaled dot-product attention of the \[CLS\] query against all token keys,
/// one softmaxed row per head.
pub fn cls_attention_from_qk(inputs: &AttentionInputs) -> Result<ClsAttention> {
    let (h, n) = (inputs.heads(), inputs.tokens());
    let dim = inputs.q_cls.dims()[1];
    let scale = (inputs.d_k as f64).sqrt();
    let mut logits = Vec::with_capacity(h * n);
    for head in 0..h {
        let q = inputs.q_cls.row(head);
        let keys = inputs.keys.slice2(head);
        for i in 0..n {
            let k = &keys[i * dim..(i + 1) * dim];
            let mut dot = 0.0f64;
            for (a, b) in q.iter().zip(k) {
                dot += *a as f64 * *b as f64;
            }
            logits.push((dot / scale) as f32);
        }
    }
    ClsAttention::new(row_softmax(&Tensor::matrix(h, n, logits)?)?)
}

/// Head-averaged \[CLS\] attention, renormalized to a distribution by softmax.
pub fn global_scores(attn: &ClsAttention) -> Result<ImportanceScores> {
    let (h, n) = (attn.heads(), attn.tokens());
    let mut means = vec![0.0f64; n];
    for head in 0..h {
        for (i, &v) in attn.rows().row(head).iter().enumerate() {
            means[i] += v as f64;
        }
    }
    for m in &mut means {
        *m /= h as f64;
    }
    let probs = softmax64(&means);
    ImportanceScores::new(probs.iter().map(|&p| p as f32).collect())
}

/// Raw per-token local affinity means over arbitrary integer coordinates.
///
/// For each token p, neighbors are the tokens whose coordinates fall inside
/// the k×k window centered on p's coordinate, excluding p itself; windows
/// truncate at whatever coordinates exist (grid borders, or gaps left by an
/// earlier pruning stage). Kernel scales σ_f and σ_p are the population
/// standard deviations of all neighbor-pair feature / position distances
/// collected over the whole sweep, floored at `sigma_floor`.
pub(crate) fn ltam_raw(features: &Tensor, coords: &[(i64, i64)], params: &LtamParams) -> Result<Vec<f64>> {
    params.validate()?;
    let n = features.nrows();
    if coords.len() != n {
        return Err(Error::validation(format!(
            "coordinate count {} does not match token count {n}",
            coords.len()
        )));
    }
    let radius = (params.kernel_size / 2) as i64;

    // Sweep once, recording (p, q) neighbor pairs with their distances in
    // ascending (p, q) order so every reduction below is order-stable.
    let mut pairs: Vec<(usize, f64, f64)> = Vec::new(); // (p, feat_dist, pos_dist)
    let mut degree = vec![0usize; n];
    for p in 0..n {
        let (px, py) = coords[p];
        let fp = features.row(p);
        for (q, &(qx, qy)) in coords.iter().enumerate() {
            if q == p {
                continue;
            }
            if (qx - px).abs() > radius || (qy - py).abs() > radius {
                continue;
            }
            let fq = features.row(q);
            let mut sq = 0.0f64;
            for (a, b) in fp.iter().zip(fq) {
                let d = *a as f64 - *b as f64;
                sq += d * d;
            }
            let dx = (px - qx) as f64;
            let dy = (py - qy) as f64;
            pairs.push((p, sq.sqrt(), (dx * dx + dy * dy).sqrt()));
            degree[p] += 1;
        }
    }

    let sigma_f = population_std(pairs.iter().map(|&(_, df, _)| df)).max(params.sigma_floor as f64);
    let sigma_p = population_std(pairs.iter().map(|&(_, _, dp)| dp)).max(params.sigma_floor as f64);

    let feat_denom = params.w1 as f64 * sigma_f;
    let pos_denom = params.w2 as f64 * sigma_p;
    let w3 = params.w3 as f64;

    let mut raw = vec![0.0f64; n];
    for &(p, df, dp) in &pairs {
        let kf = -(df / feat_denom) * (df / feat_denom);
        let kp = -(dp / pos_denom) * (dp / pos_denom);
        raw[p] += kf + w3 * kp;
    }
    for p in 0..n {
        if degree[p] > 0 {
            raw[p] /= degree[p] as f64;
        }
        // empty neighborhood keeps the defined raw score of 0
    }
    Ok(raw)
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut count = 0usize;
    let mut sum = 0.0f64;
    for v in values.clone() {
        sum += v;
        count += 1;
    }
    if count == 0 {
        return 0.0;
    }
    let mean = sum / count as f64;
    let mut sq = 0.0f64;
    for v in values {
        let d = v - mean;
        sq += d * d;
    }
    (sq / count as f64).sqrt()
}

/// Local importance over a dense token grid: windowed dual-kernel affinity
/// means converted to a distribution by softmax.
pub fn ltam_scores(features: &TokenSet, grid: &TokenGrid, params: &LtamParams) -> Result<ImportanceScores> {
    if features.len() != grid.len() {
        return Err(Error::validation(format!(
            "grid {}×{} does not cover {} tokens",
            grid.height(),
            grid.width(),
            features.len()
        )));
    }
    let coords: Vec<(i64, i64)> = (0..grid.len()).map(|i| grid.coords(i)).collect();
    ltam_scores_at(features.features(), &coords, params)
}

/// Local importance over explicit token coordinates (survivor sets from an
/// earlier pruning stage keep their original grid positions; missing
/// neighbors are simply absent from the window).
pub fn ltam_scores_at(features: &Tensor, coords: &[(i64, i64)], params: &LtamParams) -> Result<ImportanceScores> {
    let raw = ltam_raw(features, coords, params)?;
    let probs = softmax64(&raw);
    ImportanceScores::new(probs.iter().map(|&p| p as f32).collect())
}

/// Variance-weighted blend of global and local importance.
///
/// The default ratio weights the global term by the share of the *local*
/// variance: α = σ_l² / (σ_g² + σ_l²). `swap_ratio` flips the ratio to
/// α = σ_g² / (σ_g² + σ_l²) for experimentation. When both variances are
/// zero (both inputs uniform) α falls back to 0.5; the blend is the same
/// vector either way.
pub fn adaptive_fuse(global: &ImportanceScores, local: &ImportanceScores) -> Result<(ImportanceScores, f32)> {
    adaptive_fuse_cfg(global, local, false)
}

pub fn adaptive_fuse_cfg(
    global: &ImportanceScores,
    local: &ImportanceScores,
    swap_ratio: bool,
) -> Result<(ImportanceScores, f32)> {
    if global.len() != local.len() {
        return Err(Error::validation(format!(
            "score length mismatch: global {}, local {}",
            global.len(),
            local.len()
        )));
    }
    let (_, var_g) = mean_and_variance(global.values())?;
    let (_, var_l) = mean_and_variance(local.values())?;
    let total = var_g + var_l;
    let alpha = if total == 0.0 {
        0.5
    } else if swap_ratio {
        var_g / total
    } else {
        var_l / total
    };
    let fused: Vec<f32> = global
        .values()
        .iter()
        .zip(local.values())
        .map(|(&g, &l)| (alpha * g as f64 + (1.0 - alpha) * l as f64) as f32)
        .collect();
    Ok((ImportanceScores::new(fused)?, alpha as f32))
}

/// Indices of the k largest values; ties break toward the lower index and
/// the result is returned in ascending index order.
pub fn top_k_indices(values: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::validation("k must be positive"));
    }
    if k > values.len() {
        return Err(Error::validation(format!(
            "k = {k} exceeds {} candidates",
            values.len()
        )));
    }
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_unstable_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("finite values compare totally")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Top-K retention over the fused importance distribution.
pub fn select_dominant(scores: &ImportanceScores, k: usize) -> Result<Vec<usize>> {
    top_k_indices(scores.values(), k)
}
