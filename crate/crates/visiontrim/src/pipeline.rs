//! Budget planning and end-to-end orchestration.
//!
//! A pruning run composes the scoring and merging primitives in a fixed
//! order: global scores → local affinity → variance-weighted fusion → top-K
//! retention → text-guided complement. This module wires those calls
//! together for the vision-encoding stage, the LLM-decoding stage, and the
//! per-frame video path, carrying original coordinates and provenance for
//! every surviving token.

use crate::dvts::{
    adaptive_fuse_cfg, global_scores, ltam_scores, select_dominant, ClsAttention, LtamParams,
    TokenGrid, TokenSet,
};
use crate::error::{Error, Result};
use crate::llm_stage::{
    stage2_prune, CrossModalAxis, DecoderHiddenStates, Stage2Config, Stage2Ltam,
};
use crate::tensor::Tensor;
use crate::tgvc::{
    aggregate_clusters, assign_tokens, compose_final, pick_centers, text_relevance, Provenance,
    TextFeatures,
};

/// Split a retention budget between dominant selection and the complement.
///
/// K = round(retain · a/(a+b)), R = retain − K; the default 3:1 ratio
/// reproduces the published per-budget splits.
pub fn plan_budget(total: usize, retain: usize, ratio: (u32, u32)) -> Result<(usize, usize)> {
    if retain == 0 {
        return Err(Error::validation("retain must be positive"));
    }
    if retain > total {
        return Err(Error::validation(format!(
            "retain {retain} exceeds total {total}"
        )));
    }
    let (a, b) = ratio;
    if a == 0 || b == 0 {
        return Err(Error::validation("ratio parts must be positive"));
    }
    let k = (retain as f64 * a as f64 / (a + b) as f64).round() as usize;
    Ok((k, retain - k))
}

/// Retention budgets and hyperparameters for a one- or two-stage run.
/// Insertion layers are carried as metadata for reporting and the staged
/// FLOPs model; the library itself is model-agnostic.
#[derive(Debug, Clone)]
pub struct BudgetPlan {
    pub total_tokens: usize,
    pub retain_total: usize,
    pub stage1_retain: usize,
    pub stage1_split: (usize, usize),
    /// Nominal stage-2 split assuming the stage-1 survivors enter intact.
    pub stage2_split: (usize, usize),
    /// Explicit stage-2 retention rate; overrides the derived count.
    pub stage2_rate: Option<f64>,
    pub ratio: (u32, u32),
    pub ltam: LtamParams,
    pub tgvc_iterations: usize,
    pub vision_layer: usize,
    pub llm_layer: usize,
}

impl BudgetPlan {
    /// Plan with a single pruning point: the whole budget is spent at once.
    pub fn single_stage(total: usize, retain: usize, ratio: (u32, u32)) -> Result<Self> {
        let split = plan_budget(total, retain, ratio)?;
        Ok(BudgetPlan {
            total_tokens: total,
            retain_total: retain,
            stage1_retain: retain,
            stage1_split: split,
            stage2_split: split,
            stage2_rate: None,
            ratio,
            ltam: LtamParams::default(),
            tgvc_iterations: 1,
            vision_layer: 23,
            llm_layer: 2,
        })
    }

    /// Plan with a vision-encoder stage keeping `stage1_retain` tokens and a
    /// decode stage trimming the survivors down to `retain_total`.
    pub fn two_stage(
        total: usize,
        retain_total: usize,
        stage1_retain: usize,
        ratio: (u32, u32),
    ) -> Result<Self> {
        if retain_total > stage1_retain {
            return Err(Error::validation(format!(
                "overall target {retain_total} exceeds stage-1 retention {stage1_retain}"
            )));
        }
        let stage1_split = plan_budget(total, stage1_retain, ratio)?;
        let stage2_split = plan_budget(stage1_retain, retain_total, ratio)?;
        Ok(BudgetPlan {
            total_tokens: total,
            retain_total,
            stage1_retain,
            stage1_split,
            stage2_split,
            stage2_rate: None,
            ratio,
            ltam: LtamParams::default(),
            tgvc_iterations: 1,
            vision_layer: 23,
            llm_layer: 2,
        })
    }

    pub fn with_stage2_rate(mut self, rate: f64) -> Result<Self> {
        if !(rate.is_finite() && rate > 0.0 && rate <= 1.0) {
            return Err(Error::validation(format!("stage-2 rate {rate} outside (0, 1]")));
        }
        self.stage2_rate = Some(rate);
        Ok(self)
    }

    /// Stage-2 (K, R) for an actual survivor count. The retained count is
    /// `round(retain_total / stage1_retain × n_v)` — or `round(rate × n_v)`
    /// when an explicit rate is set — clamped to [1, n_v]; the flag reports
    /// whether clamping fired.
    pub fn stage2_counts(&self, n_v: usize) -> Result<(usize, usize, bool)> {
        let raw = match self.stage2_rate {
            Some(rate) => (rate * n_v as f64).round() as i64,
            None => {
                (self.retain_total as f64 / self.stage1_retain as f64 * n_v as f64).round() as i64
            }
        };
        let clamped_value = raw.clamp(1, n_v as i64) as usize;
        let (k, r) = plan_budget(n_v, clamped_value, self.ratio)?;
        Ok((k, r, clamped_value as i64 != raw))
    }
}

/// What happened to one input token during a pruning stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenFate {
    /// Kept verbatim in the dominant set.
    Dominant,
    /// Became the center of complement cluster j.
    Center(usize),
    /// Merged into complement cluster j.
    Merged(usize),
    /// Discarded (only possible when the complement is disabled).
    Dropped,
}

/// Per-stage pruning outcome with full per-token bookkeeping.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    /// Token count entering this stage.
    pub input_tokens: usize,
    /// Fusion weight applied to the global scores (absent when the local
    /// signal was unavailable).
    pub alpha: Option<f32>,
    /// Fused importance per input token.
    pub fused_scores: Vec<f32>,
    /// Outcome per input token.
    pub fate: Vec<TokenFate>,
    /// Ascending input indices kept verbatim.
    pub dominant_indices: Vec<usize>,
    /// Input indices of complement centers, in complement row order.
    pub center_indices: Vec<usize>,
    /// Composed output: dominant rows then complement rows.
    pub final_tokens: Tensor,
    pub provenance: Vec<Provenance>,
    /// Original grid coordinate per output token (complements carry their
    /// center's coordinate); present when the stage knew the layout.
    pub survivor_coords: Option<Vec<(i64, i64)>>,
    /// Original input index per output token (complements carry their
    /// center's index).
    pub survivor_origin: Vec<usize>,
    /// Stage-2 only: the derived retention was clamped into [1, n_v].
    pub budget_clamped: bool,
}

impl SelectionResult {
    pub fn retained(&self) -> usize {
        self.final_tokens.nrows()
    }
}

/// Knobs shared by both pruning stages.
#[derive(Debug, Clone, Copy)]
pub struct StageOptions {
    /// Swap the variance ratio in the fusion weight (experimental).
    pub swap_fusion_ratio: bool,
    /// Cross-modal normalization axis for stage-2 center relevance.
    pub cross_modal_axis: CrossModalAxis,
    /// Apply the local-affinity signal at stage 2 using surviving
    /// coordinates.
    pub stage2_ltam: bool,
}

impl Default for StageOptions {
    fn default() -> Self {
        StageOptions {
            swap_fusion_ratio: false,
            cross_modal_axis: CrossModalAxis::Text,
            stage2_ltam: true,
        }
    }
}

/// Vision-encoding-stage pruning: fused scoring, top-K retention, and the
/// text-guided complement over the pruned remainder.
pub fn run_vision_stage(
    features: &TokenSet,
    attn: &ClsAttention,
    grid: &TokenGrid,
    text: &TextFeatures,
    plan: &BudgetPlan,
    opts: &StageOptions,
) -> Result<SelectionResult> {
    let n = features.len();
    if grid.len() != n {
        return Err(Error::validation(format!(
            "grid {}×{} does not cover {n} tokens",
            grid.height(),
            grid.width()
        )));
    }
    if attn.tokens() != n {
        return Err(Error::validation(format!(
            "attention covers {} tokens, features have {n}",
            attn.tokens()
        )));
    }
    if plan.total_tokens != n {
        return Err(Error::validation(format!(
            "plan describes {} tokens, features have {n}",
            plan.total_tokens
        )));
    }
    let (k, r) = plan.stage1_split;
    if k == 0 {
        return Err(Error::validation("stage-1 K must be positive"));
    }

    let global = global_scores(attn)?;
    let local = ltam_scores(features, grid, &plan.ltam)?;
    let (fused, alpha) = adaptive_fuse_cfg(&global, &local, opts.swap_fusion_ratio)?;
    let dominant_indices = select_dominant(&fused, k)?;

    let mut fate = vec![TokenFate::Dropped; n];
    for &i in &dominant_indices {
        fate[i] = TokenFate::Dominant;
    }
    let remaining_indices: Vec<usize> = (0..n).filter(|i| fate[*i] == TokenFate::Dropped).collect();
    let dominant_set = features.gather(&dominant_indices)?;

    let (result, center_indices) = if r == 0 {
        (compose_final(&dominant_set, None)?, Vec::new())
    } else {
        let remaining_set = features.gather(&remaining_indices)?;
        let (relevance, _) = text_relevance(text, &remaining_set)?;
        let centers_rel = pick_centers(relevance.values(), r)?;
        let state = assign_tokens(&remaining_set, text, &centers_rel)?;
        let complement = aggregate_clusters(&state, &remaining_set, text, plan.tgvc_iterations)?;
        let result = compose_final(&dominant_set, Some(&complement))?;

        let center_indices: Vec<usize> =
            centers_rel.iter().map(|&c| remaining_indices[c]).collect();
        for (rank, &orig) in center_indices.iter().enumerate() {
            fate[orig] = TokenFate::Center(rank);
        }
        for (pos, &label) in state.labels().iter().enumerate() {
            let orig = remaining_indices[state.members()[pos]];
            fate[orig] = TokenFate::Merged(label);
        }
        (result, center_indices)
    };

    let survivor_origin: Vec<usize> = dominant_indices
        .iter()
        .chain(center_indices.iter())
        .copied()
        .collect();
    let survivor_coords = Some(survivor_origin.iter().map(|&i| grid.coords(i)).collect());

    Ok(SelectionResult {
        input_tokens: n,
        alpha: Some(alpha),
        fused_scores: fused.values().to_vec(),
        fate,
        dominant_indices,
        center_indices,
        final_tokens: result.final_tokens.clone(),
        provenance: result.provenance.clone(),
        survivor_coords,
        survivor_origin,
        budget_clamped: false,
    })
}

/// LLM-decoding-stage pruning over the stage-1 survivors. The stage-2
/// retention count is derived from the plan's end-to-end target (or an
/// explicit rate), and the local-affinity signal reuses the survivors'
/// original grid coordinates.
pub fn run_llm_stage(
    selection: &SelectionResult,
    states: &DecoderHiddenStates,
    plan: &BudgetPlan,
    opts: &StageOptions,
) -> Result<SelectionResult> {
    let n_v = states.visual_count();
    if selection.retained() != n_v {
        return Err(Error::validation(format!(
            "stage-1 kept {} tokens but decoder sees {n_v} visual states",
            selection.retained()
        )));
    }
    let (k, r, clamped) = plan.stage2_counts(n_v)?;

    let ltam_ctx = match (&selection.survivor_coords, opts.stage2_ltam) {
        (Some(coords), true) => Some(Stage2Ltam {
            features: states.visual().clone(),
            coords: coords.clone(),
            params: plan.ltam,
        }),
        _ => None,
    };
    let config = Stage2Config {
        cross_modal_axis: opts.cross_modal_axis,
        tgvc_iterations: plan.tgvc_iterations,
        swap_fusion_ratio: opts.swap_fusion_ratio,
    };
    let sel2 = stage2_prune(states, ltam_ctx.as_ref(), k, r, &config)?;

    let mut fate = vec![TokenFate::Dropped; n_v];
    for &i in &sel2.dominant_indices {
        fate[i] = TokenFate::Dominant;
    }
    for (rank, &i) in sel2.center_indices.iter().enumerate() {
        fate[i] = TokenFate::Center(rank);
    }
    if let Some(clusters) = &sel2.clusters {
        for (pos, &label) in clusters.labels().iter().enumerate() {
            fate[sel2.member_indices[pos]] = TokenFate::Merged(label);
        }
    }

    let survivor_origin: Vec<usize> = sel2
        .dominant_indices
        .iter()
        .chain(sel2.center_indices.iter())
        .map(|&i| selection.survivor_origin[i])
        .collect();
    let survivor_coords = selection.survivor_coords.as_ref().map(|coords| {
        sel2.dominant_indices
            .iter()
            .chain(sel2.center_indices.iter())
            .map(|&i| coords[i])
            .collect()
    });

    Ok(SelectionResult {
        input_tokens: n_v,
        alpha: sel2.alpha,
        fused_scores: sel2.fused_scores.values().to_vec(),
        fate,
        dominant_indices: sel2.dominant_indices,
        center_indices: sel2.center_indices,
        final_tokens: sel2.result.final_tokens.clone(),
        provenance: sel2.result.provenance.clone(),
        survivor_coords,
        survivor_origin,
        budget_clamped: clamped,
    })
}

/// F frames of identically shaped token sets with mean-pooled features.
#[derive(Debug, Clone)]
pub struct FrameSet {
    frames: Vec<Tensor>,
    pooled: Vec<Vec<f32>>,
}

impl FrameSet {
    pub fn new(frames: Vec<Tensor>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::validation("frame set cannot be empty"));
        }
        let dims = frames[0].dims().to_vec();
        if frames[0].rank() != 2 {
            return Err(Error::validation("frames must be rank-2 (N×d)"));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.dims() != dims.as_slice() {
                return Err(Error::validation(format!(
                    "frame {i} has dims {:?}, expected {dims:?}",
                    f.dims()
                )));
            }
        }
        let pooled = frames.iter().map(pool_tokens).collect();
        Ok(FrameSet { frames, pooled })
    }

    /// Split a rank-3 F×N×d tensor into frames.
    pub fn from_tensor(stack: &Tensor) -> Result<Self> {
        if stack.rank() != 3 {
            return Err(Error::validation("frame stack must be rank-3 (F×N×d)"));
        }
        let (f, n, d) = (stack.dims()[0], stack.dims()[1], stack.dims()[2]);
        let frames = (0..f)
            .map(|i| Tensor::matrix(n, d, stack.slice2(i).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        FrameSet::new(frames)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let (n, d) = (self.tokens_per_frame(), self.dim());
        let mut data = Vec::with_capacity(self.frames.len() * n * d);
        for f in &self.frames {
            data.extend_from_slice(f.data());
        }
        Tensor::new(vec![self.frames.len(), n, d], data)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.frames[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].ncols()
    }

    pub fn frame(&self, i: usize) -> &Tensor {
        &self.frames[i]
    }

    pub fn pooled(&self, i: usize) -> &[f32] {
        &self.pooled[i]
    }
}

fn pool_tokens(frame: &Tensor) -> Vec<f32> {
    let (n, d) = (frame.nrows(), frame.ncols());
    let mut acc = vec![0.0f64; d];
    for i in 0..n {
        for (a, &v) in acc.iter_mut().zip(frame.row(i)) {
            *a += v as f64;
        }
    }
    acc.iter().map(|&a| (a / n as f64) as f32).collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += *x as f64 * *x as f64;
        nb += *y as f64 * *y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Mean pooled-feature similarity of each frame against all others.
pub fn frame_similarities(frames: &FrameSet) -> Vec<f64> {
    let f = frames.frame_count();
    let mut sims = vec![0.0f64; f];
    if f < 2 {
        return sims;
    }
    for (i, sim) in sims.iter_mut().enumerate() {
        let mut sum = 0.0f64;
        for j in 0..f {
            if j != i {
                sum += cosine(frames.pooled(i), frames.pooled(j));
            }
        }
        *sim = sum / (f - 1) as f64;
    }
    sims
}

/// Inter-frame compression: the `keep` most distinctive frames (lowest mean
/// similarity) become cluster centers; every other frame joins its most
/// similar center and its tokens are averaged into the center's nearest
/// tokens with uniform weights. Returns the compressed set and the original
/// indices of the kept frames.
pub fn frame_cluster_full(frames: &FrameSet, keep: usize) -> Result<(FrameSet, Vec<usize>)> {
    let f = frames.frame_count();
    if keep == 0 || keep > f {
        return Err(Error::validation(format!(
            "keep_frames {keep} outside 1..={f}"
        )));
    }
    if keep == f {
        return Ok((frames.clone(), (0..f).collect()));
    }

    let sims = frame_similarities(frames);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| sims[a].partial_cmp(&sims[b]).unwrap().then(a.cmp(&b)));
    let mut centers = order[..keep].to_vec();
    centers.sort_unstable();

    // assign every non-center frame to its most similar center
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); keep];
    for i in 0..f {
        if centers.contains(&i) {
            continue;
        }
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (pos, &c) in centers.iter().enumerate() {
            let sim = cosine(frames.pooled(i), frames.pooled(c));
            if sim > best_sim {
                best_sim = sim;
                best = pos;
            }
        }
        assignment[best].push(i);
    }

    let (n, d) = (frames.tokens_per_frame(), frames.dim());
    let mut merged = Vec::with_capacity(keep);
    for (pos, &c) in centers.iter().enumerate() {
        let center_frame = frames.frame(c);
        let mut acc: Vec<f64> = center_frame.data().iter().map(|&v| v as f64).collect();
        let mut counts = vec![1u64; n];
        for &src in &assignment[pos] {
            let frame = frames.frame(src);
            for t in 0..n {
                let token = frame.row(t);
                // nearest center token by cosine similarity, lowest index on ties
                let mut best_tok = 0usize;
                let mut best_sim = f64::NEG_INFINITY;
                for ct in 0..n {
                    let sim = cosine(token, center_frame.row(ct));
                    if sim > best_sim {
                        best_sim = sim;
                        best_tok = ct;
                    }
                }
                for dd in 0..d {
                    acc[best_tok * d + dd] += token[dd] as f64;
                }
                counts[best_tok] += 1;
            }
        }
        let data: Vec<f32> = acc
            .iter()
            .enumerate()
            .map(|(idx, &v)| (v / counts[idx / d] as f64) as f32)
            .collect();
        merged.push(Tensor::matrix(n, d, data)?);
    }
    Ok((FrameSet::new(merged)?, centers))
}

/// Compressed frame set only; see [`frame_cluster_full`] for the kept indices.
pub fn frame_cluster(frames: &FrameSet, keep: usize) -> Result<FrameSet> {
    frame_cluster_full(frames, keep).map(|(set, _)| set)
}

/// Video pruning: inter-frame compression followed by per-frame
/// vision-stage pruning. `attns` holds one attention matrix per original
/// frame; each kept frame reuses its own (center) attention rows.
pub fn run_video(
    frames: &FrameSet,
    attns: &[ClsAttention],
    grid: &TokenGrid,
    text: &TextFeatures,
    keep_frames: usize,
    per_frame_plan: &BudgetPlan,
    opts: &StageOptions,
) -> Result<Vec<SelectionResult>> {
    if attns.len() != frames.frame_count() {
        return Err(Error::validation(format!(
            "{} attention matrices for {} frames",
            attns.len(),
            frames.frame_count()
        )));
    }
    let (compressed, kept) = frame_cluster_full(frames, keep_frames)?;
    let mut results = Vec::with_capacity(kept.len());
    for (pos, &orig) in kept.iter().enumerate() {
        let features = TokenSet::new(compressed.frame(pos).clone())?;
        let result = run_vision_stage(&features, &attns[orig], grid, text, per_frame_plan, opts)?;
        results.push(result);
    }
    Ok(results)
}
