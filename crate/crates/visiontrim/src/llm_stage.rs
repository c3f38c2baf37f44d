//! Pruning at the LLM decoding stage.
//!
//! Inside the language model there is no \[CLS\] token, so global importance
//! comes from the attention of the first generated token (the hidden state
//! at the last prompt position) over the visual hidden states, and the
//! complement's center choice is driven by visual↔text attention means.

use crate::dvts::{
    adaptive_fuse_cfg, ltam_scores_at, select_dominant, ImportanceScores, LtamParams, TokenSet,
};
use crate::error::{Error, Result};
use crate::tensor::{softmax64, Tensor};
use crate::tgvc::{
    aggregate_clusters, assign_tokens, compose_final, pick_centers, ClusterState,
    ComplementResult, TextFeatures,
};

/// Hidden states entering a decode-stage pruning point.
#[derive(Debug, Clone)]
pub struct DecoderHiddenStates {
    h_gen: Tensor,
    h_v: Tensor,
    h_t: Tensor,
}

impl DecoderHiddenStates {
    pub fn new(h_gen: Tensor, h_v: Tensor, h_t: Tensor) -> Result<Self> {
        if h_gen.rank() != 1 {
            return Err(Error::validation("h_gen must be rank-1 (D)"));
        }
        if h_v.rank() != 2 || h_t.rank() != 2 {
            return Err(Error::validation("h_v and h_t must be rank-2"));
        }
        let d = h_gen.len();
        if h_v.ncols() != d || h_t.ncols() != d {
            return Err(Error::validation(format!(
                "hidden size mismatch: gen {d}, visual {}, text {}",
                h_v.ncols(),
                h_t.ncols()
            )));
        }
        Ok(DecoderHiddenStates { h_gen, h_v, h_t })
    }

    pub fn hidden_size(&self) -> usize {
        self.h_gen.len()
    }

    pub fn visual_count(&self) -> usize {
        self.h_v.nrows()
    }

    pub fn text_count(&self) -> usize {
        self.h_t.nrows()
    }

    pub fn visual(&self) -> &Tensor {
        &self.h_v
    }

    pub fn text(&self) -> &Tensor {
        &self.h_t
    }
}

/// Normalization axis for the visual↔text attention matrix.
///
/// `Text` softmaxes each visual token's row over the text tokens, which
/// makes the row means a constant 1/N_t — an identity of row-stochastic
/// matrices, not a bug in this implementation. `Visual` softmaxes each
/// text token's column over the visual tokens instead, giving a genuinely
/// informative score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossModalAxis {
    #[default]
    Text,
    Visual,
}

/// Optional local-affinity context for stage-2 scoring. Survivor tokens keep
/// their original grid coordinates; the window sweep simply skips coordinates
/// that no longer exist.
#[derive(Debug, Clone)]
pub struct Stage2Ltam {
    pub features: Tensor,
    pub coords: Vec<(i64, i64)>,
    pub params: LtamParams,
}

/// Knobs for [`stage2_prune`].
#[derive(Debug, Clone, Copy)]
pub struct Stage2Config {
    pub cross_modal_axis: CrossModalAxis,
    pub tgvc_iterations: usize,
    pub swap_fusion_ratio: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            cross_modal_axis: CrossModalAxis::Text,
            tgvc_iterations: 1,
            swap_fusion_ratio: false,
        }
    }
}

/// Stage-2 pruning outcome, with index bookkeeping into the visual states.
#[derive(Debug, Clone)]
pub struct Stage2Selection {
    /// Ascending indices into the visual states chosen as dominant.
    pub dominant_indices: Vec<usize>,
    /// Indices into the visual states serving as complement centers, in
    /// center-rank order (matches complement row order).
    pub center_indices: Vec<usize>,
    /// Remaining-pool cluster state (`None` when the complement is empty).
    pub clusters: Option<ClusterState>,
    /// Indices into the visual states of the non-center remaining tokens.
    pub member_indices: Vec<usize>,
    pub fused_scores: ImportanceScores,
    pub alpha: Option<f32>,
    pub result: ComplementResult,
}

/// Attention distribution of the first generated token over the visual
/// hidden states: softmax of h_gen·h_vᵀ/√D.
pub fn gen_token_scores(states: &DecoderHiddenStates) -> Result<ImportanceScores> {
    let d = states.hidden_size();
    let scale = (d as f64).sqrt();
    let logits: Vec<f64> = (0..states.visual_count())
        .map(|i| {
            let mut dot = 0.0f64;
            for (a, b) in states.h_gen.data().iter().zip(states.h_v.row(i)) {
                dot += *a as f64 * *b as f64;
            }
            dot / scale
        })
        .collect();
    let probs = softmax64(&logits);
    ImportanceScores::new(probs.iter().map(|&p| p as f32).collect())
}

/// Mean visual↔text attention per visual token.
///
/// Under [`CrossModalAxis::Text`] the result is the row-stochastic mean
/// identity, exactly 1/N_t per entry, returned in closed form. Under
/// [`CrossModalAxis::Visual`] each text column is softmaxed over the visual
/// tokens and the per-token mean is taken, which sums to 1 over the tokens.
pub fn cross_modal_scores(states: &DecoderHiddenStates, axis: CrossModalAxis) -> Vec<f32> {
    let n_v = states.visual_count();
    let n_t = states.text_count();
    match axis {
        CrossModalAxis::Text => {
            // each softmaxed row sums to 1, so its mean over N_t entries is
            // 1/N_t regardless of the inputs
            vec![(1.0f64 / n_t as f64) as f32; n_v]
        }
        CrossModalAxis::Visual => {
            let d = states.hidden_size();
            let scale = (d as f64).sqrt();
            let mut logits = vec![0.0f64; n_v * n_t];
            for i in 0..n_v {
                for j in 0..n_t {
                    let mut dot = 0.0f64;
                    for (a, b) in states.h_v.row(i).iter().zip(states.h_t.row(j)) {
                        dot += *a as f64 * *b as f64;
                    }
                    logits[i * n_t + j] = dot / scale;
                }
            }
            let mut sums = vec![0.0f64; n_v];
            for j in 0..n_t {
                let column: Vec<f64> = (0..n_v).map(|i| logits[i * n_t + j]).collect();
                for (i, p) in softmax64(&column).into_iter().enumerate() {
                    sums[i] += p;
                }
            }
            sums.iter().map(|&s| (s / n_t as f64) as f32).collect()
        }
    }
}

/// Full decode-stage pruning: fuse gen-token attention with the optional
/// local affinity, keep the top-K visual states, then merge the remainder
/// into R text-guided complements.
///
/// Center relevance prefers the configured cross-modal axis; if that vector
/// is uninformative (constant — always true for the literal text
/// axis), it falls back to the visual-axis scores and then to the gen-token
/// scores restricted to the remaining tokens.
pub fn stage2_prune(
    states: &DecoderHiddenStates,
    ltam: Option<&Stage2Ltam>,
    k: usize,
    r: usize,
    config: &Stage2Config,
) -> Result<Stage2Selection> {
    let n_v = states.visual_count();
    if k == 0 {
        return Err(Error::validation("stage-2 K must be positive"));
    }
    if k + r > n_v {
        return Err(Error::validation(format!(
            "budget K+R = {} exceeds {n_v} visual tokens",
            k + r
        )));
    }

    let gen = gen_token_scores(states)?;
    let (fused, alpha) = match ltam {
        Some(ctx) => {
            if ctx.features.nrows() != n_v || ctx.coords.len() != n_v {
                return Err(Error::validation(
                    "stage-2 LTAM context does not cover the visual tokens",
                ));
            }
            let local = ltam_scores_at(&ctx.features, &ctx.coords, &ctx.params)?;
            let (f, a) = adaptive_fuse_cfg(&gen, &local, config.swap_fusion_ratio)?;
            (f, Some(a))
        }
        None => (gen.clone(), None),
    };

    let dominant_indices = select_dominant(&fused, k)?;
    let mut is_dominant = vec![false; n_v];
    for &i in &dominant_indices {
        is_dominant[i] = true;
    }
    let remaining_indices: Vec<usize> = (0..n_v).filter(|i| !is_dominant[*i]).collect();

    let dominant_set = TokenSet::new(gather_rows(&states.h_v, &dominant_indices)?)?;
    if r == 0 {
        let result = compose_final(&dominant_set, None)?;
        return Ok(Stage2Selection {
            dominant_indices,
            center_indices: Vec::new(),
            clusters: None,
            member_indices: Vec::new(),
            fused_scores: fused,
            alpha,
            result,
        });
    }

    let center_scores = center_relevance(states, &gen, &remaining_indices, config.cross_modal_axis);
    let centers_rel = pick_centers(&center_scores, r)?;
    let remaining_set = TokenSet::new(gather_rows(&states.h_v, &remaining_indices)?)?;
    let text = TextFeatures::new(states.h_t.clone())?;
    let clusters = assign_tokens(&remaining_set, &text, &centers_rel)?;
    let complement = aggregate_clusters(&clusters, &remaining_set, &text, config.tgvc_iterations)?;
    let result = compose_final(&dominant_set, Some(&complement))?;

    let center_indices: Vec<usize> = centers_rel.iter().map(|&c| remaining_indices[c]).collect();
    let member_indices: Vec<usize> =
        clusters.members().iter().map(|&i| remaining_indices[i]).collect();
    Ok(Stage2Selection {
        dominant_indices,
        center_indices,
        clusters: Some(clusters),
        member_indices,
        fused_scores: fused,
        alpha,
        result,
    })
}

/// Center-relevance scores over the remaining tokens, renormalized to a
/// distribution, with the documented fallback chain for degenerate vectors.
fn center_relevance(
    states: &DecoderHiddenStates,
    gen: &ImportanceScores,
    remaining: &[usize],
    axis: CrossModalAxis,
) -> Vec<f32> {
    let mut candidates: Vec<Vec<f32>> = Vec::new();
    candidates.push(cross_modal_scores(states, axis));
    if axis != CrossModalAxis::Visual {
        candidates.push(cross_modal_scores(states, CrossModalAxis::Visual));
    }
    candidates.push(gen.values().to_vec());

    let restricted: Vec<Vec<f32>> = candidates
        .into_iter()
        .map(|full| renormalize(remaining.iter().map(|&i| full[i]).collect()))
        .collect();
    for cand in &restricted {
        if informative(cand) {
            return cand.clone();
        }
    }
    restricted.last().expect("at least one candidate").clone()
}

fn informative(values: &[f32]) -> bool {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (hi - lo) as f64 > 1e-12
}

fn renormalize(values: Vec<f32>) -> Vec<f32> {
    let mut sum = 0.0f64;
    for &v in &values {
        sum += v as f64;
    }
    if sum <= 0.0 {
        return vec![(1.0f64 / values.len() as f64) as f32; values.len()];
    }
    values.iter().map(|&v| (v as f64 / sum) as f32).collect()
}

fn gather_rows(matrix: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let d = matrix.ncols();
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(matrix.row(i));
    }
    Tensor::matrix(indices.len(), d, data)
}
