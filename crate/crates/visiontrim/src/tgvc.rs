//! Text-guided vision complement.
//!
//! The tokens pruned by [`crate::dvts`] still carry signal; this module
//! clusters them around text-relevant centers, merges each cluster into one
//! representative, and appends the merged tokens to the dominant set.
//!
//! Assignment scores are computed entirely in f64 so that labels agree
//! bit-for-bit with the brute-force reference in [`crate::oracle`].

use crate::dvts::{top_k_indices, ImportanceScores, TokenSet};
use crate::error::{Error, Result};
use crate::tensor::{row_softmax, softmax64, Tensor};

/// L×d text-token embeddings.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    features: Tensor,
}

impl TextFeatures {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::validation("text features must be rank-2 (L×d)"));
        }
        Ok(TextFeatures { features })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }
}

/// Outcome of one clustering round over the remaining (pruned) tokens.
#[derive(Debug, Clone)]
pub struct ClusterState {
    center_indices: Vec<usize>,
    member_indices: Vec<usize>,
    labels: Vec<usize>,
    assignment_scores: Vec<f64>, // row-major members × R
}

impl ClusterState {
    /// Indices into the remaining set that serve as cluster centers,
    /// ascending.
    pub fn centers(&self) -> &[usize] {
        &self.center_indices
    }

    /// Non-center indices into the remaining set, ascending.
    pub fn members(&self) -> &[usize] {
        &self.member_indices
    }

    /// Cluster label per member, aligned with `members()`.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn cluster_count(&self) -> usize {
        self.center_indices.len()
    }

    /// Assignment score a_ij for member position `m` and cluster `j`.
    pub fn score(&self, m: usize, j: usize) -> f64 {
        self.assignment_scores[m * self.center_indices.len() + j]
    }
}

/// Where each composed token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Dominant,
    Complement,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Dominant => "dominant",
            Provenance::Complement => "complement",
        }
    }
}

/// Merged complement tokens and the composed final token matrix.
#[derive(Debug, Clone)]
pub struct ComplementResult {
    pub complement: Option<Tensor>,
    pub final_tokens: Tensor,
    pub provenance: Vec<Provenance>,
}

impl ComplementResult {
    pub fn len(&self) -> usize {
        self.final_tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Text→vision relevance: softmax rows of T·V_rᵀ/√d plus their per-token
/// mean, which sums to 1 and ranks the remaining tokens for center picking.
pub fn text_relevance(text: &TextFeatures, remaining: &TokenSet) -> Result<(ImportanceScores, Tensor)> {
    if text.dim() != remaining.dim() {
        return Err(Error::validation(format!(
            "text dim {} does not match token dim {}",
            text.dim(),
            remaining.dim()
        )));
    }
    let (l, m) = (text.len(), remaining.len());
    let scale = (text.dim() as f64).sqrt();
    let mut logits = Vec::with_capacity(l * m);
    for li in 0..l {
        let t = text.features().row(li);
        for i in 0..m {
            logits.push((dot64(t, remaining.token(i)) / scale) as f32);
        }
    }
    let s_t2v = row_softmax(&Tensor::matrix(l, m, logits)?)?;
    let mut means = vec![0.0f64; m];
    for li in 0..l {
        for (i, &v) in s_t2v.row(li).iter().enumerate() {
            means[i] += v as f64;
        }
    }
    let s: Vec<f32> = means.iter().map(|&v| (v / l as f64) as f32).collect();
    Ok((ImportanceScores::new(s)?, s_t2v))
}

/// Top-R relevance ranks become clustering centers (ascending index order,
/// lowest-index tie-break).
pub fn pick_centers(s: &[f32], r: usize) -> Result<Vec<usize>> {
    top_k_indices(s, r)
}

/// Assign every non-center remaining token to the center with the highest
/// text-mediated affinity `a_ij = Σ_l S_v2t[i,l]·S_t2c[l,j]`.
///
/// S_v2t softmaxes each token's logits across the text tokens; S_t2c
/// softmaxes each text token's logits across the R centers, which makes
/// a_ij a proper affinity and reduces to the single-cluster case at R = 1.
pub fn assign_tokens(remaining: &TokenSet, text: &TextFeatures, centers: &[usize]) -> Result<ClusterState> {
    if text.dim() != remaining.dim() {
        return Err(Error::validation("text/token dim mismatch"));
    }
    if centers.is_empty() {
        return Err(Error::validation("need at least one cluster center"));
    }
    let m = remaining.len();
    let mut seen = vec![false; m];
    for &c in centers {
        if c >= m {
            return Err(Error::validation(format!("center index {c} out of range")));
        }
        if seen[c] {
            return Err(Error::validation(format!("duplicate center index {c}")));
        }
        seen[c] = true;
    }
    let member_indices: Vec<usize> = (0..m).filter(|i| !seen[*i]).collect();
    let center_vectors: Vec<Vec<f64>> = centers
        .iter()
        .map(|&c| remaining.token(c).iter().map(|&v| v as f64).collect())
        .collect();
    let (labels, assignment_scores) =
        assign_to_center_vectors(remaining, &member_indices, text, &center_vectors);
    Ok(ClusterState {
        center_indices: centers.to_vec(),
        member_indices,
        labels,
        assignment_scores,
    })
}

/// One assignment round against explicit center vectors (used both for the
/// initial index-based centers and for refined centers in later iterations).
fn assign_to_center_vectors(
    remaining: &TokenSet,
    members: &[usize],
    text: &TextFeatures,
    centers: &[Vec<f64>],
) -> (Vec<usize>, Vec<f64>) {
    let l = text.len();
    let r = centers.len();
    let scale = (text.dim() as f64).sqrt();

    // S_t2c[l][j]: per text row, softmax across centers
    let mut t2c = vec![0.0f64; l * r];
    for li in 0..l {
        let t = text.features().row(li);
        let logits: Vec<f64> = centers.iter().map(|c| dot64_mixed(t, c) / scale).collect();
        t2c[li * r..(li + 1) * r].copy_from_slice(&softmax64(&logits));
    }

    let mut labels = Vec::with_capacity(members.len());
    let mut scores = Vec::with_capacity(members.len() * r);
    for &i in members {
        let logits: Vec<f64> = (0..l)
            .map(|li| dot64(remaining.token(i), text.features().row(li)) / scale)
            .collect();
        let v2t = softmax64(&logits);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..r {
            let mut a_ij = 0.0f64;
            for li in 0..l {
                a_ij += v2t[li] * t2c[li * r + j];
            }
            scores.push(a_ij);
            if a_ij > best_score {
                best_score = a_ij;
                best = j;
            }
        }
        labels.push(best);
    }
    (labels, scores)
}

/// Merge each cluster into one token: center plus the score-weighted average
/// of its members (weights normalized per cluster; an empty cluster keeps
/// its center). `iterations > 1` re-assigns the same member pool against
/// the merged tokens and re-aggregates.
pub fn aggregate_clusters(
    state: &ClusterState,
    remaining: &TokenSet,
    text: &TextFeatures,
    iterations: usize,
) -> Result<Tensor> {
    if iterations == 0 {
        return Err(Error::validation("iterations must be positive"));
    }
    let r = state.cluster_count();
    let d = remaining.dim();
    let mut centers: Vec<Vec<f64>> = state
        .center_indices
        .iter()
        .map(|&c| remaining.token(c).iter().map(|&v| v as f64).collect())
        .collect();
    let mut labels = state.labels.clone();
    let mut scores = state.assignment_scores.clone();

    for iter in 0..iterations {
        if iter > 0 {
            let (new_labels, new_scores) =
                assign_to_center_vectors(remaining, &state.member_indices, text, &centers);
            labels = new_labels;
            scores = new_scores;
        }
        let mut merged = centers.clone();
        for j in 0..r {
            let cluster: Vec<usize> = (0..labels.len()).filter(|&mm| labels[mm] == j).collect();
            if cluster.is_empty() {
                continue; // keep the center as-is
            }
            let mut denom = 0.0f64;
            for &mm in &cluster {
                denom += scores[mm * r + j];
            }
            for &mm in &cluster {
                // all-zero scores can only arise from f64 underflow; share
                // the weight uniformly in that case
                let weight = if denom == 0.0 {
                    1.0 / cluster.len() as f64
                } else {
                    scores[mm * r + j] / denom
                };
                let token = remaining.token(state.member_indices[mm]);
                for (dst, &v) in merged[j].iter_mut().zip(token) {
                    *dst += weight * v as f64;
                }
            }
        }
        centers = merged;
    }

    let mut data = Vec::with_capacity(r * d);
    for c in &centers {
        data.extend(c.iter().map(|&v| v as f32));
    }
    Tensor::matrix(r, d, data)
}

/// Concatenate dominant tokens (ascending original order) with the merged
/// complements (center-rank order) and tag each row's provenance.
pub fn compose_final(dominant: &TokenSet, complement: Option<&Tensor>) -> Result<ComplementResult> {
    let d = dominant.dim();
    let k = dominant.len();
    let r = match complement {
        Some(c) => {
            if c.rank() != 2 || c.ncols() != d {
                return Err(Error::validation(format!(
                    "complement dim mismatch: expected {d} columns"
                )));
            }
            c.nrows()
        }
        None => 0,
    };
    let mut data = Vec::with_capacity((k + r) * d);
    data.extend_from_slice(dominant.features().data());
    if let Some(c) = complement {
        data.extend_from_slice(c.data());
    }
    let mut provenance = vec![Provenance::Dominant; k];
    provenance.extend(vec![Provenance::Complement; r]);
    Ok(ComplementResult {
        complement: complement.cloned(),
        final_tokens: Tensor::matrix(k + r, d, data)?,
        provenance,
    })
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    let mut sum = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        sum += *x as f64 * *y as f64;
    }
    sum
}

fn dot64_mixed(a: &[f32], b: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        sum += *x as f64 * *y;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn tokens(rows: usize, cols: usize, data: Vec<f32>) -> TokenSet {
        TokenSet::new(Tensor::matrix(rows, cols, data).unwrap()).unwrap()
    }

    fn text(rows: usize, cols: usize, data: Vec<f32>) -> TextFeatures {
        TextFeatures::new(Tensor::matrix(rows, cols, data).unwrap()).unwrap()
    }

    #[test]
    fn relevance_single_text_token_is_softmax_row() {
        let t = text(1, 2, vec![1.0, 0.5]);
        let v = tokens(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 2.0]);
        let (s, s_t2v) = text_relevance(&t, &v).unwrap();
        assert_eq!(s.values(), s_t2v.row(0));
    }

    #[test]
    fn relevance_identical_tokens_uniform() {
        let t = text(2, 3, vec![1.0, 0.0, 2.0, -1.0, 0.5, 0.0]);
        let v = tokens(4, 3, [0.3, -0.7, 1.1].repeat(4));
        let (s, _) = text_relevance(&t, &v).unwrap();
        for &x in s.values() {
            assert!((x - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn relevance_hand_evaluation() {
        // rows: softmax([1, -1]) and softmax([0, 0]); means [0.69040, 0.30960]
        let t = text(2, 1, vec![1.0, 0.0]);
        let v = tokens(2, 1, vec![1.0, -1.0]);
        let (s, s_t2v) = text_relevance(&t, &v).unwrap();
        let e2 = 2.0f64.exp();
        let row0 = (e2 / (e2 + 1.0)) as f32; // softmax([1,-1]) first entry
        assert!((s_t2v.row(0)[0] - row0).abs() < 1e-7);
        assert!((s_t2v.row(0)[0] - 0.88080).abs() < 1e-4);
        assert!((s_t2v.row(1)[0] - 0.5).abs() < 1e-7);
        assert!((s.values()[0] - 0.69040).abs() < 1e-4);
        assert!((s.values()[1] - 0.30960).abs() < 1e-4);
    }

    #[test]
    fn relevance_dim_mismatch() {
        let t = text(1, 3, vec![1.0; 3]);
        let v = tokens(2, 2, vec![1.0; 4]);
        assert!(text_relevance(&t, &v).is_err());
    }

    #[test]
    fn centers_all_and_ranked_and_tied() {
        assert_eq!(pick_centers(&[0.2, 0.5, 0.3], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(pick_centers(&[0.1, 0.5, 0.4], 1).unwrap(), vec![1]);
        assert_eq!(pick_centers(&[0.25; 4], 2).unwrap(), vec![0, 1]);
        assert!(pick_centers(&[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn assign_single_cluster() {
        let v = tokens(4, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.5, 0.5]);
        let t = text(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let state = assign_tokens(&v, &t, &[2]).unwrap();
        assert_eq!(state.labels(), &[0, 0, 0]);
        assert_eq!(state.members(), &[0, 1, 3]);
    }

    #[test]
    fn assign_token_identical_to_center_wins() {
        // centers sit on orthogonal text axes with a large margin; the lone
        // member equals center 1, so their text-affinity profiles coincide
        let v = tokens(3, 2, vec![8.0, 0.0, 0.0, 8.0, 0.0, 8.0]);
        let t = text(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let state = assign_tokens(&v, &t, &[0, 1]).unwrap();
        assert_eq!(state.members(), &[2]);
        assert_eq!(state.labels(), &[1]);
    }

    #[test]
    fn assign_rejects_duplicates() {
        let v = tokens(3, 1, vec![1.0, 2.0, 3.0]);
        let t = text(1, 1, vec![1.0]);
        assert!(assign_tokens(&v, &t, &[1, 1]).is_err());
    }

    #[test]
    fn aggregate_empty_cluster_keeps_center() {
        // both members share center 0's direction; center 1 ends up empty
        let v = tokens(4, 1, vec![2.0, -3.0, 1.9, 1.8]);
        let t = text(1, 1, vec![1.0]);
        let state = assign_tokens(&v, &t, &[0, 1]).unwrap();
        assert_eq!(state.labels(), &[0, 0]);
        let merged = aggregate_clusters(&state, &v, &t, 1).unwrap();
        assert_eq!(merged.row(1), &[-3.0]);
    }

    #[test]
    fn aggregate_single_member_adds_whole_token() {
        let v = tokens(2, 2, vec![1.0, 2.0, 0.25, -0.5]);
        let t = text(1, 2, vec![1.0, 0.0]);
        let state = assign_tokens(&v, &t, &[0]).unwrap();
        let merged = aggregate_clusters(&state, &v, &t, 1).unwrap();
        assert_eq!(merged.row(0), &[1.25, 1.5]);
    }

    #[test]
    fn aggregate_equal_scores_average_members() {
        // L = 1 and R = 1 force a_ij = 1 for every member: equal weights
        let v = tokens(3, 1, vec![1.0, 5.0, -2.0]);
        let t = text(1, 1, vec![1.0]);
        let state = assign_tokens(&v, &t, &[0]).unwrap();
        let merged = aggregate_clusters(&state, &v, &t, 1).unwrap();
        assert_eq!(merged.row(0), &[1.0 + (5.0 - 2.0) / 2.0]);
    }

    #[test]
    fn aggregate_iterations_refine() {
        let mut rng = Rng::new(11);
        let v = TokenSet::new(rng.matrix(6, 3, -1.0, 1.0)).unwrap();
        let t = TextFeatures::new(rng.matrix(2, 3, -1.0, 1.0)).unwrap();
        let state = assign_tokens(&v, &t, &[0, 3]).unwrap();
        let once = aggregate_clusters(&state, &v, &t, 1).unwrap();
        let twice = aggregate_clusters(&state, &v, &t, 2).unwrap();
        assert_eq!(once.dims(), twice.dims());
        // refinement must stay deterministic
        let twice_again = aggregate_clusters(&state, &v, &t, 2).unwrap();
        assert_eq!(twice.data(), twice_again.data());
    }

    #[test]
    fn compose_counts_and_tags() {
        let dom = tokens(2, 3, vec![1.0; 6]);
        let com = Tensor::matrix(1, 3, vec![2.0; 3]).unwrap();
        let out = compose_final(&dom, Some(&com)).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(
            out.provenance,
            vec![Provenance::Dominant, Provenance::Dominant, Provenance::Complement]
        );
    }

    #[test]
    fn compose_without_complement() {
        let dom = tokens(2, 3, vec![1.0; 6]);
        let out = compose_final(&dom, None).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.complement.is_none());
    }

    #[test]
    fn compose_dim_mismatch() {
        let dom = tokens(2, 3, vec![1.0; 6]);
        let com = Tensor::matrix(1, 2, vec![2.0; 2]).unwrap();
        assert!(compose_final(&dom, Some(&com)).is_err());
    }

    #[test]
    fn compose_reference_budget() {
        let dom = tokens(48, 4, vec![0.5; 48 * 4]);
        let com = Tensor::matrix(16, 4, vec![0.25; 16 * 4]).unwrap();
        let out = compose_final(&dom, Some(&com)).unwrap();
        assert_eq!(out.len(), 64);
    }

    #[test]
    fn assignment_matches_oracle_on_pinned_instances() {
        for (m, l, r, seed) in [(3usize, 2usize, 2usize, 5u64), (8, 4, 3, 17), (32, 8, 8, 23)] {
            let mut rng = Rng::new(seed);
            let total = m + r;
            let v = TokenSet::new(rng.matrix(total, 4, -1.5, 1.5)).unwrap();
            let t = TextFeatures::new(rng.matrix(l, 4, -1.5, 1.5)).unwrap();
            let centers: Vec<usize> = (0..r).collect();
            let state = assign_tokens(&v, &t, &centers).unwrap();
            let want = oracle::brute_force_assignment(v.features(), t.features(), &centers);
            assert_eq!(state.labels(), want.as_slice(), "seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn assignment_matches_oracle_fuzzed(
            m in 1usize..=24,
            l in 1usize..=8,
            r in 1usize..=8,
            d in 1usize..=6,
            seed in any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let total = m + r;
            let v = TokenSet::new(rng.matrix(total, d, -2.0, 2.0)).unwrap();
            let t = TextFeatures::new(rng.matrix(l, d, -2.0, 2.0)).unwrap();
            // scatter the centers rather than always using a prefix
            let mut centers: Vec<usize> = (0..total).collect();
            for i in (1..total).rev() {
                let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                centers.swap(i, j);
            }
            centers.truncate(r);
            centers.sort_unstable();
            let state = assign_tokens(&v, &t, &centers).unwrap();
            let want = oracle::brute_force_assignment(v.features(), t.features(), &centers);
            prop_assert_eq!(state.labels(), want.as_slice());
        }

        #[test]
        fn partition_and_weight_invariants(
            m in 0usize..=16,
            r in 1usize..=6,
            l in 1usize..=4,
            seed in any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let total = m + r;
            let v = TokenSet::new(rng.matrix(total, 3, -2.0, 2.0)).unwrap();
            let t = TextFeatures::new(rng.matrix(l, 3, -2.0, 2.0)).unwrap();
            let centers: Vec<usize> = (0..total).step_by((total / r).max(1)).take(r).collect();
            let state = assign_tokens(&v, &t, &centers).unwrap();

            // centers and members partition the remaining set
            let mut seen = vec![0u32; total];
            for &c in state.centers() { seen[c] += 1; }
            for &i in state.members() { seen[i] += 1; }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert_eq!(state.labels().len(), state.members().len());

            // normalized weights sum to 1 in every nonempty cluster
            for j in 0..state.cluster_count() {
                let cluster: Vec<usize> =
                    (0..state.labels().len()).filter(|&mm| state.labels()[mm] == j).collect();
                if cluster.is_empty() { continue; }
                let denom: f64 = cluster.iter().map(|&mm| state.score(mm, j)).sum();
                if denom > 0.0 {
                    let total_w: f64 =
                        cluster.iter().map(|&mm| state.score(mm, j) / denom).sum();
                    prop_assert!((total_w - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn merged_offset_stays_in_member_hull(
            m in 1usize..=12,
            r in 1usize..=4,
            seed in any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let total = m + r;
            let d = 3usize;
            let v = TokenSet::new(rng.matrix(total, d, -2.0, 2.0)).unwrap();
            let t = TextFeatures::new(rng.matrix(2, d, -2.0, 2.0)).unwrap();
            let centers: Vec<usize> = (0..r).collect();
            let state = assign_tokens(&v, &t, &centers).unwrap();
            let merged = aggregate_clusters(&state, &v, &t, 1).unwrap();
            for (j, &center) in centers.iter().enumerate() {
                let cluster: Vec<usize> =
                    (0..state.labels().len()).filter(|&mm| state.labels()[mm] == j).collect();
                if cluster.is_empty() { continue; }
                for dd in 0..d {
                    let offset = merged.row(j)[dd] as f64 - v.token(center)[dd] as f64;
                    let lo = cluster.iter()
                        .map(|&mm| v.token(state.members()[mm])[dd] as f64)
                        .fold(f64::INFINITY, f64::min);
                    let hi = cluster.iter()
                        .map(|&mm| v.token(state.members()[mm])[dd] as f64)
                        .fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(offset >= lo - 1e-5 && offset <= hi + 1e-5);
                }
            }
        }
    }
}
