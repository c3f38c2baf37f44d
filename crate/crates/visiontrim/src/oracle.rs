//! Naive reference implementations used by the test suites.
//!
//! Everything here recomputes results from scratch in f64 with full
//! enumeration and no shared helpers, so the fast paths in [`crate::dvts`]
//! and [`crate::tgvc`] can be checked against genuinely independent code.
//! Only the tensor container and parameter structs are shared. These
//! routines are O(N²·k²) or worse by design.

use crate::dvts::LtamParams;
use crate::tensor::Tensor;

fn naive_softmax(xs: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    if !max.is_finite() {
        return vec![1.0 / xs.len() as f64; xs.len()];
    }
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let mut total = 0.0;
    for &e in &exps {
        total += e;
    }
    exps.into_iter().map(|e| e / total).collect()
}

fn naive_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &x in xs {
        sum += x;
    }
    let mean = sum / xs.len() as f64;
    let mut sq = 0.0;
    for &x in xs {
        sq += (x - mean) * (x - mean);
    }
    (sq / xs.len() as f64).sqrt()
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    let mut sq = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        sq += d * d;
    }
    sq.sqrt()
}

/// Pair affinities κ*(p→q) for every ordered token pair, `None` when q is
/// outside p's window. Exposed for the symmetry/sign property tests.
pub fn pair_affinities(
    features: &Tensor,
    coords: &[(i64, i64)],
    params: &LtamParams,
) -> Vec<Vec<Option<f64>>> {
    let n = features.nrows();
    let radius = (params.kernel_size / 2) as i64;

    let mut feat_dists = Vec::new();
    let mut pos_dists = Vec::new();
    for p in 0..n {
        for q in 0..n {
            if p == q {
                continue;
            }
            let (px, py) = coords[p];
            let (qx, qy) = coords[q];
            if (qx - px).abs() > radius || (qy - py).abs() > radius {
                continue;
            }
            feat_dists.push(euclid(features.row(p), features.row(q)));
            let (dx, dy) = ((px - qx) as f64, (py - qy) as f64);
            pos_dists.push((dx * dx + dy * dy).sqrt());
        }
    }
    let sigma_f = naive_std(&feat_dists).max(params.sigma_floor as f64);
    let sigma_p = naive_std(&pos_dists).max(params.sigma_floor as f64);

    let mut out = vec![vec![None; n]; n];
    for p in 0..n {
        for q in 0..n {
            if p == q {
                continue;
            }
            let (px, py) = coords[p];
            let (qx, qy) = coords[q];
            if (qx - px).abs() > radius || (qy - py).abs() > radius {
                continue;
            }
            let df = euclid(features.row(p), features.row(q));
            let (dx, dy) = ((px - qx) as f64, (py - qy) as f64);
            let dp = (dx * dx + dy * dy).sqrt();
            let kf = -(df / (params.w1 as f64 * sigma_f)).powi(2);
            let kp = -(dp / (params.w2 as f64 * sigma_p)).powi(2);
            out[p][q] = Some(kf + params.w3 as f64 * kp);
        }
    }
    out
}

/// Full-enumeration local affinity scores over an h×w grid.
pub fn brute_force_ltam(features: &Tensor, h: usize, w: usize, params: &LtamParams) -> Vec<f64> {
    let n = h * w;
    assert_eq!(features.nrows(), n, "grid does not cover features");
    let coords: Vec<(i64, i64)> = (0..n).map(|i| ((i / w) as i64, (i % w) as i64)).collect();
    let kappa = pair_affinities(features, &coords, params);
    let mut raw = vec![0.0f64; n];
    for p in 0..n {
        let vals: Vec<f64> = kappa[p].iter().filter_map(|&k| k).collect();
        if !vals.is_empty() {
            let mut sum = 0.0;
            for v in &vals {
                sum += v;
            }
            raw[p] = sum / vals.len() as f64;
        }
    }
    naive_softmax(&raw)
}

/// Text-mediated cluster labels recomputed from scratch: every softmax and
/// every a_ij evaluated in f64 by direct enumeration. Returns one label in
/// [0, R) per non-center token, in ascending token order.
pub fn brute_force_assignment(remaining: &Tensor, text: &Tensor, centers: &[usize]) -> Vec<usize> {
    let d = remaining.ncols();
    let l = text.nrows();
    let r = centers.len();
    let scale = (d as f64).sqrt();

    // text-to-center softmax across the R centers, per text row
    let mut t2c = vec![vec![0.0f64; r]; l];
    for (li, row) in t2c.iter_mut().enumerate() {
        let logits: Vec<f64> = centers
            .iter()
            .map(|&c| {
                let mut dot = 0.0;
                for (a, b) in text.row(li).iter().zip(remaining.row(c)) {
                    dot += *a as f64 * *b as f64;
                }
                dot / scale
            })
            .collect();
        row.copy_from_slice(&naive_softmax(&logits));
    }

    let mut labels = Vec::new();
    for i in 0..remaining.nrows() {
        if centers.contains(&i) {
            continue;
        }
        let logits: Vec<f64> = (0..l)
            .map(|li| {
                let mut dot = 0.0;
                for (a, b) in remaining.row(i).iter().zip(text.row(li)) {
                    dot += *a as f64 * *b as f64;
                }
                dot / scale
            })
            .collect();
        let v2t = naive_softmax(&logits);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..r {
            let mut a_ij = 0.0;
            for (li, row) in t2c.iter().enumerate() {
                a_ij += v2t[li] * row[j];
            }
            if a_ij > best_score {
                best_score = a_ij;
                best = j;
            }
        }
        labels.push(best);
    }
    labels
}

/// Top-k indices via full stable sort; stability yields the lowest-index
/// tie-break for free.
pub fn brute_force_topk(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    idx.truncate(k);
    idx.sort();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_tie_break_is_stable() {
        let values = [0.25f32, 0.25, 0.25, 0.25];
        assert_eq!(brute_force_topk(&values, 2), vec![0, 1]);
    }

    #[test]
    fn uniform_feature_image_gives_uniform_scores() {
        let features = Tensor::matrix(4, 2, vec![1.0; 8]).unwrap();
        let scores = brute_force_ltam(&features, 2, 2, &LtamParams::default());
        for &s in &scores {
            assert!((s - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cluster_labels_zero() {
        let remaining = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5]).unwrap();
        let text = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, -1.0]).unwrap();
        assert_eq!(brute_force_assignment(&remaining, &text, &[0]), vec![0, 0]);
    }
}
