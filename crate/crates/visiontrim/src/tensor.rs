//! Dense f32 tensors, deterministic numeric primitives, and the VTTF
//! on-disk format.
//!
//! Numerics policy, applied everywhere in this crate: elements are stored as
//! f32, every reduction (softmax denominators, means, variances, dot
//! products, weighted sums) accumulates in f64 and runs in ascending index
//! order with no reassociation. Identical inputs therefore produce
//! bit-identical outputs across runs and platforms.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// VTTF header: magic, version, dtype (0 = f32), rank, reserved.
const MAGIC: [u8; 4] = *b"VTTF";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

/// Dense row-major tensor of finite f32 values, rank 1 to 3.
///
/// Construction validates the shape/data contract once; every function in
/// the crate can then rely on finiteness and consistent dims.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(Error::validation(format!(
                "tensor rank must be 1..=3, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::validation(format!("tensor dims must be positive, got {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::validation(format!(
                "data length {} does not match dims {:?} (product {})",
                data.len(),
                dims,
                expected
            )));
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
        }
        Ok(Tensor { dims, data })
    }

    /// Rank-1 tensor from a value slice.
    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Rank-2 tensor from rows×cols and flat row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Row count of a rank-2 tensor (first dim otherwise).
    pub fn nrows(&self) -> usize {
        self.dims[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn ncols(&self) -> usize {
        assert_eq!(self.rank(), 2, "ncols requires a rank-2 tensor");
        self.dims[1]
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        assert_eq!(self.rank(), 2, "row() requires a rank-2 tensor");
        let cols = self.dims[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Borrow slice `i` of a rank-3 tensor as a flat row-major matrix.
    pub fn slice2(&self, i: usize) -> &[f32] {
        assert_eq!(self.rank(), 3, "slice2() requires a rank-3 tensor");
        let step = self.dims[1] * self.dims[2];
        &self.data[i * step..(i + 1) * step]
    }

    /// Serialize to VTTF bytes (little-endian, no padding, no footer).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        out.push(0); // reserved
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse VTTF bytes. Each malformed-header condition maps to a distinct
    /// error variant; the payload is validated for length and finiteness.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || bytes[0..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        if bytes[5] != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(bytes[5]));
        }
        let rank = bytes[6];
        if !(1..=3).contains(&rank) {
            return Err(Error::BadRank(rank));
        }
        let rank = rank as usize;
        let dims_end = 8 + 8 * rank;
        if bytes.len() < dims_end {
            return Err(Error::PayloadLengthMismatch {
                expected: dims_end,
                actual: bytes.len(),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for r in 0..rank {
            let mut raw = [0u8; 8];
            raw.copy_from_slice(&bytes[8 + 8 * r..16 + 8 * r]);
            let d = u64::from_le_bytes(raw);
            if d == 0 || d > usize::MAX as u64 {
                return Err(Error::validation(format!("invalid dim value {d} in VTTF header")));
            }
            dims.push(d as usize);
        }
        let count: usize = dims.iter().product();
        let expected = dims_end + 4 * count;
        if bytes.len() != expected {
            return Err(Error::PayloadLengthMismatch {
                expected,
                actual: bytes.len(),
            });
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let mut raw = [0u8; 4];
            raw.copy_from_slice(&bytes[dims_end + 4 * i..dims_end + 4 * i + 4]);
            let v = f32::from_le_bytes(raw);
            if !v.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
            data.push(v);
        }
        Ok(Tensor { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes)
    }
}

/// Numerically stable row-wise softmax of a rank-2 tensor.
///
/// Each row is shifted by its maximum before exponentiation; the denominator
/// accumulates in f64 in ascending column order. Output rows are nonnegative
/// and sum to 1 within 1e-6.
pub fn row_softmax(m: &Tensor) -> Result<Tensor> {
    if m.rank() != 2 {
        return Err(Error::validation(format!(
            "row_softmax requires a rank-2 tensor, got rank {}",
            m.rank()
        )));
    }
    for (i, v) in m.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
    }
    let (rows, cols) = (m.dims()[0], m.dims()[1]);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = m.row(r);
        let probs = softmax64(&row.iter().map(|&v| v as f64).collect::<Vec<_>>());
        out.extend(probs.iter().map(|&p| p as f32));
    }
    Tensor::new(vec![rows, cols], out)
}

/// f64 softmax over a logit slice, shared by every attention-style scoring
/// path. All-(-inf) input (possible after extreme kernel penalties) falls
/// back to the uniform distribution.
pub(crate) fn softmax64(logits: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in logits {
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return vec![1.0 / logits.len() as f64; logits.len()];
    }
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let mut denom = 0.0f64;
    for &e in &exps {
        denom += e;
    }
    exps.iter().map(|&e| e / denom).collect()
}

/// Mean and population variance (divide by N) of a nonempty value slice.
///
/// Two-pass f64 evaluation in ascending index order, so the variance is
/// translation-invariant to ~1e-9 relative and reproducible bit-for-bit.
pub fn mean_and_variance(values: &[f32]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::validation("mean_and_variance on empty input"));
    }
    let n = values.len() as f64;
    let mut sum = 0.0f64;
    for &v in values {
        sum += v as f64;
    }
    let mean = sum / n;
    let mut sq = 0.0f64;
    for &v in values {
        let d = v as f64 - mean;
        sq += d * d;
    }
    Ok((mean, sq / n))
}

/// Deterministic 64-bit generator (SplitMix64).
///
/// The algorithm is fixed for the life of the file formats: identical seeds
/// must reproduce identical fixture bytes on every platform, so the
/// generator avoids platform-dependent operations entirely.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform f32 in [0, 1) with a 24-bit mantissa; exact power-of-two
    /// scaling keeps the mapping bit-stable everywhere.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / 16_777_216.0)
    }

    /// Uniform f32 in [lo, hi).
    pub fn next_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    /// Rank-2 tensor of uniform values in [lo, hi), drawn row-major.
    pub fn matrix(&mut self, rows: usize, cols: usize, lo: f32, hi: f32) -> Tensor {
        let data = (0..rows * cols).map(|_| self.next_range(lo, hi)).collect();
        Tensor::matrix(rows, cols, data).expect("generated data matches dims")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use super::Rng;

    fn assert_close(a: f32, b: f32, tol: f32) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn softmax_symmetric_pair() {
        let m = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let s = row_softmax(&m).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_single_column() {
        for x in [-1.0e4f32, -3.25, 0.0, 7.5, 2.0e4] {
            let m = Tensor::matrix(1, 1, vec![x]).unwrap();
            let s = row_softmax(&m).unwrap();
            assert_eq!(s.data(), &[1.0]);
        }
    }

    #[test]
    fn softmax_two_logits_direct_evaluation() {
        // exp(0.4) / (exp(0.4) + exp(0.6)) evaluated independently.
        let e4 = 0.4f64.exp();
        let e6 = 0.6f64.exp();
        let expect = [(e4 / (e4 + e6)) as f32, (e6 / (e4 + e6)) as f32];
        let m = Tensor::matrix(1, 2, vec![0.4, 0.6]).unwrap();
        let s = row_softmax(&m).unwrap();
        assert_close(s.data()[0], expect[0], 1e-7);
        assert_close(s.data()[1], expect[1], 1e-7);
        assert_close(s.data()[0], 0.45017, 1e-4);
        assert_close(s.data()[1], 0.54983, 1e-4);
    }

    #[test]
    fn softmax_rejects_rank1() {
        let t = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        assert!(row_softmax(&t).is_err());
    }

    #[test]
    fn tensor_rejects_non_finite_naming_index() {
        let err = Tensor::matrix(1, 3, vec![0.0, f32::NAN, 1.0]).unwrap_err();
        match err {
            Error::NonFinite { index } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn mean_variance_constant_vector() {
        let (m, v) = mean_and_variance(&[3.5, 3.5, 3.5]).unwrap();
        assert_eq!(m, 3.5);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn mean_variance_two_point() {
        let (m, v) = mean_and_variance(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert_eq!(v, 0.25);
    }

    #[test]
    fn mean_variance_hand_sum() {
        // deviations from 2.5: (-1.5, -0.5, 0.5, 1.5) -> sum of squares 5.0 -> /4
        let (m, v) = mean_and_variance(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert_eq!(v, 1.25);
    }

    #[test]
    fn mean_variance_rejects_empty() {
        assert!(mean_and_variance(&[]).is_err());
    }

    #[test]
    fn vttf_round_trip_zeros() {
        let t = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn vttf_round_trip_seeded_is_byte_identical() {
        let mut rng = Rng::new(99);
        let t = rng.matrix(576, 64, -1.0, 1.0);
        let bytes = t.to_bytes();
        let back = Tensor::from_bytes(&bytes).unwrap();
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn vttf_truncated_payload() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        let mut bytes = t.to_bytes();
        bytes.truncate(bytes.len() - 2);
        match Tensor::from_bytes(&bytes) {
            Err(Error::PayloadLengthMismatch { .. }) => {}
            other => panic!("expected payload mismatch, got {other:?}"),
        }
    }

    #[test]
    fn vttf_distinct_header_errors() {
        let t = Tensor::from_vec(vec![1.0]).unwrap();
        let good = t.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&bad), Err(Error::BadMagic)));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(Tensor::from_bytes(&bad), Err(Error::UnsupportedVersion(9))));

        let mut bad = good.clone();
        bad[5] = 1;
        assert!(matches!(Tensor::from_bytes(&bad), Err(Error::UnsupportedDtype(1))));

        let mut bad = good.clone();
        bad[6] = 4;
        assert!(matches!(Tensor::from_bytes(&bad), Err(Error::BadRank(4))));

        let mut bad = good;
        let nan = f32::NAN.to_le_bytes();
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&nan);
        assert!(matches!(Tensor::from_bytes(&bad), Err(Error::NonFinite { index: 0 })));
    }

    #[test]
    fn vttf_header_layout_is_pinned() {
        let t = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[0..4], b"VTTF");
        assert_eq!(bytes[4], 1); // version
        assert_eq!(bytes[5], 0); // f32
        assert_eq!(bytes[6], 2); // rank
        assert_eq!(bytes[7], 0); // reserved
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 24 + 6 * 4);
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in 1usize..5,
            cols in 1usize..16,
            seed in any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let m = rng.matrix(rows, cols, -20.0, 20.0);
            let s = row_softmax(&m).unwrap();
            for r in 0..rows {
                let mut sum = 0.0f64;
                for &v in s.row(r) {
                    prop_assert!((0.0..=1.0).contains(&v));
                    sum += v as f64;
                }
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn softmax_shift_invariance(
            cols in 1usize..16,
            shift in -50.0f32..50.0,
            seed in any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let m = rng.matrix(1, cols, -10.0, 10.0);
            let shifted = Tensor::matrix(
                1, cols, m.data().iter().map(|&v| v + shift).collect(),
            ).unwrap();
            let a = row_softmax(&m).unwrap();
            let b = row_softmax(&shifted).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn variance_translation_invariance(
            len in 1usize..32,
            shift_steps in -5120i32..5120,
            seed in any::<u64>(),
        ) {
            // values and shift live on a 2^-10 grid so the shifted inputs
            // are exactly representable and only the reduction is tested
            let mut rng = Rng::new(seed);
            let v: Vec<f32> = (0..len)
                .map(|_| ((rng.next_range(-10.0, 10.0) * 1024.0) as i32) as f32 / 1024.0)
                .collect();
            let shift = shift_steps as f32 / 1024.0;
            let shifted: Vec<f32> = v.iter().map(|&x| x + shift).collect();
            let (_, var_a) = mean_and_variance(&v).unwrap();
            let (_, var_b) = mean_and_variance(&shifted).unwrap();
            let scale = var_a.abs().max(1.0);
            prop_assert!((var_a - var_b).abs() / scale < 1e-9);
        }

        #[test]
        fn vttf_save_load_save_identical(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let t = rng.matrix(rows, cols, -100.0, 100.0);
            let first = t.to_bytes();
            let second = Tensor::from_bytes(&first).unwrap().to_bytes();
            prop_assert_eq!(first, second);
        }
    }
}
