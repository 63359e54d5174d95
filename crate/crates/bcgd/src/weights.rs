//! Projection of float weight vectors onto the low-bit constraint set.
//!
//! The constraint set is `delta * q` with a shared positive scale `delta`
//! and integer levels `q`: signs for 1-bit weights, `{0, +-1}` for 2-bit,
//! and `{0, +-1, ..., +-(2^(bits-1) - 1)}` for wider widths. Binarization
//! and ternarization are solved exactly; wider widths use a single Lloyd
//! iteration, which is the standard practical compromise since the exact
//! problem is combinatorial.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("cannot quantize an all-zero weight vector (scale would be 0)")]
    DegenerateInput,
    #[error("unsupported weight bit-width {0}")]
    InvalidBitWidth(u32),
    #[error("weight file {path}: {reason}")]
    BadFile { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A float vector projected onto the quantized set: `delta * q` elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    delta: f64,
    q: Vec<i32>,
    bits: u32,
}

impl QuantizedWeights {
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn levels(&self) -> &[i32] {
        &self.q
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Largest admissible |level| for the bit-width.
    pub fn max_level(bits: u32) -> i32 {
        if bits == 1 {
            1
        } else {
            (1i32 << (bits - 1)) - 1
        }
    }

    /// The dequantized vector `delta * q`.
    pub fn dequantize(&self) -> Vec<f64> {
        self.q.iter().map(|&qi| self.delta * qi as f64).collect()
    }

    /// Squared distance from `w_f` to the quantized point.
    pub fn objective(&self, w_f: &[f64]) -> f64 {
        assert_eq!(w_f.len(), self.q.len());
        self.q
            .iter()
            .zip(w_f)
            .map(|(&qi, &wi)| {
                let d = self.delta * qi as f64 - wi;
                d * d
            })
            .sum()
    }
}

fn all_zero(w: &[f64]) -> bool {
    w.iter().all(|&x| x == 0.0)
}

/// sign with sign(0) := +1, so projections are deterministic.
fn sign_pos(x: f64) -> i32 {
    if x < 0.0 {
        -1
    } else {
        1
    }
}

/// Exact 1-bit projection: `q = sign(w_f)`, `delta = ||w_f||_1 / M`.
pub fn binarize(w_f: &[f64]) -> Result<QuantizedWeights, WeightError> {
    if w_f.is_empty() || all_zero(w_f) {
        return Err(WeightError::DegenerateInput);
    }
    let q: Vec<i32> = w_f.iter().map(|&x| sign_pos(x)).collect();
    let delta = w_f.iter().map(|x| x.abs()).sum::<f64>() / w_f.len() as f64;
    Ok(QuantizedWeights { delta, q, bits: 1 })
}

/// Exact 2-bit (ternary) projection in O(M log M).
///
/// Sorting |w_f| descending, the best support of size `j` is always the
/// top-j entries, with scale `mean(top-j |w_f|)` and score
/// `(sum top-j |w_f|)^2 / j`; the maximizing `j` gives the global optimum.
pub fn ternarize(w_f: &[f64]) -> Result<QuantizedWeights, WeightError> {
    if w_f.is_empty() || all_zero(w_f) {
        return Err(WeightError::DegenerateInput);
    }
    let mut order: Vec<usize> = (0..w_f.len()).collect();
    // stable tie-break on index keeps the projection deterministic
    order.sort_by(|&a, &b| w_f[b].abs().partial_cmp(&w_f[a].abs()).unwrap().then(a.cmp(&b)));

    let mut best_j = 1;
    let mut best_score = f64::NEG_INFINITY;
    let mut prefix = 0.0;
    for (j, &idx) in order.iter().enumerate() {
        prefix += w_f[idx].abs();
        let score = prefix * prefix / (j + 1) as f64;
        if score > best_score {
            best_score = score;
            best_j = j + 1;
        }
    }

    let support_sum: f64 = order[..best_j].iter().map(|&i| w_f[i].abs()).sum();
    let delta = support_sum / best_j as f64;
    let mut q = vec![0i32; w_f.len()];
    for &i in &order[..best_j] {
        q[i] = sign_pos(w_f[i]);
    }
    Ok(QuantizedWeights { delta, q, bits: 2 })
}

/// Nearest integer with .5 ties rounded toward zero (sparser levels).
fn round_half_toward_zero(x: f64) -> f64 {
    let a = x.abs();
    let f = a.floor();
    let r = if a - f > 0.5 { f + 1.0 } else { f };
    r.copysign(x)
}

/// One Lloyd iteration for `bits >= 2`: scale init
/// `delta0 = 2 / (2^bits - 1) * ||w_f||_inf`, a nearest-level assignment,
/// then the least-squares scale `delta = q^T w_f / ||q||^2`.
pub fn quantize_lloyd(w_f: &[f64], bits: u32) -> Result<QuantizedWeights, WeightError> {
    if bits < 2 {
        return Err(WeightError::InvalidBitWidth(bits));
    }
    if w_f.is_empty() || all_zero(w_f) {
        return Err(WeightError::DegenerateInput);
    }
    let max_abs = w_f.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let delta0 = 2.0 / ((1u64 << bits) - 1) as f64 * max_abs;
    Ok(lloyd_iteration(w_f, bits, delta0))
}

/// Assignment step at a given scale followed by the least-squares scale
/// refit. An all-zero assignment keeps `delta0` instead of erroring.
fn lloyd_iteration(w_f: &[f64], bits: u32, delta0: f64) -> QuantizedWeights {
    let top = QuantizedWeights::max_level(bits) as f64;
    let q: Vec<i32> = w_f
        .iter()
        .map(|&x| round_half_toward_zero(x / delta0).clamp(-top, top) as i32)
        .collect();
    let qq: f64 = q.iter().map(|&qi| (qi as f64) * (qi as f64)).sum();
    let delta = if qq > 0.0 {
        let qw: f64 = q.iter().zip(w_f).map(|(&qi, &wi)| qi as f64 * wi).sum();
        qw / qq
    } else {
        delta0
    };
    QuantizedWeights { delta, q, bits }
}

/// Projection onto the quantized set for the given bit-width: exact for 1
/// and 2 bits, one Lloyd iteration for 3 bits and wider.
pub fn project(w_f: &[f64], bits: u32) -> Result<QuantizedWeights, WeightError> {
    match bits {
        0 => Err(WeightError::InvalidBitWidth(0)),
        1 => binarize(w_f),
        2 => ternarize(w_f),
        _ => quantize_lloyd(w_f, bits),
    }
}

/// Magic prefix of the flat weight file format.
pub const WEIGHT_MAGIC: &[u8; 8] = b"BCGDWGT1";

/// Writes a flat little-endian f32 array with the 8-byte magic header.
pub fn write_weight_file(path: &Path, values: &[f64]) -> Result<(), WeightError> {
    let mut buf = Vec::with_capacity(8 + 4 * values.len());
    buf.extend_from_slice(WEIGHT_MAGIC);
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|source| WeightError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&buf).map_err(|source| WeightError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a flat weight file written by [`write_weight_file`].
pub fn read_weight_file(path: &Path) -> Result<Vec<f64>, WeightError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| WeightError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let path_s = path.display().to_string();
    if bytes.len() < 8 || &bytes[..8] != WEIGHT_MAGIC {
        return Err(WeightError::BadFile {
            path: path_s,
            reason: "missing BCGDWGT1 magic".into(),
        });
    }
    let body = &bytes[8..];
    if body.len() % 4 != 0 {
        return Err(WeightError::BadFile {
            path: path_s,
            reason: format!("payload length {} is not a multiple of 4", body.len()),
        });
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force minimum of ||delta q - w||^2 over all level vectors with
    /// the optimal positive scale per q. Independent of the solvers above.
    fn brute_force_objective(w: &[f64], bits: u32) -> f64 {
        let top = QuantizedWeights::max_level(bits);
        let levels: Vec<i32> = if bits == 1 {
            vec![-1, 1]
        } else {
            (-top..=top).collect()
        };
        let norm2: f64 = w.iter().map(|x| x * x).sum();
        let mut best = norm2; // q = 0 or delta -> 0
        let mut q = vec![0usize; w.len()];
        loop {
            let qv: Vec<f64> = q.iter().map(|&i| levels[i] as f64).collect();
            let qq: f64 = qv.iter().map(|x| x * x).sum();
            if qq > 0.0 {
                let qw: f64 = qv.iter().zip(w).map(|(a, b)| a * b).sum();
                if qw > 0.0 {
                    best = best.min(norm2 - qw * qw / qq);
                }
            }
            // odometer increment
            let mut i = 0;
            loop {
                if i == q.len() {
                    return best;
                }
                q[i] += 1;
                if q[i] < levels.len() {
                    break;
                }
                q[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn binarize_examples() {
        let r = binarize(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(r.delta(), 2.0);
        assert_eq!(r.levels(), &[1, -1, 1]);
        let obj = r.objective(&[1.0, -2.0, 3.0]);
        assert!((obj - brute_force_objective(&[1.0, -2.0, 3.0], 1)).abs() < 1e-12);

        let r = binarize(&[0.7, 0.7, 0.7]).unwrap();
        assert!((r.delta() - 0.7).abs() < 1e-15);
        assert_eq!(r.levels(), &[1, 1, 1]);

        let r = binarize(&[-5.0]).unwrap();
        assert_eq!(r.delta(), 5.0);
        assert_eq!(r.levels(), &[-1]);
    }

    #[test]
    fn binarize_rejects_all_zero() {
        assert!(matches!(binarize(&[0.0, 0.0]), Err(WeightError::DegenerateInput)));
    }

    #[test]
    fn ternarize_examples() {
        let r = ternarize(&[3.0, 0.1, -0.1]).unwrap();
        assert_eq!(r.delta(), 3.0);
        assert_eq!(r.levels(), &[1, 0, 0]);

        let r = ternarize(&[1.0, 1.0, -1.0]).unwrap();
        assert_eq!(r.delta(), 1.0);
        assert_eq!(r.levels(), &[1, 1, -1]);

        // scores: j=2 gives 16/2 = 8, j=3 gives 4.5^2/3 = 6.75, j=1 gives 4
        let r = ternarize(&[2.0, 2.0, 0.5]).unwrap();
        assert_eq!(r.delta(), 2.0);
        assert_eq!(r.levels(), &[1, 1, 0]);
        let obj = r.objective(&[2.0, 2.0, 0.5]);
        assert!((obj - brute_force_objective(&[2.0, 2.0, 0.5], 2)).abs() < 1e-12);
    }

    #[test]
    fn lloyd_examples() {
        // one ternary Lloyd step: delta0 = 2, assignment [1, 0, 0], refit 3
        let r = quantize_lloyd(&[3.0, 0.1, -0.1], 2).unwrap();
        assert_eq!(r.levels(), &[1, 0, 0]);
        assert!((r.delta() - 3.0).abs() < 1e-15);

        // exact recovery at a representable point
        let r = quantize_lloyd(&[7.0, -7.0], 4).unwrap();
        assert_eq!(r.levels(), &[7, -7]);
        assert!((r.delta() - 1.0).abs() < 1e-15);
        assert!(r.objective(&[7.0, -7.0]) < 1e-24);

        // the init scales with ||w||_inf, so the projection is
        // scale-equivariant even for tiny inputs
        let r = quantize_lloyd(&[0.001, 0.001], 4).unwrap();
        assert_eq!(r.levels(), &[7, 7]);
        assert!((r.delta() - 0.001 / 7.0).abs() < 1e-18);
    }

    #[test]
    fn lloyd_zero_assignment_keeps_the_initial_scale() {
        // an oversized scale rounds everything to the zero level
        let r = lloyd_iteration(&[0.001, -0.002], 4, 1.0);
        assert_eq!(r.levels(), &[0, 0]);
        assert_eq!(r.delta(), 1.0);
    }

    #[test]
    fn lloyd_never_loses_to_initial_scale() {
        let mut rng = crate::rng::stream_rng(11, crate::rng::Stream::Data);
        for _ in 0..200 {
            let m = 1 + (rand::Rng::random::<u32>(&mut rng) % 12) as usize;
            let w = crate::rng::normal_vec(&mut rng, m);
            for bits in [2u32, 3, 4] {
                let r = quantize_lloyd(&w, bits).unwrap();
                let init = QuantizedWeights {
                    delta: 2.0 / ((1u64 << bits) - 1) as f64
                        * w.iter().fold(0.0f64, |a, &x| a.max(x.abs())),
                    q: r.levels().to_vec(),
                    bits,
                };
                assert!(r.objective(&w) <= init.objective(&w) + 1e-12);
            }
        }
    }

    #[test]
    fn project_dispatch() {
        let w = [1.0, -2.0, 3.0];
        let r = project(&w, 1).unwrap();
        assert_eq!(r.delta(), 2.0);
        assert_eq!(r.levels(), &[1, -1, 1]);
        let r = project(&[3.0, 0.1, -0.1], 2).unwrap();
        assert_eq!(r.delta(), 3.0);
        assert_eq!(r.levels(), &[1, 0, 0]);
        assert!(matches!(project(&w, 0), Err(WeightError::InvalidBitWidth(0))));
    }

    #[test]
    fn idempotent_on_the_quantized_set() {
        let mut rng = crate::rng::stream_rng(5, crate::rng::Stream::Data);
        for bits in [1u32, 2] {
            for _ in 0..100 {
                let m = 1 + (rand::Rng::random::<u32>(&mut rng) % 8) as usize;
                let w = crate::rng::normal_vec(&mut rng, m);
                if all_zero(&w) {
                    continue;
                }
                let first = project(&w, bits).unwrap();
                let again = project(&first.dequantize(), bits).unwrap();
                assert!(first.objective(&first.dequantize()) < 1e-20);
                assert_eq!(first.levels(), again.levels());
                assert!((first.delta() - again.delta()).abs() < 1e-12 * first.delta().max(1.0));
            }
        }
    }

    proptest! {
        #[test]
        fn binarize_matches_brute_force(w in proptest::collection::vec(-3.0f64..3.0, 1..8)) {
            prop_assume!(!all_zero(&w));
            let r = binarize(&w).unwrap();
            let gap = r.objective(&w) - brute_force_objective(&w, 1);
            prop_assert!(gap.abs() < 1e-12);
        }

        #[test]
        fn ternarize_matches_brute_force(w in proptest::collection::vec(-3.0f64..3.0, 1..8)) {
            prop_assume!(!all_zero(&w));
            let r = ternarize(&w).unwrap();
            let gap = r.objective(&w) - brute_force_objective(&w, 2);
            prop_assert!(gap.abs() < 1e-12);
        }

        #[test]
        fn scale_equivariance(w in proptest::collection::vec(-3.0f64..3.0, 1..10), c in 0.01f64..10.0, bits in 1u32..5) {
            prop_assume!(w.iter().any(|&x| x.abs() > 1e-6));
            let base = project(&w, bits).unwrap();
            let scaled_w: Vec<f64> = w.iter().map(|&x| c * x).collect();
            let scaled = project(&scaled_w, bits).unwrap();
            prop_assert_eq!(base.levels(), scaled.levels());
            prop_assert!((scaled.delta() - c * base.delta()).abs() < 1e-9 * (1.0 + c * base.delta()));
        }

        #[test]
        fn sign_equivariance(w in proptest::collection::vec(-3.0f64..3.0, 1..10), bits in 1u32..5) {
            prop_assume!(w.iter().all(|&x| x.abs() > 1e-9));
            let pos = project(&w, bits).unwrap();
            let negated: Vec<f64> = w.iter().map(|&x| -x).collect();
            let neg = project(&negated, bits).unwrap();
            let flipped: Vec<i32> = pos.levels().iter().map(|&q| -q).collect();
            prop_assert_eq!(neg.levels(), &flipped[..]);
            prop_assert!((neg.delta() - pos.delta()).abs() < 1e-12 * pos.delta().max(1.0));
        }
    }

    #[test]
    fn weight_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.wgt");
        let values = vec![1.5, -2.25, 0.0, 3.125];
        write_weight_file(&path, &values).unwrap();
        assert_eq!(read_weight_file(&path).unwrap(), values);
    }

    #[test]
    fn weight_file_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wgt");
        fs::write(&path, b"NOTMAGIC\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_weight_file(&path), Err(WeightError::BadFile { .. })));
    }
}
