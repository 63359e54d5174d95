//! Chunked, deterministic Monte Carlo estimation.
//!
//! Sampling is split into fixed-size chunks; chunk `i` draws from an RNG
//! seeded by (stream seed, i), and partial moments are combined in chunk
//! order. Serial and parallel runs therefore produce identical bits.

use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::lab::{angle, binarized_relu, dot, norm, LabError, TwoLayerModel, ANGLE_TOL};
use crate::rng::chunk_rng;

/// Samples per chunk.
pub const CHUNK_SIZE: usize = 1 << 16;

/// Componentwise mean and standard error of a vector-valued estimator.
#[derive(Debug, Clone)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub n: usize,
}

struct Partial {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

/// Runs `n_samples` draws of a `dims`-dimensional estimator. `factory`
/// builds one per-chunk evaluator (so it may own scratch buffers); the
/// evaluator fills `out` for each draw.
pub fn estimate_chunked<F, G>(dims: usize, n_samples: usize, seed: u64, factory: G) -> McEstimate
where
    G: Fn() -> F + Sync,
    F: FnMut(&mut ChaCha8Rng, &mut [f64]),
{
    assert!(n_samples > 0, "need at least one sample");
    let chunks = n_samples.div_ceil(CHUNK_SIZE);
    let partials: Vec<Partial> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = chunk_rng(seed, ci as u64);
            let mut eval = factory();
            let count = CHUNK_SIZE.min(n_samples - ci * CHUNK_SIZE);
            let mut sum = vec![0.0; dims];
            let mut sum_sq = vec![0.0; dims];
            let mut out = vec![0.0; dims];
            for _ in 0..count {
                out.iter_mut().for_each(|x| *x = 0.0);
                eval(&mut rng, &mut out);
                for (d, &x) in out.iter().enumerate() {
                    sum[d] += x;
                    sum_sq[d] += x * x;
                }
            }
            Partial { n: count, sum, sum_sq }
        })
        .collect();

    // fixed-order combination keeps the result independent of thread count
    let mut n = 0usize;
    let mut sum = vec![0.0; dims];
    let mut sum_sq = vec![0.0; dims];
    for p in partials {
        n += p.n;
        for d in 0..dims {
            sum[d] += p.sum[d];
            sum_sq[d] += p.sum_sq[d];
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let se: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(&sq, &m)| {
            if n < 2 {
                return f64::INFINITY;
            }
            let var = ((sq - nf * m * m) / (nf - 1.0)).max(0.0);
            (var / nf).sqrt()
        })
        .collect();
    McEstimate { mean, se, n }
}

/// One verified quantity: a closed form next to its MC estimate.
#[derive(Debug, Clone)]
pub struct MomentCheck {
    pub name: &'static str,
    pub closed: Vec<f64>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
}

impl MomentCheck {
    /// Largest componentwise deviation measured in standard errors.
    pub fn worst_z(&self) -> f64 {
        self.closed
            .iter()
            .zip(&self.estimate)
            .zip(&self.se)
            .map(|((c, e), s)| {
                let diff = (c - e).abs();
                if *s > 0.0 {
                    diff / s
                } else if diff <= 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn within(&self, gate: f64) -> bool {
        self.worst_z() <= gate
    }

    /// Index of the worst component, for reporting.
    pub fn worst_component(&self) -> usize {
        let mut worst = 0;
        let mut worst_z = -1.0;
        for i in 0..self.closed.len() {
            let diff = (self.closed[i] - self.estimate[i]).abs();
            let z = if self.se[i] > 0.0 { diff / self.se[i] } else if diff <= 1e-12 { 0.0 } else { f64::INFINITY };
            if z > worst_z {
                worst_z = z;
                worst = i;
            }
        }
        worst
    }
}

/// Minimum sample count below which estimates are flagged as unreliable.
pub const MIN_RELIABLE_SAMPLES: usize = 10_000;

/// Monte Carlo verification of the four Gaussian half-space moments.
#[derive(Debug, Clone)]
pub struct MomentsReport {
    pub theta: f64,
    pub n_samples: usize,
    /// Set when `n_samples` is below [`MIN_RELIABLE_SAMPLES`].
    pub insufficient_samples: bool,
    pub checks: Vec<MomentCheck>,
}

/// Estimates `E[1{z.w > 0}]`, `E[1{z.w > 0, z.wt > 0}]`, `E[z 1{z.w > 0}]`
/// and `E[z 1{both}]` and pairs them with their closed forms.
pub fn gaussian_moments(
    w: &[f64],
    w_tilde: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<MomentsReport, LabError> {
    if w.len() != w_tilde.len() {
        return Err(LabError::ShapeMismatch(format!("{} vs {}", w.len(), w_tilde.len())));
    }
    let n = w.len();
    let (nw, nt) = (norm(w), norm(w_tilde));
    if nw == 0.0 || nt == 0.0 {
        return Err(LabError::ZeroVector);
    }
    let theta = angle(w, w_tilde)?;
    let sqrt2pi = (2.0 * std::f64::consts::PI).sqrt();

    let closed_ind = vec![0.5];
    let closed_joint = vec![(std::f64::consts::PI - theta) / (2.0 * std::f64::consts::PI)];
    let closed_z: Vec<f64> = w.iter().map(|&x| x / (sqrt2pi * nw)).collect();
    let closed_z_joint: Vec<f64> = if std::f64::consts::PI - theta < ANGLE_TOL {
        vec![0.0; n]
    } else {
        let u: Vec<f64> = w
            .iter()
            .zip(w_tilde)
            .map(|(&a, &b)| a / nw + b / nt)
            .collect();
        let nu = norm(&u);
        u.iter()
            .map(|&x| (theta / 2.0).cos() / sqrt2pi * x / nu)
            .collect()
    };

    let dims = 2 + 2 * n;
    let w_owned = w.to_vec();
    let t_owned = w_tilde.to_vec();
    let est = estimate_chunked(dims, n_samples, seed, || {
        let w = w_owned.clone();
        let t = t_owned.clone();
        let mut z = vec![0.0; w.len()];
        move |rng: &mut ChaCha8Rng, out: &mut [f64]| {
            for zi in z.iter_mut() {
                *zi = rand::Rng::sample(rng, StandardNormal);
            }
            let in_w = dot(&z, &w) > 0.0;
            let in_both = in_w && dot(&z, &t) > 0.0;
            out[0] = if in_w { 1.0 } else { 0.0 };
            out[1] = if in_both { 1.0 } else { 0.0 };
            let n = z.len();
            for (j, &zj) in z.iter().enumerate() {
                if in_w {
                    out[2 + j] = zj;
                }
                if in_both {
                    out[2 + n + j] = zj;
                }
            }
        }
    });

    let slice = |from: usize, len: usize| {
        (est.mean[from..from + len].to_vec(), est.se[from..from + len].to_vec())
    };
    let (m0, s0) = slice(0, 1);
    let (m1, s1) = slice(1, 1);
    let (m2, s2) = slice(2, n);
    let (m3, s3) = slice(2 + n, n);

    Ok(MomentsReport {
        theta,
        n_samples,
        insufficient_samples: n_samples < MIN_RELIABLE_SAMPLES,
        checks: vec![
            MomentCheck { name: "E[1{zw>0}]", closed: closed_ind, estimate: m0, se: s0 },
            MomentCheck { name: "E[1{zw>0,zw~>0}]", closed: closed_joint, estimate: m1, se: s1 },
            MomentCheck { name: "E[z 1{zw>0}]", closed: closed_z, estimate: m2, se: s2 },
            MomentCheck { name: "E[z 1{both}]", closed: closed_z_joint, estimate: m3, se: s3 },
        ],
    })
}

/// Monte Carlo verification of the model-level closed forms: population
/// loss, expected `v` gradient, expected coarse `w` gradient.
#[derive(Debug, Clone)]
pub struct ModelMcReport {
    pub n_samples: usize,
    pub loss: MomentCheck,
    pub grad_v: MomentCheck,
    pub coarse_grad_w: MomentCheck,
}

/// Shares one stream of Gaussian input matrices across the three
/// estimators.
pub fn model_mc(model: &TwoLayerModel, n_samples: usize, seed: u64) -> ModelMcReport {
    let (m, n) = (model.m(), model.n());
    let dims = 1 + m + n;
    let model_cl = model.clone();
    let est = estimate_chunked(dims, n_samples, seed, || {
        let model = model_cl.clone();
        let mut z = vec![0.0; m * n];
        let mut acts = vec![false; m];
        move |rng: &mut ChaCha8Rng, out: &mut [f64]| {
            for zi in z.iter_mut() {
                *zi = rand::Rng::sample(rng, StandardNormal);
            }
            let mut learner = 0.0;
            let mut teacher = 0.0;
            for i in 0..m {
                let row = &z[i * n..(i + 1) * n];
                let a = dot(row, &model.w) > 0.0;
                acts[i] = a;
                if a {
                    learner += model.v[i];
                }
                teacher += model.v_star[i] * binarized_relu(dot(row, &model.w_star));
            }
            let r = learner - teacher;
            out[0] = 0.5 * r * r;
            for i in 0..m {
                if acts[i] {
                    out[1 + i] = r;
                    let coeff = model.v[i] * r;
                    let row = &z[i * n..(i + 1) * n];
                    for (j, &zj) in row.iter().enumerate() {
                        out[1 + m + j] += coeff * zj;
                    }
                }
            }
        }
    });

    let slice = |from: usize, len: usize| {
        (est.mean[from..from + len].to_vec(), est.se[from..from + len].to_vec())
    };
    let (l_m, l_s) = slice(0, 1);
    let (v_m, v_s) = slice(1, m);
    let (w_m, w_s) = slice(1 + m, n);

    ModelMcReport {
        n_samples,
        loss: MomentCheck {
            name: "population_loss",
            closed: vec![model.population_loss()],
            estimate: l_m,
            se: l_s,
        },
        grad_v: MomentCheck {
            name: "expected_grad_v",
            closed: model.expected_grad_v(),
            estimate: v_m,
            se: v_s,
        },
        coarse_grad_w: MomentCheck {
            name: "expected_coarse_grad_w",
            closed: model.expected_coarse_grad_w(),
            estimate: w_m,
            se: w_s,
        },
    }
}
