//! Two-layer analysis lab: a binarized-ReLU teacher/learner pair under
//! i.i.d. Gaussian inputs.
//!
//! Every closed form here (population loss, its gradients, the expected
//! coarse gradient, their inner product, the stationary points) has a Monte
//! Carlo or finite-difference oracle in [`mc`] and in the test suites; the
//! lab exists to verify the formulas numerically, not to train anything.

pub mod descend;
pub mod mc;
pub mod verify;

use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("vector must be nonzero")]
    ZeroVector,
    #[error("teacher norm must be 1, got {0}")]
    TeacherNotNormalized(f64),
    #[error("dimension mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gradient undefined at angle {0} (needs 0 < angle < pi)")]
    NondifferentiablePoint(f64),
    #[error("iteration produced a zero weight vector; reduce the step size")]
    StepFailed,
    #[error("closed-form correlation {closed} disagrees with the inner product {inner}")]
    CorrelationMismatch { closed: f64, inner: f64 },
    #[error("norm constraint violated: {0}")]
    NormConstraint(String),
}

/// Angles closer than this to 0 or pi are treated as endpoint cases.
pub const ANGLE_TOL: f64 = 1e-9;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn sum(a: &[f64]) -> f64 {
    a.iter().sum()
}

/// Binarized ReLU: the 1-bit staircase with unit resolution.
pub fn binarized_relu(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Angle between two nonzero vectors, in [0, pi].
///
/// The cosine is clamped into [-1, 1] to absorb roundoff near
/// collinearity, and the angle is recovered with atan2 against the
/// residual norm (which equals the sine), keeping full precision at both
/// endpoints where acos alone loses half the mantissa.
pub fn angle(a: &[f64], b: &[f64]) -> Result<f64, LabError> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(LabError::ZeroVector);
    }
    let c = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    let s = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let r = x / na - c * y / nb;
            r * r
        })
        .sum::<f64>()
        .sqrt();
    Ok(s.atan2(c))
}

/// Learner `(v, w)` against a fixed teacher `(v_star, w_star)`.
#[derive(Debug, Clone)]
pub struct TwoLayerModel {
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub v_star: Vec<f64>,
    pub w_star: Vec<f64>,
}

impl TwoLayerModel {
    /// Builds a model, enforcing `||w_star|| = 1`, a nonzero teacher, and a
    /// nonzero first-layer learner.
    pub fn new(
        v: Vec<f64>,
        w: Vec<f64>,
        v_star: Vec<f64>,
        w_star: Vec<f64>,
    ) -> Result<Self, LabError> {
        if v.len() != v_star.len() || w.len() != w_star.len() {
            return Err(LabError::ShapeMismatch(format!(
                "v: {} vs {}, w: {} vs {}",
                v.len(),
                v_star.len(),
                w.len(),
                w_star.len()
            )));
        }
        let ns = norm(&w_star);
        if (ns - 1.0).abs() > 1e-9 {
            return Err(LabError::TeacherNotNormalized(ns));
        }
        if norm(&v_star) == 0.0 {
            return Err(LabError::ZeroVector);
        }
        if norm(&w) == 0.0 {
            return Err(LabError::ZeroVector);
        }
        Ok(TwoLayerModel { v, w, v_star, w_star })
    }

    pub fn m(&self) -> usize {
        self.v.len()
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    /// Angle between the learner and teacher first-layer weights.
    pub fn theta(&self) -> f64 {
        angle(&self.w, &self.w_star).expect("w validated nonzero")
    }

    /// Squared-error sample loss at one Gaussian input matrix.
    pub fn sample_loss(&self, z: &Matrix) -> Result<f64, LabError> {
        let r = self.residual(z)?;
        Ok(0.5 * r * r)
    }

    fn check_z(&self, z: &Matrix) -> Result<(), LabError> {
        if z.rows() != self.m() || z.cols() != self.n() {
            return Err(LabError::ShapeMismatch(format!(
                "input {}x{} for model m={}, n={}",
                z.rows(),
                z.cols(),
                self.m(),
                self.n()
            )));
        }
        Ok(())
    }

    fn residual(&self, z: &Matrix) -> Result<f64, LabError> {
        self.check_z(z)?;
        let mut learner = 0.0;
        let mut teacher = 0.0;
        for i in 0..self.m() {
            let row = z.row(i);
            learner += self.v[i] * binarized_relu(dot(row, &self.w));
            teacher += self.v_star[i] * binarized_relu(dot(row, &self.w_star));
        }
        Ok(learner - teacher)
    }

    /// Closed-form population loss.
    pub fn population_loss(&self) -> f64 {
        let th = self.theta();
        let (v, vs) = (&self.v, &self.v_star);
        let quad_v = dot(v, v) + sum(v) * sum(v);
        let cross = (1.0 - 2.0 * th / std::f64::consts::PI) * dot(v, vs) + sum(v) * sum(vs);
        let quad_vs = dot(vs, vs) + sum(vs) * sum(vs);
        (quad_v - 2.0 * cross + quad_vs) / 8.0
    }

    /// Gradient of the population loss in `v`; also the expectation of the
    /// per-sample `v` gradient.
    pub fn grad_v(&self) -> Vec<f64> {
        let th = self.theta();
        let sv = sum(&self.v);
        let svs = sum(&self.v_star);
        let shrink = 1.0 - 2.0 * th / std::f64::consts::PI;
        self.v
            .iter()
            .zip(&self.v_star)
            .map(|(&vi, &vsi)| 0.25 * (vi + sv) - 0.25 * (shrink * vsi + svs))
            .collect()
    }

    /// Gradient of the population loss in `w`, defined for angles strictly
    /// between 0 and pi.
    pub fn grad_w(&self) -> Result<Vec<f64>, LabError> {
        let th = self.theta();
        if th < ANGLE_TOL || std::f64::consts::PI - th < ANGLE_TOL {
            return Err(LabError::NondifferentiablePoint(th));
        }
        let nw = norm(&self.w);
        let unit_proj = self.unit_orth_projection()?;
        let scale = -dot(&self.v, &self.v_star) / (2.0 * std::f64::consts::PI * nw);
        Ok(unit_proj.into_iter().map(|p| scale * p).collect())
    }

    /// Unit projection of the teacher direction onto the orthogonal
    /// complement of `w`.
    fn unit_orth_projection(&self) -> Result<Vec<f64>, LabError> {
        let nw = norm(&self.w);
        let coeff = dot(&self.w, &self.w_star) / (nw * nw);
        let p: Vec<f64> = self
            .w_star
            .iter()
            .zip(&self.w)
            .map(|(&ws, &w)| ws - coeff * w)
            .collect();
        let np = norm(&p);
        if np == 0.0 {
            return Err(LabError::NondifferentiablePoint(self.theta()));
        }
        Ok(p.into_iter().map(|x| x / np).collect())
    }

    /// Coarse per-sample gradient: the exact `v` gradient and the ReLU
    /// substitute for the `w` gradient.
    pub fn sample_coarse_grad(&self, z: &Matrix) -> Result<(Vec<f64>, Vec<f64>), LabError> {
        let r = self.residual(z)?;
        let mut dv = vec![0.0; self.m()];
        let mut gw = vec![0.0; self.n()];
        for i in 0..self.m() {
            let row = z.row(i);
            let act = binarized_relu(dot(row, &self.w));
            dv[i] = act * r;
            if act > 0.0 {
                let coeff = self.v[i] * r;
                for (g, &zj) in gw.iter_mut().zip(row) {
                    *g += coeff * zj;
                }
            }
        }
        Ok((dv, gw))
    }

    /// `h(v, v_star)` appearing in the expected coarse gradient.
    pub fn h(&self) -> f64 {
        let (v, vs) = (&self.v, &self.v_star);
        dot(v, v) + sum(v) * sum(v) - sum(v) * sum(vs) + dot(v, vs)
    }

    /// Closed-form expectation of the coarse `w` gradient. Defined for all
    /// angles; the cross term is dropped at angle pi.
    pub fn expected_coarse_grad_w(&self) -> Vec<f64> {
        let th = self.theta();
        let nw = norm(&self.w);
        let sqrt2pi = (2.0 * std::f64::consts::PI).sqrt();
        let radial = self.h() / (2.0 * sqrt2pi);
        let mut out: Vec<f64> = self.w.iter().map(|&x| radial * x / nw).collect();

        if std::f64::consts::PI - th >= ANGLE_TOL {
            let u: Vec<f64> = self
                .w
                .iter()
                .zip(&self.w_star)
                .map(|(&w, &ws)| w / nw + ws)
                .collect();
            let nu = norm(&u);
            if nu > 0.0 {
                let cross = (th / 2.0).cos() * dot(&self.v, &self.v_star) / sqrt2pi;
                for (o, &ui) in out.iter_mut().zip(&u) {
                    *o -= cross * ui / nu;
                }
            }
        }
        out
    }

    /// Expectation of the per-sample `v` gradient; equals [`Self::grad_v`].
    pub fn expected_grad_v(&self) -> Vec<f64> {
        self.grad_v()
    }

    /// Closed-form inner product between the expected coarse gradient and
    /// the true `w` gradient, checked against the explicit inner product.
    pub fn correlation(&self) -> Result<f64, LabError> {
        let th = self.theta();
        if th < ANGLE_TOL || std::f64::consts::PI - th < ANGLE_TOL {
            return Err(LabError::NondifferentiablePoint(th));
        }
        let vv = dot(&self.v, &self.v_star);
        let two_pi = 2.0 * std::f64::consts::PI;
        let closed = th.sin() / (2.0 * two_pi.powf(1.5) * norm(&self.w)) * vv * vv;
        let inner = dot(&self.expected_coarse_grad_w(), &self.grad_w()?);
        if (closed - inner).abs() > 1e-10 {
            return Err(LabError::CorrelationMismatch { closed, inner });
        }
        Ok(closed)
    }

    /// Ratio `||E g||^2 / (||grad_v||^2 + correlation)` used to exhibit a
    /// finite correlation-bound constant empirically. `None` marks samples
    /// whose denominator is below 1e-8.
    pub fn correlation_bound_ratio(&self, v_cap: f64) -> Result<Option<f64>, LabError> {
        let nw = norm(&self.w);
        if (nw - 1.0).abs() > 1e-9 {
            return Err(LabError::NormConstraint(format!("||w|| = {nw}, expected 1")));
        }
        if norm(&self.v) > v_cap + 1e-12 {
            return Err(LabError::NormConstraint(format!(
                "||v|| = {} exceeds cap {v_cap}",
                norm(&self.v)
            )));
        }
        let gv = self.grad_v();
        let corr = self.correlation()?;
        let denom = dot(&gv, &gv) + corr;
        if denom < 1e-8 {
            return Ok(None);
        }
        let g = self.expected_coarse_grad_w();
        Ok(Some(dot(&g, &g) / denom))
    }

    /// One step of coarse gradient descent with weight normalization.
    pub fn ncgd_step(&self, eta: f64) -> Result<TwoLayerModel, LabError> {
        let gv = self.expected_grad_v();
        let gw = self.expected_coarse_grad_w();
        let v: Vec<f64> = self.v.iter().zip(&gv).map(|(&x, &g)| x - eta * g).collect();
        let w_half: Vec<f64> = self.w.iter().zip(&gw).map(|(&x, &g)| x - eta * g).collect();
        let nh = norm(&w_half);
        if nh == 0.0 {
            return Err(LabError::StepFailed);
        }
        Ok(TwoLayerModel {
            v,
            w: w_half.into_iter().map(|x| x / nh).collect(),
            v_star: self.v_star.clone(),
            w_star: self.w_star.clone(),
        })
    }
}

/// A stationary point of the population loss: the `v` vector and the angle
/// the first-layer weights must make with the teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryPoint {
    pub v: Vec<f64>,
    pub theta: f64,
}

/// Solves for the stationary points with simultaneously vanishing gradients.
/// Returns `None` when `(1^T v*)^2 >= (m+1) ||v*||^2 / 2`, in which case the
/// problem has none.
pub fn stationary_point(v_star: &[f64]) -> Result<Option<StationaryPoint>, LabError> {
    let vs_norm2 = dot(v_star, v_star);
    if vs_norm2 == 0.0 {
        return Err(LabError::ZeroVector);
    }
    let m = v_star.len() as f64;
    let s = sum(v_star);
    let s2 = s * s;
    let bound = (m + 1.0) * vs_norm2 / 2.0;
    if s2 >= bound {
        return Ok(None);
    }
    let denom = (m + 1.0) * vs_norm2 - s2;
    let shrink = -s2 / denom;
    // (I + 11^T)^{-1} = I - 11^T / (m+1)
    let u: Vec<f64> = v_star.iter().map(|&x| shrink * x + s).collect();
    let su = sum(&u);
    let v: Vec<f64> = u.iter().map(|&x| x - su / (m + 1.0)).collect();
    let theta = std::f64::consts::FRAC_PI_2 * (m + 1.0) * vs_norm2 / denom;
    Ok(Some(StationaryPoint { v, theta }))
}

/// A unit vector at the given angle from `base`, rotated toward `direction`
/// (whose component along `base` is discarded).
pub fn rotate_toward(base: &[f64], direction: &[f64], theta: f64) -> Result<Vec<f64>, LabError> {
    let nb = norm(base);
    if nb == 0.0 {
        return Err(LabError::ZeroVector);
    }
    let unit_base: Vec<f64> = base.iter().map(|&x| x / nb).collect();
    let along = dot(direction, &unit_base);
    let orth: Vec<f64> = direction
        .iter()
        .zip(&unit_base)
        .map(|(&d, &b)| d - along * b)
        .collect();
    let no = norm(&orth);
    if no < 1e-12 {
        return Err(LabError::ZeroVector);
    }
    Ok(unit_base
        .iter()
        .zip(&orth)
        .map(|(&b, &o)| theta.cos() * b + theta.sin() * o / no)
        .collect())
}

/// The gradient-Lipschitz constant assembled from the explicit bounds:
/// `(m + 1 + ||v*||/c) / 4 + (C + c) ||v*|| / (2 pi c^2)` for models with
/// `||w|| >= c` and `||v|| <= C`.
pub fn lipschitz_bound(m: usize, v_star_norm: f64, w_floor: f64, v_cap: f64) -> f64 {
    (m as f64 + 1.0 + v_star_norm / w_floor) / 4.0
        + (v_cap + w_floor) * v_star_norm / (2.0 * std::f64::consts::PI * w_floor * w_floor)
}
