//! Sufficient-descent diagnostics for the blended update on a quadratic.
//!
//! For an objective with an L-Lipschitz gradient, one blended step admits
//! the bound
//!
//! `f(w') - f(w) <= -1/2 [ (1-rho)/eta (||w'-w_f||^2 - ||w-w_f||^2)
//!                         + (rho/eta - L) ||w'-w||^2 ]`
//!
//! whose first term is nonnegative because `w` is the projection of `w_f`.
//! With `rho/eta >= L + c` the contraction term forces per-step descent
//! proportional to `||w'-w||^2`; with `rho = 0` (BinaryConnect) no such
//! term exists and a step can be flagged "not guaranteed".

use crate::optim::OptimError;
use crate::rng::{normal_vec, stream_rng, Stream};
use crate::weights::project;

/// One point of an optimizer trajectory on a vector objective.
#[derive(Debug, Clone)]
pub struct TracePoint {
    /// Objective value at the quantized point.
    pub objective: f64,
    /// Quantized iterate.
    pub w: Vec<f64>,
    /// Float shadow iterate.
    pub w_f: Vec<f64>,
}

/// Per-step margin and bound decomposition.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: usize,
    /// `f(w') - f(w)`.
    pub decrease: f64,
    /// `f(w') - f(w) + c ||w'-w||^2` with `c = rho/eta - L`.
    pub margin: f64,
    /// `(1-rho)/eta (||w'-w_f||^2 - ||w-w_f||^2)`, nonnegative by
    /// projection optimality.
    pub projection_term: f64,
    /// `(rho/eta - L) ||w'-w||^2`.
    pub contraction_term: f64,
    /// The guaranteed upper bound `-1/2 (projection + contraction)`.
    pub bound: f64,
    /// Whether the decomposition forces descent for this step.
    pub guaranteed: bool,
    /// Whether the measured margin exceeds the roundoff tolerance.
    pub violated: bool,
}

#[derive(Debug, Clone)]
pub struct DescentReport {
    /// The constant being tested, `c = rho/eta - L`.
    pub c: f64,
    pub steps: Vec<StepReport>,
}

impl DescentReport {
    pub fn max_margin(&self) -> f64 {
        self.steps.iter().map(|s| s.margin).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn violations(&self) -> usize {
        self.steps.iter().filter(|s| s.violated).count()
    }

    pub fn unguaranteed(&self) -> usize {
        self.steps.iter().filter(|s| !s.guaranteed).count()
    }
}

/// Margins above this are counted as violations; below it they are
/// attributed to roundoff.
pub const MARGIN_TOL: f64 = 1e-12;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Evaluates the per-step sufficient-descent margins of a recorded
/// trajectory, testing the constant `c = rho/eta - L`.
pub fn check_sufficient_descent(
    trace: &[TracePoint],
    rho: f64,
    eta: f64,
    lipschitz: f64,
) -> Result<DescentReport, OptimError> {
    if trace.len() < 2 {
        return Err(OptimError::InsufficientTrace(trace.len()));
    }
    if eta <= 0.0 {
        return Err(OptimError::InvalidLearningRate(eta));
    }
    let c = rho / eta - lipschitz;
    let mut steps = Vec::with_capacity(trace.len() - 1);
    for (t, pair) in trace.windows(2).enumerate() {
        let (prev, next) = (&pair[0], &pair[1]);
        let move_sq = sq_dist(&next.w, &prev.w);
        let decrease = next.objective - prev.objective;
        let projection_term =
            (1.0 - rho) / eta * (sq_dist(&next.w, &prev.w_f) - sq_dist(&prev.w, &prev.w_f));
        let contraction_term = c * move_sq;
        steps.push(StepReport {
            step: t,
            decrease,
            margin: decrease + c * move_sq,
            projection_term,
            contraction_term,
            bound: -0.5 * (projection_term + contraction_term),
            guaranteed: move_sq == 0.0 || projection_term + contraction_term > 0.0,
            violated: decrease + c * move_sq > MARGIN_TOL,
        });
    }
    Ok(DescentReport { c, steps })
}

/// A quadratic objective `L/2 ||w - target||^2` minimized by the blended
/// update over the ternary constraint set.
#[derive(Debug, Clone)]
pub struct QuadraticScenario {
    pub target: Vec<f64>,
    pub start: Vec<f64>,
    pub lipschitz: f64,
    pub rho: f64,
    pub eta: f64,
    pub steps: usize,
    pub bits: u32,
}

impl QuadraticScenario {
    fn objective(&self, w: &[f64]) -> f64 {
        0.5 * self.lipschitz * sq_dist(w, &self.target)
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.target)
            .map(|(&wi, &ti)| self.lipschitz * (wi - ti))
            .collect()
    }

    /// Runs the blended iteration and records `(f(w^t), w^t, w_f^t)`.
    pub fn run(&self) -> Result<Vec<TracePoint>, OptimError> {
        let mut w_f = self.start.clone();
        let mut w = project(&w_f, self.bits)?.dequantize();
        let mut trace = vec![TracePoint {
            objective: self.objective(&w),
            w: w.clone(),
            w_f: w_f.clone(),
        }];
        for _ in 0..self.steps {
            let g = self.gradient(&w);
            for i in 0..w_f.len() {
                w_f[i] = (1.0 - self.rho) * w_f[i] + self.rho * w[i] - self.eta * g[i];
            }
            w = project(&w_f, self.bits)?.dequantize();
            trace.push(TracePoint {
                objective: self.objective(&w),
                w: w.clone(),
                w_f: w_f.clone(),
            });
        }
        Ok(trace)
    }
}

/// The built-in scenario family: 2-weight ternarization (the smallest
/// geometry where the constraint set is a union of rays) against a unit
/// quadratic, with `rho/eta = L + 1`.
pub fn standard_scenarios(starts: usize, steps: usize, seed: u64) -> Vec<QuadraticScenario> {
    let mut rng = stream_rng(seed, Stream::Data);
    let rho = 1e-5;
    let lipschitz = 1.0;
    (0..starts)
        .map(|_| {
            let target: Vec<f64> = normal_vec(&mut rng, 2).iter().map(|x| 2.0 * x).collect();
            let start: Vec<f64> = normal_vec(&mut rng, 2).iter().map(|x| 2.0 * x).collect();
            QuadraticScenario {
                target,
                start,
                lipschitz,
                rho,
                eta: rho / (lipschitz + 1.0),
                steps,
                bits: 2,
            }
        })
        .collect()
}

/// BinaryConnect (`rho = 0`) started a hair inside one ternary ray's cell
/// with the attractor in the neighboring cell: the shadow crosses the cell
/// boundary where the projection distances tie, so the decomposition has no
/// positive term and the crossing step is "not guaranteed".
pub fn adversarial_bc_scenario(steps: usize) -> QuadraticScenario {
    let near_boundary = 22.5f64.to_radians() - 0.02;
    let attractor = 50f64.to_radians();
    QuadraticScenario {
        target: vec![2.0 * attractor.cos(), 2.0 * attractor.sin()],
        start: vec![near_boundary.cos(), near_boundary.sin()],
        lipschitz: 1.0,
        rho: 0.0,
        eta: 0.05,
        steps,
        bits: 2,
    }
}
