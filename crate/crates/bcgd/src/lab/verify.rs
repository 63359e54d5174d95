//! The closed-form-versus-oracle verification suite behind `lab-verify`.

use crate::lab::mc::{gaussian_moments, model_mc, MomentCheck, MIN_RELIABLE_SAMPLES};
use crate::lab::{
    dot, norm, rotate_toward, stationary_point, LabError, TwoLayerModel, ANGLE_TOL,
};
use crate::rng::{chunk_seed, normal_vec, stream_rng, stream_seed, unit_vec, Stream};

/// How a row's `score` column is to be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// Deviation in standard errors; gated by the report's SE gate.
    ZScore,
    /// Plain error against a fixed tolerance.
    Error,
}

#[derive(Debug, Clone)]
pub struct VerifyRow {
    pub check: String,
    pub closed: f64,
    pub estimate: f64,
    pub se: f64,
    pub score: f64,
    pub kind: ScoreKind,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
    pub gate: f64,
    pub warnings: Vec<String>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,closed,estimate,se,score,tolerance,pass\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.check, r.closed, r.estimate, r.se, r.score, r.tolerance, r.pass
            ));
        }
        out
    }

    /// Fixed-width table for terminal output.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<44} {:>14} {:>14} {:>10} {:>9} {:>6}\n",
            "check", "closed", "estimate", "se", "score", "pass"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<44} {:>14.6e} {:>14.6e} {:>10.3e} {:>9.3} {:>6}\n",
                r.check,
                r.closed,
                r.estimate,
                r.se,
                r.score,
                if r.pass { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub m: usize,
    pub n: usize,
    pub samples: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { m: 4, n: 4, samples: 1_000_000, trials: 20, seed: 0 }
    }
}

fn mc_row(prefix: &str, check: &MomentCheck, gate: f64) -> VerifyRow {
    let i = check.worst_component();
    let score = check.worst_z();
    VerifyRow {
        check: format!("{prefix}/{}", check.name),
        closed: check.closed[i],
        estimate: check.estimate[i],
        se: check.se[i],
        score,
        kind: ScoreKind::ZScore,
        tolerance: gate,
        pass: score <= gate,
    }
}

/// A model whose angle stays clear of the endpoints, so the closed-form
/// `w` gradient exists and finite differences of the loss are meaningful.
/// In one dimension the angle can only be 0 or pi, so any draw is accepted.
pub fn random_interior_model(m: usize, n: usize, seed: u64) -> TwoLayerModel {
    let mut rng = stream_rng(seed, Stream::Init);
    loop {
        let v = normal_vec(&mut rng, m);
        let v_star = normal_vec(&mut rng, m);
        let w = normal_vec(&mut rng, n);
        let w_star = unit_vec(&mut rng, n);
        if norm(&v_star) < 1e-6 || norm(&w) < 1e-6 {
            continue;
        }
        let model = TwoLayerModel::new(v, w, v_star, w_star).expect("nonzero by construction");
        let th = model.theta();
        if n == 1 || (th > 0.05 && th < std::f64::consts::PI - 0.05) {
            return model;
        }
    }
}

/// Central finite differences of the population loss in `v` and `w`.
pub fn fd_gradients(model: &TwoLayerModel, h: f64) -> (Vec<f64>, Vec<f64>) {
    let mut gv = vec![0.0; model.m()];
    for i in 0..model.m() {
        let mut hi = model.clone();
        hi.v[i] += h;
        let mut lo = model.clone();
        lo.v[i] -= h;
        gv[i] = (hi.population_loss() - lo.population_loss()) / (2.0 * h);
    }
    let mut gw = vec![0.0; model.n()];
    for j in 0..model.n() {
        let mut hi = model.clone();
        hi.w[j] += h;
        let mut lo = model.clone();
        lo.w[j] -= h;
        gw[j] = (hi.population_loss() - lo.population_loss()) / (2.0 * h);
    }
    (gv, gw)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let scale: f64 = b.iter().map(|y| y * y).sum();
    (diff / scale.max(1e-30)).sqrt()
}

/// Runs the whole suite: Gaussian moments, model-level Monte Carlo,
/// finite-difference gradient checks, the correlation identity sweep, and
/// the stationary-point verification.
pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport, LabError> {
    let mut warnings = Vec::new();
    let gate = if opts.samples < MIN_RELIABLE_SAMPLES {
        warnings.push(format!(
            "only {} samples (< {}); widening the gate to 10 standard errors",
            opts.samples, MIN_RELIABLE_SAMPLES
        ));
        10.0
    } else {
        5.0
    };

    let mc_seed = stream_seed(opts.seed, Stream::Mc);
    let mut rows = Vec::new();
    let mut pair_rng = stream_rng(opts.seed, Stream::Data);

    for trial in 0..opts.trials {
        let prefix = format!("trial{trial:02}");

        // Gaussian half-space moments on a random pair
        let w = normal_vec(&mut pair_rng, opts.n);
        let wt = normal_vec(&mut pair_rng, opts.n);
        let moments = gaussian_moments(&w, &wt, opts.samples, chunk_seed(mc_seed, 2 * trial as u64))?;
        for check in &moments.checks {
            rows.push(mc_row(&prefix, check, gate));
        }

        // model-level closed forms vs shared-draw Monte Carlo
        let model = random_interior_model(opts.m, opts.n, opts.seed.wrapping_add(trial as u64));
        let report = model_mc(&model, opts.samples, chunk_seed(mc_seed, 2 * trial as u64 + 1));
        rows.push(mc_row(&prefix, &report.loss, gate));
        rows.push(mc_row(&prefix, &report.grad_v, gate));
        rows.push(mc_row(&prefix, &report.coarse_grad_w, gate));

        // gradients against finite differences of the closed-form loss;
        // the w gradient only exists for interior angles, so n = 1 skips it
        let (fd_v, fd_w) = fd_gradients(&model, 1e-5);
        let gv = model.grad_v();
        let ev = rel_err(&gv, &fd_v);
        rows.push(VerifyRow {
            check: format!("{prefix}/grad_v_vs_fd"),
            closed: gv[0],
            estimate: fd_v[0],
            se: 0.0,
            score: ev,
            kind: ScoreKind::Error,
            tolerance: 1e-4,
            pass: ev <= 1e-4,
        });
        if opts.n >= 2 {
            let gw = model.grad_w()?;
            let ew = rel_err(&gw, &fd_w);
            rows.push(VerifyRow {
                check: format!("{prefix}/grad_w_vs_fd"),
                closed: gw[0],
                estimate: fd_w[0],
                se: 0.0,
                score: ew,
                kind: ScoreKind::Error,
                tolerance: 1e-4,
                pass: ew <= 1e-4,
            });
        }
    }

    // correlation identity and sign over a large model sweep (needs an
    // interior angle, which cannot exist in one dimension)
    if opts.n >= 2 {
        let sweep = 10_000u64;
        let mut worst_gap = 0.0f64;
        let mut min_corr = f64::INFINITY;
        let mut done = 0u64;
        let mut salt = 0u64;
        while done < sweep {
            let model = random_interior_model(opts.m, opts.n, opts.seed ^ 0xc0ffee ^ (done + salt));
            let th = model.theta();
            if th < ANGLE_TOL || std::f64::consts::PI - th < ANGLE_TOL {
                salt += 1;
                continue;
            }
            let closed = {
                let vv = dot(&model.v, &model.v_star);
                let two_pi = 2.0 * std::f64::consts::PI;
                th.sin() / (2.0 * two_pi.powf(1.5) * norm(&model.w)) * vv * vv
            };
            let inner = dot(&model.expected_coarse_grad_w(), &model.grad_w()?);
            worst_gap = worst_gap.max((closed - inner).abs());
            min_corr = min_corr.min(closed);
            done += 1;
        }
        rows.push(VerifyRow {
            check: format!("lemma_correlation_identity[{sweep}]"),
            closed: 0.0,
            estimate: worst_gap,
            se: 0.0,
            score: worst_gap,
            kind: ScoreKind::Error,
            tolerance: 1e-10,
            pass: worst_gap <= 1e-10,
        });
        rows.push(VerifyRow {
            check: format!("lemma_correlation_sign[{sweep}]"),
            closed: 0.0,
            estimate: min_corr,
            se: 0.0,
            score: (-min_corr).max(0.0),
            kind: ScoreKind::Error,
            tolerance: 0.0,
            pass: min_corr >= 0.0,
        });
    }

    // stationary points: both gradients vanish wherever one is returned
    let mut worst_grad = 0.0f64;
    let mut found = 0;
    let mut sp_rng = stream_rng(opts.seed ^ 0x57a7, Stream::Init);
    for _ in 0..200 {
        let v_star = normal_vec(&mut sp_rng, opts.m.max(2));
        let Some(sp) = stationary_point(&v_star)? else { continue };
        found += 1;
        let w_star = unit_vec(&mut sp_rng, opts.n.max(2));
        let dir = normal_vec(&mut sp_rng, opts.n.max(2));
        let w = rotate_toward(&w_star, &dir, sp.theta)?;
        let model = TwoLayerModel::new(sp.v.clone(), w, v_star, w_star)?;
        worst_grad = worst_grad
            .max(norm(&model.grad_v()))
            .max(norm(&model.grad_w()?));
    }
    rows.push(VerifyRow {
        check: format!("prop_stationary_gradients[{found}]"),
        closed: 0.0,
        estimate: worst_grad,
        se: 0.0,
        score: worst_grad,
        kind: ScoreKind::Error,
        tolerance: 1e-10,
        pass: found > 0 && worst_grad <= 1e-10,
    });

    Ok(VerifyReport { rows, gate, warnings })
}
