//! `bcgd`: quantized training runs, theory verification, standalone weight
//! quantization, and sufficient-descent diagnostics.
//!
//! Exit codes: 0 success, 1 check or convergence failure, 2 usage/format
//! error, 3 numerical divergence.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bcgd::data::{gen_gaussian_blobs, load_idx, read_config, Dataset};
use bcgd::descent::{adversarial_bc_scenario, check_sufficient_descent, standard_scenarios, MARGIN_TOL};
use bcgd::lab::descend::{run_descend, DescendOptions, InitMode};
use bcgd::lab::verify::{run_verify, VerifyOptions};
use bcgd::net::save_checkpoint;
use bcgd::optim::Method;
use bcgd::train::{train, TrainConfig, TrainError};
use bcgd::weights::{project, read_weight_file, write_weight_file};

const EXIT_OK: u8 = 0;
const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "bcgd", version, about = "Blended coarse gradient descent for fully quantized networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a quantized MLP and write metrics plus a checkpoint
    Train(TrainArgs),
    /// Verify the two-layer closed forms against Monte Carlo oracles
    LabVerify(LabVerifyArgs),
    /// Run normalized coarse gradient descent on the population loss
    LabDescend(LabDescendArgs),
    /// Project a weight file onto a low-bit set
    Quantize(QuantizeArgs),
    /// Check the sufficient-descent margins on the built-in quadratic
    CheckDescent(CheckDescentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Bcgd,
    Bc,
    Pgd,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Bcgd => Method::Bcgd,
            MethodArg::Bc => Method::Bc,
            MethodArg::Pgd => Method::Pgd,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Blobs,
    Idx,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (key = value lines)
    #[arg(long)]
    config: PathBuf,
    /// Output directory for metrics.csv and the checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Optimizer: blended, BinaryConnect, or projected gradient descent
    #[arg(long, value_enum, default_value = "bcgd")]
    method: MethodArg,
    /// Overrides the config-file seed
    #[arg(long)]
    seed: Option<u64>,
    /// Hidden layer widths, comma separated
    #[arg(long, default_value = "16", value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long, value_enum, default_value = "blobs")]
    dataset: DatasetArg,
    /// Blob sample count
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Blob feature count
    #[arg(long, default_value_t = 2)]
    features: usize,
    /// Blob class count
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Blob class-mean separation
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    /// IDX image file (dataset = idx)
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file (dataset = idx)
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct LabVerifyArgs {
    /// Second-layer dimension of the analysis model
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// First-layer dimension of the analysis model
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Monte Carlo samples per estimate
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    /// Number of random pairs/models per check
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Machine-readable CSV report
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LabDescendArgs {
    #[arg(long, default_value_t = 4)]
    m: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Initial step size; halved automatically on non-monotone steps
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 500_000)]
    max_iters: usize,
    /// Initialization: remark1, random, or stationary-adjacent
    #[arg(long, default_value = "remark1")]
    init: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectory CSV (t, f, grad norms, angle, v error)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Input weight file (BCGDWGT1 format)
    #[arg(long)]
    input: PathBuf,
    /// Weight bit-width (1 = binary, 2 = ternary, >= 3 Lloyd)
    #[arg(long)]
    bits: u32,
    /// Output weight file with the dequantized values
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    /// Blended update with rho/eta = L + 1
    Standard,
    /// BinaryConnect started against a projection tie
    Adversarial,
}

#[derive(Args)]
struct CheckDescentArgs {
    #[arg(long, value_enum, default_value = "standard")]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = 100)]
    starts: usize,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-step margin CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::LabVerify(args) => cmd_lab_verify(args),
        Command::LabDescend(args) => cmd_lab_descend(args),
        Command::Quantize(args) => cmd_quantize(args),
        Command::CheckDescent(args) => cmd_check_descent(args),
    };
    match code {
        Ok(c) => ExitCode::from(c),
        Err(msg) => {
            eprintln!("error: {}", msg.text);
            ExitCode::from(msg.code)
        }
    }
}

struct Failure {
    code: u8,
    text: String,
}

fn usage_err(e: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_USAGE, text: e.to_string() }
}

fn cmd_train(args: TrainArgs) -> Result<u8, Failure> {
    let map: BTreeMap<String, String> = read_config(&args.config).map_err(usage_err)?;
    let mut cfg = TrainConfig::from_map(&map).map_err(usage_err)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }

    let dataset: Dataset = match args.dataset {
        DatasetArg::Blobs => {
            gen_gaussian_blobs(args.samples, args.features, args.classes, args.separation, cfg.seed)
                .map_err(usage_err)?
        }
        DatasetArg::Idx => {
            let (Some(images), Some(labels)) = (&args.images, &args.labels) else {
                return Err(usage_err("--dataset idx requires --images and --labels"));
            };
            load_idx(images, labels).map_err(usage_err)?
        }
    };

    let method: Method = args.method.into();
    let (outcome, net) = match train(&dataset, &args.hidden, &cfg, method) {
        Ok(r) => r,
        Err(TrainError::Diverged { epoch, iteration }) => {
            return Err(Failure {
                code: EXIT_DIVERGED,
                text: format!("loss became non-finite at epoch {epoch}, iteration {iteration}"),
            })
        }
        Err(e) => return Err(usage_err(e)),
    };

    fs::create_dir_all(&args.out).map_err(usage_err)?;
    outcome.metrics.write(&args.out.join("metrics.csv")).map_err(usage_err)?;
    save_checkpoint(&net, &args.out.join("checkpoint")).map_err(usage_err)?;
    println!(
        "{} finished: train_loss = {:.6}, train_acc = {:.4}, val_acc = {:.4}",
        method.name(),
        outcome.final_train_loss,
        outcome.final_train_acc,
        outcome.final_val_acc
    );
    println!("metrics: {}", args.out.join("metrics.csv").display());
    println!("checkpoint: {}", args.out.join("checkpoint").display());
    Ok(EXIT_OK)
}

fn cmd_lab_verify(args: LabVerifyArgs) -> Result<u8, Failure> {
    if args.m < 1 || args.n < 1 {
        return Err(usage_err("--m and --n must be at least 1"));
    }
    let opts = VerifyOptions {
        m: args.m,
        n: args.n,
        samples: args.samples,
        trials: args.trials,
        seed: args.seed,
    };
    let report = run_verify(&opts).map_err(usage_err)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report.to_table());
    if let Some(path) = &args.out {
        fs::write(path, report.to_csv()).map_err(usage_err)?;
    }
    if report.all_pass() {
        println!("all {} checks passed (gate: {} SE)", report.rows.len(), report.gate);
        Ok(EXIT_OK)
    } else {
        for row in report.rows.iter().filter(|r| !r.pass) {
            eprintln!(
                "FAILED {}: closed {} vs estimate {} (score {}, tolerance {})",
                row.check, row.closed, row.estimate, row.score, row.tolerance
            );
        }
        Ok(EXIT_CHECK_FAILED)
    }
}

fn cmd_lab_descend(args: LabDescendArgs) -> Result<u8, Failure> {
    let Some(init) = InitMode::parse(&args.init) else {
        return Err(usage_err(format!(
            "unknown init mode '{}'; expected remark1, random, or stationary-adjacent",
            args.init
        )));
    };
    let opts = DescendOptions {
        m: args.m,
        n: args.n,
        eta: args.eta,
        max_iters: args.max_iters,
        init,
        seed: args.seed,
    };
    let run = run_descend(&opts).map_err(|e| Failure {
        code: EXIT_CHECK_FAILED,
        text: format!("descent failed: {e}"),
    })?;
    if run.halvings > 0 {
        eprintln!(
            "note: step size halved {} time(s); accepted eta = {}",
            run.halvings, run.accepted_eta
        );
    }
    if let Some(path) = &args.out {
        fs::write(path, run.to_csv()).map_err(usage_err)?;
    }
    let last = run.last();
    println!(
        "iters = {}, f = {:.6e}, |grad_v| = {:.3e}, |E[g]| = {:.3e}, theta = {:.3e}, |v - v*| = {:.3e}",
        last.t, last.f, last.grad_v_norm, last.coarse_grad_norm, last.theta, last.v_err
    );
    if run.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!("did not reach the 1e-6 gradient tolerance in {} iterations", args.max_iters);
        Ok(EXIT_CHECK_FAILED)
    }
}

fn cmd_quantize(args: QuantizeArgs) -> Result<u8, Failure> {
    let values = read_weight_file(&args.input).map_err(usage_err)?;
    let quantized = project(&values, args.bits).map_err(usage_err)?;
    let objective = quantized.objective(&values);
    write_weight_file(&args.out, &quantized.dequantize()).map_err(usage_err)?;

    println!("weights: {}", values.len());
    println!("bits: {}", args.bits);
    println!("delta = {}", quantized.delta());
    println!("objective = {}", objective);
    let mut histogram: BTreeMap<i32, usize> = BTreeMap::new();
    for &level in quantized.levels() {
        *histogram.entry(level).or_default() += 1;
    }
    println!("levels:");
    for (level, count) in histogram {
        println!("  {level:>4}: {count}");
    }
    println!("quantized file: {}", args.out.display());
    Ok(EXIT_OK)
}

fn cmd_check_descent(args: CheckDescentArgs) -> Result<u8, Failure> {
    let scenarios = match args.scenario {
        ScenarioArg::Standard => standard_scenarios(args.starts, args.steps, args.seed),
        ScenarioArg::Adversarial => vec![adversarial_bc_scenario(args.steps)],
    };
    let mut csv = String::from(
        "start,step,decrease,margin,projection_term,contraction_term,bound,guaranteed\n",
    );
    let mut worst_margin = f64::NEG_INFINITY;
    let mut violations = 0usize;
    let mut unguaranteed = 0usize;
    let mut c_tested = 0.0;
    for (idx, scenario) in scenarios.iter().enumerate() {
        let trace = scenario.run().map_err(usage_err)?;
        let report = check_sufficient_descent(&trace, scenario.rho, scenario.eta, scenario.lipschitz)
            .map_err(usage_err)?;
        c_tested = report.c;
        for step in &report.steps {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                idx,
                step.step,
                step.decrease,
                step.margin,
                step.projection_term,
                step.contraction_term,
                step.bound,
                step.guaranteed
            ));
        }
        if scenarios.len() == 1 {
            for step in &report.steps {
                println!(
                    "step {:>4}: decrease = {:+.6e}, margin = {:+.6e}{}",
                    step.step,
                    step.decrease,
                    step.margin,
                    if step.guaranteed { "" } else { "  [not guaranteed]" }
                );
            }
        } else {
            println!(
                "start {:>3}: max margin = {:+.3e}, violations = {}, unguaranteed steps = {}",
                idx,
                report.max_margin(),
                report.violations(),
                report.unguaranteed()
            );
        }
        worst_margin = worst_margin.max(report.max_margin());
        violations += report.violations();
        unguaranteed += report.unguaranteed();
    }
    if let Some(path) = &args.out {
        fs::write(path, csv).map_err(usage_err)?;
    }
    println!(
        "c = {c_tested}: worst margin = {worst_margin:+.6e}, violations = {violations}, unguaranteed steps = {unguaranteed}"
    );
    match args.scenario {
        ScenarioArg::Standard => {
            if violations == 0 {
                println!("sufficient descent holds at every step (tolerance {MARGIN_TOL:e})");
                Ok(EXIT_OK)
            } else {
                eprintln!("sufficient descent violated on {violations} step(s)");
                Ok(EXIT_CHECK_FAILED)
            }
        }
        ScenarioArg::Adversarial => {
            // absence of a guarantee is a warning, not a failure
            if unguaranteed > 0 {
                eprintln!(
                    "warning: {unguaranteed} step(s) had no descent guarantee (rho = 0 has no contraction term)"
                );
            }
            Ok(EXIT_OK)
        }
    }
}
