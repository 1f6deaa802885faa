//! `nidslab` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical or convergence failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nidslab::algorithms::{AlphaPolicy, CPolicy, StepSizes};
use nidslab::analysis::{certify_point, theoretical_rho_for};
use nidslab::harness::{
    expand_sweep, run_experiment, write_experiment, AlgorithmSpec, ExperimentConfig, Method, MixingRule,
    SweepParameter, TopologySpec,
};
use nidslab::netgraph::{
    consensus_power, laplacian_weights, metropolis_weights, spectral_summary, suggest_consensus_steps,
    validate_mixing, GraphDocument, GraphModel, MixingMatrix,
};
use nidslab::objectives::{write_problem_bundle, ProblemSpec, PROBLEM_MANIFEST};
use nidslab::stackmat::StackedMatrix;
use nidslab::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "nidslab", version, about = "Decentralized optimization experiments with NIDS and baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a problem instance and write it as a bundle.
    GenProblem(GenProblem),
    /// Generate a graph and its mixing matrix.
    GenGraph(GenGraph),
    /// Check a mixing matrix against the four standing assumptions.
    ValidateMixing(ValidateMixing),
    /// Run an experiment config.
    Run(RunArgs),
    /// Certify the reference solution as a fixed point.
    Certify(CertifyArgs),
    /// Theoretical linear rate for the NIDS runs of a config.
    Rho(RhoArgs),
    /// Run a config once per value of a scalar parameter.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenProblem {
    /// Experiment config or bare problem spec (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "problem")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Ring,
    Complete,
    Er,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MixingArg {
    Metropolis,
    Laplacian,
    /// Use the weights stored in the graph file.
    Stored,
}

#[derive(Args, Debug)]
struct GenGraph {
    /// Take `n` and the topology from an experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum, default_value = "er")]
    model: ModelArg,
    /// Edge probability for `--model er`.
    #[arg(long, default_value_t = 0.2)]
    prob: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "metropolis")]
    method: MixingArg,
    #[arg(long)]
    tau: Option<f64>,
    /// Consensus power.
    #[arg(long)]
    t: Option<u32>,
    #[arg(long, default_value = "graph.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateMixing {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, value_enum, default_value = "metropolis")]
    method: MixingArg,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    t: Option<u32>,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Overrides shared by every config-driven subcommand.
#[derive(Args, Debug)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    /// Seed for both the problem and the graph.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Step size; a comma-separated list sweeps it.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// NIDS coupling: `half`, `spectral` or a number.
    #[arg(long)]
    c: Option<String>,
    /// Keep only these labels or methods (comma-separated).
    #[arg(long, value_delimiter = ',')]
    algo: Option<Vec<String>>,
    /// Consensus power.
    #[arg(long)]
    t: Option<u32>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    o: Overrides,
    /// Omit wall-clock times so outputs are byte-reproducible.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args, Debug)]
struct CertifyArgs {
    #[command(flatten)]
    o: Overrides,
}

#[derive(Args, Debug)]
struct RhoArgs {
    #[command(flatten)]
    o: Overrides,
    /// Largest consensus power considered by the suggestion.
    #[arg(long, default_value_t = 20)]
    t_max: u32,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    o: Overrides,
    /// NIDS coupling values to sweep (comma-separated) instead of `--alpha`.
    #[arg(long, value_delimiter = ',')]
    c_values: Option<Vec<f64>>,
    #[arg(long)]
    no_timing: bool,
}

fn parse_c(s: &str) -> Result<CPolicy> {
    match s.trim().to_ascii_lowercase().as_str() {
        "half" => Ok(CPolicy::Half),
        "spectral" => Ok(CPolicy::Spectral),
        other => other
            .parse::<f64>()
            .map(|c| CPolicy::Value { c })
            .map_err(|_| Error::Argument(format!("--c expects half, spectral or a number, got '{s}'"))),
    }
}

fn set_alpha(a: &mut AlgorithmSpec, v: f64) {
    a.alpha = match a.alpha {
        AlphaPolicy::InverseLipschitz { .. } => AlphaPolicy::InverseLipschitz { scale: v },
        _ => AlphaPolicy::Uniform { alpha: v },
    };
}

/// Loads the config and applies every override except a multi-valued `--alpha`.
fn load(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&o.config)?;
    if let Some(seed) = o.seed {
        cfg.problem.set_seed(seed);
        cfg.topology.seed = seed;
    }
    if let Some(keep) = &o.algo {
        let wanted: Vec<String> = keep.iter().map(|s| s.trim().to_string()).collect();
        cfg.algorithms.retain(|a| {
            wanted
                .iter()
                .any(|w| *w == a.label() || w.parse::<Method>().is_ok_and(|m| m == a.method))
        });
        if cfg.algorithms.is_empty() {
            return Err(Error::Argument(format!("--algo {} matches no algorithm", wanted.join(","))));
        }
    }
    if let Some(c) = &o.c {
        let c = parse_c(c)?;
        for a in cfg.algorithms.iter_mut().filter(|a| a.method == Method::Nids) {
            a.c = c;
        }
    }
    if let Some([v]) = o.alpha.as_deref() {
        for a in &mut cfg.algorithms {
            set_alpha(a, *v);
        }
    }
    if let Some(t) = o.t {
        cfg.topology.t = t;
    }
    if let Some(eps) = o.eps {
        cfg.stopping.eps = Some(eps);
    }
    if let Some(m) = o.max_iter {
        cfg.stopping.max_iter = Some(m);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(o: &Overrides, cfg: &ExperimentConfig) -> PathBuf {
    o.out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| {
            let name = if cfg.name.is_empty() { "experiment" } else { &cfg.name };
            PathBuf::from("out").join(name)
        })
}

fn write_json(path: &Path, value: serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(&value).map_err(Error::from)?)?;
    Ok(())
}

fn run_and_write(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let result = run_experiment(cfg)?;
    for t in &result.traces {
        let last = t.last().map_or(f64::NAN, |r| r.rel_error);
        println!(
            "{:<24} {:<9} iterations={:<8} final_error={last:.3e}",
            t.label,
            t.status.as_str(),
            t.iterations.map_or("-".to_string(), |k| k.to_string()),
        );
    }
    let manifest = write_experiment(&result, dir)?;
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut cfg = load(&args.o)?;
    if args.no_timing {
        cfg.output.timing = false;
    }
    if let Some(values) = args.o.alpha.as_deref().filter(|v| v.len() > 1) {
        cfg = expand_sweep(&cfg, SweepParameter::Alpha, values)?;
    }
    run_and_write(&cfg, &out_dir(&args.o, &cfg))
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let mut cfg = load(&args.o)?;
    if args.no_timing {
        cfg.output.timing = false;
    }
    let (param, values) = match (&args.o.alpha, &args.c_values) {
        (Some(a), None) => (SweepParameter::Alpha, a.clone()),
        (None, Some(c)) => (SweepParameter::C, c.clone()),
        _ => {
            return Err(Error::Argument(
                "sweep needs exactly one of --alpha LIST or --c-values LIST".into(),
            ))
        }
    };
    let cfg = expand_sweep(&cfg, param, &values)?;
    run_and_write(&cfg, &out_dir(&args.o, &cfg))
}

fn build_mixing(w: MixingMatrix, t: Option<u32>) -> Result<MixingMatrix> {
    match t {
        Some(t) if t > 1 => consensus_power(&w, t),
        Some(0) => Err(Error::Argument("--t must be at least 1".into())),
        _ => Ok(w),
    }
}

fn cmd_gen_problem(args: &GenProblem) -> Result<()> {
    let text = fs::read_to_string(&args.config)?;
    let mut spec = match serde_json::from_str::<ExperimentConfig>(&text) {
        Ok(cfg) => cfg.problem,
        Err(_) => serde_json::from_str::<ProblemSpec>(&text)?,
    };
    if let Some(seed) = args.seed {
        spec.set_seed(seed);
    }
    let prob = spec.generate()?;
    write_problem_bundle(&prob, &args.out)?;
    println!("manifest: {}", args.out.join(PROBLEM_MANIFEST).display());
    Ok(())
}

fn cmd_gen_graph(args: &GenGraph) -> Result<()> {
    let topo = match &args.config {
        Some(path) => {
            let cfg = ExperimentConfig::from_file(path)?;
            let mut topo = cfg.topology.clone();
            if let Some(seed) = args.seed {
                topo.seed = seed;
            }
            if let Some(t) = args.t {
                topo.t = t;
            }
            (cfg.problem.n(), topo)
        }
        None => {
            let n = args
                .n
                .ok_or_else(|| Error::Argument("gen-graph needs --n or --config".into()))?;
            let model = match args.model {
                ModelArg::Ring => GraphModel::Ring,
                ModelArg::Complete => GraphModel::Complete,
                ModelArg::Er => GraphModel::ErdosRenyi { prob: args.prob },
            };
            let mixing = match args.method {
                MixingArg::Metropolis => MixingRule::Metropolis,
                MixingArg::Laplacian => MixingRule::Laplacian { tau: args.tau },
                MixingArg::Stored => {
                    return Err(Error::Argument("gen-graph builds weights; use metropolis or laplacian".into()))
                }
            };
            (
                n,
                TopologySpec {
                    model,
                    seed: args.seed.unwrap_or(0),
                    mixing,
                    t: args.t.unwrap_or(1),
                },
            )
        }
    };
    let (n, topo) = topo;
    let w = topo.build(n)?;
    let report = validate_mixing(&w);
    write_json(&args.out, serde_json::to_value(w.to_document(Some(report))).map_err(Error::from)?)?;
    let s = spectral_summary(&w);
    println!("lambda2={} lambda_n={} network_condition={}", s.lambda2, s.lambda_n, s.network_condition);
    println!("graph: {}", args.out.display());
    Ok(())
}

fn cmd_validate(args: &ValidateMixing) -> Result<bool> {
    let doc: GraphDocument = serde_json::from_str(&fs::read_to_string(&args.graph)?)?;
    let g = doc.graph()?;
    let w = match args.method {
        MixingArg::Metropolis => metropolis_weights(&g)?,
        MixingArg::Laplacian => laplacian_weights(&g, args.tau)?,
        MixingArg::Stored => doc
            .mixing()?
            .ok_or_else(|| Error::Argument(format!("{} stores no weights", args.graph.display())))?,
    };
    let w = build_mixing(w, args.t)?;
    let report = validate_mixing(&w);
    for c in &report.checks {
        let verdict = if c.waived {
            "WAIVED"
        } else if c.passed {
            "PASS"
        } else {
            "FAIL"
        };
        println!("{verdict:<6} {:<22} violation={:.3e} ({})", c.property.label(), c.violation, c.detail);
    }
    let s = spectral_summary(&w);
    println!("lambda2={} lambda_n={} network_condition={}", s.lambda2, s.lambda_n, s.network_condition);
    if let Some(out) = &args.out {
        write_json(out, serde_json::to_value(&report).map_err(Error::from)?)?;
        println!("report: {}", out.display());
    }
    Ok(report.all_passed())
}

fn cmd_certify(args: &CertifyArgs) -> Result<bool> {
    let cfg = load(&args.o)?;
    let prob = cfg.problem.generate()?;
    let w = cfg.topology.build(prob.n())?;
    let x_star = prob
        .reference_x()
        .ok_or_else(|| Error::Numerical("no reference solution".into()))?;
    let x = StackedMatrix::consensual(prob.n(), x_star);
    let mut all = true;
    let mut out = vec![];
    for a in cfg.algorithms.iter().filter(|a| a.method == Method::Nids) {
        let alpha = a.alpha.resolve(&prob)?;
        let cert = certify_point(&x, &prob, &alpha, &w)?;
        let s = cert.summary();
        println!(
            "{:<24} certified={} stationarity={:.3e} consensus={:.3e} p_star_exists={}",
            a.label(),
            s.certified,
            s.stationarity_residual,
            s.consensus_residual,
            s.p_star_exists
        );
        all &= s.certified;
        out.push(serde_json::json!({ "label": a.label(), "certificate": s }));
    }
    if out.is_empty() {
        return Err(Error::Argument("config has no NIDS algorithm to certify".into()));
    }
    let path = out_dir(&args.o, &cfg).join("certificate.json");
    write_json(&path, serde_json::Value::Array(out))?;
    println!("report: {}", path.display());
    Ok(all)
}

fn cmd_rho(args: &RhoArgs) -> Result<()> {
    let cfg = load(&args.o)?;
    let prob = cfg.problem.generate()?;
    let w = cfg.topology.build(prob.n())?;
    let summary = spectral_summary(&w);
    let mut out = vec![];
    for a in cfg.algorithms.iter().filter(|a| a.method == Method::Nids) {
        let steps = StepSizes::from_policies(&prob, &w, &a.alpha, a.c, a.allow_unsafe)?;
        let rate = theoretical_rho_for(&prob, &steps, &w)?;
        let eps = cfg.resolved_stopping().eps;
        println!(
            "{:<24} rho={:.6} function={:.6} network={:.6} binding={:?} iterations_for_eps={}",
            a.label(),
            rate.rho,
            rate.function_branch,
            rate.network_branch,
            rate.binding,
            rate.iterations_for(eps).map_or("-".into(), |k| k.to_string())
        );
        let kappa = rate.function_condition;
        let t = suggest_consensus_steps(&summary, kappa, args.t_max)?;
        println!("{:<24} suggested consensus power t={t}", "");
        out.push(serde_json::json!({ "label": a.label(), "rate": rate, "suggested_t": t }));
    }
    if out.is_empty() {
        return Err(Error::Argument("config has no NIDS algorithm".into()));
    }
    let path = out_dir(&args.o, &cfg).join("rho.json");
    write_json(&path, serde_json::Value::Array(out))?;
    println!("report: {}", path.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenProblem(a) => cmd_gen_problem(a).map(|_| true),
        Command::GenGraph(a) => cmd_gen_graph(a).map(|_| true),
        Command::ValidateMixing(a) => cmd_validate(a),
        Command::Run(a) => cmd_run(a).map(|_| true),
        Command::Certify(a) => cmd_certify(a),
        Command::Rho(a) => cmd_rho(a).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
