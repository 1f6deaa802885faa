//! Config-driven experiments: one problem, one mixing matrix, one start point,
//! several algorithms, one trace each.
//!
//! A config is JSON:
//!
//! ```json
//! {
//!   "name": "sensing-sparse",
//!   "problem": { "generator": "sensing", "n": 40, "m": 60, "p": 50,
//!                "l": 1.0, "mu": 0.5, "seed": 7 },
//!   "topology": { "model": { "erdos_renyi": { "prob": 0.1 } }, "seed": 3 },
//!   "algorithms": [
//!     { "label": "nids-spectral", "method": "nids",
//!       "alpha": { "kind": "uniform", "alpha": 1.0 }, "c": { "kind": "spectral" } },
//!     { "label": "extra", "method": "extra",
//!       "alpha": { "kind": "uniform", "alpha": 1.0 } }
//!   ],
//!   "stopping": { "eps": 1e-11 }
//! }
//! ```
//!
//! Unset stopping fields default by problem family: sensing uses
//! `eps = 1e-11`, `max_iter = 200000`; lasso uses `eps = 1e-7`,
//! `max_iter = 100000`. The error is relative, `‖x^k − 1x*ᵀ‖/‖1x*ᵀ‖`, with an
//! absolute fallback (flagged in the manifest) when `x* = 0`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    baseline_init, baseline_step, nids_init, nids_step, AlphaPolicy, BaselineState, BaselineSteps,
    BaselineVariant, CPolicy, NidsForm, NidsState, StepSizes,
};
use crate::analysis::{
    certify_point, empirical_contraction, lyapunov_value, successive_difference, theoretical_rho_for,
    CertificateSummary, FixedPointCertificate, LyapunovMode, RateCertificate,
};
use crate::error::{Error, Result};
use crate::netgraph::{
    consensus_power, generate_graph, laplacian_weights, metropolis_weights, spectral_summary, validate_mixing,
    GraphModel, MixingMatrix, SpectralSummary,
};
use crate::objectives::{ProblemInstance, ProblemSpec};
use crate::stackmat::{range_project, RangeNorm, StackedMatrix};

/// Environment variable capping the worker threads of [`run_experiment`].
pub const THREADS_ENV: &str = "NIDSLAB_THREADS";

/// Combined per-experiment CSV, one column group per algorithm.
pub const COMBINED_CSV: &str = "combined.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GRAPH_FILE: &str = "graph.json";

/// Column order of every trace CSV.
pub const TRACE_COLUMNS: [&str; 8] = [
    "k",
    "rel_error",
    "consensus_residual",
    "successive_diff",
    "lyapunov_general",
    "lyapunov_strong",
    "comm_rounds",
    "wall_time_s",
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingRule {
    #[default]
    Metropolis,
    Laplacian {
        #[serde(default)]
        tau: Option<f64>,
    },
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub model: GraphModel,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mixing: MixingRule,
    /// Consensus power: every mixing step uses `W^t` and costs `t` rounds.
    #[serde(default = "one")]
    pub t: u32,
}

impl TopologySpec {
    /// Builds the graph, the mixing matrix and its power `W^t`.
    pub fn build(&self, n: usize) -> Result<MixingMatrix> {
        if self.t == 0 {
            return Err(Error::Argument("consensus power t must be at least 1".into()));
        }
        let g = generate_graph(n, self.model, self.seed)?;
        let w = match self.mixing {
            MixingRule::Metropolis => metropolis_weights(&g)?,
            MixingRule::Laplacian { tau } => laplacian_weights(&g, tau)?,
        };
        if self.t == 1 {
            Ok(w)
        } else {
            consensus_power(&w, self.t)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nids,
    Extra,
    PgExtra,
    DigingAtc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Nids => "nids",
            Method::Extra => "extra",
            Method::PgExtra => "pg_extra",
            Method::DigingAtc => "diging_atc",
        }
    }

    fn baseline(self) -> Option<BaselineVariant> {
        match self {
            Method::Nids => None,
            Method::Extra => Some(BaselineVariant::Extra),
            Method::PgExtra => Some(BaselineVariant::PgExtra),
            Method::DigingAtc => Some(BaselineVariant::DigingAtc),
        }
    }

    /// Mixing rounds per iteration with `W` (multiply by `t` for `W^t`).
    pub fn rounds_per_iteration(self) -> usize {
        self.baseline().map_or(1, |b| b.rounds_per_iteration())
    }

    /// Mixing rounds spent by the initialization.
    pub fn init_rounds(self) -> usize {
        match self {
            Method::Extra | Method::PgExtra => 1,
            Method::Nids | Method::DigingAtc => 0,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "nids" => Ok(Method::Nids),
            "extra" => Ok(Method::Extra),
            "pg_extra" | "pgextra" => Ok(Method::PgExtra),
            "diging_atc" | "diging" => Ok(Method::DigingAtc),
            other => Err(Error::Argument(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub method: Method,
    pub alpha: AlphaPolicy,
    /// Ignored by the baselines.
    #[serde(default)]
    pub c: CPolicy,
    #[serde(default)]
    pub form: NidsForm,
    /// Skip the `α_i < 2/L_i` check (NIDS only).
    #[serde(default)]
    pub allow_unsafe: bool,
}

impl AlgorithmSpec {
    pub fn new(label: &str, method: Method, alpha: AlphaPolicy, c: CPolicy) -> Self {
        AlgorithmSpec {
            label: Some(label.to_string()),
            method,
            alpha,
            c,
            form: NidsForm::default(),
            allow_unsafe: false,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.name().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    #[default]
    Relative,
    Absolute,
}

fn default_divergence_factor() -> f64 {
    1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    /// A run is flagged diverged once its error exceeds this multiple of
    /// `max(1, error at x⁰)`, or any iterate turns non-finite.
    #[serde(default = "default_divergence_factor")]
    pub divergence_factor: f64,
    #[serde(default)]
    pub metric: ErrorMetric,
}

impl Default for StoppingSpec {
    fn default() -> Self {
        StoppingSpec {
            eps: None,
            max_iter: None,
            divergence_factor: default_divergence_factor(),
            metric: ErrorMetric::default(),
        }
    }
}

/// [`StoppingSpec`] with the family defaults filled in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stopping {
    pub eps: f64,
    pub max_iter: usize,
    pub divergence_factor: f64,
    pub metric: ErrorMetric,
}

impl StoppingSpec {
    pub fn resolve(&self, problem: &ProblemSpec) -> Stopping {
        let (eps, max_iter) = match problem {
            ProblemSpec::Sensing(_) => (1e-11, 200_000),
            ProblemSpec::Lasso(_) => (1e-7, 100_000),
        };
        Stopping {
            eps: self.eps.unwrap_or(eps),
            max_iter: self.max_iter.unwrap_or(max_iter),
            divergence_factor: self.divergence_factor,
            metric: self.metric,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<TraceFormat>,
    /// Record Lyapunov values and `Δ_k` for NIDS runs.
    #[serde(default = "yes")]
    pub lyapunov: bool,
    /// Record wall-clock time. Off makes every output byte-reproducible.
    #[serde(default = "yes")]
    pub timing: bool,
}

fn default_formats() -> Vec<TraceFormat> {
    vec![TraceFormat::Csv, TraceFormat::Json]
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: None,
            formats: default_formats(),
            lyapunov: true,
            timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub problem: ProblemSpec,
    pub topology: TopologySpec,
    pub algorithms: Vec<AlgorithmSpec>,
    #[serde(default)]
    pub stopping: StoppingSpec,
    #[serde(default)]
    pub output: OutputSpec,
    /// Consensual start `x⁰ = 1vᵀ`; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Argument(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(Error::Argument("config lists no algorithms".into()));
        }
        let stop = self.stopping.resolve(&self.problem);
        if !(stop.eps > 0.0 && stop.eps.is_finite()) {
            return Err(Error::Argument(format!("eps must be positive, got {}", stop.eps)));
        }
        if stop.max_iter < 1 {
            return Err(Error::Argument("max_iter must be at least 1".into()));
        }
        if !(stop.divergence_factor > 1.0) {
            return Err(Error::Argument("divergence_factor must exceed 1".into()));
        }
        if self.topology.t == 0 {
            return Err(Error::Argument("consensus power t must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for a in &self.algorithms {
            let label = a.label();
            if label.is_empty() {
                return Err(Error::Argument("algorithm labels must be non-empty".into()));
            }
            if !seen.insert(label.clone()) {
                return Err(Error::Argument(format!("duplicate algorithm label '{label}'")));
            }
            if a.method != Method::Nids && matches!(a.alpha, AlphaPolicy::PerAgent { .. }) {
                return Err(Error::Argument(format!(
                    "'{label}': {} takes a single step size",
                    a.method.name()
                )));
            }
        }
        Ok(())
    }

    pub fn resolved_stopping(&self) -> Stopping {
        self.stopping.resolve(&self.problem)
    }
}

/// One row of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub rel_error: f64,
    /// `‖x^k − 1x̄ᵀ‖_F`, the distance to the consensus subspace.
    pub consensus_residual: f64,
    /// `Δ_k = ‖z^k − z^{k+1}‖²_{Λ⁻¹} + ‖d^k − d^{k+1}‖²_M` (NIDS only).
    pub successive_diff: Option<f64>,
    pub lyapunov_general: Option<f64>,
    /// Only on strongly convex smooth problems.
    pub lyapunov_strong: Option<f64>,
    pub comm_rounds: usize,
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxIter,
    Diverged,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::MaxIter => "max_iter",
            RunStatus::Diverged => "diverged",
        }
    }
}

/// Everything needed to rerun one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub algorithm: AlgorithmSpec,
    pub alphas: Vec<f64>,
    pub c: Option<f64>,
    pub c_max: Option<f64>,
    pub lipschitz: Vec<f64>,
    pub strong_convexity: Vec<f64>,
    pub problem: ProblemSpec,
    pub topology: TopologySpec,
    pub stopping: Stopping,
    pub x0: Option<Vec<f64>>,
    /// False when `x* = 0` forced the absolute error.
    pub relative_error: bool,
    pub rate: Option<RateCertificate>,
    pub target_certificate: Option<CertificateSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub label: String,
    pub method: Method,
    pub status: RunStatus,
    /// First `k` meeting the tolerance.
    pub iterations: Option<usize>,
    pub records: Vec<TraceRecord>,
    pub manifest: RunManifest,
}

impl RunTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn converged(&self) -> bool {
        self.status == RunStatus::Converged
    }

    pub fn diverged(&self) -> bool {
        self.status == RunStatus::Diverged
    }

    /// Copy with wall-clock times removed, for determinism checks.
    pub fn without_timing(&self) -> RunTrace {
        let mut t = self.clone();
        for r in &mut t.records {
            r.wall_time_s = None;
        }
        t
    }

    /// Error of the last record within `budget` communication rounds.
    pub fn error_at_rounds(&self, budget: usize) -> Option<f64> {
        self.records
            .iter()
            .take_while(|r| r.comm_rounds <= budget)
            .last()
            .map(|r| r.rel_error)
    }

    /// The strongly convex Lyapunov column, if recorded at every `k ≥ 1`.
    pub fn lyapunov_strong_series(&self) -> Option<Vec<f64>> {
        self.records.iter().skip(1).map(|r| r.lyapunov_strong).collect()
    }

    pub fn successive_diff_series(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.successive_diff).collect()
    }
}

/// Labels ranked by error after the same number of communication rounds.
pub fn rank_at_rounds(traces: &[RunTrace], budget: usize) -> Vec<(String, f64)> {
    let mut out: Vec<_> = traces
        .iter()
        .filter_map(|t| t.error_at_rounds(budget).map(|e| (t.label.clone(), e)))
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1));
    out
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub problem: ProblemInstance,
    pub mixing: MixingMatrix,
    pub spectral: SpectralSummary,
    pub traces: Vec<RunTrace>,
}

impl ExperimentResult {
    pub fn trace(&self, label: &str) -> Option<&RunTrace> {
        self.traces.iter().find(|t| t.label == label)
    }
}

/// Shared inputs of every run in one experiment.
struct RunContext<'a> {
    config: &'a ExperimentConfig,
    prob: &'a ProblemInstance,
    w: &'a MixingMatrix,
    x0: StackedMatrix,
    x_star: StackedMatrix,
    scale: f64,
    relative: bool,
    stopping: Stopping,
}

impl RunContext<'_> {
    fn error(&self, x: &StackedMatrix) -> f64 {
        (x.as_matrix() - self.x_star.as_matrix()).norm() / self.scale
    }
}

enum Runner {
    Nids {
        state: NidsState,
        steps: StepSizes,
        form: NidsForm,
        norms: Option<(RangeNorm, FixedPointCertificate)>,
        strong: bool,
    },
    Baseline {
        state: BaselineState,
        steps: BaselineSteps,
    },
}

impl Runner {
    fn x(&self) -> &StackedMatrix {
        match self {
            Runner::Nids { state, .. } => &state.x,
            Runner::Baseline { state, .. } => &state.x,
        }
    }

    fn k(&self) -> usize {
        match self {
            Runner::Nids { state, .. } => state.k,
            Runner::Baseline { state, .. } => state.k,
        }
    }

    /// Advances one iteration; NIDS also returns `Δ` for the step taken.
    fn advance(&mut self, prob: &ProblemInstance) -> Result<Option<f64>> {
        match self {
            Runner::Nids {
                state,
                steps,
                form,
                norms,
                ..
            } => {
                let next = nids_step(*form, state, prob, steps)?;
                let delta = norms
                    .as_ref()
                    .and_then(|(rn, _)| successive_difference(state, &next, rn).ok());
                *state = next;
                Ok(delta)
            }
            Runner::Baseline { state, steps } => {
                *state = baseline_step(state, prob, steps)?;
                Ok(None)
            }
        }
    }

    fn lyapunov(&self) -> (Option<f64>, Option<f64>) {
        match self {
            Runner::Nids {
                state,
                norms: Some((rn, cert)),
                strong,
                ..
            } => {
                let general = lyapunov_value(state, cert, rn, LyapunovMode::General).ok();
                let strong = if *strong {
                    lyapunov_value(state, cert, rn, LyapunovMode::StronglyConvex).ok()
                } else {
                    None
                };
                (general, strong)
            }
            _ => (None, None),
        }
    }
}

fn is_strongly_convex_smooth(prob: &ProblemInstance) -> bool {
    prob.is_smooth() && prob.strong_convexity().iter().all(|&m| m > 0.0)
}

fn run_one(ctx: &RunContext, spec: &AlgorithmSpec) -> Result<RunTrace> {
    let prob = ctx.prob;
    let label = spec.label();
    let t = ctx.config.topology.t as usize;
    let per_step = spec.method.rounds_per_iteration() * t;
    let timing = ctx.config.output.timing;
    let clock = Instant::now();
    let stamp = |clock: &Instant| timing.then(|| clock.elapsed().as_secs_f64());

    let mut manifest = RunManifest {
        algorithm: spec.clone(),
        alphas: vec![],
        c: None,
        c_max: None,
        lipschitz: prob.lipschitz(),
        strong_convexity: prob.strong_convexity(),
        problem: ctx.config.problem.clone(),
        topology: ctx.config.topology.clone(),
        stopping: ctx.stopping,
        x0: ctx.config.x0.clone(),
        relative_error: ctx.relative,
        rate: None,
        target_certificate: None,
    };

    let mut records = vec![TraceRecord {
        k: 0,
        rel_error: ctx.error(&ctx.x0),
        consensus_residual: range_project(&ctx.x0).norm(),
        successive_diff: None,
        lyapunov_general: None,
        lyapunov_strong: None,
        comm_rounds: 0,
        wall_time_s: stamp(&clock),
    }];

    let init = match spec.method.baseline() {
        None => {
            let steps = StepSizes::from_policies(prob, ctx.w, &spec.alpha, spec.c, spec.allow_unsafe)?;
            manifest.alphas = steps.alpha().entries().to_vec();
            manifest.c = Some(steps.c());
            manifest.c_max = steps.c_max().is_finite().then(|| steps.c_max());
            let strong = is_strongly_convex_smooth(prob);
            if strong {
                manifest.rate = theoretical_rho_for(prob, &steps, ctx.w).ok();
            }
            let norms = if ctx.config.output.lyapunov {
                let rn = RangeNorm::new(ctx.w, steps.c(), steps.alpha())?;
                let cert = certify_point(&ctx.x_star, prob, steps.alpha(), ctx.w)?;
                manifest.target_certificate = Some(cert.summary());
                Some((rn, cert))
            } else {
                None
            };
            nids_init(prob, &steps, &ctx.x0).map(|state| Runner::Nids {
                state,
                steps,
                form: spec.form,
                norms,
                strong,
            })
        }
        Some(variant) => {
            let alpha = spec.alpha.resolve(prob)?;
            if !alpha.is_uniform() {
                return Err(Error::Argument(format!(
                    "'{label}': {} needs one step size for all agents",
                    spec.method.name()
                )));
            }
            manifest.alphas = alpha.entries().to_vec();
            let steps = BaselineSteps::new(ctx.w, alpha.max())?;
            baseline_init(variant, prob, &steps, &ctx.x0).map(|state| Runner::Baseline { state, steps })
        }
    };

    let mut rounds = spec.method.init_rounds() * t;
    let threshold = ctx.stopping.divergence_factor * records[0].rel_error.max(1.0);
    let mut status = None;
    let mut runner = match init {
        Ok(r) => Some(r),
        Err(Error::Divergence { .. }) => {
            status = Some(RunStatus::Diverged);
            None
        }
        Err(e) => return Err(e),
    };

    let record = |runner: &Runner, rounds: usize, clock: &Instant| {
        let (general, strong) = runner.lyapunov();
        TraceRecord {
            k: runner.k(),
            rel_error: ctx.error(runner.x()),
            consensus_residual: range_project(runner.x()).norm(),
            successive_diff: None,
            lyapunov_general: general,
            lyapunov_strong: strong,
            comm_rounds: rounds,
            wall_time_s: stamp(clock),
        }
    };

    if let Some(r) = &runner {
        if r.k() > 0 {
            records.push(record(r, rounds, &clock));
        }
    }

    let mut iterations = None;
    while let Some(r) = runner.as_mut() {
        let last = records.last().expect("trace starts with x0");
        if last.rel_error < ctx.stopping.eps {
            status = Some(RunStatus::Converged);
            iterations = Some(last.k);
            break;
        }
        if !last.rel_error.is_finite() || last.rel_error > threshold {
            status = Some(RunStatus::Diverged);
            break;
        }
        if last.k >= ctx.stopping.max_iter {
            status = Some(RunStatus::MaxIter);
            break;
        }
        match r.advance(prob) {
            Ok(delta) => {
                records.last_mut().expect("non-empty").successive_diff = delta;
            }
            Err(Error::Divergence { .. }) => {
                status = Some(RunStatus::Diverged);
                break;
            }
            Err(e) => return Err(e),
        }
        rounds += per_step;
        records.push(record(r, rounds, &clock));
    }

    if let (Some(rate), Some(series)) = (manifest.rate.as_mut(), strong_series(&records)) {
        rate.empirical_rho = empirical_contraction(&series).ok().map(|e| e.max_ratio);
    }

    Ok(RunTrace {
        label,
        method: spec.method,
        status: status.unwrap_or(RunStatus::Diverged),
        iterations,
        records,
        manifest,
    })
}

fn strong_series(records: &[TraceRecord]) -> Option<Vec<f64>> {
    records.iter().skip(1).map(|r| r.lyapunov_strong).collect()
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Generates the problem (including its reference `x*`) and the mixing
/// matrix, then runs every algorithm from the same `x⁰`. Runs execute in
/// parallel, capped by `NIDSLAB_THREADS`; each run is sequential in `k`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let prob = cfg.problem.generate()?;
    let w = cfg.topology.build(prob.n())?;
    run_on(cfg, prob, w)
}

/// As [`run_experiment`] with a prebuilt problem and mixing matrix.
pub fn run_on(cfg: &ExperimentConfig, prob: ProblemInstance, w: MixingMatrix) -> Result<ExperimentResult> {
    cfg.validate()?;
    if prob.n() != w.n() {
        return Err(Error::Dimension {
            expected: format!("{} agents in the mixing matrix", prob.n()),
            got: w.n().to_string(),
        });
    }
    let x_star_row = prob
        .reference_x()
        .ok_or_else(|| Error::Numerical("problem carries no reference solution".into()))?
        .clone();
    let x0_row = match &cfg.x0 {
        Some(v) if v.len() != prob.p() => {
            return Err(Error::Dimension {
                expected: format!("x0 of length {}", prob.p()),
                got: v.len().to_string(),
            })
        }
        Some(v) => DVector::from_column_slice(v),
        None => DVector::zeros(prob.p()),
    };
    let x_star = StackedMatrix::consensual(prob.n(), &x_star_row);
    let stopping = cfg.resolved_stopping();
    let relative = stopping.metric == ErrorMetric::Relative && x_star.norm() > 0.0;
    let scale = if relative { x_star.norm() } else { 1.0 };
    let ctx = RunContext {
        config: cfg,
        prob: &prob,
        w: &w,
        x0: StackedMatrix::consensual(prob.n(), &x0_row),
        x_star,
        scale,
        relative,
        stopping,
    };
    let run_all = || -> Result<Vec<RunTrace>> {
        cfg.algorithms.par_iter().map(|a| run_one(&ctx, a)).collect()
    };
    let traces = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?
            .install(run_all)?,
        None => run_all()?,
    };
    let spectral = spectral_summary(&w);
    Ok(ExperimentResult {
        config: cfg.clone(),
        problem: prob,
        mixing: w,
        spectral,
        traces,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    Csv,
    Json,
}

impl TraceFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TraceFormat::Csv => "csv",
            TraceFormat::Json => "json",
        }
    }
}

/// Writes the records as CSV or the whole trace (records, status, manifest)
/// as JSON.
pub fn export_trace(trace: &RunTrace, format: TraceFormat, path: &Path) -> Result<()> {
    if trace.records.is_empty() {
        return Err(Error::Argument(format!("trace '{}' has no records", trace.label)));
    }
    match format {
        TraceFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for r in &trace.records {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        TraceFormat::Json => {
            fs::write(path, serde_json::to_string_pretty(trace)?)?;
        }
    }
    Ok(())
}

pub fn import_trace_json(path: &Path) -> Result<RunTrace> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn import_trace_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(TRACE_COLUMNS.iter().copied()) {
        return Err(Error::Argument(format!(
            "unexpected trace columns in {}: {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>()
        )));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Wide CSV: `k`, then `<label>:rel_error`, `<label>:comm_rounds` per run.
/// Rows run to the longest trace; finished runs leave blanks.
pub fn write_combined_csv(traces: &[RunTrace], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["k".to_string()];
    for t in traces {
        header.push(format!("{}:rel_error", t.label));
        header.push(format!("{}:comm_rounds", t.label));
    }
    w.write_record(&header)?;
    let max_k = traces
        .iter()
        .filter_map(|t| t.records.last().map(|r| r.k))
        .max()
        .unwrap_or(0);
    let mut cursors = vec![0usize; traces.len()];
    for k in 0..=max_k {
        let mut row = vec![k.to_string()];
        for (t, cur) in traces.iter().zip(cursors.iter_mut()) {
            while *cur < t.records.len() && t.records[*cur].k < k {
                *cur += 1;
            }
            match t.records.get(*cur).filter(|r| r.k == k) {
                Some(r) => {
                    row.push(r.rel_error.to_string());
                    row.push(r.comm_rounds.to_string());
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub label: String,
    pub method: Method,
    pub status: RunStatus,
    pub iterations: Option<usize>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub iterations: usize,
    pub residual: f64,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamp {
    pub unix_seconds: u64,
}

/// Experiment-level manifest. Only `generated_at` varies between reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub name: String,
    pub config: ExperimentConfig,
    pub spectral: SpectralSummary,
    pub reference: Option<ReferenceSummary>,
    pub graph_file: String,
    pub combined_csv: String,
    pub runs: Vec<RunEntry>,
    pub generated_at: Timestamp,
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Writes graph, per-run traces, the combined CSV and the manifest into
/// `dir`; returns the manifest path.
pub fn write_experiment(result: &ExperimentResult, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let doc = result.mixing.to_document(Some(validate_mixing(&result.mixing)));
    fs::write(dir.join(GRAPH_FILE), serde_json::to_string_pretty(&doc)?)?;

    let mut used = HashSet::new();
    let mut runs = Vec::with_capacity(result.traces.len());
    for t in &result.traces {
        let base = slug(&t.label);
        let mut stem = base.clone();
        let mut i = 2;
        while !used.insert(stem.clone()) {
            stem = format!("{base}_{i}");
            i += 1;
        }
        let mut files = vec![];
        for &f in &result.config.output.formats {
            let name = format!("{stem}.{}", f.extension());
            export_trace(t, f, &dir.join(&name))?;
            files.push(name);
        }
        runs.push(RunEntry {
            label: t.label.clone(),
            method: t.method,
            status: t.status,
            iterations: t.iterations,
            files,
        });
    }
    write_combined_csv(&result.traces, &dir.join(COMBINED_CSV))?;

    let manifest = ExperimentManifest {
        name: result.config.name.clone(),
        config: result.config.clone(),
        spectral: result.spectral,
        reference: result.problem.reference.as_ref().map(|r| ReferenceSummary {
            iterations: r.iterations,
            residual: r.residual,
            tol: r.tol,
        }),
        graph_file: GRAPH_FILE.into(),
        combined_csv: COMBINED_CSV.into(),
        runs,
        generated_at: Timestamp {
            unix_seconds: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        },
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Scalar a sweep iterates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// Uniform `α` (or the `s` in `s/L_i`).
    Alpha,
    /// NIDS coupling `c`; baselines run once.
    C,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Alpha => "alpha",
            SweepParameter::C => "c",
        }
    }
}

/// Replaces each algorithm by one copy per value, labelled
/// `<label>@<param>=<value>`.
pub fn expand_sweep(cfg: &ExperimentConfig, param: SweepParameter, values: &[f64]) -> Result<ExperimentConfig> {
    if values.is_empty() {
        return Err(Error::Argument("sweep needs at least one value".into()));
    }
    let mut out = cfg.clone();
    out.algorithms.clear();
    for a in &cfg.algorithms {
        if param == SweepParameter::C && a.method != Method::Nids {
            out.algorithms.push(a.clone());
            continue;
        }
        for &v in values {
            let mut b = a.clone();
            match param {
                SweepParameter::Alpha => {
                    b.alpha = match &a.alpha {
                        AlphaPolicy::InverseLipschitz { .. } => AlphaPolicy::InverseLipschitz { scale: v },
                        AlphaPolicy::Uniform { .. } => AlphaPolicy::Uniform { alpha: v },
                        AlphaPolicy::PerAgent { .. } => {
                            return Err(Error::Argument(format!(
                                "'{}' has explicit per-agent steps; nothing to sweep",
                                a.label()
                            )))
                        }
                    }
                }
                SweepParameter::C => b.c = CPolicy::Value { c: v },
            }
            b.label = Some(format!("{}@{}={v}", a.label(), param.name()));
            out.algorithms.push(b);
        }
    }
    out.validate()?;
    Ok(out)
}

/// Ready-made configs for the numerical studies.
pub mod presets {
    use super::*;
    use crate::objectives::{AgentConstants, LassoSpec, SensingSpec};

    pub const SPARSE_ER: f64 = 0.1;
    pub const DENSE_ER: f64 = 0.4;

    /// Erdős–Rényi graph with `W = I − L/λ_1(L)`, so `λ_n(W) = 0`.
    ///
    /// NIDS at `c = 1/(α(1 − λ_n))` needs about `(1 − λ_n)/2` of EXTRA's
    /// iterations on network-bound problems; Metropolis weights usually
    /// have `λ_n < 0` and land near 0.6 on sparse graphs.
    pub fn topology(prob: f64, seed: u64) -> TopologySpec {
        TopologySpec {
            model: GraphModel::ErdosRenyi { prob },
            seed,
            mixing: MixingRule::Laplacian { tau: None },
            t: 1,
        }
    }

    fn uniform(alpha: f64) -> AlphaPolicy {
        AlphaPolicy::Uniform { alpha }
    }

    /// 40 agents, `m_i = 60`, `p = 50`, `L_i = 1`, `μ_i = 0.5`, `α = 1`:
    /// NIDS at `c ≈ 1/(1 − λ_n)` and `c = 1/2`, EXTRA, DIGing-ATC.
    pub fn sensing(er_prob: f64, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            name: format!("sensing-er{er_prob}"),
            problem: ProblemSpec::Sensing(SensingSpec::new(40, 60, 50, 1.0, 0.5, 0.01, seed)),
            topology: topology(er_prob, seed),
            algorithms: vec![
                AlgorithmSpec::new("nids-spectral", Method::Nids, uniform(1.0), CPolicy::Spectral),
                AlgorithmSpec::new("nids-half", Method::Nids, uniform(1.0), CPolicy::Half),
                AlgorithmSpec::new("extra", Method::Extra, uniform(1.0), CPolicy::Half),
                AlgorithmSpec::new("diging-atc", Method::DigingAtc, uniform(1.0), CPolicy::Half),
            ],
            stopping: StoppingSpec {
                eps: Some(1e-11),
                max_iter: Some(200_000),
                ..StoppingSpec::default()
            },
            output: OutputSpec::default(),
            x0: None,
        }
    }

    /// Two agents with `L = 2`, `μ = 0.4`, the rest `L = 1`, `μ = 0.2`.
    /// NIDS with `α_i = 1/L_i` against NIDS, EXTRA and DIGing-ATC at
    /// `α = 1/max L_i`; NIDS couplings use the spectral preset.
    ///
    /// Per-agent steps only pay off when the function branch of `ρ` binds,
    /// i.e. on well-connected graphs such as [`DENSE_ER`].
    pub fn heterogeneous(er_prob: f64, seed: u64) -> ExperimentConfig {
        let mut spec = SensingSpec::new(40, 60, 50, 1.0, 0.2, 0.01, seed);
        spec.overrides = vec![AgentConstants {
            agents: vec![0, 1],
            l: 2.0,
            mu: 0.4,
        }];
        ExperimentConfig {
            name: "sensing-heterogeneous".into(),
            problem: ProblemSpec::Sensing(spec),
            topology: topology(er_prob, seed),
            algorithms: vec![
                AlgorithmSpec::new(
                    "nids-adaptive",
                    Method::Nids,
                    AlphaPolicy::InverseLipschitz { scale: 1.0 },
                    CPolicy::Spectral,
                ),
                AlgorithmSpec::new("nids", Method::Nids, uniform(0.5), CPolicy::Spectral),
                AlgorithmSpec::new("extra", Method::Extra, uniform(0.5), CPolicy::Half),
                AlgorithmSpec::new("diging-atc", Method::DigingAtc, uniform(0.5), CPolicy::Half),
            ],
            stopping: StoppingSpec {
                eps: Some(1e-11),
                max_iter: Some(200_000),
                ..StoppingSpec::default()
            },
            output: OutputSpec::default(),
            x0: None,
        }
    }

    /// 40 agents, `m_i = 3`, `p = 200`, `L_i = 1`, `ε = 1e−7`; PG-EXTRA and
    /// NIDS (`c = 1/(2α)`) at `α ∈ {1, 1.4, 1.9}` over Metropolis weights.
    ///
    /// PG-EXTRA is stable roughly for `α < (1 + λ_n)/L`, so the `λ_n = 0`
    /// weights of [`topology`] widen its range; the default weights keep
    /// `λ_n < 0`.
    pub fn lasso(er_prob: f64, seed: u64) -> ExperimentConfig {
        let base = ExperimentConfig {
            name: "lasso-stepsizes".into(),
            problem: ProblemSpec::Lasso(LassoSpec::new(40, 3, 200, seed)),
            topology: TopologySpec {
                mixing: MixingRule::Metropolis,
                ..topology(er_prob, seed)
            },
            algorithms: vec![
                AlgorithmSpec::new("nids", Method::Nids, uniform(1.0), CPolicy::Half),
                AlgorithmSpec::new("pg-extra", Method::PgExtra, uniform(1.0), CPolicy::Half),
            ],
            stopping: StoppingSpec {
                eps: Some(1e-7),
                max_iter: Some(100_000),
                ..StoppingSpec::default()
            },
            output: OutputSpec {
                lyapunov: false,
                ..OutputSpec::default()
            },
            x0: None,
        };
        expand_sweep(&base, SweepParameter::Alpha, &[1.0, 1.4, 1.9]).expect("preset sweep is valid")
    }
}
