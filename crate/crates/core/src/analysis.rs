//! Fixed-point certificates, Lyapunov quantities and convergence-rate checks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::algorithms::{nids_init, nids_step, NidsForm, NidsState, StepSizes};
use crate::linalg::{diag_sandwich, psd_pseudo_inverse, sym_eigenvalues};
use crate::netgraph::{spectral_summary, MixingMatrix};
use crate::objectives::ProblemInstance;
use crate::stackmat::{max_admissible_c, DiagonalWeight, RangeNorm, StackedMatrix};
use crate::{Error, Result};

/// Default tolerance for declaring a point certified.
pub const CERTIFY_TOL: f64 = 1e-9;

/// Lyapunov values below this are round-off and excluded from ratios.
pub const LYAPUNOV_FLOOR: f64 = 1e-24;

/// Iterations skipped before measuring contraction ratios.
pub const WARMUP: usize = 5;

/// Minimum number of ratios for an empirical rate.
pub const MIN_RATIOS: usize = 10;

/// Optimality witnesses at a point `x`.
#[derive(Debug, Clone)]
pub struct FixedPointCertificate {
    pub x: StackedMatrix,
    /// `z* = x* + Λq*`.
    pub z: StackedMatrix,
    /// `q* ∈ ∂r(x*)`, row by row.
    pub subgradient_witness: StackedMatrix,
    /// `d* = −∇s(x*) − q*`.
    pub dual_witness: StackedMatrix,
    /// `‖mean_i(∇s_i(x*) + q_i*)‖`, the part `(I − W)p*` cannot absorb.
    pub stationarity_residual: f64,
    /// `‖(I − W)x*‖`.
    pub consensus_residual: f64,
    /// True when `d*` lies in `range(I − W)` up to the tolerance.
    pub p_star_exists: bool,
    pub tolerance: f64,
}

impl FixedPointCertificate {
    pub fn certified(&self) -> bool {
        self.stationarity_residual <= self.tolerance && self.consensus_residual <= self.tolerance
    }

    pub fn summary(&self) -> CertificateSummary {
        CertificateSummary {
            stationarity_residual: self.stationarity_residual,
            consensus_residual: self.consensus_residual,
            p_star_exists: self.p_star_exists,
            certified: self.certified(),
            tolerance: self.tolerance,
        }
    }
}

/// Serializable part of a [`FixedPointCertificate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub stationarity_residual: f64,
    pub consensus_residual: f64,
    pub p_star_exists: bool,
    pub certified: bool,
    pub tolerance: f64,
}

/// Certifies `x` with subgradients chosen to cancel the column sums of
/// `∇s(x) + q` as far as each `∂r_i` allows.
pub fn certify_point(
    x: &StackedMatrix,
    prob: &ProblemInstance,
    alpha: &DiagonalWeight,
    w: &MixingMatrix,
) -> Result<FixedPointCertificate> {
    certify_point_with(x, prob, alpha, w, None, CERTIFY_TOL)
}

/// As [`certify_point`]; with `z_hint` the subgradient is read off the prox,
/// `q = (z − x)/α` clipped to `∂r(x)`.
pub fn certify_point_with(
    x: &StackedMatrix,
    prob: &ProblemInstance,
    alpha: &DiagonalWeight,
    w: &MixingMatrix,
    z_hint: Option<&StackedMatrix>,
    tolerance: f64,
) -> Result<FixedPointCertificate> {
    let (n, p) = (prob.n(), prob.p());
    if x.n() != n || x.p() != p || w.n() != n || alpha.len() != n {
        return Err(Error::Dimension {
            expected: format!("{n}x{p} point, {n} agents"),
            got: format!("{}x{} point, {} in W, {} steps", x.n(), x.p(), w.n(), alpha.len()),
        });
    }
    let grad = prob.gradient(x);
    let q = match z_hint {
        Some(z) => hinted_subgradients(x, z, prob, alpha),
        None => balanced_subgradients(x, &grad, prob),
    };
    let dual = StackedMatrix::from(-(grad.as_matrix() + &q));
    let z = StackedMatrix::from(x.as_matrix() + alpha.scale_rows(&q));
    let residual = StackedMatrix::from(grad.as_matrix() + &q).column_mean().norm();
    let consensus = (w.laplacian_like() * x.as_matrix()).norm();
    Ok(FixedPointCertificate {
        x: x.clone(),
        z,
        subgradient_witness: StackedMatrix::from(q),
        dual_witness: dual,
        stationarity_residual: residual,
        consensus_residual: consensus,
        p_star_exists: residual <= tolerance,
        tolerance,
    })
}

fn interval(prob: &ProblemInstance, i: usize, v: f64) -> (f64, f64) {
    let (lo, hi) = prob.nonsmooth[i].subdifferential(v);
    if lo.is_nan() || hi.is_nan() {
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

fn hinted_subgradients(
    x: &StackedMatrix,
    z: &StackedMatrix,
    prob: &ProblemInstance,
    alpha: &DiagonalWeight,
) -> DMatrix<f64> {
    DMatrix::from_fn(x.n(), x.p(), |i, j| {
        let (lo, hi) = interval(prob, i, x[(i, j)]);
        ((z[(i, j)] - x[(i, j)]) / alpha.entries()[i]).clamp(lo, hi)
    })
}

fn balanced_subgradients(x: &StackedMatrix, grad: &StackedMatrix, prob: &ProblemInstance) -> DMatrix<f64> {
    let (n, p) = (x.n(), x.p());
    let mut q = DMatrix::zeros(n, p);
    for j in 0..p {
        let bounds: Vec<(f64, f64)> = (0..n).map(|i| interval(prob, i, x[(i, j)])).collect();
        for i in 0..n {
            q[(i, j)] = 0.0f64.clamp(bounds[i].0, bounds[i].1);
        }
        let need = -(0..n).map(|i| grad[(i, j)] + q[(i, j)]).sum::<f64>();
        if need == 0.0 {
            continue;
        }
        // Room each agent has in the direction of `need`.
        let room: Vec<f64> = (0..n)
            .map(|i| {
                if need > 0.0 {
                    bounds[i].1 - q[(i, j)]
                } else {
                    q[(i, j)] - bounds[i].0
                }
            })
            .collect();
        let unbounded: Vec<usize> = (0..n).filter(|&i| room[i].is_infinite()).collect();
        if !unbounded.is_empty() {
            let share = need / unbounded.len() as f64;
            for i in unbounded {
                q[(i, j)] += share;
            }
            continue;
        }
        let total: f64 = room.iter().sum();
        if total <= 0.0 {
            continue;
        }
        let fraction = (need.abs() / total).min(1.0);
        for i in 0..n {
            q[(i, j)] += need.signum() * fraction * room[i];
        }
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovMode {
    /// `‖z − z*‖²_{Λ⁻¹} + ‖d − d*‖²_M`.
    General,
    /// `‖x − x*‖²_{Λ⁻¹} + ‖d − d*‖²_{M+Λ}`.
    StronglyConvex,
}

pub fn lyapunov_value(
    state: &NidsState,
    target: &FixedPointCertificate,
    rn: &RangeNorm,
    mode: LyapunovMode,
) -> Result<f64> {
    let inv = rn.lambda().inverse();
    match mode {
        LyapunovMode::General => {
            let dz = state.z.as_matrix() - target.z.as_matrix();
            Ok(inv.norm_sq(&dz) + rn.m_norm_sq_between(&state.d, &target.dual_witness)?)
        }
        LyapunovMode::StronglyConvex => {
            let dx = state.x.as_matrix() - target.x.as_matrix();
            Ok(inv.norm_sq(&dx) + rn.m_plus_lambda_norm_sq_between(&state.d, &target.dual_witness)?)
        }
    }
}

/// `Δ_k = ‖z^k − z^{k+1}‖²_{Λ⁻¹} + ‖d^k − d^{k+1}‖²_M`.
pub fn successive_difference(prev: &NidsState, next: &NidsState, rn: &RangeNorm) -> Result<f64> {
    let dz = prev.z.as_matrix() - next.z.as_matrix();
    Ok(rn.lambda().inverse().norm_sq(&dz) + rn.m_norm_sq_between(&prev.d, &next.d)?)
}

/// Both sides of the fundamental inequality for one step `k → k+1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InequalityAudit {
    pub lhs: f64,
    pub rhs: f64,
}

impl InequalityAudit {
    /// `rhs − lhs`; nonnegative when the inequality holds.
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Evaluates every term of
/// `V(k+1) ≤ V(k) − Δ_k + 2⟨∇s(x^k) − ∇s(x*), z^k − z^{k+1}⟩ − 2⟨x^k − x*, ∇s(x^k) − ∇s(x*)⟩`
/// with `V` the general Lyapunov value.
pub fn fundamental_inequality(
    prev: &NidsState,
    next: &NidsState,
    target: &FixedPointCertificate,
    grad_star: &StackedMatrix,
    rn: &RangeNorm,
) -> Result<InequalityAudit> {
    let inv = rn.lambda().inverse();
    let z_next = inv.norm_sq(&(next.z.as_matrix() - target.z.as_matrix()));
    let d_next = rn.m_norm_sq_between(&next.d, &target.dual_witness)?;
    let z_prev = inv.norm_sq(&(prev.z.as_matrix() - target.z.as_matrix()));
    let d_prev = rn.m_norm_sq_between(&prev.d, &target.dual_witness)?;
    let z_step = prev.z.as_matrix() - next.z.as_matrix();
    let z_diff = inv.norm_sq(&z_step);
    let d_diff = rn.m_norm_sq_between(&prev.d, &next.d)?;
    let dg = prev.grad.as_matrix() - grad_star.as_matrix();
    let cross = 2.0 * dg.dot(&z_step);
    let coercive = 2.0 * (prev.x.as_matrix() - target.x.as_matrix()).dot(&dg);
    Ok(InequalityAudit {
        lhs: z_next + d_next,
        rhs: z_prev + d_prev - z_diff - d_diff + cross - coercive,
    })
}

/// Per-iteration diagnostics of a NIDS run against a fixed point.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunAudit {
    /// `V_general` at `k = 1, 2, …`.
    pub v_general: Vec<f64>,
    /// `V_strong` at `k = 1, 2, …` (smooth problems only).
    pub v_strong: Option<Vec<f64>>,
    /// `Δ_k` for `k = 1, 2, …`.
    pub deltas: Vec<f64>,
    /// Round-off scale of `Δ_k`: a multiple of machine epsilon times the
    /// iterate size in the same norms.
    pub delta_roundoff: Vec<f64>,
    pub inequality: Vec<InequalityAudit>,
    /// `V(k) − (1 − max α_iL_i/2)Δ_k − V(k+1)`.
    pub descent_slack: Vec<f64>,
    pub max_alpha_l: f64,
}

fn roundoff_scale(state: &NidsState, rn: &RangeNorm) -> Result<f64> {
    let z = rn.lambda().inverse().norm_sq(state.z.as_matrix());
    let d = rn.m_plus_lambda_norm_sq_between(&state.d, &StackedMatrix::zeros(state.d.n(), state.d.p()))?;
    Ok(64.0 * f64::EPSILON * (z + d).sqrt())
}

/// Runs `iterations` NIDS steps from `x0` and records every Lyapunov quantity.
pub fn audit_nids_run(
    prob: &ProblemInstance,
    steps: &StepSizes,
    w: &MixingMatrix,
    x0: &StackedMatrix,
    target: &FixedPointCertificate,
    iterations: usize,
    form: NidsForm,
) -> Result<RunAudit> {
    let rn = RangeNorm::new(w, steps.c(), steps.alpha())?;
    let grad_star = prob.gradient(&target.x);
    let smooth = prob.is_smooth();
    let max_alpha_l = steps
        .alpha()
        .entries()
        .iter()
        .zip(prob.lipschitz())
        .map(|(a, l)| a * l)
        .fold(0.0, f64::max);
    let mut audit = RunAudit {
        v_strong: smooth.then(Vec::new),
        max_alpha_l,
        ..RunAudit::default()
    };
    let record = |s: &NidsState, audit: &mut RunAudit| -> Result<()> {
        audit.v_general.push(lyapunov_value(s, target, &rn, LyapunovMode::General)?);
        if let Some(v) = audit.v_strong.as_mut() {
            v.push(lyapunov_value(s, target, &rn, LyapunovMode::StronglyConvex)?);
        }
        Ok(())
    };
    let mut state = nids_init(prob, steps, x0)?;
    record(&state, &mut audit)?;
    for _ in 0..iterations {
        let next = nids_step(form, &state, prob, steps)?;
        let delta = successive_difference(&state, &next, &rn)?;
        audit.deltas.push(delta);
        audit.delta_roundoff.push(roundoff_scale(&state, &rn)?);
        audit
            .inequality
            .push(fundamental_inequality(&state, &next, target, &grad_star, &rn)?);
        record(&next, &mut audit)?;
        let k = audit.v_general.len();
        audit
            .descent_slack
            .push(audit.v_general[k - 2] - (1.0 - max_alpha_l / 2.0) * delta - audit.v_general[k - 1]);
        state = next;
    }
    Ok(audit)
}

/// Theoretical contraction factor with both branches and the closed forms of
/// the two step-size presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCertificate {
    pub rho: f64,
    /// `1 − (2 − max α_iL_i)·min μ_iα_i`.
    pub function_branch: f64,
    /// `1 − c/λ_max(Λ^{−1/2}(I − W)†Λ^{−1/2})`.
    pub network_branch: f64,
    pub binding: RateBranch,
    /// `max L_i / min μ_i`.
    pub function_condition: f64,
    /// `(1 − λ_n)/(1 − λ_2)`.
    pub network_condition: f64,
    /// `ρ` for `Λ = I/max L_i`, `c = 1/(α(1 − λ_n))`.
    pub uniform_preset_rho: f64,
    /// `ρ` for `Λ = L⁻¹` with `c` on the admissibility boundary.
    pub inverse_lipschitz_preset_rho: f64,
    pub c: f64,
    pub c_max: f64,
    pub empirical_rho: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateBranch {
    Function,
    Network,
}

impl RateCertificate {
    /// `⌈log ε / log ρ⌉`, the iterations for `V` to shrink by `ε`.
    pub fn iterations_for(&self, eps: f64) -> Option<u64> {
        if !(eps > 0.0 && eps < 1.0) || !(self.rho < 1.0) {
            return None;
        }
        if self.rho <= 0.0 {
            return Some(1);
        }
        Some((eps.ln() / self.rho.ln()).ceil().max(1.0) as u64)
    }
}

pub const STRONG_CONVEXITY_REQUIRED: &str = "linear-rate certificate requires strong convexity";

/// `ρ` for steps `α` and coupling `c`; `c` may sit on the admissibility boundary.
pub fn theoretical_rho(
    prob: &ProblemInstance,
    alpha: &DiagonalWeight,
    c: f64,
    w: &MixingMatrix,
) -> Result<RateCertificate> {
    let n = prob.n();
    if alpha.len() != n || w.n() != n {
        return Err(Error::Dimension {
            expected: format!("{n} agents"),
            got: format!("{} steps, {} in W", alpha.len(), w.n()),
        });
    }
    let mu = prob.strong_convexity();
    let l = prob.lipschitz();
    if mu.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::NotApplicable(STRONG_CONVEXITY_REQUIRED.into()));
    }
    if !prob.is_smooth() {
        return Err(Error::NotApplicable(
            "linear-rate certificate requires smooth problems (r = 0)".into(),
        ));
    }
    let c_max = max_admissible_c(w, alpha)?;
    if !(c > 0.0) || c > c_max * (1.0 + 1e-12) {
        return Err(Error::Domain(format!("c = {c} outside (0, {c_max}]")));
    }
    let a = alpha.entries();
    let max_al = a.iter().zip(&l).map(|(a, l)| a * l).fold(0.0, f64::max);
    let min_mua = a.iter().zip(&mu).map(|(a, m)| a * m).fold(f64::INFINITY, f64::min);
    let function_branch = 1.0 - (2.0 - max_al) * min_mua;

    let (pinv, _) = psd_pseudo_inverse(&w.laplacian_like())?;
    let network_branch = if n == 1 {
        0.0
    } else {
        let scaled = diag_sandwich(alpha.inverse().sqrt().entries(), &pinv);
        1.0 - c / sym_eigenvalues(&scaled)?[0]
    };

    let summary = spectral_summary(w);
    let max_l = l.iter().cloned().fold(0.0, f64::max);
    let min_mu = mu.iter().cloned().fold(f64::INFINITY, f64::min);
    let uniform_network = if n == 1 {
        0.0
    } else {
        (summary.lambda2 - summary.lambda_n) / (1.0 - summary.lambda_n)
    };
    let min_ratio = mu.iter().zip(&l).map(|(m, l)| m / l).fold(f64::INFINITY, f64::min);
    let lipschitz_network = if n == 1 {
        0.0
    } else {
        let sqrt_l: Vec<f64> = l.iter().map(|v| v.sqrt()).collect();
        let ev = sym_eigenvalues(&diag_sandwich(&sqrt_l, &pinv))?;
        1.0 - ev[n - 2] / ev[0]
    };

    let rho = function_branch.max(network_branch);
    Ok(RateCertificate {
        rho,
        function_branch,
        network_branch,
        binding: if function_branch >= network_branch {
            RateBranch::Function
        } else {
            RateBranch::Network
        },
        function_condition: max_l / min_mu,
        network_condition: summary.network_condition,
        uniform_preset_rho: (1.0 - min_mu / max_l).max(uniform_network),
        inverse_lipschitz_preset_rho: (1.0 - min_ratio).max(lipschitz_network),
        c,
        c_max,
        empirical_rho: None,
    })
}

/// Convenience wrapper over [`theoretical_rho`] for validated steps.
pub fn theoretical_rho_for(prob: &ProblemInstance, steps: &StepSizes, w: &MixingMatrix) -> Result<RateCertificate> {
    theoretical_rho(prob, steps.alpha(), steps.c(), w)
}

/// Measured contraction of a Lyapunov sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalRate {
    pub max_ratio: f64,
    pub usable_ratios: usize,
    /// Worst ratio's position: `V[index + 1] / V[index]`.
    pub worst_index: usize,
}

/// Largest `V^{k+1}/V^k` after the warm-up and before the round-off floor.
pub fn empirical_contraction(values: &[f64]) -> Result<EmpiricalRate> {
    if values.first().is_some_and(|&v| v == 0.0) {
        return Err(Error::InsufficientData(
            "degenerate trace: run started at the target, all ratios are 0/0".into(),
        ));
    }
    let mut best = EmpiricalRate {
        max_ratio: f64::NEG_INFINITY,
        usable_ratios: 0,
        worst_index: 0,
    };
    for k in WARMUP..values.len().saturating_sub(1) {
        let (a, b) = (values[k], values[k + 1]);
        if !(a >= LYAPUNOV_FLOOR && b >= LYAPUNOV_FLOOR) {
            break;
        }
        let r = b / a;
        best.usable_ratios += 1;
        if r > best.max_ratio {
            best.max_ratio = r;
            best.worst_index = k;
        }
    }
    if best.usable_ratios < MIN_RATIOS {
        return Err(Error::InsufficientData(format!(
            "only {} usable contraction ratios (need {MIN_RATIOS})",
            best.usable_ratios
        )));
    }
    Ok(best)
}

/// Checks of the sublinear theory on a general convex run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SublinearCertificate {
    /// `Δ_{k+1} ≤ Δ_k` within tolerance at every step.
    pub monotone: bool,
    /// Largest `Δ_{k+1} − Δ_k − tol`, positive on a violation.
    pub worst_monotone_excess: f64,
    /// `k·(1 − max α_iL_i/2)·Δ_k ≤ V(1)` within tolerance.
    pub bound_holds: bool,
    /// Largest `k·(1 − max α_iL_i/2)·Δ_k / V(1)`.
    pub worst_bound_ratio: f64,
    /// `k·Δ_k` over the last quarter stays below half its early maximum.
    pub trend_to_zero: bool,
    pub early_max_k_delta: f64,
    pub late_max_k_delta: f64,
}

impl SublinearCertificate {
    pub fn holds(&self) -> bool {
        self.monotone && self.bound_holds && self.trend_to_zero
    }
}

/// Burn-in before the `k·Δ_k` trend is assessed.
pub const TREND_BURN_IN: usize = 10;

pub fn sublinear_certificate(audit: &RunAudit, rel_tol: f64) -> Result<SublinearCertificate> {
    let deltas = &audit.deltas;
    if deltas.len() < 4 * TREND_BURN_IN {
        return Err(Error::InsufficientData(format!(
            "{} steps recorded, need at least {}",
            deltas.len(),
            4 * TREND_BURN_IN
        )));
    }
    let v1 = audit.v_general[0];
    let factor = 1.0 - audit.max_alpha_l / 2.0;
    if !(factor > 0.0) {
        return Err(Error::NotApplicable("sublinear bound needs max α_iL_i < 2".into()));
    }
    let mut worst_excess = f64::NEG_INFINITY;
    for k in 0..deltas.len() - 1 {
        let r = audit.delta_roundoff[k];
        let tol = rel_tol * deltas[k] + 2.0 * deltas[k].sqrt() * r + r * r;
        worst_excess = worst_excess.max(deltas[k + 1] - deltas[k] - tol);
    }
    let mut worst_bound = 0.0f64;
    let mut bound_holds = true;
    for (i, &d) in deltas.iter().enumerate() {
        let k = (i + 1) as f64;
        let r = audit.delta_roundoff[i];
        let lhs = k * factor * d;
        worst_bound = worst_bound.max(lhs / v1);
        if lhs > v1 * (1.0 + rel_tol) + k * factor * (2.0 * d.sqrt() * r + r * r) {
            bound_holds = false;
        }
    }
    let k_delta: Vec<f64> = deltas.iter().enumerate().map(|(i, d)| (i + 1) as f64 * d).collect();
    let quarter = k_delta.len() / 4;
    let early = k_delta[TREND_BURN_IN..quarter.max(TREND_BURN_IN + 1)]
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    let late = k_delta[k_delta.len() - quarter..].iter().cloned().fold(0.0, f64::max);
    Ok(SublinearCertificate {
        monotone: worst_excess <= 0.0,
        worst_monotone_excess: worst_excess,
        bound_holds,
        worst_bound_ratio: worst_bound,
        trend_to_zero: late <= 0.5 * early,
        early_max_k_delta: early,
        late_max_k_delta: late,
    })
}
