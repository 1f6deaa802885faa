//! Iteration steppers for NIDS and the EXTRA / PG-EXTRA / DIGing-ATC baselines.
//!
//! All states use stacked `n × p` matrices with row `i` owned by agent `i`.
//! Steppers are pure: they take a state and return the next one.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::netgraph::MixingMatrix;
use crate::objectives::ProblemInstance;
use crate::stackmat::{max_admissible_c, DiagonalWeight, StackedMatrix};
use crate::{Error, Result};

/// Margin used when enforcing `α_i < 2/L_i` and `c < c_max`.
pub const STEP_MARGIN: f64 = 1e-12;

/// Factor applied to `c_max` by the `spectral` preset.
pub const SPECTRAL_SHRINK: f64 = 1.0 - 1e-8;

/// Per-agent step-size rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaPolicy {
    /// `α_i = alpha` for every agent.
    Uniform { alpha: f64 },
    /// `α_i = scale / L_i`.
    InverseLipschitz { scale: f64 },
    /// Explicit per-agent values.
    PerAgent { alphas: Vec<f64> },
}

impl AlphaPolicy {
    pub fn resolve(&self, prob: &ProblemInstance) -> Result<DiagonalWeight> {
        let n = prob.n();
        match self {
            AlphaPolicy::Uniform { alpha } => DiagonalWeight::uniform(n, *alpha),
            AlphaPolicy::InverseLipschitz { scale } => {
                DiagonalWeight::new(prob.lipschitz().iter().map(|l| scale / l).collect())
            }
            AlphaPolicy::PerAgent { alphas } => {
                if alphas.len() != n {
                    return Err(Error::Dimension {
                        expected: format!("{n} step sizes"),
                        got: alphas.len().to_string(),
                    });
                }
                DiagonalWeight::new(alphas.clone())
            }
        }
    }
}

/// Rule for the coupling constant `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CPolicy {
    /// `c = 1 / (2·max_i α_i)`.
    Half,
    /// `c = c_max·(1 − 1e−8)`.
    Spectral,
    Value { c: f64 },
}

impl Default for CPolicy {
    fn default() -> Self {
        CPolicy::Half
    }
}

impl CPolicy {
    pub fn resolve(&self, w: &MixingMatrix, alpha: &DiagonalWeight) -> Result<f64> {
        match *self {
            CPolicy::Half => Ok(1.0 / (2.0 * alpha.max())),
            CPolicy::Spectral => {
                let cmax = max_admissible_c(w, alpha)?;
                if cmax.is_infinite() {
                    Ok(1.0 / (2.0 * alpha.max()))
                } else {
                    Ok(cmax * SPECTRAL_SHRINK)
                }
            }
            CPolicy::Value { c } => Ok(c),
        }
    }
}

/// `Λ = diag(α)`, the coupling `c` and the cached `W̃ = I − cΛ(I − W)`.
#[derive(Debug, Clone)]
pub struct StepSizes {
    alpha: DiagonalWeight,
    c: f64,
    c_max: f64,
    w_tilde: DMatrix<f64>,
    i_minus_w: DMatrix<f64>,
    allow_unsafe: bool,
}

impl StepSizes {
    /// Checks `0 < c < c_max`; the per-agent bound needs the problem, see
    /// [`StepSizes::checked`].
    pub fn new(w: &MixingMatrix, alpha: DiagonalWeight, c: f64) -> Result<Self> {
        if alpha.len() != w.n() {
            return Err(Error::Dimension {
                expected: format!("{} step sizes", w.n()),
                got: alpha.len().to_string(),
            });
        }
        let c_max = max_admissible_c(w, &alpha)?;
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Configuration {
                agent: 0,
                message: format!("coupling c must be positive and finite, got {c}"),
            });
        }
        if c_max.is_finite() && c >= c_max * (1.0 - STEP_MARGIN) {
            return Err(Error::Configuration {
                agent: 0,
                message: format!("coupling c = {c} is not below c_max = {c_max}"),
            });
        }
        let i_minus_w = w.laplacian_like();
        let w_tilde = DMatrix::identity(w.n(), w.n()) - alpha.scale_rows(&i_minus_w) * c;
        Ok(StepSizes {
            alpha,
            c,
            c_max,
            w_tilde,
            i_minus_w,
            allow_unsafe: false,
        })
    }

    /// [`StepSizes::new`] plus `α_i < 2/L_i` for every agent unless `allow_unsafe`.
    pub fn checked(
        prob: &ProblemInstance,
        w: &MixingMatrix,
        alpha: DiagonalWeight,
        c: f64,
        allow_unsafe: bool,
    ) -> Result<Self> {
        if prob.n() != w.n() {
            return Err(Error::Dimension {
                expected: format!("{} agents in the mixing matrix", prob.n()),
                got: w.n().to_string(),
            });
        }
        let mut steps = StepSizes::new(w, alpha, c)?;
        if allow_unsafe {
            steps.allow_unsafe = true;
        } else {
            steps.check_problem(prob)?;
        }
        Ok(steps)
    }

    pub fn from_policies(
        prob: &ProblemInstance,
        w: &MixingMatrix,
        alpha: &AlphaPolicy,
        c: CPolicy,
        allow_unsafe: bool,
    ) -> Result<Self> {
        let alpha = alpha.resolve(prob)?;
        let c = c.resolve(w, &alpha)?;
        StepSizes::checked(prob, w, alpha, c, allow_unsafe)
    }

    /// Fails with the first agent (1-based) whose step violates `α_i < 2/L_i`.
    pub fn check_problem(&self, prob: &ProblemInstance) -> Result<()> {
        for (i, (&a, l)) in self.alpha.entries().iter().zip(prob.lipschitz()).enumerate() {
            if a * l >= 2.0 * (1.0 - STEP_MARGIN) {
                return Err(Error::Configuration {
                    agent: i + 1,
                    message: format!("step {a} is not below 2/L = {}", 2.0 / l),
                });
            }
        }
        Ok(())
    }

    pub fn alpha(&self) -> &DiagonalWeight {
        &self.alpha
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn c_max(&self) -> f64 {
        self.c_max
    }

    pub fn w_tilde(&self) -> &DMatrix<f64> {
        &self.w_tilde
    }

    pub fn i_minus_w(&self) -> &DMatrix<f64> {
        &self.i_minus_w
    }

    /// True when `α_i < 2/L_i` was waived explicitly.
    pub fn allows_unsafe(&self) -> bool {
        self.allow_unsafe
    }

    pub fn uniform_alpha(&self) -> Option<f64> {
        self.alpha.is_uniform().then(|| self.alpha.entries()[0])
    }
}

/// NIDS iterate at step `k`: `x^k`, `z^k`, `d^k` plus the previous point and
/// both gradients so each step costs one gradient evaluation.
#[derive(Debug, Clone)]
pub struct NidsState {
    pub x: StackedMatrix,
    pub z: StackedMatrix,
    pub d: StackedMatrix,
    /// `∇s(x^k)`.
    pub grad: StackedMatrix,
    /// `∇s(x^{k−1})`.
    pub grad_prev: StackedMatrix,
    pub x_prev: StackedMatrix,
    pub k: usize,
}

fn check_start(prob: &ProblemInstance, x0: &StackedMatrix) -> Result<()> {
    if x0.n() != prob.n() || x0.p() != prob.p() {
        return Err(Error::Dimension {
            expected: format!("{}x{} start", prob.n(), prob.p()),
            got: format!("{}x{}", x0.n(), x0.p()),
        });
    }
    if !x0.is_finite() {
        return Err(Error::Argument("start point has non-finite entries".into()));
    }
    Ok(())
}

fn ensure_finite(k: usize, parts: &[&StackedMatrix]) -> Result<()> {
    if parts.iter().all(|m| m.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { iteration: k })
    }
}

/// `z¹ = x⁰ − Λ∇s(x⁰)`, `x¹ = prox(z¹)`, `d¹ = 0`.
pub fn nids_init(prob: &ProblemInstance, steps: &StepSizes, x0: &StackedMatrix) -> Result<NidsState> {
    check_start(prob, x0)?;
    if !steps.allow_unsafe {
        steps.check_problem(prob)?;
    }
    let g0 = prob.gradient(x0);
    let z = StackedMatrix::from(x0.as_matrix() - steps.alpha.scale_rows(&g0));
    let x = prob.prox(&z, &steps.alpha);
    let grad = prob.gradient(&x);
    ensure_finite(1, &[&x, &z, &grad])?;
    Ok(NidsState {
        d: StackedMatrix::zeros(prob.n(), prob.p()),
        x,
        z,
        grad,
        grad_prev: g0,
        x_prev: x0.clone(),
        k: 1,
    })
}

/// One primal step: `z^{k+1} = z^k − x^k + W̃(2x^k − x^{k−1} − Λ∇s(x^k) + Λ∇s(x^{k−1}))`,
/// `x^{k+1} = prox(z^{k+1})`, and `d^{k+1} = Λ⁻¹(x^k − z^{k+1}) − ∇s(x^k)`.
pub fn nids_step_primal(state: &NidsState, prob: &ProblemInstance, steps: &StepSizes) -> Result<NidsState> {
    let lam = &steps.alpha;
    let inner = state.x.as_matrix() * 2.0 - state.x_prev.as_matrix()
        - lam.scale_rows(&(state.grad.as_matrix() - state.grad_prev.as_matrix()));
    let z = StackedMatrix::from(state.z.as_matrix() - state.x.as_matrix() + &steps.w_tilde * inner);
    let x = prob.prox(&z, lam);
    let d = StackedMatrix::from(
        lam.inverse().scale_rows(&(state.x.as_matrix() - z.as_matrix())) - state.grad.as_matrix(),
    );
    let grad = prob.gradient(&x);
    let k = state.k + 1;
    ensure_finite(k, &[&x, &z, &d, &grad])?;
    Ok(NidsState {
        x,
        z,
        d,
        grad,
        grad_prev: state.grad.clone(),
        x_prev: state.x.clone(),
        k,
    })
}

/// One `(x, d, z)`-ordered step:
/// `d^{k+1} = d^k + c(I − W)(2x^k − z^k − Λ∇s(x^k) − Λd^k)`,
/// `z^{k+1} = x^k − Λ∇s(x^k) − Λd^{k+1}`, `x^{k+1} = prox(z^{k+1})`.
pub fn nids_step_dz(state: &NidsState, prob: &ProblemInstance, steps: &StepSizes) -> Result<NidsState> {
    let lam = &steps.alpha;
    let lam_grad = lam.scale_rows(state.grad.as_matrix());
    let inner = state.x.as_matrix() * 2.0 - state.z.as_matrix() - &lam_grad - lam.scale_rows(state.d.as_matrix());
    let d = StackedMatrix::from(state.d.as_matrix() + (&steps.i_minus_w * inner) * steps.c);
    let z = StackedMatrix::from(state.x.as_matrix() - lam_grad - lam.scale_rows(d.as_matrix()));
    let x = prob.prox(&z, lam);
    let grad = prob.gradient(&x);
    let k = state.k + 1;
    ensure_finite(k, &[&x, &z, &d, &grad])?;
    Ok(NidsState {
        x,
        z,
        d,
        grad,
        grad_prev: state.grad.clone(),
        x_prev: state.x.clone(),
        k,
    })
}

/// Which of the two equivalent NIDS recursions to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NidsForm {
    #[default]
    Primal,
    Dz,
}

pub fn nids_step(form: NidsForm, state: &NidsState, prob: &ProblemInstance, steps: &StepSizes) -> Result<NidsState> {
    match form {
        NidsForm::Primal => nids_step_primal(state, prob, steps),
        NidsForm::Dz => nids_step_dz(state, prob, steps),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    Extra,
    PgExtra,
    DigingAtc,
}

impl BaselineVariant {
    /// Neighborhood mixing rounds per iteration.
    pub fn rounds_per_iteration(self) -> usize {
        match self {
            BaselineVariant::DigingAtc => 2,
            _ => 1,
        }
    }
}

/// Uniform step and the mixing matrices used by the baselines.
#[derive(Debug, Clone)]
pub struct BaselineSteps {
    alpha: f64,
    w: DMatrix<f64>,
    /// `(I + W)/2`.
    w_half: DMatrix<f64>,
}

impl BaselineSteps {
    pub fn new(w: &MixingMatrix, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Argument(format!("step must be positive, got {alpha}")));
        }
        let n = w.n();
        let w = w.matrix().clone();
        let w_half = (DMatrix::identity(n, n) + &w) * 0.5;
        Ok(BaselineSteps { alpha, w, w_half })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

#[derive(Debug, Clone)]
pub struct BaselineState {
    pub variant: BaselineVariant,
    pub x: StackedMatrix,
    pub x_prev: StackedMatrix,
    /// Pre-prox iterate (EXTRA / PG-EXTRA).
    pub z: Option<StackedMatrix>,
    /// Gradient tracker (DIGing-ATC).
    pub y: Option<StackedMatrix>,
    /// `∇s(x^k)`.
    pub grad: StackedMatrix,
    pub grad_prev: StackedMatrix,
    pub k: usize,
}

/// EXTRA / PG-EXTRA start `z¹ = W x⁰ − α∇s(x⁰)`, `x¹ = prox(z¹)` at `k = 1`;
/// DIGing-ATC start `x⁰`, `y⁰ = ∇s(x⁰)` at `k = 0`.
pub fn baseline_init(
    variant: BaselineVariant,
    prob: &ProblemInstance,
    steps: &BaselineSteps,
    x0: &StackedMatrix,
) -> Result<BaselineState> {
    check_start(prob, x0)?;
    let g0 = prob.gradient(x0);
    match variant {
        BaselineVariant::Extra | BaselineVariant::PgExtra => {
            if variant == BaselineVariant::Extra && !prob.is_smooth() {
                return Err(Error::Unsupported(
                    "EXTRA handles smooth problems only; use PG-EXTRA".into(),
                ));
            }
            let z = StackedMatrix::from(&steps.w * x0.as_matrix() - g0.as_matrix() * steps.alpha);
            let alpha = DiagonalWeight::uniform(prob.n(), steps.alpha)?;
            let x = prob.prox(&z, &alpha);
            let grad = prob.gradient(&x);
            ensure_finite(1, &[&x, &z, &grad])?;
            Ok(BaselineState {
                variant,
                x,
                x_prev: x0.clone(),
                z: Some(z),
                y: None,
                grad,
                grad_prev: g0,
                k: 1,
            })
        }
        BaselineVariant::DigingAtc => {
            if !prob.is_smooth() {
                return Err(Error::Unsupported(
                    "DIGing-ATC handles smooth problems only".into(),
                ));
            }
            Ok(BaselineState {
                variant,
                x: x0.clone(),
                x_prev: x0.clone(),
                z: None,
                y: Some(g0.clone()),
                grad: g0.clone(),
                grad_prev: g0,
                k: 0,
            })
        }
    }
}

/// `z^{k+1} = z^k − x^k + ((I+W)/2)(2x^k − x^{k−1}) − α∇s(x^k) + α∇s(x^{k−1})`,
/// then `x^{k+1} = prox(z^{k+1})`. With `r = 0` this is EXTRA.
pub fn pg_extra_step(state: &BaselineState, prob: &ProblemInstance, steps: &BaselineSteps) -> Result<BaselineState> {
    let z_prev = state.z.as_ref().ok_or_else(|| {
        Error::Unsupported("PG-EXTRA step needs an EXTRA / PG-EXTRA state".into())
    })?;
    let mix = &steps.w_half * (state.x.as_matrix() * 2.0 - state.x_prev.as_matrix());
    let z = StackedMatrix::from(
        z_prev.as_matrix() - state.x.as_matrix() + mix
            - (state.grad.as_matrix() - state.grad_prev.as_matrix()) * steps.alpha,
    );
    let alpha = DiagonalWeight::uniform(prob.n(), steps.alpha)?;
    let x = prob.prox(&z, &alpha);
    let grad = prob.gradient(&x);
    let k = state.k + 1;
    ensure_finite(k, &[&x, &z, &grad])?;
    Ok(BaselineState {
        variant: state.variant,
        x,
        x_prev: state.x.clone(),
        z: Some(z),
        y: None,
        grad,
        grad_prev: state.grad.clone(),
        k,
    })
}

/// `x^{k+1} = W(x^k − αy^k)`, `y^{k+1} = W(y^k + ∇s(x^{k+1}) − ∇s(x^k))`.
pub fn diging_atc_step(state: &BaselineState, prob: &ProblemInstance, steps: &BaselineSteps) -> Result<BaselineState> {
    if !prob.is_smooth() {
        return Err(Error::Unsupported("DIGing-ATC handles smooth problems only".into()));
    }
    let y = state
        .y
        .as_ref()
        .ok_or_else(|| Error::Unsupported("DIGing-ATC step needs a tracker state".into()))?;
    let x = StackedMatrix::from(&steps.w * (state.x.as_matrix() - y.as_matrix() * steps.alpha));
    let grad = prob.gradient(&x);
    let y = StackedMatrix::from(&steps.w * (y.as_matrix() + grad.as_matrix() - state.grad.as_matrix()));
    let k = state.k + 1;
    ensure_finite(k, &[&x, &y, &grad])?;
    Ok(BaselineState {
        variant: state.variant,
        x,
        x_prev: state.x.clone(),
        z: None,
        y: Some(y),
        grad,
        grad_prev: state.grad.clone(),
        k,
    })
}

/// Dispatches to the stepper matching `state.variant`.
pub fn baseline_step(state: &BaselineState, prob: &ProblemInstance, steps: &BaselineSteps) -> Result<BaselineState> {
    match state.variant {
        BaselineVariant::Extra | BaselineVariant::PgExtra => pg_extra_step(state, prob, steps),
        BaselineVariant::DigingAtc => diging_atc_step(state, prob, steps),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{generate_graph, metropolis_weights, Graph, GraphModel};
    use crate::objectives::{
        generate_lasso_problem, generate_sensing_problem, least_squares_term, LassoSpec, ProxTerm,
        SensingSpec,
    };
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_start(n: usize, p: usize, seed: u64) -> StackedMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StackedMatrix::from(DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng)))
    }

    fn sensing(n: usize, seed: u64) -> (ProblemInstance, MixingMatrix) {
        let prob = generate_sensing_problem(&SensingSpec::new(n, 6, 4, 1.0, 0.3, 0.1, seed)).unwrap();
        let g = generate_graph(n, GraphModel::ErdosRenyi { prob: 0.5 }, seed).unwrap();
        (prob, metropolis_weights(&g).unwrap())
    }

    fn scalar_problem() -> (ProblemInstance, MixingMatrix) {
        let t = least_squares_term(DMatrix::identity(1, 1), DVector::zeros(1)).unwrap();
        let prob = ProblemInstance::new(vec![t], vec![ProxTerm::Zero]).unwrap();
        let w = metropolis_weights(&Graph::new(1, &[]).unwrap()).unwrap();
        (prob, w)
    }

    #[test]
    fn scalar_init_lands_on_optimum() {
        let (prob, w) = scalar_problem();
        let steps = StepSizes::checked(&prob, &w, DiagonalWeight::uniform(1, 1.0).unwrap(), 0.5, false).unwrap();
        let x0 = StackedMatrix::from(DMatrix::from_element(1, 1, 4.0));
        let s = nids_init(&prob, &steps, &x0).unwrap();
        assert_eq!(s.z[(0, 0)], 0.0);
        assert_eq!(s.x[(0, 0)], 0.0);
        assert_eq!(s.d[(0, 0)], 0.0);
    }

    #[test]
    fn single_agent_is_gradient_descent() {
        let (prob, w) = scalar_problem();
        let alpha = 0.3;
        let steps = StepSizes::checked(&prob, &w, DiagonalWeight::uniform(1, alpha).unwrap(), 1.0, false).unwrap();
        let x0 = StackedMatrix::from(DMatrix::from_element(1, 1, 4.0));
        let mut s = nids_init(&prob, &steps, &x0).unwrap();
        let mut gd = 4.0 * (1.0 - alpha);
        for _ in 0..20 {
            assert!((s.x[(0, 0)] - gd).abs() <= 1e-14);
            s = nids_step_primal(&s, &prob, &steps).unwrap();
            gd *= 1.0 - alpha;
        }
        let bsteps = BaselineSteps::new(&w, alpha).unwrap();
        let mut b = baseline_init(BaselineVariant::DigingAtc, &prob, &bsteps, &x0).unwrap();
        let mut gd = 4.0;
        for _ in 0..10 {
            b = diging_atc_step(&b, &prob, &bsteps).unwrap();
            gd *= 1.0 - alpha;
            assert!((b.x[(0, 0)] - gd).abs() <= 1e-14);
        }
    }

    #[test]
    fn single_agent_pg_extra_is_ista() {
        let t = least_squares_term(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.7]), DVector::from_vec(vec![1.0, -2.0])).unwrap();
        let prob = ProblemInstance::new(vec![t], vec![ProxTerm::l1(0.3).unwrap()]).unwrap();
        let w = metropolis_weights(&Graph::new(1, &[]).unwrap()).unwrap();
        let alpha = 0.8;
        let steps = BaselineSteps::new(&w, alpha).unwrap();
        let x0 = StackedMatrix::from(DMatrix::from_row_slice(1, 2, &[0.5, 0.5]));
        let mut b = baseline_init(BaselineVariant::PgExtra, &prob, &steps, &x0).unwrap();
        let mut ista = x0.row(0).transpose();
        for _ in 0..15 {
            let g = prob.smooth[0].gradient(&ista);
            ista = prob.nonsmooth[0].prox(&(&ista - g * alpha), alpha);
            assert!((b.x.row(0).transpose() - &ista).norm() <= 1e-14);
            b = pg_extra_step(&b, &prob, &steps).unwrap();
        }
    }

    #[test]
    fn init_invariants() {
        let (prob, w) = sensing(6, 1);
        let alpha = DiagonalWeight::new(vec![0.5, 0.9, 1.1, 0.7, 1.3, 0.4]).unwrap();
        let c = CPolicy::Half.resolve(&w, &alpha).unwrap();
        let steps = StepSizes::checked(&prob, &w, alpha, c, false).unwrap();
        let x0 = random_start(6, 4, 3);
        let s = nids_init(&prob, &steps, &x0).unwrap();
        assert!(s.d.iter().all(|&v| v == 0.0));
        // At the consensual optimum x¹ = x⁰ − Λ∇s(x⁰) with nonzero rows.
        let xs = StackedMatrix::consensual(6, prob.reference_x().unwrap());
        let s = nids_init(&prob, &steps, &xs).unwrap();
        let g = prob.gradient(&xs);
        assert!(g.column_mean().norm() < 1e-10 && g.norm() > 1e-3);
        let expect = xs.as_matrix() - steps.alpha().scale_rows(&g);
        assert_eq!(s.x.as_matrix(), &expect);
    }

    #[test]
    fn step_size_errors_name_agent() {
        let (prob, w) = sensing(4, 2);
        let alpha = DiagonalWeight::new(vec![1.0, 1.0, 2.5, 1.0]).unwrap();
        match StepSizes::checked(&prob, &w, alpha.clone(), 0.1, false) {
            Err(Error::Configuration { agent: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(StepSizes::checked(&prob, &w, alpha, 0.1, true).is_ok());
        let alpha = DiagonalWeight::uniform(4, 1.0).unwrap();
        let cmax = max_admissible_c(&w, &alpha).unwrap();
        assert!(StepSizes::new(&w, alpha.clone(), cmax).is_err());
        assert!(StepSizes::new(&w, alpha.clone(), cmax * SPECTRAL_SHRINK).is_ok());
        assert!(StepSizes::new(&w, alpha, 0.0).is_err());
    }

    #[test]
    fn matches_three_term_recursion() {
        let n = 5;
        let (prob, w) = sensing(n, 4);
        let alpha = 0.9;
        let steps = StepSizes::checked(&prob, &w, DiagonalWeight::uniform(n, alpha).unwrap(), 1.0 / (2.0 * alpha), false).unwrap();
        let s0 = nids_init(&prob, &steps, &random_start(n, 4, 5)).unwrap();
        let mut prev = s0.clone();
        let mut cur = nids_step_primal(&s0, &prob, &steps).unwrap();
        let iw = DMatrix::identity(n, n) + w.matrix();
        let half = &iw * 0.5;
        for _ in 0..10 {
            let next = nids_step_primal(&cur, &prob, &steps).unwrap();
            // x^{k+2} = (I+W)x^{k+1} − ((I+W)/2)(x^k + α∇s(x^{k+1}) − α∇s(x^k))
            let g1 = prob.gradient(&cur.x);
            let g0 = prob.gradient(&prev.x);
            let oracle = &iw * cur.x.as_matrix()
                - &half * (prev.x.as_matrix() + (g1.as_matrix() - g0.as_matrix()) * alpha);
            assert!((next.x.as_matrix() - &oracle).amax() <= 1e-13 * oracle.amax().max(1.0));
            prev = cur;
            cur = next;
        }
    }

    #[test]
    fn literal_two_agent_oracle() {
        let t1 = least_squares_term(DMatrix::from_element(1, 1, 1.5), DVector::from_element(1, 2.0)).unwrap();
        let t2 = least_squares_term(DMatrix::from_element(1, 1, 0.8), DVector::from_element(1, -1.0)).unwrap();
        let prob = ProblemInstance::new(vec![t1, t2], vec![ProxTerm::Zero; 2]).unwrap();
        let w = metropolis_weights(&Graph::complete(2).unwrap()).unwrap();
        let a = [0.4, 1.1];
        let c = 0.6;
        let steps = StepSizes::checked(&prob, &w, DiagonalWeight::new(a.to_vec()).unwrap(), c, false).unwrap();
        let x0 = StackedMatrix::from(DMatrix::from_column_slice(2, 1, &[0.3, -0.7]));
        let s1 = nids_init(&prob, &steps, &x0).unwrap();
        let s2 = nids_step_primal(&s1, &prob, &steps).unwrap();
        // Agent-wise evaluation with scalar gradients g_i(x) = m_i(m_i x − y_i).
        let m = [1.5, 0.8];
        let y = [2.0, -1.0];
        let g = |i: usize, x: f64| m[i] * (m[i] * x - y[i]);
        let wm = [[0.5, 0.5], [0.5, 0.5]];
        let mut x0v = [0.0; 2];
        let mut x1 = [0.0; 2];
        let mut z1 = [0.0; 2];
        for i in 0..2 {
            x0v[i] = x0[(i, 0)];
            z1[i] = x0v[i] - a[i] * g(i, x0v[i]);
            x1[i] = z1[i];
        }
        for i in 0..2 {
            let mut sum = 0.0;
            for j in 0..2 {
                let delta = if i == j { 1.0 } else { 0.0 };
                let wt = delta - c * a[i] * (delta - wm[i][j]);
                sum += wt * (2.0 * x1[j] - x0v[j] - a[j] * g(j, x1[j]) + a[j] * g(j, x0v[j]));
            }
            let z2 = z1[i] - x1[i] + sum;
            assert!((s2.z[(i, 0)] - z2).abs() <= 1e-14);
            assert!((s2.x[(i, 0)] - z2).abs() <= 1e-14);
        }
    }

    #[test]
    fn primal_and_dz_forms_agree() {
        let n = 8;
        let prob = generate_lasso_problem(&LassoSpec::new(n, 3, 10, 7)).unwrap();
        let g = generate_graph(n, GraphModel::ErdosRenyi { prob: 0.4 }, 7).unwrap();
        let w = metropolis_weights(&g).unwrap();
        let alpha = AlphaPolicy::PerAgent { alphas: (0..n).map(|i| 0.5 + 0.15 * i as f64).collect() };
        let steps = StepSizes::from_policies(&prob, &w, &alpha, CPolicy::Spectral, false).unwrap();
        let s0 = nids_init(&prob, &steps, &random_start(n, 10, 8)).unwrap();
        let (mut a, mut b) = (s0.clone(), s0);
        for _ in 0..10 {
            a = nids_step_primal(&a, &prob, &steps).unwrap();
            b = nids_step_dz(&b, &prob, &steps).unwrap();
            let scale = a.z.amax().max(1.0);
            assert!((a.x.as_matrix() - b.x.as_matrix()).amax() <= 1e-12 * scale);
            assert!((a.z.as_matrix() - b.z.as_matrix()).amax() <= 1e-12 * scale);
            assert!((a.d.as_matrix() - b.d.as_matrix()).amax() <= 1e-10 * a.d.amax().max(1.0));
        }
    }

    #[test]
    fn d_stays_in_range() {
        let n = 6;
        let (prob, w) = sensing(n, 9);
        let steps = StepSizes::from_policies(&prob, &w, &AlphaPolicy::Uniform { alpha: 1.2 }, CPolicy::Half, false).unwrap();
        let mut a = nids_init(&prob, &steps, &random_start(n, 4, 1)).unwrap();
        let mut b = a.clone();
        for _ in 0..1000 {
            a = nids_step_primal(&a, &prob, &steps).unwrap();
            b = nids_step_dz(&b, &prob, &steps).unwrap();
            assert!(a.d.max_abs_column_sum() <= 1e-10);
            assert!(b.d.max_abs_column_sum() <= 1e-10);
        }
    }

    #[test]
    fn primal_d_matches_definition() {
        let n = 5;
        let (prob, w) = sensing(n, 10);
        let steps = StepSizes::from_policies(&prob, &w, &AlphaPolicy::InverseLipschitz { scale: 1.0 }, CPolicy::Half, false).unwrap();
        let mut s = nids_init(&prob, &steps, &random_start(n, 4, 2)).unwrap();
        for _ in 0..5 {
            s = nids_step_dz(&s, &prob, &steps).unwrap();
            let def = steps.alpha().inverse().scale_rows(&(s.x_prev.as_matrix() - s.z.as_matrix())) - s.grad_prev.as_matrix();
            assert!((def - s.d.as_matrix()).amax() <= 1e-8);
        }
    }

    #[test]
    fn fixed_point_is_preserved() {
        let n = 5;
        let (prob, w) = sensing(n, 11);
        let steps = StepSizes::from_policies(&prob, &w, &AlphaPolicy::Uniform { alpha: 1.0 }, CPolicy::Half, false).unwrap();
        let xs = StackedMatrix::consensual(n, prob.reference_x().unwrap());
        let g = prob.gradient(&xs);
        let state = NidsState {
            x: xs.clone(),
            z: xs.clone(),
            d: StackedMatrix::from(-g.as_matrix()),
            grad: g.clone(),
            grad_prev: g,
            x_prev: xs.clone(),
            k: 1,
        };
        let next = nids_step_dz(&state, &prob, &steps).unwrap();
        assert!((next.x.as_matrix() - xs.as_matrix()).amax() <= 1e-12);
        assert!((next.d.as_matrix() - state.d.as_matrix()).amax() <= 1e-12);
        let next = nids_step_primal(&state, &prob, &steps).unwrap();
        assert!((next.x.as_matrix() - xs.as_matrix()).amax() <= 1e-12);
    }

    #[test]
    fn consensual_argument_leaves_d_unchanged() {
        let n = 4;
        let (prob, w) = sensing(n, 12);
        let steps = StepSizes::from_policies(&prob, &w, &AlphaPolicy::Uniform { alpha: 0.5 }, CPolicy::Half, false).unwrap();
        // Choose z so that 2x − z − Λ∇s − Λd is consensual.
        let x = random_start(n, 4, 4);
        let grad = prob.gradient(&x);
        let d = StackedMatrix::from(crate::stackmat::range_project(&random_start(n, 4, 5)).into_inner());
        let target = StackedMatrix::consensual(n, &DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let z = StackedMatrix::from(
            x.as_matrix() * 2.0 - steps.alpha().scale_rows(&(grad.as_matrix() + d.as_matrix())) - target.as_matrix(),
        );
        let state = NidsState { x: x.clone(), z, d: d.clone(), grad: grad.clone(), grad_prev: grad, x_prev: x, k: 1 };
        let next = nids_step_dz(&state, &prob, &steps).unwrap();
        assert!((next.d.as_matrix() - d.as_matrix()).amax() <= 1e-13);
    }

    #[test]
    fn extra_matches_recursion() {
        let n = 5;
        let (prob, w) = sensing(n, 13);
        let alpha = 0.6;
        let steps = BaselineSteps::new(&w, alpha).unwrap();
        let x0 = random_start(n, 4, 6);
        let b1 = baseline_init(BaselineVariant::Extra, &prob, &steps, &x0).unwrap();
        let oracle1 = w.matrix() * x0.as_matrix() - prob.gradient(&x0).as_matrix() * alpha;
        assert!((b1.x.as_matrix() - &oracle1).amax() <= 1e-14);
        let iw = DMatrix::identity(n, n) + w.matrix();
        let half = &iw * 0.5;
        let (mut prev, mut cur) = (x0, b1);
        for _ in 0..8 {
            let next = pg_extra_step(&cur, &prob, &steps).unwrap();
            // x^{k+2} = (I+W)x^{k+1} − ((I+W)/2)x^k − α∇s(x^{k+1}) + α∇s(x^k)
            let oracle = &iw * cur.x.as_matrix() - &half * prev.as_matrix()
                - (prob.gradient(&cur.x).as_matrix() - prob.gradient(&prev).as_matrix()) * alpha;
            assert!((next.x.as_matrix() - &oracle).amax() <= 1e-14 * oracle.amax().max(1.0) * 10.0);
            prev = cur.x.clone();
            cur = next;
        }
    }

    #[test]
    fn diging_tracks_mean_gradient() {
        let n = 7;
        let (prob, w) = sensing(n, 14);
        let steps = BaselineSteps::new(&w, 0.3).unwrap();
        let mut b = baseline_init(BaselineVariant::DigingAtc, &prob, &steps, &random_start(n, 4, 7)).unwrap();
        for _ in 0..200 {
            b = diging_atc_step(&b, &prob, &steps).unwrap();
            let y = b.y.as_ref().unwrap();
            let diff = y.column_mean() - prob.gradient(&b.x).column_mean();
            assert!(diff.amax() <= 1e-10);
        }
        assert_eq!(BaselineVariant::DigingAtc.rounds_per_iteration(), 2);
    }

    #[test]
    fn diging_returns_to_consensual_optimum() {
        let n = 6;
        let (prob, w) = sensing(n, 15);
        let steps = BaselineSteps::new(&w, 0.5).unwrap();
        let xs = StackedMatrix::consensual(n, prob.reference_x().unwrap());
        let mut b = baseline_init(BaselineVariant::DigingAtc, &prob, &steps, &xs).unwrap();
        // y⁰ = ∇s(x*) has distinct rows, so x¹ leaves consensus before returning.
        b = diging_atc_step(&b, &prob, &steps).unwrap();
        assert!(crate::stackmat::range_project(&b.x).amax() > 1e-6);
        for _ in 0..3000 {
            b = diging_atc_step(&b, &prob, &steps).unwrap();
        }
        assert!((b.x.as_matrix() - xs.as_matrix()).amax() <= 1e-10);
    }

    #[test]
    fn nonsmooth_baselines_rejected() {
        let prob = generate_lasso_problem(&LassoSpec::new(3, 3, 6, 1)).unwrap();
        let w = metropolis_weights(&Graph::complete(3).unwrap()).unwrap();
        let steps = BaselineSteps::new(&w, 0.5).unwrap();
        let x0 = StackedMatrix::zeros(3, 6);
        assert!(matches!(baseline_init(BaselineVariant::DigingAtc, &prob, &steps, &x0), Err(Error::Unsupported(_))));
        assert!(matches!(baseline_init(BaselineVariant::Extra, &prob, &steps, &x0), Err(Error::Unsupported(_))));
        assert!(baseline_init(BaselineVariant::PgExtra, &prob, &steps, &x0).is_ok());
    }

    #[test]
    fn divergence_reports_iteration() {
        let (prob, w) = scalar_problem();
        let steps = StepSizes::checked(&prob, &w, DiagonalWeight::uniform(1, 3.0).unwrap(), 0.1, true).unwrap();
        let mut s = nids_init(&prob, &steps, &StackedMatrix::from(DMatrix::from_element(1, 1, 1e300))).unwrap();
        let mut err = None;
        for _ in 0..2000 {
            match nids_step_primal(&s, &prob, &steps) {
                Ok(next) => s = next,
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        assert!(matches!(err, Some(Error::Divergence { iteration }) if iteration > 1));
    }
}
