//! Per-agent objective terms, problem generators and centralized references.
//!
//! Each agent `i` holds a least-squares term `s_i(x) = ½‖M_i x − y_i‖²` and a
//! proximable term `r_i`. Generators control `L_i = λ_max(M_iᵀM_i)` and
//! `μ_i = λ_min(M_iᵀM_i)` exactly by an affine map on squared singular values.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::sym_eigenvalues;
use crate::stackmat::{DiagonalWeight, StackedMatrix};
use crate::{Error, Result};

/// `s(x) = ½‖M x − y‖²` with cached `MᵀM`, `Mᵀy` and curvature constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothTerm {
    matrix: DMatrix<f64>,
    y: DVector<f64>,
    hessian: DMatrix<f64>,
    mty: DVector<f64>,
    lipschitz: f64,
    strong_convexity: f64,
}

impl SmoothTerm {
    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    /// `Mᵀy`.
    pub fn linear_part(&self) -> &DVector<f64> {
        &self.mty
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.matrix * x - &self.y).norm_squared()
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let (m, p) = self.matrix.shape();
        if m < p {
            self.matrix.tr_mul(&(&self.matrix * x - &self.y))
        } else {
            &self.hessian * x - &self.mty
        }
    }

    /// Gradient at a row vector, written into a row of a stacked matrix.
    fn gradient_row(&self, x: nalgebra::DVectorView<f64>) -> DVector<f64> {
        self.gradient(&x.into_owned())
    }

    /// Same matrix, new measurements `y = M x + e`.
    pub fn remeasure(&self, signal: &DVector<f64>, noise: &DVector<f64>) -> Result<SmoothTerm> {
        if noise.len() != self.matrix.nrows() || signal.len() != self.dim() {
            return Err(Error::Dimension {
                expected: format!("signal {} / noise {}", self.dim(), self.matrix.nrows()),
                got: format!("signal {} / noise {}", signal.len(), noise.len()),
            });
        }
        least_squares_term(self.matrix.clone(), &self.matrix * signal + noise)
    }
}

/// `½‖M x − y‖²` with `L = λ_max(MᵀM)` and `μ = λ_min(MᵀM)` (zero when `m < p`).
pub fn least_squares_term(m: DMatrix<f64>, y: DVector<f64>) -> Result<SmoothTerm> {
    if m.nrows() != y.len() {
        return Err(Error::Dimension {
            expected: format!("{} measurements", m.nrows()),
            got: y.len().to_string(),
        });
    }
    if m.ncols() == 0 {
        return Err(Error::Argument("least-squares term needs p >= 1".into()));
    }
    let hessian = m.tr_mul(&m);
    let mty = m.tr_mul(&y);
    let ev = sym_eigenvalues(&hessian)?;
    let lipschitz = ev[0];
    let strong_convexity = if m.nrows() < m.ncols() {
        0.0
    } else {
        ev[ev.len() - 1].max(0.0)
    };
    if !(lipschitz > 0.0) {
        return Err(Error::Argument("least-squares matrix is zero".into()));
    }
    Ok(SmoothTerm {
        matrix: m,
        y,
        hessian,
        mty,
        lipschitz,
        strong_convexity,
    })
}

/// Rescales the singular values of `M` so that `λ_max(MᵀM) = target_l` and,
/// when `target_mu > 0`, `λ_min(MᵀM) = target_mu`. Measurements `y` are kept;
/// use [`SmoothTerm::remeasure`] to re-measure a planted signal.
pub fn rescale_to_constants(term: &SmoothTerm, target_l: f64, target_mu: f64) -> Result<SmoothTerm> {
    if !(target_l > 0.0 && target_mu >= 0.0 && target_l >= target_mu) {
        return Err(Error::Argument(format!(
            "need target_l >= target_mu >= 0 and target_l > 0, got L = {target_l}, mu = {target_mu}"
        )));
    }
    let (rows, cols) = term.matrix.shape();
    if target_mu > 0.0 && rows < cols {
        return Err(Error::InfeasibleTarget(format!(
            "mu = {target_mu} > 0 needs at least p = {cols} rows, matrix has {rows}"
        )));
    }
    let svd = term.matrix.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let sq: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
    let smax = sq.iter().cloned().fold(0.0, f64::max);
    let smin = sq.iter().cloned().fold(f64::INFINITY, f64::min);
    let (a, b) = if target_mu > 0.0 {
        if smin <= 1e-12 * smax {
            return Err(Error::InfeasibleTarget(
                "matrix is rank-deficient; cannot reach mu > 0".into(),
            ));
        }
        if smax - smin <= 1e-14 * smax {
            if (target_l - target_mu).abs() > 1e-14 * target_l {
                return Err(Error::InfeasibleTarget(
                    "all singular values are equal; need target_l == target_mu".into(),
                ));
            }
            (target_l / smax, 0.0)
        } else {
            let a = (target_l - target_mu) / (smax - smin);
            (a, target_l - a * smax)
        }
    } else {
        (target_l / smax, 0.0)
    };
    let sigma = DVector::from_iterator(sq.len(), sq.iter().map(|s2| (a * s2 + b).max(0.0).sqrt()));
    let rescaled = u * DMatrix::from_diagonal(&sigma) * vt;
    let mut out = least_squares_term(rescaled, term.y.clone())?;
    // The affine map hits the targets exactly; pin them against eigen round-off.
    if (out.lipschitz - target_l).abs() <= 1e-9 * target_l {
        out.lipschitz = target_l;
    }
    if target_mu > 0.0 && (out.strong_convexity - target_mu).abs() <= 1e-9 * target_l {
        out.strong_convexity = target_mu;
    }
    Ok(out)
}

/// Componentwise soft-threshold `sign(v)·max(|v| − t, 0)`.
pub fn prox_l1(v: &DVector<f64>, threshold: f64) -> DVector<f64> {
    v.map(|x| soft_threshold(x, threshold))
}

#[inline]
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProxTerm {
    Zero,
    /// `weight · ‖x‖₁`.
    L1 { weight: f64 },
    /// Indicator of `[lo, hi]^p`.
    Box { lo: f64, hi: f64 },
}

impl ProxTerm {
    pub fn l1(weight: f64) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::Argument(format!("l1 weight must be >= 0, got {weight}")));
        }
        Ok(ProxTerm::L1 { weight })
    }

    pub fn bounds(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::Argument(format!("box needs lo <= hi, got [{lo}, {hi}]")));
        }
        Ok(ProxTerm::Box { lo, hi })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ProxTerm::Zero) || matches!(self, ProxTerm::L1 { weight } if *weight == 0.0)
    }

    /// `argmin_x step·r(x) + ½‖x − v‖²`.
    pub fn prox(&self, v: &DVector<f64>, step: f64) -> DVector<f64> {
        match *self {
            ProxTerm::Zero => v.clone(),
            ProxTerm::L1 { weight } => prox_l1(v, weight * step),
            ProxTerm::Box { lo, hi } => v.map(|x| x.clamp(lo, hi)),
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match *self {
            ProxTerm::Zero => 0.0,
            ProxTerm::L1 { weight } => weight * x.lp_norm(1),
            ProxTerm::Box { lo, hi } => {
                if x.iter().all(|&v| v >= lo && v <= hi) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// Subgradient interval of the 1-D restriction at `x` (coordinates are separable).
    pub fn subdifferential(&self, x: f64) -> (f64, f64) {
        match *self {
            ProxTerm::Zero => (0.0, 0.0),
            ProxTerm::L1 { weight } => {
                if x > 0.0 {
                    (weight, weight)
                } else if x < 0.0 {
                    (-weight, -weight)
                } else {
                    (-weight, weight)
                }
            }
            ProxTerm::Box { lo, hi } => {
                let lower = if x <= lo { f64::NEG_INFINITY } else { 0.0 };
                let upper = if x >= hi { f64::INFINITY } else { 0.0 };
                if x < lo || x > hi {
                    (f64::NAN, f64::NAN)
                } else {
                    (lower, upper)
                }
            }
        }
    }
}

/// How an instance was generated; enough to regenerate it bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum ProblemSpec {
    Sensing(SensingSpec),
    Lasso(LassoSpec),
}

impl ProblemSpec {
    pub fn generate(&self) -> Result<ProblemInstance> {
        match self {
            ProblemSpec::Sensing(s) => generate_sensing_problem(s),
            ProblemSpec::Lasso(s) => generate_lasso_problem(s),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            ProblemSpec::Sensing(s) => s.n,
            ProblemSpec::Lasso(s) => s.n,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ProblemSpec::Sensing(s) => s.seed = seed,
            ProblemSpec::Lasso(s) => s.seed = seed,
        }
    }
}

/// Per-agent constants that override the instance-wide targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConstants {
    pub agents: Vec<usize>,
    pub l: f64,
    pub mu: f64,
}

fn default_noise() -> f64 {
    0.01
}

fn default_sensing_ref_tol() -> f64 {
    1e-13
}

fn default_lasso_ref_tol() -> f64 {
    1e-9
}

fn default_ref_max_iter() -> usize {
    2_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingSpec {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub l: f64,
    pub mu: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub overrides: Vec<AgentConstants>,
    #[serde(default = "default_sensing_ref_tol")]
    pub reference_tol: f64,
    #[serde(default = "default_ref_max_iter")]
    pub reference_max_iter: usize,
}

impl SensingSpec {
    pub fn new(n: usize, m: usize, p: usize, l: f64, mu: f64, noise_std: f64, seed: u64) -> Self {
        SensingSpec {
            n,
            m,
            p,
            l,
            mu,
            noise_std,
            seed,
            overrides: Vec::new(),
            reference_tol: default_sensing_ref_tol(),
            reference_max_iter: default_ref_max_iter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoSpec {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    /// Nonzeros in the planted signal; default `⌈0.05·p⌉`.
    #[serde(default)]
    pub sparsity: Option<usize>,
    /// `λ_i` for every agent; default `0.01·‖Σ M_iᵀy_i‖_∞ / n`.
    #[serde(default)]
    pub l1_weight: Option<f64>,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "default_lasso_ref_tol")]
    pub reference_tol: f64,
    #[serde(default = "default_ref_max_iter")]
    pub reference_max_iter: usize,
}

impl LassoSpec {
    pub fn new(n: usize, m: usize, p: usize, seed: u64) -> Self {
        LassoSpec {
            n,
            m,
            p,
            sparsity: None,
            l1_weight: None,
            noise_std: default_noise(),
            seed,
            reference_tol: default_lasso_ref_tol(),
            reference_max_iter: default_ref_max_iter(),
        }
    }

    pub fn resolved_sparsity(&self) -> usize {
        self.sparsity
            .unwrap_or_else(|| ((0.05 * self.p as f64).ceil() as usize).max(1))
    }
}

/// `(1/n) Σ_i (s_i + r_i)` over `n` agents in dimension `p`.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub smooth: Vec<SmoothTerm>,
    pub nonsmooth: Vec<ProxTerm>,
    pub ground_truth: Option<DVector<f64>>,
    pub reference: Option<ReferenceSolution>,
    pub spec: Option<ProblemSpec>,
}

impl ProblemInstance {
    pub fn new(smooth: Vec<SmoothTerm>, nonsmooth: Vec<ProxTerm>) -> Result<Self> {
        if smooth.is_empty() {
            return Err(Error::Argument("problem needs at least one agent".into()));
        }
        if smooth.len() != nonsmooth.len() {
            return Err(Error::Dimension {
                expected: format!("{} prox terms", smooth.len()),
                got: nonsmooth.len().to_string(),
            });
        }
        let p = smooth[0].dim();
        if let Some(i) = smooth.iter().position(|s| s.dim() != p) {
            return Err(Error::Dimension {
                expected: format!("dimension {p}"),
                got: format!("agent {} has {}", i + 1, smooth[i].dim()),
            });
        }
        Ok(ProblemInstance {
            smooth,
            nonsmooth,
            ground_truth: None,
            reference: None,
            spec: None,
        })
    }

    pub fn n(&self) -> usize {
        self.smooth.len()
    }

    pub fn p(&self) -> usize {
        self.smooth[0].dim()
    }

    pub fn lipschitz(&self) -> Vec<f64> {
        self.smooth.iter().map(|s| s.lipschitz()).collect()
    }

    pub fn strong_convexity(&self) -> Vec<f64> {
        self.smooth.iter().map(|s| s.strong_convexity()).collect()
    }

    /// True when every `r_i` vanishes.
    pub fn is_smooth(&self) -> bool {
        self.nonsmooth.iter().all(|r| r.is_zero())
    }

    pub fn reference_x(&self) -> Option<&DVector<f64>> {
        self.reference.as_ref().map(|r| &r.x)
    }

    /// Row `i` is `∇s_i(x_i)`.
    pub fn gradient(&self, x: &StackedMatrix) -> StackedMatrix {
        let mut g = DMatrix::zeros(x.n(), x.p());
        for (i, term) in self.smooth.iter().enumerate() {
            let gi = term.gradient_row(x.row(i).transpose().as_view());
            g.row_mut(i).copy_from(&gi.transpose());
        }
        StackedMatrix::from(g)
    }

    /// Row `i` is `prox_{α_i r_i}(z_i)`.
    pub fn prox(&self, z: &StackedMatrix, steps: &DiagonalWeight) -> StackedMatrix {
        let mut out = z.as_matrix().clone();
        for (i, term) in self.nonsmooth.iter().enumerate() {
            if term.is_zero() {
                continue;
            }
            let row = term.prox(&z.row(i).transpose(), steps.entries()[i]);
            out.row_mut(i).copy_from(&row.transpose());
        }
        StackedMatrix::from(out)
    }

    /// `(1/n) Σ_i (s_i(x) + r_i(x))` at a single point.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        let n = self.n() as f64;
        self.smooth
            .iter()
            .zip(&self.nonsmooth)
            .map(|(s, r)| s.value(x) + r.value(x))
            .sum::<f64>()
            / n
    }

    /// `(1/n) Σ_i ∇s_i(x)`.
    pub fn mean_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.p());
        for s in &self.smooth {
            g += s.gradient(x);
        }
        g / self.n() as f64
    }

    /// The prox of `(1/n)Σ r_i`, valid because every supported term is
    /// coordinate-separable: soft-threshold by the mean l1 weight, then clip to
    /// the intersected box.
    pub fn aggregate_prox(&self) -> Result<AggregateProx> {
        let n = self.n() as f64;
        let mut weight = 0.0;
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for r in &self.nonsmooth {
            match *r {
                ProxTerm::Zero => {}
                ProxTerm::L1 { weight: w } => weight += w / n,
                ProxTerm::Box { lo: a, hi: b } => {
                    lo = lo.max(a);
                    hi = hi.min(b);
                }
            }
        }
        if lo > hi {
            return Err(Error::Domain("agents' boxes do not intersect".into()));
        }
        Ok(AggregateProx { weight, lo, hi })
    }
}

/// Prox of the averaged nonsmooth part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateProx {
    pub weight: f64,
    pub lo: f64,
    pub hi: f64,
}

impl AggregateProx {
    pub fn apply(&self, v: &DVector<f64>, step: f64) -> DVector<f64> {
        v.map(|x| soft_threshold(x, self.weight * step).clamp(self.lo, self.hi))
    }
}

/// Output of [`centralized_reference`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// Final step change `‖x^{k+1} − x^k‖`.
    pub residual: f64,
    pub tol: f64,
}

/// Centralized proximal gradient on `(1/n)Σ(s_i + r_i)` from `x = 0`.
pub fn centralized_reference(
    prob: &ProblemInstance,
    tol: f64,
    max_iter: usize,
) -> Result<ReferenceSolution> {
    centralized_reference_from(prob, &DVector::zeros(prob.p()), tol, max_iter)
}

/// Proximal gradient with step `1/L_total`, stopping once the step change is
/// at most `tol`. Smooth instances finish with one exact normal-equations
/// solve when the averaged Hessian is positive definite.
pub fn centralized_reference_from(
    prob: &ProblemInstance,
    x0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<ReferenceSolution> {
    if x0.len() != prob.p() {
        return Err(Error::Dimension {
            expected: format!("start of length {}", prob.p()),
            got: x0.len().to_string(),
        });
    }
    let n = prob.n() as f64;
    let mut hess = DMatrix::zeros(prob.p(), prob.p());
    for s in &prob.smooth {
        hess += s.hessian();
    }
    hess /= n;
    let l_total = sym_eigenvalues(&hess)?[0];
    let step = 1.0 / l_total;
    let agg = prob.aggregate_prox()?;
    let mut x = x0.clone();
    let mut residual = f64::INFINITY;
    for k in 1..=max_iter {
        let next = agg.apply(&(&x - prob.mean_gradient(&x) * step), step);
        residual = (&next - &x).norm();
        x = next;
        if !residual.is_finite() {
            return Err(Error::Numerical("centralized reference produced non-finite values".into()));
        }
        if residual <= tol {
            if prob.is_smooth() {
                x = polish_smooth(prob, &hess, x);
            }
            return Ok(ReferenceSolution {
                x,
                iterations: k,
                residual,
                tol,
            });
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual,
    })
}

fn polish_smooth(prob: &ProblemInstance, hess: &DMatrix<f64>, x: DVector<f64>) -> DVector<f64> {
    let Some(chol) = hess.clone().cholesky() else {
        return x;
    };
    let g = prob.mean_gradient(&x);
    let polished = &x - chol.solve(&g);
    if prob.mean_gradient(&polished).norm() <= g.norm() {
        polished
    } else {
        x
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Decentralized sensing: `y_i = M_i x + e_i`, `r_i = 0`, with each `M_i`
/// rescaled to the requested `(L_i, μ_i)`.
pub fn generate_sensing_problem(spec: &SensingSpec) -> Result<ProblemInstance> {
    if spec.n == 0 || spec.m == 0 || spec.p == 0 {
        return Err(Error::Argument("n, m and p must be positive".into()));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::Argument("noise_std must be >= 0".into()));
    }
    let mut constants = vec![(spec.l, spec.mu); spec.n];
    for o in &spec.overrides {
        for &a in &o.agents {
            if a >= spec.n {
                return Err(Error::Argument(format!(
                    "override names agent {} but n = {}",
                    a + 1,
                    spec.n
                )));
            }
            constants[a] = (o.l, o.mu);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signal = gaussian_vector(&mut rng, spec.p, 1.0);
    let mut smooth = Vec::with_capacity(spec.n);
    for &(l, mu) in &constants {
        let raw = gaussian_matrix(&mut rng, spec.m, spec.p);
        let noise = gaussian_vector(&mut rng, spec.m, spec.noise_std);
        let base = least_squares_term(raw, DVector::zeros(spec.m))?;
        let term = rescale_to_constants(&base, l, mu)?.remeasure(&signal, &noise)?;
        smooth.push(term);
    }
    let mut prob = ProblemInstance::new(smooth, vec![ProxTerm::Zero; spec.n])?;
    prob.ground_truth = Some(signal);
    prob.reference = Some(centralized_reference(
        &prob,
        spec.reference_tol,
        spec.reference_max_iter,
    )?);
    prob.spec = Some(ProblemSpec::Sensing(spec.clone()));
    Ok(prob)
}

/// Decentralized compressed sensing with `r_i = λ_i‖x‖₁` and every `L_i = 1`.
pub fn generate_lasso_problem(spec: &LassoSpec) -> Result<ProblemInstance> {
    if spec.n == 0 || spec.m == 0 || spec.p == 0 {
        return Err(Error::Argument("n, m and p must be positive".into()));
    }
    let sparsity = spec.resolved_sparsity();
    if sparsity < 1 || sparsity > spec.p {
        return Err(Error::Argument(format!(
            "sparsity must lie in 1..={}, got {sparsity}",
            spec.p
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut signal = DVector::zeros(spec.p);
    for idx in sample(&mut rng, spec.p, sparsity).into_iter() {
        signal[idx] = StandardNormal.sample(&mut rng);
    }
    let mut smooth = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let raw = gaussian_matrix(&mut rng, spec.m, spec.p);
        let noise = gaussian_vector(&mut rng, spec.m, spec.noise_std);
        let base = least_squares_term(raw, DVector::zeros(spec.m))?;
        smooth.push(rescale_to_constants(&base, 1.0, 0.0)?.remeasure(&signal, &noise)?);
    }
    let weight = match spec.l1_weight {
        Some(w) => w,
        None => {
            let mut total = DVector::zeros(spec.p);
            for s in &smooth {
                total += s.linear_part();
            }
            0.01 * total.amax() / spec.n as f64
        }
    };
    let prox = ProxTerm::l1(weight)?;
    let mut prob = ProblemInstance::new(smooth, vec![prox; spec.n])?;
    prob.ground_truth = Some(signal);
    prob.reference = Some(centralized_reference(
        &prob,
        spec.reference_tol,
        spec.reference_max_iter,
    )?);
    prob.spec = Some(ProblemSpec::Lasso(spec.clone()));
    Ok(prob)
}

/// Manifest of a problem bundle: matrices live in CSV files next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemManifest {
    pub n: usize,
    pub p: usize,
    pub agents: Vec<AgentEntry>,
    pub ground_truth: Option<Vec<f64>>,
    pub reference: Option<ReferenceSolution>,
    pub spec: Option<ProblemSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEntry {
    pub rows: usize,
    pub matrix_file: String,
    pub y_file: String,
    pub lipschitz: f64,
    pub strong_convexity: f64,
    pub prox: ProxTerm,
}

pub const PROBLEM_MANIFEST: &str = "problem.json";

fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..m.nrows() {
        wtr.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

fn read_matrix_csv(path: &Path, cols: usize) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(Error::Dimension {
                expected: format!("{cols} columns"),
                got: format!("{} in {}", rec.len(), path.display()),
            });
        }
        for field in rec.iter() {
            data.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?,
            );
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// Writes `problem.json` plus one matrix CSV and one measurement CSV per agent.
pub fn write_problem_bundle(prob: &ProblemInstance, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut agents = Vec::with_capacity(prob.n());
    for (i, (s, r)) in prob.smooth.iter().zip(&prob.nonsmooth).enumerate() {
        let matrix_file = format!("agent_{i:03}_matrix.csv");
        let y_file = format!("agent_{i:03}_y.csv");
        write_matrix_csv(&dir.join(&matrix_file), s.matrix())?;
        write_matrix_csv(&dir.join(&y_file), &DMatrix::from_column_slice(s.y().len(), 1, s.y().as_slice()))?;
        agents.push(AgentEntry {
            rows: s.matrix().nrows(),
            matrix_file,
            y_file,
            lipschitz: s.lipschitz(),
            strong_convexity: s.strong_convexity(),
            prox: *r,
        });
    }
    let manifest = ProblemManifest {
        n: prob.n(),
        p: prob.p(),
        agents,
        ground_truth: prob.ground_truth.as_ref().map(|v| v.as_slice().to_vec()),
        reference: prob.reference.clone(),
        spec: prob.spec.clone(),
    };
    fs::write(dir.join(PROBLEM_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_problem_bundle(dir: &Path) -> Result<ProblemInstance> {
    let manifest: ProblemManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(PROBLEM_MANIFEST))?)?;
    let mut smooth = Vec::with_capacity(manifest.n);
    let mut nonsmooth = Vec::with_capacity(manifest.n);
    for a in &manifest.agents {
        let m = read_matrix_csv(&dir.join(&a.matrix_file), manifest.p)?;
        let y = read_matrix_csv(&dir.join(&a.y_file), 1)?;
        let mut term = least_squares_term(m, y.column(0).into_owned())?;
        // Keep the recorded constants so a reloaded instance is identical.
        term.lipschitz = a.lipschitz;
        term.strong_convexity = a.strong_convexity;
        smooth.push(term);
        nonsmooth.push(a.prox);
    }
    let mut prob = ProblemInstance::new(smooth, nonsmooth)?;
    prob.ground_truth = manifest.ground_truth.map(DVector::from_vec);
    prob.reference = manifest.reference;
    prob.spec = manifest.spec;
    Ok(prob)
}
