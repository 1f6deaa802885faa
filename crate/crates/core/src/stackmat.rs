//! Stacked `n × p` iterates and the weighted geometry they live in.
//!
//! Row `i` of a [`StackedMatrix`] is agent `i`'s copy of the decision
//! vector. Inner products are `⟨x, y⟩_Q = tr(xᵀ Q y)` for symmetric `n × n`
//! weights `Q`; the [`RangeNorm`] is the quadratic form of
//! `M = c⁻¹ (I − W)† − Λ`, a norm only on `range(I − W)`, i.e. on stacked
//! matrices whose columns sum to zero.

use std::ops::{Deref, DerefMut};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{diag_sandwich, psd_pseudo_inverse, sym_eigenvalues};
use crate::netgraph::MixingMatrix;
use crate::{Error, Result};

/// Relative tolerance for "v lies in range(I − W)".
pub const RANGE_TOL: f64 = 1e-8;

/// One row per agent, one column per decision coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedMatrix(DMatrix<f64>);

impl StackedMatrix {
    pub fn zeros(n: usize, p: usize) -> Self {
        StackedMatrix(DMatrix::zeros(n, p))
    }

    /// Every row equal to `row`.
    pub fn consensual(n: usize, row: &DVector<f64>) -> Self {
        StackedMatrix(DMatrix::from_fn(n, row.len(), |_, j| row[j]))
    }

    /// Wraps a matrix after checking that every entry is finite.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(StackedMatrix(data))
        } else {
            Err(Error::Numerical("stacked matrix has non-finite entries".into()))
        }
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn p(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Column means, i.e. the `span(1)` component per coordinate.
    pub fn column_mean(&self) -> DVector<f64> {
        let n = self.n().max(1) as f64;
        DVector::from_fn(self.p(), |j, _| self.0.column(j).sum() / n)
    }

    /// Largest absolute column sum `max_j |1ᵀ v_j|`.
    pub fn max_abs_column_sum(&self) -> f64 {
        (0..self.p())
            .map(|j| self.0.column(j).sum().abs())
            .fold(0.0, f64::max)
    }
}

impl Deref for StackedMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl DerefMut for StackedMatrix {
    fn deref_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.0
    }
}

impl From<DMatrix<f64>> for StackedMatrix {
    fn from(m: DMatrix<f64>) -> Self {
        StackedMatrix(m)
    }
}

/// Positive diagonal weight such as `Λ = Diag(α_i)`, `L` or `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalWeight(Vec<f64>);

impl DiagonalWeight {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Argument("diagonal weight needs at least one entry".into()));
        }
        if let Some(i) = entries.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Argument(format!(
                "diagonal weight entry {} must be positive and finite, got {}",
                i + 1,
                entries[i]
            )));
        }
        Ok(DiagonalWeight(entries))
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    pub fn entries(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.0.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn is_uniform(&self) -> bool {
        self.0.iter().all(|&v| v == self.0[0])
    }

    pub fn inverse(&self) -> Self {
        DiagonalWeight(self.0.iter().map(|v| 1.0 / v).collect())
    }

    pub fn sqrt(&self) -> Self {
        DiagonalWeight(self.0.iter().map(|v| v.sqrt()).collect())
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.0))
    }

    /// `D · v`, scaling row `i` by `d_i`.
    pub fn scale_rows(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = v.clone();
        for (i, &d) in self.0.iter().enumerate() {
            out.row_mut(i).scale_mut(d);
        }
        out
    }

    /// `‖v‖²_D = Σ_i d_i ‖v_i‖²`.
    pub fn norm_sq(&self, v: &DMatrix<f64>) -> f64 {
        self.0
            .iter()
            .enumerate()
            .map(|(i, &d)| d * v.row(i).norm_squared())
            .sum()
    }
}

fn check_same_shape(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Dimension {
            expected: format!("{}x{}", x.nrows(), x.ncols()),
            got: format!("{}x{}", y.nrows(), y.ncols()),
        });
    }
    Ok(())
}

/// `⟨x, y⟩_Q = tr(xᵀ Q y)`.
pub fn weighted_inner(x: &StackedMatrix, y: &StackedMatrix, q: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(x, y)?;
    if q.nrows() != x.n() || q.ncols() != x.n() {
        return Err(Error::Dimension {
            expected: format!("{0}x{0} weight", x.n()),
            got: format!("{}x{}", q.nrows(), q.ncols()),
        });
    }
    Ok(x.dot(&(q * &y.0)))
}

/// Removes the `span(1)` component: subtracts each column's mean.
pub fn range_project(v: &StackedMatrix) -> StackedMatrix {
    let mean = v.column_mean();
    let mut out = v.0.clone();
    for mut row in out.row_iter_mut() {
        row -= mean.transpose();
    }
    StackedMatrix(out)
}

/// Largest admissible coupling constant, `1/λ_max(Λ^{1/2}(I − W)Λ^{1/2})`.
///
/// Any `c` in `(0, c_max)` keeps `I − cΛ^{1/2}(I − W)Λ^{1/2} ≻ 0`. Returns
/// `+∞` when `I − W = 0` (single agent).
pub fn max_admissible_c(w: &MixingMatrix, lambda: &DiagonalWeight) -> Result<f64> {
    if lambda.len() != w.n() {
        return Err(Error::Dimension {
            expected: format!("{} step sizes", w.n()),
            got: lambda.len().to_string(),
        });
    }
    let sandwich = diag_sandwich(lambda.sqrt().entries(), &w.laplacian_like());
    let lmax = sym_eigenvalues(&sandwich)?[0];
    if lmax <= 1e-14 {
        Ok(f64::INFINITY)
    } else {
        Ok(1.0 / lmax)
    }
}

/// Quadratic forms on `range(I − W)` for a fixed `(W, c, Λ)`.
#[derive(Debug, Clone)]
pub struct RangeNorm {
    c: f64,
    lambda: DiagonalWeight,
    pseudo_inverse: DMatrix<f64>,
    m: DMatrix<f64>,
    m_plus_lambda: DMatrix<f64>,
    /// `c` sits on the admissibility boundary, so `M` is only semidefinite.
    boundary: bool,
}

impl RangeNorm {
    /// Builds `M = c⁻¹(I − W)† − Λ`. Rejects `c` beyond the admissible bound;
    /// `c` equal to the bound (within 1e-12 relative) is accepted and flagged.
    pub fn new(w: &MixingMatrix, c: f64, lambda: &DiagonalWeight) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Argument(format!("c must be positive and finite, got {c}")));
        }
        let c_max = max_admissible_c(w, lambda)?;
        if c > c_max * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "c = {c} exceeds the admissible bound {c_max}; M is not positive on range(I - W)"
            )));
        }
        let (pinv, _) = psd_pseudo_inverse(&w.laplacian_like())?;
        let m_plus_lambda = &pinv / c;
        let m = &m_plus_lambda - lambda.to_matrix();
        Ok(RangeNorm {
            c,
            lambda: lambda.clone(),
            pseudo_inverse: pinv,
            m,
            m_plus_lambda,
            boundary: c >= c_max * (1.0 - 1e-12),
        })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn lambda(&self) -> &DiagonalWeight {
        &self.lambda
    }

    /// `(I − W)†`.
    pub fn pseudo_inverse(&self) -> &DMatrix<f64> {
        &self.pseudo_inverse
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn m_plus_lambda(&self) -> &DMatrix<f64> {
        &self.m_plus_lambda
    }

    pub fn on_boundary(&self) -> bool {
        self.boundary
    }

    fn project_checked(&self, v: &StackedMatrix) -> Result<StackedMatrix> {
        let proj = range_project(v);
        let norm = v.norm();
        let off = (&v.0 - &proj.0).norm();
        if off > RANGE_TOL * norm {
            return Err(Error::Domain(format!(
                "matrix is not in range(I - W): consensual component {off:e} vs norm {norm:e}"
            )));
        }
        Ok(proj)
    }

    fn form(&self, q: &DMatrix<f64>, v: &StackedMatrix) -> Result<f64> {
        if v.n() != q.nrows() {
            return Err(Error::Dimension {
                expected: format!("{} rows", q.nrows()),
                got: v.n().to_string(),
            });
        }
        if v.norm() == 0.0 {
            return Ok(0.0);
        }
        let proj = self.project_checked(v)?;
        Ok(proj.dot(&(q * &proj.0)))
    }

    /// `‖a − b‖²_Q` with `a` and `b` each checked against their own norms, so
    /// round-off in a tiny difference is not mistaken for leaving the range.
    fn form_between(&self, q: &DMatrix<f64>, a: &StackedMatrix, b: &StackedMatrix) -> Result<f64> {
        check_same_shape(a, b)?;
        if a.n() != q.nrows() {
            return Err(Error::Dimension {
                expected: format!("{} rows", q.nrows()),
                got: a.n().to_string(),
            });
        }
        self.project_checked(a)?;
        self.project_checked(b)?;
        let diff = range_project(&StackedMatrix(&a.0 - &b.0));
        Ok(diff.dot(&(q * &diff.0)))
    }

    /// `‖a − b‖²_M` for `a, b ∈ range(I − W)`.
    pub fn m_norm_sq_between(&self, a: &StackedMatrix, b: &StackedMatrix) -> Result<f64> {
        self.form_between(&self.m, a, b)
    }

    /// `‖a − b‖²_{M+Λ}` for `a, b ∈ range(I − W)`.
    pub fn m_plus_lambda_norm_sq_between(&self, a: &StackedMatrix, b: &StackedMatrix) -> Result<f64> {
        self.form_between(&self.m_plus_lambda, a, b)
    }

    /// `‖v‖²_{(I−W)†}`.
    pub fn pinv_norm_sq(&self, v: &StackedMatrix) -> Result<f64> {
        self.form(&self.pseudo_inverse, v)
    }

    /// `‖v‖²_{M+Λ} = c⁻¹‖v‖²_{(I−W)†}`.
    pub fn m_plus_lambda_norm_sq(&self, v: &StackedMatrix) -> Result<f64> {
        self.form(&self.m_plus_lambda, v)
    }
}

/// `‖v‖²_M`; defined only for `v ∈ range(I − W)`.
pub fn m_norm_sq(v: &StackedMatrix, rn: &RangeNorm) -> Result<f64> {
    rn.form(&rn.m, v)
}
