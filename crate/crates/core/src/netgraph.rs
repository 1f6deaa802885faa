//! Communication graphs and the mixing matrices defined on them.
//!
//! A [`MixingMatrix`] is a symmetric `n × n` weight matrix that respects its
//! [`Graph`]: off-diagonal weights vanish on non-edges, rows sum to one, the
//! eigenvalue 1 is simple and every eigenvalue lies in `(-1, 1]`. Builders in
//! this module satisfy these by construction; [`validate_mixing`] checks them
//! numerically for arbitrary input.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{matrix_power, sym_eigenvalues};
use crate::{Error, Result};

/// Resample budget for Erdős–Rényi graphs that come out disconnected.
pub const ER_RETRY_BUDGET: usize = 1000;

/// Undirected, simple, connected graph on nodes `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    n: usize,
    /// Edges with `i < j`, sorted.
    edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Builds a graph, rejecting self-loops, duplicates, out-of-range nodes and
    /// disconnected edge sets.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("graph needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Argument(format!(
                    "edge ({}, {}) references a node outside 1..={n}",
                    a + 1,
                    b + 1
                )));
            }
            if a == b {
                return Err(Error::Argument(format!("self-loop at node {}", a + 1)));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(Error::Argument(format!(
                    "duplicate edge ({}, {})",
                    a + 1,
                    b + 1
                )));
            }
        }
        let g = Graph {
            n,
            edges: set.into_iter().collect(),
        };
        if !g.is_connected() {
            return Err(Error::Argument("graph is not connected".into()));
        }
        Ok(g)
    }

    pub fn complete(n: usize) -> Result<Self> {
        let edges: Vec<_> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect();
        Graph::new(n, &edges)
    }

    pub fn ring(n: usize) -> Result<Self> {
        let edges: Vec<_> = match n {
            0 | 1 => Vec::new(),
            2 => vec![(0, 1)],
            _ => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        };
        Graph::new(n, &edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.binary_search(&(i.min(j), i.max(j))).is_ok()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Combinatorial Laplacian `D − A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.n, self.n);
        for &(a, b) in &self.edges {
            l[(a, b)] -= 1.0;
            l[(b, a)] -= 1.0;
            l[(a, a)] += 1.0;
            l[(b, b)] += 1.0;
        }
        l
    }

    pub fn is_connected(&self) -> bool {
        connected(self.n, &self.edges)
    }
}

fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

/// Random-graph families offered by [`generate_graph`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphModel {
    Ring,
    Complete,
    ErdosRenyi { prob: f64 },
}

/// Generates a connected graph. Erdős–Rényi draws are resampled until
/// connected, up to [`ER_RETRY_BUDGET`] attempts; output is fixed by `seed`.
pub fn generate_graph(n: usize, model: GraphModel, seed: u64) -> Result<Graph> {
    if n == 0 {
        return Err(Error::Argument("n must be at least 1".into()));
    }
    match model {
        GraphModel::Ring => Graph::ring(n),
        GraphModel::Complete => Graph::complete(n),
        GraphModel::ErdosRenyi { prob } => {
            if !(prob > 0.0 && prob <= 1.0) {
                return Err(Error::Argument(format!(
                    "edge probability must lie in (0, 1], got {prob}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..ER_RETRY_BUDGET {
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in (i + 1)..n {
                        if rng.random::<f64>() < prob {
                            edges.push((i, j));
                        }
                    }
                }
                if connected(n, &edges) {
                    return Graph::new(n, &edges);
                }
            }
            Err(Error::GraphSampling {
                attempts: ER_RETRY_BUDGET,
            })
        }
    }
}

/// How a mixing matrix was produced. Recorded in every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingConstruction {
    Metropolis,
    Laplacian { tau: f64 },
    Explicit,
    Power { base: Box<MixingConstruction>, t: u32 },
}

/// Symmetric weight matrix over a graph, with its spectrum cached.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    w: DMatrix<f64>,
    spectrum: DVector<f64>,
    graph: Graph,
    construction: MixingConstruction,
}

impl MixingMatrix {
    /// Wraps an arbitrary matrix. No assumption is checked here; use
    /// [`validate_mixing`] for that.
    pub fn new(graph: Graph, w: DMatrix<f64>) -> Result<Self> {
        Self::with_construction(graph, w, MixingConstruction::Explicit)
    }

    fn with_construction(
        graph: Graph,
        w: DMatrix<f64>,
        construction: MixingConstruction,
    ) -> Result<Self> {
        if w.nrows() != graph.n() || w.ncols() != graph.n() {
            return Err(Error::Dimension {
                expected: format!("{0}x{0}", graph.n()),
                got: format!("{}x{}", w.nrows(), w.ncols()),
            });
        }
        let spectrum = sym_eigenvalues(&w)?;
        Ok(MixingMatrix {
            w,
            spectrum,
            graph,
            construction,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Eigenvalues, largest first.
    pub fn spectrum(&self) -> &DVector<f64> {
        &self.spectrum
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn construction(&self) -> &MixingConstruction {
        &self.construction
    }

    /// `I − W`.
    pub fn laplacian_like(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n(), self.n()) - &self.w
    }

    /// Powers densify `W`, so the sparsity check is waived for them.
    pub fn is_power(&self) -> bool {
        matches!(self.construction, MixingConstruction::Power { t, .. } if t > 1)
    }

    pub fn to_document(&self, report: Option<ValidationReport>) -> GraphDocument {
        GraphDocument {
            n: self.n(),
            edges: self.graph.edges.iter().map(|&(a, b)| [a, b]).collect(),
            weights: Some(
                (0..self.n())
                    .flat_map(|i| (0..self.n()).map(move |j| (i, j)))
                    .map(|(i, j)| self.w[(i, j)])
                    .collect(),
            ),
            construction: Some(self.construction.clone()),
            tolerance_report: report,
        }
    }
}

/// Metropolis–Hastings weights `w_ij = 1 / (1 + max(deg_i, deg_j))` on edges,
/// with the diagonal absorbing the remainder of each row.
pub fn metropolis_weights(g: &Graph) -> Result<MixingMatrix> {
    let n = g.n();
    let deg = g.degrees();
    let mut w = DMatrix::zeros(n, n);
    for &(a, b) in g.edges() {
        let v = 1.0 / (1.0 + deg[a].max(deg[b]) as f64);
        w[(a, b)] = v;
        w[(b, a)] = v;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    MixingMatrix::with_construction(g.clone(), w, MixingConstruction::Metropolis)
}

/// `W = I − τ·L` for the graph Laplacian `L`.
///
/// `tau = None` selects `1/λ_1(L)`. Any `τ` must lie in `(0, 2/λ_1(L))`.
pub fn laplacian_weights(g: &Graph, tau: Option<f64>) -> Result<MixingMatrix> {
    let lap = g.laplacian();
    let lmax = sym_eigenvalues(&lap)?
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max);
    let bound = if lmax > 0.0 { 2.0 / lmax } else { f64::INFINITY };
    let tau = match tau {
        Some(t) => t,
        None if lmax > 0.0 => 1.0 / lmax,
        None => 1.0,
    };
    if !(tau > 0.0 && tau < bound) {
        return Err(Error::Argument(format!(
            "tau = {tau} outside (0, 2/lambda_1(L)) = (0, {bound})"
        )));
    }
    let n = g.n();
    let w = DMatrix::identity(n, n) - lap * tau;
    MixingMatrix::with_construction(g.clone(), w, MixingConstruction::Laplacian { tau })
}

/// Returns `W^t`. The result keeps the base graph; its sparsity check is
/// waived in [`validate_mixing`].
pub fn consensus_power(w: &MixingMatrix, t: u32) -> Result<MixingMatrix> {
    if t < 1 {
        return Err(Error::Argument("consensus power t must be >= 1".into()));
    }
    if t == 1 {
        return Ok(w.clone());
    }
    let wt = matrix_power(&w.w, t);
    MixingMatrix::with_construction(
        w.graph.clone(),
        wt,
        MixingConstruction::Power {
            base: Box::new(w.construction.clone()),
            t,
        },
    )
}

/// Tolerances used by [`validate_mixing`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationOptions {
    pub symmetry_tol: f64,
    pub row_sum_tol: f64,
    pub sparsity_tol: f64,
    /// Margin around the eigenvalues ±1.
    pub eigen_tol: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            symmetry_tol: 1e-12,
            row_sum_tol: 1e-12,
            sparsity_tol: 0.0,
            eigen_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingProperty {
    Decentralized,
    Symmetry,
    NullSpace,
    Spectral,
}

impl MixingProperty {
    pub fn label(self) -> &'static str {
        match self {
            MixingProperty::Decentralized => "decentralized property",
            MixingProperty::Symmetry => "symmetry",
            MixingProperty::NullSpace => "null space property",
            MixingProperty::Spectral => "spectral property",
        }
    }
}

/// One line of a [`ValidationReport`]. `violation` is the measured quantity
/// the rule is applied to; `detail` states the rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub property: MixingProperty,
    pub passed: bool,
    pub waived: bool,
    pub violation: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<PropertyCheck>,
    pub options: ValidationOptions,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || c.waived)
    }

    pub fn check(&self, property: MixingProperty) -> &PropertyCheck {
        self.checks
            .iter()
            .find(|c| c.property == property)
            .expect("every report carries all four checks")
    }
}

pub fn validate_mixing(w: &MixingMatrix) -> ValidationReport {
    validate_mixing_with(w, ValidationOptions::default())
}

pub fn validate_mixing_with(w: &MixingMatrix, opts: ValidationOptions) -> ValidationReport {
    let n = w.n();
    let m = &w.w;
    let mut sparsity = 0.0_f64;
    let mut asym = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            if i != j && !w.graph.has_edge(i, j) {
                sparsity = sparsity.max(m[(i, j)].abs());
            }
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    let row_err = (0..n)
        .map(|i| (m.row(i).sum() - 1.0).abs())
        .fold(0.0_f64, f64::max);
    let spec = &w.spectrum;
    let lambda1 = spec[0];
    let lambda2 = if n >= 2 { spec[1] } else { f64::NEG_INFINITY };
    let lambda_n = spec[n - 1];

    let waived = w.is_power();
    let decentralized = PropertyCheck {
        property: MixingProperty::Decentralized,
        passed: sparsity <= opts.sparsity_tol,
        waived,
        violation: sparsity,
        tolerance: opts.sparsity_tol,
        detail: if waived {
            "max |w_ij| over non-edges; waived for consensus powers".into()
        } else {
            "max |w_ij| over non-edges".into()
        },
    };
    let symmetry = PropertyCheck {
        property: MixingProperty::Symmetry,
        passed: asym <= opts.symmetry_tol,
        waived: false,
        violation: asym,
        tolerance: opts.symmetry_tol,
        detail: "max |w_ij - w_ji|".into(),
    };
    // Null(I − W) = span(1): rows sum to one and 1 is a simple eigenvalue.
    let simple_one = (lambda1 - 1.0).abs() <= opts.eigen_tol && lambda2 < 1.0 - opts.eigen_tol;
    let null_space = PropertyCheck {
        property: MixingProperty::NullSpace,
        passed: row_err <= opts.row_sum_tol && simple_one,
        waived: false,
        violation: row_err.max((lambda2 - (1.0 - opts.eigen_tol)).max(0.0)),
        tolerance: opts.row_sum_tol,
        detail: format!(
            "row-sum error {row_err:e} (tol {:e}); lambda_1 = {lambda1}, lambda_2 = {lambda2} \
             (need lambda_1 = 1 and lambda_2 < 1 - {:e})",
            opts.row_sum_tol, opts.eigen_tol
        ),
    };
    // 2I ⪰ W + I ≻ 0.
    let spectral_violation = (lambda1 - 1.0 - opts.eigen_tol)
        .max(-1.0 + opts.eigen_tol - lambda_n)
        .max(0.0);
    let spectral = PropertyCheck {
        property: MixingProperty::Spectral,
        passed: lambda1 <= 1.0 + opts.eigen_tol && lambda_n > -1.0 + opts.eigen_tol,
        waived: false,
        violation: spectral_violation,
        tolerance: opts.eigen_tol,
        detail: format!("eigenvalues in [{lambda_n}, {lambda1}], need (-1, 1]"),
    };
    ValidationReport {
        checks: vec![decentralized, symmetry, null_space, spectral],
        options: opts,
    }
}

/// Second-largest / smallest eigenvalues and the network condition number.
///
/// For `n = 1` there is no second eigenvalue: `lambda2 = lambda_n = 0`,
/// `gap = 0` and `network_condition = 1`, with `degenerate` set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub lambda2: f64,
    pub lambda_n: f64,
    pub gap: f64,
    pub network_condition: f64,
    pub degenerate: bool,
}

pub fn spectral_summary(w: &MixingMatrix) -> SpectralSummary {
    let n = w.n();
    if n == 1 {
        return SpectralSummary {
            lambda2: 0.0,
            lambda_n: 0.0,
            gap: 0.0,
            network_condition: 1.0,
            degenerate: true,
        };
    }
    let lambda2 = w.spectrum[1];
    let lambda_n = w.spectrum[n - 1];
    SpectralSummary {
        lambda2,
        lambda_n,
        gap: 1.0 - lambda2,
        network_condition: (1.0 - lambda_n) / (1.0 - lambda2),
        degenerate: false,
    }
}

/// Suggested number of consensus rounds per iteration,
/// `t = min([log_{λ_2}(1 − 1/κ)], t_max)` when `0 < 1 − 1/κ < λ_2`, else 1.
///
/// `[·]` rounds to the nearest integer. When `λ_2 ≤ 1 − 1/κ` (including
/// `λ_2 ≤ 0`) one round already mixes faster than the function branch.
pub fn suggest_consensus_steps(summary: &SpectralSummary, kappa: f64, t_max: u32) -> Result<u32> {
    if !(kappa >= 1.0) {
        return Err(Error::Argument(format!("kappa must be >= 1, got {kappa}")));
    }
    if t_max < 1 {
        return Err(Error::Argument("t_max must be >= 1".into()));
    }
    let lambda2 = summary.lambda2;
    if !(lambda2 < 1.0) {
        return Err(Error::Argument(format!(
            "lambda_2 must be < 1, got {lambda2}"
        )));
    }
    let target = 1.0 - 1.0 / kappa;
    if target <= 0.0 || lambda2 <= 0.0 || target >= lambda2 {
        return Ok(1);
    }
    let t = (target.ln() / lambda2.ln()).round();
    Ok((t.max(1.0) as u32).min(t_max))
}

/// File form of a graph and (optionally) its mixing matrix. Edge indices are
/// 0-based; weights are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub construction: Option<MixingConstruction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance_report: Option<ValidationReport>,
}

impl GraphDocument {
    pub fn from_graph(g: &Graph) -> Self {
        GraphDocument {
            n: g.n(),
            edges: g.edges().iter().map(|&(a, b)| [a, b]).collect(),
            weights: None,
            construction: None,
            tolerance_report: None,
        }
    }

    pub fn graph(&self) -> Result<Graph> {
        let edges: Vec<_> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        Graph::new(self.n, &edges)
    }

    /// Rebuilds the stored mixing matrix, if weights are present.
    pub fn mixing(&self) -> Result<Option<MixingMatrix>> {
        let Some(weights) = &self.weights else {
            return Ok(None);
        };
        if weights.len() != self.n * self.n {
            return Err(Error::Dimension {
                expected: format!("{} weights", self.n * self.n),
                got: format!("{}", weights.len()),
            });
        }
        let w = DMatrix::from_row_slice(self.n, self.n, weights);
        let construction = self
            .construction
            .clone()
            .unwrap_or(MixingConstruction::Explicit);
        MixingMatrix::with_construction(self.graph()?, w, construction).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn complete_and_ring_edges() {
        let k3 = generate_graph(3, GraphModel::Complete, 0).unwrap();
        assert_eq!(k3.edges(), &[(0, 1), (0, 2), (1, 2)]);
        let ring = generate_graph(4, GraphModel::Ring, 0).unwrap();
        assert_eq!(ring.edges(), &[(0, 1), (0, 3), (1, 2), (2, 3)]);
    }

    #[test]
    fn graph_rejects_bad_edges() {
        assert!(Graph::new(3, &[(0, 0), (1, 2)]).is_err());
        assert!(Graph::new(3, &[(0, 1), (1, 0), (1, 2)]).is_err());
        assert!(Graph::new(3, &[(0, 1)]).is_err());
        assert!(Graph::new(0, &[]).is_err());
        assert!(Graph::new(1, &[]).is_ok());
    }

    #[test]
    fn erdos_renyi_argument_checks() {
        assert!(matches!(
            generate_graph(5, GraphModel::ErdosRenyi { prob: 0.0 }, 1),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            generate_graph(5, GraphModel::ErdosRenyi { prob: 1.5 }, 1),
            Err(Error::Argument(_))
        ));
        // Essentially never connected: 60 nodes with p = 1e-4.
        assert!(matches!(
            generate_graph(60, GraphModel::ErdosRenyi { prob: 1e-4 }, 3),
            Err(Error::GraphSampling { .. })
        ));
    }

    #[test]
    fn erdos_renyi_is_seed_deterministic() {
        let a = generate_graph(40, GraphModel::ErdosRenyi { prob: 0.12 }, 7).unwrap();
        let b = generate_graph(40, GraphModel::ErdosRenyi { prob: 0.12 }, 7).unwrap();
        let c = generate_graph(40, GraphModel::ErdosRenyi { prob: 0.12 }, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn metropolis_single_agent() {
        let g = Graph::new(1, &[]).unwrap();
        let w = metropolis_weights(&g).unwrap();
        assert_eq!(w.matrix()[(0, 0)], 1.0);
        assert!(validate_mixing(&w).all_passed());
    }

    #[test]
    fn metropolis_k3_is_one_third() {
        let w = metropolis_weights(&Graph::complete(3).unwrap()).unwrap();
        for v in w.matrix().iter() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
        let s = w.spectrum();
        assert!(close(s[0], 1.0, 1e-12) && close(s[1], 0.0, 1e-12) && close(s[2], 0.0, 1e-12));
        assert!(validate_mixing(&w).all_passed());
    }

    #[test]
    fn metropolis_path2() {
        let w = metropolis_weights(&Graph::complete(2).unwrap()).unwrap();
        assert_eq!(w.matrix().as_slice(), &[0.5, 0.5, 0.5, 0.5]);
        let s = w.spectrum();
        assert!(close(s[0], 1.0, 1e-14) && close(s[1], 0.0, 1e-14));
    }

    #[test]
    fn laplacian_weights_examples() {
        let k2 = Graph::complete(2).unwrap();
        let w = laplacian_weights(&k2, Some(0.5)).unwrap();
        assert!((w.matrix() - DMatrix::from_element(2, 2, 0.5)).norm() < 1e-15);
        let k3 = Graph::complete(3).unwrap();
        let w = laplacian_weights(&k3, Some(1.0 / 3.0)).unwrap();
        assert!((w.matrix() - DMatrix::from_element(3, 3, 1.0 / 3.0)).norm() < 1e-15);
        assert!(matches!(laplacian_weights(&k3, Some(0.0)), Err(Error::Argument(_))));
        let err = laplacian_weights(&k3, Some(0.7)).unwrap_err();
        assert!(err.to_string().contains("2/lambda_1(L)"));
    }

    #[test]
    fn validation_counterexamples() {
        let g = Graph::complete(2).unwrap();
        let ident = MixingMatrix::new(g.clone(), DMatrix::identity(2, 2)).unwrap();
        let rep = validate_mixing(&ident);
        assert!(!rep.check(MixingProperty::NullSpace).passed);
        assert!(rep.check(MixingProperty::Spectral).passed);

        let perm = MixingMatrix::new(g, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let rep = validate_mixing(&perm);
        assert!(!rep.check(MixingProperty::Spectral).passed);
        assert!(rep.check(MixingProperty::NullSpace).passed);
        assert!(rep.check(MixingProperty::Symmetry).passed);
    }

    #[test]
    fn validation_flags_sparsity_and_asymmetry() {
        let path = Graph::new(3, &[(0, 1), (1, 2)]).unwrap();
        let w = DMatrix::from_row_slice(3, 3, &[0.5, 0.25, 0.25, 0.25, 0.5, 0.25, 0.25, 0.25, 0.5]);
        let m = MixingMatrix::new(path.clone(), w).unwrap();
        assert!(!validate_mixing(&m).check(MixingProperty::Decentralized).passed);

        let w = DMatrix::from_row_slice(3, 3, &[0.6, 0.4, 0.0, 0.3, 0.4, 0.3, 0.0, 0.3, 0.7]);
        let m = MixingMatrix::new(path, w).unwrap();
        assert!(!validate_mixing(&m).check(MixingProperty::Symmetry).passed);
    }

    #[test]
    fn spectral_summary_small_cases() {
        let k3 = metropolis_weights(&Graph::complete(3).unwrap()).unwrap();
        let s = spectral_summary(&k3);
        assert!(close(s.lambda2, 0.0, 1e-12) && close(s.lambda_n, 0.0, 1e-12));
        assert!(close(s.network_condition, 1.0, 1e-12));
        let k2 = metropolis_weights(&Graph::complete(2).unwrap()).unwrap();
        let s = spectral_summary(&k2);
        assert!(close(s.lambda2, 0.0, 1e-14) && close(s.lambda_n, 0.0, 1e-14));
        let one = metropolis_weights(&Graph::new(1, &[]).unwrap()).unwrap();
        let s = spectral_summary(&one);
        assert!(s.degenerate);
        assert_eq!(s.network_condition, 1.0);
    }

    #[test]
    fn consensus_power_examples() {
        let g = generate_graph(6, GraphModel::Ring, 0).unwrap();
        let w = metropolis_weights(&g).unwrap();
        assert!(matches!(consensus_power(&w, 0), Err(Error::Argument(_))));
        assert_eq!(consensus_power(&w, 1).unwrap().matrix(), w.matrix());

        let k3 = metropolis_weights(&Graph::complete(3).unwrap()).unwrap();
        let sq = consensus_power(&k3, 2).unwrap();
        assert!((sq.matrix() - DMatrix::from_element(3, 3, 1.0 / 3.0)).norm() < 1e-15);

        let w2 = consensus_power(&w, 2).unwrap();
        // Squares of a descending list need not stay sorted.
        let mut squared: Vec<f64> = w.spectrum().iter().map(|l| l * l).collect();
        squared.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (a, b) in w2.spectrum().iter().zip(squared.iter()) {
            assert!(close(*a, *b, 1e-10));
        }
        let rep = validate_mixing(&w2);
        assert!(rep.check(MixingProperty::Decentralized).waived);
        assert!(rep.all_passed());
    }

    #[test]
    fn consensus_step_suggestions() {
        let s = |lambda2: f64| SpectralSummary {
            lambda2,
            lambda_n: -0.1,
            gap: 1.0 - lambda2,
            network_condition: 1.1 / (1.0 - lambda2),
            degenerate: false,
        };
        assert_eq!(suggest_consensus_steps(&s(0.9), 1.0, 10).unwrap(), 1);
        assert_eq!(suggest_consensus_steps(&s(0.3), 2.0, 10).unwrap(), 1);
        // log_{0.9}(0.5) = 6.579 -> 7
        assert_eq!(suggest_consensus_steps(&s(0.9), 2.0, 100).unwrap(), 7);
        assert_eq!(suggest_consensus_steps(&s(0.9), 2.0, 3).unwrap(), 3);
        assert_eq!(suggest_consensus_steps(&s(0.0), 2.0, 3).unwrap(), 1);
        assert!(suggest_consensus_steps(&s(0.9), 0.5, 3).is_err());
        assert!(suggest_consensus_steps(&s(0.9), 2.0, 0).is_err());
    }

    #[test]
    fn document_round_trip() {
        let g = generate_graph(8, GraphModel::ErdosRenyi { prob: 0.5 }, 2).unwrap();
        let w = metropolis_weights(&g).unwrap();
        let doc = w.to_document(Some(validate_mixing(&w)));
        let json = serde_json::to_string(&doc).unwrap();
        let back: GraphDocument = serde_json::from_str(&json).unwrap();
        let w2 = back.mixing().unwrap().unwrap();
        assert_eq!(w2.matrix(), w.matrix());
        assert_eq!(back.graph().unwrap(), g);
    }
}
