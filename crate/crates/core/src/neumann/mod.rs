//! Analytic oracle for Laplacian-regularised label propagation.
//!
//! With `S̃ = S_in/|V_tr|` and `L̃ = L/|E|` the inner solution is
//! `Y = B⁻¹ S̃ Y_obs` for `B = S̃ + λ L̃`. Scaling by the top eigenvalue gives
//! the series `Y = Σ_r T_r`, `T_r = (I − B/μ_max)^r S̃ Y_obs / μ_max`, whose
//! terms vanish on nodes more than `r` hops from `V_tr`. Derivatives are taken
//! with respect to one symmetric edge weight `A_ij = A_ji` with `μ_max` held
//! fixed.

mod linalg;

pub use linalg::{symmetric_eigenvalues, Cholesky};

use crate::error::{Error, Result};
use crate::graph::SupportPattern;
use crate::inner::LabeledTargets;
use crate::parallel;
use crate::tensor::Tensor;

/// Off-diagonal tolerance of the Jacobi eigensolver, relative to `‖B‖_F`.
pub const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 60;
/// Slack allowed on the eigenvalue inequalities.
pub const SPECTRAL_SLACK: f64 = 1e-9;

/// `B = S̃_in + λ L̃` together with the quantities its bounds refer to.
#[derive(Clone, Debug)]
pub struct RegularizedSystem {
    pub b: Tensor,
    /// `S̃_in Y_obs`.
    pub rhs: Tensor,
    pub lambda: f64,
    pub num_edges: usize,
    pub train: Vec<usize>,
    /// `‖Y_obs‖∞` over labelled nodes.
    pub y_inf: f64,
    component: Vec<usize>,
    components: usize,
}

impl RegularizedSystem {
    /// Builds the system for a dense symmetric adjacency. `num_edges` is the
    /// number of optimisable unordered pairs used to normalise `L`.
    pub fn new(
        adjacency: &Tensor,
        num_edges: usize,
        targets: &LabeledTargets,
        train: &[usize],
        lambda: f64,
    ) -> Result<Self> {
        let n = targets.n();
        if adjacency.shape() != (n, n) {
            return Err(Error::dim("regularized_system", format!("adjacency {:?} for {n} nodes", adjacency.shape())));
        }
        if num_edges == 0 {
            return Err(Error::contract("regularized system on an edgeless graph"));
        }
        if !(lambda > 0.0) {
            return Err(Error::contract(format!("λ must be positive, got {lambda}")));
        }
        if train.is_empty() {
            return Err(Error::contract("V_tr is empty"));
        }
        let inv_tr = 1.0 / train.len() as f64;
        let scale = lambda / num_edges as f64;
        let mut b = adjacency.scale(-scale);
        for i in 0..n {
            let deg: f64 = adjacency.row(i).iter().sum();
            b.add_at(i, i, scale * deg);
        }
        let mut rhs = Tensor::zeros(n, targets.classes());
        for &u in train {
            if !targets.mask[u] {
                return Err(Error::contract(format!("training node {u} is unlabelled")));
            }
            b.add_at(u, u, inv_tr);
            for (r, y) in rhs.row_mut(u).iter_mut().zip(targets.y.row(u)) {
                *r = inv_tr * y;
            }
        }
        let y_inf =
            (0..n).filter(|&u| targets.mask[u]).flat_map(|u| targets.y.row(u)).fold(0.0f64, |m, y| m.max(y.abs()));
        let (component, components) = dense_components(adjacency);
        Ok(Self { b, rhs, lambda, num_edges, train: train.to_vec(), y_inf, component, components })
    }

    pub fn n(&self) -> usize {
        self.b.rows()
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn is_connected(&self) -> bool {
        self.components <= 1
    }

    /// `λ/|E|`, the factor multiplying `L` inside `B`.
    pub fn laplacian_scale(&self) -> f64 {
        self.lambda / self.num_edges as f64
    }
}

fn dense_components(a: &Tensor) -> (Vec<usize>, usize) {
    let n = a.rows();
    let mut label = vec![usize::MAX; n];
    let mut count = 0;
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        label[s] = count;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for (v, &w) in a.row(u).iter().enumerate() {
                if w != 0.0 && label[v] == usize::MAX {
                    label[v] = count;
                    stack.push(v);
                }
            }
        }
        count += 1;
    }
    (label, count)
}

/// `Y = B⁻¹ S̃_in Y_obs` by Cholesky; the graph must be connected.
pub fn closed_form_solve(sys: &RegularizedSystem) -> Result<Tensor> {
    if !sys.is_connected() {
        return Err(Error::Disconnected { components: sys.components });
    }
    Cholesky::factor(&sys.b)?.solve(&sys.rhs)
}

/// Per-component solution of a possibly disconnected system.
#[derive(Clone, Debug)]
pub struct ComponentSolution {
    pub y: Tensor,
    /// Components without a training node; their rows of `y` are zero.
    pub unanchored: Vec<usize>,
    pub component: Vec<usize>,
}

/// Solves each connected component independently. Components without a
/// `V_tr` node get `Y = 0` and are listed in `unanchored`.
pub fn closed_form_solve_components(sys: &RegularizedSystem) -> Result<ComponentSolution> {
    let n = sys.n();
    let c = sys.rhs.cols();
    let mut members = vec![Vec::new(); sys.components];
    for u in 0..n {
        members[sys.component[u]].push(u);
    }
    let mut anchored = vec![false; sys.components];
    for &u in &sys.train {
        anchored[sys.component[u]] = true;
    }
    let mut y = Tensor::zeros(n, c);
    let mut unanchored = Vec::new();
    for (comp, nodes) in members.iter().enumerate() {
        if !anchored[comp] {
            unanchored.push(comp);
            continue;
        }
        let m = nodes.len();
        let sub_b = Tensor::from_fn(m, m, |a, b| sys.b.get(nodes[a], nodes[b]));
        let sub_rhs = sys.rhs.select_rows(nodes);
        let sol = Cholesky::factor(&sub_b)?.solve(&sub_rhs)?;
        for (k, &u) in nodes.iter().enumerate() {
            y.row_mut(u).copy_from_slice(sol.row(k));
        }
    }
    Ok(ComponentSolution { y, unanchored, component: sys.component.clone() })
}

/// Extreme eigenvalues of `B` and the derived contraction factor.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralSummary {
    pub mu_min: f64,
    pub mu_max: f64,
    /// `μ_min / μ_max`.
    pub mu: f64,
    /// `1 − μ`.
    pub nu: f64,
    pub eigenvalues: Vec<f64>,
}

/// Eigenvalues of `B` by Jacobi rotations, without checking any bound.
pub fn spectral_summary(sys: &RegularizedSystem) -> Result<SpectralSummary> {
    let eigenvalues = symmetric_eigenvalues(&sys.b, JACOBI_TOL, JACOBI_MAX_SWEEPS)?;
    let mu_min = eigenvalues[0];
    let mu_max = *eigenvalues.last().expect("n >= 1");
    let mu = mu_min / mu_max;
    Ok(SpectralSummary { mu_min, mu_max, mu, nu: 1.0 - mu, eigenvalues })
}

/// Upper bound `1/|V_tr| + 2λ` on the spectrum of `B` for weights in `[0, 1]`.
pub fn spectrum_upper_bound(sys: &RegularizedSystem) -> f64 {
    1.0 / sys.train.len() as f64 + 2.0 * sys.lambda
}

/// [`spectral_summary`] on a connected graph, asserting
/// `0 < μ_min ≤ μ_max ≤ 1/|V_tr| + 2λ` up to [`SPECTRAL_SLACK`].
pub fn spectral_bounds(sys: &RegularizedSystem) -> Result<SpectralSummary> {
    if !sys.is_connected() {
        return Err(Error::Disconnected { components: sys.components });
    }
    let s = spectral_summary(sys)?;
    if !(s.mu_min > 0.0) {
        return Err(Error::Internal(format!("smallest eigenvalue {:e} is not positive", s.mu_min)));
    }
    let upper = spectrum_upper_bound(sys);
    if s.mu_max > upper + SPECTRAL_SLACK {
        return Err(Error::Internal(format!("largest eigenvalue {} exceeds {upper}", s.mu_max)));
    }
    Ok(s)
}

/// Terms `T_0..T_R` of the scaled Neumann expansion.
#[derive(Clone, Debug)]
pub struct NeumannSeries {
    pub terms: Vec<Tensor>,
    /// `I − B/μ_max`.
    pub contraction: Tensor,
    pub mu_max: f64,
    pub nu: f64,
    /// `‖T_R‖ ν/(1−ν)`, a bound on the norm of the omitted tail.
    pub tail_bound: f64,
    /// Whether `‖T_R‖ ≤ tol` was reached before `r_max`.
    pub converged: bool,
    pub tol: f64,
}

impl NeumannSeries {
    pub fn truncation(&self) -> usize {
        self.terms.len() - 1
    }

    pub fn sum(&self) -> Tensor {
        let mut s = Tensor::zeros(self.terms[0].rows(), self.terms[0].cols());
        for t in &self.terms {
            s.add_assign(t);
        }
        s
    }

    fn check_single_column(&self) -> Result<()> {
        if self.terms[0].cols() != 1 {
            return Err(Error::contract("the derivative oracle handles single-column labels only"));
        }
        Ok(())
    }
}

/// Default truncation `4·diameter + 50`.
pub fn default_r_max(support: &SupportPattern) -> usize {
    let diameter = (0..support.n())
        .filter_map(|s| {
            crate::graph::hop_distances(support, &[s]).ok().map(|d| d.into_iter().flatten().max().unwrap_or(0))
        })
        .max()
        .unwrap_or(0);
    4 * diameter + 50
}

/// Computes terms until `‖T_r‖_F ≤ tol` or `r = r_max`.
pub fn neumann_series(
    sys: &RegularizedSystem,
    spec: &SpectralSummary,
    r_max: usize,
    tol: f64,
) -> Result<NeumannSeries> {
    if !(spec.nu < 1.0 - 1e-12) || !(spec.mu_max > 0.0) {
        return Err(Error::Convergence(format!("contraction factor ν = {} is not below 1", spec.nu)));
    }
    let n = sys.n();
    let mut contraction = sys.b.scale(-1.0 / spec.mu_max);
    for i in 0..n {
        contraction.add_at(i, i, 1.0);
    }
    let mut terms = vec![sys.rhs.scale(1.0 / spec.mu_max)];
    let mut converged = terms[0].frobenius() <= tol;
    while !converged && terms.len() <= r_max {
        let next = contraction.matmul(terms.last().expect("nonempty"))?;
        converged = next.frobenius() <= tol;
        terms.push(next);
    }
    let last = terms.last().expect("nonempty").frobenius();
    Ok(NeumannSeries {
        terms,
        contraction,
        mu_max: spec.mu_max,
        nu: spec.nu,
        tail_bound: last * spec.nu / (1.0 - spec.nu),
        converged,
        tol,
    })
}

/// `∂(T_r)_u/∂A_ij` for every node `u` at once.
pub fn analytic_dtr_all(
    sys: &RegularizedSystem,
    series: &NeumannSeries,
    r: usize,
    i: usize,
    j: usize,
) -> Result<Vec<f64>> {
    series.check_single_column()?;
    let n = sys.n();
    if r > series.truncation() + 1 {
        return Err(Error::contract(format!("r = {r} beyond computed truncation {}", series.truncation())));
    }
    if i >= n || j >= n || i == j {
        return Err(Error::contract(format!("invalid edge ({i}, {j})")));
    }
    let coef = -sys.laplacian_scale() / series.mu_max;
    let mut out = vec![0.0; n];
    // v holds M^m (e_i − e_j); the h-th term pairs m = r − h with T_{h−1}.
    let mut v = Tensor::zeros(n, 1);
    v.set(i, 0, 1.0);
    v.set(j, 0, -1.0);
    for m in 0..r {
        let t = &series.terms[r - 1 - m];
        let dt = t.get(i, 0) - t.get(j, 0);
        if dt != 0.0 {
            for (o, x) in out.iter_mut().zip(v.data()) {
                *o += coef * x * dt;
            }
        }
        if m + 1 < r {
            v = series.contraction.matmul(&v)?;
        }
    }
    Ok(out)
}

/// `∂(T_r)_u/∂A_ij`.
pub fn analytic_dtr(
    sys: &RegularizedSystem,
    series: &NeumannSeries,
    r: usize,
    u: usize,
    i: usize,
    j: usize,
) -> Result<f64> {
    Ok(analytic_dtr_all(sys, series, r, i, j)?[u])
}

/// Bound `4λ y∞/(|E| μ_max² √|V_tr|) · (r−q−k) · ν^{r−1}`, zero when
/// `q + k ≥ r`.
pub fn series_derivative_bound(sys: &RegularizedSystem, spec: &SpectralSummary, r: usize, q: usize, k: usize) -> f64 {
    if q + k >= r {
        return 0.0;
    }
    4.0 * sys.lambda * sys.y_inf / (sys.num_edges as f64 * spec.mu_max * spec.mu_max * (sys.train.len() as f64).sqrt())
        * (r - q - k) as f64
        * spec.nu.powi(r as i32 - 1)
}

/// Per-edge hypergradients of `F_out = (1/|V_out|) Σ_{V_out} (Y − Y_obs)²`
/// assembled from the series, with a warning when it was truncated before
/// reaching its tolerance.
#[derive(Clone, Debug)]
pub struct AnalyticHypergradient {
    pub values: Vec<f64>,
    pub warning: Option<String>,
}

/// Adjoint sequence and prefix sums used by the per-edge assembly.
struct Adjoint {
    /// `Σ_{a ≤ m} M^a s` for `m = 0..R−1`, each of length `n`.
    cumulative: Vec<Vec<f64>>,
}

fn outer_residual(y: &Tensor, targets: &LabeledTargets, outer: &[usize]) -> Result<Tensor> {
    if outer.is_empty() {
        return Err(Error::contract("V_out is empty"));
    }
    let mut s = Tensor::zeros(y.rows(), y.cols());
    let f = 2.0 / outer.len() as f64;
    for &u in outer {
        if !targets.mask[u] {
            return Err(Error::contract(format!("outer node {u} is unlabelled")));
        }
        for ((o, a), b) in s.row_mut(u).iter_mut().zip(y.row(u)).zip(targets.y.row(u)) {
            *o = f * (a - b);
        }
    }
    Ok(s)
}

fn adjoint(series: &NeumannSeries, s: Tensor) -> Result<Adjoint> {
    let r = series.truncation();
    let mut cumulative = Vec::with_capacity(r);
    let mut z = s;
    let mut acc = vec![0.0; z.rows()];
    for a in 0..r {
        for (c, x) in acc.iter_mut().zip(z.data()) {
            *c += x;
        }
        cumulative.push(acc.clone());
        if a + 1 < r {
            z = series.contraction.matmul(&z)?;
        }
    }
    Ok(Adjoint { cumulative })
}

/// `−(λ/(|E|μ_max)) Σ_{a+b ≤ R−1} (z_a,i − z_a,j)(T_b,i − T_b,j)` with
/// `z_a = M^a s`.
fn assemble(sys: &RegularizedSystem, series: &NeumannSeries, adj: &Adjoint, i: usize, j: usize) -> f64 {
    let r = series.truncation();
    let mut total = 0.0;
    for b in 0..r {
        let t = &series.terms[b];
        let dt = t.get(i, 0) - t.get(j, 0);
        if dt == 0.0 {
            continue;
        }
        let z = &adj.cumulative[r - 1 - b];
        total += (z[i] - z[j]) * dt;
    }
    -sys.laplacian_scale() / series.mu_max * total
}

fn precision_warning(series: &NeumannSeries) -> Option<String> {
    (!series.converged).then(|| {
        format!(
            "series truncated at R = {} with ‖T_R‖ above {:e} (tail bound {:e})",
            series.truncation(),
            series.tol,
            series.tail_bound
        )
    })
}

/// `∂F_out/∂A_ij` for a single edge.
pub fn analytic_hypergradient(
    sys: &RegularizedSystem,
    series: &NeumannSeries,
    targets: &LabeledTargets,
    outer: &[usize],
    i: usize,
    j: usize,
) -> Result<(f64, Option<String>)> {
    let all = analytic_hypergradient_edges(sys, series, targets, outer, &[(i, j)])?;
    Ok((all.values[0], all.warning))
}

/// `∂F_out/∂A_ij` for every listed edge, in parallel.
pub fn analytic_hypergradient_edges(
    sys: &RegularizedSystem,
    series: &NeumannSeries,
    targets: &LabeledTargets,
    outer: &[usize],
    edges: &[(usize, usize)],
) -> Result<AnalyticHypergradient> {
    series.check_single_column()?;
    let s = outer_residual(&series.sum(), targets, outer)?;
    let adj = adjoint(series, s)?;
    let values = parallel::map_indexed(edges.len(), |e| {
        let (i, j) = edges[e];
        assemble(sys, series, &adj, i, j)
    });
    Ok(AnalyticHypergradient { values, warning: precision_warning(series) })
}

/// Exact hypergradient at the closed-form solution through the adjoint
/// `p = B⁻¹ s`: `∂F_out/∂A_ij = −(λ/|E|) Σ_c (p_i − p_j)(Y_i − Y_j)`.
pub fn adjoint_hypergradient(
    sys: &RegularizedSystem,
    targets: &LabeledTargets,
    outer: &[usize],
    edges: &[(usize, usize)],
) -> Result<Vec<f64>> {
    if !sys.is_connected() {
        return Err(Error::Disconnected { components: sys.components });
    }
    let chol = Cholesky::factor(&sys.b)?;
    let y = chol.solve(&sys.rhs)?;
    let p = chol.solve(&outer_residual(&y, targets, outer)?)?;
    let scale = sys.laplacian_scale();
    Ok(edges
        .iter()
        .map(|&(i, j)| {
            -scale
                * p.row(i)
                    .iter()
                    .zip(p.row(j))
                    .zip(y.row(i).iter().zip(y.row(j)))
                    .map(|((a, b), (c, d))| (a - b) * (c - d))
                    .sum::<f64>()
        })
        .collect())
}

/// Exponential envelope on `|∂F_out/∂A_ij|` for an edge `q` hops from
/// `V_tr` and `k` hops from `V_out`:
/// `C·λ(√|V_out| + μ_min√|V_tr|·|V_out|)/(μ_min³|V_tr||E|)·y∞²·ν^{q+k}`.
///
/// `None` distances give 0: the solution vanishes on components without a
/// training node and the outer loss never reads components without an
/// outer node.
pub fn hypergradient_envelope(
    sys: &RegularizedSystem,
    spec: &SpectralSummary,
    n_outer: usize,
    distances: Option<(usize, usize)>,
    c_abs: f64,
) -> f64 {
    let Some((q, k)) = distances else { return 0.0 };
    let n_tr = sys.train.len() as f64;
    let n_out = n_outer as f64;
    let lead = sys.lambda * (n_out.sqrt() + spec.mu_min * n_tr.sqrt() * n_out)
        / (spec.mu_min.powi(3) * n_tr * sys.num_edges as f64);
    c_abs * lead * sys.y_inf * sys.y_inf * spec.nu.powi((q + k) as i32)
}
