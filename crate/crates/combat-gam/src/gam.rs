//! Penalized B-spline smooths for nonlinear age trends.
//!
//! The smooth is a P-spline: a clamped B-spline basis with knots at quantiles
//! of the distinct predictor values, penalized by a difference matrix on the
//! coefficients. The solver works on the stacked system [B; sqrt(lambda) D]
//! after rescaling each column to unit norm, then takes an SVD. The stacked
//! form avoids squaring the condition number the way normal equations would,
//! which matters because the smoothing grid runs up to lambda = 1e4 and the
//! null-space tests push lambda to 1e12.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GamError {
    #[error("invalid smooth configuration: {0}")]
    InvalidSpec(String),
    #[error("input arrays disagree in length: {0}")]
    LengthMismatch(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("{distinct} distinct predictor values, need at least {needed} for this basis")]
    TooFewDistinctValues { distinct: usize, needed: usize },
    #[error("penalized normal matrix is numerically singular (condition estimate {cond:.3e})")]
    SingularSystem { cond: f64 },
}

/// Threshold on the condition estimate of the (column-equilibrated) penalized
/// normal matrix beyond which the fit is reported as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Configuration of the spline smooth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothSpec {
    pub degree: usize,
    pub n_basis: usize,
    pub penalty_order: usize,
    /// Smoothing-parameter candidates, strictly increasing.
    pub lambda_grid: Vec<f64>,
}

impl Default for SmoothSpec {
    fn default() -> Self {
        SmoothSpec {
            degree: 3,
            n_basis: 10,
            penalty_order: 2,
            lambda_grid: default_lambda_grid(),
        }
    }
}

/// 20 log-spaced smoothing candidates spanning [1e-4, 1e4].
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-4, 1e4, 20)
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

impl SmoothSpec {
    /// Default spec sized to the data: n_basis = min(10, distinct − 1), so
    /// small or tie-heavy predictors still get a well-posed basis.
    pub fn defaults_for(x: &[f64]) -> SmoothSpec {
        let distinct = distinct_sorted(x).len();
        let spec = SmoothSpec::default();
        let n_basis = spec.n_basis.min(distinct.saturating_sub(1)).max(spec.degree + 1);
        SmoothSpec { n_basis, ..spec }
    }

    pub fn validate(&self) -> Result<(), GamError> {
        if self.degree < 1 {
            return Err(GamError::InvalidSpec("degree must be at least 1".into()));
        }
        if self.n_basis < self.degree + 1 {
            return Err(GamError::InvalidSpec(format!(
                "n_basis {} below degree + 1 = {}",
                self.n_basis,
                self.degree + 1
            )));
        }
        if self.penalty_order < 1 {
            return Err(GamError::InvalidSpec("penalty_order must be at least 1".into()));
        }
        if self.lambda_grid.is_empty() {
            return Err(GamError::InvalidSpec("lambda_grid is empty".into()));
        }
        for w in self.lambda_grid.windows(2) {
            if !(w[0] < w[1]) {
                return Err(GamError::InvalidSpec(
                    "lambda_grid must be strictly increasing".into(),
                ));
            }
        }
        if self.lambda_grid.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(GamError::InvalidSpec("lambda_grid entries must be positive".into()));
        }
        Ok(())
    }
}

/// A fitted smooth: the knot vector, coefficients, and bookkeeping needed to
/// evaluate it and to reason about its flexibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothFit {
    pub spec: SmoothSpec,
    pub knots: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub edf: f64,
}

impl SmoothFit {
    /// Lower end of the training range (left clamped knot).
    pub fn x_min(&self) -> f64 {
        self.knots[self.spec.degree]
    }

    /// Upper end of the training range (right clamped knot).
    pub fn x_max(&self) -> f64 {
        self.knots[self.spec.n_basis]
    }
}

/// Evaluation result. Inputs outside the training range are clamped to the
/// nearest boundary; the counts record how many were.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothEval {
    pub values: Vec<f64>,
    pub clamped_low: usize,
    pub clamped_high: usize,
}

impl SmoothEval {
    pub fn clamped(&self) -> usize {
        self.clamped_low + self.clamped_high
    }
}

fn distinct_sorted(x: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = x.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite predictor values"));
    v.dedup();
    v
}

fn check_finite(name: &str, v: &[f64]) -> Result<(), GamError> {
    match v.iter().position(|a| !a.is_finite()) {
        Some(i) => Err(GamError::NonFiniteInput(format!("{name}[{i}]"))),
        None => Ok(()),
    }
}

/// Clamped knot vector: degree+1 copies of each end, interior knots at
/// linearly interpolated quantiles of the distinct predictor values.
pub(crate) fn build_knots(x: &[f64], spec: &SmoothSpec) -> Result<Vec<f64>, GamError> {
    spec.validate()?;
    check_finite("x", x)?;
    if x.is_empty() {
        return Err(GamError::LengthMismatch("x is empty".into()));
    }
    let v = distinct_sorted(x);
    let needed = spec.n_basis - spec.degree + 1;
    if v.len() < needed {
        return Err(GamError::TooFewDistinctValues { distinct: v.len(), needed });
    }
    let k = spec.n_basis;
    let d = spec.degree;
    let interior = k - d - 1;
    let m = v.len();
    let mut knots = Vec::with_capacity(k + d + 1);
    knots.extend(std::iter::repeat_n(v[0], d + 1));
    for j in 1..=interior {
        let pos = j as f64 / (interior + 1) as f64 * (m - 1) as f64;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let knot = if lo + 1 < m { v[lo] * (1.0 - frac) + v[lo + 1] * frac } else { v[lo] };
        knots.push(knot);
    }
    knots.extend(std::iter::repeat_n(v[m - 1], d + 1));
    Ok(knots)
}

/// Index of the knot span containing `x` (clamped to the basis range).
fn find_span(knots: &[f64], degree: usize, n_basis: usize, x: f64) -> usize {
    if x >= knots[n_basis] {
        return n_basis - 1;
    }
    if x <= knots[degree] {
        return degree;
    }
    let mut lo = degree;
    let mut hi = n_basis;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if x < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// The degree+1 basis values that are nonzero on the span of `x`.
fn nonzero_basis(knots: &[f64], span: usize, x: f64, degree: usize) -> Vec<f64> {
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        n[j] = saved;
    }
    n
}

/// One basis row at `x`, clamped to the knot range.
pub(crate) fn basis_row(knots: &[f64], degree: usize, n_basis: usize, x: f64) -> Vec<f64> {
    let xc = x.clamp(knots[degree], knots[n_basis]);
    let span = find_span(knots, degree, n_basis, xc);
    let nz = nonzero_basis(knots, span, xc, degree);
    let mut row = vec![0.0; n_basis];
    row[(span - degree)..=span].copy_from_slice(&nz);
    row
}

fn basis_matrix(x: &[f64], knots: &[f64], spec: &SmoothSpec) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(x.len(), spec.n_basis);
    for (i, &xi) in x.iter().enumerate() {
        let row = basis_row(knots, spec.degree, spec.n_basis, xi);
        for (j, v) in row.into_iter().enumerate() {
            b[(i, j)] = v;
        }
    }
    b
}

/// Design matrix of B-spline basis values; row i holds the basis at x[i].
pub fn build_basis(x: &[f64], spec: &SmoothSpec) -> Result<DMatrix<f64>, GamError> {
    let knots = build_knots(x, spec)?;
    Ok(basis_matrix(x, &knots, spec))
}

/// Greville abscissae of the basis: the coefficient "sites" at which a
/// spline reproducing a linear function carries that function's values.
pub(crate) fn greville_sites(knots: &[f64], degree: usize, n_basis: usize) -> Vec<f64> {
    (0..n_basis)
        .map(|j| knots[j + 1..=j + degree].iter().sum::<f64>() / degree as f64)
        .collect()
}

/// Order-k difference penalty on the coefficients.
///
/// The knots sit at data quantiles, so the Greville sites are unevenly
/// spaced; plain integer differences would then penalize linear trends. The
/// rows are therefore k-th divided differences over the Greville sites,
/// whose null space is polynomials of degree < k at those sites for any
/// spacing, rescaled by the mean site gap to the k so that equally spaced
/// sites recover the classic unit-spaced difference matrix (and the lambda
/// grid keeps its usual meaning regardless of the units of x).
pub(crate) fn difference_penalty(knots: &[f64], spec: &SmoothSpec) -> DMatrix<f64> {
    let n = spec.n_basis;
    let order = spec.penalty_order.min(n - 1);
    let xi = greville_sites(knots, spec.degree, n);
    let mut d = DMatrix::<f64>::identity(n, n);
    for step in 1..=order {
        let rows = n - step;
        let mut next = DMatrix::zeros(rows, n);
        for i in 0..rows {
            let span = xi[i + step] - xi[i];
            for j in 0..n {
                next[(i, j)] = (d[(i + 1, j)] - d[(i, j)]) / span;
            }
        }
        d = next;
    }
    let mean_gap = (xi[n - 1] - xi[0]) / (n - 1) as f64;
    d * mean_gap.powi(order as i32)
}

/// Solve operator for one smoothing level, derived from the SVD of the
/// equilibrated stacked system. `w` maps a response vector straight to
/// coefficients; `edf` is response-independent.
pub(crate) struct RidgeFactor {
    pub lambda: f64,
    pub w: DMatrix<f64>,
    pub edf: f64,
}

/// Stacks [B; mu D] and rescales every column to unit norm. Returns the
/// stacked matrix and the applied column scales.
fn equilibrated_stack(
    b: &DMatrix<f64>,
    d: &DMatrix<f64>,
    mu: f64,
) -> Result<(DMatrix<f64>, Vec<f64>), GamError> {
    let n = b.nrows();
    let k = b.ncols();
    let p = d.nrows();
    let mut a = DMatrix::zeros(n + p, k);
    a.view_mut((0, 0), (n, k)).copy_from(b);
    for i in 0..p {
        for j in 0..k {
            a[(n + i, j)] = mu * d[(i, j)];
        }
    }
    let mut scale = vec![0.0; k];
    for j in 0..k {
        let norm = a.column(j).norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(GamError::SingularSystem { cond: f64::INFINITY });
        }
        scale[j] = 1.0 / norm;
        for i in 0..n + p {
            a[(i, j)] *= scale[j];
        }
    }
    Ok((a, scale))
}

fn condition_squared(sigma: &DVector<f64>) -> f64 {
    let s_max = sigma.max();
    let s_min = sigma.min();
    if !(s_min > 0.0) {
        return f64::INFINITY;
    }
    (s_max / s_min) * (s_max / s_min)
}

/// Builds the solve operator for [B; sqrt(lambda) D] with column
/// equilibration.
pub(crate) fn factorize_stacked(
    b: &DMatrix<f64>,
    d: &DMatrix<f64>,
    lambda: f64,
) -> Result<RidgeFactor, GamError> {
    let n = b.nrows();
    let k = b.ncols();
    let root = lambda.sqrt();
    let (a, scale) = equilibrated_stack(b, d, root)?;
    let svd = a.svd(true, true);
    let sigma = &svd.singular_values;
    if !(sigma.min() > 0.0) {
        return Err(GamError::SingularSystem { cond: f64::INFINITY });
    }

    // Condition estimate for the singularity check. Heavy smoothing makes the
    // stacked system stiff in proportion to sqrt(lambda) even though the SVD
    // solve stays backward stable, so stiffness alone must not trip the
    // check: for the estimate only, the penalty weight is capped at the value
    // balancing the two blocks' Frobenius norms. Rank deficiency at the
    // actual weight is still measured at the actual weight.
    let mu_balanced = b.norm() / d.norm().max(f64::MIN_POSITIVE);
    let cond = if root <= mu_balanced {
        condition_squared(sigma)
    } else {
        let (a_bal, _) = equilibrated_stack(b, d, mu_balanced)?;
        condition_squared(&a_bal.singular_values())
    };
    if cond > CONDITION_LIMIT {
        return Err(GamError::SingularSystem { cond });
    }
    let u = svd.u.as_ref().expect("svd requested u");
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");

    // Coefficients for response y: c = S V diag(1/sigma) U1^T y.
    let u1 = u.rows(0, n);
    let mut v_sigma_inv = v_t.transpose();
    for j in 0..sigma.len() {
        let inv = 1.0 / sigma[j];
        for i in 0..k {
            v_sigma_inv[(i, j)] *= inv;
        }
    }
    let mut w = &v_sigma_inv * u1.transpose();
    for i in 0..k {
        for j in 0..n {
            w[(i, j)] *= scale[i];
        }
    }

    // edf = trace of the hat matrix = squared Frobenius norm of
    // (equilibrated B) V diag(1/sigma).
    let mut b_tilde = b.clone();
    for j in 0..k {
        for i in 0..n {
            b_tilde[(i, j)] *= scale[j];
        }
    }
    let g = &b_tilde * &v_sigma_inv;
    let edf = g.iter().map(|v| v * v).sum();

    Ok(RidgeFactor { lambda, w, edf })
}

/// Shared pieces of a GCV scan over the smoothing grid: the basis, penalty,
/// and one solve operator per grid point. Building it once and reusing it for
/// every feature column is what keeps the per-feature cost down to matrix
/// multiplies.
pub(crate) struct GcvPlan {
    pub spec: SmoothSpec,
    pub knots: Vec<f64>,
    pub basis: DMatrix<f64>,
    pub factors: Vec<RidgeFactor>,
}

impl GcvPlan {
    pub fn new(x: &[f64], spec: &SmoothSpec) -> Result<GcvPlan, GamError> {
        let knots = build_knots(x, spec)?;
        let basis = basis_matrix(x, &knots, spec);
        let d = difference_penalty(&knots, spec);
        let factors: Vec<RidgeFactor> = spec
            .lambda_grid
            .iter()
            .map(|&l| factorize_stacked(&basis, &d, l))
            .collect::<Result<_, _>>()?;
        Ok(GcvPlan { spec: spec.clone(), knots, basis, factors })
    }

    /// Coefficients at a fixed grid index for response `y`.
    pub fn solve_at(&self, idx: usize, y: &DVector<f64>) -> DVector<f64> {
        &self.factors[idx].w * y
    }

    /// GCV score N·RSS/(N − edf)² at a grid index.
    fn gcv_at(&self, idx: usize, y: &DVector<f64>) -> f64 {
        let n = y.len() as f64;
        let coef = self.solve_at(idx, y);
        let fitted = &self.basis * &coef;
        let rss: f64 = y.iter().zip(fitted.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let denom = n - self.factors[idx].edf;
        if denom <= 0.0 {
            return f64::INFINITY;
        }
        n * rss / (denom * denom)
    }

    /// Grid index minimizing GCV, ties resolved toward the larger lambda.
    pub fn select_index(&self, y: &DVector<f64>) -> usize {
        let mut best = 0;
        let mut best_score = f64::INFINITY;
        for idx in 0..self.factors.len() {
            let score = self.gcv_at(idx, y);
            if score <= best_score {
                best_score = score;
                best = idx;
            }
        }
        best
    }

    fn fit_at(&self, idx: usize, y: &DVector<f64>) -> SmoothFit {
        let coef = self.solve_at(idx, y);
        SmoothFit {
            spec: self.spec.clone(),
            knots: self.knots.clone(),
            coefficients: coef.iter().copied().collect(),
            lambda: self.factors[idx].lambda,
            edf: self.factors[idx].edf,
        }
    }
}

fn check_xy(x: &[f64], y: &[f64]) -> Result<(), GamError> {
    if x.len() != y.len() {
        return Err(GamError::LengthMismatch(format!(
            "x has {} values, y has {}",
            x.len(),
            y.len()
        )));
    }
    check_finite("x", x)?;
    check_finite("y", y)
}

/// Minimizes ‖y − Bc‖² + λ‖D c‖² and reports the effective degrees of
/// freedom of the resulting smoother.
pub fn fit_penalized(
    x: &[f64],
    y: &[f64],
    spec: &SmoothSpec,
    lambda: f64,
) -> Result<SmoothFit, GamError> {
    check_xy(x, y)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(GamError::InvalidSpec(format!("lambda must be nonnegative, got {lambda}")));
    }
    let knots = build_knots(x, spec)?;
    let basis = basis_matrix(x, &knots, spec);
    let d = difference_penalty(&knots, spec);
    let factor = factorize_stacked(&basis, &d, lambda)?;
    let coef = &factor.w * DVector::from_column_slice(y);
    Ok(SmoothFit {
        spec: spec.clone(),
        knots,
        coefficients: coef.iter().copied().collect(),
        lambda,
        edf: factor.edf,
    })
}

/// Fits at every lambda in the grid and returns the fit minimizing
/// GCV(λ) = N·RSS / (N − edf)², breaking ties toward the larger lambda.
pub fn select_lambda_gcv(x: &[f64], y: &[f64], spec: &SmoothSpec) -> Result<SmoothFit, GamError> {
    check_xy(x, y)?;
    let plan = GcvPlan::new(x, spec)?;
    let yv = DVector::from_column_slice(y);
    let idx = plan.select_index(&yv);
    Ok(plan.fit_at(idx, &yv))
}

/// Evaluates the smooth at new points, clamping anything outside the
/// training range to the nearest boundary.
pub fn evaluate_smooth(fit: &SmoothFit, x_new: &[f64]) -> SmoothEval {
    let lo = fit.x_min();
    let hi = fit.x_max();
    let mut clamped_low = 0;
    let mut clamped_high = 0;
    let values = x_new
        .iter()
        .map(|&x| {
            if x < lo {
                clamped_low += 1;
            } else if x > hi {
                clamped_high += 1;
            }
            let row = basis_row(&fit.knots, fit.spec.degree, fit.spec.n_basis, x);
            row.iter().zip(&fit.coefficients).map(|(b, c)| b * c).sum()
        })
        .collect();
    SmoothEval { values, clamped_low, clamped_high }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn spaced(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn basis_rows_sum_to_one() {
        let x: Vec<f64> = spaced(50).iter().map(|v| v * 0.2).collect();
        let spec = SmoothSpec::default();
        let b = build_basis(&x, &spec).unwrap();
        for i in 0..b.nrows() {
            let s: f64 = b.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn degree_one_two_basis_are_hats() {
        // Two basis functions of degree 1 on [0,1]: exactly (1 − x, x).
        let x = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let spec = SmoothSpec { degree: 1, n_basis: 2, penalty_order: 1, lambda_grid: vec![1.0] };
        let b = build_basis(&x, &spec).unwrap();
        for (i, &xi) in x.iter().enumerate() {
            assert!((b[(i, 0)] - (1.0 - xi)).abs() < 1e-15);
            assert!((b[(i, 1)] - xi).abs() < 1e-15);
        }
    }

    #[test]
    fn cubic_basis_rows_are_banded() {
        let x = spaced(50);
        let spec = SmoothSpec::default();
        let b = build_basis(&x, &spec).unwrap();
        assert_eq!(b.ncols(), 10);
        for i in 0..b.nrows() {
            let nonzeros = b.row(i).iter().filter(|v| **v != 0.0).count();
            assert!(nonzeros <= 4, "row {i} has {nonzeros} nonzeros");
        }
    }

    #[test]
    fn too_few_distinct_values_is_reported() {
        let x = vec![0.0, 0.0, 0.5, 0.5, 1.0, 1.0];
        let spec = SmoothSpec { degree: 1, n_basis: 4, penalty_order: 1, lambda_grid: vec![1.0] };
        let err = build_basis(&x, &spec).unwrap_err();
        match err {
            GamError::TooFewDistinctValues { distinct, needed } => {
                assert_eq!(distinct, 3);
                assert_eq!(needed, 4);
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn knots_are_nondecreasing_and_clamped() {
        let mut r = Rng::from_seed(3);
        let x: Vec<f64> = (0..40).map(|_| r.uniform_in(0.0, 0.2)).collect();
        let spec = SmoothSpec::default();
        let knots = build_knots(&x, &spec).unwrap();
        assert_eq!(knots.len(), spec.n_basis + spec.degree + 1);
        for w in knots.windows(2) {
            assert!(w[0] <= w[1]);
        }
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(&knots[..4], &[lo; 4]);
        assert_eq!(&knots[knots.len() - 4..], &[hi; 4]);
    }

    #[test]
    fn linear_data_is_reproduced_for_any_lambda() {
        // Linear functions sit in the order-2 penalty null space, so every
        // smoothing level must reproduce them.
        let mut r = Rng::from_seed(11);
        let x: Vec<f64> = (0..30).map(|_| r.uniform()).collect();
        let y: Vec<f64> = x.iter().map(|&v| 2.0 * v + 1.0).collect();
        let spec = SmoothSpec { n_basis: 8, ..SmoothSpec::default() };
        for lambda in [0.0, 1e-4, 1.0, 1e6, 1e12] {
            let fit = fit_penalized(&x, &y, &spec, lambda).unwrap();
            let eval = evaluate_smooth(&fit, &x);
            for (got, want) in eval.values.iter().zip(&y) {
                assert!(
                    (got - want).abs() < 1e-8,
                    "lambda {lambda}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn huge_lambda_converges_to_least_squares_line() {
        let mut r = Rng::from_seed(5);
        let x: Vec<f64> = (0..40).map(|_| r.uniform()).collect();
        let y: Vec<f64> = x.iter().map(|&v| 0.3 + 1.7 * v + 0.1 * r.normal()).collect();

        // Ordinary least-squares line, computed directly.
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;

        let fit = fit_penalized(&x, &y, &SmoothSpec::default(), 1e12).unwrap();
        let eval = evaluate_smooth(&fit, &x);
        for (i, got) in eval.values.iter().enumerate() {
            let line = intercept + slope * x[i];
            assert!((got - line).abs() < 1e-6, "point {i}: {got} vs {line}");
        }
    }

    // Kahan-compensated objective so the finite-difference oracle is not
    // swamped by summation roundoff.
    fn objective(
        b: &DMatrix<f64>,
        d: &DMatrix<f64>,
        y: &[f64],
        c: &[f64],
        lambda: f64,
    ) -> f64 {
        let mut sum = 0.0;
        let mut comp = 0.0;
        let mut add = |v: f64| {
            let t = v - comp;
            let s = sum + t;
            comp = (s - sum) - t;
            sum = s;
        };
        for i in 0..b.nrows() {
            let fit: f64 = (0..b.ncols()).map(|j| b[(i, j)] * c[j]).sum();
            let r = y[i] - fit;
            add(r * r);
        }
        for i in 0..d.nrows() {
            let v: f64 = (0..d.ncols()).map(|j| d[(i, j)] * c[j]).sum();
            add(lambda * v * v);
        }
        sum
    }

    #[test]
    fn gradient_vanishes_at_the_solution() {
        let mut r = Rng::from_seed(42);
        let x: Vec<f64> = (0..30).map(|_| r.uniform()).collect();
        let y: Vec<f64> = x.iter().map(|&v| (v * 6.0).sin() + 0.2 * r.normal()).collect();
        let spec = SmoothSpec { n_basis: 8, ..SmoothSpec::default() };
        let lambda = 1.0;
        let fit = fit_penalized(&x, &y, &spec, lambda).unwrap();

        let knots = build_knots(&x, &spec).unwrap();
        let b = basis_matrix(&x, &knots, &spec);
        let d = difference_penalty(&knots, &spec);
        let h = 1e-6;
        for j in 0..spec.n_basis {
            let mut up = fit.coefficients.clone();
            let mut dn = fit.coefficients.clone();
            up[j] += h;
            dn[j] -= h;
            let grad = (objective(&b, &d, &y, &up, lambda) - objective(&b, &d, &y, &dn, lambda))
                / (2.0 * h);
            assert!(grad.abs() < 1e-8, "coefficient {j}: gradient {grad}");
        }
    }

    // Independent GCV oracle: dense normal-equation solve per lambda, hat
    // trace from smoothing each unit vector.
    fn gcv_oracle(x: &[f64], y: &[f64], spec: &SmoothSpec) -> (usize, Vec<f64>) {
        let knots = build_knots(x, spec).unwrap();
        let b = basis_matrix(x, &knots, spec);
        let d = difference_penalty(&knots, spec);
        let n = x.len();
        let mut scores = Vec::new();
        for &lambda in &spec.lambda_grid {
            let m = b.transpose() * &b + d.transpose() * &d * lambda;
            let minv = m.try_inverse().unwrap();
            let yv = DVector::from_column_slice(y);
            let coef = &minv * (b.transpose() * &yv);
            let fitted = &b * coef;
            let rss: f64 =
                y.iter().zip(fitted.iter()).map(|(a, bv)| (a - bv) * (a - bv)).sum();
            let mut trace = 0.0;
            for i in 0..n {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                let c = &minv * (b.transpose() * e);
                let f = &b * c;
                trace += f[i];
            }
            scores.push(n as f64 * rss / ((n as f64 - trace) * (n as f64 - trace)));
        }
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s <= scores[best] {
                best = i;
            }
        }
        (best, scores)
    }

    #[test]
    fn pure_noise_selects_the_smoothest_fit() {
        let mut r = Rng::from_seed(7);
        let x: Vec<f64> = (0..60).map(|_| r.uniform()).collect();
        let y: Vec<f64> = (0..60).map(|_| r.normal()).collect();
        let spec = SmoothSpec::default();
        let fit = select_lambda_gcv(&x, &y, &spec).unwrap();
        let (oracle_idx, _) = gcv_oracle(&x, &y, &spec);
        assert_eq!(fit.lambda, spec.lambda_grid[oracle_idx]);
        assert_eq!(fit.lambda, *spec.lambda_grid.last().unwrap(), "noise should take the smoothest fit");
    }

    #[test]
    fn strong_cubic_keeps_enough_flexibility() {
        let mut r = Rng::from_seed(19);
        let x: Vec<f64> = (0..80).map(|_| r.uniform()).collect();
        let y: Vec<f64> =
            x.iter().map(|&v| 8.0 * (v - 0.4) * (v - 0.4) * (v - 0.4) + 1e-3 * r.normal()).collect();
        let spec = SmoothSpec::default();
        let fit = select_lambda_gcv(&x, &y, &spec).unwrap();
        let (oracle_idx, _) = gcv_oracle(&x, &y, &spec);
        assert_eq!(fit.lambda, spec.lambda_grid[oracle_idx]);
        assert!(fit.edf >= 3.0, "edf {}", fit.edf);
    }

    #[test]
    fn singleton_grid_is_returned_as_is() {
        let x = spaced(20);
        let y: Vec<f64> = x.iter().map(|&v| v * v).collect();
        let spec = SmoothSpec { lambda_grid: vec![0.37], ..SmoothSpec::default() };
        let fit = select_lambda_gcv(&x, &y, &spec).unwrap();
        assert_eq!(fit.lambda, 0.37);
    }

    #[test]
    fn gcv_matches_oracle_on_mixed_signal() {
        let mut r = Rng::from_seed(23);
        let x: Vec<f64> = (0..50).map(|_| r.uniform()).collect();
        let y: Vec<f64> = x.iter().map(|&v| (v * 9.0).sin() * 0.4 + 0.3 * r.normal()).collect();
        let spec = SmoothSpec::default();
        let fit = select_lambda_gcv(&x, &y, &spec).unwrap();
        let (oracle_idx, _) = gcv_oracle(&x, &y, &spec);
        assert_eq!(fit.lambda, spec.lambda_grid[oracle_idx]);
    }

    #[test]
    fn evaluation_reproduces_training_fit() {
        let mut r = Rng::from_seed(2);
        let x: Vec<f64> = (0..30).map(|_| r.uniform()).collect();
        let y: Vec<f64> = x.iter().map(|&v| v.exp()).collect();
        let spec = SmoothSpec { n_basis: 6, ..SmoothSpec::default() };
        let fit = fit_penalized(&x, &y, &spec, 0.01).unwrap();
        let knots = build_knots(&x, &spec).unwrap();
        let b = basis_matrix(&x, &knots, &spec);
        let c = DVector::from_column_slice(&fit.coefficients);
        let direct = &b * c;
        let eval = evaluate_smooth(&fit, &x);
        assert_eq!(eval.clamped(), 0);
        for (a, bv) in eval.values.iter().zip(direct.iter()) {
            assert!((a - bv).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_coefficients_evaluate_to_the_constant() {
        let x = spaced(12);
        let spec = SmoothSpec { n_basis: 6, ..SmoothSpec::default() };
        let knots = build_knots(&x, &spec).unwrap();
        let fit = SmoothFit {
            spec: spec.clone(),
            knots,
            coefficients: vec![4.25; 6],
            lambda: 1.0,
            edf: 1.0,
        };
        let eval = evaluate_smooth(&fit, &[0.0, 0.3, 0.77, 1.0]);
        for v in eval.values {
            assert!((v - 4.25).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_inputs_clamp_to_boundaries() {
        let x = spaced(15);
        let y: Vec<f64> = x.iter().map(|&v| 1.0 + v * v).collect();
        let fit = fit_penalized(&x, &y, &SmoothSpec { n_basis: 6, ..SmoothSpec::default() }, 0.1)
            .unwrap();
        let eval = evaluate_smooth(&fit, &[-5.0, -0.01, 0.5, 1.01, 99.0]);
        assert_eq!(eval.clamped_low, 2);
        assert_eq!(eval.clamped_high, 2);
        let at_lo = evaluate_smooth(&fit, &[0.0]).values[0];
        let at_hi = evaluate_smooth(&fit, &[1.0]).values[0];
        assert_eq!(eval.values[0], at_lo);
        assert_eq!(eval.values[1], at_lo);
        assert_eq!(eval.values[3], at_hi);
        assert_eq!(eval.values[4], at_hi);
    }

    #[test]
    fn edf_is_monotone_in_lambda_and_bounded() {
        let mut r = Rng::from_seed(31);
        let x: Vec<f64> = (0..45).map(|_| r.uniform()).collect();
        let spec = SmoothSpec::default();
        let plan = GcvPlan::new(&x, &spec).unwrap();
        let mut prev = f64::INFINITY;
        for f in &plan.factors {
            assert!(f.edf <= prev + 1e-10, "edf rose from {prev} to {}", f.edf);
            assert!(f.edf >= spec.penalty_order as f64 - 1e-8);
            assert!(f.edf <= spec.n_basis as f64 + 1e-8);
            prev = f.edf;
        }
    }

    #[test]
    fn edf_matches_unit_vector_hat_trace() {
        let mut r = Rng::from_seed(13);
        let x: Vec<f64> = (0..20).map(|_| r.uniform()).collect();
        let spec = SmoothSpec { n_basis: 6, ..SmoothSpec::default() };
        let lambda = 2.5;
        let fit = fit_penalized(&x, &[0.0; 20], &spec, lambda).unwrap();
        let mut trace = 0.0;
        for i in 0..x.len() {
            let mut e = vec![0.0; x.len()];
            e[i] = 1.0;
            let f = fit_penalized(&x, &e, &spec, lambda).unwrap();
            trace += evaluate_smooth(&f, &x).values[i];
        }
        assert!((fit.edf - trace).abs() < 1e-8, "edf {} vs trace {trace}", fit.edf);
    }

    #[test]
    fn rank_deficient_unpenalized_fit_is_singular() {
        // Four data points cannot pin down five coefficients without the
        // penalty; with it the system becomes well posed.
        let x = vec![0.1, 0.4, 0.7, 0.9];
        let y = vec![1.0, 2.0, 0.5, 1.5];
        let spec =
            SmoothSpec { degree: 3, n_basis: 5, penalty_order: 2, lambda_grid: vec![1.0] };
        let err = fit_penalized(&x, &y, &spec, 0.0).unwrap_err();
        assert!(matches!(err, GamError::SingularSystem { .. }), "got {err}");
        fit_penalized(&x, &y, &spec, 1.0).unwrap();
    }

    #[test]
    fn spec_validation_catches_bad_grids() {
        let mut spec = SmoothSpec::default();
        spec.lambda_grid = vec![];
        assert!(matches!(spec.validate(), Err(GamError::InvalidSpec(_))));
        spec.lambda_grid = vec![1.0, 1.0];
        assert!(matches!(spec.validate(), Err(GamError::InvalidSpec(_))));
        spec.lambda_grid = vec![1.0, 0.5];
        assert!(matches!(spec.validate(), Err(GamError::InvalidSpec(_))));
        let spec = SmoothSpec { n_basis: 3, ..SmoothSpec::default() };
        assert!(matches!(spec.validate(), Err(GamError::InvalidSpec(_))));
    }

    #[test]
    fn default_grid_shape() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 20);
        assert!((g[0] - 1e-4).abs() < 1e-18);
        assert!((g[19] - 1e4).abs() < 1e-8);
        for w in g.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn defaults_shrink_with_distinct_values() {
        let x: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let spec = SmoothSpec::defaults_for(&x);
        assert_eq!(spec.n_basis, 5);
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(SmoothSpec::defaults_for(&x).n_basis, 10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn partition_of_unity_holds_everywhere(
            seed in 0u64..1000,
            n in 12usize..60,
        ) {
            let mut r = Rng::from_seed(seed);
            let x: Vec<f64> = (0..n).map(|_| r.uniform_in(-3.0, 7.0)).collect();
            let spec = SmoothSpec::defaults_for(&x);
            prop_assume!(distinct_sorted(&x).len() >= spec.n_basis - spec.degree + 1);
            let b = build_basis(&x, &spec).unwrap();
            for i in 0..b.nrows() {
                let s: f64 = b.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn linear_null_space_survives_any_lambda(
            seed in 0u64..1000,
            slope in -5.0f64..5.0,
            intercept in -5.0f64..5.0,
            lambda_pow in -4.0f64..8.0,
        ) {
            let mut r = Rng::from_seed(seed);
            let x: Vec<f64> = (0..30).map(|_| r.uniform()).collect();
            prop_assume!(distinct_sorted(&x).len() >= 9);
            let y: Vec<f64> = x.iter().map(|&v| slope * v + intercept).collect();
            let fit = fit_penalized(&x, &y, &SmoothSpec::default(), 10f64.powf(lambda_pow)).unwrap();
            let eval = evaluate_smooth(&fit, &x);
            let scale = slope.abs().max(intercept.abs()).max(1.0);
            for (got, want) in eval.values.iter().zip(&y) {
                prop_assert!((got - want).abs() < 1e-8 * scale);
            }
        }
    }
}
