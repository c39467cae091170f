//! Site-effect harmonization: joint standardization fit, per-site effect
//! estimation, empirical Bayes shrinkage, and reconstruction.
//!
//! The model for feature f of subject i at site s is
//!     Y = alpha + f(age) + beta' x + gamma_s + delta_s * eps,
//! fitted in two stages. The standardization stage estimates alpha, the age
//! smooth, the linear covariate terms, and raw per-site offsets jointly by
//! penalized least squares, then rescales residual variation to unit size.
//! The site stage estimates each site's location and spread on the
//! standardized scale and optionally shrinks them across features with
//! parametric empirical Bayes before the adjustment is inverted.
//!
//! Identifiability: the smooth is centered (its values sum to zero over the
//! training subjects), the linear covariates are mean-centered, and the site
//! offsets obey a site-size-weighted sum-to-zero constraint. Together these
//! make alpha exactly the per-feature grand mean.

use ndarray::Array2;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CohortError, CohortTable, SiteIndex, Violation, MIN_SITE_SIZE};
use crate::gam::{
    self, basis_row, build_knots, difference_penalty, evaluate_smooth, factorize_stacked,
    GamError, GcvPlan, SmoothFit, SmoothSpec,
};
use crate::serialize::{array2_rows, fnv1a64};

#[derive(Debug, Error)]
pub enum CombatError {
    #[error("cohort failed validation: {}", format_violations(.0))]
    InvalidCohort(Vec<Violation>),
    #[error("harmonization requires at least 2 sites, found {0}")]
    NeedTwoSites(usize),
    #[error("empirical Bayes requires at least 2 features, found {0}")]
    TooFewFeatures(usize),
    #[error("feature \"{feature}\" has residual scale below 1e-12 (exact function of covariates and site)")]
    ZeroResidualVariance { feature: String },
    #[error("site \"{site}\" feature \"{feature}\": standardized variance below 1e-12")]
    DegenerateVariance { site: String, feature: String },
    #[error("site \"{site}\" has {count} rows, need at least {MIN_SITE_SIZE}")]
    SiteTooSmall { site: String, count: usize },
    #[error("site \"{0}\" was not present when the model was fitted")]
    UnknownSite(String),
    #[error("cohort does not match the model: {0}")]
    FeatureMismatch(String),
    #[error("input arrays disagree in length: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Gam(#[from] GamError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
}

fn format_violations(vs: &[Violation]) -> String {
    let parts: Vec<String> = vs.iter().map(|v| v.to_string()).collect();
    parts.join("; ")
}

/// Non-fatal condition discovered during fitting, surfaced to the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FitWarning {
    /// The moment equations give no usable prior for this site; its
    /// parameters pass through unshrunk.
    EbUnavailable { site: String, reason: String },
    /// The shrinkage fixed point did not reach tolerance; the last iterate
    /// was kept.
    EbNonConvergence { site: String, change: f64 },
}

impl std::fmt::Display for FitWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitWarning::EbUnavailable { site, reason } => {
                write!(f, "empirical Bayes unavailable for site \"{site}\": {reason}; parameters pass through unshrunk")
            }
            FitWarning::EbNonConvergence { site, change } => {
                write!(f, "empirical Bayes iteration for site \"{site}\" stopped before tolerance (last change {change:.3e})")
            }
        }
    }
}

/// Which mean-structure terms the standardization fit includes. Site offsets
/// and the intercept are always present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelTerms {
    pub smooth: bool,
    pub sex: bool,
    pub extras: bool,
}

impl Default for ModelTerms {
    fn default() -> Self {
        ModelTerms { smooth: true, sex: true, extras: true }
    }
}

/// Tuning for the full fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub eb: bool,
    pub eb_tol: f64,
    pub eb_max_iter: usize,
    pub terms: ModelTerms,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { eb: true, eb_tol: 1e-6, eb_max_iter: 100, terms: ModelTerms::default() }
    }
}

/// The covariate half of the model: everything needed to predict the
/// site-free baseline alpha + f(age) + beta' x for any subject, plus the
/// residual scale that puts features on a comparable footing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationModel {
    pub feature_names: Vec<String>,
    /// Per-feature grand mean.
    pub alpha: Vec<f64>,
    /// Per-feature centered age smooth (empty when the smooth is disabled).
    pub age_smooth: Vec<SmoothFit>,
    /// Per-feature sex coefficient (0 when the sex term is disabled).
    pub beta_sex: Vec<f64>,
    /// Per-feature coefficients for the extra linear covariates.
    pub beta_extra: Vec<Vec<f64>>,
    pub extra_names: Vec<String>,
    /// Training means subtracted from sex and the extra covariates, so the
    /// parametric terms are centered and alpha stays the grand mean.
    pub sex_mean: f64,
    pub extra_means: Vec<f64>,
    /// Per-feature pooled residual scale (RMS residual, denominator N).
    pub sigma: Vec<f64>,
    /// Sites in canonical (sorted) order.
    pub site_order: Vec<String>,
    /// Training subject count per site, aligned with site_order.
    pub site_sizes: Vec<usize>,
    /// Raw per-site offsets from the joint fit (S rows, F columns), under the
    /// site-size-weighted sum-to-zero constraint. Diagnostic only: the
    /// standardized residuals keep the site structure, and these record it.
    #[serde(with = "array2_rows")]
    pub site_offsets: Array2<f64>,
    pub terms: ModelTerms,
}

/// Raw and shrunk per-site location/scale parameters, S rows by F columns in
/// site_order and feature order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteParams {
    #[serde(with = "array2_rows")]
    pub gamma_hat: Array2<f64>,
    #[serde(with = "array2_rows")]
    pub delta2_hat: Array2<f64>,
    #[serde(with = "array2_rows")]
    pub gamma_star: Array2<f64>,
    #[serde(with = "array2_rows")]
    pub delta2_star: Array2<f64>,
}

/// Per-site empirical Bayes priors. The inverse-gamma parameters are None
/// for sites where the moment equations are degenerate; those sites skip
/// shrinkage entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EBHyperparams {
    pub gamma_bar: Vec<f64>,
    pub tau2_bar: Vec<f64>,
    pub lambda_bar: Vec<Option<f64>>,
    pub theta_bar: Vec<Option<f64>>,
}

impl EBHyperparams {
    pub fn available(&self, site: usize) -> bool {
        self.lambda_bar[site].is_some() && self.theta_bar[site].is_some()
    }
}

/// Everything needed to harmonize new data: the standardization model, the
/// site parameters, the priors behind them, and a fingerprint of the
/// configuration that produced the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizationModel {
    pub standardization: StandardizationModel,
    pub site_params: SiteParams,
    pub eb: EBHyperparams,
    pub eb_enabled: bool,
    pub fingerprint: String,
}

/// Result of the full fit: the model plus any non-fatal warnings.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: HarmonizationModel,
    pub warnings: Vec<FitWarning>,
}

/// Standardized residual matrix plus evaluation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    /// N×F matrix of (Y − baseline) / sigma.
    pub z: Array2<f64>,
    /// Subjects whose age fell outside the training range and was clamped.
    pub clamped_ages: usize,
}

/// Harmonized cohort plus evaluation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Harmonized {
    pub table: CohortTable,
    pub clamped_ages: usize,
}

// Shared design pieces for one cohort: the parametric block, the centered
// smooth block, and the penalty aligned to the stacked coefficient vector.
struct DesignParts {
    /// N × P full design [1 | centered covariates | site contrasts | B·Zc].
    x: DMatrix<f64>,
    /// Penalty rows, zero-padded to width P (smooth columns only).
    penalty: DMatrix<f64>,
    n_cov: usize,
    n_site_cols: usize,
    /// K×(K−1) null-space basis mapping reduced smooth coefficients to the
    /// full coefficient vector; empty when the smooth is off.
    centering: DMatrix<f64>,
    knots: Vec<f64>,
    sex_mean: f64,
    extra_means: Vec<f64>,
}

/// Orthonormal basis of the null space of the row vector w, via the
/// Householder reflection that maps w to a multiple of e1: columns 2..n of
/// the reflection matrix.
fn null_space_basis(w: &DVector<f64>) -> DMatrix<f64> {
    let n = w.len();
    let norm = w.norm();
    assert!(norm > 0.0, "constraint vector must be nonzero");
    let mut v = w.clone();
    v[0] += if w[0] >= 0.0 { norm } else { -norm };
    let vtv = v.dot(&v);
    let mut z = DMatrix::zeros(n, n - 1);
    for col in 0..n - 1 {
        let j = col + 1;
        // Column j of H = I − 2 v vᵀ / vᵀv.
        for i in 0..n {
            let e = if i == j { 1.0 } else { 0.0 };
            z[(i, col)] = e - 2.0 * v[i] * v[j] / vtv;
        }
    }
    z
}

fn build_design(
    cohort: &CohortTable,
    sites: &SiteIndex,
    spec: &SmoothSpec,
    terms: &ModelTerms,
    include_sites: bool,
) -> Result<DesignParts, CombatError> {
    let n = cohort.n_subjects();
    let nf = n as f64;
    let s = sites.len();

    let sex_mean = if terms.sex {
        cohort.sexes().iter().map(|&v| v as f64).sum::<f64>() / nf
    } else {
        0.0
    };
    let n_extras = if terms.extras { cohort.extra_names().len() } else { 0 };
    let extra_means: Vec<f64> = (0..n_extras)
        .map(|j| cohort.extras().column(j).sum() / nf)
        .collect();
    let n_cov = usize::from(terms.sex) + n_extras;
    let n_site_cols = if include_sites && s > 1 { s - 1 } else { 0 };

    // Smooth block: basis columns mapped through the centering constraint
    // sum_i f(age_i) = 0, absorbed by a null-space reparameterization.
    let (smooth_cols, centering, knots, penalty_rows) = if terms.smooth {
        let knots = build_knots(cohort.ages(), spec)?;
        let k = spec.n_basis;
        let mut b = DMatrix::zeros(n, k);
        for (i, &age) in cohort.ages().iter().enumerate() {
            let row = basis_row(&knots, spec.degree, k, age);
            for (j, v) in row.into_iter().enumerate() {
                b[(i, j)] = v;
            }
        }
        let col_sums = DVector::from_iterator(k, (0..k).map(|j| b.column(j).sum()));
        let z = null_space_basis(&col_sums);
        let bz = &b * &z;
        let dz = difference_penalty(&knots, spec) * &z;
        (bz.ncols(), z, knots, dz)
    } else {
        (0, DMatrix::zeros(0, 0), Vec::new(), DMatrix::zeros(0, 0))
    };

    let p = 1 + n_cov + n_site_cols + smooth_cols;
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        x[(i, 0)] = 1.0;
    }
    let mut col = 1;
    if terms.sex {
        for i in 0..n {
            x[(i, col)] = cohort.sexes()[i] as f64 - sex_mean;
        }
        col += 1;
    }
    for j in 0..n_extras {
        for i in 0..n {
            x[(i, col)] = cohort.extras()[(i, j)] - extra_means[j];
        }
        col += 1;
    }
    if n_site_cols > 0 {
        // Contrast coding: site k (k < S−1) gets its own column; the last
        // site's offset is determined by the weighted sum-to-zero constraint.
        let sizes = sites.sizes();
        let n_last = sizes[s - 1] as f64;
        for k in 0..s - 1 {
            for &i in sites.rows(k) {
                x[(i, col + k)] = 1.0;
            }
            let w = -(sizes[k] as f64) / n_last;
            for &i in sites.rows(s - 1) {
                x[(i, col + k)] = w;
            }
        }
        col += n_site_cols;
    }
    if terms.smooth {
        // Recompute B·Zc directly into the design to avoid holding two copies.
        let k = spec.n_basis;
        for (i, &age) in cohort.ages().iter().enumerate() {
            let row = basis_row(&knots, spec.degree, k, age);
            for c in 0..smooth_cols {
                let mut acc = 0.0;
                for (j, v) in row.iter().enumerate() {
                    acc += v * centering[(j, c)];
                }
                x[(i, col + c)] = acc;
            }
        }
    }

    let mut penalty = DMatrix::zeros(penalty_rows.nrows(), p);
    if terms.smooth {
        penalty
            .view_mut((0, p - smooth_cols), (penalty_rows.nrows(), smooth_cols))
            .copy_from(&penalty_rows);
    }

    Ok(DesignParts { x, penalty, n_cov, n_site_cols, centering, knots, sex_mean, extra_means })
}

// Per-feature results of the joint fit, unpacked from the coefficient vector.
struct FeatureFit {
    alpha: f64,
    beta_sex: f64,
    beta_extra: Vec<f64>,
    offsets: Vec<f64>,
    smooth: Option<SmoothFit>,
    sigma: f64,
}

/// Fits the covariate model. The smooth's lambda is chosen per feature by
/// GCV on the feature residualized against the parametric-plus-site block,
/// then all terms are refitted jointly at that lambda.
pub fn fit_standardization(
    cohort: &CohortTable,
    spec: &SmoothSpec,
    terms: &ModelTerms,
) -> Result<StandardizationModel, CombatError> {
    let sites = cohort.site_index();
    fit_standardization_impl(cohort, &sites, spec, terms, true)
}

fn fit_standardization_impl(
    cohort: &CohortTable,
    sites: &SiteIndex,
    spec: &SmoothSpec,
    terms: &ModelTerms,
    include_sites: bool,
) -> Result<StandardizationModel, CombatError> {
    spec.validate().map_err(CombatError::Gam)?;
    let n = cohort.n_subjects();
    let parts = build_design(cohort, sites, spec, terms, include_sites)?;
    let p = parts.x.ncols();
    let s = sites.len();

    // Lambda preselection operates on the parametric-free signal: residualize
    // each feature against [1 | covariates | site contrasts] and run GCV with
    // the plain smooth. The residualizer and the GCV factorizations are built
    // once and shared across features.
    let n_par = 1 + parts.n_cov + parts.n_site_cols;
    let (gcv_plan, par_solver) = if terms.smooth {
        let plan = GcvPlan::new(cohort.ages(), spec)?;
        let x_par = parts.x.columns(0, n_par).into_owned();
        let solver = factorize_stacked(&x_par, &DMatrix::zeros(0, n_par), 0.0)?;
        (Some(plan), Some((x_par, solver)))
    } else {
        (None, None)
    };

    // Joint-fit solve operators, one per smoothing level actually available.
    // All features share them; only the chosen index varies by feature.
    let joint_factors: Vec<gam::RidgeFactor> = if terms.smooth {
        spec.lambda_grid
            .iter()
            .map(|&l| factorize_stacked(&parts.x, &parts.penalty, l))
            .collect::<Result<_, _>>()?
    } else {
        vec![factorize_stacked(&parts.x, &parts.penalty, 0.0)?]
    };

    let fit_one = |f: usize| -> Result<FeatureFit, CombatError> {
        let y = DVector::from_iterator(n, cohort.feature_column(f).iter().copied());

        let (idx, lambda, smooth_edf) = match (&gcv_plan, &par_solver) {
            (Some(plan), Some((x_par, solver))) => {
                let coef = &solver.w * &y;
                let resid = &y - x_par * &coef;
                let idx = plan.select_index(&resid);
                (idx, plan.factors[idx].lambda, plan.factors[idx].edf)
            }
            _ => (0, 0.0, 0.0),
        };

        let theta = &joint_factors[idx].w * &y;
        let fitted = &parts.x * &theta;
        let rss: f64 = y.iter().zip(fitted.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let sigma = (rss / n as f64).sqrt();
        if sigma < 1e-12 {
            return Err(CombatError::ZeroResidualVariance {
                feature: cohort.feature_names()[f].clone(),
            });
        }

        let mut col = 1;
        let beta_sex = if terms.sex {
            col += 1;
            theta[col - 1]
        } else {
            0.0
        };
        let n_extras = parts.extra_means.len();
        let beta_extra: Vec<f64> = (0..n_extras).map(|j| theta[col + j]).collect();
        col += n_extras;
        let mut offsets = vec![0.0; s];
        if parts.n_site_cols > 0 {
            let sizes = sites.sizes();
            let n_last = sizes[s - 1] as f64;
            let mut weighted = 0.0;
            for k in 0..s - 1 {
                offsets[k] = theta[col + k];
                weighted += sizes[k] as f64 * offsets[k];
            }
            offsets[s - 1] = -weighted / n_last;
            col += parts.n_site_cols;
        }
        let smooth = if terms.smooth {
            let reduced = theta.rows(col, p - col).into_owned();
            let full = &parts.centering * reduced;
            Some(SmoothFit {
                spec: spec.clone(),
                knots: parts.knots.clone(),
                coefficients: full.iter().copied().collect(),
                lambda,
                edf: smooth_edf,
            })
        } else {
            None
        };

        Ok(FeatureFit { alpha: theta[0], beta_sex, beta_extra, offsets, smooth, sigma })
    };

    let fits: Vec<FeatureFit> = (0..cohort.n_features())
        .into_par_iter()
        .map(fit_one)
        .collect::<Result<_, _>>()?;

    let nf = cohort.n_features();
    let mut site_offsets = Array2::zeros((s, nf));
    for (f, fit) in fits.iter().enumerate() {
        for k in 0..s {
            site_offsets[(k, f)] = fit.offsets[k];
        }
    }
    Ok(StandardizationModel {
        feature_names: cohort.feature_names().to_vec(),
        alpha: fits.iter().map(|f| f.alpha).collect(),
        age_smooth: if terms.smooth {
            fits.iter().map(|f| f.smooth.clone().expect("smooth enabled")).collect()
        } else {
            Vec::new()
        },
        beta_sex: fits.iter().map(|f| f.beta_sex).collect(),
        beta_extra: fits.iter().map(|f| f.beta_extra.clone()).collect(),
        extra_names: if terms.extras { cohort.extra_names().to_vec() } else { Vec::new() },
        sex_mean: parts.sex_mean,
        extra_means: parts.extra_means.clone(),
        sigma: fits.iter().map(|f| f.sigma).collect(),
        site_order: sites.labels().to_vec(),
        site_sizes: sites.sizes(),
        site_offsets,
        terms: *terms,
    })
}

fn check_cohort_matches(
    cohort: &CohortTable,
    model: &StandardizationModel,
) -> Result<(), CombatError> {
    if cohort.feature_names() != model.feature_names.as_slice() {
        return Err(CombatError::FeatureMismatch(format!(
            "feature columns differ from the model ({} in cohort, {} in model)",
            cohort.feature_names().len(),
            model.feature_names.len()
        )));
    }
    if model.terms.extras && cohort.extra_names() != model.extra_names.as_slice() {
        return Err(CombatError::FeatureMismatch(
            "extra covariate columns differ from the model".into(),
        ));
    }
    Ok(())
}

/// The site-free baseline alpha + f(age) + beta'(x − x̄) for every subject
/// and feature, plus how many ages had to be clamped into the smooth range.
fn predict_baseline(
    cohort: &CohortTable,
    model: &StandardizationModel,
) -> (Array2<f64>, usize) {
    let n = cohort.n_subjects();
    let nf = model.feature_names.len();
    let mut base = Array2::zeros((n, nf));
    let mut clamped = 0;
    let columns: Vec<(usize, Vec<f64>)> = (0..nf)
        .into_par_iter()
        .map(|f| {
            let mut col = vec![model.alpha[f]; n];
            let mut clamp_here = 0;
            if model.terms.smooth {
                let eval = evaluate_smooth(&model.age_smooth[f], cohort.ages());
                clamp_here = eval.clamped();
                for (i, v) in eval.values.iter().enumerate() {
                    col[i] += v;
                }
            }
            if model.terms.sex {
                for (i, &sx) in cohort.sexes().iter().enumerate() {
                    col[i] += model.beta_sex[f] * (sx as f64 - model.sex_mean);
                }
            }
            for (j, &m) in model.extra_means.iter().enumerate() {
                for i in 0..n {
                    col[i] += model.beta_extra[f][j] * (cohort.extras()[(i, j)] - m);
                }
            }
            (clamp_here, col)
        })
        .collect();
    for (f, (clamp_here, col)) in columns.into_iter().enumerate() {
        if f == 0 {
            // Ages are common to all features, so the clamp count is too.
            clamped = clamp_here;
        }
        for i in 0..n {
            base[(i, f)] = col[i];
        }
    }
    (base, clamped)
}

/// Removes the covariate baseline and rescales by sigma. Site structure is
/// untouched: Z still carries gamma_s + delta_s * eps.
pub fn standardize(
    cohort: &CohortTable,
    model: &StandardizationModel,
) -> Result<Standardized, CombatError> {
    check_cohort_matches(cohort, model)?;
    let (base, clamped_ages) = predict_baseline(cohort, model);
    let n = cohort.n_subjects();
    let nf = model.feature_names.len();
    let mut z = Array2::zeros((n, nf));
    for f in 0..nf {
        let sigma = model.sigma[f];
        for i in 0..n {
            z[(i, f)] = (cohort.features()[(i, f)] - base[(i, f)]) / sigma;
        }
    }
    Ok(Standardized { z, clamped_ages })
}

/// Per-site mean and sample variance (n−1) of each standardized feature.
pub fn estimate_site_params(
    z: &Array2<f64>,
    site_labels: &[String],
) -> Result<(Array2<f64>, Array2<f64>), CombatError> {
    if z.nrows() != site_labels.len() {
        return Err(CombatError::LengthMismatch(format!(
            "Z has {} rows, {} site labels",
            z.nrows(),
            site_labels.len()
        )));
    }
    let sites = SiteIndex::from_labels(site_labels);
    for k in 0..sites.len() {
        let count = sites.rows(k).len();
        if count < MIN_SITE_SIZE {
            return Err(CombatError::SiteTooSmall { site: sites.label(k).to_string(), count });
        }
    }
    let s = sites.len();
    let nf = z.ncols();
    let mut gamma_hat = Array2::zeros((s, nf));
    let mut delta2_hat = Array2::zeros((s, nf));
    for k in 0..s {
        let rows = sites.rows(k);
        let m = rows.len() as f64;
        for f in 0..nf {
            let mean = rows.iter().map(|&i| z[(i, f)]).sum::<f64>() / m;
            let ss: f64 = rows.iter().map(|&i| (z[(i, f)] - mean) * (z[(i, f)] - mean)).sum();
            let var = ss / (m - 1.0);
            if var < 1e-12 {
                return Err(CombatError::DegenerateVariance {
                    site: sites.label(k).to_string(),
                    feature: format!("column {f}"),
                });
            }
            gamma_hat[(k, f)] = mean;
            delta2_hat[(k, f)] = var;
        }
    }
    Ok((gamma_hat, delta2_hat))
}

/// Method-of-moments priors per site: normal moments for the location
/// effects, inverse-gamma moments for the variance effects. Sites whose
/// variance-of-variances is degenerate get no prior and a warning.
pub fn estimate_eb_hyperparams(
    gamma_hat: &Array2<f64>,
    delta2_hat: &Array2<f64>,
    site_order: &[String],
) -> Result<(EBHyperparams, Vec<FitWarning>), CombatError> {
    let s = gamma_hat.nrows();
    let nf = gamma_hat.ncols();
    if nf < 2 {
        return Err(CombatError::TooFewFeatures(nf));
    }
    if delta2_hat.dim() != gamma_hat.dim() || site_order.len() != s {
        return Err(CombatError::LengthMismatch(
            "site parameter tables disagree in shape".into(),
        ));
    }
    let mut warnings = Vec::new();
    let mut hyper = EBHyperparams {
        gamma_bar: Vec::with_capacity(s),
        tau2_bar: Vec::with_capacity(s),
        lambda_bar: Vec::with_capacity(s),
        theta_bar: Vec::with_capacity(s),
    };
    let nff = nf as f64;
    for k in 0..s {
        let g_row = gamma_hat.row(k);
        let g_mean = g_row.sum() / nff;
        let g_var =
            g_row.iter().map(|&v| (v - g_mean) * (v - g_mean)).sum::<f64>() / (nff - 1.0);
        hyper.gamma_bar.push(g_mean);
        hyper.tau2_bar.push(g_var);

        let d_row = delta2_hat.row(k);
        let m = d_row.sum() / nff;
        let v = d_row.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (nff - 1.0);
        if v < 1e-12 {
            warnings.push(FitWarning::EbUnavailable {
                site: site_order[k].clone(),
                reason: "variance of the per-feature variances is below 1e-12".into(),
            });
            hyper.lambda_bar.push(None);
            hyper.theta_bar.push(None);
            continue;
        }
        let lambda = (m * m + 2.0 * v) / v;
        let theta = (m * m * m + m * v) / v;
        if lambda <= 1.0 {
            warnings.push(FitWarning::EbUnavailable {
                site: site_order[k].clone(),
                reason: format!("moment equations give shape {lambda:.3} <= 1"),
            });
            hyper.lambda_bar.push(None);
            hyper.theta_bar.push(None);
            continue;
        }
        hyper.lambda_bar.push(Some(lambda));
        hyper.theta_bar.push(Some(theta));
    }
    Ok((hyper, warnings))
}

/// Conditional posterior-mode updates for the site parameters, iterated to a
/// fixed point. Sites without a usable prior pass through unshrunk.
#[allow(clippy::too_many_arguments)]
pub fn eb_shrink(
    z: &Array2<f64>,
    site_labels: &[String],
    gamma_hat: &Array2<f64>,
    delta2_hat: &Array2<f64>,
    eb: &EBHyperparams,
    tol: f64,
    max_iter: usize,
) -> Result<(Array2<f64>, Array2<f64>, Vec<FitWarning>), CombatError> {
    let sites = SiteIndex::from_labels(site_labels);
    let s = sites.len();
    let nf = z.ncols();
    if gamma_hat.dim() != (s, nf) || delta2_hat.dim() != (s, nf) {
        return Err(CombatError::LengthMismatch(
            "site parameter tables disagree with Z".into(),
        ));
    }
    let mut gamma_star = gamma_hat.clone();
    let mut delta2_star = delta2_hat.clone();
    let mut warnings = Vec::new();

    for k in 0..s {
        if !eb.available(k) {
            continue;
        }
        let rows = sites.rows(k);
        let n_s = rows.len() as f64;
        let gbar = eb.gamma_bar[k];
        let tau2 = eb.tau2_bar[k];
        let lambda = eb.lambda_bar[k].expect("availability checked");
        let theta = eb.theta_bar[k].expect("availability checked");

        // Per-feature sufficient statistics make each update O(1).
        let sum_z: Vec<f64> =
            (0..nf).map(|f| rows.iter().map(|&i| z[(i, f)]).sum()).collect();
        let sum_z2: Vec<f64> =
            (0..nf).map(|f| rows.iter().map(|&i| z[(i, f)] * z[(i, f)]).sum()).collect();

        let mut g: Vec<f64> = (0..nf).map(|f| gamma_hat[(k, f)]).collect();
        let mut d: Vec<f64> = (0..nf).map(|f| delta2_hat[(k, f)]).collect();
        let mut change = f64::INFINITY;
        for _ in 0..max_iter {
            change = 0.0;
            for f in 0..nf {
                // A zero prior variance collapses the posterior to the prior
                // mean; branching keeps that case exact instead of d*g/d.
                let g_new = if n_s * tau2 > 0.0 {
                    (n_s * tau2 * gamma_hat[(k, f)] + d[f] * gbar) / (n_s * tau2 + d[f])
                } else {
                    gbar
                };
                let ss = sum_z2[f] - 2.0 * g_new * sum_z[f] + n_s * g_new * g_new;
                let d_new = (theta + 0.5 * ss) / (n_s / 2.0 + lambda - 1.0);
                change = change.max((g_new - g[f]).abs()).max((d_new - d[f]).abs());
                g[f] = g_new;
                d[f] = d_new;
            }
            if change < tol {
                break;
            }
        }
        if !(change < tol) {
            warnings.push(FitWarning::EbNonConvergence {
                site: sites.label(k).to_string(),
                change,
            });
        }
        for f in 0..nf {
            gamma_star[(k, f)] = g[f];
            delta2_star[(k, f)] = d[f];
        }
    }
    Ok((gamma_star, delta2_star, warnings))
}

/// Removes the starred site effects on the standardized scale and restores
/// the covariate baseline.
pub fn apply_harmonization(
    cohort: &CohortTable,
    model: &HarmonizationModel,
) -> Result<Harmonized, CombatError> {
    let std_model = &model.standardization;
    check_cohort_matches(cohort, std_model)?;
    let site_of: Vec<usize> = cohort
        .site_labels()
        .iter()
        .map(|label| {
            std_model
                .site_order
                .binary_search_by(|l| l.as_str().cmp(label))
                .map_err(|_| CombatError::UnknownSite(label.clone()))
        })
        .collect::<Result<_, _>>()?;

    let (base, clamped_ages) = predict_baseline(cohort, std_model);
    let n = cohort.n_subjects();
    let nf = std_model.feature_names.len();
    let mut out = Array2::zeros((n, nf));
    for f in 0..nf {
        let sigma = std_model.sigma[f];
        for i in 0..n {
            let s = site_of[i];
            let z = (cohort.features()[(i, f)] - base[(i, f)]) / sigma;
            let adj = (z - model.site_params.gamma_star[(s, f)])
                / model.site_params.delta2_star[(s, f)].sqrt();
            out[(i, f)] = sigma * adj + base[(i, f)];
        }
    }
    Ok(Harmonized { table: cohort.with_features(out)?, clamped_ages })
}

fn config_fingerprint(spec: &SmoothSpec, config: &FitConfig) -> String {
    #[derive(Serialize)]
    struct Config<'a> {
        spec: &'a SmoothSpec,
        eb: bool,
        eb_tol: f64,
        eb_max_iter: usize,
        terms: &'a ModelTerms,
    }
    let blob = serde_json::to_string(&Config {
        spec,
        eb: config.eb,
        eb_tol: config.eb_tol,
        eb_max_iter: config.eb_max_iter,
        terms: &config.terms,
    })
    .expect("config serializes");
    format!("{:016x}", fnv1a64(blob.as_bytes()))
}

/// The full pipeline: standardization fit, site-parameter estimation, and
/// (optionally) empirical Bayes shrinkage. Deterministic given its inputs.
pub fn fit_combat_gam(
    cohort: &CohortTable,
    spec: &SmoothSpec,
    config: &FitConfig,
) -> Result<FitOutcome, CombatError> {
    let violations = cohort.validate();
    if !violations.is_empty() {
        return Err(CombatError::InvalidCohort(violations));
    }
    let sites = cohort.site_index();
    if sites.len() < 2 {
        return Err(CombatError::NeedTwoSites(sites.len()));
    }
    if config.eb && cohort.n_features() < 2 {
        return Err(CombatError::TooFewFeatures(cohort.n_features()));
    }

    let standardization = fit_standardization(cohort, spec, &config.terms)?;
    let standardized = standardize(cohort, &standardization)?;
    let (gamma_hat, delta2_hat) =
        estimate_site_params(&standardized.z, cohort.site_labels())?;

    let mut warnings = Vec::new();
    let (eb_params, gamma_star, delta2_star) = if config.eb {
        let (hyper, mut w1) = estimate_eb_hyperparams(
            &gamma_hat,
            &delta2_hat,
            &standardization.site_order,
        )?;
        let (g_star, d_star, mut w2) = eb_shrink(
            &standardized.z,
            cohort.site_labels(),
            &gamma_hat,
            &delta2_hat,
            &hyper,
            config.eb_tol,
            config.eb_max_iter,
        )?;
        warnings.append(&mut w1);
        warnings.append(&mut w2);
        (hyper, g_star, d_star)
    } else {
        let s = sites.len();
        let empty = EBHyperparams {
            gamma_bar: vec![0.0; s],
            tau2_bar: vec![0.0; s],
            lambda_bar: vec![None; s],
            theta_bar: vec![None; s],
        };
        (empty, gamma_hat.clone(), delta2_hat.clone())
    };

    let model = HarmonizationModel {
        standardization,
        site_params: SiteParams { gamma_hat, delta2_hat, gamma_star, delta2_star },
        eb: eb_params,
        eb_enabled: config.eb,
        fingerprint: config_fingerprint(spec, config),
    };
    Ok(FitOutcome { model, warnings })
}

/// Residuals of each feature after removing the covariate baseline fitted
/// without any site structure. Used to test whether covariate signal alone
/// explains apparent site differences.
pub fn residualize_covariates(
    cohort: &CohortTable,
    spec: &SmoothSpec,
    terms: &ModelTerms,
) -> Result<Array2<f64>, CombatError> {
    let sites = cohort.site_index();
    let model = fit_standardization_impl(cohort, &sites, spec, terms, false)?;
    let (base, _) = predict_baseline(cohort, &model);
    let mut out = cohort.features().clone();
    for f in 0..out.ncols() {
        for i in 0..out.nrows() {
            out[(i, f)] -= base[(i, f)];
        }
    }
    Ok(out)
}
