//! Generative simulator for multi-site cohorts with known ground truth.
//!
//! Draws follow the additive model exactly: Y = alpha + f(age) + beta*sex
//! + gamma_s + delta_s * noise_sd * eps, with every random quantity taken
//! from one documented stream in a fixed order, so a seed pins the full
//! cohort byte for byte. Draw order: ages (subjects are site-major), then
//! sexes, then per-feature truth (alpha, trajectory parameters, beta_sex),
//! then the gamma table (site-major), then the delta-squared table
//! (site-major), then eps in subject-major order.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CohortTable, MIN_SITE_SIZE};
use crate::combat::HarmonizationModel;
use crate::rng::Rng;
use crate::serialize::{array2_rows, json_f64};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("ground truth does not match the model: {0}")]
    DimensionMismatch(String),
}

/// Law for the per-site multiplicative variance effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum DeltaLaw {
    /// delta^2 ~ InverseGamma(shape, scale); mean scale/(shape-1).
    InverseGamma { shape: f64, scale: f64 },
    /// Every delta^2 equal to the given value; no randomness consumed.
    Fixed { value: f64 },
}

/// Family of smooth age trajectories, one parameter draw per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TrajectoryFamily {
    /// f(age) = A * (1 - exp(-age/tau)), a saturating rise from zero.
    /// Parameters per feature: [A, tau].
    SaturatingExp { amplitude: [f64; 2], tau: [f64; 2] },
    /// f(age) = sum_k c_k * u^k for k = 1..=degree, with u the age rescaled
    /// to [0, 1] over the configured range. Parameters per feature: the c_k.
    Polynomial { degree: usize, coefficient: [f64; 2] },
}

impl TrajectoryFamily {
    fn draw_params(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            TrajectoryFamily::SaturatingExp { amplitude, tau } => {
                vec![rng.uniform_in(amplitude[0], amplitude[1]), rng.uniform_in(tau[0], tau[1])]
            }
            TrajectoryFamily::Polynomial { degree, coefficient } => (0..*degree)
                .map(|_| rng.uniform_in(coefficient[0], coefficient[1]))
                .collect(),
        }
    }

    fn value(&self, params: &[f64], age: f64, age_range: [f64; 2]) -> f64 {
        match self {
            TrajectoryFamily::SaturatingExp { .. } => {
                params[0] * (1.0 - (-age / params[1]).exp())
            }
            TrajectoryFamily::Polynomial { .. } => {
                let span = age_range[1] - age_range[0];
                let u = if span > 0.0 { (age - age_range[0]) / span } else { 0.0 };
                let mut acc = 0.0;
                let mut p = 1.0;
                for &c in params {
                    p *= u;
                    acc += c * p;
                }
                acc
            }
        }
    }
}

/// Full description of a simulated cohort. Defaults reproduce a six-site
/// infant imaging study: 437 subjects, 268 tract features (four diffusion
/// metrics by 67 bundles), ages under 0.2 years.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_sites: usize,
    pub subjects_per_site: Vec<usize>,
    pub n_features: usize,
    pub age_range: [f64; 2],
    pub alpha_range: [f64; 2],
    pub trajectory: TrajectoryFamily,
    pub beta_sex_range: [f64; 2],
    pub gamma_sd: f64,
    pub delta_law: DeltaLaw,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sites: 6,
            subjects_per_site: vec![73, 73, 73, 73, 73, 72],
            n_features: 268,
            age_range: [0.0, 0.2],
            alpha_range: [0.3, 0.7],
            trajectory: TrajectoryFamily::SaturatingExp {
                amplitude: [0.25, 0.5],
                tau: [0.04, 0.1],
            },
            beta_sex_range: [-0.12, 0.12],
            gamma_sd: 0.075,
            delta_law: DeltaLaw::InverseGamma { shape: 15.0, scale: 14.0 },
            noise_sd: 0.15,
            seed: 42,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<(), SynthError> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(SynthError::InvalidConfig(format!(
            "{name} must be a finite interval [lo, hi], got [{}, {}]",
            r[0], r[1]
        )));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_sites < 2 {
            return Err(SynthError::InvalidConfig(format!(
                "need at least 2 sites, got {}",
                self.n_sites
            )));
        }
        if self.subjects_per_site.len() != self.n_sites {
            return Err(SynthError::InvalidConfig(format!(
                "subjects_per_site has {} entries for {} sites",
                self.subjects_per_site.len(),
                self.n_sites
            )));
        }
        if let Some(&k) = self.subjects_per_site.iter().find(|&&k| k < MIN_SITE_SIZE) {
            return Err(SynthError::InvalidConfig(format!(
                "every site needs at least {MIN_SITE_SIZE} subjects, got {k}"
            )));
        }
        if self.n_features < 2 {
            return Err(SynthError::InvalidConfig(format!(
                "need at least 2 features, got {}",
                self.n_features
            )));
        }
        check_range("age_range", self.age_range)?;
        check_range("alpha_range", self.alpha_range)?;
        check_range("beta_sex_range", self.beta_sex_range)?;
        match &self.trajectory {
            TrajectoryFamily::SaturatingExp { amplitude, tau } => {
                check_range("amplitude", *amplitude)?;
                check_range("tau", *tau)?;
                if tau[0] <= 0.0 {
                    return Err(SynthError::InvalidConfig(format!(
                        "tau must be positive, got lower bound {}",
                        tau[0]
                    )));
                }
            }
            TrajectoryFamily::Polynomial { degree, coefficient } => {
                if *degree == 0 {
                    return Err(SynthError::InvalidConfig(
                        "polynomial trajectory needs degree >= 1".into(),
                    ));
                }
                check_range("coefficient", *coefficient)?;
            }
        }
        if !(self.gamma_sd >= 0.0 && self.gamma_sd.is_finite()) {
            return Err(SynthError::InvalidConfig(format!(
                "gamma_sd must be nonnegative, got {}",
                self.gamma_sd
            )));
        }
        match self.delta_law {
            DeltaLaw::InverseGamma { shape, scale } => {
                // shape > 2 keeps the variance of delta^2 finite.
                if !(shape > 2.0) || !(scale > 0.0) {
                    return Err(SynthError::InvalidConfig(format!(
                        "inverse-gamma law needs shape > 2 and scale > 0, got ({shape}, {scale})"
                    )));
                }
            }
            DeltaLaw::Fixed { value } => {
                if !(value > 0.0) {
                    return Err(SynthError::InvalidConfig(format!(
                        "fixed delta^2 must be positive, got {value}"
                    )));
                }
            }
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(SynthError::InvalidConfig(format!(
                "noise_sd must be nonnegative, got {}",
                self.noise_sd
            )));
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects_per_site.iter().sum()
    }
}

const METRICS: [&str; 4] = ["FA", "AD", "RD", "LI"];

/// "{metric}_{bundle}" names cycling through the four diffusion metrics.
fn feature_names(nf: usize) -> Vec<String> {
    (0..nf)
        .map(|f| format!("{}_b{:02}", METRICS[f % METRICS.len()], f / METRICS.len() + 1))
        .collect()
}

/// Everything the generator injected, for scoring recovery afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGroundTruth {
    pub seed: u64,
    pub site_labels: Vec<String>,
    pub feature_names: Vec<String>,
    pub age_range: [f64; 2],
    pub alpha: Vec<f64>,
    pub trajectory: TrajectoryFamily,
    /// Per-feature trajectory parameters, meaning set by the family.
    pub trajectory_params: Vec<Vec<f64>>,
    pub beta_sex: Vec<f64>,
    #[serde(with = "array2_rows")]
    pub gamma: Array2<f64>,
    #[serde(with = "array2_rows")]
    pub delta2: Array2<f64>,
    pub noise_sd: Vec<f64>,
}

impl SynthGroundTruth {
    /// True age trajectory for feature `f` at `age`.
    pub fn trajectory_value(&self, f: usize, age: f64) -> f64 {
        self.trajectory.value(&self.trajectory_params[f], age, self.age_range)
    }
}

/// Samples a cohort from the model. Deterministic given the config.
pub fn generate_cohort(
    config: &SynthConfig,
) -> Result<(CohortTable, SynthGroundTruth), SynthError> {
    config.validate()?;
    let mut rng = Rng::from_seed(config.seed);
    let s = config.n_sites;
    let nf = config.n_features;
    let n = config.n_subjects();

    let site_names: Vec<String> = (1..=s).map(|k| format!("site{k:02}")).collect();
    let mut site_labels = Vec::with_capacity(n);
    let mut site_of = Vec::with_capacity(n);
    for (k, &count) in config.subjects_per_site.iter().enumerate() {
        for _ in 0..count {
            site_labels.push(site_names[k].clone());
            site_of.push(k);
        }
    }

    let ages: Vec<f64> =
        (0..n).map(|_| rng.uniform_in(config.age_range[0], config.age_range[1])).collect();
    let sexes: Vec<u8> = (0..n).map(|_| u8::from(rng.uniform() < 0.5)).collect();

    let mut alpha = Vec::with_capacity(nf);
    let mut trajectory_params = Vec::with_capacity(nf);
    let mut beta_sex = Vec::with_capacity(nf);
    for _ in 0..nf {
        alpha.push(rng.uniform_in(config.alpha_range[0], config.alpha_range[1]));
        trajectory_params.push(config.trajectory.draw_params(&mut rng));
        beta_sex.push(rng.uniform_in(config.beta_sex_range[0], config.beta_sex_range[1]));
    }

    let mut gamma = Array2::zeros((s, nf));
    for k in 0..s {
        for f in 0..nf {
            gamma[(k, f)] = config.gamma_sd * rng.normal();
        }
    }
    let mut delta2 = Array2::zeros((s, nf));
    for k in 0..s {
        for f in 0..nf {
            delta2[(k, f)] = match config.delta_law {
                DeltaLaw::InverseGamma { shape, scale } => rng.inv_gamma(shape, scale),
                DeltaLaw::Fixed { value } => value,
            };
        }
    }

    let mut features = Array2::zeros((n, nf));
    for i in 0..n {
        let k = site_of[i];
        for f in 0..nf {
            let eps = rng.normal();
            features[(i, f)] = alpha[f]
                + config.trajectory.value(&trajectory_params[f], ages[i], config.age_range)
                + beta_sex[f] * sexes[i] as f64
                + gamma[(k, f)]
                + delta2[(k, f)].sqrt() * config.noise_sd * eps;
        }
    }

    let names = feature_names(nf);
    let cohort = CohortTable::new(
        (1..=n).map(|i| format!("sub-{i:04}")).collect(),
        site_labels,
        ages,
        sexes,
        Vec::new(),
        Array2::zeros((n, 0)),
        names.clone(),
        features,
    )
    .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;

    let truth = SynthGroundTruth {
        seed: config.seed,
        site_labels: site_names,
        feature_names: names,
        age_range: config.age_range,
        alpha,
        trajectory: config.trajectory.clone(),
        trajectory_params,
        beta_sex,
        gamma,
        delta2,
        noise_sd: vec![config.noise_sd; nf],
    };
    Ok((cohort, truth))
}

/// Correlation and error of the fitted site parameters against the injected
/// ones, plus the sex-slope recovery error.
///
/// The comparison is made on the raw data scale and against the identifiable
/// part of the truth: fitted gammas are multiplied back by sigma_f, and the
/// site-size-weighted per-feature mean of the true gammas is removed, since
/// the fit absorbs it into alpha by construction. Fitted delta-squares are
/// rescaled by sigma_f^2 / noise_sd_f^2, which undoes the pooled-variance
/// normalization without any centering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    #[serde(with = "json_f64")]
    pub gamma_hat_corr: f64,
    pub gamma_hat_rmse: f64,
    #[serde(with = "json_f64")]
    pub gamma_star_corr: f64,
    pub gamma_star_rmse: f64,
    #[serde(with = "json_f64")]
    pub delta2_hat_corr: f64,
    pub delta2_hat_rmse: f64,
    #[serde(with = "json_f64")]
    pub delta2_star_corr: f64,
    pub delta2_star_rmse: f64,
    pub beta_sex_rmse: f64,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    (a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt()
}

pub fn score_recovery(
    truth: &SynthGroundTruth,
    model: &HarmonizationModel,
) -> Result<RecoveryMetrics, SynthError> {
    let std_model = &model.standardization;
    if std_model.feature_names != truth.feature_names {
        return Err(SynthError::DimensionMismatch(
            "feature names differ between truth and model".into(),
        ));
    }
    let s = std_model.site_order.len();
    let nf = truth.feature_names.len();
    if truth.gamma.dim() != (s, nf) || truth.delta2.dim() != (s, nf) {
        return Err(SynthError::DimensionMismatch(format!(
            "truth tables are {:?}, model expects ({s}, {nf})",
            truth.gamma.dim()
        )));
    }
    // Model rows are in sorted site order; map each to the truth row.
    let truth_row: Vec<usize> = std_model
        .site_order
        .iter()
        .map(|label| {
            truth
                .site_labels
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| SynthError::DimensionMismatch(format!("unknown site \"{label}\"")))
        })
        .collect::<Result<_, _>>()?;

    let weights: Vec<f64> = std_model.site_sizes.iter().map(|&k| k as f64).collect();
    let wsum: f64 = weights.iter().sum();

    let mut g_true = Vec::with_capacity(s * nf);
    let mut g_hat = Vec::with_capacity(s * nf);
    let mut g_star = Vec::with_capacity(s * nf);
    let mut d_true = Vec::with_capacity(s * nf);
    let mut d_hat = Vec::with_capacity(s * nf);
    let mut d_star = Vec::with_capacity(s * nf);
    for f in 0..nf {
        let wmean: f64 = (0..s)
            .map(|k| weights[k] * truth.gamma[(truth_row[k], f)])
            .sum::<f64>()
            / wsum;
        let sigma = std_model.sigma[f];
        let d_scale = sigma * sigma / (truth.noise_sd[f] * truth.noise_sd[f]);
        for k in 0..s {
            g_true.push(truth.gamma[(truth_row[k], f)] - wmean);
            g_hat.push(model.site_params.gamma_hat[(k, f)] * sigma);
            g_star.push(model.site_params.gamma_star[(k, f)] * sigma);
            d_true.push(truth.delta2[(truth_row[k], f)]);
            d_hat.push(model.site_params.delta2_hat[(k, f)] * d_scale);
            d_star.push(model.site_params.delta2_star[(k, f)] * d_scale);
        }
    }

    let beta_sex_rmse = rmse(&std_model.beta_sex, &truth.beta_sex);
    Ok(RecoveryMetrics {
        gamma_hat_corr: pearson(&g_true, &g_hat),
        gamma_hat_rmse: rmse(&g_true, &g_hat),
        gamma_star_corr: pearson(&g_true, &g_star),
        gamma_star_rmse: rmse(&g_true, &g_star),
        delta2_hat_corr: pearson(&d_true, &d_hat),
        delta2_hat_rmse: rmse(&d_true, &d_hat),
        delta2_star_corr: pearson(&d_true, &d_star),
        delta2_star_rmse: rmse(&d_true, &d_star),
        beta_sex_rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::write_cohort_csv_to;
    use crate::combat::{fit_combat_gam, FitConfig};
    use crate::gam::SmoothSpec;
    use crate::serialize::to_json_g17;

    fn small_config(seed: u64) -> SynthConfig {
        SynthConfig {
            n_sites: 3,
            subjects_per_site: vec![30, 25, 35],
            n_features: 8,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid_at_paper_scale() {
        let config = SynthConfig::default();
        config.validate().unwrap();
        assert_eq!(config.n_subjects(), 437);
        assert_eq!(config.n_features, 268);
        assert_eq!(config.n_sites, 6);
    }

    #[test]
    fn config_rejections_name_the_problem() {
        let mut c = small_config(1);
        c.n_sites = 1;
        c.subjects_per_site = vec![10];
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("at least 2 sites"), "{err}");

        let mut c = small_config(1);
        c.subjects_per_site = vec![30, 25];
        assert!(c.validate().is_err());

        let mut c = small_config(1);
        c.subjects_per_site[1] = 2;
        assert!(c.validate().is_err());

        let mut c = small_config(1);
        c.n_features = 1;
        assert!(c.validate().is_err());

        let mut c = small_config(1);
        c.age_range = [0.3, 0.1];
        assert!(c.validate().is_err());

        let mut c = small_config(1);
        c.delta_law = DeltaLaw::InverseGamma { shape: 2.0, scale: 1.0 };
        assert!(c.validate().is_err());

        let mut c = small_config(1);
        c.trajectory = TrajectoryFamily::SaturatingExp { amplitude: [0.2, 0.4], tau: [0.0, 0.1] };
        assert!(c.validate().is_err());
    }

    #[test]
    fn feature_names_cycle_metrics_then_bundles() {
        let names = feature_names(268);
        assert_eq!(names[0], "FA_b01");
        assert_eq!(names[1], "AD_b01");
        assert_eq!(names[2], "RD_b01");
        assert_eq!(names[3], "LI_b01");
        assert_eq!(names[4], "FA_b02");
        assert_eq!(names[267], "LI_b67");
    }

    /// With every noise source switched off the generated features are the
    /// deterministic covariate surface, term for term.
    #[test]
    fn noiseless_limit_is_exact_covariate_function() {
        let config = SynthConfig {
            gamma_sd: 0.0,
            delta_law: DeltaLaw::Fixed { value: 1.0 },
            noise_sd: 0.0,
            ..small_config(5)
        };
        let (cohort, truth) = generate_cohort(&config).unwrap();
        for f in 0..config.n_features {
            for i in 0..cohort.n_subjects() {
                let expect = truth.alpha[f]
                    + truth.trajectory_value(f, cohort.ages()[i])
                    + truth.beta_sex[f] * cohort.sexes()[i] as f64;
                assert_eq!(cohort.features()[(i, f)].to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_csv_and_truth() {
        let config = small_config(42);
        let (c1, t1) = generate_cohort(&config).unwrap();
        let (c2, t2) = generate_cohort(&config).unwrap();
        let mut buf1 = Vec::new();
        let mut buf2 = Vec::new();
        write_cohort_csv_to(&c1, &mut buf1, &Default::default()).unwrap();
        write_cohort_csv_to(&c2, &mut buf2, &Default::default()).unwrap();
        assert_eq!(buf1, buf2);
        assert_eq!(to_json_g17(&t1).unwrap(), to_json_g17(&t2).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        let (c1, _) = generate_cohort(&small_config(1)).unwrap();
        let (c2, _) = generate_cohort(&small_config(2)).unwrap();
        assert_ne!(c1.features(), c2.features());
    }

    #[test]
    fn generated_cohort_passes_validation_with_noise() {
        for seed in [1, 2, 3] {
            let (cohort, _) = generate_cohort(&small_config(seed)).unwrap();
            assert!(cohort.validate().is_empty());
        }
        let (cohort, _) = generate_cohort(&SynthConfig::default()).unwrap();
        assert!(cohort.validate().is_empty());
    }

    /// Site-mean differences in the generated data reflect the injected
    /// gamma table at the default scale.
    #[test]
    fn site_means_track_injected_gammas_at_paper_scale() {
        let (cohort, truth) = generate_cohort(&SynthConfig::default()).unwrap();
        let sites = cohort.site_index();
        let s = sites.len();
        let nf = cohort.n_features();
        let mut mean_dev = Vec::with_capacity(s * nf);
        let mut gamma_dev = Vec::with_capacity(s * nf);
        for f in 0..nf {
            let site_means: Vec<f64> = (0..s)
                .map(|k| {
                    let rows = sites.rows(k);
                    rows.iter().map(|&i| cohort.features()[(i, f)]).sum::<f64>()
                        / rows.len() as f64
                })
                .collect();
            let m_avg = site_means.iter().sum::<f64>() / s as f64;
            let g_avg = (0..s).map(|k| truth.gamma[(k, f)]).sum::<f64>() / s as f64;
            for k in 0..s {
                mean_dev.push(site_means[k] - m_avg);
                gamma_dev.push(truth.gamma[(k, f)] - g_avg);
            }
        }
        let r = pearson(&mean_dev, &gamma_dev);
        assert!(r > 0.9, "site-mean vs gamma correlation {r}");
    }

    #[test]
    fn recovery_scores_high_on_own_cohort_with_small_noise() {
        let config = SynthConfig { noise_sd: 0.05, ..SynthConfig::default() };
        let (cohort, truth) = generate_cohort(&config).unwrap();
        let outcome =
            fit_combat_gam(&cohort, &SmoothSpec::default(), &FitConfig::default()).unwrap();
        let metrics = score_recovery(&truth, &outcome.model).unwrap();
        assert!(metrics.gamma_hat_corr > 0.95, "gamma corr {}", metrics.gamma_hat_corr);
        assert!(metrics.delta2_hat_corr > 0.5, "delta2 corr {}", metrics.delta2_hat_corr);
        assert!(metrics.beta_sex_rmse < 0.02, "beta rmse {}", metrics.beta_sex_rmse);
    }

    #[test]
    fn zero_gamma_truth_and_zeroed_model_scores_zero_rmse() {
        let config = SynthConfig { gamma_sd: 0.0, ..small_config(9) };
        let (cohort, truth) = generate_cohort(&config).unwrap();
        let fit_config = FitConfig { eb: false, ..FitConfig::default() };
        let mut model =
            fit_combat_gam(&cohort, &SmoothSpec::default(), &fit_config).unwrap().model;
        let dim = model.site_params.gamma_star.dim();
        model.site_params.gamma_star = Array2::zeros(dim);
        let metrics = score_recovery(&truth, &model).unwrap();
        assert_eq!(metrics.gamma_star_rmse, 0.0);
    }

    /// Shuffling which subject belongs to which site destroys the match
    /// between fitted and injected site effects.
    #[test]
    fn shuffled_site_labels_score_near_zero() {
        let (cohort, truth) = generate_cohort(&SynthConfig::default()).unwrap();
        let mut labels = cohort.site_labels().to_vec();
        let mut rng = Rng::from_seed(99);
        for i in (1..labels.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            labels.swap(i, j);
        }
        let shuffled = CohortTable::new(
            cohort.subject_ids().to_vec(),
            labels,
            cohort.ages().to_vec(),
            cohort.sexes().to_vec(),
            Vec::new(),
            Array2::zeros((cohort.n_subjects(), 0)),
            cohort.feature_names().to_vec(),
            cohort.features().clone(),
        )
        .unwrap();
        let fit_config = FitConfig { eb: false, ..FitConfig::default() };
        let model =
            fit_combat_gam(&shuffled, &SmoothSpec::default(), &fit_config).unwrap().model;
        let metrics = score_recovery(&truth, &model).unwrap();
        assert!(
            metrics.gamma_hat_corr.abs() < 0.2,
            "shuffled corr {}",
            metrics.gamma_hat_corr
        );
    }

    #[test]
    fn mismatched_truth_is_rejected() {
        let (cohort, truth) = generate_cohort(&small_config(3)).unwrap();
        let other = SynthConfig { n_features: 6, ..small_config(3) };
        let (_, wrong_truth) = generate_cohort(&other).unwrap();
        let fit_config = FitConfig { eb: false, ..FitConfig::default() };
        let model =
            fit_combat_gam(&cohort, &SmoothSpec::default(), &fit_config).unwrap().model;
        assert!(score_recovery(&wrong_truth, &model).is_err());
        assert!(score_recovery(&truth, &model).is_ok());
    }

    #[test]
    fn config_round_trips_through_json() {
        let config = SynthConfig::default();
        let json = to_json_g17(&config).unwrap();
        let parsed: SynthConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, config);
        let err = serde_json::from_str::<SynthConfig>("{\"bogus_field\": 1}");
        assert!(err.is_err());
    }

    #[test]
    fn polynomial_trajectory_is_supported() {
        let config = SynthConfig {
            trajectory: TrajectoryFamily::Polynomial { degree: 2, coefficient: [-0.2, 0.4] },
            ..small_config(13)
        };
        let (cohort, truth) = generate_cohort(&config).unwrap();
        assert!(cohort.validate().is_empty());
        assert_eq!(truth.trajectory_params[0].len(), 2);
        // u = 1 at the top of the age range: f = c1 + c2.
        let f0 = truth.trajectory_value(0, config.age_range[1]);
        let p = &truth.trajectory_params[0];
        assert!((f0 - (p[0] + p[1])).abs() < 1e-12);
    }

    #[test]
    fn stronger_site_shifts_give_larger_effect_sizes() {
        // Dialing gamma_sd up must push the median Cohen's f across features
        // up with it, seed by seed.
        let ladder = [0.05, 0.15, 0.35];
        for seed in 0..10u64 {
            let mut medians = Vec::new();
            for &gamma_sd in &ladder {
                let config = SynthConfig { gamma_sd, ..small_config(seed) };
                let (cohort, _) = generate_cohort(&config).unwrap();
                let groups = cohort.site_labels().to_vec();
                let mut fs: Vec<f64> = (0..cohort.n_features())
                    .map(|f| {
                        let col: Vec<f64> = cohort.feature_column(f).iter().copied().collect();
                        crate::stats::cohens_f("x", &col, &groups).unwrap().f
                    })
                    .collect();
                fs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                medians.push(0.5 * (fs[3] + fs[4]));
            }
            assert!(
                medians[0] < medians[1] && medians[1] < medians[2],
                "seed {seed}: medians {medians:?} not increasing"
            );
        }
    }
}
