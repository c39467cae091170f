//! Residual site-effect evaluation: per-feature one-way ANOVA across sites,
//! Benjamini-Hochberg FDR within feature families, and Cohen's f effect
//! sizes with the study's binning scheme.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CohortTable, SiteIndex};
use crate::serialize::{g17, json_f64};
use crate::special::f_sf;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("degenerate groups: {0}")]
    DegenerateGroups(String),
    #[error("values and group labels disagree in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("q must be in (0, 1], got {0}")]
    InvalidQ(f64),
    #[error("feature \"{0}\" has no family assignment")]
    MissingFamily(String),
    #[error("csv write failed: {0}")]
    Csv(#[from] csv::Error),
}

/// One-way ANOVA of a single feature across groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub feature: String,
    /// Between/within mean-square ratio; infinite when the within-group
    /// variance is zero.
    #[serde(with = "json_f64")]
    pub f_stat: f64,
    pub df_between: usize,
    pub df_within: usize,
    /// Upper tail probability of the F distribution; 0 when f_stat is
    /// infinite.
    pub p_value: f64,
    /// Fraction of total variance between groups.
    pub eta_squared: f64,
    /// Zero within-group variance: the statistic is off the F scale.
    pub degenerate: bool,
}

/// Bin for the absolute Cohen's f effect size. The boundaries follow the
/// study scheme (small at or below 0.1, medium up to 0.25, large beyond),
/// not the canonical 0.10 / 0.25 / 0.40 anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectBin {
    Small,
    Medium,
    Large,
}

impl EffectBin {
    pub fn from_f(f: f64) -> EffectBin {
        if f <= 0.1 {
            EffectBin::Small
        } else if f <= 0.25 {
            EffectBin::Medium
        } else {
            EffectBin::Large
        }
    }
}

impl std::fmt::Display for EffectBin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EffectBin::Small => "small",
            EffectBin::Medium => "medium",
            EffectBin::Large => "large",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub feature: String,
    /// Absolute Cohen's f; infinite when eta squared is 1.
    #[serde(with = "json_f64")]
    pub f: f64,
    pub bin: EffectBin,
    /// Within-group variance was zero; f is off the scale and binned large.
    pub degenerate: bool,
}

struct SumsOfSquares {
    ss_between: f64,
    ss_within: f64,
    n_groups: usize,
    n: usize,
}

fn sums_of_squares(values: &[f64], groups: &[String]) -> Result<SumsOfSquares, StatsError> {
    if values.len() != groups.len() {
        return Err(StatsError::LengthMismatch(values.len(), groups.len()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite(i));
    }
    let sites = SiteIndex::from_labels(groups);
    sums_of_squares_indexed(values, &sites)
}

fn sums_of_squares_indexed(
    values: &[f64],
    sites: &SiteIndex,
) -> Result<SumsOfSquares, StatsError> {
    let s = sites.len();
    if s < 2 {
        return Err(StatsError::DegenerateGroups(format!("need at least 2 groups, found {s}")));
    }
    let n = values.len();
    let grand = values.iter().sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for k in 0..s {
        let rows = sites.rows(k);
        if rows.len() < 2 {
            return Err(StatsError::DegenerateGroups(format!(
                "group \"{}\" has {} values, need at least 2",
                sites.label(k),
                rows.len()
            )));
        }
        let m = rows.iter().map(|&i| values[i]).sum::<f64>() / rows.len() as f64;
        ss_between += rows.len() as f64 * (m - grand) * (m - grand);
        ss_within += rows.iter().map(|&i| (values[i] - m) * (values[i] - m)).sum::<f64>();
    }
    if ss_between + ss_within <= 0.0 {
        return Err(StatsError::DegenerateGroups("total variance is zero".into()));
    }
    Ok(SumsOfSquares { ss_between, ss_within, n_groups: s, n })
}

fn anova_from_ss(feature: &str, ss: &SumsOfSquares) -> AnovaResult {
    let df_between = ss.n_groups - 1;
    let df_within = ss.n - ss.n_groups;
    if ss.ss_within <= 0.0 {
        return AnovaResult {
            feature: feature.to_string(),
            f_stat: f64::INFINITY,
            df_between,
            df_within,
            p_value: 0.0,
            eta_squared: 1.0,
            degenerate: true,
        };
    }
    let f_stat = (ss.ss_between / df_between as f64) / (ss.ss_within / df_within as f64);
    AnovaResult {
        feature: feature.to_string(),
        f_stat,
        df_between,
        df_within,
        p_value: f_sf(f_stat, df_between as f64, df_within as f64)
            .expect("finite F and positive dfs are in the domain"),
        eta_squared: ss.ss_between / (ss.ss_between + ss.ss_within),
        degenerate: false,
    }
}

fn effect_from_ss(feature: &str, ss: &SumsOfSquares) -> EffectSize {
    if ss.ss_within <= 0.0 {
        return EffectSize {
            feature: feature.to_string(),
            f: f64::INFINITY,
            bin: EffectBin::Large,
            degenerate: true,
        };
    }
    let f = (ss.ss_between / ss.ss_within).sqrt();
    EffectSize { feature: feature.to_string(), f, bin: EffectBin::from_f(f), degenerate: false }
}

/// F test of equal group means. Infinite F (zero within-group variance)
/// comes back flagged with p = 0 instead of failing, so one pathological
/// feature cannot abort a whole run.
pub fn anova_oneway(
    feature: &str,
    values: &[f64],
    groups: &[String],
) -> Result<AnovaResult, StatsError> {
    let ss = sums_of_squares(values, groups)?;
    Ok(anova_from_ss(feature, &ss))
}

/// Absolute Cohen's f: sqrt(eta^2 / (1 - eta^2)) = sqrt(SS_between /
/// SS_within), binned by the study thresholds.
pub fn cohens_f(
    feature: &str,
    values: &[f64],
    groups: &[String],
) -> Result<EffectSize, StatsError> {
    let ss = sums_of_squares(values, groups)?;
    Ok(effect_from_ss(feature, &ss))
}

/// Benjamini-Hochberg step-up. Returns the adjusted p-values (monotone over
/// the sorted order) and rejection flags at level `q`, both in input order.
pub fn bh_fdr(p_values: &[f64], q: f64) -> Result<(Vec<f64>, Vec<bool>), StatsError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(StatsError::InvalidQ(q));
    }
    for (i, &p) in p_values.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(StatsError::NonFinite(i));
        }
    }
    let m = p_values.len();
    if m == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].partial_cmp(&p_values[b]).unwrap());
    // Suffix minimum of m*p_(j)/j implements the step-up in one pass.
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let idx = order[rank];
        let candidate = (m as f64 * p_values[idx] / (rank + 1) as f64).min(1.0);
        running = running.min(candidate);
        adjusted[idx] = running;
    }
    let rejected: Vec<bool> = adjusted.iter().map(|&a| a <= q).collect();
    Ok((adjusted, rejected))
}

/// How features are grouped into FDR families.
#[derive(Debug, Clone, PartialEq)]
pub enum FamilyRule {
    /// Family = feature-name prefix before the first underscore (the whole
    /// name when there is none). Matches "{metric}_{bundle}" naming.
    MetricPrefix,
    /// All features form one family.
    Single,
    /// Explicit feature -> family table; every feature must appear.
    Map(BTreeMap<String, String>),
}

impl FamilyRule {
    /// Resolves the family a feature belongs to under this rule.
    pub fn family_of(&self, feature: &str) -> Result<String, StatsError> {
        match self {
            FamilyRule::MetricPrefix => {
                Ok(feature.split('_').next().unwrap_or(feature).to_string())
            }
            FamilyRule::Single => Ok("all".to_string()),
            FamilyRule::Map(map) => map
                .get(feature)
                .cloned()
                .ok_or_else(|| StatsError::MissingFamily(feature.to_string())),
        }
    }

    fn describe(&self) -> String {
        match self {
            FamilyRule::MetricPrefix => "metric prefix of the feature name".into(),
            FamilyRule::Single => "single family".into(),
            FamilyRule::Map(_) => "explicit feature-to-family table".into(),
        }
    }
}

/// Everything evaluated for one feature, in one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEvaluation {
    pub feature: String,
    pub family: String,
    #[serde(with = "json_f64")]
    pub f_stat: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p_value: f64,
    pub eta_squared: f64,
    pub adjusted_p: f64,
    pub rejected: bool,
    #[serde(with = "json_f64")]
    pub effect_f: f64,
    pub effect_bin: EffectBin,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub family: String,
    pub n_features: usize,
    pub n_rejected: usize,
    #[serde(with = "json_f64")]
    pub median_effect_f: f64,
    pub median_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCounts {
    pub small: usize,
    pub medium: usize,
    pub large: usize,
    pub small_pct: f64,
    pub medium_pct: f64,
    pub large_pct: f64,
}

/// Full evaluation output: per-feature rows, per-family summaries, bin
/// tallies, and the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<FeatureEvaluation>,
    pub families: Vec<FamilySummary>,
    pub bins: BinCounts,
    pub n_rejected: usize,
    pub q: f64,
    pub n_subjects: usize,
    pub n_sites: usize,
    pub family_rule: String,
    /// The study's binning boundaries.
    pub bin_scheme: String,
    /// The canonical anchors the study scheme deliberately departs from.
    pub bin_anchors_canonical: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Runs ANOVA and Cohen's f for every feature, applies BH-FDR within each
/// family at level `q`, and aggregates counts and medians.
pub fn evaluate_cohort(
    cohort: &CohortTable,
    rule: &FamilyRule,
    q: f64,
) -> Result<EvaluationReport, StatsError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(StatsError::InvalidQ(q));
    }
    let sites = cohort.site_index();
    let nf = cohort.n_features();
    let families: Vec<String> = cohort
        .feature_names()
        .iter()
        .map(|name| rule.family_of(name))
        .collect::<Result<_, _>>()?;

    struct PerFeature {
        anova: AnovaResult,
        effect: EffectSize,
    }
    let per_feature: Vec<PerFeature> = (0..nf)
        .into_par_iter()
        .map(|f| {
            let col: Vec<f64> = cohort.feature_column(f).iter().copied().collect();
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(StatsError::NonFinite(i));
            }
            let ss = sums_of_squares_indexed(&col, &sites)?;
            let name = &cohort.feature_names()[f];
            Ok(PerFeature { anova: anova_from_ss(name, &ss), effect: effect_from_ss(name, &ss) })
        })
        .collect::<Result<_, _>>()?;

    // FDR runs within each family over that family's raw p-values.
    let mut family_members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (f, family) in families.iter().enumerate() {
        family_members.entry(family).or_default().push(f);
    }
    let mut adjusted = vec![0.0; nf];
    let mut rejected = vec![false; nf];
    for members in family_members.values() {
        let ps: Vec<f64> = members.iter().map(|&f| per_feature[f].anova.p_value).collect();
        let (adj, rej) = bh_fdr(&ps, q)?;
        for (slot, &f) in members.iter().enumerate() {
            adjusted[f] = adj[slot];
            rejected[f] = rej[slot];
        }
    }

    let rows: Vec<FeatureEvaluation> = (0..nf)
        .map(|f| {
            let a = &per_feature[f].anova;
            let e = &per_feature[f].effect;
            FeatureEvaluation {
                feature: a.feature.clone(),
                family: families[f].clone(),
                f_stat: a.f_stat,
                df_between: a.df_between,
                df_within: a.df_within,
                p_value: a.p_value,
                eta_squared: a.eta_squared,
                adjusted_p: adjusted[f],
                rejected: rejected[f],
                effect_f: e.f,
                effect_bin: e.bin,
                degenerate: a.degenerate,
            }
        })
        .collect();

    let family_summaries: Vec<FamilySummary> = family_members
        .iter()
        .map(|(family, members)| FamilySummary {
            family: family.to_string(),
            n_features: members.len(),
            n_rejected: members.iter().filter(|&&f| rejected[f]).count(),
            median_effect_f: median(members.iter().map(|&f| per_feature[f].effect.f).collect()),
            median_p: median(members.iter().map(|&f| per_feature[f].anova.p_value).collect()),
        })
        .collect();

    let small = rows.iter().filter(|r| r.effect_bin == EffectBin::Small).count();
    let medium = rows.iter().filter(|r| r.effect_bin == EffectBin::Medium).count();
    let large = rows.iter().filter(|r| r.effect_bin == EffectBin::Large).count();
    let pct = |k: usize| 100.0 * k as f64 / nf as f64;

    Ok(EvaluationReport {
        n_rejected: rejected.iter().filter(|&&r| r).count(),
        rows,
        families: family_summaries,
        bins: BinCounts {
            small,
            medium,
            large,
            small_pct: pct(small),
            medium_pct: pct(medium),
            large_pct: pct(large),
        },
        q,
        n_subjects: cohort.n_subjects(),
        n_sites: sites.len(),
        family_rule: rule.describe(),
        bin_scheme: "small: f <= 0.1; medium: 0.1 < f <= 0.25; large: f > 0.25".into(),
        bin_anchors_canonical: "0.10 / 0.25 / 0.40".into(),
    })
}

impl EvaluationReport {
    /// One row per feature, floats at 17 significant digits.
    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<(), StatsError> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record([
            "feature",
            "family",
            "f_stat",
            "df_between",
            "df_within",
            "p_value",
            "eta_squared",
            "adjusted_p",
            "rejected",
            "effect_f",
            "effect_bin",
            "degenerate",
        ])?;
        for r in &self.rows {
            writer.write_record([
                r.feature.clone(),
                r.family.clone(),
                g17(r.f_stat),
                r.df_between.to_string(),
                r.df_within.to_string(),
                g17(r.p_value),
                g17(r.eta_squared),
                g17(r.adjusted_p),
                r.rejected.to_string(),
                g17(r.effect_f),
                r.effect_bin.to_string(),
                r.degenerate.to_string(),
            ])?;
        }
        writer.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
