//! Cohort data model: the subjects-by-features table with site, age, and sex
//! covariates, plus CSV ingestion and validation.
//!
//! A `CohortTable` is immutable once built. The constructor enforces the
//! structural rules (matching lengths, unique identifiers, binary sex codes)
//! and `validate` reports value-level problems (small sites, non-finite
//! cells, constant feature columns) as data rather than panicking, so callers
//! can show every problem at once.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::serialize::g17;

/// Smallest admissible number of subjects per site. Per-site variance needs
/// two, and the empirical Bayes moment estimates need the variance itself to
/// be nondegenerate, hence three.
pub const MIN_SITE_SIZE: usize = 3;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("missing required column \"{0}\"")]
    MissingColumn(String),
    #[error("non-numeric value {value:?} at row {row}, column \"{column}\"")]
    NonNumericCell { row: usize, column: String, value: String },
    #[error("non-finite value at row {row}, column \"{column}\"")]
    NonFiniteValue { row: usize, column: String },
    #[error("duplicate subject id \"{0}\"")]
    DuplicateSubjectId(String),
    #[error("sex must be coded 0 (male) or 1 (female), got {value:?} at row {row}")]
    InvalidSexCode { row: usize, value: String },
    #[error("duplicate feature name \"{0}\"")]
    DuplicateFeatureName(String),
    #[error("per-subject arrays disagree in length: {0}")]
    MismatchedLengths(String),
    #[error("table has no data rows")]
    EmptyTable,
    #[error("age filter removed every subject")]
    EmptyResult,
    #[error("site \"{site}\" has {count} subjects, need at least {MIN_SITE_SIZE}")]
    SiteTooSmall { site: String, count: usize },
    #[error("age filter requires min_age <= max_age, got [{min}, {max}]")]
    InvalidFilter { min: f64, max: f64 },
    #[error("cohort failed validation: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn format_violations(vs: &[Violation]) -> String {
    let parts: Vec<String> = vs.iter().map(|v| v.to_string()).collect();
    parts.join("; ")
}

/// One broken invariant, naming the rule and where it failed.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    SiteTooSmall { site: String, count: usize },
    ZeroVariance { feature: String },
    NonFinite { row: usize, column: String },
    NegativeAge { row: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SiteTooSmall { site, count } => {
                write!(f, "site \"{site}\" has {count} subjects, need at least {MIN_SITE_SIZE}")
            }
            Violation::ZeroVariance { feature } => {
                write!(f, "feature \"{feature}\" has zero sample variance")
            }
            Violation::NonFinite { row, column } => {
                write!(f, "non-finite value at row {row}, column \"{column}\"")
            }
            Violation::NegativeAge { row } => write!(f, "negative age at row {row}"),
        }
    }
}

/// Maps the required columns to their names in a CSV header. Every column not
/// named here is read as a feature, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSchema {
    pub subject: String,
    pub site: String,
    pub age: String,
    pub sex: String,
    /// Extra numeric covariates to model linearly alongside sex.
    pub extra_covariates: Vec<String>,
}

impl Default for CohortSchema {
    fn default() -> Self {
        CohortSchema {
            subject: "subject".into(),
            site: "site".into(),
            age: "age".into(),
            sex: "sex".into(),
            extra_covariates: Vec::new(),
        }
    }
}

/// Inclusive age window in years.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgeFilter {
    min_age: f64,
    max_age: f64,
}

impl AgeFilter {
    pub fn new(min_age: f64, max_age: f64) -> Result<Self, CohortError> {
        if !(min_age <= max_age) {
            return Err(CohortError::InvalidFilter { min: min_age, max: max_age });
        }
        Ok(AgeFilter { min_age, max_age })
    }

    pub fn min_age(&self) -> f64 {
        self.min_age
    }

    pub fn max_age(&self) -> f64 {
        self.max_age
    }

    pub fn contains(&self, age: f64) -> bool {
        self.min_age <= age && age <= self.max_age
    }
}

/// Subjects-by-features table with per-subject covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortTable {
    subject_ids: Vec<String>,
    site_labels: Vec<String>,
    age: Vec<f64>,
    sex: Vec<u8>,
    extra_names: Vec<String>,
    extras: Array2<f64>,
    feature_names: Vec<String>,
    features: Array2<f64>,
}

impl CohortTable {
    /// Builds a table, enforcing the structural rules. Value-level checks
    /// (site sizes, finiteness, variance) are left to `validate`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        subject_ids: Vec<String>,
        site_labels: Vec<String>,
        age: Vec<f64>,
        sex: Vec<u8>,
        extra_names: Vec<String>,
        extras: Array2<f64>,
        feature_names: Vec<String>,
        features: Array2<f64>,
    ) -> Result<Self, CohortError> {
        let n = subject_ids.len();
        if n == 0 {
            return Err(CohortError::EmptyTable);
        }
        for (name, len) in [
            ("site_labels", site_labels.len()),
            ("age", age.len()),
            ("sex", sex.len()),
            ("extras rows", extras.nrows()),
            ("features rows", features.nrows()),
        ] {
            if len != n {
                return Err(CohortError::MismatchedLengths(format!(
                    "{name} has length {len}, subject_ids has {n}"
                )));
            }
        }
        if extras.ncols() != extra_names.len() {
            return Err(CohortError::MismatchedLengths(format!(
                "{} extra names but {} extra columns",
                extra_names.len(),
                extras.ncols()
            )));
        }
        if features.ncols() != feature_names.len() {
            return Err(CohortError::MismatchedLengths(format!(
                "{} feature names but {} feature columns",
                feature_names.len(),
                features.ncols()
            )));
        }
        let mut seen = HashSet::new();
        for id in &subject_ids {
            if !seen.insert(id.as_str()) {
                return Err(CohortError::DuplicateSubjectId(id.clone()));
            }
        }
        let mut seen = HashSet::new();
        for name in feature_names.iter().chain(extra_names.iter()) {
            if !seen.insert(name.as_str()) {
                return Err(CohortError::DuplicateFeatureName(name.clone()));
            }
        }
        for (i, &s) in sex.iter().enumerate() {
            if s > 1 {
                return Err(CohortError::InvalidSexCode { row: i + 1, value: s.to_string() });
            }
        }
        Ok(CohortTable {
            subject_ids,
            site_labels,
            age,
            sex,
            extra_names,
            extras,
            feature_names,
            features,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn site_labels(&self) -> &[String] {
        &self.site_labels
    }

    pub fn ages(&self) -> &[f64] {
        &self.age
    }

    pub fn sexes(&self) -> &[u8] {
        &self.sex
    }

    pub fn extra_names(&self) -> &[String] {
        &self.extra_names
    }

    pub fn extras(&self) -> &Array2<f64> {
        &self.extras
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature_column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.features.column(j)
    }

    /// Returns a copy of this table with the feature matrix replaced, keeping
    /// every covariate column. Shapes and names must match.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self, CohortError> {
        CohortTable::new(
            self.subject_ids.clone(),
            self.site_labels.clone(),
            self.age.clone(),
            self.sex.clone(),
            self.extra_names.clone(),
            self.extras.clone(),
            self.feature_names.clone(),
            features,
        )
    }

    pub fn site_index(&self) -> SiteIndex {
        SiteIndex::from_labels(&self.site_labels)
    }

    /// Checks every value-level invariant, returning all breaches.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let index = self.site_index();
        for k in 0..index.len() {
            let count = index.rows(k).len();
            if count < MIN_SITE_SIZE {
                out.push(Violation::SiteTooSmall { site: index.label(k).to_string(), count });
            }
        }
        for (i, &a) in self.age.iter().enumerate() {
            if !a.is_finite() {
                out.push(Violation::NonFinite { row: i + 1, column: "age".into() });
            } else if a < 0.0 {
                out.push(Violation::NegativeAge { row: i + 1 });
            }
        }
        for (j, name) in self.extra_names.iter().enumerate() {
            for (i, &v) in self.extras.column(j).iter().enumerate() {
                if !v.is_finite() {
                    out.push(Violation::NonFinite { row: i + 1, column: name.clone() });
                }
            }
        }
        for (j, name) in self.feature_names.iter().enumerate() {
            let col = self.features.column(j);
            let mut any_bad = false;
            for (i, &v) in col.iter().enumerate() {
                if !v.is_finite() {
                    out.push(Violation::NonFinite { row: i + 1, column: name.clone() });
                    any_bad = true;
                }
            }
            if !any_bad && sample_variance(col) <= 0.0 {
                out.push(Violation::ZeroVariance { feature: name.clone() });
            }
        }
        out
    }

    /// Keeps exactly the subjects whose age lies in the window (inclusive on
    /// both ends). Sites that lose all subjects disappear; sites left with one
    /// or two are an error because downstream variance estimates need three.
    pub fn filter_age(&self, filter: &AgeFilter) -> Result<CohortTable, CohortError> {
        let keep: Vec<usize> =
            (0..self.n_subjects()).filter(|&i| filter.contains(self.age[i])).collect();
        if keep.is_empty() {
            return Err(CohortError::EmptyResult);
        }
        let labels: Vec<String> = keep.iter().map(|&i| self.site_labels[i].clone()).collect();
        let index = SiteIndex::from_labels(&labels);
        for k in 0..index.len() {
            let count = index.rows(k).len();
            if count < MIN_SITE_SIZE {
                return Err(CohortError::SiteTooSmall {
                    site: index.label(k).to_string(),
                    count,
                });
            }
        }
        let take_rows = |m: &Array2<f64>| -> Array2<f64> {
            let mut out = Array2::zeros((keep.len(), m.ncols()));
            for (r, &i) in keep.iter().enumerate() {
                out.row_mut(r).assign(&m.row(i));
            }
            out
        };
        CohortTable::new(
            keep.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            labels,
            keep.iter().map(|&i| self.age[i]).collect(),
            keep.iter().map(|&i| self.sex[i]).collect(),
            self.extra_names.clone(),
            take_rows(&self.extras),
            self.feature_names.clone(),
            take_rows(&self.features),
        )
    }
}

fn sample_variance(col: ArrayView1<'_, f64>) -> f64 {
    let n = col.len();
    if n < 2 {
        return 0.0;
    }
    let mean = col.sum() / n as f64;
    col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)
}

/// Sites in sorted label order with the row indices belonging to each.
/// Sorting makes every site-indexed output independent of row order quirks.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteIndex {
    labels: Vec<String>,
    rows: Vec<Vec<usize>>,
}

impl SiteIndex {
    pub fn from_labels(labels: &[String]) -> Self {
        let mut sorted: Vec<String> = labels.iter().cloned().collect::<HashSet<_>>().into_iter().collect();
        sorted.sort();
        let mut rows = vec![Vec::new(); sorted.len()];
        for (i, label) in labels.iter().enumerate() {
            let k = sorted.binary_search(label).expect("label drawn from the same slice");
            rows[k].push(i);
        }
        SiteIndex { labels: sorted, rows }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, k: usize) -> &str {
        &self.labels[k]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn rows(&self, k: usize) -> &[usize] {
        &self.rows[k]
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }
}

/// Reads a cohort CSV. The schema names the covariate columns; every other
/// column is a feature. The result is fully validated.
pub fn parse_cohort_csv(path: &Path, schema: &CohortSchema) -> Result<CohortTable, CohortError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();

    let find = |name: &str| -> Result<usize, CohortError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CohortError::MissingColumn(name.to_string()))
    };
    let subject_col = find(&schema.subject)?;
    let site_col = find(&schema.site)?;
    let age_col = find(&schema.age)?;
    let sex_col = find(&schema.sex)?;
    let extra_cols: Vec<usize> = schema
        .extra_covariates
        .iter()
        .map(|name| find(name))
        .collect::<Result<_, _>>()?;

    let mut reserved: Vec<usize> = vec![subject_col, site_col, age_col, sex_col];
    reserved.extend(&extra_cols);
    let feature_cols: Vec<usize> =
        (0..headers.len()).filter(|c| !reserved.contains(c)).collect();
    let feature_names: Vec<String> =
        feature_cols.iter().map(|&c| headers[c].clone()).collect();

    let parse_float = |cell: &str, row: usize, col: usize| -> Result<f64, CohortError> {
        let v: f64 = cell.parse().map_err(|_| CohortError::NonNumericCell {
            row,
            column: headers[col].clone(),
            value: cell.to_string(),
        })?;
        if !v.is_finite() {
            return Err(CohortError::NonFiniteValue { row, column: headers[col].clone() });
        }
        Ok(v)
    };

    let mut subject_ids = Vec::new();
    let mut site_labels = Vec::new();
    let mut age = Vec::new();
    let mut sex = Vec::new();
    let mut extras_flat = Vec::new();
    let mut features_flat = Vec::new();

    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        subject_ids.push(record[subject_col].to_string());
        site_labels.push(record[site_col].to_string());
        age.push(parse_float(&record[age_col], row, age_col)?);
        let sex_cell = &record[sex_col];
        let sex_val = parse_float(sex_cell, row, sex_col)?;
        if sex_val == 0.0 {
            sex.push(0);
        } else if sex_val == 1.0 {
            sex.push(1);
        } else {
            return Err(CohortError::InvalidSexCode { row, value: sex_cell.to_string() });
        }
        for &c in &extra_cols {
            extras_flat.push(parse_float(&record[c], row, c)?);
        }
        for &c in &feature_cols {
            features_flat.push(parse_float(&record[c], row, c)?);
        }
    }

    let n = subject_ids.len();
    if n == 0 {
        return Err(CohortError::EmptyTable);
    }
    let extras = Array2::from_shape_vec((n, extra_cols.len()), extras_flat)
        .expect("row-major extras buffer matches the record count");
    let features = Array2::from_shape_vec((n, feature_cols.len()), features_flat)
        .expect("row-major feature buffer matches the record count");

    let table = CohortTable::new(
        subject_ids,
        site_labels,
        age,
        sex,
        schema.extra_covariates.clone(),
        extras,
        feature_names,
        features,
    )?;
    let violations = table.validate();
    if !violations.is_empty() {
        return Err(CohortError::Invalid(violations));
    }
    Ok(table)
}

/// Writes a cohort CSV with the schema's column names, floats at 17
/// significant digits so a re-parse reproduces the table bit-exactly.
pub fn write_cohort_csv(
    table: &CohortTable,
    path: &Path,
    schema: &CohortSchema,
) -> Result<(), CohortError> {
    let file = std::fs::File::create(path)?;
    write_cohort_csv_to(table, file, schema)
}

/// Same as `write_cohort_csv` but to any writer.
pub fn write_cohort_csv_to<W: std::io::Write>(
    table: &CohortTable,
    out: W,
    schema: &CohortSchema,
) -> Result<(), CohortError> {
    let mut writer = csv::Writer::from_writer(out);
    let mut header =
        vec![schema.subject.clone(), schema.site.clone(), schema.age.clone(), schema.sex.clone()];
    header.extend(schema.extra_covariates.iter().cloned());
    header.extend(table.feature_names().iter().cloned());
    writer.write_record(&header)?;
    for i in 0..table.n_subjects() {
        let mut record = vec![
            table.subject_ids()[i].clone(),
            table.site_labels()[i].clone(),
            g17(table.ages()[i]),
            table.sexes()[i].to_string(),
        ];
        for j in 0..table.extra_names().len() {
            record.push(g17(table.extras()[(i, j)]));
        }
        for j in 0..table.n_features() {
            record.push(g17(table.features()[(i, j)]));
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
