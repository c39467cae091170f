//! Summary tables and the heatmap figure built from a fitted model and a
//! pair of evaluation reports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combat::HarmonizationModel;
use crate::serialize::g17;
use crate::stats::{EvaluationReport, FamilyRule, StatsError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("family sets disagree between the two reports: {0}")]
    FamilyMismatch(String),
    #[error("model has no features")]
    EmptyModel,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("csv write failed: {0}")]
    Csv(#[from] csv::Error),
}

/// Per-site, per-family averages of the fitted site parameters. Both the raw
/// estimates and the stabilized ones are reported; delta columns average the
/// scale factor (square root of the variance ratio).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaDeltaRow {
    pub site: String,
    pub family: String,
    pub n_features: usize,
    pub gamma_hat_avg: f64,
    pub gamma_star_avg: f64,
    pub delta_hat_avg: f64,
    pub delta_star_avg: f64,
}

pub fn gamma_delta_rows(
    model: &HarmonizationModel,
    rule: &FamilyRule,
) -> Result<Vec<GammaDeltaRow>, ReportError> {
    let names = &model.standardization.feature_names;
    if names.is_empty() {
        return Err(ReportError::EmptyModel);
    }
    let mut members: std::collections::BTreeMap<String, Vec<usize>> =
        std::collections::BTreeMap::new();
    for (f, name) in names.iter().enumerate() {
        members.entry(rule.family_of(name)?).or_default().push(f);
    }
    let params = &model.site_params;
    let mut rows = Vec::new();
    for (s, site) in model.standardization.site_order.iter().enumerate() {
        for (family, features) in &members {
            let avg = |value: &dyn Fn(usize) -> f64| {
                features.iter().map(|&f| value(f)).sum::<f64>() / features.len() as f64
            };
            rows.push(GammaDeltaRow {
                site: site.clone(),
                family: family.clone(),
                n_features: features.len(),
                gamma_hat_avg: avg(&|f| params.gamma_hat[[s, f]]),
                gamma_star_avg: avg(&|f| params.gamma_star[[s, f]]),
                delta_hat_avg: avg(&|f| params.delta2_hat[[s, f]].sqrt()),
                delta_star_avg: avg(&|f| params.delta2_star[[s, f]].sqrt()),
            });
        }
    }
    Ok(rows)
}

pub fn write_gamma_delta_csv_to<W: std::io::Write>(
    rows: &[GammaDeltaRow],
    out: W,
) -> Result<(), ReportError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record([
        "site",
        "family",
        "n_features",
        "gamma_hat_avg",
        "gamma_star_avg",
        "delta_hat_avg",
        "delta_star_avg",
    ])?;
    for r in rows {
        writer.write_record([
            r.site.clone(),
            r.family.clone(),
            r.n_features.to_string(),
            g17(r.gamma_hat_avg),
            g17(r.gamma_star_avg),
            g17(r.delta_hat_avg),
            g17(r.delta_star_avg),
        ])?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Median effect size for one family before and after harmonization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectMedianRow {
    pub family: String,
    pub n_features: usize,
    pub median_f_pre: f64,
    pub median_f_post: f64,
}

/// Pairs the per-family medians of two evaluation runs over the same
/// features. The family sets must match exactly.
pub fn effect_median_rows(
    pre: &EvaluationReport,
    post: &EvaluationReport,
) -> Result<Vec<EffectMedianRow>, ReportError> {
    let pre_names: Vec<&str> = pre.families.iter().map(|f| f.family.as_str()).collect();
    let post_names: Vec<&str> = post.families.iter().map(|f| f.family.as_str()).collect();
    if pre_names != post_names {
        return Err(ReportError::FamilyMismatch(format!(
            "pre has [{}], post has [{}]",
            pre_names.join(", "),
            post_names.join(", ")
        )));
    }
    Ok(pre
        .families
        .iter()
        .zip(&post.families)
        .map(|(a, b)| EffectMedianRow {
            family: a.family.clone(),
            n_features: a.n_features,
            median_f_pre: a.median_effect_f,
            median_f_post: b.median_effect_f,
        })
        .collect())
}

pub fn write_effect_medians_csv_to<W: std::io::Write>(
    rows: &[EffectMedianRow],
    out: W,
) -> Result<(), ReportError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["family", "n_features", "median_f_pre", "median_f_post"])?;
    for r in rows {
        writer.write_record([
            r.family.clone(),
            r.n_features.to_string(),
            g17(r.median_f_pre),
            g17(r.median_f_post),
        ])?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

// Linear white-to-red ramp, saturating at f = 0.5.
fn heat_color(f: f64) -> String {
    let t = (f / 0.5).clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + t * (b - a)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 178.0), lerp(255.0, 24.0), lerp(255.0, 43.0))
}

/// Minimal grid heatmap of per-family median effect sizes, one row per
/// family, pre and post columns side by side. Self-contained SVG, no
/// external assets.
pub fn heatmap_svg(rows: &[EffectMedianRow]) -> String {
    let cell_w = 110.0;
    let cell_h = 30.0;
    let left = 150.0;
    let top = 60.0;
    let width = left + 2.0 * cell_w + 20.0;
    let height = top + rows.len() as f64 * cell_h + 20.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" font-size=\"15\" font-weight=\"bold\">\
         Median Cohen&apos;s f by family</text>\n",
        left
    ));
    for (c, label) in ["pre", "post"].iter().enumerate() {
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n",
            left + (c as f64 + 0.5) * cell_w,
            top - 10.0
        ));
    }
    for (r, row) in rows.iter().enumerate() {
        let y = top + r as f64 * cell_h;
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            left - 10.0,
            y + 0.65 * cell_h,
            row.family
        ));
        for (c, value) in [row.median_f_pre, row.median_f_post].into_iter().enumerate() {
            let x = left + c as f64 * cell_w;
            svg.push_str(&format!(
                "  <rect x=\"{x}\" y=\"{y}\" width=\"{cell_w}\" height=\"{cell_h}\" \
                 fill=\"{}\" stroke=\"#444444\"/>\n",
                heat_color(value)
            ));
            svg.push_str(&format!(
                "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.3}</text>\n",
                x + 0.5 * cell_w,
                y + 0.65 * cell_h,
                value
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}
