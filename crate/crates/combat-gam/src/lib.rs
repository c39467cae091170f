//! Removal and measurement of scanner and site effects in multi-site
//! tabular feature matrices.
//!
//! The pipeline: load or simulate a cohort (`cohort`, `synth`), fit the
//! additive model with a penalized age spline and pool site parameters
//! toward their prior (`gam`, `combat`), then quantify what is left with
//! per-feature ANOVA, FDR control, and effect sizes (`stats`, `report`).

pub mod cohort;
pub mod combat;
pub mod gam;
pub mod report;
pub mod rng;
pub mod serialize;
pub mod special;
pub mod stats;
pub mod synth;
