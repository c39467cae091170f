//! Command-line front end: simulate a multi-site cohort, harmonize it,
//! evaluate residual site effects, and emit summary reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use combat_gam::cohort::{
    parse_cohort_csv, write_cohort_csv, AgeFilter, CohortError, CohortSchema, CohortTable,
};
use combat_gam::combat::{
    apply_harmonization, fit_combat_gam, residualize_covariates, CombatError, FitConfig,
    HarmonizationModel, ModelTerms,
};
use combat_gam::gam::SmoothSpec;
use combat_gam::report::{
    effect_median_rows, gamma_delta_rows, heatmap_svg, write_effect_medians_csv_to,
    write_gamma_delta_csv_to, ReportError,
};
use combat_gam::serialize::to_json_g17;
use combat_gam::stats::{evaluate_cohort, EvaluationReport, FamilyRule, StatsError};
use combat_gam::synth::{generate_cohort, SynthConfig};

#[derive(Parser)]
#[command(
    name = "combat-gam",
    version,
    about = "Remove scanner and site effects from tabular feature matrices and \
             quantify what is left"
)]
struct Cli {
    /// Cap the worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON settings file; command-line flags win on conflict.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-site cohort with known ground truth.
    Simulate(SimulateArgs),
    /// Fit the harmonization model and write the adjusted cohort.
    Harmonize(HarmonizeArgs),
    /// Test every feature for residual site effects.
    Evaluate(EvaluateArgs),
    /// Build summary tables and the effect-size heatmap.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Directory receiving cohort.csv and truth.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sites; subjects are split as evenly as possible.
    #[arg(long)]
    sites: Option<usize>,
    /// Total subject count across all sites.
    #[arg(long)]
    subjects: Option<usize>,
    /// Number of feature columns.
    #[arg(long)]
    features: Option<usize>,
    /// Standard deviation of the site shifts.
    #[arg(long)]
    gamma_sd: Option<f64>,
    /// Residual noise scale.
    #[arg(long)]
    noise_sd: Option<f64>,
}

#[derive(Args)]
struct HarmonizeArgs {
    /// Cohort CSV to harmonize.
    #[arg(long = "in", value_name = "CSV")]
    input: PathBuf,
    /// Directory receiving harmonized.csv and model.json.
    #[arg(long)]
    out: PathBuf,
    /// Skip the pooling step and use the per-site estimates directly.
    #[arg(long)]
    no_eb: bool,
    /// Drop subjects younger than this before fitting.
    #[arg(long)]
    age_min: Option<f64>,
    /// Drop subjects older than this before fitting.
    #[arg(long)]
    age_max: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Cohort CSV to test.
    #[arg(long = "in", value_name = "CSV")]
    input: PathBuf,
    /// Directory receiving report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
    /// FDR level, strictly between 0 and 1.
    #[arg(long)]
    q: Option<f64>,
    /// How features group into FDR families.
    #[arg(long, value_parser = ["prefix", "single", "file"])]
    family_rule: Option<String>,
    /// JSON feature-to-family table, required with --family-rule file.
    #[arg(long)]
    family_file: Option<PathBuf>,
    /// Remove the fitted age and sex effects before testing.
    #[arg(long)]
    residualize: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory receiving the report tables.
    #[arg(long)]
    out: PathBuf,
    /// model.json from harmonize; enables gamma-delta.csv.
    #[arg(long)]
    model: Option<PathBuf>,
    /// report.json from the pre-harmonization evaluate run.
    #[arg(long)]
    pre: Option<PathBuf>,
    /// report.json from the post-harmonization evaluate run.
    #[arg(long)]
    post: Option<PathBuf>,
    /// Also write heatmap.svg of the per-family medians.
    #[arg(long)]
    svg: bool,
    /// How features group into families for gamma-delta.csv.
    #[arg(long, value_parser = ["prefix", "single", "file"])]
    family_rule: Option<String>,
    /// JSON feature-to-family table, required with --family-rule file.
    #[arg(long)]
    family_file: Option<PathBuf>,
}

/// Optional settings file. Unknown keys are an error so typos cannot
/// silently fall back to defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    schema: Option<CohortSchema>,
    smooth: Option<SmoothSpec>,
    q: Option<f64>,
    eb: Option<bool>,
    eb_tol: Option<f64>,
    eb_max_iter: Option<usize>,
    age_min: Option<f64>,
    age_max: Option<f64>,
    family_rule: Option<String>,
    family_file: Option<PathBuf>,
    synth: Option<SynthConfig>,
    seed: Option<u64>,
    threads: Option<usize>,
}

/// Failure carrying its process exit code: 1 for validation and
/// configuration problems, 2 for I/O.
struct Failure {
    message: String,
    code: u8,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { message: message.into(), code: 1 }
}

fn io_failure(err: std::io::Error, path: &Path) -> Failure {
    Failure { message: format!("{}: {err}", path.display()), code: 2 }
}

fn csv_code(err: &csv::Error) -> u8 {
    if matches!(err.kind(), csv::ErrorKind::Io(_)) {
        2
    } else {
        1
    }
}

impl From<CohortError> for Failure {
    fn from(err: CohortError) -> Failure {
        let code = match &err {
            CohortError::Io(_) => 2,
            CohortError::Csv(e) => csv_code(e),
            _ => 1,
        };
        Failure { message: err.to_string(), code }
    }
}

impl From<CombatError> for Failure {
    fn from(err: CombatError) -> Failure {
        let code = match &err {
            CombatError::Cohort(CohortError::Io(_)) => 2,
            CombatError::Cohort(CohortError::Csv(e)) => csv_code(e),
            _ => 1,
        };
        Failure { message: err.to_string(), code }
    }
}

impl From<StatsError> for Failure {
    fn from(err: StatsError) -> Failure {
        let code = match &err {
            StatsError::Csv(e) => csv_code(e),
            _ => 1,
        };
        Failure { message: err.to_string(), code }
    }
}

impl From<ReportError> for Failure {
    fn from(err: ReportError) -> Failure {
        let code = match &err {
            ReportError::Csv(e) => csv_code(e),
            ReportError::Stats(StatsError::Csv(e)) => csv_code(e),
            _ => 1,
        };
        Failure { message: err.to_string(), code }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = load_config(cli.config.as_deref())?;
    if let Some(threads) = cli.threads.or(config.threads) {
        if threads == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args, &config),
        Command::Harmonize(args) => cmd_harmonize(args, &config),
        Command::Evaluate(args) => cmd_evaluate(args, &config),
        Command::Report(args) => cmd_report(args, &config),
    }
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(e, path))?;
    serde_json::from_str(&text)
        .map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| io_failure(e, path))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_failure(e, path))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let json = to_json_g17(value).map_err(|e| usage(format!("serialize: {e}")))?;
    write_text(path, &json)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    if !path.exists() {
        return Err(usage(format!("{}: no such file", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(e, path))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn split_evenly(total: usize, sites: usize) -> Vec<usize> {
    if sites == 0 {
        return Vec::new();
    }
    let base = total / sites;
    let extra = total % sites;
    (0..sites).map(|k| base + usize::from(k < extra)).collect()
}

fn cmd_simulate(args: SimulateArgs, config: &ConfigFile) -> Result<(), Failure> {
    let mut synth = config.synth.clone().unwrap_or_default();
    if let Some(seed) = args.seed.or(config.seed) {
        synth.seed = seed;
    }
    if args.sites.is_some() || args.subjects.is_some() {
        let sites = args.sites.unwrap_or(synth.n_sites);
        let total = args.subjects.unwrap_or_else(|| synth.subjects_per_site.iter().sum());
        synth.n_sites = sites;
        synth.subjects_per_site = split_evenly(total, sites);
    }
    if let Some(features) = args.features {
        synth.n_features = features;
    }
    if let Some(gamma_sd) = args.gamma_sd {
        synth.gamma_sd = gamma_sd;
    }
    if let Some(noise_sd) = args.noise_sd {
        synth.noise_sd = noise_sd;
    }

    let (cohort, truth) = generate_cohort(&synth).map_err(|e| usage(e.to_string()))?;
    ensure_dir(&args.out)?;
    let schema = config.schema.clone().unwrap_or_default();
    let cohort_path = args.out.join("cohort.csv");
    write_cohort_csv(&cohort, &cohort_path, &schema)?;
    let truth_path = args.out.join("truth.json");
    write_json(&truth_path, &truth)?;
    println!(
        "simulated cohort: {} subjects, {} sites, {} features, seed {}",
        cohort.n_subjects(),
        synth.n_sites,
        cohort.n_features(),
        synth.seed
    );
    println!("wrote {} and {}", cohort_path.display(), truth_path.display());
    Ok(())
}

fn age_filter_from(
    min: Option<f64>,
    max: Option<f64>,
    config: &ConfigFile,
) -> Result<Option<AgeFilter>, Failure> {
    let min = min.or(config.age_min);
    let max = max.or(config.age_max);
    if min.is_none() && max.is_none() {
        return Ok(None);
    }
    let filter = AgeFilter::new(min.unwrap_or(f64::NEG_INFINITY), max.unwrap_or(f64::INFINITY))?;
    Ok(Some(filter))
}

fn load_cohort(
    path: &Path,
    config: &ConfigFile,
    filter: Option<&AgeFilter>,
) -> Result<CohortTable, Failure> {
    let schema = config.schema.clone().unwrap_or_default();
    let cohort = parse_cohort_csv(path, &schema)?;
    match filter {
        Some(f) => Ok(cohort.filter_age(f)?),
        None => Ok(cohort),
    }
}

fn cmd_harmonize(args: HarmonizeArgs, config: &ConfigFile) -> Result<(), Failure> {
    let filter = age_filter_from(args.age_min, args.age_max, config)?;
    let cohort = load_cohort(&args.input, config, filter.as_ref())?;
    let smooth = config.smooth.clone().unwrap_or_default();
    let mut fit_config = FitConfig { eb: !args.no_eb, ..FitConfig::default() };
    if args.no_eb {
        fit_config.eb = false;
    } else if let Some(eb) = config.eb {
        fit_config.eb = eb;
    }
    if let Some(tol) = config.eb_tol {
        fit_config.eb_tol = tol;
    }
    if let Some(max_iter) = config.eb_max_iter {
        fit_config.eb_max_iter = max_iter;
    }

    let outcome = fit_combat_gam(&cohort, &smooth, &fit_config)?;
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    let harmonized = apply_harmonization(&cohort, &outcome.model)?;

    ensure_dir(&args.out)?;
    let schema = config.schema.clone().unwrap_or_default();
    let data_path = args.out.join("harmonized.csv");
    write_cohort_csv(&harmonized.table, &data_path, &schema)?;
    let model_path = args.out.join("model.json");
    write_json(&model_path, &outcome.model)?;
    println!(
        "harmonized {} subjects, {} features across {} sites",
        cohort.n_subjects(),
        cohort.n_features(),
        outcome.model.standardization.site_order.len()
    );
    println!("wrote {} and {}", data_path.display(), model_path.display());
    Ok(())
}

fn family_rule_from(
    rule: Option<&str>,
    file: Option<&Path>,
    config: &ConfigFile,
) -> Result<FamilyRule, Failure> {
    let rule = rule
        .map(str::to_string)
        .or_else(|| config.family_rule.clone())
        .unwrap_or_else(|| "prefix".to_string());
    match rule.as_str() {
        "prefix" => Ok(FamilyRule::MetricPrefix),
        "single" => Ok(FamilyRule::Single),
        "file" => {
            let path = file
                .map(Path::to_path_buf)
                .or_else(|| config.family_file.clone())
                .ok_or_else(|| usage("--family-rule file requires --family-file"))?;
            let map: BTreeMap<String, String> = read_json(&path)?;
            Ok(FamilyRule::Map(map))
        }
        other => Err(usage(format!(
            "unknown family rule \"{other}\"; expected prefix, single, or file"
        ))),
    }
}

fn print_evaluation(report: &EvaluationReport) {
    println!(
        "{} of {} significant after FDR (q = {})",
        report.n_rejected,
        report.rows.len(),
        report.q
    );
    for family in &report.families {
        println!("  {}: {} of {}", family.family, family.n_rejected, family.n_features);
    }
    let b = &report.bins;
    println!(
        "effect sizes: small {} ({:.1}%), medium {} ({:.1}%), large {} ({:.1}%)",
        b.small, b.small_pct, b.medium, b.medium_pct, b.large, b.large_pct
    );
}

fn cmd_evaluate(args: EvaluateArgs, config: &ConfigFile) -> Result<(), Failure> {
    let q = args.q.or(config.q).unwrap_or(0.05);
    if !(q > 0.0 && q < 1.0) {
        return Err(usage(format!("--q must be strictly between 0 and 1, got {q}")));
    }
    let rule = family_rule_from(args.family_rule.as_deref(), args.family_file.as_deref(), config)?;
    let mut cohort = load_cohort(&args.input, config, None)?;
    if args.residualize {
        let smooth = config.smooth.clone().unwrap_or_default();
        let residuals = residualize_covariates(&cohort, &smooth, &ModelTerms::default())?;
        cohort = cohort.with_features(residuals)?;
    }
    let report = evaluate_cohort(&cohort, &rule, q)?;

    ensure_dir(&args.out)?;
    let json_path = args.out.join("report.json");
    write_json(&json_path, &report)?;
    let csv_path = args.out.join("report.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| io_failure(e, &csv_path))?;
    report.write_csv_to(file)?;
    print_evaluation(&report);
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(())
}

fn cmd_report(args: ReportArgs, config: &ConfigFile) -> Result<(), Failure> {
    if args.model.is_none() && args.pre.is_none() && args.post.is_none() {
        return Err(usage("report needs --model and/or both --pre and --post"));
    }
    if args.pre.is_some() != args.post.is_some() {
        return Err(usage("--pre and --post must be given together"));
    }
    if args.svg && args.pre.is_none() {
        return Err(usage("--svg needs --pre and --post"));
    }
    ensure_dir(&args.out)?;

    if let Some(model_path) = &args.model {
        let model: HarmonizationModel = read_json(model_path)?;
        let rule =
            family_rule_from(args.family_rule.as_deref(), args.family_file.as_deref(), config)?;
        let rows = gamma_delta_rows(&model, &rule)?;
        let path = args.out.join("gamma-delta.csv");
        let file = std::fs::File::create(&path).map_err(|e| io_failure(e, &path))?;
        write_gamma_delta_csv_to(&rows, file)?;
        println!("wrote {}", path.display());
    }

    if let (Some(pre_path), Some(post_path)) = (&args.pre, &args.post) {
        let pre: EvaluationReport = read_json(pre_path)?;
        let post: EvaluationReport = read_json(post_path)?;
        let rows = effect_median_rows(&pre, &post)?;
        let path = args.out.join("effect-medians.csv");
        let file = std::fs::File::create(&path).map_err(|e| io_failure(e, &path))?;
        write_effect_medians_csv_to(&rows, file)?;
        println!("wrote {}", path.display());
        if args.svg {
            let path = args.out.join("heatmap.svg");
            write_text(&path, &heatmap_svg(&rows))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
