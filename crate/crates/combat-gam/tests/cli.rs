//! End-to-end checks of the command-line interface: pipeline composition,
//! determinism, and the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use combat_gam::cohort::{parse_cohort_csv, CohortSchema};
use combat_gam::combat::HarmonizationModel;
use combat_gam::stats::EvaluationReport;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_combat-gam")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).current_dir(dir).args(args).output().expect("spawn combat-gam")
}

fn assert_ok(output: &Output, what: &str) {
    assert!(
        output.status.success(),
        "{what} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn simulate_small(dir: &Path, out: &str, seed: &str) -> PathBuf {
    let output = run_in(
        dir,
        &[
            "simulate", "--out", out, "--seed", seed, "--sites", "3", "--subjects", "120",
            "--features", "16", "--gamma-sd", "0.25",
        ],
    );
    assert_ok(&output, "simulate");
    dir.join(out).join("cohort.csv")
}

#[test]
fn pipeline_composes_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let cohort_csv = simulate_small(dir, "sim", "11");
    assert!(dir.join("sim/truth.json").exists());

    let pre = run_in(dir, &["evaluate", "--in", "sim/cohort.csv", "--out", "pre"]);
    assert_ok(&pre, "evaluate pre");
    assert!(stdout(&pre).contains("of 16 significant after FDR"));

    let harm = run_in(dir, &["harmonize", "--in", "sim/cohort.csv", "--out", "harm"]);
    assert_ok(&harm, "harmonize");

    let post = run_in(dir, &["evaluate", "--in", "harm/harmonized.csv", "--out", "post"]);
    assert_ok(&post, "evaluate post");

    let report = run_in(
        dir,
        &[
            "report", "--model", "harm/model.json", "--pre", "pre/report.json", "--post",
            "post/report.json", "--svg", "--out", "rep",
        ],
    );
    assert_ok(&report, "report");

    // Exit 0 means the declared outputs exist and parse.
    let schema = CohortSchema::default();
    let input = parse_cohort_csv(&cohort_csv, &schema).unwrap();
    let harmonized = parse_cohort_csv(&dir.join("harm/harmonized.csv"), &schema).unwrap();
    assert_eq!(harmonized.n_subjects(), input.n_subjects());
    assert_eq!(harmonized.n_features(), input.n_features());
    assert_eq!(harmonized.feature_names(), input.feature_names());

    let model: HarmonizationModel =
        serde_json::from_str(&std::fs::read_to_string(dir.join("harm/model.json")).unwrap())
            .unwrap();
    assert_eq!(model.standardization.feature_names.len(), 16);

    let pre_report: EvaluationReport =
        serde_json::from_str(&std::fs::read_to_string(dir.join("pre/report.json")).unwrap())
            .unwrap();
    let post_report: EvaluationReport =
        serde_json::from_str(&std::fs::read_to_string(dir.join("post/report.json")).unwrap())
            .unwrap();
    assert!(post_report.n_rejected < pre_report.n_rejected);

    for name in ["gamma-delta.csv", "effect-medians.csv", "heatmap.svg"] {
        assert!(dir.join("rep").join(name).exists(), "{name} missing");
    }
    let svg = std::fs::read_to_string(dir.join("rep/heatmap.svg")).unwrap();
    assert!(svg.starts_with("<svg "));
}

#[test]
fn simulate_runs_are_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    simulate_small(dir, "a", "42");
    simulate_small(dir, "b", "42");
    simulate_small(dir, "c", "43");
    let read = |p: &str| std::fs::read(dir.join(p)).unwrap();
    assert_eq!(read("a/cohort.csv"), read("b/cohort.csv"));
    assert_eq!(read("a/truth.json"), read("b/truth.json"));
    assert_ne!(read("a/cohort.csv"), read("c/cohort.csv"));
}

#[test]
fn harmonize_and_evaluate_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    simulate_small(dir, "sim", "5");
    for out in ["h1", "h2"] {
        let output = run_in(dir, &["harmonize", "--in", "sim/cohort.csv", "--out", out]);
        assert_ok(&output, "harmonize");
    }
    let read = |p: &str| std::fs::read(dir.join(p)).unwrap();
    assert_eq!(read("h1/model.json"), read("h2/model.json"));
    assert_eq!(read("h1/harmonized.csv"), read("h2/harmonized.csv"));

    for out in ["e1", "e2"] {
        let output = run_in(dir, &["evaluate", "--in", "sim/cohort.csv", "--out", out]);
        assert_ok(&output, "evaluate");
    }
    assert_eq!(read("e1/report.json"), read("e2/report.json"));
    assert_eq!(read("e1/report.csv"), read("e2/report.csv"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    simulate_small(dir, "sim", "3");

    let bad_sites = run_in(dir, &["simulate", "--out", "x", "--sites", "1"]);
    assert_eq!(code(&bad_sites), 1);
    assert!(stderr(&bad_sites).contains("at least 2 sites"));

    let bad_q = run_in(dir, &["evaluate", "--in", "sim/cohort.csv", "--out", "x", "--q", "1.0"]);
    assert_eq!(code(&bad_q), 1);
    assert!(stderr(&bad_q).contains("between 0 and 1"));

    let no_inputs = run_in(dir, &["report", "--out", "x"]);
    assert_eq!(code(&no_inputs), 1);

    let missing_model = run_in(dir, &["report", "--out", "x", "--model", "nowhere.json"]);
    assert_eq!(code(&missing_model), 1);
    assert!(stderr(&missing_model).contains("no such file"));

    let lonely_pre =
        run_in(dir, &["report", "--out", "x", "--pre", "sim/cohort.csv"]);
    assert_eq!(code(&lonely_pre), 1);

    let missing_csv = run_in(dir, &["harmonize", "--in", "nowhere.csv", "--out", "x"]);
    assert_eq!(code(&missing_csv), 2);

    let help = run_in(dir, &["--help"]);
    assert_eq!(code(&help), 0);
    let version = run_in(dir, &["--version"]);
    assert_eq!(code(&version), 0);
    let unknown = run_in(dir, &["frobnicate"]);
    assert_eq!(code(&unknown), 1);
}

#[test]
fn missing_site_column_is_named_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    std::fs::write(
        dir.join("bad.csv"),
        "subject,age,sex,FA_b01\ns1,0.1,0,0.5\ns2,0.15,1,0.6\n",
    )
    .unwrap();
    let output = run_in(dir, &["harmonize", "--in", "bad.csv", "--out", "x"]);
    assert_eq!(code(&output), 1);
    assert!(stderr(&output).contains("missing required column \"site\""), "{}", stderr(&output));
}

#[test]
fn pooling_flag_is_a_noop_when_the_prior_is_degenerate() {
    // Two identical feature columns make the across-feature variance of the
    // site offsets zero, so pooling has nothing to shrink and both modes
    // must produce the same site parameters.
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let mut rows = String::from("subject,site,age,sex,m_one,m_two\n");
    let mut state = 9u64;
    for i in 0..40 {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let noise = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        let site = if i < 20 { "a" } else { "b" };
        let shift = if i < 20 { 0.2 } else { -0.2 };
        let age = 0.05 + 0.1 * (i as f64 / 40.0);
        let value = 0.5 + shift + 0.3 * noise;
        rows.push_str(&format!("s{i},{site},{age},{},{value},{value}\n", i % 2));
    }
    std::fs::write(dir.join("dup.csv"), rows).unwrap();

    let eb = run_in(dir, &["harmonize", "--in", "dup.csv", "--out", "eb"]);
    assert_ok(&eb, "harmonize with pooling");
    assert!(stderr(&eb).contains("warning"), "expected a pass-through warning");
    let plain = run_in(dir, &["harmonize", "--in", "dup.csv", "--out", "plain", "--no-eb"]);
    assert_ok(&plain, "harmonize --no-eb");

    let load = |p: &str| -> HarmonizationModel {
        serde_json::from_str(&std::fs::read_to_string(dir.join(p)).unwrap()).unwrap()
    };
    let with_pooling = load("eb/model.json");
    let without = load("plain/model.json");
    assert_eq!(with_pooling.site_params.gamma_star, without.site_params.gamma_star);
    assert_eq!(with_pooling.site_params.delta2_star, without.site_params.delta2_star);
}

#[test]
fn age_filter_applies_before_fitting() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let cohort_csv = simulate_small(dir, "sim", "17");
    let schema = CohortSchema::default();
    let full = parse_cohort_csv(&cohort_csv, &schema).unwrap();
    let cutoff = 0.12;
    let expected = full.ages().iter().filter(|&&a| a <= cutoff).count();
    assert!(expected < full.n_subjects());

    let output = run_in(
        dir,
        &["harmonize", "--in", "sim/cohort.csv", "--out", "young", "--age-max", "0.12"],
    );
    assert_ok(&output, "harmonize with age filter");
    let harmonized = parse_cohort_csv(&dir.join("young/harmonized.csv"), &schema).unwrap();
    assert_eq!(harmonized.n_subjects(), expected);
    assert!(harmonized.ages().iter().all(|&a| a <= cutoff));
}

#[test]
fn config_file_merges_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    simulate_small(dir, "sim", "23");
    std::fs::write(dir.join("settings.json"), "{\"q\": 0.2}").unwrap();

    let from_config = run_in(
        dir,
        &["evaluate", "--in", "sim/cohort.csv", "--out", "c", "--config", "settings.json"],
    );
    assert_ok(&from_config, "evaluate with config");
    let report: EvaluationReport =
        serde_json::from_str(&std::fs::read_to_string(dir.join("c/report.json")).unwrap())
            .unwrap();
    assert_eq!(report.q, 0.2);

    let flag_wins = run_in(
        dir,
        &[
            "evaluate", "--in", "sim/cohort.csv", "--out", "f", "--config", "settings.json",
            "--q", "0.01",
        ],
    );
    assert_ok(&flag_wins, "evaluate with flag override");
    let report: EvaluationReport =
        serde_json::from_str(&std::fs::read_to_string(dir.join("f/report.json")).unwrap())
            .unwrap();
    assert_eq!(report.q, 0.01);

    std::fs::write(dir.join("typo.json"), "{\"qq\": 0.2}").unwrap();
    let typo = run_in(
        dir,
        &["evaluate", "--in", "sim/cohort.csv", "--out", "t", "--config", "typo.json"],
    );
    assert_eq!(code(&typo), 1);
    assert!(stderr(&typo).contains("unknown field"));
}

#[test]
fn residualize_flag_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    simulate_small(dir, "sim", "29");
    let output = run_in(
        dir,
        &["evaluate", "--in", "sim/cohort.csv", "--out", "res", "--residualize"],
    );
    assert_ok(&output, "evaluate --residualize");
    assert!(dir.join("res/report.json").exists());
}

#[test]
fn zeroed_site_offsets_produce_zero_gamma_column() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    simulate_small(dir, "sim", "31");
    let harm = run_in(dir, &["harmonize", "--in", "sim/cohort.csv", "--out", "harm"]);
    assert_ok(&harm, "harmonize");

    let mut model: HarmonizationModel =
        serde_json::from_str(&std::fs::read_to_string(dir.join("harm/model.json")).unwrap())
            .unwrap();
    let shape = model.site_params.gamma_star.dim();
    model.site_params.gamma_star = ndarray::Array2::zeros(shape);
    std::fs::write(dir.join("zeroed.json"), serde_json::to_string(&model).unwrap()).unwrap();

    let report = run_in(dir, &["report", "--out", "rep", "--model", "zeroed.json"]);
    assert_ok(&report, "report");
    let table = std::fs::read_to_string(dir.join("rep/gamma-delta.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(table.as_bytes());
    for record in reader.records() {
        let record = record.unwrap();
        assert_eq!(record[4].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn threads_flag_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    simulate_small(dir, "sim", "37");
    let single = run_in(
        dir,
        &["harmonize", "--in", "sim/cohort.csv", "--out", "t1", "--threads", "1"],
    );
    assert_ok(&single, "harmonize --threads 1");
    let many = run_in(
        dir,
        &["harmonize", "--in", "sim/cohort.csv", "--out", "t4", "--threads", "4"],
    );
    assert_ok(&many, "harmonize --threads 4");
    let read = |p: &str| std::fs::read(dir.join(p)).unwrap();
    assert_eq!(read("t1/model.json"), read("t4/model.json"));
    assert_eq!(read("t1/harmonized.csv"), read("t4/harmonized.csv"));
}
