use std::path::Path;
use std::process::{Command, Output};

const HEADER: &str = "study_id,first_author,year,pub_type,region,region_class,n,male_pct,raw_factor,effect_value,effect_metric\n";

fn corrmeta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corrmeta"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run corrmeta")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn small_dataset(extra: &str) -> String {
    format!(
        "{HEADER}\
         A1,Ann,2023,journal,X,developing,120,40,habit,0.30,correlation_r\n\
         A2,Bo,2023,journal,Y,developed,200,55,habit,0.45,correlation_r\n\
         A3,Cy,2024,journal,Z,developing,90,60,habit,0.20,regression_beta\n{extra}"
    )
}

#[test]
fn validate_bundled_dataset() {
    let o = corrmeta(&["validate"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("87 effects, 8 factors"));
}

#[test]
fn validate_rejects_tiny_sample_and_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(
        dir.path(),
        "d.csv",
        &small_dataset("A4,Di,2024,journal,W,developing,3,50,habit,0.10,correlation_r\n"),
    );
    let o = corrmeta(&["validate", "--data", &data]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("A4"), "{err}");
    assert!(err.contains("line 5"), "{err}");
}

#[test]
fn unmapped_factor_warns_without_failing() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(
        dir.path(),
        "d.csv",
        &small_dataset("A4,Di,2024,journal,W,developing,80,50,grit,0.10,correlation_r\n"),
    );
    let o = corrmeta(&["validate", "--data", &data]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("unmapped raw factor `grit`"));
    assert!(stdout(&o).contains("3 effects, 1 factors"));
}

#[test]
fn analyze_single_factor() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = corrmeta(&["analyze", "--factor", "habit", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert!(json.contains("\"Habit\""));
    assert!(!json.contains("\"PerformanceExpectancy\""));
    assert!(out.join("funnel_habit.svg").exists());
    assert!(out.join("report.csv").exists());
    assert!(out.join("report.md").exists());
}

#[test]
fn fixed_model_override_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = corrmeta(&[
        "analyze",
        "--model",
        "fixed",
        "--formats",
        "json",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert!(json.contains("\"model_overridden\": true") || json.contains("\"model_overridden\":true"));
    assert!(!out.join("report.csv").exists());
}

#[test]
fn analysis_error_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", HEADER);
    let o = corrmeta(&["analyze", "--data", &data, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("min_k"));
}

#[test]
fn compare_bundled_reference_passes() {
    let o = corrmeta(&["compare"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 failed"));
}

#[test]
fn compare_perturbed_reference_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = corrmeta::fixture::REFERENCE_CSV
        .replace("effect_size,Habit,r,0.296,", "effect_size,Habit,r,0.396,");
    let reference = write(dir.path(), "ref.csv", &text);
    let o = corrmeta(&["compare", "--reference", &reference]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("1 failed"));
}

#[test]
fn include_known_counts_discrepancies() {
    let o = corrmeta(&["compare", "--include-known"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bad_flag_exits_one() {
    let o = corrmeta(&["analyze", "--model", "bayesian"]);
    assert_eq!(o.status.code(), Some(1));
}
