use std::path::Path;
use std::process::{Command, Output};

fn crownfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crownfit")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = crownfit(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or(serde_json::Value::Null)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn invalid_tooth_fails_with_an_argument_error() {
    let out = crownfit(&["run", "scan.ply", "--fdi", "19"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid argument"));
    let out = crownfit(&["classify", "scan.ply", "--stop-after", "bogus"]);
    assert!(!out.status.success());
}

#[test]
fn stages_chain_like_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = ok(&["fixtures", p(d), "--seed", "4"]);
    assert_eq!(manifest["target_fdi"], 36);
    let config = d.join("config.toml");
    let cfg = p(&config);
    let scan = d.join("scan.ply");

    let class = ok(&["classify", p(&scan)]);
    assert_eq!(class["class"], "FullLower");

    let gated = d.join("gated");
    let out = crownfit(&["--config", cfg, "--stop-after", "registration", "run", p(&scan), "--fdi", "36", "--out", p(&gated)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut files: Vec<_> = std::fs::read_dir(&gated).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files, ["canonical_scan.ply", "report.json"]);

    let full = d.join("full");
    let report = d.join("full_report.json");
    let out = crownfit(&["--config", cfg, "--report", p(&report), "run", p(&scan), "--fdi", "36", "--out", p(&full)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(run["fitting"]["vertices_inside_opposing"], 0);

    // Same steps one at a time.
    let canonical = d.join("canonical.ply");
    let reg = ok(&["--config", cfg, "register", p(&scan), "--class", "full_lower", "--out", p(&canonical)]);
    assert_eq!(reg["best"]["fitness"], run["registration"]["fitness"]);
    let labels = d.join("labels.json");
    let gt = d.join("scan.labels.json");
    let seg = ok(&["--config", cfg, "refine", p(&canonical), "--corrupt", p(&gt), "--ground-truth", p(&gt), "--out", p(&labels)]);
    assert_eq!(seg["energy_refined"], run["segmentation"]["energy_refined"]);
    let retrieval = ok(&["--config", cfg, "retrieve", p(&d.join("scan.context.json"))]);
    assert_eq!(retrieval, run["retrieval"]);
    let crown = d.join("crowns").join(format!("{}.ply", retrieval["template"].as_str().unwrap()));
    let aligned = d.join("aligned.ply");
    let align = ok(&["--config", cfg, "align", p(&canonical), "--labels", p(&labels), "--crown", p(&crown), "--fdi", "36", "--out", p(&aligned)]);
    assert_eq!(align["trace"], run["alignment"]["trace"]);
    let fitted = d.join("fitted.ply");
    let antagonist = d.join("antagonist.ply");
    let fit = ok(&[
        "--config", cfg, "fit", p(&aligned), "--scan", p(&canonical), "--labels", p(&labels), "--fdi", "36", "--antagonist", p(&antagonist), "--out", p(&fitted),
    ]);
    assert_eq!(fit, run["fitting"]);
    assert_eq!(std::fs::read(&fitted).unwrap(), std::fs::read(full.join("fitted_crown.ply")).unwrap());

    let eval = ok(&["evaluate", "--pred", p(&labels), "--gt", p(&gt), "--mesh", p(&canonical), "--fdi", "36"]);
    assert_eq!(eval["rows"].as_array().unwrap().len(), 3);
}
