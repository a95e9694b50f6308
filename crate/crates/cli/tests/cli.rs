use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use syncurate::fixtures::synthetic_catalog;

fn syncurate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_syncurate"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn catalog(dir: &Path, sizes: [usize; 5]) -> String {
    let path = dir.join("catalog.tsv");
    fs::write(&path, synthetic_catalog(sizes).to_tsv()).unwrap();
    path.to_str().unwrap().to_string()
}

/// Small embeddings keep the mock runs fast.
fn config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        "[screen]\nembedding_dim = 16\n\n[providers.mock]\nembedding_dim = 16\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn generate(dir: &Path, cat: &str, out: &str, n: &str) -> Output {
    syncurate(&[
        "generate",
        "--config",
        &config(dir),
        "--mock",
        "--catalog",
        cat,
        "--out",
        out,
        "--n",
        n,
        "--seed",
        "7",
    ])
}

#[test]
fn mock_generation_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cat = catalog(dir.path(), [100, 100, 100, 100, 100]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = generate(dir.path(), &cat, out.to_str().unwrap(), "100");
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(json(&o)["counters"]["accepted"], 100);
    }
    let manifest = |d: &Path| fs::read(d.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
}

#[test]
fn infeasible_target_exits_with_capacity_code_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cat = catalog(dir.path(), [30, 30, 30, 30, 10]);
    let out = dir.path().join("run");
    let o = generate(dir.path(), &cat, out.to_str().unwrap(), "51");
    assert_eq!(o.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("demand        153"), "{stderr}");
    assert!(stderr.contains("capacity        150"), "{stderr}");
    assert!(stderr.contains("INFEASIBLE"), "{stderr}");

    let o = syncurate(&["capacity", "--catalog", &cat, "--n", "51"]);
    assert_eq!(o.status.code(), Some(3));
    let anatomy = json(&o)["pools"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["pool"] == "ANATOMY")
        .cloned()
        .unwrap();
    assert_eq!(
        (anatomy["demand"].as_u64(), anatomy["capacity"].as_u64()),
        (Some(153), Some(150))
    );
}

#[test]
fn stats_on_mock_corpus_respects_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let cat = catalog(dir.path(), [1000, 1000, 1000, 1000, 1000]);
    let out = dir.path().join("run");
    let o = generate(dir.path(), &cat, out.to_str().unwrap(), "2000");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = syncurate(&["stats", out.to_str().unwrap()]);
    assert!(o.status.success());
    let stats = json(&o);
    assert_eq!(stats["records"], 2000);
    assert!(stats["max_count"].as_u64().unwrap() <= 15);
    assert_eq!(stats["records_with_duplicates"], 0);
}

#[test]
fn export_then_audit_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cat = catalog(dir.path(), [60, 60, 60, 60, 60]);
    let run = dir.path().join("run");
    let o = generate(dir.path(), &cat, run.to_str().unwrap(), "30");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let exported = dir.path().join("export");
    let o = syncurate(&["export", run.to_str().unwrap(), exported.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&o)["records"], 30);

    let audit = dir.path().join("audit");
    let manifest = exported.join("manifest.jsonl");
    let o = syncurate(&[
        "audit",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        &config(dir.path()),
        "--mock",
        "--catalog",
        &cat,
        "--out",
        audit.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(audit.join("audit_report.json")).unwrap()).unwrap();
    // Every generated image already passed the gate, so nothing is removed.
    assert_eq!(report["total_in"], 30);
    assert_eq!(report["remaining"], 30);
    assert!(audit.join("bad_bank.bin").is_file());
    let dist: Value =
        serde_json::from_str(&fs::read_to_string(audit.join("entity_distribution.json")).unwrap()).unwrap();
    assert!(dist.is_object());
}

#[test]
fn stop_and_resume_through_the_cli_matches_one_shot() {
    let dir = tempfile::tempdir().unwrap();
    let cat = catalog(dir.path(), [60, 60, 60, 60, 60]);
    let whole = dir.path().join("whole");
    let split = dir.path().join("split");
    assert!(generate(dir.path(), &cat, whole.to_str().unwrap(), "40")
        .status
        .success());
    let o = syncurate(&[
        "generate",
        "--config",
        &config(dir.path()),
        "--mock",
        "--catalog",
        &cat,
        "--out",
        split.to_str().unwrap(),
        "--n",
        "40",
        "--seed",
        "7",
        "--stop-after",
        "15",
    ]);
    assert!(o.status.success());
    assert_eq!(json(&o)["complete"], false);
    let o = generate(dir.path(), &cat, split.to_str().unwrap(), "40");
    assert_eq!(json(&o)["complete"], true);
    assert_eq!(
        fs::read(whole.join("manifest.jsonl")).unwrap(),
        fs::read(split.join("manifest.jsonl")).unwrap()
    );
}

#[test]
fn invalid_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cat = catalog(dir.path(), [30, 30, 30, 30, 30]);
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let o = syncurate(&["generate", "--mock", "--catalog", &cat, "--out", out, "--tau-max", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = syncurate(&[
        "generate",
        "--mock",
        "--catalog",
        "/nonexistent/catalog.tsv",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_sidecar_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/sidecar.toml");
    let cfg = syncurate::config::RunConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.providers.image_gen.backend, "http");
}
