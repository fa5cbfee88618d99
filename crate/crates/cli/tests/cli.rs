use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn faircot(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_faircot"));
    for (key, _) in std::env::vars() {
        if key.starts_with("FAIRCOT_") {
            cmd.env_remove(key);
        }
    }
    cmd.env("SOURCE_DATE_EPOCH", "1700000000")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn manifest_lines(o: &Output) -> Vec<Value> {
    let text = stdout(o);
    let path = text
        .lines()
        .find_map(|l| l.strip_prefix("manifest: "))
        .expect("manifest path printed");
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn missing_profession_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = faircot(dir.path(), &["cot-gen"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn out_of_range_tau_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = faircot(dir.path(), &["cot-gen", "--profession", "Nurse", "--tau", "1.5"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("tau"), "{}", stderr(&o));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn cosine_selection_without_embedder_is_a_capability_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = faircot(
        dir.path(),
        &["infer", "--profession", "Doctor", "--strategy", "cosine", "--backend", "remote"],
    );
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
}

#[test]
fn infer_on_an_empty_pool_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = faircot(dir.path(), &["infer", "--profession", "Doctor"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
}

#[test]
fn analyze_without_manifests_writes_empty_reports() {
    let dir = tempfile::tempdir().unwrap();
    let pattern = format!("{}/runs/*", dir.path().display());
    let o = faircot(dir.path(), &["analyze", "--manifests", &pattern]);
    assert!(o.status.success(), "{}", stderr(&o));
    for ext in ["txt", "csv", "jsonl"] {
        assert!(dir.path().join("reports").join(format!("runs.{ext}")).is_file());
    }
    assert_eq!(fs::read_to_string(dir.path().join("reports/runs.jsonl")).unwrap(), "");
}

#[test]
fn cot_gen_then_infer_reuses_the_nurse_record() {
    let dir = tempfile::tempdir().unwrap();
    let small = ["--images", "2", "--seed", "3"];

    let mut args = vec!["cot-gen", "--profession", "Nurse"];
    args.extend(small);
    let gen = faircot(dir.path(), &args);
    assert!(gen.status.success(), "{}", stderr(&gen));
    let pool = fs::read_to_string(dir.path().join("pool.jsonl")).unwrap();
    let record: Value = serde_json::from_str(pool.lines().next().unwrap()).unwrap();
    assert_eq!(record["profession"], "Nurse");

    let mut args = vec!["infer", "--profession", "Doctor", "--strategy", "area"];
    args.extend(small);
    let inf = faircot(dir.path(), &args);
    assert!(inf.status.success(), "{}", stderr(&inf));
    let lines = manifest_lines(&inf);
    let selection = lines.iter().find(|l| l["kind"] == "selection").unwrap();
    assert_eq!(selection["record_id"], record["id"]);
    assert_eq!(selection["source_profession"], "Nurse");
    let adaptation = lines.iter().find(|l| l["kind"] == "adaptation").unwrap();
    assert_eq!(adaptation["prompts"].as_array().unwrap().len(), 20);
    let fin = lines.last().unwrap();
    assert_eq!(fin["kind"], "final");
    assert_eq!(fin["status"], "ok");

    // Same command again without --overwrite refuses to clobber the run.
    let again = faircot(dir.path(), &args);
    assert_eq!(again.status.code(), Some(2), "{}", stderr(&again));

    let manifest = stdout(&inf)
        .lines()
        .find_map(|l| l.strip_prefix("manifest: ").map(str::to_string))
        .unwrap();
    let replay = faircot(dir.path(), &["replay", "--manifest", &manifest]);
    assert!(replay.status.success(), "{}", stderr(&replay));

    let pattern = format!("{}/runs/*", dir.path().display());
    let first = faircot(dir.path(), &["analyze", "--manifests", &pattern]);
    assert!(first.status.success(), "{}", stderr(&first));
    let bytes: Vec<Vec<u8>> = ["txt", "csv", "jsonl"]
        .iter()
        .map(|e| fs::read(dir.path().join(format!("reports/runs.{e}"))).unwrap())
        .collect();
    let second = faircot(dir.path(), &["analyze", "--manifests", &pattern]);
    assert!(second.status.success());
    for (e, b) in ["txt", "csv", "jsonl"].iter().zip(&bytes) {
        assert_eq!(&fs::read(dir.path().join(format!("reports/runs.{e}"))).unwrap(), b);
    }
    assert_eq!(String::from_utf8_lossy(&bytes[2]).lines().count(), 2);
}

#[test]
fn bundled_attire_labels_reach_seventy_five_percent() {
    let dir = tempfile::tempdir().unwrap();
    let o = faircot(dir.path(), &["evaluate", "--bundled", "attire"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("75.00"), "{}", stdout(&o));
    let lines = manifest_lines(&o);
    let agreement = lines.iter().find(|l| l["kind"] == "agreement").unwrap();
    assert_eq!(agreement["total"], 484);
    let overall = agreement["overall"].as_f64().unwrap();
    assert!((overall - 75.0).abs() < 0.01, "{overall}");
}

#[test]
fn evaluate_needs_a_source() {
    let dir = tempfile::tempdir().unwrap();
    let o = faircot(dir.path(), &["evaluate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn replay_of_a_tampered_manifest_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let gen = faircot(dir.path(), &["cot-gen", "--profession", "Nurse", "--images", "2", "--n-prompts", "5"]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    let manifest = stdout(&gen)
        .lines()
        .find_map(|l| l.strip_prefix("manifest: ").map(str::to_string))
        .unwrap();
    let text = fs::read_to_string(&manifest).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let i = lines.iter().position(|l| l.contains(r#""kind":"iteration""#)).unwrap();
    lines[i] = lines[i].replacen(r#""index":0"#, r#""index":0 "#, 1);
    fs::write(&manifest, lines.join("\n") + "\n").unwrap();
    let replay = faircot(dir.path(), &["replay", "--manifest", &manifest]);
    assert_eq!(replay.status.code(), Some(7), "{}", stderr(&replay));
}
