use std::path::Path;
use std::process::{Command, Output};

use rxunify_stub::{unreachable_url, StubServer};
use serde_json::Value;

fn rxunify(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rxunify"))
        .args(args)
        .env_remove("RXUNIFY_ENDPOINT")
        .output()
        .unwrap()
}

fn rxunify_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rxunify"));
    c.args(args);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn clean_corpus_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    let o = rxunify(&["generate", "--out", p(&corpus), "--seed", "3", "--records-per-clinic", "20"]);
    assert!(o.status.success(), "{}", text(&o));
    let out = dir.path().join("out");
    for stage in ["extract", "compute", "evaluate"] {
        let o = rxunify(&[stage, "--corpus", p(&corpus), "--out", p(&out), "--workers", "2"]);
        assert!(o.status.success(), "{stage}: {}", text(&o));
        if stage == "extract" {
            assert!(text(&o).contains("extracted 120 of 120 records; transport=0; schema_invalid=0; empty_output=0"));
        }
    }
    let r = report(&out);
    assert_eq!(r["overall"]["coverage_pct"], 100.0);
    assert_eq!(r["overall"]["accuracy_pct"], 100.0);
    for f in ["outcomes.jsonl", "cleaned.jsonl", "flags.jsonl", "moud.jsonl", "patients.csv", "norms.json", "resolved_config.toml", "report.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn planted_fixture_scores_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen.toml");
    std::fs::write(
        &gen,
        "seed = 9\nrecords_per_clinic = 20\nclinics = [\"seaport\"]\n[rates]\nkey = 0.15\nvalue = 0.10\n",
    )
    .unwrap();
    let corpus = dir.path().join("c");
    let o = rxunify(&["generate", "--config", p(&gen), "--out", p(&corpus)]);
    assert!(o.status.success(), "{}", text(&o));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(corpus.join("manifest.json")).unwrap()).unwrap();
    let kinds: Vec<&str> = manifest["corruptions"].as_array().unwrap().iter().map(|c| c["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds.iter().filter(|k| **k == "key").count(), 3);
    assert_eq!(kinds.iter().filter(|k| **k == "value").count(), 2);

    let out = dir.path().join("out");
    let o = rxunify(&["run", "--corpus", p(&corpus), "--out", p(&out)]);
    assert!(o.status.success(), "{}", text(&o));
    let t = text(&o);
    assert!(t.contains("85.00") && t.contains("88.24"), "{t}");
    let r = report(&out);
    let round2 = |v: &Value| (v.as_f64().unwrap() * 100.0).round() / 100.0;
    assert_eq!(round2(&r["overall"]["coverage_pct"]), 85.0);
    assert_eq!(round2(&r["overall"]["accuracy_pct"]), 88.24);
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    assert!(rxunify(&["generate", "--out", p(&corpus), "--records-per-clinic", "15", "--duplicate-rate", "0.1", "--mass-unit-rate", "0.3"]).status.success());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(rxunify(&["run", "--corpus", p(&corpus), "--out", p(&a), "--workers", "1"]).status.success());
    assert!(rxunify(&["run", "--corpus", p(&corpus), "--out", p(&b), "--workers", "4"]).status.success());
    for f in ["outcomes.jsonl", "cleaned.jsonl", "flags.jsonl", "moud.jsonl", "patients.csv", "norms.json", "report.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn stopped_endpoint_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    assert!(rxunify(&["generate", "--out", p(&corpus), "--records-per-clinic", "2"]).status.success());
    let out = dir.path().join("out");
    let url = unreachable_url();
    let o = rxunify_env(
        &["extract", "--corpus", p(&corpus), "--out", p(&out), "--backend", "remote"],
        &[("RXUNIFY_ENDPOINT", &url)],
    );
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("transport=12"), "{}", text(&o));
    let lines = std::fs::read_to_string(out.join("outcomes.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 12);
}

#[test]
fn invalid_remote_output_falls_back_to_rules() {
    let stub = StubServer::start();
    stub.set_responder(|_| rxunify_stub::Reply::document(serde_json::json!({"total_quantity": "lots"})));
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    assert!(rxunify(&["generate", "--out", p(&corpus), "--records-per-clinic", "2"]).status.success());
    let out = dir.path().join("out");
    let o = rxunify_env(
        &["extract", "--corpus", p(&corpus), "--out", p(&out), "--backend", "remote"],
        &[("RXUNIFY_ENDPOINT", &stub.url())],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o).contains("schema_invalid=12"), "{}", text(&o));
    let o = rxunify_env(
        &["extract", "--corpus", p(&corpus), "--out", p(&out), "--backend", "remote", "--fallback-on-invalid"],
        &[("RXUNIFY_ENDPOINT", &stub.url())],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o).contains("extracted 12 of 12 records; transport=0; schema_invalid=0; empty_output=0; rule_fallback=12"), "{}", text(&o));
}

#[test]
fn evaluate_without_ground_truth_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rxunify(&["evaluate", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("--ground-truth"), "{}", text(&o));
}

#[test]
fn fatal_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = rxunify(&["compute", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("outcomes.jsonl"), "{}", text(&o));

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[inputs]\nseaport = \"missing.csv\"\n").unwrap();
    let o = rxunify(&["extract", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("missing.csv"), "{}", text(&o));

    let o = rxunify(&["extract", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_ground_truth_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    assert!(rxunify(&["generate", "--out", p(&corpus), "--records-per-clinic", "3"]).status.success());
    let out = dir.path().join("out");
    assert!(rxunify(&["run", "--corpus", p(&corpus), "--out", p(&out)]).status.success());
    let gt = corpus.join("ground_truth.csv");
    let mut lines: Vec<String> = std::fs::read_to_string(&gt).unwrap().lines().map(String::from).collect();
    lines[3] = lines[3].replacen(",", ",,", 1);
    std::fs::write(&gt, lines.join("\n") + "\n").unwrap();
    let o = rxunify(&["evaluate", "--corpus", p(&corpus), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("row 4"), "{}", text(&o));
}

#[test]
fn empty_input_reports_zero() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("seaport.csv");
    std::fs::write(&csv, "Record_ID,Prescription_Date,RX_Name,Quantity,SIG,Refills\n").unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "out_dir = \"out\"\n[inputs]\nseaport = \"seaport.csv\"\n").unwrap();
    let o = rxunify(&["extract", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("extracted 0 of 0 records"));
    assert_eq!(std::fs::read_to_string(dir.path().join("out/outcomes.jsonl")).unwrap(), "");
    let resolved = std::fs::read_to_string(dir.path().join("out/resolved_config.toml")).unwrap();
    assert!(resolved.contains("plausibility_cap = 24.0"), "{resolved}");
}
