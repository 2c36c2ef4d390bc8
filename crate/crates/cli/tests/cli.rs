use std::path::Path;
use std::process::{Command, Output};

use hjcert::certify::smtlib::parse_smtlib;
use hjcert::Certificate;

const QUICK: &[&str] = &[
    "--preset",
    "single-integrator",
    "--iterations",
    "200",
    "--batch-size",
    "256",
    "--buffer-fill",
    "4000",
    "--grid-shape",
    "81",
];

fn hjcert(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hjcert"))
        .args(QUICK)
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn workflow_and_manifest_tamper_check() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for cmd in [
        &["solve-grid"][..],
        &["train"],
        &["export-expr"],
        &["certify", "--rho", "5", "--emit", "smt2"],
        &["compare"],
        &["bracket", "--rho", "5"],
    ] {
        let o = hjcert(d, cmd);
        assert_eq!(code(&o), 0, "{cmd:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let cert = Certificate::load(d.join("certificate.json")).unwrap();
    assert!(cert.all_unsat());
    assert_eq!(cert.eps_val, Some(5.0));
    assert!(stdout(&hjcert(d, &["compare"])).contains("max |W_nn - W_num|"));

    // Every emitted query reparses.
    let smt: Vec<_> = std::fs::read_dir(d.join("smt2")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(smt.len(), 4);
    for f in smt {
        let q = parse_smtlib(&std::fs::read_to_string(&f).unwrap()).unwrap();
        assert_eq!(q.rho, 5.0);
    }

    let o = Command::new(env!("CARGO_BIN_EXE_hjcert"))
        .args(["verify-manifest", "--out-dir"])
        .arg(d)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stdout(&o));

    let w = d.join("weights.json");
    let mut bytes = std::fs::read(&w).unwrap();
    let k = bytes.iter().position(|b| b.is_ascii_digit()).unwrap();
    bytes[k] = if bytes[k] == b'9' { b'8' } else { bytes[k] + 1 };
    std::fs::write(&w, bytes).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hjcert"))
        .args(["verify-manifest", "--out-dir"])
        .arg(d)
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("weights.json: hash mismatch"));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        for cmd in [&["train"][..], &["certify", "--rho", "5"]] {
            assert_eq!(code(&hjcert(d, cmd)), 0);
        }
    }
    for f in ["weights.json", "certificate.json", "manifest.json", "train_log.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between reruns");
    }
    let m = std::fs::read_to_string(a.path().join("manifest.json")).unwrap();
    assert!(m.contains("\"timestamp\": 1700000000"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    // Usage and configuration problems.
    let o = Command::new(env!("CARGO_BIN_EXE_hjcert")).args(["train", "--out-dir"]).arg(d).output().unwrap();
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_hjcert")).args(["train", "--preset", "nope"]).output().unwrap();
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_hjcert")).args(["frobnicate"]).output().unwrap();
    assert_eq!(code(&o), 2);
    let bad = d.join("bad.json");
    std::fs::write(&bad, "{\"version\": 1}").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hjcert"))
        .args(["train", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert_eq!(code(&hjcert(d, &["certify"])), 2, "no weights yet");
    assert_eq!(code(&hjcert(d, &["train", "--rho", "-1"])), 2);

    // Certified, then refuted.
    assert_eq!(code(&hjcert(d, &["train"])), 0);
    assert_eq!(code(&hjcert(d, &["certify", "--rho", "5"])), 0);
    let o = hjcert(d, &["certify", "--rho", "1e-4"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("witness"));
    let csv = std::fs::read_to_string(d.join("witnesses.csv")).unwrap();
    assert!(csv.starts_with("cell,x1\n") && csv.lines().count() > 1);
    assert_eq!(code(&hjcert(d, &["bracket"])), 2, "refuted certificate has no eps_val");

    let o = Command::new(env!("CARGO_BIN_EXE_hjcert")).args(["verify-manifest", "--out-dir"]).arg(d.join("none")).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn cegis_reports_rounds() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = hjcert(d, &["cegis", "--rho", "1e-4", "--max-rounds", "2", "--iterations", "20"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("EXHAUSTED after 2 round(s)"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("cegis_report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "EXHAUSTED");
    assert_eq!(report["rounds"].as_array().unwrap().len(), 2);
    assert!(std::fs::read_to_string(d.join("counterexamples.csv")).unwrap().starts_with("round,x1,residual"));

    let o = hjcert(d, &["cegis", "--rho", "5"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("CERTIFIED after 1 round(s)"));
    assert_eq!(code(&hjcert(d, &["cegis", "--max-rounds", "0"])), 2);
}
