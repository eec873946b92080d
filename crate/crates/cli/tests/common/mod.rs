//! Helpers shared by the CLI test targets: fixture paths, binary invocation
//! and the fixture pipeline.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TRIAL_ID: &str = "T-CARDIO-13";
pub const PATIENTS: [&str; 3] = ["p01", "p02", "p03"];
pub const AS_OF: &str = "2018-06-01";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn mock_config() -> PathBuf {
    fixtures().join("mock.toml")
}

/// Runs the binary with a clean environment for its own variables.
pub fn run<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_trialmatch"))
        .args(args)
        .env_remove("TRIALMATCH_DATA")
        .env_remove("TRIALMATCH_CONFIG")
        .env_remove("TRIALMATCH_TOKEN")
        .env_remove("TRIALMATCH_ADDR")
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn trialmatch")
}

pub fn run_ok<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let args: Vec<_> = args.into_iter().map(|a| a.as_ref().to_owned()).collect();
    let out = run(&args);
    assert!(
        out.status.success(),
        "trialmatch {:?} exited with {:?}\nstderr:\n{}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Prepares the fixture trial and ingests the three fixture patients into `data`.
pub fn prepare_workspace(data: &Path) {
    let config = mock_config();
    let trial = fixtures().join("trial.json");
    run_ok(["trial", "prep", "--data", p(data), "--config", p(&config), "--input", p(&trial)]);
    for patient in PATIENTS {
        let mut notes: Vec<PathBuf> = std::fs::read_dir(fixtures().join("notes").join(patient))
            .expect("notes dir")
            .map(|e| e.expect("dir entry").path())
            .collect();
        notes.sort();
        let mut args: Vec<String> =
            ["patient", "ingest", "--data", p(data), "--config", p(&config), "--patient", patient]
                .map(String::from)
                .to_vec();
        args.extend(notes.iter().map(|n| p(n).to_string()));
        run_ok(&args);
    }
}

pub fn match_run(data: &Path, out: &Path, strategy: &str) -> Output {
    let config = mock_config();
    run_ok([
        "match",
        "run",
        "--data",
        p(data),
        "--config",
        p(&config),
        "--trial",
        TRIAL_ID,
        "--strategy",
        strategy,
        "--as-of",
        AS_OF,
        "--out",
        p(out),
    ])
}

/// Every file under `dir`, keyed by its relative path.
pub fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, into: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("read dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, into);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().into_owned();
                into.insert(rel, std::fs::read(&path).expect("read file"));
            }
        }
    }
    let mut files = BTreeMap::new();
    if dir.exists() {
        walk(dir, dir, &mut files);
    }
    files
}
