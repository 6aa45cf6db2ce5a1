#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Runs the binary in `cwd` with `--out out` appended.
pub fn nuhyp(cwd: &Path, args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nuhyp"))
        .current_dir(cwd)
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small runs of every subcommand, each with its working directory.
pub fn every_command() -> Vec<(&'static str, PathBuf, Vec<&'static str>)> {
    let here = fixtures();
    let p = "perturbed-cat:delta=0.1";
    vec![
        ("analyze", here.clone(), vec!["analyze", "--system", p, "--n", "2e4", "--window", "200", "--tempered"]),
        ("manifold", here.clone(), vec!["manifold", "--system", p, "--eps", "0.05"]),
        ("shadow", here.clone(), vec!["shadow", "--system", "cat", "--eps", "0.05", "--samples", "64", "--input", "cat_single_jump.txt"]),
        ("close", here.clone(), vec!["close", "--system", p, "--period", "8", "--gap", "1e-5", "--x0", "0.31,0.47", "--eps", "0.05"]),
        (
            "horseshoe",
            here.clone(),
            vec!["horseshoe", "--system", "cat", "--n", "10", "--measure-steps", "2e5", "--support-size", "1e5", "--candidates", "1e5"],
        ),
        ("spectrum", here.clone(), vec!["spectrum", "--system", p, "--n", "1e5"]),
        ("select-power", here, vec!["select-power", "--system", p, "--n", "5e4"]),
    ]
}

/// Files of a directory, sorted by name, with their bytes.
pub fn contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}
