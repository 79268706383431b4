#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

pub fn geohier(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geohier"))
        .args(args)
        .env_remove("GEOHIER_OUT")
        .output()
        .expect("binary runs")
}

/// Run and require exit status 0.
pub fn geohier_ok(args: &[&str]) -> Output {
    let out = geohier(args);
    assert!(
        out.status.success(),
        "geohier {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Every regular file in `dir`, by name.
pub fn dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .expect("readable dir")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

/// Small simulated dataset written through the `simulate` subcommand.
pub fn simulated_data(dir: &Path, n_rural: usize, n_urban: usize, seed: u64) {
    geohier_ok(&[
        "simulate",
        "--out",
        path_str(dir),
        "--n-rural",
        &n_rural.to_string(),
        "--n-urban",
        &n_urban.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
}

pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}
