#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

pub fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn wmevade(args: &[&str], stdin: &[u8]) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_wmevade"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary runs");
    child.stdin.take().unwrap().write_all(stdin).unwrap();
    child.wait_with_output().unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small dense experiment on an MNIST subset: seconds, not minutes.
pub fn smoke_config(dir: &Path, owners: usize, seed: u64) -> PathBuf {
    let sizes: Vec<usize> = (1..=owners).collect();
    let cfg = serde_json::json!({
        "mnist_dir": mnist_dir(),
        "train_limit": 6000,
        "test_limit": 1000,
        "owners": owners,
        "architecture": "dense",
        "train": {"epochs": 3},
        "accuracy_floor": 0.8,
        "sizes": sizes,
        "detector": {"train_per_class": 300, "test_per_class": 200, "epochs": 5, "simulated_triggers": 1000},
        "seed": seed,
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}
