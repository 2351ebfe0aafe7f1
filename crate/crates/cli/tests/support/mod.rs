//! Helpers for driving the `cir` binary.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.stdout)
            .unwrap_or_else(|e| panic!("stdout is not JSON ({e}):\n{}", self.stdout))
    }

    #[track_caller]
    pub fn ok(self) -> Self {
        assert_eq!(self.code, 0, "stderr:\n{}", self.stderr);
        self
    }
}

pub fn cir<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let Output {
        status,
        stdout,
        stderr,
    } = Command::new(env!("CARGO_BIN_EXE_cir"))
        .args(args)
        .output()
        .expect("spawn cir");
    Run {
        code: status.code().unwrap_or(-1),
        stdout: String::from_utf8(stdout).expect("utf-8 stdout"),
        stderr: String::from_utf8(stderr).expect("utf-8 stderr"),
    }
}

pub fn p(path: &Path) -> String {
    path.display().to_string()
}

/// `cir synth` into `dir/name` with the given extra flags.
pub fn synth(dir: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let out = dir.join(name);
    let mut args = vec!["synth".to_string(), "--out".into(), p(&out)];
    args.extend(extra.iter().map(|s| s.to_string()));
    cir(&args).ok();
    out
}

/// Sum of `density * (right - left)` over a `bin_left,bin_right,density` CSV.
pub fn csv_integral(path: &Path) -> f64 {
    let mut r = csv::Reader::from_path(path).expect("open csv");
    r.records()
        .map(|rec| {
            let rec = rec.expect("csv record");
            let f = |i: usize| rec[i].parse::<f64>().expect("number");
            (f(1) - f(0)) * f(2)
        })
        .sum()
}
