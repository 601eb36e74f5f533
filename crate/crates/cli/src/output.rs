//! Byte-stable structured outputs: fixed-precision CSV and JSON reports with
//! a common metadata envelope.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ConfigEcho;

/// 17 significant digits: round-trips f64 exactly, keeps regression diffs
/// byte-stable.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Serialize)]
pub struct Report<'a, T: Serialize> {
    pub version: &'a str,
    pub seed_rule: &'a str,
    pub master_seed: u64,
    pub config: &'a ConfigEcho,
    pub data: T,
}

pub fn report<T: Serialize>(echo: &ConfigEcho, master_seed: u64, data: T) -> Report<'_, T> {
    Report {
        version: env!("CARGO_PKG_VERSION"),
        seed_rule: qsteer::rng::SEED_RULE,
        master_seed,
        config: echo,
        data,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)
}

pub struct CsvWriter {
    buf: Vec<u8>,
    columns: usize,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = Vec::new();
        let _ = writeln!(buf, "{}", header.join(","));
        Self { buf, columns: header.len() }
    }

    pub fn row(&mut self, fields: &[String]) {
        debug_assert_eq!(fields.len(), self.columns);
        let _ = writeln!(self.buf, "{}", fields.join(","));
    }

    pub fn write_to(self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.buf)
    }
}

pub fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut p = base.to_path_buf();
    let stem = p
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    p.set_file_name(format!("{stem}.{ext}"));
    p
}
