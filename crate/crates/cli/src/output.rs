use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use ttd_core::series_io::SCHEMA_VERSION;

pub const MINUTES_PER_YEAR: f64 = 365.0 * 24.0 * 60.0;

/// Header lines for CSV outputs (written as `#` comments).
pub fn preamble(command: &str, seed: Option<u64>) -> Vec<String> {
    vec![
        format!("schema_version = {SCHEMA_VERSION}"),
        format!("seed = {}", seed.map_or("none".to_string(), |s| s.to_string())),
        format!("command = {command}"),
    ]
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

pub fn to_toml<T: serde::Serialize>(value: &T) -> anyhow::Result<String> {
    toml::to_string(value).context("serializing report")
}

/// Annual continuously compounded rate to a per-minute rate.
pub fn per_minute(annual: f64) -> f64 {
    annual / MINUTES_PER_YEAR
}
