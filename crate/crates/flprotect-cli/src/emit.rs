//! CSV emission. Numbers use Rust's shortest round-trip formatting; optional
//! fields are left empty. The schema line names the command so downstream
//! tooling can key on column names.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

pub const SCHEMA_VERSION: &str = "v1";

pub struct CsvDoc {
    buffer: String,
}

impl CsvDoc {
    pub fn new(command: &str) -> Self {
        let mut buffer = String::new();
        buffer.push_str(&format!("# flprotect-csv {SCHEMA_VERSION} command={command}\n"));
        Self { buffer }
    }

    pub fn comment(&mut self, text: &str) {
        self.buffer.push_str(&format!("# {text}\n"));
    }

    pub fn row(&mut self, fields: &[String]) {
        self.buffer.push_str(&fields.join(","));
        self.buffer.push('\n');
    }

    pub fn header(&mut self, names: &[&str]) {
        self.buffer.push_str(&names.join(","));
        self.buffer.push('\n');
    }

    /// Writes the whole document to the file, or stdout when no path is
    /// given.
    pub fn finish(self, out: Option<&Path>) -> Result<()> {
        match out {
            Some(path) => std::fs::write(path, self.buffer.as_bytes())
                .with_context(|| format!("writing {}", path.display())),
            None => {
                let stdout = std::io::stdout();
                let mut lock = stdout.lock();
                lock.write_all(self.buffer.as_bytes()).context("writing stdout")
            }
        }
    }
}

pub fn float(v: f64) -> String {
    assert!(v.is_finite(), "refusing to emit a non-finite value");
    format!("{v}")
}

pub fn opt_float(v: Option<f64>) -> String {
    v.map(float).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, 123456.789e-12, -0.0, 5.0] {
            let s = float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
    }
}
