//! Artifact directory with fingerprinted files.
//!
//! Every text artifact names the resolved-config fingerprint in a format
//! appropriate comment (`#` for CSV, a `fingerprint` key for JSON, `//` for
//! DOT, `<!-- -->` for SVG), and each directory gets a copy of the resolved
//! config. Nothing written depends on wall-clock time.

use std::fmt::Display;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{LabError, LabResult};
use crate::formats::write_bytes;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub fingerprint: String,
    pub written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn create(dir: &Path, cfg: &RunConfig) -> LabResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let mut a = Self {
            dir: dir.to_path_buf(),
            fingerprint: cfg.fingerprint(),
            written: Vec::new(),
        };
        let body = format!("# fingerprint = {}\n{}", a.fingerprint, cfg.resolved_toml());
        a.write(RESOLVED_CONFIG, body.as_bytes())?;
        Ok(a)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> LabResult<PathBuf> {
        let p = self.path(name);
        write_bytes(&p, bytes)?;
        self.written.push(p.clone());
        Ok(p)
    }

    pub fn header_line(&self) -> String {
        format!(
            "fingerprint={} tool=tmle-lens {}",
            self.fingerprint,
            env!("CARGO_PKG_VERSION")
        )
    }

    pub fn csv(&mut self, name: &str, table: &Table) -> LabResult<PathBuf> {
        let mut out = format!("# {}\n", self.header_line());
        out.push_str(&table.render());
        self.write(name, out.as_bytes())
    }

    /// Writes `value` with a top-level `fingerprint` key added.
    pub fn json(&mut self, name: &str, mut value: serde_json::Value) -> LabResult<PathBuf> {
        if let Some(obj) = value.as_object_mut() {
            obj.insert("fingerprint".into(), self.fingerprint.clone().into());
        }
        let mut text = serde_json::to_string_pretty(&value).expect("json value serializes");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn dot(&mut self, name: &str, body: &str) -> LabResult<PathBuf> {
        let text = format!("// {}\n{body}", self.header_line());
        self.write(name, text.as_bytes())
    }

    pub fn svg(&mut self, name: &str, body: &str) -> LabResult<PathBuf> {
        self.write(name, body.as_bytes())
    }
}

/// Rows of already formatted cells under a header.
#[derive(Clone, Debug, Default)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.header.join(","));
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.join(","));
        }
        out
    }
}

/// Cell text; non-finite reals become empty cells.
pub fn cell(v: impl Display) -> String {
    let s = v.to_string();
    if s == "NaN" || s == "inf" || s == "-inf" {
        String::new()
    } else {
        s
    }
}

/// Cell for an optional real.
pub fn opt_cell(v: Option<f64>) -> String {
    v.map(cell).unwrap_or_default()
}
