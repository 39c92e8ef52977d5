//! CSV emission: RFC-4180-style rows behind a single `#`-prefixed metadata
//! header line carrying the library version and the seed.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

pub struct CsvOut {
    dest: Box<dyn Write>,
}

impl CsvOut {
    /// Write to `path`, or stdout when none is given.
    pub fn create(path: Option<&Path>) -> io::Result<Self> {
        let dest: Box<dyn Write> = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    if !dir.as_os_str().is_empty() {
                        std::fs::create_dir_all(dir)?;
                    }
                }
                Box::new(BufWriter::new(File::create(p)?))
            }
            None => Box::new(io::stdout().lock()),
        };
        Ok(CsvOut { dest })
    }

    pub fn meta(&mut self, detail: &str) -> io::Result<()> {
        writeln!(
            self.dest,
            "# sparsity v{} {detail}",
            env!("CARGO_PKG_VERSION")
        )
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> io::Result<()> {
        let mut first = true;
        for f in fields {
            if !first {
                write!(self.dest, ",")?;
            }
            first = false;
            let s = f.as_ref();
            if s.contains(',') || s.contains('"') || s.contains('\n') {
                write!(self.dest, "\"{}\"", s.replace('"', "\"\""))?;
            } else {
                write!(self.dest, "{s}")?;
            }
        }
        writeln!(self.dest)
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.dest.flush()
    }
}

/// Shortest-roundtrip float formatting (deterministic for identical bits).
pub fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v}")
    }
}
