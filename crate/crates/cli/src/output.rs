//! Output formatting: fixed-precision floats, CSV assembly, and the
//! stdout-or-file sink.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::Result;

/// Floats are printed with 12 significant digits so CSV output is stable and
/// reproducible byte-for-byte.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.11e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Where a command writes its primary output.
pub enum OutSink {
    Stdout,
    File(PathBuf),
}

impl OutSink {
    pub fn from_flag(flag: Option<&Path>, config_out: Option<&Path>) -> Self {
        match flag.or(config_out) {
            Some(p) => OutSink::File(p.to_path_buf()),
            None => OutSink::Stdout,
        }
    }

    pub fn is_file(&self) -> bool {
        matches!(self, OutSink::File(_))
    }

    pub fn write_all(&self, content: &str) -> Result<()> {
        match self {
            OutSink::Stdout => {
                let mut stdout = std::io::stdout().lock();
                stdout.write_all(content.as_bytes())?;
                stdout.flush()?;
            }
            OutSink::File(path) => {
                std::fs::write(path, content)?;
            }
        }
        Ok(())
    }
}

/// Joins CSV fields; fields here never contain commas or quotes.
pub fn csv_line(fields: &[String]) -> String {
    fields.join(",")
}
