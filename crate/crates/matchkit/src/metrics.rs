//! Append-only metrics log: one `step<TAB>loss<TAB>eval_acc` line per
//! training step, `-` when no evaluation ran at that step. No timestamps,
//! so logs from identical seeded runs are byte-identical.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use matchkit_core::Real;

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?),
        })
    }

    pub fn record(&mut self, step: u64, loss: Real, eval_acc: Option<Real>) -> std::io::Result<()> {
        self.out.write_all(format_line(step, loss, eval_acc).as_bytes())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

pub fn format_line(step: u64, loss: Real, eval_acc: Option<Real>) -> String {
    match eval_acc {
        Some(acc) => format!("{step}\t{loss:.6}\t{acc:.4}\n"),
        None => format!("{step}\t{loss:.6}\t-\n"),
    }
}
