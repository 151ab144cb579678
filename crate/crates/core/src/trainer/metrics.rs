use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossReport;

pub const CSV_HEADER: &str =
    "epoch,l_c,l_s,l_id1,l_id2,l_total,l_new,gamma,inference_seconds,timestamp";

/// Per-epoch training summary: mean step losses, γ in effect at the last
/// step, and timing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub l_c: f64,
    pub l_s: f64,
    pub l_id1: f64,
    pub l_id2: f64,
    pub l_total: f64,
    pub l_new: f64,
    pub gamma: f64,
    pub inference_seconds: f64,
    /// Unix seconds; 0 when timing is disabled.
    pub timestamp: u64,
}

impl MetricsRow {
    pub fn from_reports(epoch: usize, reports: &[LossReport], gamma: f64) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricsRow {
            epoch,
            l_c: mean(|r| r.l_c),
            l_s: mean(|r| r.l_s),
            l_id1: mean(|r| r.l_id1),
            l_id2: mean(|r| r.l_id2),
            l_total: mean(|r| r.l_total),
            l_new: mean(|r| r.l_new),
            gamma,
            inference_seconds: 0.0,
            timestamp: 0,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            format_g(self.l_c),
            format_g(self.l_s),
            format_g(self.l_id1),
            format_g(self.l_id2),
            format_g(self.l_total),
            format_g(self.l_new),
            format_g(self.gamma),
            format_g(self.inference_seconds),
            self.timestamp
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return Err(Error::Data(format!(
                "expected 10 metrics columns, got {}",
                f.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Data(format!("bad metrics value {:?}", f[i])))
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse()
                .map_err(|_| Error::Data(format!("bad metrics value {:?}", f[i])))
        };
        Ok(MetricsRow {
            epoch: int(0)? as usize,
            l_c: num(1)?,
            l_s: num(2)?,
            l_id1: num(3)?,
            l_id2: num(4)?,
            l_total: num(5)?,
            l_new: num(6)?,
            gamma: num(7)?,
            inference_seconds: num(8)?,
            timestamp: int(9)?,
        })
    }
}

/// Six significant digits in the style of C's `%g`.
pub fn format_g(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Append-only metrics file.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        writeln!(w.out, "{CSV_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(w)
    }

    /// Append to an existing file, or create it with a header.
    pub fn append(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv()).map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Data(format!(
            "{} lacks the metrics header",
            path.display()
        )));
    }
    lines.map(MetricsRow::parse_csv).collect()
}
