//! Plain-text CSI interchange: header `t,s,a,re,im`, one row per entry.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Complex, CsiDims, CsiRecording};
use crate::error::{Error, Result};
use crate::manifest::ManifestEntry;

pub const CSV_HEADER: &str = "t,s,a,re,im";

/// Write every entry in (t, s, a) order. Values use the shortest decimal
/// form that parses back to the same `f64`.
pub fn export_csv(rec: &CsiRecording, path: &Path) -> Result<()> {
    let d = rec.dims();
    let mut out = String::with_capacity(rec.samples().len() * 48);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for t in 0..d.frames {
        for s in 0..d.subcarriers {
            for a in 0..d.antennas {
                let z = rec.get(t, s, a);
                let _ = writeln!(out, "{t},{s},{a},{:?},{:?}", z.re, z.im);
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Build a recording from a CSV grid; dimensions are inferred from the
/// largest indices and every cell of the grid must appear exactly once.
pub fn import_csv(path: &Path, entry: &ManifestEntry, sample_rate_hz: f64) -> Result<CsiRecording> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(err(1, format!("expected header `{CSV_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(line_no, format!("expected 5 fields, got {}", fields.len())));
        }
        let idx = |k: usize| {
            fields[k]
                .parse::<usize>()
                .map_err(|_| err(line_no, format!("bad index `{}`", fields[k])))
        };
        let val = |k: usize| {
            fields[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line_no, format!("bad value `{}`", fields[k])))
        };
        rows.push((line_no, idx(0)?, idx(1)?, idx(2)?, Complex::new(val(3)?, val(4)?)));
    }
    if rows.is_empty() {
        return Err(err(2, "no data rows".into()));
    }
    let dims = CsiDims {
        frames: rows.iter().map(|r| r.1).max().unwrap() + 1,
        subcarriers: rows.iter().map(|r| r.2).max().unwrap() + 1,
        antennas: rows.iter().map(|r| r.3).max().unwrap() + 1,
    };
    let n = dims
        .len()
        .filter(|&n| n <= rows.len())
        .ok_or_else(|| err(0, format!("incomplete grid: {} rows for dims {dims:?}", rows.len())))?;
    let mut samples = vec![Complex::new(0.0, 0.0); n];
    let mut seen = vec![false; n];
    for (line_no, t, s, a, z) in rows {
        let k = (t * dims.subcarriers + s) * dims.antennas + a;
        if std::mem::replace(&mut seen[k], true) {
            return Err(err(line_no, format!("duplicate index ({t},{s},{a})")));
        }
        samples[k] = z;
    }
    if let Some(k) = seen.iter().position(|&v| !v) {
        let a = k % dims.antennas;
        let s = (k / dims.antennas) % dims.subcarriers;
        let t = k / (dims.antennas * dims.subcarriers);
        return Err(err(0, format!("incomplete grid: missing ({t},{s},{a})")));
    }
    CsiRecording::new(dims, samples, sample_rate_hz, entry.condition, entry.origin)
}
