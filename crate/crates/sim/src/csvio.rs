//! Labeled CSV files: one sample per row, features first, integer label last.
//!
//! Lines starting with `#` are comments. Floats are written with Rust's
//! shortest round-trip formatting, so a write/read cycle is lossless.

use std::fs;
use std::io::Write;
use std::path::Path;

use eflsim_core::data::LabeledDataset;
use eflsim_core::Matrix;

use crate::error::{Result, SimError};

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCsv {
    pub dataset: LabeledDataset,
    /// Non-fatal findings, such as labels missing from `0..n_labels`.
    pub warnings: Vec<String>,
}

pub fn load_csv(path: &Path, header: bool) -> Result<LoadedCsv> {
    let text = fs::read(path).map_err(|e| SimError::io(path, e))?;
    parse_csv(path, &text, header)
}

fn parse_csv(path: &Path, text: &[u8], header: bool) -> Result<LoadedCsv> {
    let err = |line: u64, reason: String| SimError::Csv { path: path.to_path_buf(), line, reason };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 2 {
            return Err(err(line, format!("expected at least one feature and a label, got {} field(s)", rec.len())));
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(err(line, format!("expected {w} fields, got {}", rec.len())));
            }
            _ => {}
        }
        let fields: Vec<&str> = rec.iter().collect();
        let (label_field, features) = fields.split_last().expect("at least two fields");
        for (j, f) in features.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| err(line, format!("column {}: {f:?} is not a number", j + 1)))?;
            if !v.is_finite() {
                return Err(err(line, format!("column {}: non-finite value {f}", j + 1)));
            }
            values.push(v);
        }
        let label: usize = label_field
            .parse()
            .map_err(|_| err(line, format!("label {label_field:?} is not a non-negative integer")))?;
        labels.push(label);
    }
    let Some(width) = width else {
        return Err(err(0, "file contains no samples".into()));
    };
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut warnings = Vec::new();
    let mut seen = vec![false; n_labels];
    for &l in &labels {
        seen[l] = true;
    }
    let missing: Vec<usize> = (0..n_labels).filter(|&l| !seen[l]).collect();
    if !missing.is_empty() {
        let w = format!("{}: labels {missing:?} never occur; label ids are taken as 0..{n_labels}", path.display());
        log::warn!("{w}");
        warnings.push(w);
    }
    if n_labels < 2 {
        return Err(err(0, format!("need at least two labels, found {n_labels}")));
    }
    let features = Matrix::from_vec(labels.len(), width - 1, values)?;
    Ok(LoadedCsv { dataset: LabeledDataset::new(features, labels, n_labels)?, warnings })
}

/// Writes `data` as headerless CSV, preceded by `comment` lines.
pub fn write_csv(path: &Path, data: &LabeledDataset, comment: &[String]) -> Result<()> {
    let mut out = String::new();
    for c in comment {
        for line in c.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    for (row, label) in data.features().iter_rows().zip(data.labels()) {
        for v in row {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{label}\n"));
    }
    write_file(path, out.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| SimError::io(path, e))?;
    f.write_all(bytes).map_err(|e| SimError::io(path, e))
}
