//! CSV ingestion and artifact writing.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use survode::likelihood::SurvivalDataset;

use crate::error::CliError;

/// Provenance stamped on every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: Option<u64>,
}

impl Meta {
    pub fn new(command: &str, config_hash: String, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seed,
        }
    }

    pub fn comment_line(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        format!(
            "# survode {} command={} config_hash={} seed={}",
            self.version, self.command, self.config_hash, seed
        )
    }
}

/// Reads `time`, `status` and covariate columns; lines starting with `#` are skipped.
pub fn ingest_csv(path: &Path) -> Result<SurvivalDataset, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_dataset(file)
}

pub fn parse_dataset<R: Read>(reader: R) -> Result<SurvivalDataset, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Validation(format!("missing column {name:?}")))
    };
    let time_col = find("time")?;
    let status_col = find("status")?;
    let cov_cols: Vec<usize> = (0..header.len()).filter(|&j| j != time_col && j != status_col).collect();
    let mut seen = std::collections::BTreeSet::new();
    for h in &header {
        if !seen.insert(h) {
            return Err(CliError::Validation(format!("duplicate column {h:?}")));
        }
    }

    let mut times = Vec::new();
    let mut status = Vec::new();
    let mut covariates = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(CliError::Validation(format!(
                "line {line}: expected {} fields, found {}",
                header.len(),
                record.len()
            )));
        }
        let cell = |j: usize| -> Result<f64, CliError> {
            let raw = &record[j];
            let at = || format!("line {line}, column {:?}", header[j]);
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
                return Err(CliError::Validation(format!("{}: missing value", at())));
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| CliError::Validation(format!("{}: {raw:?} is not a number", at())))?;
            if !v.is_finite() {
                return Err(CliError::Validation(format!("{}: {raw:?} is not finite", at())));
            }
            Ok(v)
        };
        let t = cell(time_col)?;
        if t <= 0.0 {
            return Err(CliError::Validation(format!(
                "line {line}, column \"time\": time must be positive, got {t}"
            )));
        }
        let s = cell(status_col)?;
        let event = if s == 0.0 {
            false
        } else if s == 1.0 {
            true
        } else {
            return Err(CliError::Validation(format!(
                "line {line}, column \"status\": status must be 0 or 1, got {s}"
            )));
        };
        times.push(t);
        status.push(event);
        for &j in &cov_cols {
            covariates.push(cell(j)?);
        }
    }
    if times.is_empty() {
        return Err(CliError::Validation("data file has no rows".into()));
    }
    let names = cov_cols.iter().map(|&j| header[j].clone()).collect();
    Ok(SurvivalDataset::new(times, status, covariates, names, None)?)
}

/// Data set with only the named covariate columns, in the given order.
pub fn select_columns(data: &SurvivalDataset, names: &[String]) -> Result<SurvivalDataset, CliError> {
    let idx = names
        .iter()
        .map(|n| {
            data.column_index(n)
                .ok_or_else(|| CliError::Validation(format!("covariate {n:?} is not a data column")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut x = Vec::with_capacity(data.n() * idx.len());
    for i in 0..data.n() {
        let row = data.row(i);
        x.extend(idx.iter().map(|&j| row[j]));
    }
    Ok(SurvivalDataset::new(
        data.times().to_vec(),
        data.status().to_vec(),
        x,
        names.to_vec(),
        data.max_time(),
    )?)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

/// Writes a CSV preceded by the provenance comment line.
pub fn write_csv(path: &Path, meta: &Meta, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut out = create(path)?;
    writeln!(out, "{}", meta.comment_line()).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn write_toml<T: Serialize>(path: &Path, doc: &T) -> Result<(), CliError> {
    let text = toml::to_string(doc).map_err(|e| CliError::Numeric(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_dataset(path: &Path, meta: &Meta, data: &SurvivalDataset) -> Result<(), CliError> {
    let mut header = vec!["time".to_string(), "status".to_string()];
    header.extend(data.column_names().iter().cloned());
    let rows: Vec<Vec<String>> = (0..data.n())
        .map(|i| {
            let mut r = vec![num(data.times()[i]), u8::from(data.status()[i]).to_string()];
            r.extend(data.row(i).iter().map(|&v| num(v)));
            r
        })
        .collect();
    write_csv(path, meta, &header, &rows)
}

/// Shortest representation that parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// Reads a matrix CSV with a header, skipping comment lines.
pub fn read_matrix(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec
            .iter()
            .map(|c| {
                c.trim().parse::<f64>().map_err(|_| {
                    CliError::Validation(format!("{}: line {line}: {c:?} is not a number", path.display()))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}
