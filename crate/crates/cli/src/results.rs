//! The sweep results table and its CSV form.
//!
//! Formatting is fixed-width decimal so a sweep rerun with the same config
//! and seeds produces a byte-identical file. `wall_time_s` is part of the
//! schema but written as a constant placeholder for exactly that reason;
//! measured times go to stderr instead.

use anyhow::{bail, Context, Result};

pub const CSV_HEADER: &str =
    "split,data_per,query_per,rho,mode,seed,accuracy,avg_connections,query_tbs,feature_tbs,wall_time_s";

pub const WALL_TIME_PLACEHOLDER: &str = "0.000";

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub split: usize,
    pub data_per: f64,
    pub query_per: f64,
    pub rho: f64,
    pub mode: String,
    pub seed: u64,
    pub accuracy: f64,
    pub avg_connections: f64,
    pub query_tbs: f64,
    pub feature_tbs: f64,
    pub wall_time_s: String,
}

impl Row {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.3},{:.3},{:.3},{},{},{:.6},{:.6},{:.3},{:.3},{}",
            self.split,
            self.data_per,
            self.query_per,
            self.rho,
            self.mode,
            self.seed,
            self.accuracy,
            self.avg_connections,
            self.query_tbs,
            self.feature_tbs,
            self.wall_time_s
        )
    }
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<Row>> {
    let mut lines = text.lines();
    let header = lines.next().context("empty results file")?;
    if header != CSV_HEADER {
        bail!("unexpected CSV header `{header}`");
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            bail!("row {}: expected 11 fields, found {}", i + 2, fields.len());
        }
        let num = |idx: usize| -> Result<f64> {
            fields[idx]
                .parse()
                .with_context(|| format!("row {}: field `{}`", i + 2, fields[idx]))
        };
        rows.push(Row {
            split: fields[0]
                .parse()
                .with_context(|| format!("row {}: split `{}`", i + 2, fields[0]))?,
            data_per: num(1)?,
            query_per: num(2)?,
            rho: num(3)?,
            mode: fields[4].to_string(),
            seed: fields[5]
                .parse()
                .with_context(|| format!("row {}: seed `{}`", i + 2, fields[5]))?,
            accuracy: num(6)?,
            avg_connections: num(7)?,
            query_tbs: num(8)?,
            feature_tbs: num(9)?,
            wall_time_s: fields[10].to_string(),
        });
    }
    Ok(rows)
}
