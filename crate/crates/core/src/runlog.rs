//! Time-indexed record of a run and its CSV form.
//!
//! Values are rounded to 9 significant digits when recorded, so a log read
//! back from CSV is bit-identical to the in-memory one. The last column holds
//! `;`-separated event tags.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Version tag written as the first header comment.
pub const SCHEMA: &str = "dacph-runlog 1";

/// Column names for an `n`-joint run, events excluded.
pub fn columns(n: usize) -> Vec<String> {
    let mut cols: Vec<String> = vec!["t".into(), "phase".into()];
    let vec_cols = |cols: &mut Vec<String>, name: &str| {
        for i in 1..=n {
            cols.push(format!("{name}{i}"));
        }
    };
    vec_cols(&mut cols, "q");
    vec_cols(&mut cols, "p");
    for c in ["r0x", "r0y", "theta0", "alpha", "alpha_d", "alpha_err"] {
        cols.push(c.into());
    }
    vec_cols(&mut cols, "s");
    cols.push("V".into());
    for name in ["tau_req", "tau_obs", "e_tau", "u", "d"] {
        vec_cols(&mut cols, name);
    }
    cols.push("chi".into());
    cols.push("c".into());
    vec_cols(&mut cols, "k");
    for c in ["loss", "b_err", "d_err", "b_unc", "d_unc"] {
        cols.push(c.into());
    }
    for prefix in ["b_true", "b_hat"] {
        for i in 1..=n {
            for j in 1..=n {
                cols.push(format!("{prefix}{i}{j}"));
            }
        }
    }
    vec_cols(&mut cols, "d_true");
    vec_cols(&mut cols, "d_hat");
    vec_cols(&mut cols, "dist_hat");
    for c in ["hl_norm", "ha_norm", "min_clearance", "proj_residual"] {
        cols.push(c.into());
    }
    cols
}

/// Rounds to the precision written to CSV.
pub fn round9(x: f64) -> f64 {
    if x.is_finite() {
        format!("{x:.8e}").parse().expect("formatted float parses")
    } else {
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub values: Vec<f64>,
    pub events: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    n: usize,
    header: Vec<String>,
    rows: Vec<Row>,
}

impl RunLog {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            header: columns(n),
            rows: Vec::new(),
        }
    }

    pub fn dof(&self) -> usize {
        self.n
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends a row; times must increase strictly.
    pub fn push(&mut self, values: Vec<f64>, events: String) -> Result<()> {
        if values.len() != self.header.len() {
            return Err(Error::DimensionMismatch {
                what: "log row",
                expected: self.header.len(),
                got: values.len(),
            });
        }
        let values: Vec<f64> = values.into_iter().map(round9).collect();
        if let Some(last) = self.rows.last() {
            if !(values[0] > last.values[0]) {
                return Err(Error::Schema(format!(
                    "time must increase strictly ({} after {})",
                    values[0], last.values[0]
                )));
            }
        }
        self.rows.push(Row { values, events });
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.index_of(name)?;
        Ok(self.rows.iter().map(|r| r.values[i]).collect())
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# {SCHEMA}")?;
        writeln!(w, "{},events", self.header.join(","))?;
        let mut line = String::new();
        for row in &self.rows {
            line.clear();
            for v in &row.values {
                use std::fmt::Write as _;
                write!(line, "{v:.8e},").expect("write to string");
            }
            line.push_str(&row.events);
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let schema = lines.next().transpose()?.unwrap_or_default();
        if schema.trim_start_matches('#').trim() != SCHEMA {
            return Err(Error::Schema(format!("unsupported schema line `{schema}`")));
        }
        let header_line = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Schema("missing header".into()))?;
        let mut header: Vec<String> = header_line.split(',').map(str::to_string).collect();
        if header.pop().as_deref() != Some("events") {
            return Err(Error::Schema("last column must be `events`".into()));
        }
        let n = header.iter().filter(|c| c.starts_with('q')).count();
        if header != columns(n) {
            return Err(Error::Schema("column layout does not match this version".into()));
        }
        let mut log = RunLog::new(n);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let mut fields = line.splitn(header.len() + 1, ',');
            let mut values = Vec::with_capacity(header.len());
            for _ in 0..header.len() {
                let f = fields
                    .next()
                    .ok_or_else(|| Error::Schema(format!("row {}: too few fields", lineno + 1)))?;
                values.push(f.parse().map_err(|_| {
                    Error::Schema(format!("row {}: `{f}` is not a number", lineno + 1))
                })?);
            }
            let events = fields.next().unwrap_or_default().to_string();
            log.push(values, events)?;
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let mut log = RunLog::new(2);
        let width = log.header().len();
        for k in 0..5 {
            let values: Vec<f64> = (0..width)
                .map(|i| (k as f64 + 1.0) * (i as f64 + 0.1).sqrt() * 1e-3 + if i == 0 { k as f64 } else { 0.0 })
                .collect();
            log.push(values, if k == 2 { "phase:1;freeze".into() } else { String::new() })
                .unwrap();
        }
        let mut bytes = Vec::new();
        log.write_csv(&mut bytes).unwrap();
        let back = RunLog::read_csv(bytes.as_slice()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn nan_survives_round_trip() {
        let mut log = RunLog::new(2);
        let mut values = vec![0.0; log.header().len()];
        let loss = log.index_of("loss").unwrap();
        values[loss] = f64::NAN;
        log.push(values, String::new()).unwrap();
        let mut bytes = Vec::new();
        log.write_csv(&mut bytes).unwrap();
        let back = RunLog::read_csv(bytes.as_slice()).unwrap();
        assert!(back.rows()[0].values[loss].is_nan());
    }

    #[test]
    fn time_must_increase() {
        let mut log = RunLog::new(2);
        let w = log.header().len();
        log.push(vec![1.0; w], String::new()).unwrap();
        assert!(log.push(vec![1.0; w], String::new()).is_err());
    }

    #[test]
    fn foreign_schema_is_rejected() {
        assert!(matches!(
            RunLog::read_csv("# other 3\nt,events\n".as_bytes()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn rounding_keeps_nine_digits() {
        assert_eq!(round9(1.234567891234), 1.23456789);
        assert_eq!(round9(round9(std::f64::consts::PI)), round9(std::f64::consts::PI));
    }
}
