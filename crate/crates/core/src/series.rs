use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::ScheduleKind;

/// Estimator bookkeeping carried alongside a curve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    /// Ensemble size behind the estimate, `None` for closed forms.
    pub samples: Option<usize>,
    pub schedule: Option<ScheduleKind>,
    pub estimator: String,
    /// Free-form flags such as `stderr_undefined` or `censored:120`.
    pub flags: Vec<String>,
}

/// A named, step-indexed scalar curve with per-point standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSeries {
    pub name: String,
    pub steps: Vec<usize>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub meta: SeriesMeta,
}

impl DiagnosticSeries {
    pub fn new(
        name: impl Into<String>,
        steps: Vec<usize>,
        values: Vec<f64>,
        stderr: Vec<f64>,
        meta: SeriesMeta,
    ) -> Result<Self> {
        if steps.len() != values.len() || steps.len() != stderr.len() {
            return Err(Error::Argument(format!(
                "series lengths differ: {} steps, {} values, {} stderr",
                steps.len(),
                values.len(),
                stderr.len()
            )));
        }
        if stderr.iter().any(|s| *s < 0.0) {
            return Err(Error::Argument("negative standard error".into()));
        }
        Ok(Self {
            name: name.into(),
            steps,
            values,
            stderr,
            meta,
        })
    }

    /// Closed-form curve: zero standard error everywhere.
    pub fn exact(
        name: impl Into<String>,
        steps: Vec<usize>,
        values: Vec<f64>,
        estimator: &str,
    ) -> Self {
        let stderr = vec![0.0; steps.len()];
        Self {
            name: name.into(),
            steps,
            values,
            stderr,
            meta: SeriesMeta {
                estimator: estimator.to_string(),
                ..SeriesMeta::default()
            },
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn value_at(&self, step: usize) -> Option<f64> {
        self.steps
            .iter()
            .position(|&s| s == step)
            .map(|i| self.values[i])
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.meta.flags.iter().any(|f| f == flag)
    }

    /// CSV with header `n,value,stderr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,value,stderr\n");
        for ((n, v), s) in self.steps.iter().zip(&self.values).zip(&self.stderr) {
            let _ = writeln!(out, "{n},{v},{s}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path, name: &str) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::parse_csv(file, name).map_err(|reason| Error::format(path, reason))
    }

    fn parse_csv(reader: impl Read, name: &str) -> std::result::Result<Self, String> {
        let mut lines = BufReader::new(reader).lines();
        let header = lines
            .next()
            .ok_or("empty file")?
            .map_err(|e| e.to_string())?;
        if header.trim() != "n,value,stderr" {
            return Err(format!("unexpected header {header:?}"));
        }
        let (mut steps, mut values, mut stderr) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(format!("line {}: expected 3 fields", i + 2));
            }
            let bad = |f: &str| format!("line {}: bad number {f:?}", i + 2);
            steps.push(fields[0].trim().parse().map_err(|_| bad(fields[0]))?);
            values.push(fields[1].trim().parse().map_err(|_| bad(fields[1]))?);
            stderr.push(fields[2].trim().parse().map_err(|_| bad(fields[2]))?);
        }
        Ok(Self {
            name: name.to_string(),
            steps,
            values,
            stderr,
            meta: SeriesMeta::default(),
        })
    }
}
