//! CSV ingestion and the design document format.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sive_core::SaturatedDesign;

use crate::{Error, Result};

/// Column roles in an input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub outcome: String,
    pub treatment: String,
    pub instrument: String,
    #[serde(default)]
    pub covariates: Vec<String>,
}

impl DatasetSchema {
    pub fn new(outcome: &str, treatment: &str, instrument: &str, covariates: &[&str]) -> Self {
        Self {
            outcome: outcome.into(),
            treatment: treatment.into(),
            instrument: instrument.into(),
            covariates: covariates.iter().map(|c| c.to_string()).collect(),
        }
    }

    fn roles(&self) -> impl Iterator<Item = &str> {
        [&self.outcome, &self.treatment, &self.instrument]
            .into_iter()
            .chain(&self.covariates)
            .map(String::as_str)
    }

    /// Names must be nonempty and play one role each.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for name in self.roles() {
            if name.is_empty() {
                return Err(Error::Validation("empty column name in schema".into()));
            }
            if seen.insert(name, ()).is_some() {
                return Err(Error::Validation(format!("column `{name}` is assigned more than one role")));
            }
        }
        Ok(())
    }
}

/// Recodes a column to `1[value > threshold]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binarize {
    pub column: String,
    pub threshold: f64,
}

impl FromStr for Binarize {
    type Err = Error;

    /// Parses `COL:THRESH`.
    fn from_str(s: &str) -> Result<Self> {
        let (column, threshold) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::Validation(format!("expected COL:THRESH, got `{s}`")))?;
        let threshold: f64 = threshold
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("threshold `{threshold}` is not a number")))?;
        if column.is_empty() || !threshold.is_finite() {
            return Err(Error::Validation(format!("invalid binarization `{s}`")));
        }
        Ok(Self {
            column: column.into(),
            threshold,
        })
    }
}

/// A parsed file: numeric outcome, treatment and instrument, and covariate
/// cells kept as canonical text so they can serve as saturation keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub outcome: Vec<f64>,
    pub treatment: Vec<f64>,
    pub instrument: Vec<f64>,
    /// One entry per observation, one code per covariate column.
    pub covariates: Vec<Vec<String>>,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.outcome.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcome.is_empty()
    }

    /// Covariate column `j` as numbers, for linear controls.
    pub fn covariate_column(&self, j: usize) -> Result<Vec<f64>> {
        self.covariates
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row[j].parse::<f64>().map_err(|_| {
                    Error::Validation(format!(
                        "row {}: covariate `{}` value `{}` is not numeric and cannot enter linearly",
                        i + 1,
                        self.covariate_names[j],
                        row[j]
                    ))
                })
            })
            .collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let pick = |v: &[f64]| rows.iter().map(|&r| v[r]).collect();
        Self {
            outcome: pick(&self.outcome),
            treatment: pick(&self.treatment),
            instrument: pick(&self.instrument),
            covariates: rows.iter().map(|&r| self.covariates[r].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
        }
    }
}

const MISSING: [&str; 5] = ["", "NA", "na", "NaN", "."];

/// Numbers are canonicalized so that `1`, `1.0` and `01` are one group.
fn canonical(cell: &str) -> String {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => format!("{v}"),
        _ => cell.to_string(),
    }
}

pub fn read_dataset(path: &Path, schema: &DatasetSchema, binarize: &[Binarize]) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(file, schema, binarize)
}

/// Parses comma-separated text with a header row. Missing values are
/// rejected with their row and column.
pub fn parse_dataset<R: std::io::Read>(reader: R, schema: &DatasetSchema, binarize: &[Binarize]) -> Result<Dataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("column `{name}` not found in header")))
    };
    let (iy, it, iz) = (index(&schema.outcome)?, index(&schema.treatment)?, index(&schema.instrument)?);
    let icov = schema.covariates.iter().map(|c| index(c)).collect::<Result<Vec<_>>>()?;
    let recode: BTreeMap<usize, f64> = binarize
        .iter()
        .map(|b| index(&b.column).map(|i| (i, b.threshold)))
        .collect::<Result<_>>()?;

    let mut data = Dataset {
        outcome: Vec::new(),
        treatment: Vec::new(),
        instrument: Vec::new(),
        covariates: Vec::new(),
        covariate_names: schema.covariates.clone(),
    };
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        // line numbers count the header as line 1
        let line = record.position().map_or(k as u64 + 2, |p| p.line());
        let cell = |i: usize| -> Result<&str> {
            let v = record.get(i).unwrap_or("");
            if MISSING.contains(&v) {
                return Err(Error::Validation(format!(
                    "line {line}, column `{}`: missing value",
                    &headers[i]
                )));
            }
            Ok(v)
        };
        let number = |i: usize| -> Result<f64> {
            let raw = cell(i)?;
            let v: f64 = raw.parse().map_err(|_| {
                Error::Validation(format!("line {line}, column `{}`: `{raw}` is not a number", &headers[i]))
            })?;
            if !v.is_finite() {
                return Err(Error::Validation(format!("line {line}, column `{}`: non-finite value", &headers[i])));
            }
            Ok(recode.get(&i).map_or(v, |&thr| f64::from(u8::from(v > thr))))
        };
        data.outcome.push(number(iy)?);
        data.treatment.push(number(it)?);
        let z = number(iz)?;
        if z != 0.0 && z != 1.0 {
            return Err(Error::Validation(format!(
                "line {line}, column `{}`: instrument value {z} is not binary (use --binarize {}:THRESH)",
                &headers[iz], &headers[iz]
            )));
        }
        data.instrument.push(z);
        let row = icov
            .iter()
            .map(|&i| {
                let v = cell(i)?;
                Ok(match recode.get(&i) {
                    Some(_) => format!("{}", number(i)?),
                    None => canonical(v),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        data.covariates.push(row);
    }
    if data.is_empty() {
        return Err(Error::Validation("no data rows".into()));
    }
    Ok(data)
}

/// Saturated design in a plain serializable form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignDocument {
    pub n: usize,
    #[serde(rename = "G")]
    pub groups: usize,
    pub group_of: Vec<usize>,
    pub instrument: Vec<u8>,
}

impl From<&SaturatedDesign> for DesignDocument {
    fn from(d: &SaturatedDesign) -> Self {
        Self {
            n: d.n(),
            groups: d.groups(),
            group_of: d.group_of().to_vec(),
            instrument: d.instrument().iter().map(|&b| u8::from(b)).collect(),
        }
    }
}

impl DesignDocument {
    pub fn to_design(&self) -> Result<SaturatedDesign> {
        if self.group_of.len() != self.n || self.instrument.len() != self.n {
            return Err(Error::Validation("design document lengths disagree with n".into()));
        }
        let design = SaturatedDesign::from_parts(self.group_of.clone(), self.instrument.iter().map(|&q| q == 1).collect())?;
        if design.groups() != self.groups || self.instrument.iter().any(|&q| q > 1) {
            return Err(Error::Validation("design document is inconsistent".into()));
        }
        Ok(design)
    }
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
