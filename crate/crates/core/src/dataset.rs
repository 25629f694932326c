//! Sensor datasets: coherence curves per pulse number, T1 relaxation data
//! and metadata, with JSON and CSV ingestion.
//!
//! Dataset JSON:
//!
//! ```text
//! {"id", "nominal_depth_nm", "field_gauss", "temperature_k", "coating",
//!  "curves": [{"n_pulses", "sequence", "times_us", "coherence", "sigma"}],
//!  "t1": {"times_us", "population", "sigma"}}
//! ```
//!
//! A directory layout is also accepted: `metadata.json` with the same
//! metadata fields, `"curves": [{"file", "n_pulses", "sequence"}]` and an
//! optional `"t1_file"`, each CSV carrying `times_us,coherence[,sigma]`
//! (or `times_us,population[,sigma]` for T1).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{PulseSequence, SequenceKind};

/// Coherence bounds a measured point may take once readout noise is included.
pub const COHERENCE_MIN: f64 = -0.2;
pub const COHERENCE_MAX: f64 = 1.2;
pub const MIN_CURVE_POINTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceCurve {
    /// 0 for Ramsey.
    pub n_pulses: u32,
    /// `"Ramsey"`, `"CPMG"` or `"XY8"`.
    pub sequence: String,
    pub times_us: Vec<f64>,
    pub coherence: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl CoherenceCurve {
    pub fn kind(&self) -> Result<SequenceKind> {
        SequenceKind::from_label(&self.sequence, self.n_pulses)
    }

    pub fn pulse_sequence(&self, t: f64) -> Result<PulseSequence> {
        PulseSequence::new(self.kind()?, t)
    }

    pub fn len(&self) -> usize {
        self.times_us.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_us.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let label = format!("{} N={}", self.sequence, self.n_pulses);
        self.kind()?;
        if self.coherence.len() != self.times_us.len() || self.sigma.len() != self.times_us.len()
        {
            return Err(Error::InvalidParameter(format!(
                "{label}: times, coherence and sigma lengths differ"
            )));
        }
        if self.times_us.len() < MIN_CURVE_POINTS {
            return Err(Error::InvalidParameter(format!(
                "{label}: {} points, need at least {MIN_CURVE_POINTS}",
                self.times_us.len()
            )));
        }
        check_times(&self.times_us, &label)?;
        for (i, &c) in self.coherence.iter().enumerate() {
            if !(COHERENCE_MIN..=COHERENCE_MAX).contains(&c) {
                return Err(Error::OutOfRange(format!(
                    "{label}: coherence[{i}] = {c} outside [{COHERENCE_MIN}, {COHERENCE_MAX}]"
                )));
            }
        }
        check_sigma(&self.sigma, &label)
    }
}

/// Longitudinal relaxation data: population vs wait time, no control pulses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T1Curve {
    pub times_us: Vec<f64>,
    pub population: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl T1Curve {
    pub fn validate(&self) -> Result<()> {
        if self.population.len() != self.times_us.len() || self.sigma.len() != self.times_us.len()
        {
            return Err(Error::InvalidParameter(
                "t1: times, population and sigma lengths differ".into(),
            ));
        }
        if self.times_us.len() < MIN_CURVE_POINTS {
            return Err(Error::InvalidParameter(format!(
                "t1: {} points, need at least {MIN_CURVE_POINTS}",
                self.times_us.len()
            )));
        }
        check_times(&self.times_us, "t1")?;
        check_sigma(&self.sigma, "t1")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NvDataset {
    pub id: String,
    pub nominal_depth_nm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_depth_nm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_depth_err_nm: Option<f64>,
    pub field_gauss: f64,
    pub temperature_k: f64,
    pub coating: String,
    pub curves: Vec<CoherenceCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1: Option<T1Curve>,
}

impl NvDataset {
    pub fn validate(&self) -> Result<()> {
        if !(self.nominal_depth_nm > 0.0) {
            return Err(Error::OutOfRange(format!(
                "{}: nominal depth must be > 0",
                self.id
            )));
        }
        if !(self.field_gauss >= 0.0) {
            return Err(Error::OutOfRange(format!("{}: field must be >= 0", self.id)));
        }
        for c in &self.curves {
            c.validate()?;
        }
        if let Some(t1) = &self.t1 {
            t1.validate()?;
        }
        Ok(())
    }

    /// Curves used for decay and spectral analysis (Ramsey and CPMG).
    pub fn decay_curves(&self) -> impl Iterator<Item = &CoherenceCurve> {
        self.curves
            .iter()
            .filter(|c| !matches!(c.kind(), Ok(SequenceKind::Xy8 { .. })))
    }

    /// XY8 curves, i.e. NMR scans.
    pub fn nmr_curves(&self) -> impl Iterator<Item = &CoherenceCurve> {
        self.curves
            .iter()
            .filter(|c| matches!(c.kind(), Ok(SequenceKind::Xy8 { .. })))
    }
}

fn check_times(times: &[f64], label: &str) -> Result<()> {
    for (i, w) in times.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(Error::TimesNotIncreasing(format!(
                "{label}: times[{}] = {} after {}",
                i + 1,
                w[1],
                w[0]
            )));
        }
    }
    if let Some(&t0) = times.first() {
        if !(t0 > 0.0) {
            return Err(Error::OutOfRange(format!("{label}: times must be > 0")));
        }
    }
    Ok(())
}

fn check_sigma(sigma: &[f64], label: &str) -> Result<()> {
    match sigma.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
        Some(i) => Err(Error::OutOfRange(format!(
            "{label}: sigma[{i}] must be finite and > 0"
        ))),
        None => Ok(()),
    }
}

/// Map a serde_json error to a schema error naming the offending field.
pub(crate) fn schema_error(err: serde_json::Error) -> Error {
    let message = err.to_string();
    let field = message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".into());
    Error::Schema {
        field,
        line: err.line(),
        message,
    }
}

/// Parse and validate a dataset from JSON text.
pub fn parse_dataset_json(text: &str) -> Result<NvDataset> {
    let ds: NvDataset = serde_json::from_str(text).map_err(schema_error)?;
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Deserialize)]
struct CurveFileEntry {
    file: String,
    n_pulses: u32,
    sequence: String,
}

#[derive(Debug, Deserialize)]
struct DirectoryMetadata {
    id: String,
    nominal_depth_nm: f64,
    #[serde(default)]
    measured_depth_nm: Option<f64>,
    #[serde(default)]
    measured_depth_err_nm: Option<f64>,
    field_gauss: f64,
    temperature_k: f64,
    coating: String,
    curves: Vec<CurveFileEntry>,
    #[serde(default)]
    t1_file: Option<String>,
}

/// Read a three-column CSV (`times_us`, value column, optional `sigma`).
/// Missing sigma falls back to `default_sigma`.
fn read_csv_columns(
    path: &Path,
    value_column: &str,
    default_sigma: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing = |name: &str| Error::Schema {
        field: name.to_string(),
        line: 1,
        message: format!("{}: missing column `{name}`", path.display()),
    };
    let t_idx = col("times_us").ok_or_else(|| missing("times_us"))?;
    let v_idx = col(value_column).ok_or_else(|| missing(value_column))?;
    let s_idx = col("sigma");
    if s_idx.is_none() {
        log::warn!(
            "{}: no sigma column, using sigma = {default_sigma}",
            path.display()
        );
    }
    let (mut times, mut values, mut sigma) = (Vec::new(), Vec::new(), Vec::new());
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Schema {
            field: "<row>".into(),
            line,
            message: e.to_string(),
        })?;
        let num = |idx: usize, name: &str| -> Result<f64> {
            record
                .get(idx)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Schema {
                    field: name.to_string(),
                    line,
                    message: format!("{}: `{name}` is not a number", path.display()),
                })
        };
        times.push(num(t_idx, "times_us")?);
        values.push(num(v_idx, value_column)?);
        sigma.push(match s_idx {
            Some(i) => num(i, "sigma")?,
            None => default_sigma,
        });
    }
    Ok((times, values, sigma))
}

/// Load a dataset from a JSON file or a CSV directory with `metadata.json`.
pub fn ingest_dataset(path: &Path, default_sigma: f64) -> Result<NvDataset> {
    if path.is_dir() {
        let meta_path = path.join("metadata.json");
        let text = fs::read_to_string(&meta_path)
            .map_err(|e| Error::Io(format!("{}: {e}", meta_path.display())))?;
        let meta: DirectoryMetadata = serde_json::from_str(&text).map_err(schema_error)?;
        let mut curves = Vec::with_capacity(meta.curves.len());
        for entry in &meta.curves {
            let (times_us, coherence, sigma) =
                read_csv_columns(&path.join(&entry.file), "coherence", default_sigma)?;
            curves.push(CoherenceCurve {
                n_pulses: entry.n_pulses,
                sequence: entry.sequence.clone(),
                times_us,
                coherence,
                sigma,
            });
        }
        let t1 = match &meta.t1_file {
            Some(f) => {
                let (times_us, population, sigma) =
                    read_csv_columns(&path.join(f), "population", default_sigma)?;
                Some(T1Curve {
                    times_us,
                    population,
                    sigma,
                })
            }
            None => None,
        };
        let ds = NvDataset {
            id: meta.id,
            nominal_depth_nm: meta.nominal_depth_nm,
            measured_depth_nm: meta.measured_depth_nm,
            measured_depth_err_nm: meta.measured_depth_err_nm,
            field_gauss: meta.field_gauss,
            temperature_k: meta.temperature_k,
            coating: meta.coating,
            curves,
            t1,
        };
        ds.validate()?;
        Ok(ds)
    } else {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        parse_dataset_json(&text)
    }
}

/// Write a dataset as pretty JSON.
pub fn write_dataset(ds: &NvDataset, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(ds).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}
