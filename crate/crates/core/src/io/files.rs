//! JSON model and configuration files, and the experiment CSVs.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{FitConfig, FitResult, PriorConfig};
use crate::sim::{ExperimentResult, Method, PredictorKind, SimConfig};

pub const MODEL_FORMAT: &str = "hprobe-model";
pub const MODEL_VERSION: u32 = 1;

/// Column centering and scaling applied to `x` before fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub center: Vec<f64>,
    /// 1 for constant columns.
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn from_columns(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut center = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            center.push(mean);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardization { center, scale }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.center.len() {
            return Err(Error::Dimension(format!(
                "standardization covers {} columns, data has {}",
                self.center.len(),
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, k| {
            (x[(i, k)] - self.center[k]) / self.scale[k]
        }))
    }
}

/// Everything needed to predict from new data: the fit, the column names it
/// expects and the preprocessing applied to `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    /// Names of the fitted `x` columns, after screening.
    pub x_columns: Vec<String>,
    pub v_mean_columns: Vec<String>,
    pub v_var_columns: Vec<String>,
    pub mean_intercept_injected: bool,
    pub var_intercept_injected: bool,
    /// Indices into the original `x` columns kept by screening.
    pub screened: Option<Vec<usize>>,
    pub standardization: Option<Standardization>,
    pub fit_config: FitConfig,
    pub prior: PriorConfig,
    pub fit: FitResult,
}

impl ModelFile {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("cannot serialize model: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("invalid model file: {e}")))?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(Error::Data(format!(
                "unsupported model file {} version {}",
                m.format, m.version
            )));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn object_keys<T: Serialize>(value: &T) -> BTreeSet<String> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

fn reject_unknown(value: &Value, allowed: &BTreeSet<String>, what: &str) -> Result<()> {
    let Value::Object(map) = value else {
        return Err(Error::Config(format!("{what} must be a JSON object")));
    };
    if let Some(k) = map.keys().find(|k| !allowed.contains(*k)) {
        return Err(Error::Config(format!("unknown {what} key '{k}'")));
    }
    Ok(())
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<(T, Value)> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{what}: {e}")))?;
    let parsed = T::deserialize(&value).map_err(|e| Error::Config(format!("{what}: {e}")))?;
    Ok((parsed, value))
}

/// Estimator settings: the fields of [`FitConfig`] and [`PriorConfig`] at
/// the top level of one JSON object. Missing fields take their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub fit: FitConfig,
    #[serde(flatten)]
    pub prior: PriorConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let (cfg, value): (RunConfig, Value) = parse_json(text, "config")?;
        let mut allowed = object_keys(&FitConfig::default());
        allowed.extend(object_keys(&PriorConfig::default()));
        reject_unknown(&value, &allowed, "config")?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Hprobe, Method::Probe]
}

fn default_level() -> f64 {
    0.95
}

/// A simulation experiment: the generating settings at the top level plus
/// the methods to compare and their estimator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimFile {
    #[serde(flatten)]
    pub sim: SimConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub prior: PriorConfig,
}

impl SimFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let (cfg, value): (SimFile, Value) = parse_json(text, "simulation config")?;
        let probe = SimConfig {
            n: 0,
            p: 0,
            v: 0,
            seed: 0,
            pi_true: 0.0,
            eta_beta: 0.0,
            snr: 0.0,
            predictor_kind: PredictorKind::Binary,
            length_scale: 0.0,
            replicate_count: 0,
            constant_noise: false,
        };
        let mut allowed = object_keys(&probe);
        allowed.extend(["methods", "level", "fit", "prior"].map(String::from));
        reject_unknown(&value, &allowed, "simulation config")?;
        if let Some(fit) = value.get("fit") {
            reject_unknown(fit, &object_keys(&FitConfig::default()), "fit")?;
        }
        if let Some(prior) = value.get("prior") {
            reject_unknown(prior, &object_keys(&PriorConfig::default()), "prior")?;
        }
        if cfg.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("csv output: {e}"))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub const RESULT_HEADER: [&str; 12] = [
    "replicate", "seed", "method", "converged", "iterations", "rmse", "mad", "tpr", "fdr", "ecp",
    "mean_pi_length", "error",
];

/// Experiment rows without wall-clock fields, so identical inputs give
/// identical bytes.
pub fn write_results<W: std::io::Write>(out: W, rows: &[ExperimentResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_HEADER).map_err(csv_error)?;
    for r in rows {
        let metrics = match &r.metrics {
            Some(m) => [m.rmse, m.mad, m.tpr, m.fdr, m.ecp, m.mean_pi_length].map(fmt),
            None => std::array::from_fn(|_| String::new()),
        };
        let mut record = vec![
            r.replicate.to_string(),
            r.seed.to_string(),
            r.method.label().to_string(),
            r.converged.to_string(),
            r.iterations.to_string(),
        ];
        record.extend(metrics);
        record.push(r.error.clone().unwrap_or_default());
        w.write_record(&record).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing<W: std::io::Write>(out: W, rows: &[ExperimentResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["replicate", "method", "runtime_seconds"]).map_err(csv_error)?;
    for r in rows {
        w.write_record([r.replicate.to_string(), r.method.label().to_string(), fmt(r.runtime_seconds)])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_seeds<W: std::io::Write>(out: W, rows: &[ExperimentResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["replicate", "seed"]).map_err(csv_error)?;
    let mut seen = BTreeSet::new();
    for r in rows {
        if seen.insert(r.replicate) {
            w.write_record([r.replicate.to_string(), r.seed.to_string()]).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}
