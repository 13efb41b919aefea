//! CSV tables and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// 17 significant digits, locale independent.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// One metric at one parameter value.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub theta: Vec<f64>,
    pub metric: String,
    pub value: f64,
    pub m: usize,
    pub seed: u64,
    pub wall_ms: u64,
    pub status: String,
}

impl ResultRow {
    pub fn ok(experiment: &str, theta: &[f64], metric: &str, value: f64, m: usize, seed: u64) -> Self {
        Self {
            experiment: experiment.to_string(),
            theta: theta.to_vec(),
            metric: metric.to_string(),
            value,
            m,
            seed,
            wall_ms: 0,
            status: "ok".into(),
        }
    }

    pub fn failed(experiment: &str, theta: &[f64], m: usize, seed: u64, status: &str) -> Self {
        Self { status: status.to_string(), ..Self::ok(experiment, theta, "status", f64::NAN, m, seed) }
    }
}

/// Write rows in long format; all rows must share the θ dimension.
pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    let k = rows.first().map_or(0, |r| r.theta.len());
    let mut w = csv::Writer::from_path(path).map_err(CliError::io)?;
    let mut header = vec!["experiment".to_string()];
    header.extend((0..k).map(|i| format!("theta_{i}")));
    header.extend(["metric", "value", "m", "seed", "wall_ms", "status"].map(String::from));
    w.write_record(&header).map_err(CliError::io)?;
    for r in rows {
        let mut rec = vec![r.experiment.clone()];
        rec.extend(r.theta.iter().map(|v| fmt_f64(*v)));
        rec.push(r.metric.clone());
        rec.push(fmt_f64(r.value));
        rec.push(r.m.to_string());
        rec.push(r.seed.to_string());
        rec.push(r.wall_ms.to_string());
        rec.push(r.status.clone());
        w.write_record(&rec).map_err(CliError::io)?;
    }
    w.flush().map_err(CliError::io)
}

pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(CliError::io)?;
    w.write_record(header).map_err(CliError::io)?;
    for r in rows {
        w.write_record(r).map_err(CliError::io)?;
    }
    w.flush().map_err(CliError::io)
}

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub experiment: String,
    pub config_sha256: String,
    pub config: String,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub deterministic: bool,
    pub gcrb_version: &'static str,
    pub model_format_version: u32,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str, experiment: &str, config_text: &str, train_seed: u64, eval_seed: u64, deterministic: bool) -> Self {
        let digest = Sha256::digest(config_text.as_bytes());
        Self {
            command: command.into(),
            experiment: experiment.into(),
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            config: config_text.into(),
            train_seed,
            eval_seed,
            deterministic,
            gcrb_version: env!("CARGO_PKG_VERSION"),
            model_format_version: gcrb::flow::VERSION,
            outputs: Vec::new(),
        }
    }

    /// Written as `<command>.manifest.json` so runs sharing a directory keep theirs.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(format!("{}.manifest.json", self.command));
        let text = serde_json::to_string_pretty(self).map_err(CliError::io)?;
        fs::write(&path, text + "\n").map_err(CliError::io)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }

    #[test]
    fn long_format_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_rows(&p, &[ResultRow::ok("x", &[1.0, 2.0], "trace", 0.5, 10, 3)]).unwrap();
        let text = fs::read_to_string(p).unwrap();
        assert!(text.starts_with("experiment,theta_0,theta_1,metric,value,m,seed,wall_ms,status\n"));
        assert!(text.contains(",trace,5.0000000000000000e-1,10,3,0,ok"));
    }
}
