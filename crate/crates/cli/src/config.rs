//! Experiment configuration read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use gcrb::flow::Architecture;
use gcrb::linalg::Matrix;
use gcrb::oracles::channel::{ChannelSpec, ThetaBox};
use gcrb::oracles::edge::EdgeSpec;
use gcrb::score::DEFAULT_M;
use gcrb::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_id")]
    pub id: String,
    pub channel: ChannelConfig,
    /// Defaults to the architecture matching the channel.
    pub architecture: Option<Architecture>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub edge: EdgeCurveConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_id() -> String {
    "experiment".into()
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelConfig {
    /// `r = Aθ + Lv`. Either give `a` and `l` row by row or let them be
    /// drawn from `seed` with noise level `sigma_v`.
    LinearGaussian {
        #[serde(default = "default_d")]
        d: usize,
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "one")]
        sigma_v: f64,
        #[serde(default)]
        seed: u64,
        a: Option<Vec<Vec<f64>>>,
        l: Option<Vec<Vec<f64>>>,
        theta_lo: Option<Vec<f64>>,
        theta_hi: Option<Vec<f64>>,
    },
    Scale {
        #[serde(default = "one")]
        sigma: f64,
        #[serde(default = "one_usize")]
        stack: usize,
        theta_lo: Option<Vec<f64>>,
        theta_hi: Option<Vec<f64>>,
    },
    EdgeWgn {
        #[serde(default = "default_h")]
        h: usize,
        #[serde(default = "default_w")]
        w: usize,
        #[serde(default = "one_usize")]
        c: usize,
        p_high: Vec<f64>,
        p_low: Vec<f64>,
        sigma: f64,
    },
    EdgeNlf {
        #[serde(default = "default_h")]
        h: usize,
        #[serde(default = "default_w")]
        w: usize,
        #[serde(default = "one_usize")]
        c: usize,
        p_high: Vec<f64>,
        p_low: Vec<f64>,
        alpha: f64,
        delta: f64,
    },
}

fn default_d() -> usize {
    8
}
fn default_k() -> usize {
    2
}
fn default_h() -> usize {
    32
}
fn default_w() -> usize {
    4
}
fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}

impl ChannelConfig {
    pub fn build(&self) -> Result<ChannelSpec, CliError> {
        let spec = match self {
            ChannelConfig::LinearGaussian { d, k, sigma_v, seed, a, l, theta_lo, theta_hi } => {
                let base = match (a, l) {
                    (None, None) => ChannelSpec::linear_seeded(*d, *k, *sigma_v, *seed)?,
                    (Some(a), Some(l)) => {
                        let a = Matrix::try_from(a.clone()).map_err(|e| CliError::config(format!("channel.a: {e}")))?;
                        let l = Matrix::try_from(l.clone()).map_err(|e| CliError::config(format!("channel.l: {e}")))?;
                        let k = a.cols();
                        ChannelSpec::linear(a, l, ThetaBox::cube(k, -2.0, 2.0))?
                    }
                    _ => return Err(CliError::config("channel: give both `a` and `l` or neither")),
                };
                with_box(base, theta_lo, theta_hi)?
            }
            ChannelConfig::Scale { sigma, stack, theta_lo, theta_hi } => {
                with_box(ChannelSpec::scale(*sigma, *stack), theta_lo, theta_hi)?
            }
            ChannelConfig::EdgeWgn { h, w, c, p_high, p_low, sigma } => {
                ChannelSpec::edge_wgn(edge_image(*h, *w, *c, p_high, p_low)?, *sigma)
            }
            ChannelConfig::EdgeNlf { h, w, c, p_high, p_low, alpha, delta } => {
                ChannelSpec::edge_nlf(edge_image(*h, *w, *c, p_high, p_low)?, *alpha, *delta)
            }
        };
        spec.validate().map_err(|e| CliError::config(format!("channel: {e}")))?;
        Ok(spec)
    }
}

fn edge_image(h: usize, w: usize, c: usize, p_high: &[f64], p_low: &[f64]) -> Result<EdgeSpec, CliError> {
    EdgeSpec::new(h, w, c, p_high.to_vec(), p_low.to_vec()).map_err(|e| CliError::config(format!("channel: {e}")))
}

fn with_box(mut spec: ChannelSpec, lo: &Option<Vec<f64>>, hi: &Option<Vec<f64>>) -> Result<ChannelSpec, CliError> {
    let current = spec.theta_box().clone();
    let b = ThetaBox::new(lo.clone().unwrap_or(current.lo), hi.clone().unwrap_or(current.hi))
        .map_err(|e| CliError::config(format!("channel.theta_lo/theta_hi: {e}")))?;
    match &mut spec {
        ChannelSpec::LinearGaussian { theta_box, .. } | ChannelSpec::Scale { theta_box, .. } => *theta_box = b,
        _ => {}
    }
    Ok(spec)
}

/// Evaluation grid Θ_T.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridConfig {
    /// `points` evenly spaced values from `lo` to `hi` inclusive.
    Line { lo: Vec<f64>, hi: Vec<f64>, points: usize },
    List { values: Vec<Vec<f64>> },
}

impl GridConfig {
    pub fn points(&self, theta_dim: usize) -> Result<Vec<Vec<f64>>, CliError> {
        let pts = match self {
            GridConfig::Line { lo, hi, points } => {
                if lo.len() != theta_dim || hi.len() != theta_dim {
                    return Err(CliError::config(format!("eval.grid: endpoints need {theta_dim} entries")));
                }
                (0..*points)
                    .map(|i| {
                        let t = if *points == 1 { 0.0 } else { i as f64 / (*points - 1) as f64 };
                        lo.iter().zip(hi).map(|(a, b)| a + t * (b - a)).collect()
                    })
                    .collect()
            }
            GridConfig::List { values } => values.clone(),
        };
        if pts.is_empty() {
            return Err(CliError::config("eval.grid is empty"));
        }
        if let Some(p) = pts.iter().find(|p| p.len() != theta_dim || p.iter().any(|v| !v.is_finite())) {
            return Err(CliError::config(format!("eval.grid: point {p:?} is not a finite {theta_dim}-vector")));
        }
        Ok(pts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub grid: Option<GridConfig>,
    pub m: usize,
    pub seed: u64,
    pub trim: bool,
    /// Model file; the channel's exact generator is used when absent.
    pub model: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { grid: None, m: DEFAULT_M, seed: 1, trim: true, model: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub theta: Option<Vec<f64>>,
    pub m_list: Vec<usize>,
    pub repeats: usize,
    pub sizes: Vec<usize>,
    pub max_size: usize,
    /// Samples per grid point when scoring each dataset size.
    pub m: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            theta: None,
            m_list: vec![64_000, 128_000, 256_000, 512_000],
            repeats: 200,
            sizes: vec![1_000, 10_000, 50_000, 200_000],
            max_size: 1_000_000,
            m: 512_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    Wgn,
    Nlf,
    Flow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeCurveConfig {
    pub theta_w: Vec<f64>,
    /// Positions from 0 to h − 1.
    pub positions: usize,
    pub noise: NoiseModel,
}

impl Default for EdgeCurveConfig {
    fn default() -> Self {
        Self { theta_w: vec![0.5, 1.0, 2.0, 4.0, 8.0], positions: 32, noise: NoiseModel::Nlf }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn architecture_for(&self, spec: &ChannelSpec) -> Architecture {
        self.architecture.unwrap_or(match spec {
            ChannelSpec::LinearGaussian { .. } => Architecture::Linear,
            _ => Architecture::scale_default(),
        })
    }

    /// The configured grid, or a default along the box diagonal.
    pub fn grid(&self, spec: &ChannelSpec) -> Result<Vec<Vec<f64>>, CliError> {
        let k = spec.theta_dim();
        match &self.eval.grid {
            Some(g) => g.points(k),
            None => {
                let b = spec.theta_box();
                let points = if matches!(spec, ChannelSpec::Scale { .. }) { 7 } else { 20 };
                GridConfig::Line { lo: b.lo.clone(), hi: b.hi.clone(), points }.points(k)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml("[channel]\ntype = \"scale\"\n").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.eval.m, DEFAULT_M);
        let spec = c.channel.build().unwrap();
        assert_eq!(c.grid(&spec).unwrap().len(), 7);
        assert_eq!(c.architecture_for(&spec), Architecture::scale_default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_toml("[channel]\ntype = \"scale\"\nsigmaa = 2.0\n").unwrap_err();
        assert!(e.message.contains("sigmaa"), "{}", e.message);
        assert!(ExperimentConfig::from_toml("bogus = 1\n[channel]\ntype = \"scale\"\n").is_err());
        assert!(ExperimentConfig::from_toml("[channel]\ntype = \"scale\"\n[train]\nepoch = 3\n").is_err());
    }

    #[test]
    fn grids() {
        let g = GridConfig::Line { lo: vec![-2.0, -2.0], hi: vec![2.0, 2.0], points: 5 };
        assert_eq!(g.points(2).unwrap()[2], vec![0.0, 0.0]);
        assert_eq!(g.points(2).unwrap()[4], vec![2.0, 2.0]);
        assert!(GridConfig::List { values: vec![] }.points(1).is_err());
        assert!(g.points(1).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let text = "id = \"e\"\n[channel]\ntype = \"edge_nlf\"\nh = 8\nw = 4\np_high = [0.9]\np_low = [0.1]\nalpha = 0.2\ndelta = 0.05\n";
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.channel.build().unwrap().dim(), 32);
    }
}
