//! Pipeline configuration: a TOML file, `--set` overrides, then flags.

use std::path::{Path, PathBuf};

use bsdp_core::cluster::ClusterParams;
use bsdp_core::ggnn::{GridSpec, TrainConfig};
use bsdp_core::graph::InferiorThresholds;
use bsdp_core::ingest::Granularity;
use bsdp_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/trajectories.csv`.
    pub trajectories: Option<PathBuf>,
    /// Region polygons; defaults to `<output_dir>/regions.json` when that
    /// file exists, otherwise all records form one region `all`.
    pub regions: Option<PathBuf>,
    /// Defaults to `<output_dir>/legal_positions.csv`.
    pub legal_positions: Option<PathBuf>,
    /// Synthetic ground truth; defaults to `<output_dir>/ground_truth.json`.
    pub ground_truth: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { output_dir: PathBuf::from("bsdp-out"), trajectories: None, regions: None, legal_positions: None, ground_truth: None }
    }
}

impl Paths {
    pub fn trajectories(&self) -> PathBuf {
        self.trajectories.clone().unwrap_or_else(|| self.output_dir.join("trajectories.csv"))
    }

    pub fn regions(&self) -> PathBuf {
        self.regions.clone().unwrap_or_else(|| self.output_dir.join("regions.json"))
    }

    pub fn legal_positions(&self) -> PathBuf {
        self.legal_positions.clone().unwrap_or_else(|| self.output_dir.join("legal_positions.csv"))
    }

    pub fn ground_truth(&self) -> PathBuf {
        self.ground_truth.clone().unwrap_or_else(|| self.output_dir.join("ground_truth.json"))
    }

    pub fn out(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.output_dir.join(rel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    /// Cost per km in the revenue of a station.
    pub alpha: f64,
    pub thresholds: InferiorThresholds,
    pub granularity: Granularity,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection { alpha: 1.0, thresholds: InferiorThresholds::default(), granularity: Granularity::Day }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecommendSection {
    /// Distance (km) within which a station is absorbed by its nearest
    /// legal position without relocation.
    pub theta_d: f64,
}

impl Default for RecommendSection {
    fn default() -> Self {
        RecommendSection { theta_d: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// When present, `pipeline` first generates a synthetic city.
    pub synth: Option<SynthConfig>,
    /// `min_station_size` also bounds graph vertices and decoded stations.
    pub cluster: ClusterParams,
    pub graph: GraphSection,
    pub grid: GridSpec,
    pub train: TrainConfig,
    pub recommend: RecommendSection,
    pub eval: EvalSection,
}

/// Parses `a.b.c=value`; the value is read as a TOML value, falling back
/// to a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override key {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Loads `path` (defaults when `None`), applies `overrides` in order,
    /// then `seed` to every seeded stage.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(CliError::MissingInput(p.to_path_buf()));
                }
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Format { path: p.to_path_buf(), message: e.to_string() })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some(s) = seed {
            if let Some(synth) = cfg.synth.as_mut() {
                synth.rng_seed = s;
            }
            cfg.train.rng_seed = s;
            cfg.eval.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.cluster.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(s) = &self.synth {
            s.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if !(self.graph.alpha > 0.0 && self.graph.alpha.is_finite()) {
            return bad(format!("graph.alpha must be positive, got {}", self.graph.alpha));
        }
        if let InferiorThresholds::Percentile { percentile } = self.graph.thresholds {
            if !(0.0..=100.0).contains(&percentile) {
                return bad(format!("graph.thresholds.percentile must lie in [0, 100], got {percentile}"));
            }
        }
        if self.grid.rows == 0 || self.grid.cols == 0 {
            return bad("grid.rows and grid.cols must be positive".into());
        }
        if !(self.recommend.theta_d > 0.0 && self.recommend.theta_d.is_finite()) {
            return bad(format!("recommend.theta_d must be positive, got {}", self.recommend.theta_d));
        }
        if self.eval.k < 2 {
            return bad(format!("eval.k must be at least 2, got {}", self.eval.k));
        }
        Ok(())
    }

    pub fn min_station_size(&self) -> u32 {
        self.cluster.min_station_size as u32
    }
}
