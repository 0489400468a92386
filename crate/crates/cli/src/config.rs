use anomography::traffic::{AnomalyConfig, FlowGenParams};
use anomography::Hyperparams;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub traffic: TrafficSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_seed() -> u64 {
    1
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: default_seed(),
            network: NetworkSection::default(),
            traffic: TrafficSection::default(),
            detector: DetectorSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub nodes: usize,
    pub flows: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { nodes: 50, flows: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficSection {
    /// Number of time samples `T`.
    pub horizon: usize,
    /// Observation percentage `rho` in (0, 100].
    pub observation_ratio: f64,
    pub flow: FlowGenParams,
    pub anomalies: AnomalyConfig,
}

impl Default for TrafficSection {
    fn default() -> Self {
        Self {
            horizon: 168,
            observation_ratio: 30.0,
            flow: FlowGenParams::default(),
            anomalies: AnomalyConfig {
                min_start: 48,
                ..AnomalyConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Proposed,
    Ewma,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Proposed => "proposed",
            Algorithm::Ewma => "ewma",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub hyperparams: Hyperparams,
    pub algorithms: Vec<Algorithm>,
    pub ewma_alpha: f64,
    /// Largest `|v|` entries listed per result row.
    pub top_k: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            hyperparams: Hyperparams::default(),
            algorithms: vec![Algorithm::Proposed, Algorithm::Ewma],
            ewma_alpha: anomography::baselines::DEFAULT_EWMA_ALPHA,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Number of evenly spaced thresholds for the F1 curve.
    pub f1_points: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { f1_points: 50 }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if cfg.version != CONFIG_VERSION {
            return Err(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            ));
        }
        Ok(cfg)
    }
}
