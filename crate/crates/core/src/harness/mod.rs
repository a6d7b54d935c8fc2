//! Maze benchmark scaffold: dataset generation, evaluation protocol,
//! configuration and artifact emission.

mod bench;
pub mod commands;
mod maze;
mod metrics;
mod output;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::GuidanceConfig;
use crate::diffusion::{Architecture, DiffusionError, DiffusionSchedule, Optimizer, TrainConfig};
use crate::invariance::{InvarianceConfig, InvarianceError};
use crate::specs::{parse_spec_document, SpecClass, SpecEntry, SpecError};

pub use bench::{
    load_planner, run_benchmark, run_episode, run_method, run_trap_scenario, EpisodeResult,
    MethodReport, BenchmarkReport, Planner, TrapMethodReport, TrapReport,
};
pub use maze::{generate_dataset, resample_path, sample_endpoints, Dataset, Maze};
pub use metrics::{
    class_satisfaction, count_trapped, score, spec_satisfaction, violation_mean, ClassStats,
};
pub use output::{
    emit_json, emit_plot, emit_report, emit_trajectory, marching_squares, read_json,
    read_trajectory, render_svg, ArtifactHeader, Document, PlotLayer, Segment,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error in {what}: {message}")]
    Parse { what: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("no path between cells {start:?} and {goal:?} after {tries} tries")]
    Unreachable {
        start: (usize, usize),
        goal: (usize, usize),
        tries: usize,
    },
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Invariance(#[from] InvarianceError),
}

impl HarnessError {
    /// Stable identifier for machine-readable error records.
    pub fn code(&self) -> &'static str {
        match self {
            HarnessError::Io { .. } => "io",
            HarnessError::Parse { .. } => "parse",
            HarnessError::Config(_) => "config",
            HarnessError::MissingCheckpoint(_) => "missing_checkpoint",
            HarnessError::Unreachable { .. } => "unreachable",
            HarnessError::Spec(_) => "spec",
            HarnessError::Diffusion(_) => "diffusion",
            HarnessError::Invariance(_) => "invariance",
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Off,
    Truncate,
    Guided,
    GuidedEps,
    Ros,
    Res,
    Tvs,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Off,
        Method::Truncate,
        Method::Guided,
        Method::GuidedEps,
        Method::Ros,
        Method::Res,
        Method::Tvs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Off => "off",
            Method::Truncate => "truncate",
            Method::Guided => "guided",
            Method::GuidedEps => "guided_eps",
            Method::Ros => "ros",
            Method::Res => "res",
            Method::Tvs => "tvs",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| HarnessError::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MazeConfig {
    /// Rows top to bottom; `#` is blocked, anything else free.
    pub layout: Vec<String>,
    pub cell_size: f64,
    /// Inclusive column range for start cells.
    pub start_columns: [usize; 2],
    pub goal_columns: [usize; 2],
    /// Evaluation obstacles in world coordinates. Not seen during training.
    pub specs: Vec<SpecEntry>,
    /// TOML document with a `[[specs]]` array. Replaces `specs` on load;
    /// relative paths are taken from the config file's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub specs_file: Option<PathBuf>,
}

impl Default for MazeConfig {
    fn default() -> Self {
        Self {
            layout: [
                "...##...", ".#.##.#.", ".#.##.#.", "........", "........", ".#.##.#.",
                ".#.##.#.", "...##...",
            ]
            .map(String::from)
            .to_vec(),
            cell_size: 1.0,
            start_columns: [0, 2],
            goal_columns: [5, 7],
            specs_file: None,
            specs: vec![
                SpecEntry::Ellipse {
                    center: [4.0, 4.0],
                    axes: [0.7, 0.7],
                    dims: [0, 1],
                    class: SpecClass::Simple,
                },
                SpecEntry::QuarticSuperEllipse {
                    center: [2.0, 4.0],
                    axes: [0.6, 0.6],
                    dims: [0, 1],
                    class: SpecClass::Complex,
                },
                SpecEntry::SpeedDependentBox {
                    x_min: vec![0.0, 0.0],
                    x_max: vec![8.0, 8.0],
                    phi: 0.5,
                    class: SpecClass::Complex,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_traj: usize,
    pub horizon: usize,
    /// Jitter standard deviation as a fraction of the cell size.
    pub jitter: f64,
    pub max_retries: usize,
    pub path: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_traj: 1000,
            horizon: 48,
            jitter: 0.02,
            max_retries: 100,
            path: PathBuf::from("dataset.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 256,
            beta_min: 1e-4,
            beta_max: 0.05,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule, DiffusionError> {
        DiffusionSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    pub time_embedding: usize,
    pub checkpoint: PathBuf,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            hidden_layers: 3,
            time_embedding: 32,
            checkpoint: PathBuf::from("model.json"),
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, horizon: usize, state_dim: usize) -> Architecture {
        Architecture {
            horizon,
            state_dim,
            time_embedding: self.time_embedding,
            hidden: self.hidden,
            hidden_layers: self.hidden_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 2500,
            batch_size: 64,
            lr: 1e-3,
            optimizer: Optimizer::adam(),
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub episodes: usize,
    /// Worker threads for episodes. Use 1 for timing runs.
    pub threads: usize,
    /// Goal tolerance in world units.
    pub r_goal: f64,
    /// Number of final states checked against the goal.
    pub goal_window: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            episodes: 100,
            threads: 1,
            r_goal: 0.5,
            goal_window: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrapConfig {
    pub seeds: usize,
    pub methods: Vec<Method>,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    /// Obstacles forming the pocket, in world coordinates.
    pub pocket: Vec<SpecEntry>,
    /// States with `b` below this (normalized units) count as near the pocket.
    pub band: f64,
    /// Gap threshold as a multiple of the dataset's median consecutive gap.
    pub gap_factor: f64,
}

impl Default for TrapConfig {
    fn default() -> Self {
        let circle = |y: f64| SpecEntry::Ellipse {
            center: [4.0, y],
            axes: [0.6, 0.6],
            dims: [0, 1],
            class: SpecClass::Simple,
        };
        Self {
            seeds: 20,
            methods: vec![Method::Ros, Method::Res, Method::Tvs],
            start: [0.5, 4.0],
            goal: [7.5, 4.0],
            pocket: vec![circle(3.55), circle(4.45)],
            band: 0.25,
            gap_factor: 5.0,
        }
    }
}

/// Top-level configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub maze: MazeConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub invariance: InvarianceConfig,
    pub guidance: GuidanceConfig,
    pub guidance_eps: GuidanceConfig,
    pub bench: BenchConfig,
    pub trap: TrapConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            maze: MazeConfig::default(),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            invariance: InvarianceConfig::default(),
            guidance: GuidanceConfig {
                scale: 0.001,
                epsilon_band: None,
            },
            guidance_eps: GuidanceConfig {
                scale: 0.002,
                epsilon_band: Some(0.5),
            },
            bench: BenchConfig::default(),
            trap: TrapConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Parse {
            what: "config".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Parse { message, .. } => HarnessError::Parse {
                what: path.display().to_string(),
                message,
            },
            other => other,
        })?;
        if let Some(file) = cfg.maze.specs_file.take() {
            let file = path.parent().unwrap_or(Path::new("")).join(file);
            let text = std::fs::read_to_string(&file).map_err(|e| HarnessError::io(&file, e))?;
            cfg.maze.specs = parse_spec_document(&text)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.data.horizon == 0 || self.data.n_traj == 0 {
            return Err(HarnessError::Config("data.horizon and data.n_traj must be >= 1".into()));
        }
        if self.bench.episodes == 0 {
            return Err(HarnessError::Config("bench.episodes must be >= 1".into()));
        }
        if self.bench.threads == 0 {
            return Err(HarnessError::Config("bench.threads must be >= 1".into()));
        }
        if !(self.maze.cell_size > 0.0) {
            return Err(HarnessError::Config("maze.cell_size must be > 0".into()));
        }
        self.invariance.validate()?;
        self.schedule.build()?;
        Ok(())
    }

    /// Short SHA-256 digest of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.out_dir.join(path)
        }
    }

    pub fn header(&self, kind: &str) -> ArtifactHeader {
        ArtifactHeader::new(kind, &self.hash(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = HarnessConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = HarnessConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = HarnessConfig::from_toml("seed = 7\n[bench]\nepisodes = 3\nmethods = [\"ros\", \"off\"]\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.bench.episodes, 3);
        assert_eq!(cfg.bench.methods, vec![Method::Ros, Method::Off]);
        assert_eq!(cfg.schedule.steps, 256);
        assert_ne!(cfg.hash(), HarnessConfig::default().hash());
    }

    #[test]
    fn bad_config_rejected() {
        assert!(matches!(
            HarnessConfig::from_toml("unknown_key = 1"),
            Err(HarnessError::Parse { .. })
        ));
        assert!(matches!(
            HarnessConfig::from_toml("[bench]\nepisodes = 0"),
            Err(HarnessError::Config(_))
        ));
        assert!(HarnessConfig::from_toml("[invariance]\neps = -1.0").is_err());
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("Guided-Eps".parse::<Method>().unwrap(), Method::GuidedEps);
        assert!("nope".parse::<Method>().is_err());
    }
}
