use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tabf::{
    BiasMode, CoordinateGroup, CoordinateKind, CoordinateSet, PotentialSpec, ReactionCoordinate,
    SimulationConfig, StandardFamily,
};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Unbiased,
    TensorAbf,
    StandardAbf,
    SeededAbf,
    FokkerPlanck,
    StationarySolver,
    OracleTables,
    Diagnose,
}

impl Experiment {
    pub fn needs_simulation(self) -> bool {
        matches!(
            self,
            Self::Unbiased | Self::TensorAbf | Self::StandardAbf | Self::SeededAbf
        )
    }

    pub fn bias_mode(self) -> BiasMode {
        match self {
            Self::TensorAbf => BiasMode::TensorAbf,
            Self::StandardAbf | Self::SeededAbf => BiasMode::StandardAbf,
            _ => BiasMode::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One 1D bias per coordinate.
    #[default]
    Independent,
    /// A single 2D bias on the first two coordinates.
    Pair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinatesConfig {
    #[serde(default)]
    pub grouping: Option<Grouping>,
    pub list: Vec<CoordinateKind>,
}

fn default_bins() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridsConfig {
    /// Bins of each 1D bias grid.
    #[serde(default = "default_bins")]
    pub bins_1d: usize,
    /// Bins per axis of the 2D bias grid, the monitor and all surfaces.
    #[serde(default = "default_bins")]
    pub bins_2d: usize,
}

impl Default for GridsConfig {
    fn default() -> Self {
        Self {
            bins_1d: default_bins(),
            bins_2d: default_bins(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpBiasChoice {
    None,
    /// Frozen at the stationary bias pair.
    Stationary,
    #[default]
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialDensity {
    #[default]
    Uniform,
    Canonical,
    /// `1 + ½ sin 2π(x₁ + 2x₂) + ⅓ cos 2πx₁`.
    Perturbed,
}

fn default_t_final() -> f64 {
    0.2
}

fn default_record_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FokkerPlanckConfig {
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Time step; half the stability bound when absent.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    #[serde(default)]
    pub bias: FpBiasChoice,
    #[serde(default)]
    pub initial: InitialDensity,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub snapshot_every: usize,
    /// Fit window `[t_a, t_b]` for the decay rates.
    #[serde(default)]
    pub fit_window: Option<[f64; 2]>,
}

impl Default for FokkerPlanckConfig {
    fn default() -> Self {
        Self {
            bins: default_bins(),
            dt: None,
            t_final: default_t_final(),
            bias: FpBiasChoice::default(),
            initial: InitialDensity::default(),
            record_every: default_record_every(),
            snapshot_every: 0,
            fit_window: None,
        }
    }
}

fn default_tol() -> f64 {
    1e-12
}

fn default_max_iter() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedingConfig {
    /// Artifact directory of a finished `tensor_abf` run.
    pub source: PathBuf,
}

fn default_dimension() -> usize {
    2
}

fn default_snapshot_every() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub potential: StandardFamily,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub coordinates: Option<CoordinatesConfig>,
    #[serde(default)]
    pub grids: GridsConfig,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Steps between time-series rows of sampler runs.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: u64,
    /// Start position of every replica; 0.25 on each axis when absent.
    #[serde(default)]
    pub initial_point: Option<Vec<f64>>,
    /// Grid snapshot to resume the bias from.
    #[serde(default)]
    pub restart: Option<PathBuf>,
    #[serde(default)]
    pub seeding: Option<SeedingConfig>,
    #[serde(default)]
    pub fokker_planck: Option<FokkerPlanckConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

fn schema(msg: impl Into<String>) -> CliError {
    CliError::Schema(msg.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.dimension < 2 {
            return Err(schema("dimension must be at least 2"));
        }
        if self.grids.bins_1d == 0 || self.grids.bins_2d == 0 {
            return Err(schema("grid bins must be positive"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(schema("beta must be positive and finite"));
        }
        if self.snapshot_every == 0 {
            return Err(schema("snapshot_every must be positive"));
        }
        if let Some(p) = &self.initial_point {
            if p.len() != self.dimension {
                return Err(schema(format!(
                    "initial_point has {} entries for dimension {}",
                    p.len(),
                    self.dimension
                )));
            }
        }
        if self.experiment.needs_simulation() {
            let sim = self
                .simulation
                .as_ref()
                .ok_or_else(|| schema("sampler experiments need a [simulation] section"))?;
            sim.validate().map_err(|e| schema(e.to_string()))?;
            if sim.bias_mode != BiasMode::None && sim.bias_mode != self.experiment.bias_mode() {
                return Err(schema(format!(
                    "simulation.bias_mode {:?} contradicts experiment {:?}",
                    sim.bias_mode, self.experiment
                )));
            }
        }
        if self.experiment == Experiment::SeededAbf && self.seeding.is_none() {
            return Err(schema("seeded_abf needs a [seeding] section"));
        }
        if self.experiment != Experiment::SeededAbf && self.seeding.is_some() {
            return Err(schema("[seeding] is only valid for seeded_abf"));
        }
        if let Some(fp) = &self.fokker_planck {
            if fp.bins == 0 || fp.record_every == 0 || !(fp.t_final > 0.0) {
                return Err(schema("fokker_planck needs positive bins, record_every and t_final"));
            }
        }
        if matches!(
            self.experiment,
            Experiment::FokkerPlanck | Experiment::StationarySolver | Experiment::Diagnose
        ) && self.dimension != 2
        {
            return Err(schema("grid oracles need dimension = 2"));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return Err(schema("solver needs positive tol and max_iter"));
        }
        self.coordinate_set().map(|_| ())
    }

    pub fn potential(&self) -> Result<PotentialSpec, CliError> {
        self.potential.build(self.dimension).map_err(|e| schema(e.to_string()))
    }

    pub fn grouping(&self) -> Grouping {
        self.coordinates
            .as_ref()
            .and_then(|c| c.grouping)
            .unwrap_or(match self.experiment {
                Experiment::StandardAbf | Experiment::SeededAbf => Grouping::Pair,
                _ => Grouping::Independent,
            })
    }

    /// The configured coordinates, projections on the first two axes by
    /// default.
    pub fn coordinate_set(&self) -> Result<CoordinateSet, CliError> {
        let kinds = match &self.coordinates {
            Some(c) => c.list.clone(),
            None => vec![
                CoordinateKind::Projection { axis: 0 },
                CoordinateKind::Projection { axis: 1 },
            ],
        };
        let coords = kinds
            .into_iter()
            .map(|k| ReactionCoordinate::from_kind(k, self.dimension))
            .collect::<tabf::Result<Vec<_>>>()
            .map_err(|e| schema(e.to_string()))?;
        let set = match self.grouping() {
            Grouping::Independent => CoordinateSet::independent(coords),
            Grouping::Pair => {
                if coords.len() != 2 {
                    return Err(schema("pair grouping needs exactly two coordinates"));
                }
                let mut it = coords.into_iter();
                CoordinateSet::joint_pair(it.next().unwrap(), it.next().unwrap())
            }
        }
        .map_err(|e| schema(e.to_string()))?;
        if self.experiment.needs_simulation() && set.len() < 2 {
            return Err(schema("sampler experiments need at least two coordinates"));
        }
        if matches!(self.experiment, Experiment::StandardAbf | Experiment::SeededAbf)
            && set.groups() != [CoordinateGroup::Pair(0, 1)]
        {
            return Err(schema("standard ABF needs pair grouping"));
        }
        Ok(set)
    }

    /// Simulation settings with the bias mode implied by the experiment.
    pub fn simulation(&self) -> Result<SimulationConfig, CliError> {
        let mut sim = self
            .simulation
            .clone()
            .ok_or_else(|| schema("missing [simulation] section"))?;
        sim.bias_mode = self.experiment.bias_mode();
        Ok(sim)
    }

    /// Effective beta: the simulation's when present.
    pub fn effective_beta(&self) -> f64 {
        self.simulation.as_ref().map_or(self.beta, |s| s.beta)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Other(e.to_string()))
    }

    /// SHA-256 of the sorted-key JSON form of the effective config.
    pub fn hash(&self) -> Result<String, CliError> {
        let json = tabf::export::to_sorted_json(self)?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }
}
