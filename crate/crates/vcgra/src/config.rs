// SPDX-License-Identifier: Apache-2.0

//! Run configuration (TOML).
//!
//! Every section and key is optional and defaults to the 4×4 evaluation
//! setup; unknown keys are errors. Example:
//!
//! ```toml
//! seeds = [1, 2, 3]
//! output_dir = "out"
//! contention = "fair-share"      # or "disabled"
//! modes = ["monolithic", "tiled", "stateless-1.0", "stateless-0.8", "stateful"]
//! baseline = "tiled"
//!
//! [grid]
//! height = 4
//! width = 4
//!
//! [scheduler]
//! mode = "tiled"
//! alpha = 2.0
//!
//! [scheduler.delays]
//! enqueue = 200
//!
//! [costs]
//! t_config_per_region = 4000
//!
//! [workload.arrivals]
//! mean_gap = 40000.0
//!
//! [ga]
//! generations = 20
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vcgra_core::workloads::{ArrivalProcess, RandomConfig};
use vcgra_core::{
    ContentionPolicy, GaConfig, HypervisorDelays, MigrationCostModel, SchedulerConfig, SchedulingMode, SimConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    pub pe_rows: usize,
    pub pe_cols: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        let d = SimConfig::default();
        Self { height: d.grid_height, width: d.grid_width, pe_rows: d.pe_rows, pe_cols: d.pe_cols }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    /// `monolithic`, `tiled`, `stateless`, `stateless-F` or `stateful`.
    pub mode: String,
    /// Threshold for a bare `stateless`.
    pub stateless_threshold: f64,
    pub alpha: f64,
    pub delays: HypervisorDelays,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        let d = SchedulerConfig::default();
        Self { mode: d.mode.label(), stateless_threshold: 1.0, alpha: d.alpha, delays: d.delays }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Contention {
    #[default]
    FairShare,
    Disabled,
}

impl From<Contention> for ContentionPolicy {
    fn from(c: Contention) -> Self {
        match c {
            Contention::FairShare => ContentionPolicy::FairShare,
            Contention::Disabled => ContentionPolicy::Disabled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSection {
    pub n_jobs: usize,
    pub it_jitter: f64,
    pub arrivals: ArrivalProcess,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        let d = RandomConfig::default();
        Self { n_jobs: d.n_jobs, it_jitter: d.it_jitter, arrivals: d.arrivals }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaSection {
    pub population_size: usize,
    pub generations: u32,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub tournament_size: usize,
    pub hole_weight: f64,
    pub mean_gap: f64,
}

impl Default for GaSection {
    fn default() -> Self {
        let d = GaConfig::default();
        Self {
            population_size: d.population_size,
            generations: d.generations,
            mutation_rate: d.mutation_rate,
            crossover_rate: d.crossover_rate,
            tournament_size: d.tournament_size,
            hole_weight: d.hole_weight,
            mean_gap: d.mean_gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    /// Kernel catalog; the built-in mix when absent. Relative paths are
    /// taken from the working directory.
    pub catalog: Option<PathBuf>,
    pub scheduler: SchedulerSection,
    pub costs: MigrationCostModel,
    pub contention: Contention,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Modes run by `compare` and `sweep`.
    pub modes: Vec<String>,
    pub baseline: String,
    pub workload: WorkloadSection,
    pub ga: GaSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            catalog: None,
            scheduler: SchedulerSection::default(),
            costs: MigrationCostModel::default(),
            contention: Contention::default(),
            seeds: (0..30).collect(),
            output_dir: PathBuf::from("out"),
            modes: ["monolithic", "tiled", "stateless-1.0", "stateless-0.8", "stateful"].map(String::from).to_vec(),
            baseline: "tiled".into(),
            workload: WorkloadSection::default(),
            ga: GaSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?;
                Self::parse(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim_config(self.mode()?).validate().map_err(|e| invalid(e.to_string()))?;
        for m in self.modes.iter().chain([&self.baseline]) {
            self.resolve_mode(m)?;
        }
        if !self.modes.is_empty() && !self.modes.contains(&self.baseline) {
            return Err(invalid(format!("baseline `{}` is not among the modes", self.baseline)));
        }
        vcgra_core::workloads::generate_random_with(
            &vcgra_core::KernelCatalog::evaluation_mix(),
            &self.random_config(),
            0,
        )
        .map_err(|e| invalid(e.to_string()))?;
        self.ga_config().validate().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    /// Parses a mode label; bare `stateless` takes the configured threshold.
    pub fn resolve_mode(&self, label: &str) -> Result<SchedulingMode, ConfigError> {
        if label == "stateless" {
            let f = self.scheduler.stateless_threshold;
            if !(f > 0.0 && f <= 1.0) {
                return Err(invalid(format!("stateless threshold {f} is outside (0, 1]")));
            }
            return Ok(SchedulingMode::TiledStateless { threshold: f });
        }
        SchedulingMode::parse(label).ok_or_else(|| invalid(format!("unknown mode `{label}`")))
    }

    pub fn mode(&self) -> Result<SchedulingMode, ConfigError> {
        self.resolve_mode(&self.scheduler.mode)
    }

    pub fn modes(&self) -> Result<Vec<SchedulingMode>, ConfigError> {
        self.modes.iter().map(|m| self.resolve_mode(m)).collect()
    }

    pub fn sim_config(&self, mode: SchedulingMode) -> SimConfig {
        SimConfig {
            grid_height: self.grid.height,
            grid_width: self.grid.width,
            pe_rows: self.grid.pe_rows,
            pe_cols: self.grid.pe_cols,
            scheduler: SchedulerConfig { mode, alpha: self.scheduler.alpha, delays: self.scheduler.delays },
            costs: self.costs,
            contention: self.contention.into(),
            record_trace: true,
        }
    }

    pub fn random_config(&self) -> RandomConfig {
        RandomConfig {
            n_jobs: self.workload.n_jobs,
            it_jitter: self.workload.it_jitter,
            arrivals: self.workload.arrivals,
            grid: (self.grid.height, self.grid.width),
        }
    }

    pub fn ga_config(&self) -> GaConfig {
        let g = &self.ga;
        GaConfig {
            population_size: g.population_size,
            generations: g.generations,
            mutation_rate: g.mutation_rate,
            crossover_rate: g.crossover_rate,
            tournament_size: g.tournament_size,
            n_jobs: self.workload.n_jobs,
            hole_weight: g.hole_weight,
            mean_gap: g.mean_gap,
            grid: (self.grid.height, self.grid.width),
        }
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form, with
    /// the output directory left out.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.sim_config(cfg.mode().unwrap()), SimConfig::default());
        assert_eq!(cfg.random_config(), RandomConfig::default());
        assert_eq!(cfg.ga_config(), GaConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::parse(
            "seeds = [5]\ncontention = 'disabled'\n[grid]\nheight = 3\n[scheduler]\nmode = 'stateless'\nstateless_threshold = 0.8\n[scheduler.delays]\nenqueue = 7\n[costs]\nhypervisor_overhead = 9\n",
        )
        .unwrap();
        let sim = cfg.sim_config(cfg.mode().unwrap());
        assert_eq!(sim.scheduler.mode, SchedulingMode::TiledStateless { threshold: 0.8 });
        assert_eq!((sim.grid_height, sim.scheduler.delays.enqueue, sim.costs.hypervisor_overhead), (3, 7, 9));
        assert_eq!(sim.contention, ContentionPolicy::Disabled);
        assert_eq!(cfg.seeds, [5]);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        for bad in [
            "colour = 1",
            "[grid]\ndepth = 2",
            "[scheduler.delays]\nfoo = 1",
            "[scheduler]\nmode = 'fast'",
            "[scheduler]\nalpha = -1.0",
            "[grid]\nheight = 0",
            "[grid]\nheight = 9\nwidth = 9",
            "baseline = 'stateful'\nmodes = ['tiled', 'monolithic']",
            "[ga]\npopulation_size = 1",
            "[workload]\nit_jitter = 2.0",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.scheduler.alpha = 1.5;
        assert_ne!(a.hash(), b.hash());
    }
}
