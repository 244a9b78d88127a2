// SPDX-License-Identifier: Apache-2.0

//! Scenario configuration and the experiment harness built on it: single
//! runs, static-frequency sweeps and the four-arm comparison.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::controller::{ControllerConfig, FrequencyPolicy};
use crate::error::{Error, Result};
use crate::metrics::{compute_report, ItlMode, MetricsReport};
use crate::router::{RouteConfig, RoutePolicy};
use crate::sim::{self, ClusterConfig, SimParams, SimResult};
use crate::types::{FrequencyLadder, FrequencyMHz, PhaseKind, Request, SloProfile};
use crate::workload::{generate_in, WorkloadSpec};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseControl {
    pub control_interval_ms: f64,
    pub freq_set_overhead_ms: f64,
    pub blocking_overhead: bool,
}

impl Default for PhaseControl {
    fn default() -> Self {
        PhaseControl {
            control_interval_ms: 0.0,
            freq_set_overhead_ms: 3.0,
            blocking_overhead: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlSettings {
    pub prefill: PhaseControl,
    pub decode: PhaseControl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Adaptive,
    Static(FrequencyMHz),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub ladder: FrequencyLadder,
    #[serde(default)]
    pub slo: SloProfile,
    #[serde(default)]
    pub controller: ControlSettings,
    #[serde(default)]
    pub route: RouteConfig,
    pub workload: WorkloadSpec,
    /// Relative to the config file. The built-in calibration is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_path: Option<PathBuf>,
    #[serde(default)]
    pub mode: Mode,
    /// Levels for `sweep`; defaults to the ladder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_levels: Option<FrequencyLadder>,
    #[serde(default)]
    pub itl_mode: ItlMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_ms: Option<f64>,
}

impl ScenarioConfig {
    pub fn new(workload: WorkloadSpec) -> Self {
        ScenarioConfig {
            schema_version: SCENARIO_SCHEMA_VERSION,
            cluster: ClusterConfig::default(),
            ladder: FrequencyLadder::default(),
            slo: SloProfile::default(),
            controller: ControlSettings::default(),
            route: RouteConfig::default(),
            workload,
            calibration_path: None,
            mode: Mode::Adaptive,
            sweep_levels: None,
            itl_mode: ItlMode::Mean,
            horizon_ms: None,
        }
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            Error::validation(e.path().to_string(), format!("{origin}: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(Error::validation(
                "schema_version",
                format!(
                    "expected {SCENARIO_SCHEMA_VERSION}, got {}",
                    self.schema_version
                ),
            ));
        }
        self.cluster.validate()?;
        self.workload.validate()?;
        if let Mode::Static(f) = self.mode {
            if !self.ladder.contains(f) {
                return Err(Error::validation(
                    "mode.static",
                    format!(
                        "{f} MHz is not on the ladder {:?}",
                        u32_levels(&self.ladder)
                    ),
                ));
            }
        }
        for (name, pc) in [
            ("prefill", self.controller.prefill),
            ("decode", self.controller.decode),
        ] {
            if !(pc.control_interval_ms >= 0.0 && pc.control_interval_ms.is_finite()) {
                return Err(Error::validation(
                    format!("controller.{name}.control_interval_ms"),
                    "must be >= 0",
                ));
            }
            if !(pc.freq_set_overhead_ms >= 0.0 && pc.freq_set_overhead_ms.is_finite()) {
                return Err(Error::validation(
                    format!("controller.{name}.freq_set_overhead_ms"),
                    "must be >= 0",
                ));
            }
        }
        Ok(())
    }

    pub fn controller_config(&self, phase: PhaseKind) -> ControllerConfig {
        let pc = match phase {
            PhaseKind::Prefill => self.controller.prefill,
            PhaseKind::Decode => self.controller.decode,
        };
        ControllerConfig {
            ladder: self.ladder.clone(),
            slo: self.slo,
            phase,
            control_interval_ms: pc.control_interval_ms,
            freq_set_overhead_ms: pc.freq_set_overhead_ms,
            blocking_overhead: pc.blocking_overhead,
        }
    }

    pub fn sim_params(&self, calibration: &Calibration) -> Result<SimParams> {
        calibration.covers(&self.ladder).map_err(|e| {
            Error::Calibration(format!(
                "calibration does not cover the scenario ladder: {e}"
            ))
        })?;
        let policy = |phase| match self.mode {
            Mode::Adaptive => FrequencyPolicy::Adaptive(self.controller_config(phase)),
            Mode::Static(f) => FrequencyPolicy::Static(f),
        };
        Ok(SimParams {
            cluster: self.cluster.clone(),
            prefill: policy(PhaseKind::Prefill),
            decode: policy(PhaseKind::Decode),
            route: self.route,
            whatif: self.controller_config(PhaseKind::Decode),
            calibration: calibration.clone(),
            horizon_ms: self.horizon_ms.or_else(|| self.workload.horizon_ms()),
        })
    }
}

fn u32_levels(ladder: &FrequencyLadder) -> Vec<u32> {
    ladder.levels().iter().map(|f| f.get()).collect()
}

/// A loaded scenario: config plus the resources it references.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub calibration: Calibration,
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = ScenarioConfig::from_json(&text, &path.display().to_string())?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Scenario::from_config(config, base_dir)
    }

    pub fn from_config(config: ScenarioConfig, base_dir: PathBuf) -> Result<Self> {
        config.validate()?;
        let calibration = match &config.calibration_path {
            Some(p) => Calibration::load(&base_dir.join(p))?,
            None => Calibration::default(),
        };
        config.sim_params(&calibration)?;
        Ok(Scenario {
            config,
            calibration,
            base_dir,
        })
    }

    pub fn workload(&self) -> Result<Vec<Request>> {
        generate_in(&self.config.workload, &self.base_dir)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.workload.seed = seed;
        self.config.cluster.seed = seed;
        self
    }

    pub fn run_with(&self, config: &ScenarioConfig, workload: &[Request]) -> Result<RunOutcome> {
        let params = config.sim_params(&self.calibration)?;
        let result = sim::run(&params, workload)?;
        let report = compute_report(&result, &config.slo, config.itl_mode);
        Ok(RunOutcome { result, report })
    }

    pub fn run(&self) -> Result<RunOutcome> {
        let workload = self.workload()?;
        self.run_with(&self.config, &workload)
    }

    /// Runs every sweep level as a static frequency over one shared workload.
    pub fn sweep(&self, jobs: usize) -> Result<SweepOutcome> {
        self.sweep_on(jobs, &self.workload()?)
    }

    pub fn sweep_on(&self, jobs: usize, workload: &[Request]) -> Result<SweepOutcome> {
        let levels = self
            .config
            .sweep_levels
            .clone()
            .unwrap_or_else(|| self.config.ladder.clone());
        self.calibration.covers(&levels).map_err(|e| {
            Error::Calibration(format!("calibration does not cover the sweep levels: {e}"))
        })?;
        let configs: Vec<ScenarioConfig> = levels
            .levels()
            .iter()
            .map(|&f| {
                let mut c = self.config.clone();
                c.ladder = levels.clone();
                c.mode = Mode::Static(f);
                c
            })
            .collect();
        let outcomes = run_parallel(jobs, &configs, |c| self.run_with(c, workload))?;
        let points: Vec<SweepPoint> = levels
            .levels()
            .iter()
            .zip(&outcomes)
            .map(|(&f, o)| SweepPoint {
                freq_mhz: f,
                energy_j: o.report.energy.total_j,
                prefill_energy_j: o.report.energy.prefill_j,
                decode_energy_j: o.report.energy.decode_j,
                tsar: o.report.tsar,
                isar: o.report.isar,
                horizon_ms: o.report.horizon_ms,
            })
            .collect();
        let energies: Vec<f64> = points.iter().map(|p| p.energy_j).collect();
        let argmin = strict_argmin(&energies);
        Ok(SweepOutcome {
            interior_minimum: levels.len() >= 3
                && argmin.is_some_and(|i| i > 0 && i + 1 < energies.len()),
            min_freq_mhz: argmin.map(|i| points[i].freq_mhz),
            points,
        })
    }

    /// Static-min, static-max, adaptive with round-robin decode routing and
    /// adaptive with state-space routing, all on one generated workload.
    pub fn compare(&self, jobs: usize) -> Result<CompareOutcome> {
        self.compare_on(jobs, &self.workload()?)
    }

    pub fn compare_on(&self, jobs: usize, workload: &[Request]) -> Result<CompareOutcome> {
        let arms = comparison_arms(&self.config);
        let configs: Vec<ScenarioConfig> = arms.iter().map(|(_, c)| c.clone()).collect();
        let outcomes = run_parallel(jobs, &configs, |c| self.run_with(c, workload))?;
        Ok(CompareOutcome {
            arms: arms
                .into_iter()
                .zip(outcomes)
                .map(|((name, _), o)| (name, o))
                .collect(),
        })
    }
}

pub fn comparison_arms(base: &ScenarioConfig) -> Vec<(String, ScenarioConfig)> {
    let with = |mode: Mode, policy: RoutePolicy| {
        let mut c = base.clone();
        c.mode = mode;
        c.route.policy = policy;
        c
    };
    let lo = base.ladder.min();
    let hi = base.ladder.max();
    vec![
        (
            format!("static_{lo}"),
            with(Mode::Static(lo), RoutePolicy::RoundRobin),
        ),
        (
            format!("static_{hi}"),
            with(Mode::Static(hi), RoutePolicy::RoundRobin),
        ),
        (
            "adaptive_round_robin".into(),
            with(Mode::Adaptive, RoutePolicy::RoundRobin),
        ),
        (
            "adaptive_state_space".into(),
            with(Mode::Adaptive, RoutePolicy::StateSpace),
        ),
    ]
}

fn run_parallel<T, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<RunOutcome>>
where
    T: Sync,
    F: Fn(&T) -> Result<RunOutcome> + Sync,
{
    if jobs <= 1 {
        return items.iter().map(&f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

fn strict_argmin(values: &[f64]) -> Option<usize> {
    let (idx, min) = values
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    let unique = values.iter().enumerate().all(|(i, &v)| i == idx || v > min);
    unique.then_some(idx)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub result: SimResult,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub freq_mhz: FrequencyMHz,
    pub energy_j: f64,
    pub prefill_energy_j: f64,
    pub decode_energy_j: f64,
    pub tsar: f64,
    pub isar: f64,
    pub horizon_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub points: Vec<SweepPoint>,
    pub min_freq_mhz: Option<FrequencyMHz>,
    pub interior_minimum: bool,
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub arms: Vec<(String, RunOutcome)>,
}

impl CompareOutcome {
    pub fn arm(&self, name: &str) -> Option<&RunOutcome> {
        self.arms.iter().find(|(n, _)| n == name).map(|(_, o)| o)
    }
}
