//! The run file: every section and key optional, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use ctrlx::control::ControlConfig;
use ctrlx::denoiser::DenoiserConfig;
use ctrlx::pipeline::{Mode, RunConfig};
use ctrlx::trainer::TrainConfig;
use ctrlx::{NoiseSchedule, ScheduleKind};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Name of the resolved config echoed into every output directory.
pub const RESOLVED: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunFile {
    pub schedule: ScheduleSection,
    pub model: DenoiserConfig,
    pub control: ControlConfig,
    pub run: RunSection,
    pub train: TrainConfig,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub num_train_steps: usize,
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            num_train_steps: 1000,
            kind: ScheduleKind::ScaledLinear,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

/// Sampling settings; the control settings live in their own section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub num_steps: usize,
    pub eta: f64,
    pub cfg_scale: f64,
    pub n_r: usize,
    pub tau_r0: f64,
    pub tau_r1: f64,
    pub mode: Mode,
    pub seed: u64,
    pub cond_s: Option<usize>,
    pub cond_a: Option<usize>,
    pub cond_o: Option<usize>,
    pub snapshot_every: usize,
    pub audit: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        let d = RunConfig::default();
        Self {
            num_steps: d.num_steps,
            eta: d.eta,
            cfg_scale: d.cfg_scale,
            n_r: d.n_r,
            tau_r0: d.tau_r0,
            tau_r1: d.tau_r1,
            mode: d.mode,
            seed: d.seed,
            cond_s: d.cond_s,
            cond_a: d.cond_a,
            cond_o: d.cond_o,
            snapshot_every: d.snapshot_every,
            audit: d.audit,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl RunFile {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        let s = &self.schedule;
        NoiseSchedule::new(s.num_train_steps, s.kind, s.beta_start, s.beta_end).map_err(CliError::from)
    }

    pub fn run_config(&self) -> RunConfig {
        let r = &self.run;
        RunConfig {
            num_steps: r.num_steps,
            eta: r.eta,
            cfg_scale: r.cfg_scale,
            n_r: r.n_r,
            tau_r0: r.tau_r0,
            tau_r1: r.tau_r1,
            control: self.control.clone(),
            mode: r.mode,
            seed: r.seed,
            cond_s: r.cond_s,
            cond_a: r.cond_a,
            cond_o: r.cond_o,
            snapshot_every: r.snapshot_every,
            audit: r.audit,
        }
    }

    /// Writes the resolved config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self).map_err(|e| CliError::Runtime(format!("serialising config: {e}")))?;
        let path = dir.join(RESOLVED);
        fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}
