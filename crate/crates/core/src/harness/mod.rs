//! Experiment orchestration: configuration, the simulated rig, process-data
//! files, training/evaluation/robustness/baseline protocols and reports.

mod data;
mod experiment;
mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{FopdtModel, SIMC_TC_GRID};
use crate::error::{Error, Result};
use crate::pid::{pid_law, PidGains, PidLoop, PidState};
use crate::plant::{flow_controller, flow_loop_step, LogRecord, PlantParams, PlantState, Timing};
use crate::reward::RewardSpec;
use crate::td3::Td3Config;

pub use data::{list_process_files, read_process_file, write_process_file, ProcessFile};
pub use experiment::{
    run_baseline, run_evaluation, run_robustness_suite, run_training_experiment, BaselineResult, BaselineRow,
    Condition, CycleRecord, EpisodeRecord, Evaluation, RobustnessResult, Trainer, TrainingReport,
};
pub use report::{
    emit_report, level_heatmap, write_baseline_table, write_evaluation, write_robustness_table, HeatmapGrid,
    ReportSummary,
};

/// How training noise enters the incremental control law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exploration {
    /// Noise is added to each increment and carried forward, so the applied
    /// input wanders away from the policy's own trajectory.
    RandomWalk,
    /// The applied input is offset by white noise; the policy trajectory is
    /// otherwise unchanged.
    #[default]
    Differenced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Level before the first step (cm); every protocol starts settled here.
    pub initial_level: f64,
    /// Training setpoints, visited in order once per episode cycle.
    pub setpoints: Vec<f64>,
    /// Time spent on each setpoint (s).
    pub episode_timer: f64,
    pub cycles: usize,
    pub control_dt: f64,
    pub integ_dt: f64,
    /// Derivative filter constant of the level controller.
    pub level_t_f: f64,
    pub initial_gains: PidGains,
    pub safe_gains: PidGains,
    /// Tracking error (cm) at timer expiry above which the safe gains take over.
    pub safe_fallback_threshold: f64,
    /// The safe controller must hold `|e| <= threshold` this long (s).
    pub fallback_hold: f64,
    pub fallback_max: f64,
    /// Standard deviation of the white offset on the applied flow setpoint
    /// during training (flow units).
    pub exploration_sigma: f64,
    pub exploration: Exploration,
    /// Train with tight flow-setpoint limits and inverting gradients.
    pub constrained: bool,
    pub constrained_limits: [f64; 2],
    pub evaluation_setpoints: Vec<f64>,
    pub evaluation_duration: f64,
    /// Settling band as a fraction of the setpoint change.
    pub settle_fraction: f64,
    pub reward: RewardSpec,
    /// Input bounds and the inverting-gradient flag are derived from
    /// `constrained`, `constrained_limits` and `plant.f_max`.
    pub td3: Td3Config,
    pub plant: PlantParams,
    /// Model used for the maximum-sensitivity figure.
    pub ms_model: FopdtModel,
    pub simc_tc: Vec<f64>,
    pub calibration_step: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            initial_level: 60.0,
            setpoints: vec![65.0, 60.0],
            episode_timer: 240.0,
            cycles: 20,
            control_dt: 1.0,
            integ_dt: 0.1,
            level_t_f: 0.1,
            initial_gains: PidGains::from_kp_schedule(4.0, 0.5),
            safe_gains: PidGains { kp: 3.0, ki: 0.025, kd: 0.0, ktau: 0.5 },
            safe_fallback_threshold: 2.0,
            fallback_hold: 30.0,
            fallback_max: 1200.0,
            exploration_sigma: 2.0,
            exploration: Exploration::default(),
            constrained: false,
            constrained_limits: [18.0, 48.0],
            evaluation_setpoints: vec![65.0, 60.0, 63.0, 60.0],
            evaluation_duration: 240.0,
            settle_fraction: 0.02,
            reward: RewardSpec::default(),
            td3: Td3Config::default(),
            plant: PlantParams::default(),
            ms_model: FopdtModel::LAB,
            simc_tc: SIMC_TC_GRID.to_vec(),
            calibration_step: 2.0,
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Mixed-step protocol with input constraints.
    pub fn constrained_protocol(mut self) -> Self {
        self.constrained = true;
        self.setpoints = vec![65.0, 60.0, 63.0, 60.0];
        self
    }

    pub fn timing(&self) -> Timing {
        Timing { control_dt: self.control_dt, integ_dt: self.integ_dt }
    }

    pub fn steps(&self, duration: f64) -> usize {
        (duration / self.control_dt).round() as usize
    }

    /// Flow-setpoint limits applied by the level controller in training.
    pub fn training_limits(&self) -> (f64, f64) {
        if self.constrained {
            (self.constrained_limits[0], self.constrained_limits[1])
        } else {
            (0.0, self.plant.f_max)
        }
    }

    /// Limits during evaluation: constraints inactive.
    pub fn evaluation_limits(&self) -> (f64, f64) {
        (0.0, self.plant.f_max)
    }

    pub fn effective_td3(&self) -> Td3Config {
        let (u_min, u_max) = self.training_limits();
        Td3Config {
            u_min,
            u_max,
            use_inverting_gradients: self.td3.use_inverting_gradients || self.constrained,
            history: self.td3.history,
            ..self.td3.clone()
        }
    }

    /// Continuous-time equivalent of the discrete derivative filter, used
    /// for the frequency-domain figures.
    pub fn derivative_time_constant(&self) -> f64 {
        if self.level_t_f <= 0.0 {
            0.0
        } else {
            -self.control_dt / self.level_t_f.ln()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.plant.validate()?;
        self.timing().substeps()?;
        self.initial_gains.validate()?;
        self.safe_gains.validate()?;
        self.reward.validate()?;
        self.effective_td3().validate()?;
        self.ms_model.validate()?;
        if self.setpoints.is_empty() || self.evaluation_setpoints.is_empty() {
            return bad("setpoint lists must not be empty".into());
        }
        let durations = [self.episode_timer, self.evaluation_duration, self.fallback_hold, self.fallback_max];
        if durations.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return bad("durations must be positive".into());
        }
        if self.control_dt < self.integ_dt {
            return bad("control interval must not be shorter than the integration step".into());
        }
        if !(self.safe_fallback_threshold > 0.0) {
            return bad("safe_fallback_threshold must be positive".into());
        }
        if !(self.exploration_sigma >= 0.0 && self.settle_fraction > 0.0) {
            return bad("exploration_sigma must be >= 0 and settle_fraction > 0".into());
        }
        if !(0.0..=1.0).contains(&self.level_t_f) {
            return bad(format!("level_t_f must lie in [0, 1], got {}", self.level_t_f));
        }
        let [lo, hi] = self.constrained_limits;
        if !(0.0 <= lo && lo < hi && hi <= self.plant.f_max) {
            return bad(format!("constrained limits {lo}..{hi} must lie inside 0..{}", self.plant.f_max));
        }
        if self.simc_tc.iter().any(|tc| !(*tc > 0.0)) {
            return bad("SIMC closed-loop time constants must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::DataFile { path: path.to_path_buf(), msg: e.to_string() })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// The simulated apparatus with both controllers attached.
#[derive(Debug, Clone)]
pub struct Rig {
    pub params: PlantParams,
    pub timing: Timing,
    pub state: PlantState,
    pub level: PidLoop,
    pub flow: PidLoop,
}

impl Rig {
    /// Plant at steady state at `level` with the level controller's memory
    /// primed on that steady state, so the first step change sees a proper
    /// error difference.
    pub fn settled(cfg: &ExperimentConfig, params: PlantParams, gains: PidGains, limits: (f64, f64)) -> Result<Self> {
        let timing = cfg.timing();
        let state = PlantState::steady_at_level(&params, cfg.initial_level)?;
        let flow = flow_controller(&params, &state, timing.control_dt)?;
        let u0 = state.f_in;
        let level_state = PidState::new(cfg.level_t_f, timing.control_dt, u0)?.advance(
            cfg.initial_level,
            cfg.initial_level,
            u0,
            u0,
        );
        let level = PidLoop::new(gains, level_state, limits.0, limits.1)?;
        Ok(Self { params, timing, state, level, flow })
    }

    /// One control interval. `noise` is added to the level controller's
    /// proposal before saturation.
    pub fn step(&mut self, setpoint: f64, noise: f64, episode_id: u32) -> Result<LogRecord> {
        let m = self.state.measured_level;
        let obs = self.level.state.compute_observation(setpoint, m);
        let u_hat = pid_law(&self.level.gains, &obs) + noise;
        if !u_hat.is_finite() {
            return Err(Error::NonFinite("level controller output"));
        }
        let u = u_hat.clamp(self.level.u_min, self.level.u_max);
        self.level.state = self.level.state.advance(setpoint, m, u, u_hat);
        let record = LogRecord {
            t_s: self.state.time,
            level_sp_cm: setpoint,
            level_cm: m,
            flow_sp: u,
            flow: self.state.f_in,
            pump_pct: self.state.p,
            u_hat,
            u,
            episode_id,
        };
        flow_loop_step(&mut self.state, u, &mut self.flow, &self.params, self.timing)?;
        Ok(record)
    }
}
