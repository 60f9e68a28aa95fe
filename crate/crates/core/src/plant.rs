//! Two-tank level process: pump, inflow, Torricelli outflow, level and
//! measured level as first-order lags, integrated with fixed-step RK4.
//!
//! Flow is in cm³/s, lengths in cm, time in s. The flow-setpoint path carries
//! an explicit transport delay so that the identified flow→level model shows
//! the dead time seen on the real apparatus.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_fopdt, FopdtModel};
use crate::error::{ensure_finite, Error, Result};
use crate::pid::{PidGains, PidLoop, PidState};

/// Physical constants of the apparatus, plus the inner flow loop which is
/// treated as part of the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    pub r_tank: f64,
    pub r_pipe: f64,
    pub f_c: f64,
    pub f_max: f64,
    pub tau_p: f64,
    pub tau_in: f64,
    pub tau_out: f64,
    pub tau_m: f64,
    pub g: f64,
    pub transport_delay: f64,
    /// Multiplier on the outflow target, `1.0` means the valve is fully open.
    pub outflow_scale: f64,
    pub flow_gains: PidGains,
    pub flow_t_f: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        // Chosen with `calibrate_to_fopdt` (2 cm³/s steps, 1 s control
        // interval, 0.1 s RK4) against G(s) = 3.44 e^{-9.21 s} / (301.19 s + 1)
        // around 60 cm; the fit gives k = 3.440, tau1 = 301.20 s,
        // theta_d = 9.21 s. The simulator is deterministic so no seed is involved.
        Self {
            r_tank: 5.288,
            r_pipe: 0.23546,
            f_c: 0.6,
            f_max: 300.0,
            tau_p: 1.0,
            tau_in: 1.0,
            tau_out: 1.0,
            tau_m: 1.65,
            g: 981.0,
            transport_delay: 3.0,
            outflow_scale: 1.0,
            flow_gains: PidGains {
                kp: 0.2,
                ki: 0.2 / 3.0,
                kd: 0.67 * 0.2,
                ktau: 0.5,
            },
            flow_t_f: 0.1,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("r_tank", self.r_tank),
            ("r_pipe", self.r_pipe),
            ("f_c", self.f_c),
            ("f_max", self.f_max),
            ("g", self.g),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("tau_p", self.tau_p),
            ("tau_in", self.tau_in),
            ("tau_out", self.tau_out),
            ("tau_m", self.tau_m),
            ("transport_delay", self.transport_delay),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.outflow_scale > 0.0 && self.outflow_scale <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "outflow_scale must lie in (0, 1], got {}",
                self.outflow_scale
            )));
        }
        self.flow_gains.validate()?;
        if !(0.0..=1.0).contains(&self.flow_t_f) {
            return Err(Error::InvalidParameter("flow_t_f must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn tank_area(&self) -> f64 {
        PI * self.r_tank * self.r_tank
    }

    /// Outflow the level `level` drives once the outflow lag has settled.
    pub fn outflow_target(&self, level: f64) -> f64 {
        self.outflow_scale * PI * self.r_pipe * self.r_pipe * self.f_c * (2.0 * self.g * level.max(0.0)).sqrt()
    }

    /// Level at which a constant inflow is balanced by the outflow.
    pub fn equilibrium_level(&self, inflow: f64) -> f64 {
        let per_root = self.outflow_target(1.0);
        (inflow / per_root).powi(2)
    }

    pub fn min_time_constant(&self) -> Option<f64> {
        [self.tau_p, self.tau_in, self.tau_out, self.tau_m]
            .into_iter()
            .filter(|t| *t > 0.0)
            .min_by(f64::total_cmp)
    }
}

/// Pure time delay on a piecewise-constant command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayLine {
    pub delay: f64,
    pending: VecDeque<(f64, f64)>,
    output: f64,
}

impl DelayLine {
    const EPS: f64 = 1e-9;

    pub fn new(delay: f64, initial: f64) -> Self {
        Self {
            delay,
            pending: VecDeque::new(),
            output: initial,
        }
    }

    /// Feed `value` at time `now` and return the delayed signal at `now`.
    pub fn push(&mut self, now: f64, value: f64) -> f64 {
        self.pending.push_back((now + self.delay, value));
        self.output_at(now)
    }

    pub fn output_at(&mut self, now: f64) -> f64 {
        while let Some(&(release, value)) = self.pending.front() {
            if release <= now + Self::EPS {
                self.output = value;
                self.pending.pop_front();
            } else {
                break;
            }
        }
        self.output
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

/// Instantaneous plant state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub time: f64,
    pub p: f64,
    pub f_in: f64,
    pub f_out: f64,
    pub level: f64,
    pub measured_level: f64,
    pub delay_buffer: DelayLine,
}

impl PlantState {
    /// All signals zero, empty tank.
    pub fn empty(params: &PlantParams) -> Self {
        Self {
            time: 0.0,
            p: 0.0,
            f_in: 0.0,
            f_out: 0.0,
            level: 0.0,
            measured_level: 0.0,
            delay_buffer: DelayLine::new(params.transport_delay, 0.0),
        }
    }

    /// Equilibrium at `level`, with the delay line holding the matching flow
    /// setpoint.
    pub fn steady_at_level(params: &PlantParams, level: f64) -> Result<Self> {
        if !(level >= 0.0 && level.is_finite()) {
            return Err(Error::InvalidParameter(format!("level must be >= 0, got {level}")));
        }
        let flow = params.outflow_target(level);
        let p = 100.0 * flow / params.f_max;
        if p > 100.0 {
            return Err(Error::InvalidParameter(format!(
                "level {level} cm needs {p:.1}% pump speed"
            )));
        }
        Ok(Self {
            time: 0.0,
            p,
            f_in: flow,
            f_out: flow,
            level,
            measured_level: level,
            delay_buffer: DelayLine::new(params.transport_delay, flow),
        })
    }

    fn vector(&self) -> [f64; 5] {
        [self.p, self.f_in, self.f_out, self.level, self.measured_level]
    }

    fn set_vector(&mut self, x: [f64; 5]) {
        self.p = x[0];
        self.f_in = x[1];
        self.f_out = x[2];
        self.level = x[3];
        self.measured_level = x[4];
    }
}

/// What the plant is driven with. Flow mode maps the setpoint to a pump
/// speed by the static pump gain (no flow controller).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PlantCommand {
    FlowSetpoint(f64),
    PumpSetpoint(f64),
}

impl PlantCommand {
    pub fn value(&self) -> f64 {
        match *self {
            PlantCommand::FlowSetpoint(v) | PlantCommand::PumpSetpoint(v) => v,
        }
    }

    fn with_value(&self, v: f64) -> Self {
        match self {
            PlantCommand::FlowSetpoint(_) => PlantCommand::FlowSetpoint(v),
            PlantCommand::PumpSetpoint(_) => PlantCommand::PumpSetpoint(v),
        }
    }

    fn pump_speed(&self, params: &PlantParams) -> f64 {
        let p = match *self {
            PlantCommand::PumpSetpoint(p) => p,
            PlantCommand::FlowSetpoint(f) => 100.0 * f / params.f_max,
        };
        p.clamp(0.0, 100.0)
    }
}

/// Advance `tau * dy/dt + y = y_hat` by `dt` for constant `y_hat`.
pub fn filter_step(y_prev: f64, y_hat: f64, tau: f64, dt: f64) -> Result<f64> {
    ensure_finite(y_prev, "filter state")?;
    ensure_finite(y_hat, "filter input")?;
    ensure_finite(tau, "filter time constant")?;
    if tau < 0.0 || !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("need tau >= 0 and dt > 0, got {tau}, {dt}")));
    }
    if tau == 0.0 {
        return Ok(y_hat);
    }
    Ok(y_hat + (y_prev - y_hat) * (-dt / tau).exp())
}

/// Replace lag-free components by their algebraic values.
fn resolve(x: [f64; 5], p_bar: f64, params: &PlantParams) -> [f64; 5] {
    let mut x = x;
    if params.tau_p == 0.0 {
        x[0] = p_bar;
    }
    if params.tau_in == 0.0 {
        x[1] = params.f_max * x[0] / 100.0;
    }
    if params.tau_out == 0.0 {
        x[2] = params.outflow_target(x[3]);
    }
    if params.tau_m == 0.0 {
        x[4] = x[3];
    }
    x
}

fn rates(x: [f64; 5], p_bar: f64, params: &PlantParams) -> [f64; 5] {
    let x = resolve(x, p_bar, params);
    let lag = |target: f64, value: f64, tau: f64| if tau == 0.0 { 0.0 } else { (target - value) / tau };
    [
        lag(p_bar, x[0], params.tau_p),
        lag(params.f_max * x[0] / 100.0, x[1], params.tau_in),
        lag(params.outflow_target(x[3]), x[2], params.tau_out),
        (x[1] - x[2]) / params.tank_area(),
        lag(x[3], x[4], params.tau_m),
    ]
}

/// `(dp, df_in, df_out, dlevel, dm)` for the effective command. Components
/// whose time constant is zero are algebraic and report zero.
pub fn plant_derivatives(state: &PlantState, command: PlantCommand, params: &PlantParams) -> [f64; 5] {
    rates(state.vector(), command.pump_speed(params), params)
}

fn check_step(params: &PlantParams, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if let Some(tau) = params.min_time_constant() {
        if dt > tau / 2.0 + 1e-12 {
            return Err(Error::StepTooCoarse { dt, limit: tau / 2.0 });
        }
    }
    Ok(())
}

/// One RK4 step with a constant pump command and no delay handling.
fn integrate(state: &mut PlantState, p_bar: f64, params: &PlantParams, dt: f64) -> Result<()> {
    let p_bar = p_bar.clamp(0.0, 100.0);
    let x = resolve(state.vector(), p_bar, params);
    let axpy = |a: [f64; 5], k: [f64; 5], h: f64| {
        let mut out = a;
        for i in 0..5 {
            out[i] += h * k[i];
        }
        out
    };
    let k1 = rates(x, p_bar, params);
    let k2 = rates(axpy(x, k1, dt / 2.0), p_bar, params);
    let k3 = rates(axpy(x, k2, dt / 2.0), p_bar, params);
    let k4 = rates(axpy(x, k3, dt), p_bar, params);
    let mut next = x;
    for i in 0..5 {
        next[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    next[0] = next[0].clamp(0.0, 100.0);
    next[1] = next[1].max(0.0);
    next[2] = next[2].max(0.0);
    next[3] = next[3].max(0.0);
    let next = resolve(next, p_bar, params);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("plant state"));
    }
    state.set_vector(next);
    state.time += dt;
    Ok(())
}

/// Advance the open-loop plant by `dt`. The command passes through the
/// transport delay before it reaches the pump.
pub fn step_plant(state: &PlantState, command: PlantCommand, params: &PlantParams, dt: f64) -> Result<PlantState> {
    check_step(params, dt)?;
    let mut next = state.clone();
    let delayed = next.delay_buffer.push(state.time, command.value());
    let p_bar = command.with_value(delayed).pump_speed(params);
    integrate(&mut next, p_bar, params, dt)?;
    Ok(next)
}

/// One sample of closed-loop process data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t_s: f64,
    pub level_sp_cm: f64,
    pub level_cm: f64,
    pub flow_sp: f64,
    pub flow: f64,
    pub pump_pct: f64,
    pub u_hat: f64,
    pub u: f64,
    pub episode_id: u32,
}

/// Sampling intervals of the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Controller sampling interval (s).
    pub control_dt: f64,
    /// RK4 step (s).
    pub integ_dt: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            control_dt: 1.0,
            integ_dt: 0.1,
        }
    }
}

impl Timing {
    pub fn substeps(&self) -> Result<usize> {
        let n = (self.control_dt / self.integ_dt).round();
        if !(n >= 1.0) || ((n * self.integ_dt) - self.control_dt).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "control interval {} is not a multiple of the integration step {}",
                self.control_dt, self.integ_dt
            )));
        }
        Ok(n as usize)
    }
}

/// Inner loop only: the flow setpoint enters the delay line, the flow PID
/// drives the pump. Returns the pump command used over the interval.
pub fn flow_loop_step(
    state: &mut PlantState,
    flow_setpoint: f64,
    flow_pid: &mut PidLoop,
    params: &PlantParams,
    timing: Timing,
) -> Result<f64> {
    check_step(params, timing.integ_dt)?;
    let n = timing.substeps()?;
    let now = state.time;
    let delayed = state.delay_buffer.push(now, flow_setpoint);
    let p_bar = flow_pid.step(delayed, state.f_in).u;
    for _ in 0..n {
        integrate(state, p_bar, params, timing.integ_dt)?;
    }
    Ok(p_bar)
}

/// Cascade step: level PID on the measured level gives the flow setpoint,
/// the flow PID tracks it. Returns the advanced state and the sample taken
/// at the start of the interval.
pub fn closed_loop_step(
    state: &PlantState,
    level_setpoint: f64,
    level_pid: &mut PidLoop,
    flow_pid: &mut PidLoop,
    params: &PlantParams,
    timing: Timing,
) -> Result<(PlantState, LogRecord)> {
    let m = state.measured_level;
    let level_out = level_pid.step(level_setpoint, m);
    let mut next = state.clone();
    flow_loop_step(&mut next, level_out.u, flow_pid, params, timing)?;
    let record = LogRecord {
        t_s: state.time,
        level_sp_cm: level_setpoint,
        level_cm: m,
        flow_sp: level_out.u,
        flow: state.f_in,
        pump_pct: state.p,
        u_hat: level_out.u_hat,
        u: level_out.u,
        episode_id: 0,
    };
    Ok((next, record))
}

/// Flow PID as configured in `params`, resting at the pump speed of `state`.
pub fn flow_controller(params: &PlantParams, state: &PlantState, control_dt: f64) -> Result<PidLoop> {
    PidLoop::new(
        params.flow_gains,
        PidState::new(params.flow_t_f, control_dt, state.p)?,
        0.0,
        100.0,
    )
}

/// Step the flow setpoint up by `step_size` around the 60 cm operating
/// point, then back down, fit a first-order-plus-dead-time model to each
/// flow-setpoint→measured-level response and return the average.
pub fn calibrate_to_fopdt(params: &PlantParams, step_size: f64, timing: Timing) -> Result<FopdtModel> {
    const LEVEL: f64 = 60.0;
    const PRE: f64 = 20.0;
    const HOLD: f64 = 3000.0;
    params.validate()?;
    if !(step_size != 0.0 && step_size.is_finite()) {
        return Err(Error::InvalidParameter("step size must be non-zero".into()));
    }
    let mut state = PlantState::steady_at_level(params, LEVEL)?;
    let mut flow_pid = flow_controller(params, &state, timing.control_dt)?;
    let base = state.f_in;

    let run = |state: &mut PlantState, flow_pid: &mut PidLoop, before: f64, after: f64| -> Result<FopdtModel> {
        let mut times = vec![];
        let mut u = vec![];
        let mut y = vec![];
        let t0 = state.time;
        while state.time - t0 < PRE + HOLD - 1e-9 {
            let command = if state.time - t0 < PRE - 1e-9 { before } else { after };
            times.push(state.time - t0);
            u.push(command);
            y.push(state.measured_level);
            flow_loop_step(state, command, flow_pid, params, timing)?;
        }
        fit_fopdt(&times, &u, &y).map_err(|e| Error::NotCalibratable(e.to_string()))
    };

    let up = run(&mut state, &mut flow_pid, base, base + step_size)?;
    let down = run(&mut state, &mut flow_pid, base + step_size, base)?;
    Ok(FopdtModel {
        k: 0.5 * (up.k + down.k),
        tau1: 0.5 * (up.tau1 + down.tau1),
        theta_d: 0.5 * (up.theta_d + down.theta_d),
    })
}
