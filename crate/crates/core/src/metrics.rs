//! Closed-loop scorecard: integral errors, total variation, overshoot,
//! settling time and the maximum sensitivity of a PID/FOPDT loop.
//!
//! Integrals are left-rectangle sums over the uniformly sampled response of
//! one setpoint change. The normalized variants divide the error by the size
//! of the setpoint change (input total variation by the first input move).

use log::warn;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::baselines::FopdtModel;
use crate::error::{Error, Result};
use crate::pid::PidGains;

/// Sampled response to one setpoint change.
#[derive(Debug, Clone, Copy)]
pub struct StepData<'a> {
    /// Sample times, uniformly spaced; `times[0]` is the instant of the change.
    pub times: &'a [f64],
    /// Measured output.
    pub y: &'a [f64],
    /// Input applied after each sample.
    pub u: &'a [f64],
    /// Input in force before the change.
    pub u_before: f64,
    pub setpoint_before: f64,
    pub setpoint_after: f64,
}

/// Scorecard of a single step change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iae: f64,
    pub ise: f64,
    /// Total variation of the normalized error.
    pub tv: f64,
    /// Total variation of the input over the magnitude of the first move.
    /// `None` when the first move is zero.
    pub tv_u: Option<f64>,
    pub percent_os: f64,
    /// `None` when the response never stays inside the band.
    pub settling_time: Option<f64>,
    pub epsilon: f64,
    pub raw_iae: f64,
    pub raw_ise: f64,
    /// Total variation of the raw output.
    pub raw_tv: f64,
    pub raw_os: f64,
    pub horizon: f64,
}

/// Default settling band: 2 % of the setpoint change.
pub fn default_epsilon(setpoint_before: f64, setpoint_after: f64) -> f64 {
    0.02 * (setpoint_after - setpoint_before).abs()
}

pub fn step_metrics(data: StepData<'_>, epsilon: f64) -> Result<StepMetrics> {
    let n = data.y.len();
    if data.times.len() != n || data.u.len() != n {
        return Err(Error::Dimension { expected: n, got: data.times.len().min(data.u.len()) });
    }
    if n < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let dsp = data.setpoint_after - data.setpoint_before;
    if dsp == 0.0 {
        return Err(Error::UndefinedMetric("normalized metrics need a non-zero setpoint change"));
    }
    let dt = data.times[1] - data.times[0];
    let scale = dsp.abs();
    let e: Vec<f64> = data.y.iter().map(|y| data.setpoint_after - y).collect();

    let raw_iae: f64 = e.iter().map(|v| v.abs() * dt).sum();
    let raw_ise: f64 = e.iter().map(|v| v * v * dt).sum();
    let raw_tv = total_variation(data.y);
    let e0 = e[0];
    let raw_os = e
        .iter()
        .filter(|&&v| e0 * v < 0.0)
        .map(|v| v.abs())
        .fold(0.0, f64::max);

    let settle_idx = e.iter().rposition(|v| v.abs() > epsilon).map_or(Some(0), |last| {
        (last + 1 < n).then_some(last + 1)
    });

    let first_move = data.u[0] - data.u_before;
    let tv_u = (first_move != 0.0)
        .then(|| (first_move.abs() + total_variation(data.u)) / first_move.abs());

    Ok(StepMetrics {
        iae: raw_iae / scale,
        ise: raw_ise / (scale * scale),
        tv: total_variation(&e) / scale,
        tv_u,
        percent_os: raw_os * 100.0 / scale,
        settling_time: settle_idx.map(|i| data.times[i] - data.times[0]),
        epsilon,
        raw_iae,
        raw_ise,
        raw_tv,
        raw_os,
        horizon: dt * n as f64,
    })
}

pub fn total_variation(x: &[f64]) -> f64 {
    x.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

/// Averages over the step changes of one evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub iae: f64,
    pub ise: f64,
    pub tv: f64,
    /// Mean over steps where it is defined.
    pub tv_u: f64,
    pub percent_os: f64,
    /// Unsettled steps count as their full horizon.
    pub settling_time: f64,
}

impl MetricSummary {
    pub const FIELDS: [&'static str; 6] = ["iae", "ise", "tv", "tv_u", "percent_os", "settling_time"];

    pub fn to_array(&self) -> [f64; 6] {
        [self.iae, self.ise, self.tv, self.tv_u, self.percent_os, self.settling_time]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            iae: a[0],
            ise: a[1],
            tv: a[2],
            tv_u: a[3],
            percent_os: a[4],
            settling_time: a[5],
        }
    }
}

/// All step changes of one evaluation run plus their average.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub steps: Vec<StepMetrics>,
    pub mean: MetricSummary,
    pub unsettled_steps: usize,
    pub ms: Option<f64>,
}

impl MetricsReport {
    pub fn from_steps(steps: Vec<StepMetrics>) -> Self {
        if steps.is_empty() {
            return Self::default();
        }
        let n = steps.len() as f64;
        let mean_of = |f: &dyn Fn(&StepMetrics) -> f64| steps.iter().map(f).sum::<f64>() / n;
        let tv_u: Vec<f64> = steps.iter().filter_map(|s| s.tv_u).collect();
        let mean = MetricSummary {
            iae: mean_of(&|s| s.iae),
            ise: mean_of(&|s| s.ise),
            tv: mean_of(&|s| s.tv),
            tv_u: if tv_u.is_empty() { f64::NAN } else { tv_u.iter().sum::<f64>() / tv_u.len() as f64 },
            percent_os: mean_of(&|s| s.percent_os),
            settling_time: mean_of(&|s| s.settling_time.unwrap_or(s.horizon)),
        };
        Self {
            unsettled_steps: steps.iter().filter(|s| s.settling_time.is_none()).count(),
            steps,
            mean,
            ms: None,
        }
    }
}

/// Mean and sample standard deviation per metric across several runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

pub fn mean_std(runs: &[MetricSummary]) -> MeanStd {
    let n = runs.len();
    let mut mean = [0.0; 6];
    let mut std = [0.0; 6];
    if n == 0 {
        return MeanStd { mean: MetricSummary::from_array([f64::NAN; 6]), std: MetricSummary::from_array([f64::NAN; 6]) };
    }
    for r in runs {
        for (m, v) in mean.iter_mut().zip(r.to_array()) {
            *m += v / n as f64;
        }
    }
    if n > 1 {
        for r in runs {
            for ((s, v), m) in std.iter_mut().zip(r.to_array()).zip(mean) {
                *s += (v - m).powi(2) / (n - 1) as f64;
            }
        }
        for s in std.iter_mut() {
            *s = s.sqrt();
        }
    }
    MeanStd {
        mean: MetricSummary::from_array(mean),
        std: MetricSummary::from_array(std),
    }
}

/// `C(s) = k_p + k_i / s + k_d s / (t_f s + 1)`.
pub fn pid_frequency_response(gains: &PidGains, t_f: f64, omega: f64) -> Complex64 {
    let s = Complex64::new(0.0, omega);
    gains.kp + gains.ki / s + gains.kd * s / (t_f * s + 1.0)
}

pub fn fopdt_frequency_response(model: &FopdtModel, omega: f64) -> Complex64 {
    let s = Complex64::new(0.0, omega);
    model.k * (-model.theta_d * s).exp() / (model.tau1 * s + 1.0)
}

/// `|1 / (1 + C G)|` at `omega`.
pub fn sensitivity(gains: &PidGains, t_f: f64, model: &FopdtModel, omega: f64) -> f64 {
    let l = pid_frequency_response(gains, t_f, omega) * fopdt_frequency_response(model, omega);
    1.0 / (1.0 + l).norm()
}

/// Log-spaced frequencies over `[lo, hi]` rad/s.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect()
}

pub const MS_OMEGA_MIN: f64 = 1e-4;
pub const MS_OMEGA_MAX: f64 = 1e2;
pub const MS_GRID_POINTS: usize = 2000;

/// Peak of the sensitivity function over a log grid. The grid is doubled
/// while neighbouring magnitudes differ by more than 5 %.
pub fn max_sensitivity(gains: &PidGains, t_f: f64, model: &FopdtModel) -> Result<f64> {
    model.validate()?;
    let mut n = MS_GRID_POINTS;
    loop {
        let mags: Vec<f64> = log_grid(MS_OMEGA_MIN, MS_OMEGA_MAX, n)
            .into_iter()
            .map(|w| sensitivity(gains, t_f, model, w))
            .collect();
        if mags.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("sensitivity"));
        }
        let coarse = mags.windows(2).any(|w| (w[1] - w[0]).abs() > 0.05 * w[0].max(w[1]));
        let peak = mags.into_iter().fold(0.0, f64::max);
        if !coarse {
            return Ok(peak);
        }
        if n >= 256_000 {
            warn!("sensitivity grid still coarse at {n} points; Ms = {peak}");
            return Ok(peak);
        }
        n *= 2;
    }
}
