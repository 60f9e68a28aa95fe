//! Incremental (velocity-form) PID with a filtered second-difference
//! derivative on the measurement and an anti-windup feedback term.
//!
//! The controller is written as an affine map of an observation vector
//!
//! ```text
//! u_hat_t = k_p * d_e + k_i * i_e + k_d * neg_d2y + k_tau * aw + u_{t-1}
//! ```
//!
//! which is what lets the same law act as the actor of the tuner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tunable gains of the incremental PID law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub ktau: f64,
}

impl PidGains {
    pub fn new(kp: f64, ki: f64, kd: f64, ktau: f64) -> Result<Self> {
        let g = Self { kp, ki, kd, ktau };
        g.validate()?;
        Ok(g)
    }

    /// Initialization family used for the training experiments:
    /// `k_i = k_p / 60`, `k_d = 0.01 k_p`.
    pub fn from_kp_schedule(kp: f64, ktau: f64) -> Self {
        Self {
            kp,
            ki: kp / 60.0,
            kd: 0.01 * kp,
            ktau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.kp, self.ki, self.kd, self.ktau];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("PID gains"));
        }
        if self.kp < 0.0 || self.ki < 0.0 || self.kd < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "PID gains must be non-negative, got {self:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.ktau) {
            return Err(Error::InvalidParameter(format!(
                "k_tau must lie in [0, 1], got {}",
                self.ktau
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.kp, self.ki, self.kd, self.ktau]
    }
}

/// One controller observation `o_t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Observation {
    /// First difference of the tracking error.
    pub d_e: f64,
    /// Sampling interval times the tracking error.
    pub i_e: f64,
    /// Negated filtered second difference of the measurement.
    pub neg_d2y: f64,
    /// Sampling interval times the previous saturation discrepancy `u_hat - u`.
    pub aw: f64,
    /// Previous applied input.
    pub u_prev: f64,
}

impl Observation {
    pub const LEN: usize = 5;

    /// The four terms multiplied by the gains.
    pub fn features(&self) -> [f64; 4] {
        [self.d_e, self.i_e, self.neg_d2y, self.aw]
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.d_e, self.i_e, self.neg_d2y, self.aw, self.u_prev]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            d_e: a[0],
            i_e: a[1],
            neg_d2y: a[2],
            aw: a[3],
            u_prev: a[4],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Memory of the incremental controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub e_prev: f64,
    pub dy_f_prev: f64,
    pub y_prev: f64,
    pub u_prev: f64,
    pub u_hat_prev: f64,
    /// Derivative filter constant in `[0, 1]`.
    pub t_f: f64,
    /// Sampling interval (s).
    pub dt: f64,
    /// False until the first measurement has seeded the difference memories.
    pub primed: bool,
}

impl PidState {
    /// Fresh state holding the actuator at `u0`.
    pub fn new(t_f: f64, dt: f64, u0: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t_f) {
            return Err(Error::InvalidParameter(format!("T_f must lie in [0, 1], got {t_f}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if !u0.is_finite() {
            return Err(Error::NonFinite("initial PID output"));
        }
        Ok(Self {
            e_prev: 0.0,
            dy_f_prev: 0.0,
            y_prev: 0.0,
            u_prev: u0,
            u_hat_prev: u0,
            t_f,
            dt,
            primed: false,
        })
    }

    /// Returns `(neg_d2y, dy_f)` for the new measurement `y_t`. Before the
    /// state is primed both are zero.
    pub fn filtered_second_difference(&self, y_t: f64) -> (f64, f64) {
        if !self.primed {
            return (0.0, 0.0);
        }
        let dy_f = self.t_f * self.dy_f_prev + (1.0 - self.t_f) * (y_t - self.y_prev) / self.dt;
        let d2y = (dy_f - self.dy_f_prev) / self.dt;
        (-d2y, dy_f)
    }

    pub fn compute_observation(&self, setpoint: f64, y_t: f64) -> Observation {
        let e = setpoint - y_t;
        let (neg_d2y, _) = self.filtered_second_difference(y_t);
        if !self.primed {
            return Observation {
                d_e: 0.0,
                i_e: self.dt * e,
                neg_d2y: 0.0,
                aw: 0.0,
                u_prev: self.u_prev,
            };
        }
        Observation {
            d_e: e - self.e_prev,
            i_e: self.dt * e,
            neg_d2y,
            aw: self.dt * (self.u_hat_prev - self.u_prev),
            u_prev: self.u_prev,
        }
    }

    /// State after the controller emitted `(u, u_hat)` for measurement `y_t`.
    pub fn advance(&self, setpoint: f64, y_t: f64, u: f64, u_hat: f64) -> Self {
        let (_, dy_f) = self.filtered_second_difference(y_t);
        Self {
            e_prev: setpoint - y_t,
            dy_f_prev: dy_f,
            y_prev: y_t,
            u_prev: u,
            u_hat_prev: u_hat,
            primed: true,
            ..*self
        }
    }
}

/// Unsaturated control proposal of the incremental law.
pub fn pid_law(gains: &PidGains, obs: &Observation) -> f64 {
    gains.kp * obs.d_e + gains.ki * obs.i_e + gains.kd * obs.neg_d2y + gains.ktau * obs.aw + obs.u_prev
}

/// Output of a single controller evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidOutput {
    pub u: f64,
    pub u_hat: f64,
    pub obs: Observation,
    pub state: PidState,
}

/// Evaluate the controller for one sample and return the saturated input,
/// the raw proposal and the advanced state.
pub fn pid_step(
    gains: &PidGains,
    state: &PidState,
    setpoint: f64,
    y_t: f64,
    u_min: f64,
    u_max: f64,
) -> PidOutput {
    debug_assert!(u_min < u_max);
    let obs = state.compute_observation(setpoint, y_t);
    let u_hat = pid_law(gains, &obs);
    let u = u_hat.clamp(u_min, u_max);
    PidOutput {
        u,
        u_hat,
        obs,
        state: state.advance(setpoint, y_t, u, u_hat),
    }
}

/// A PID loop bundling gains, memory and actuator limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidLoop {
    pub gains: PidGains,
    pub state: PidState,
    pub u_min: f64,
    pub u_max: f64,
}

impl PidLoop {
    pub fn new(gains: PidGains, state: PidState, u_min: f64, u_max: f64) -> Result<Self> {
        gains.validate()?;
        if !(u_min < u_max) {
            return Err(Error::InvalidParameter(format!(
                "u_min ({u_min}) must be below u_max ({u_max})"
            )));
        }
        Ok(Self {
            gains,
            state,
            u_min,
            u_max,
        })
    }

    pub fn step(&mut self, setpoint: f64, y_t: f64) -> PidOutput {
        let out = pid_step(&self.gains, &self.state, setpoint, y_t, self.u_min, self.u_max);
        self.state = out.state;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn primed(t_f: f64, dt: f64, y: f64, sp: f64, u: f64) -> PidState {
        PidState::new(t_f, dt, u).unwrap().advance(sp, y, u, u)
    }

    #[test]
    fn constant_measurement_has_no_derivative() {
        let mut s = PidState::new(0.1, 1.0, 0.0).unwrap();
        for _ in 0..50 {
            let (neg, _) = s.filtered_second_difference(3.0);
            assert_eq!(neg, 0.0);
            s = s.advance(3.0, 3.0, 0.0, 0.0);
        }
        assert_eq!(s.dy_f_prev, 0.0);
    }

    #[test]
    fn unfiltered_ramp() {
        let c = 0.7;
        let mut s = PidState::new(0.0, 0.5, 0.0).unwrap();
        let mut negs = vec![];
        for k in 0..6 {
            let y = c * 0.5 * k as f64;
            let (neg, _) = s.filtered_second_difference(y);
            negs.push(neg);
            s = s.advance(0.0, y, 0.0, 0.0);
            if k >= 1 {
                assert!((s.dy_f_prev - c).abs() < 1e-12);
            }
        }
        for neg in &negs[2..] {
            assert!(neg.abs() < 1e-12);
        }
    }

    #[test]
    fn hand_iterated_filter() {
        // T_f = 0.5, y = [0, 1, 1], dt = 1
        let mut s = PidState::new(0.5, 1.0, 0.0).unwrap();
        let mut dys = vec![];
        let mut last_neg = 0.0;
        for y in [0.0, 1.0, 1.0] {
            let (neg, dy) = s.filtered_second_difference(y);
            dys.push(dy);
            last_neg = neg;
            s = s.advance(0.0, y, 0.0, 0.0);
        }
        assert_eq!(dys, vec![0.0, 0.5, 0.25]);
        // second difference is -0.25, the observation carries its negation
        assert!((last_neg - 0.25).abs() < 1e-15);
    }

    #[test]
    fn observation_at_rest() {
        let s = primed(0.1, 1.0, 60.0, 60.0, 17.0);
        let o = s.compute_observation(60.0, 60.0);
        assert_eq!(o, Observation { d_e: 0.0, i_e: 0.0, neg_d2y: 0.0, aw: 0.0, u_prev: 17.0 });
    }

    #[test]
    fn setpoint_step_observation() {
        let dt = 2.0;
        let s = primed(0.1, dt, 60.0, 60.0, 17.0);
        let o = s.compute_observation(65.0, 60.0);
        assert_eq!(o.d_e, 5.0);
        assert_eq!(o.i_e, 5.0 * dt);
        assert_eq!(o.aw, 0.0);
    }

    #[test]
    fn first_sample_is_bumpless() {
        let s = PidState::new(0.1, 1.0, 12.0).unwrap();
        let o = s.compute_observation(65.0, 60.0);
        assert_eq!(o.d_e, 0.0);
        assert_eq!(o.neg_d2y, 0.0);
        assert_eq!(o.aw, 0.0);
        assert_eq!(o.i_e, 5.0);
        assert_eq!(o.u_prev, 12.0);
    }

    #[test]
    fn proportional_only_increment() {
        let g = PidGains::new(1.0, 0.0, 0.0, 0.0).unwrap();
        let obs = Observation { d_e: 2.0, i_e: 0.3, neg_d2y: -1.0, aw: 0.4, u_prev: 10.0 };
        assert_eq!(pid_law(&g, &obs), 12.0);
    }

    #[test]
    fn saturation_feeds_back_through_anti_windup() {
        let g = PidGains::new(10.0, 0.0, 0.0, 0.5).unwrap();
        let dt = 1.0;
        let s = primed(0.1, dt, 60.0, 60.0, 45.0);
        let out = pid_step(&g, &s, 65.0, 60.0, 0.0, 50.0);
        assert_eq!(out.u_hat, 95.0);
        assert_eq!(out.u, 50.0);
        let next = out.state.compute_observation(65.0, 60.0);
        // e^(u) = u_hat - u is positive above the upper limit
        assert_eq!(next.aw, dt * 45.0);
        assert_eq!(next.u_prev, 50.0);
    }

    #[test]
    fn schedule_initialization() {
        let g = PidGains::from_kp_schedule(4.0, 0.5);
        assert_eq!(g.kp, 4.0);
        assert!((g.ki - 4.0 / 60.0).abs() < 1e-15);
        assert!((g.kd - 0.04).abs() < 1e-15);
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(PidGains::new(-1.0, 0.0, 0.0, 0.0).is_err());
        assert!(PidGains::new(1.0, 0.0, 0.0, 1.5).is_err());
        assert!(PidState::new(1.5, 1.0, 0.0).is_err());
        assert!(PidState::new(0.1, 0.0, 0.0).is_err());
        let g = PidGains::new(1.0, 0.0, 0.0, 0.0).unwrap();
        let s = PidState::new(0.1, 1.0, 0.0).unwrap();
        assert!(PidLoop::new(g, s, 1.0, 1.0).is_err());
    }

    /// Positional-form PID computed from scratch: `u0 + kp (e_t - e_0) +
    /// ki dt sum(e) - kd dy_f_t / dt`.
    fn positional_oracle(kp: f64, ki: f64, kd: f64, t_f: f64, dt: f64, u0: f64, sp: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![];
        let mut sum_e = 0.0;
        let mut dy_f = 0.0;
        let e0 = sp[0] - y[0];
        for t in 0..y.len() {
            let e = sp[t] - y[t];
            sum_e += e;
            if t > 0 {
                dy_f = t_f * dy_f + (1.0 - t_f) * (y[t] - y[t - 1]) / dt;
            }
            out.push(u0 + kp * (e - e0) + ki * dt * sum_e - kd * dy_f / dt);
        }
        out
    }

    proptest! {
        #[test]
        fn incremental_matches_positional(
            kp in 0.0..5.0f64, ki in 0.0..1.0f64, kd in 0.0..3.0f64,
            t_f in 0.0..1.0f64, dt in 0.1..2.0f64,
            y in prop::collection::vec(-10.0..10.0f64, 100),
            sp in prop::collection::vec(-10.0..10.0f64, 100),
        ) {
            let g = PidGains::new(kp, ki, kd, 0.0).unwrap();
            let mut lp = PidLoop::new(g, PidState::new(t_f, dt, 1.0).unwrap(), -1e12, 1e12).unwrap();
            let reference = positional_oracle(kp, ki, kd, t_f, dt, 1.0, &sp, &y);
            for t in 0..y.len() {
                let out = lp.step(sp[t], y[t]);
                let tol = 1e-9 * (1.0 + reference[t].abs());
                prop_assert!((out.u - reference[t]).abs() < tol, "t={} {} vs {}", t, out.u, reference[t]);
            }
        }

        #[test]
        fn law_is_affine_in_gains(
            o in prop::array::uniform5(-10.0..10.0f64),
            g in prop::array::uniform4(0.0..1.0f64),
        ) {
            let obs = Observation::from_array(o);
            let gains = PidGains { kp: g[0], ki: g[1], kd: g[2], ktau: g[3] };
            let zero = PidGains { kp: 0.0, ki: 0.0, kd: 0.0, ktau: 0.0 };
            prop_assert_eq!(pid_law(&zero, &obs), obs.u_prev);
            let basis = [
                PidGains { kp: 1.0, ..zero }, PidGains { ki: 1.0, ..zero },
                PidGains { kd: 1.0, ..zero }, PidGains { ktau: 1.0, ..zero },
            ];
            let mut expected = obs.u_prev;
            for (b, gk) in basis.iter().zip(g) {
                let coef = pid_law(b, &obs) - obs.u_prev;
                expected += gk * coef;
            }
            prop_assert!((pid_law(&gains, &obs) - expected).abs() < 1e-9);
        }

        #[test]
        fn output_within_limits(
            o in prop::array::uniform5(-100.0..100.0f64),
            lo in -50.0..0.0f64, width in 0.1..100.0f64,
        ) {
            let g = PidGains::new(2.0, 0.1, 0.5, 0.5).unwrap();
            let s = PidState { u_prev: o[4], u_hat_prev: o[3], ..PidState::new(0.1, 1.0, 0.0).unwrap() };
            let out = pid_step(&g, &s, o[0], o[1], lo, lo + width);
            prop_assert!(out.u >= lo && out.u <= lo + width);
            prop_assert!(out.u_hat.is_finite());
        }
    }
}
