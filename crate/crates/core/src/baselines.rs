//! First-order-plus-dead-time identification and SIMC PI tuning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pid::PidGains;

/// `G(s) = k e^{-theta_d s} / (tau1 s + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FopdtModel {
    pub k: f64,
    pub tau1: f64,
    pub theta_d: f64,
}

impl FopdtModel {
    /// Model identified on the lab apparatus (flow setpoint → level).
    pub const LAB: FopdtModel = FopdtModel {
        k: 3.44,
        tau1: 301.19,
        theta_d: 9.21,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.theta_d >= 0.0 && self.k.is_finite()) {
            return Err(Error::InvalidParameter(format!("invalid FOPDT model {self:?}")));
        }
        Ok(())
    }

    /// Response at `t` to a unit step applied at time 0.
    pub fn step_response(&self, t: f64) -> f64 {
        if t <= self.theta_d {
            0.0
        } else {
            self.k * (1.0 - (-(t - self.theta_d) / self.tau1).exp())
        }
    }
}

/// Options for [`fit_fopdt_with`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitOptions {
    /// Refine the two-point estimate by Gauss-Newton least squares on the
    /// whole post-step response.
    pub least_squares: bool,
}

/// Two-point (28.3 % / 63.2 %) FOPDT fit to a single step in `u`.
pub fn fit_fopdt(times: &[f64], u: &[f64], y: &[f64]) -> Result<FopdtModel> {
    fit_fopdt_with(times, u, y, FitOptions::default())
}

pub fn fit_fopdt_with(times: &[f64], u: &[f64], y: &[f64], opts: FitOptions) -> Result<FopdtModel> {
    let n = times.len();
    if u.len() != n || y.len() != n {
        return Err(Error::Dimension { expected: n, got: u.len().min(y.len()) });
    }
    if n < 10 {
        return Err(Error::NotSettled("too few samples".into()));
    }
    let step_idx = (1..n)
        .find(|&i| (u[i] - u[0]).abs() > 1e-12 * u[0].abs().max(1.0))
        .ok_or_else(|| Error::InvalidParameter("no step in the input".into()))?;
    let t_step = times[step_idx];
    let du = u[step_idx] - u[0];
    let y0 = y[step_idx - 1];

    let tail_start = n - (n / 10).max(1);
    let tail = &y[tail_start..];
    let y_end = tail.iter().sum::<f64>() / tail.len() as f64;
    let dy = y_end - y0;
    if dy == 0.0 || !dy.is_finite() {
        return Err(Error::NotSettled("no output change".into()));
    }
    let (lo, hi) = tail
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo > 0.01 * dy.abs() {
        return Err(Error::NotSettled(format!(
            "last 10% of samples vary by {:.4} (> 1% of {:.4})",
            hi - lo,
            dy.abs()
        )));
    }

    let crossing = |frac: f64| -> Result<f64> {
        let level = frac * dy;
        let mut prev = 0.0;
        for i in step_idx..n {
            let cur = y[i] - y0;
            if cur * dy.signum() >= level * dy.signum() {
                if i == step_idx {
                    return Ok(times[i] - t_step);
                }
                let w = (level - prev) / (cur - prev);
                return Ok(times[i - 1] + w * (times[i] - times[i - 1]) - t_step);
            }
            prev = cur;
        }
        Err(Error::NotSettled(format!("response never reaches {:.1}%", 100.0 * frac)))
    };
    // 1 - e^{-1/3} and 1 - e^{-1}, for which tau1 = 1.5 (t63 - t28) is exact
    let t28 = crossing(1.0 - (-1.0f64 / 3.0).exp())?;
    let t63 = crossing(1.0 - (-1.0f64).exp())?;
    let tau1 = 1.5 * (t63 - t28);
    if !(tau1 > 0.0) {
        return Err(Error::NotSettled("degenerate rise".into()));
    }
    let mut model = FopdtModel {
        k: dy / du,
        tau1,
        theta_d: (t63 - tau1).max(0.0),
    };
    if opts.least_squares {
        model = refine_least_squares(model, &times[step_idx - 1..], y0, du, t_step, &y[step_idx - 1..]);
    }
    Ok(model)
}

fn refine_least_squares(init: FopdtModel, times: &[f64], y0: f64, du: f64, t_step: f64, y: &[f64]) -> FopdtModel {
    let residuals = |m: &FopdtModel| -> Vec<f64> {
        times
            .iter()
            .zip(y)
            .map(|(&t, &v)| v - y0 - du * m.step_response(t - t_step))
            .collect()
    };
    let sse = |m: &FopdtModel| residuals(m).iter().map(|r| r * r).sum::<f64>();
    let mut model = init;
    let mut lambda = 1e-3;
    for _ in 0..50 {
        let r = residuals(&model);
        let p = [model.k, model.tau1, model.theta_d];
        // numerical Jacobian of the residuals
        let mut jac = vec![[0.0; 3]; r.len()];
        for j in 0..3 {
            let h = 1e-6 * p[j].abs().max(1e-3);
            let mut q = p;
            q[j] += h;
            let m = FopdtModel { k: q[0], tau1: q[1], theta_d: q[2] };
            for (row, (rp, r0)) in jac.iter_mut().zip(residuals(&m).iter().zip(&r)) {
                row[j] = (rp - r0) / h;
            }
        }
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (row, ri) in jac.iter().zip(&r) {
            for a in 0..3 {
                jtr[a] += row[a] * ri;
                for b in 0..3 {
                    jtj[a][b] += row[a] * row[b];
                }
            }
        }
        for (a, row) in jtj.iter_mut().enumerate() {
            row[a] *= 1.0 + lambda;
        }
        let Some(delta) = solve3(jtj, jtr) else { break };
        let cand = FopdtModel {
            k: p[0] - delta[0],
            tau1: (p[1] - delta[1]).max(1e-6),
            theta_d: (p[2] - delta[2]).max(0.0),
        };
        if sse(&cand) < sse(&model) {
            model = cand;
            lambda *= 0.3;
        } else {
            lambda *= 10.0;
        }
    }
    model
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    if d.abs() < 1e-300 {
        return None;
    }
    let mut x = [0.0; 3];
    for (i, xi) in x.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][i] = b[r];
        }
        *xi = det(m) / d;
    }
    Some(x)
}

/// Anti-windup gain attached to SIMC gains (the rule itself is PI only).
pub const SIMC_KTAU: f64 = 0.5;

/// SIMC PI rule: `k_p = tau1 / (k (tc + theta_d))`,
/// `T_i = min(tau1, 4 (tc + theta_d))`.
pub fn simc_pi(model: &FopdtModel, tc: f64) -> Result<PidGains> {
    model.validate()?;
    if !(tc > 0.0) {
        return Err(Error::InvalidParameter(format!("closed-loop time constant must be positive, got {tc}")));
    }
    let kp = model.tau1 / (model.k * (tc + model.theta_d));
    let ti = model.tau1.min(4.0 * (tc + model.theta_d));
    Ok(PidGains {
        kp,
        ki: kp / ti,
        kd: 0.0,
        ktau: SIMC_KTAU,
    })
}

/// Closed-loop time constants evaluated for the baseline rows.
pub const SIMC_TC_GRID: [f64; 5] = [9.21, 15.0, 20.0, 25.0, 30.0];

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic(model: &FopdtModel, du: f64, dt: f64, horizon: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let pre = 10;
        let n = pre + (horizon / dt) as usize;
        let mut t = vec![];
        let mut u = vec![];
        let mut y = vec![];
        for i in 0..n {
            let ti = i as f64 * dt;
            let ts = ti - pre as f64 * dt;
            t.push(ti);
            u.push(if i >= pre { 2.0 + du } else { 2.0 });
            y.push(50.0 + du * model.step_response(ts));
        }
        (t, u, y)
    }

    #[test]
    fn recovers_lab_model() {
        let m = FopdtModel::LAB;
        let (t, u, y) = synthetic(&m, 1.0, 1.0, 3000.0);
        let fit = fit_fopdt(&t, &u, &y).unwrap();
        assert!((fit.k / m.k - 1.0).abs() < 0.02);
        assert!((fit.tau1 / m.tau1 - 1.0).abs() < 0.02);
        assert!((fit.theta_d / m.theta_d - 1.0).abs() < 0.02, "{fit:?}");
    }

    #[test]
    fn first_order_data_has_no_dead_time() {
        let m = FopdtModel { k: 2.0, tau1: 120.0, theta_d: 0.0 };
        let (t, u, y) = synthetic(&m, 1.0, 1.0, 1500.0);
        let fit = fit_fopdt(&t, &u, &y).unwrap();
        assert!(fit.theta_d <= 2.0);
    }

    #[test]
    fn step_size_is_normalized_out() {
        let m = FopdtModel { k: 1.7, tau1: 200.0, theta_d: 12.0 };
        let (t, u, y) = synthetic(&m, 1.5, 1.0, 2500.0);
        let (t2, u2, y2) = synthetic(&m, 3.0, 1.0, 2500.0);
        let a = fit_fopdt(&t, &u, &y).unwrap();
        let b = fit_fopdt(&t2, &u2, &y2).unwrap();
        assert!((a.k - b.k).abs() < 1e-6);
        assert!((a.tau1 - b.tau1).abs() < 1e-6);
        assert!((a.theta_d - b.theta_d).abs() < 1e-6);
    }

    #[test]
    fn unsettled_response_rejected() {
        let m = FopdtModel { k: 1.0, tau1: 500.0, theta_d: 5.0 };
        let (t, u, y) = synthetic(&m, 1.0, 1.0, 600.0);
        assert!(matches!(fit_fopdt(&t, &u, &y), Err(Error::NotSettled(_))));
    }

    #[test]
    fn least_squares_refinement_keeps_exact_fit() {
        let m = FopdtModel { k: 3.0, tau1: 150.0, theta_d: 7.5 };
        let (t, u, y) = synthetic(&m, 1.0, 1.0, 1500.0);
        let fit = fit_fopdt_with(&t, &u, &y, FitOptions { least_squares: true }).unwrap();
        assert!((fit.k / m.k - 1.0).abs() < 1e-3);
        assert!((fit.tau1 / m.tau1 - 1.0).abs() < 1e-3);
        assert!((fit.theta_d - m.theta_d).abs() < 0.05);
    }

    #[test]
    fn two_point_is_accurate_across_the_model_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = FopdtModel {
                k: rng.random_range(1.0..10.0),
                tau1: rng.random_range(50.0..500.0),
                theta_d: rng.random_range(0.0..30.0),
            };
            let (t, u, y) = synthetic(&m, 1.0, 1.0, 12.0 * m.tau1 + m.theta_d);
            let fit = fit_fopdt(&t, &u, &y).unwrap();
            assert!((fit.k / m.k - 1.0).abs() < 0.02, "{m:?} {fit:?}");
            assert!((fit.tau1 / m.tau1 - 1.0).abs() < 0.02, "{m:?} {fit:?}");
            // relative tolerance on the dead time, with a floor for tiny delays
            assert!((fit.theta_d - m.theta_d).abs() < (0.02 * m.theta_d).max(0.05), "{m:?} {fit:?}");
        }
    }

    #[test]
    fn simc_fixture_on_lab_model() {
        let g = simc_pi(&FopdtModel::LAB, 20.0).unwrap();
        // tau1 / (k (tc + theta)) = 301.19 / (3.44 * 29.21)
        assert!((g.kp - 2.99743).abs() < 1e-4, "{}", g.kp);
        // T_i = min(301.19, 116.84)
        assert!((g.ki - g.kp / 116.84).abs() < 1e-12);
        assert!((g.ki - 0.025654).abs() < 1e-5);
        assert_eq!(g.kd, 0.0);
    }

    #[test]
    fn simc_is_monotone_in_tc() {
        let mut last = f64::INFINITY;
        for tc in SIMC_TC_GRID {
            let g = simc_pi(&FopdtModel::LAB, tc).unwrap();
            assert!(g.kp < last);
            last = g.kp;
        }
        assert!(simc_pi(&FopdtModel::LAB, 0.0).is_err());
    }
}
