//! Twin-delayed actor-critic trainer whose actor is the incremental PID law.
//!
//! The actor's trainable weights are the gains mapped through inverse
//! softplus (`k_p`, `k_i`, `k_d`) and inverse sigmoid (`k_tau`), so every
//! parameter vector decodes to a valid controller. Critics are GRU sequence
//! networks over the stacked observation history. Experience comes from
//! logged process data, not from an environment interface.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::{debug, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{read_tensors, write_tensors, Activation, AdamState, SequenceNet, SequenceTape, Tensor};
use crate::pid::{pid_law, Observation, PidGains, PidState};
use crate::plant::LogRecord;
use crate::reward::RewardSpec;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `k > 0`.
pub fn softplus_inv(k: f64) -> f64 {
    k + (-(-k).exp_m1()).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Unconstrained actor weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorParams {
    pub theta_kp: f64,
    pub theta_ki: f64,
    pub theta_kd: f64,
    pub theta_ktau: f64,
}

impl ActorParams {
    pub fn as_array(&self) -> [f64; 4] {
        [self.theta_kp, self.theta_ki, self.theta_kd, self.theta_ktau]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { theta_kp: a[0], theta_ki: a[1], theta_kd: a[2], theta_ktau: a[3] }
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

pub fn gains_to_theta(g: &PidGains) -> Result<ActorParams> {
    for (name, k) in [("k_p", g.kp), ("k_i", g.ki), ("k_d", g.kd)] {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::GainDomain(format!("{name} = {k} must be > 0")));
        }
    }
    if !(g.ktau > 0.0 && g.ktau < 1.0) {
        return Err(Error::GainDomain(format!("k_tau = {} must lie in (0, 1)", g.ktau)));
    }
    Ok(ActorParams {
        theta_kp: softplus_inv(g.kp),
        theta_ki: softplus_inv(g.ki),
        theta_kd: softplus_inv(g.kd),
        theta_ktau: logit(g.ktau),
    })
}

pub fn theta_to_gains(theta: &ActorParams) -> PidGains {
    PidGains {
        kp: softplus(theta.theta_kp),
        ki: softplus(theta.theta_ki),
        kd: softplus(theta.theta_kd),
        ktau: sigmoid(theta.theta_ktau),
    }
}

/// `d(gain) / d(theta)` for each of the four weights.
pub fn reparameterization_jacobian(theta: &ActorParams) -> [f64; 4] {
    let s = sigmoid(theta.theta_ktau);
    [sigmoid(theta.theta_kp), sigmoid(theta.theta_ki), sigmoid(theta.theta_kd), s * (1.0 - s)]
}

/// Stacked observation history `[o_{t-d}, ..., o_t]`, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlState {
    pub obs: Vec<Observation>,
}

impl RlState {
    pub fn new(obs: Vec<Observation>) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::InvalidParameter("state needs at least one observation".into()));
        }
        Ok(Self { obs })
    }

    pub fn latest(&self) -> &Observation {
        self.obs.last().expect("non-empty by construction")
    }

    pub fn history(&self) -> usize {
        self.obs.len() - 1
    }
}

/// Unsaturated actor output: the PID law on the most recent observation.
pub fn actor_forward(theta: &ActorParams, s: &RlState) -> f64 {
    pid_law(&theta_to_gains(theta), s.latest())
}

/// `d u_hat / d theta` on observation `o`.
pub fn actor_jacobian(theta: &ActorParams, o: &Observation) -> [f64; 4] {
    let j = reparameterization_jacobian(theta);
    let f = o.features();
    [j[0] * f[0], j[1] * f[1], j[2] * f[2], j[3] * f[3]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: RlState,
    pub u: f64,
    pub r: f64,
    pub s_next: RlState,
    pub terminal: bool,
}

/// Settings for rebuilding transitions from logged rows.
#[derive(Debug, Clone)]
pub struct TransitionBuilder {
    pub reward: RewardSpec,
    pub history: usize,
    /// Derivative filter constant of the logged controller.
    pub t_f: f64,
    /// Control interval of the log.
    pub dt: f64,
}

impl TransitionBuilder {
    pub fn stream(&self) -> TransitionStream {
        TransitionStream {
            cfg: self.clone(),
            state: None,
            last_t: f64::NAN,
            recent: VecDeque::new(),
            pending: None,
        }
    }

    /// All transitions of a complete log.
    pub fn build(&self, rows: &[LogRecord]) -> Result<Vec<Transition>> {
        let mut st = self.stream();
        let mut out = Vec::new();
        for r in rows {
            out.extend(st.feed(r)?);
        }
        out.extend(st.flush());
        Ok(out)
    }
}

/// Incremental transition reconstruction.
///
/// Rows form one continuous controller run until the timestamps jump by more
/// than 1.5 control intervals; the first row of a run only seeds the
/// controller memory. A transition at row `t` needs rows `t` and `t+1` from
/// the same episode and is terminal when row `t+2` belongs to another episode
/// or the run ends, so it is released one row late.
#[derive(Debug, Clone)]
pub struct TransitionStream {
    cfg: TransitionBuilder,
    state: Option<PidState>,
    last_t: f64,
    recent: VecDeque<(Observation, LogRecord)>,
    pending: Option<(Transition, u32)>,
}

impl TransitionStream {
    pub fn feed(&mut self, row: &LogRecord) -> Result<Option<Transition>> {
        let mut released = None;
        let gap = row.t_s - self.last_t;
        if self.state.is_some() && !(gap > 0.0 && gap <= 1.5 * self.cfg.dt) {
            released = self.flush();
        }
        self.last_t = row.t_s;
        let Some(state) = self.state else {
            let seed = PidState::new(self.cfg.t_f, self.cfg.dt, row.u)?;
            self.state = Some(seed.advance(row.level_sp_cm, row.level_cm, row.u, row.u_hat));
            return Ok(released);
        };
        let o = state.compute_observation(row.level_sp_cm, row.level_cm);
        if !o.is_finite() || !row.u.is_finite() {
            return Err(Error::NonFinite("logged process data"));
        }
        self.state = Some(state.advance(row.level_sp_cm, row.level_cm, row.u, row.u_hat));
        if let Some((mut t, ep)) = self.pending.take() {
            t.terminal = row.episode_id != ep;
            debug_assert!(released.is_none());
            released = Some(t);
        }
        let d = self.cfg.history;
        self.recent.push_back((o, *row));
        if self.recent.len() > d + 2 {
            self.recent.pop_front();
        }
        if self.recent.len() == d + 2 {
            let (o_t, row_t) = self.recent[d];
            if row_t.episode_id == row.episode_id {
                let obs: Vec<Observation> = self.recent.iter().map(|(o, _)| *o).collect();
                let e = row_t.level_sp_cm - row_t.level_cm;
                let r = self.cfg.reward.reward(e, row_t.u - o_t.u_prev);
                if !r.is_finite() {
                    return Err(Error::NonFinite("reward"));
                }
                let t = Transition {
                    s: RlState { obs: obs[..=d].to_vec() },
                    u: row_t.u,
                    r,
                    s_next: RlState { obs: obs[1..].to_vec() },
                    terminal: false,
                };
                self.pending = Some((t, row_t.episode_id));
            }
        }
        Ok(released)
    }

    /// Ends the current run, releasing its last transition as terminal.
    pub fn flush(&mut self) -> Option<Transition> {
        self.state = None;
        self.recent.clear();
        self.pending.take().map(|(mut t, _)| {
            t.terminal = true;
            t
        })
    }
}

/// Fixed-capacity ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParameter("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform batch of distinct items.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&Transition>> {
        if n > self.items.len() {
            return Err(Error::InvalidParameter(format!("batch {n} exceeds replay size {}", self.items.len())));
        }
        Ok(sample(rng, self.items.len(), n).into_iter().map(|i| &self.items[i]).collect())
    }
}

/// Fixed input/output scaling of the critics. The action enters as its
/// increment over the previous input, which is what the stage cost sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub hidden: usize,
    pub layers: Vec<usize>,
    /// Hidden-layer activation of the dense head.
    pub activation: Activation,
    /// Divisors for `d_e, i_e, neg_d2y, aw`.
    pub feature_scale: [f64; 4],
    pub u_center: f64,
    pub u_scale: f64,
    pub du_scale: f64,
    /// Multiplier on the network output.
    pub q_scale: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            layers: vec![64, 64],
            activation: Activation::Relu,
            feature_scale: [1.0, 1.0, 0.1, 1.0],
            u_center: 35.0,
            u_scale: 20.0,
            du_scale: 5.0,
            q_scale: 100.0,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        let scales = self.feature_scale.iter().chain([&self.u_scale, &self.du_scale, &self.q_scale]);
        if self.hidden == 0 || self.layers.contains(&0) || scales.clone().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("invalid critic config {self:?}")));
        }
        if !self.u_center.is_finite() {
            return Err(Error::NonFinite("critic u_center"));
        }
        Ok(())
    }
}

/// `Q(s, a)` approximator.
#[derive(Debug, Clone)]
pub struct Critic {
    pub net: SequenceNet,
    pub cfg: CriticConfig,
}

impl Critic {
    pub fn new(cfg: &CriticConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut sizes = cfg.layers.clone();
        sizes.push(1);
        let mut acts = vec![cfg.activation; cfg.layers.len()];
        acts.push(Activation::Identity);
        let net = SequenceNet::new(Observation::LEN, cfg.hidden, 1, &sizes, &acts, rng)?;
        Ok(Self { net, cfg: cfg.clone() })
    }

    fn encode(&self, s: &RlState, a: f64) -> (Vec<Vec<f64>>, [f64; 1]) {
        let c = &self.cfg;
        let seq = s
            .obs
            .iter()
            .map(|o| {
                let f = o.features();
                let mut v: Vec<f64> = f.iter().zip(&c.feature_scale).map(|(x, k)| x / k).collect();
                v.push((o.u_prev - c.u_center) / c.u_scale);
                v
            })
            .collect();
        (seq, [(a - s.latest().u_prev) / c.du_scale])
    }

    pub fn q(&self, s: &RlState, a: f64) -> Result<f64> {
        Ok(self.forward(s, a)?.0)
    }

    pub fn forward(&self, s: &RlState, a: f64) -> Result<(f64, SequenceTape)> {
        let (seq, extra) = self.encode(s, a);
        let tape = self.net.forward(&seq, &extra)?;
        Ok((self.cfg.q_scale * tape.output()[0], tape))
    }

    /// Adds `weight * dQ/dphi` into `grad` and returns `dQ/da`.
    pub fn backward(&self, tape: &SequenceTape, weight: f64, grad: &mut [f64]) -> Result<f64> {
        let g = self.net.backward_into(tape, &[weight * self.cfg.q_scale], grad)?;
        Ok(if weight == 0.0 { 0.0 } else { g.dextra[0] / (weight * self.cfg.du_scale) })
    }

    /// `(Q, dQ/da)` without touching parameter gradients.
    pub fn action_gradient(&self, s: &RlState, a: f64) -> Result<(f64, f64)> {
        let (q, tape) = self.forward(s, a)?;
        let mut scratch = vec![0.0; self.net.param_len()];
        Ok((q, self.backward(&tape, 1.0, &mut scratch)?))
    }

    pub fn param_len(&self) -> usize {
        self.net.param_len()
    }

    pub fn params(&self) -> Vec<f64> {
        self.net.params()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        self.net.set_params(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Td3Config {
    pub gamma: f64,
    pub rho: f64,
    pub sigma: f64,
    pub noise_clip: f64,
    pub policy_delay: u64,
    /// Critic-only updates before the actor starts moving.
    pub actor_warmup: u64,
    pub batch_size: usize,
    pub actor_lr: f64,
    /// Adam denominator floor for the actor. Gains whose gradient stays far
    /// below it move proportionally slower instead of at the full step size.
    pub actor_eps: f64,
    pub critic_lr: f64,
    /// `None` runs one update per newly ingested transition.
    pub updates_per_round: Option<usize>,
    pub history: usize,
    pub u_min: f64,
    pub u_max: f64,
    pub use_inverting_gradients: bool,
    /// Treat episode ends as true terminals (`q = r`). When false, the
    /// episode timer is a time limit and targets still bootstrap.
    pub cut_bootstrap_at_terminal: bool,
    pub replay_capacity: usize,
    pub critic: CriticConfig,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            gamma: 0.995,
            rho: 0.95,
            sigma: 0.05,
            noise_clip: 1.0,
            policy_delay: 2,
            actor_warmup: 0,
            batch_size: 64,
            actor_lr: 3e-3,
            actor_eps: 1e-2,
            critic_lr: 3e-3,
            updates_per_round: Some(1000),
            history: 2,
            u_min: 0.0,
            u_max: 300.0,
            use_inverting_gradients: false,
            cut_bootstrap_at_terminal: false,
            replay_capacity: 100_000,
            critic: CriticConfig::default(),
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.sigma >= 0.0 && self.noise_clip >= 0.0) {
            return bad("sigma and noise_clip must be >= 0".into());
        }
        if self.policy_delay == 0 || self.batch_size == 0 || self.replay_capacity == 0 {
            return bad("policy_delay, batch_size and replay_capacity must be positive".into());
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.actor_eps > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.u_min < self.u_max) {
            return bad(format!("u_min ({}) must be below u_max ({})", self.u_min, self.u_max));
        }
        self.critic.validate()
    }
}

/// Inverting-gradient scaling: shrinks an action gradient as the action
/// nears the bound it points at, and reverses it past that bound.
pub fn invert_gradient(g: f64, u: f64, u_min: f64, u_max: f64) -> f64 {
    let span = u_max - u_min;
    if g > 0.0 {
        g * (u_max - u) / span
    } else {
        g * (u - u_min) / span
    }
}

/// `target <- rho * target + (1 - rho) * online`.
pub fn polyak(target: &mut [f64], online: &[f64], rho: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::Dimension { expected: target.len(), got: online.len() });
    }
    for (t, o) in target.iter_mut().zip(online) {
        *t = rho * *t + (1.0 - rho) * o;
    }
    Ok(())
}

/// Smoothed target action.
pub fn target_action(
    theta_target: &ActorParams,
    s_next: &RlState,
    sigma: f64,
    noise_clip: f64,
    u_min: f64,
    u_max: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mu = actor_forward(theta_target, s_next);
    let eps = if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("sigma checked").sample(rng).clamp(-noise_clip, noise_clip)
    } else {
        0.0
    };
    (mu + eps).clamp(u_min, u_max)
}

/// Gradient of the actor loss `-(1/N) sum Q(s, mu(s))` with respect to theta,
/// assembled from observation features, the reparameterization Jacobian and
/// the critic's action gradient.
pub fn actor_loss_gradient(
    theta: &ActorParams,
    critic: &Critic,
    batch: &[&Transition],
    cfg: &Td3Config,
) -> Result<([f64; 4], f64)> {
    let n = batch.len() as f64;
    let mut grad = [0.0; 4];
    let mut mean_q = 0.0;
    for t in batch {
        let a = actor_forward(theta, &t.s);
        let (q, mut g) = critic.action_gradient(&t.s, a)?;
        if cfg.use_inverting_gradients {
            g = invert_gradient(g, a, cfg.u_min, cfg.u_max);
        }
        let j = actor_jacobian(theta, t.s.latest());
        for k in 0..4 {
            grad[k] -= g * j[k] / n;
        }
        mean_q += q / n;
    }
    Ok((grad, mean_q))
}

/// Per-round training summary.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub critic_updates: usize,
    pub actor_updates: usize,
    pub critic_loss: f64,
    pub actor_q: f64,
    pub skipped_actor_updates: usize,
    pub aborted: bool,
    pub gains: Option<PidGains>,
}

/// Full trainer state.
#[derive(Debug, Clone)]
pub struct Td3Agent {
    pub cfg: Td3Config,
    pub theta: ActorParams,
    pub theta_target: ActorParams,
    pub critics: [Critic; 2],
    pub critic_targets: [Critic; 2],
    pub actor_adam: AdamState,
    pub critic_adam: [AdamState; 2],
    pub replay: ReplayMemory,
    pub rng: ChaCha8Rng,
    /// Update steps taken so far; actor updates happen when this is a
    /// multiple of the policy delay.
    pub updates: u64,
}

impl Td3Agent {
    pub fn new(cfg: Td3Config, initial: &PidGains, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let theta = gains_to_theta(initial)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c1 = Critic::new(&cfg.critic, &mut rng)?;
        let c2 = Critic::new(&cfg.critic, &mut rng)?;
        let n = c1.param_len();
        Ok(Self {
            theta,
            theta_target: theta,
            critic_targets: [c1.clone(), c2.clone()],
            critics: [c1, c2],
            actor_adam: AdamState { eps: cfg.actor_eps, ..AdamState::new(4, cfg.actor_lr) },
            critic_adam: [AdamState::new(n, cfg.critic_lr), AdamState::new(n, cfg.critic_lr)],
            replay: ReplayMemory::new(cfg.replay_capacity)?,
            rng,
            updates: 0,
            cfg,
        })
    }

    pub fn gains(&self) -> PidGains {
        theta_to_gains(&self.theta)
    }

    pub fn ingest(&mut self, transitions: Vec<Transition>) -> usize {
        let n = transitions.len();
        for t in transitions {
            self.replay.push(t);
        }
        n
    }

    /// One gradient step on both critics; returns the mean loss.
    pub fn critic_update(&mut self, batch: &[&Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        let cfg = &self.cfg;
        let n = batch.len() as f64;
        let mut targets = Vec::with_capacity(batch.len());
        for t in batch {
            let q = if t.terminal && cfg.cut_bootstrap_at_terminal {
                t.r
            } else {
                let a = target_action(
                    &self.theta_target,
                    &t.s_next,
                    cfg.sigma,
                    cfg.noise_clip,
                    cfg.u_min,
                    cfg.u_max,
                    &mut self.rng,
                );
                let q1 = self.critic_targets[0].q(&t.s_next, a)?;
                let q2 = self.critic_targets[1].q(&t.s_next, a)?;
                t.r + cfg.gamma * q1.min(q2)
            };
            targets.push(q);
        }
        let mut grads = [vec![0.0; self.critics[0].param_len()], vec![0.0; self.critics[1].param_len()]];
        let mut loss = 0.0;
        for (i, critic) in self.critics.iter().enumerate() {
            for (t, q_target) in batch.iter().zip(&targets) {
                let (q, tape) = critic.forward(&t.s, t.u)?;
                let w = -2.0 * (q_target - q) / n;
                critic.backward(&tape, w, &mut grads[i])?;
                loss += (q_target - q).powi(2) / n / 2.0;
            }
        }
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("critic loss"));
        }
        for (i, critic) in self.critics.iter_mut().enumerate() {
            let adam = &mut self.critic_adam[i];
            let g = &grads[i];
            adam.tick();
            let mut res = Ok(());
            critic.net.update(|p, range| {
                if res.is_ok() {
                    res = adam.apply(p, &g[range.clone()], range);
                }
            });
            res?;
        }
        Ok(loss)
    }

    /// One ascent step of the actor on the first critic. Returns the batch
    /// mean of `Q`, or `None` when the step was skipped.
    pub fn actor_update(&mut self, batch: &[&Transition]) -> Result<Option<f64>> {
        if batch.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        let (grad, mean_q) = actor_loss_gradient(&self.theta, &self.critics[0], batch, &self.cfg)?;
        if grad.iter().any(|g| !g.is_finite()) {
            warn!("non-finite actor gradient; update skipped");
            return Ok(None);
        }
        let mut p = self.theta.as_array();
        self.actor_adam.step(&mut p, &grad)?;
        let next = ActorParams::from_array(p);
        let g = theta_to_gains(&next);
        if !next.is_finite() || !(g.kp > 0.0 && g.ki > 0.0 && g.kd > 0.0 && g.ktau > 0.0 && g.ktau < 1.0) {
            warn!("actor update left the gain domain; update skipped");
            return Ok(None);
        }
        self.theta = next;
        Ok(Some(mean_q))
    }

    pub fn update_targets(&mut self) -> Result<()> {
        let rho = self.cfg.rho;
        for i in 0..2 {
            let mut t = self.critic_targets[i].params();
            polyak(&mut t, &self.critics[i].params(), rho)?;
            self.critic_targets[i].set_params(&t)?;
        }
        let mut t = self.theta_target.as_array();
        polyak(&mut t, &self.theta.as_array(), rho)?;
        self.theta_target = ActorParams::from_array(t);
        Ok(())
    }

    /// Runs `updates` iterations of sample → critic step → (delayed) actor
    /// step and target averaging.
    pub fn train_round(&mut self, updates: usize) -> Result<RoundDiagnostics> {
        let mut diag = RoundDiagnostics::default();
        if self.replay.len() < self.cfg.batch_size {
            warn!("replay holds {} transitions, need {}; skipping round", self.replay.len(), self.cfg.batch_size);
            diag.gains = Some(self.gains());
            return Ok(diag);
        }
        let mut loss_sum = 0.0;
        let mut q_sum = 0.0;
        for _ in 0..updates {
            let idx = sample(&mut self.rng, self.replay.len(), self.cfg.batch_size).into_vec();
            let replay = std::mem::replace(&mut self.replay, ReplayMemory::new(1)?);
            let batch: Vec<&Transition> = idx.iter().map(|&i| &replay.items[i]).collect();
            let step = self.critic_update(&batch).and_then(|loss| {
                self.updates += 1;
                let mut q = None;
                if self.updates % self.cfg.policy_delay == 0 {
                    if self.updates > self.cfg.actor_warmup {
                        q = Some(self.actor_update(&batch)?);
                    }
                    self.update_targets()?;
                }
                Ok((loss, q))
            });
            drop(batch);
            self.replay = replay;
            match step {
                Ok((loss, q)) => {
                    diag.critic_updates += 1;
                    loss_sum += loss;
                    match q {
                        Some(Some(q)) => {
                            diag.actor_updates += 1;
                            q_sum += q;
                        }
                        Some(None) => diag.skipped_actor_updates += 1,
                        None => {}
                    }
                }
                Err(e @ Error::NonFinite(_)) => {
                    warn!("update round aborted: {e}");
                    diag.aborted = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        diag.critic_loss = if diag.critic_updates > 0 { loss_sum / diag.critic_updates as f64 } else { f64::NAN };
        diag.actor_q = if diag.actor_updates > 0 { q_sum / diag.actor_updates as f64 } else { f64::NAN };
        diag.gains = Some(self.gains());
        debug!("round: {diag:?}");
        Ok(diag)
    }

    pub fn checkpoint_tensors(&self) -> Vec<Tensor> {
        let mut out = vec![
            Tensor::vector("theta", self.theta.as_array().to_vec()),
            Tensor::vector("theta_target", self.theta_target.as_array().to_vec()),
            Tensor::vector("updates", vec![self.updates as f64]),
        ];
        let adam = |name: &str, a: &AdamState, out: &mut Vec<Tensor>| {
            out.push(Tensor::vector(format!("{name}.m"), a.m.clone()));
            out.push(Tensor::vector(format!("{name}.v"), a.v.clone()));
            out.push(Tensor::vector(format!("{name}.step"), vec![a.step as f64]));
        };
        adam("actor_adam", &self.actor_adam, &mut out);
        for i in 0..2 {
            out.push(Tensor::vector(format!("critic{}", i + 1), self.critics[i].params()));
            out.push(Tensor::vector(format!("critic{}_target", i + 1), self.critic_targets[i].params()));
            adam(&format!("critic{}_adam", i + 1), &self.critic_adam[i], &mut out);
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &self.checkpoint_tensors())?;
        write_atomic(path, &buf)
    }

    /// Restores network, optimizer and counter state. The replay memory
    /// and RNG are not part of the checkpoint.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let file = std::fs::File::open(path).map_err(|e| data_err(path, e))?;
        let tensors = read_tensors(BufReader::new(file))?;
        let get = |name: &str| -> Result<&[f64]> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.data.as_slice())
                .ok_or_else(|| data_err(path, format!("missing tensor {name}")))
        };
        let arr4 = |v: &[f64]| -> Result<[f64; 4]> {
            v.try_into().map_err(|_| Error::Dimension { expected: 4, got: v.len() })
        };
        let adam = |name: &str, a: &mut AdamState| -> Result<()> {
            let m = get(&format!("{name}.m"))?;
            let v = get(&format!("{name}.v"))?;
            if m.len() != a.m.len() || v.len() != a.v.len() {
                return Err(Error::Dimension { expected: a.m.len(), got: m.len() });
            }
            a.m.copy_from_slice(m);
            a.v.copy_from_slice(v);
            a.step = get(&format!("{name}.step"))?[0] as u64;
            Ok(())
        };
        self.theta = ActorParams::from_array(arr4(get("theta")?)?);
        self.theta_target = ActorParams::from_array(arr4(get("theta_target")?)?);
        self.updates = get("updates")?[0] as u64;
        adam("actor_adam", &mut self.actor_adam)?;
        for i in 0..2 {
            self.critics[i].set_params(get(&format!("critic{}", i + 1))?)?;
            self.critic_targets[i].set_params(get(&format!("critic{}_target", i + 1))?)?;
            adam(&format!("critic{}_adam", i + 1), &mut self.critic_adam[i])?;
        }
        Ok(())
    }
}

fn data_err(path: &Path, msg: impl ToString) -> Error {
    Error::DataFile { path: path.to_path_buf(), msg: msg.to_string() }
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// One row of the parameter file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainsRow {
    pub timestamp: f64,
    pub k_p: f64,
    pub k_i: f64,
    pub k_d: f64,
    pub k_tau: f64,
}

impl GainsRow {
    pub fn new(timestamp: f64, g: &PidGains) -> Self {
        Self { timestamp, k_p: g.kp, k_i: g.ki, k_d: g.kd, k_tau: g.ktau }
    }

    pub fn gains(&self) -> PidGains {
        PidGains { kp: self.k_p, ki: self.k_i, kd: self.k_d, ktau: self.k_tau }
    }
}

/// Atomically rewrites the parameter file with the full history.
pub fn write_gains_csv(path: &Path, rows: &[GainsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["timestamp", "k_p", "k_i", "k_d", "k_tau"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| data_err(path, e))?;
    write_atomic(path, &bytes)
}

pub fn read_gains_csv(path: &Path) -> Result<Vec<GainsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| data_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| data_err(path, e))).collect()
}

/// Most recent gains in the parameter file.
pub fn latest_gains(path: &Path) -> Result<PidGains> {
    let rows = read_gains_csv(path)?;
    let g = rows.last().ok_or_else(|| data_err(path, "no rows"))?.gains();
    g.validate()?;
    Ok(g)
}

/// Lines of a text file, for small helpers and tests.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path).map_err(|e| data_err(path, e))?;
    Ok(BufReader::new(f).lines().collect::<std::io::Result<_>>()?)
}
