//! Soft actor-critic: tanh-squashed Gaussian actor, twin critics with
//! Polyak-averaged targets, a ring replay buffer and the update rule.
//!
//! The temperature is fixed. The squashing is `action = tanh(u)`; the linear
//! map from tanh output to control range is the identity because both ranges
//! are [-1, 1].

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{polyak_update, Adam, Linear, LinearGrad, Mlp, MlpGrad, ParamSet, Tensor};
use crate::scenario::{Action, ObservationVector};
use crate::{Error, Result};

pub const ACTION_DIM: usize = 2;
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Added inside `log(1 - tanh(u)^2 + eps)` to keep the correction finite.
pub const LOG_PROB_EPS: f64 = 1e-6;
/// Largest magnitude an emitted action component may take.
const ACTION_LIMIT: f64 = 1.0 - 1e-12;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Entropy temperature.
    pub alpha_ent: f64,
    /// Transitions required in the buffer before gradient steps start.
    pub warmup: usize,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            lr: 3e-4,
            batch_size: 256,
            alpha_ent: 0.2,
            warmup: 1000,
            buffer_capacity: 100_000,
            hidden: vec![256, 256],
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("sac.gamma must lie in (0, 1)".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config("sac.tau must lie in (0, 1]".into()));
        }
        if !(self.lr > 0.0) || !(self.alpha_ent >= 0.0) {
            return Err(Error::Config("sac.lr must be > 0 and sac.alpha_ent >= 0".into()));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("sac sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Gaussian policy head over a shared rectified trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub trunk: Mlp,
    pub mean: Linear,
    pub log_std: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorGrad {
    pub trunk: MlpGrad,
    pub mean: LinearGrad,
    pub log_std: LinearGrad,
}

struct ActorForward {
    mean: Array2<f64>,
    log_std: Array2<f64>,
    /// 1 where the raw log-std lies inside the clamp range.
    log_std_live: Array2<f64>,
    trunk_out: Array2<f64>,
    cache: crate::nn::MlpCache,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        let trunk = Mlp::new(&sizes, true, rng);
        let last = *hidden.last().expect("actor needs a hidden layer");
        Self { trunk, mean: Linear::init(last, ACTION_DIM, rng), log_std: Linear::init(last, ACTION_DIM, rng) }
    }

    pub fn zeros(obs_dim: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        let last = *hidden.last().expect("actor needs a hidden layer");
        Self {
            trunk: Mlp::zeros(&sizes, true),
            mean: Linear::zeros(last, ACTION_DIM),
            log_std: Linear::zeros(last, ACTION_DIM),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    fn forward(&self, obs: &Array2<f64>) -> ActorForward {
        let (trunk_out, cache) = self.trunk.forward_batch(obs);
        let mean = self.mean.forward(&trunk_out);
        let raw = self.log_std.forward(&trunk_out);
        let log_std_live = raw.mapv(|v| if (LOG_STD_MIN..=LOG_STD_MAX).contains(&v) { 1.0 } else { 0.0 });
        let log_std = raw.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        ActorForward { mean, log_std, log_std_live, trunk_out, cache }
    }

    /// Mean and clamped log-std for one observation.
    pub fn distribution(&self, obs: &[f64]) -> Result<([f64; 2], [f64; 2])> {
        if obs.len() != self.obs_dim() {
            return Err(Error::Arity { expected: self.obs_dim(), got: obs.len() });
        }
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row vector");
        let f = self.forward(&x);
        Ok(([f.mean[[0, 0]], f.mean[[0, 1]]], [f.log_std[[0, 0]], f.log_std[[0, 1]]]))
    }

    /// Reparameterized batch sample: `u = mean + exp(log_std) * noise`,
    /// returning `(tanh(u), log pi)`.
    pub fn sample_batch(&self, obs: &Array2<f64>, noise: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let f = self.forward(obs);
        let u = &f.mean + &(f.log_std.mapv(f64::exp) * noise);
        let a = u.mapv(f64::tanh);
        let mut logp = Array1::zeros(obs.nrows());
        for b in 0..obs.nrows() {
            for k in 0..ACTION_DIM {
                let e = noise[[b, k]];
                logp[b] += -0.5 * e * e - f.log_std[[b, k]] - HALF_LN_2PI - (1.0 - a[[b, k]].powi(2) + LOG_PROB_EPS).ln();
            }
        }
        (a, logp)
    }

    /// Flat `(name, shape)` list matching the [`ParamSet`] order.
    pub fn manifest(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let mut m = self.trunk.manifest(&format!("{prefix}.trunk"));
        for (name, l) in [("mean", &self.mean), ("log_std", &self.log_std)] {
            m.push((format!("{prefix}.{name}.weight"), vec![l.n_in(), l.n_out()]));
            m.push((format!("{prefix}.{name}.bias"), vec![l.n_out()]));
        }
        m
    }
}

impl ParamSet for Actor {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.trunk.slices();
        v.extend(self.mean.slices());
        v.extend(self.log_std.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.trunk.slices_mut();
        v.extend(self.mean.slices_mut());
        v.extend(self.log_std.slices_mut());
        v
    }
}

impl ParamSet for ActorGrad {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.trunk.slices();
        v.extend(self.mean.slices());
        v.extend(self.log_std.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.trunk.slices_mut();
        v.extend(self.mean.slices_mut());
        v.extend(self.log_std.slices_mut());
        v
    }
}

/// Log-density of the squashed action `tanh(u)` for one component with
/// Gaussian pre-squash parameters.
pub fn squashed_log_prob(mean: f64, log_std: f64, u: f64) -> f64 {
    let z = (u - mean) / log_std.exp();
    -0.5 * z * z - log_std - HALF_LN_2PI - (1.0 - u.tanh().powi(2) + LOG_PROB_EPS).ln()
}

fn to_action(a0: f64, a1: f64) -> Action {
    Action::new(a0.clamp(-ACTION_LIMIT, ACTION_LIMIT), a1.clamp(-ACTION_LIMIT, ACTION_LIMIT))
}

/// Stochastic action and its log-probability.
pub fn policy_sample<R: Rng + ?Sized>(actor: &Actor, obs: &ObservationVector, rng: &mut R) -> Result<(Action, f64)> {
    let (mean, log_std) = actor.distribution(obs.as_slice())?;
    let mut logp = 0.0;
    let mut a = [0.0; 2];
    for k in 0..ACTION_DIM {
        let e: f64 = rng.sample(StandardNormal);
        let u = mean[k] + log_std[k].exp() * e;
        a[k] = u.tanh();
        logp += squashed_log_prob(mean[k], log_std[k], u);
    }
    Ok((to_action(a[0], a[1]), logp))
}

/// Deterministic action `tanh(mean)`.
pub fn policy_mode(actor: &Actor, obs: &ObservationVector) -> Result<Action> {
    let (mean, _) = actor.distribution(obs.as_slice())?;
    Ok(to_action(mean[0].tanh(), mean[1].tanh()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), head: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..n).map(|_| self.items[rng.random_range(0..self.items.len())].clone()).collect())
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

    pub fn clear(&mut self) {
        self.items.clear();
        self.head = 0;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SacLosses {
    pub q1: f64,
    pub q2: f64,
    pub actor: f64,
}

/// Learner state: networks, targets, optimizers and replay buffer.
#[derive(Debug, Clone)]
pub struct SacAgent {
    pub cfg: SacConfig,
    pub actor: Actor,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_targ: Mlp,
    pub q2_targ: Mlp,
    pub buffer: ReplayBuffer,
    opt_actor: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
}

fn critic_sizes(obs_dim: usize, hidden: &[usize]) -> Vec<usize> {
    let mut s = vec![obs_dim + ACTION_DIM];
    s.extend_from_slice(hidden);
    s.push(1);
    s
}

fn concat_cols(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts match")
}

fn gaussian_noise<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, ACTION_DIM), || rng.sample(StandardNormal))
}

/// Half mean-squared error of a critic against fixed targets, and its gradient.
pub fn critic_loss_grad(q: &Mlp, inputs: &Array2<f64>, targets: &Array1<f64>) -> (f64, MlpGrad) {
    let (out, cache) = q.forward_batch(inputs);
    let n = inputs.nrows() as f64;
    let diff = &out.column(0) - targets;
    let loss = 0.5 * diff.mapv(|d| d * d).sum() / n;
    let grad_out = (diff / n).insert_axis(Axis(1));
    (loss, q.backward(&cache, &grad_out).0)
}

/// Actor objective `mean(alpha * log pi(a|s) - min(q1, q2)(s, a))` for
/// reparameterized actions built from `noise`, and its gradient with respect
/// to the actor parameters. Critics are held fixed.
pub fn actor_loss_grad(
    actor: &Actor,
    q1: &Mlp,
    q2: &Mlp,
    obs: &Array2<f64>,
    noise: &Array2<f64>,
    alpha: f64,
) -> (f64, ActorGrad) {
    let n = obs.nrows();
    let bn = n as f64;
    let f = actor.forward(obs);
    let std = f.log_std.mapv(f64::exp);
    let u = &f.mean + &(&std * noise);
    let a = u.mapv(f64::tanh);

    let inputs = concat_cols(obs, &a);
    let (q1_out, c1) = q1.forward_batch(&inputs);
    let (q2_out, c2) = q2.forward_batch(&inputs);
    let mut g1 = Array2::zeros((n, 1));
    let mut g2 = Array2::zeros((n, 1));
    let mut loss = 0.0;
    for b in 0..n {
        let (v1, v2) = (q1_out[[b, 0]], q2_out[[b, 0]]);
        let mut logp = 0.0;
        for k in 0..ACTION_DIM {
            let e = noise[[b, k]];
            logp += -0.5 * e * e - f.log_std[[b, k]] - HALF_LN_2PI - (1.0 - a[[b, k]].powi(2) + LOG_PROB_EPS).ln();
        }
        if v1 <= v2 {
            g1[[b, 0]] = -1.0 / bn;
        } else {
            g2[[b, 0]] = -1.0 / bn;
        }
        loss += (alpha * logp - v1.min(v2)) / bn;
    }
    let (_, gin1) = q1.backward(&c1, &g1);
    let (_, gin2) = q2.backward(&c2, &g2);
    let obs_dim = obs.ncols();
    let d_action = &gin1.slice(s![.., obs_dim..]) + &gin2.slice(s![.., obs_dim..]);

    let mut d_mean = Array2::zeros((n, ACTION_DIM));
    let mut d_log_std = Array2::zeros((n, ACTION_DIM));
    for b in 0..n {
        for k in 0..ACTION_DIM {
            let ak = a[[b, k]];
            let one_m = 1.0 - ak * ak;
            let d_logp_du = 2.0 * ak * one_m / (one_m + LOG_PROB_EPS);
            let du = d_action[[b, k]] * one_m + alpha * d_logp_du / bn;
            d_mean[[b, k]] = du;
            d_log_std[[b, k]] = (du * std[[b, k]] * noise[[b, k]] - alpha / bn) * f.log_std_live[[b, k]];
        }
    }
    let (mean_grad, d_trunk_m) = actor.mean.backward(&f.trunk_out, &d_mean);
    let (log_std_grad, d_trunk_s) = actor.log_std.backward(&f.trunk_out, &d_log_std);
    let (trunk_grad, _) = actor.trunk.backward(&f.cache, &(d_trunk_m + d_trunk_s));
    (loss, ActorGrad { trunk: trunk_grad, mean: mean_grad, log_std: log_std_grad })
}

struct Batch {
    obs: Array2<f64>,
    act: Array2<f64>,
    rew: Array1<f64>,
    next_obs: Array2<f64>,
    not_done: Array1<f64>,
}

impl Batch {
    fn from(batch: &[Transition], obs_dim: usize) -> Result<Self> {
        let n = batch.len();
        let mut obs = Array2::zeros((n, obs_dim));
        let mut next_obs = Array2::zeros((n, obs_dim));
        let mut act = Array2::zeros((n, ACTION_DIM));
        let mut rew = Array1::zeros(n);
        let mut not_done = Array1::zeros(n);
        for (i, t) in batch.iter().enumerate() {
            if t.obs.len() != obs_dim || t.next_obs.len() != obs_dim {
                return Err(Error::Arity { expected: obs_dim, got: t.obs.len().min(t.next_obs.len()) });
            }
            obs.row_mut(i).assign(&ndarray::aview1(&t.obs));
            next_obs.row_mut(i).assign(&ndarray::aview1(&t.next_obs));
            act[[i, 0]] = t.action.p;
            act[[i, 1]] = t.action.delta;
            rew[i] = t.reward;
            not_done[i] = if t.done { 0.0 } else { 1.0 };
        }
        Ok(Self { obs, act, rew, next_obs, not_done })
    }
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, cfg: SacConfig, rng: &mut R) -> Self {
        let actor = Actor::new(obs_dim, &cfg.hidden, rng);
        let sizes = critic_sizes(obs_dim, &cfg.hidden);
        let q1 = Mlp::new(&sizes, false, rng);
        let q2 = Mlp::new(&sizes, false, rng);
        Self::assemble(cfg, actor, q1.clone(), q2.clone(), q1, q2)
    }

    fn assemble(cfg: SacConfig, actor: Actor, q1: Mlp, q2: Mlp, q1_targ: Mlp, q2_targ: Mlp) -> Self {
        let opt_actor = Adam::new(cfg.lr, actor.num_params());
        let opt_q1 = Adam::new(cfg.lr, q1.num_params());
        let opt_q2 = Adam::new(cfg.lr, q2.num_params());
        let buffer = ReplayBuffer::new(cfg.buffer_capacity);
        Self { cfg, actor, q1, q2, q1_targ, q2_targ, buffer, opt_actor, opt_q1, opt_q2 }
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.obs_dim()
    }

    /// Critic targets `r + gamma (1 - done) (min targ Q(s', a') - alpha log pi(a'|s'))`
    /// with `a'` built from `noise`. Only the actor and target critics are read.
    pub fn bellman_targets(&self, batch: &[Transition], noise: &Array2<f64>) -> Result<Array1<f64>> {
        let b = Batch::from(batch, self.obs_dim())?;
        Ok(self.targets_for(&b, noise))
    }

    fn targets_for(&self, b: &Batch, noise: &Array2<f64>) -> Array1<f64> {
        let (next_a, next_logp) = self.actor.sample_batch(&b.next_obs, noise);
        let inputs = concat_cols(&b.next_obs, &next_a);
        let t1 = self.q1_targ.infer_batch(&inputs);
        let t2 = self.q2_targ.infer_batch(&inputs);
        let soft = Array1::from_shape_fn(b.rew.len(), |i| t1[[i, 0]].min(t2[[i, 0]]) - self.cfg.alpha_ent * next_logp[i]);
        &b.rew + &(self.cfg.gamma * &b.not_done * &soft)
    }

    /// One critic step, one actor step and a Polyak target update.
    ///
    /// Both gradients are computed against the pre-update critics. On a
    /// non-finite loss or gradient nothing is modified.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &[Transition], rng: &mut R) -> Result<SacLosses> {
        let b = Batch::from(batch, self.obs_dim())?;
        let n = batch.len();
        let next_noise = gaussian_noise(n, rng);
        let noise = gaussian_noise(n, rng);

        let y = self.targets_for(&b, &next_noise);
        let inputs = concat_cols(&b.obs, &b.act);
        let (l1, g1) = critic_loss_grad(&self.q1, &inputs, &y);
        let (l2, g2) = critic_loss_grad(&self.q2, &inputs, &y);
        let (la, ga) = actor_loss_grad(&self.actor, &self.q1, &self.q2, &b.obs, &noise, self.cfg.alpha_ent);

        let losses = SacLosses { q1: l1, q2: l2, actor: la };
        if ![l1, l2, la].iter().all(|v| v.is_finite()) || !g1.all_finite() || !g2.all_finite() || !ga.all_finite() {
            return Err(Error::Divergence(format!(
                "losses q1={l1} q2={l2} actor={la}; max|y|={}",
                y.iter().fold(0.0f64, |m, v| m.max(v.abs()))
            )));
        }
        self.opt_q1.step(&mut self.q1, &g1);
        self.opt_q2.step(&mut self.q2, &g2);
        self.opt_actor.step(&mut self.actor, &ga);
        polyak_update(&mut self.q1_targ, &self.q1, self.cfg.tau);
        polyak_update(&mut self.q2_targ, &self.q2, self.cfg.tau);
        Ok(losses)
    }

    /// Named parameter arrays: actor, both critics and both targets.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        let mut push = |manifest: Vec<(String, Vec<usize>)>, slices: Vec<&[f64]>| {
            for ((name, shape), data) in manifest.into_iter().zip(slices) {
                out.push(Tensor { name, shape, data: data.to_vec() });
            }
        };
        push(self.actor.manifest("actor"), self.actor.slices());
        push(self.q1.manifest("q1"), self.q1.slices());
        push(self.q2.manifest("q2"), self.q2.slices());
        push(self.q1_targ.manifest("q1_targ"), self.q1_targ.slices());
        push(self.q2_targ.manifest("q2_targ"), self.q2_targ.slices());
        out
    }

    /// Rebuilds an agent from [`tensors`](Self::tensors) output. Optimizer
    /// moments and the replay buffer start empty.
    pub fn from_tensors(obs_dim: usize, cfg: SacConfig, tensors: &[Tensor]) -> Result<Self> {
        let mut agent = Self::assemble(
            cfg.clone(),
            Actor::zeros(obs_dim, &cfg.hidden),
            Mlp::zeros(&critic_sizes(obs_dim, &cfg.hidden), false),
            Mlp::zeros(&critic_sizes(obs_dim, &cfg.hidden), false),
            Mlp::zeros(&critic_sizes(obs_dim, &cfg.hidden), false),
            Mlp::zeros(&critic_sizes(obs_dim, &cfg.hidden), false),
        );
        let expected = agent.tensors();
        if expected.len() != tensors.len() {
            return Err(Error::Arity { expected: expected.len(), got: tensors.len() });
        }
        for (e, t) in expected.iter().zip(tensors) {
            if e.name != t.name || e.shape != t.shape || t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Domain(format!("tensor {} does not match expected {} {:?}", t.name, e.name, e.shape)));
            }
        }
        let flat = |range: std::ops::Range<usize>| tensors[range].iter().flat_map(|t| t.data.iter().copied()).collect::<Vec<_>>();
        let na = agent.actor.slices().len();
        let nq = agent.q1.slices().len();
        agent.actor.load_flat(&flat(0..na))?;
        agent.q1.load_flat(&flat(na..na + nq))?;
        agent.q2.load_flat(&flat(na + nq..na + 2 * nq))?;
        agent.q1_targ.load_flat(&flat(na + 2 * nq..na + 3 * nq))?;
        agent.q2_targ.load_flat(&flat(na + 3 * nq..na + 4 * nq))?;
        Ok(agent)
    }

    /// Hex SHA-256 over every network parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Free-function form of [`SacAgent::update`].
pub fn sac_update<R: Rng + ?Sized>(agent: &mut SacAgent, batch: &[Transition], rng: &mut R) -> Result<SacLosses> {
    agent.update(batch, rng)
}
