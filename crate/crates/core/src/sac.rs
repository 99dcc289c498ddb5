//! Soft Actor-Critic over the market-making environment.
//!
//! Update order per gradient step: entropy temperature (using the current
//! policy's log-probabilities), critic targets from the target networks,
//! twin-critic regression, actor improvement against the freshly updated
//! critics, then Polyak averaging of the targets.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backtest::run_monte_carlo;
use crate::env::{EnvConfig, MarketEnv, NormStats};
use crate::error::{Error, Result};
use crate::nn::{
    actor_forward, actor_output_grad, actor_sizes, critic_sizes, map_action, sample_squashed,
    squash, squash_backward, Mlp, PolicyCheckpoint, ACT_DIM, OBS_DIM,
};
use crate::seed::{self, Purpose, Stream};
use crate::stats;
use crate::strategies::Neural;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub learning_rate: f64,
    pub learning_starts: u64,
    /// `None` selects `−dim(action)`.
    pub target_entropy: Option<f64>,
    pub init_alpha: f64,
    pub target_update_interval: u64,
    pub gradient_steps: u32,
    pub train_freq: u64,
    pub tau: f64,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub hidden: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            batch_size: 512,
            buffer_capacity: 100_000,
            learning_rate: 3e-4,
            learning_starts: 100,
            target_entropy: None,
            init_alpha: 1.0,
            target_update_interval: 1,
            gradient_steps: 1,
            train_freq: 1,
            tau: 0.005,
            total_steps: 1_000_000,
            eval_interval: 10_000,
            eval_episodes: 20,
            hidden: crate::nn::HIDDEN,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: &str| Err(Error::config(&format!("sac.{k}"), m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return err("gamma", "must be in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return err("tau", "must be in (0, 1]");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return err("learning_rate", "must be > 0");
        }
        if !(self.init_alpha.is_finite() && self.init_alpha > 0.0) {
            return err("init_alpha", "must be > 0");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be >= 1");
        }
        if self.buffer_capacity < self.batch_size {
            return err("buffer_capacity", "must be >= batch_size");
        }
        for (v, k) in [
            (self.target_update_interval, "target_update_interval"),
            (self.train_freq, "train_freq"),
            (self.eval_interval, "eval_interval"),
        ] {
            if v == 0 {
                return err(k, "must be >= 1");
            }
        }
        if self.gradient_steps == 0 {
            return err("gradient_steps", "must be >= 1");
        }
        if self.eval_episodes < 2 {
            return err("eval_episodes", "must be >= 2");
        }
        if self.hidden == 0 {
            return err("hidden", "must be >= 1");
        }
        if let Some(h) = self.target_entropy {
            if !h.is_finite() {
                return err("target_entropy", "must be finite");
            }
        }
        Ok(())
    }

    pub fn target_entropy(&self) -> f64 {
        self.target_entropy.unwrap_or(-(ACT_DIM as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub action: [f64; ACT_DIM],
    pub reward: f64,
    pub next_obs: [f64; OBS_DIM],
    pub done: bool,
}

/// Column-major batch of transitions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub done: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    pub fn push(&mut self, t: &Transition) {
        self.obs.extend_from_slice(&t.obs);
        self.action.extend_from_slice(&t.action);
        self.reward.push(t.reward);
        self.next_obs.extend_from_slice(&t.next_obs);
        self.done.push(if t.done { 1.0 } else { 0.0 });
    }
}

/// Fixed-capacity FIFO replay memory.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            next: 0,
        }
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

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Items from oldest to newest.
    pub fn iter_fifo(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Storage indices of a uniform sample without replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Result<Vec<usize>> {
        if batch > self.items.len() {
            return Err(Error::InsufficientData {
                need: batch,
                got: self.items.len(),
            });
        }
        Ok(index::sample(rng, self.items.len(), batch).into_vec())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Result<Batch> {
        let mut b = Batch::default();
        for i in self.sample_indices(rng, batch)? {
            b.push(&self.items[i]);
        }
        Ok(b)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.lr / bc1;
        let bc2_sqrt = bc2.sqrt();
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() / bc2_sqrt + self.eps);
        }
    }
}

/// Concatenates observation and action rows into critic inputs.
pub fn critic_input(obs: &[f64], action: &[f64]) -> Vec<f64> {
    let batch = obs.len() / OBS_DIM;
    let mut x = Vec::with_capacity(batch * (OBS_DIM + ACT_DIM));
    for b in 0..batch {
        x.extend_from_slice(&obs[b * OBS_DIM..(b + 1) * OBS_DIM]);
        x.extend_from_slice(&action[b * ACT_DIM..(b + 1) * ACT_DIM]);
    }
    x
}

/// `0.5 · mean((Q(x) − y)²)` and its parameter gradient.
pub fn critic_loss(q: &Mlp, input: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let batch = target.len();
    let cache = q.forward(input, batch)?;
    let n = batch as f64;
    let mut loss = 0.0;
    let mut d = Vec::with_capacity(batch);
    for (p, y) in cache.output().iter().zip(target) {
        let e = p - y;
        loss += 0.5 * e * e / n;
        d.push(e / n);
    }
    let mut grad = vec![0.0; q.params().len()];
    q.backward(&cache, &d, &mut grad, false);
    Ok((loss, grad))
}

/// Reparameterised policy samples for a batch.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub action: Vec<f64>,
    /// Per-sample log-probability, summed over action dimensions.
    pub log_prob: Vec<f64>,
}

pub fn policy_sample(actor: &Mlp, obs: &[f64], eps: &[f64]) -> Result<PolicySample> {
    let batch = obs.len() / OBS_DIM;
    let out = actor_forward(actor, obs, batch)?;
    Ok(squash_batch(&out.mean, &out.log_std, eps))
}

fn squash_batch(mean: &[f64], log_std: &[f64], eps: &[f64]) -> PolicySample {
    let batch = mean.len() / ACT_DIM;
    let mut action = Vec::with_capacity(mean.len());
    let mut log_prob = vec![0.0; batch];
    for i in 0..mean.len() {
        let s = squash(mean[i], log_std[i], eps[i]);
        action.push(s.action);
        log_prob[i / ACT_DIM] += s.log_prob;
    }
    PolicySample { action, log_prob }
}

#[derive(Debug, Clone)]
pub struct ActorLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub log_prob: Vec<f64>,
}

/// `mean(α·logπ(a|s) − min(Q1, Q2)(s, a))` with `a` reparameterised by the
/// standard-normal noise `eps`; gradient with respect to the actor only.
pub fn actor_loss(
    actor: &Mlp,
    q1: &Mlp,
    q2: &Mlp,
    obs: &[f64],
    eps: &[f64],
    alpha: f64,
) -> Result<ActorLoss> {
    let batch = obs.len() / OBS_DIM;
    let n = batch as f64;
    let out = actor_forward(actor, obs, batch)?;
    let pi = squash_batch(&out.mean, &out.log_std, eps);
    let x = critic_input(obs, &pi.action);
    let c1 = q1.forward(&x, batch)?;
    let c2 = q2.forward(&x, batch)?;
    let (mut d1, mut d2) = (vec![0.0; batch], vec![0.0; batch]);
    let mut loss = 0.0;
    for b in 0..batch {
        let (v1, v2) = (c1.output()[b], c2.output()[b]);
        let qmin = if v1 <= v2 {
            d1[b] = -1.0 / n;
            v1
        } else {
            d2[b] = -1.0 / n;
            v2
        };
        loss += (alpha * pi.log_prob[b] - qmin) / n;
    }
    let dx1 = q1.backward_input(&c1, &d1);
    let dx2 = q2.backward_input(&c2, &d2);
    let (mut d_mean, mut d_ls) = (vec![0.0; batch * ACT_DIM], vec![0.0; batch * ACT_DIM]);
    let width = OBS_DIM + ACT_DIM;
    for b in 0..batch {
        for j in 0..ACT_DIM {
            let i = b * ACT_DIM + j;
            let g_a = dx1[b * width + OBS_DIM + j] + dx2[b * width + OBS_DIM + j];
            let (dm, dl) = squash_backward(out.mean[i], out.log_std[i], eps[i], g_a, alpha / n);
            d_mean[i] = dm;
            d_ls[i] = dl;
        }
    }
    let g_out = actor_output_grad(&out, &d_mean, &d_ls);
    let mut grad = vec![0.0; actor.params().len()];
    actor.backward(&out.cache, &g_out, &mut grad, false);
    Ok(ActorLoss {
        loss,
        grad,
        log_prob: pi.log_prob,
    })
}

/// `−mean(log_alpha · (logπ + H_target))` and its derivative in `log_alpha`.
pub fn alpha_loss(log_alpha: f64, log_prob: &[f64], target_entropy: f64) -> (f64, f64) {
    let g = -stats::mean(&log_prob.iter().map(|lp| lp + target_entropy).collect::<Vec<_>>());
    (log_alpha * g, g)
}

/// Soft Bellman targets `r + γ(1 − d)(min Q'(s', a') − α·logπ(a'|s'))`.
#[allow(clippy::too_many_arguments)]
pub fn critic_targets(
    actor: &Mlp,
    q1_target: &Mlp,
    q2_target: &Mlp,
    batch: &Batch,
    eps_next: &[f64],
    alpha: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    let n = batch.len();
    let next = policy_sample(actor, &batch.next_obs, eps_next)?;
    let x = critic_input(&batch.next_obs, &next.action);
    let t1 = q1_target.forward(&x, n)?;
    let t2 = q2_target.forward(&x, n)?;
    Ok((0..n)
        .map(|b| {
            let soft = t1.output()[b].min(t2.output()[b]) - alpha * next.log_prob[b];
            batch.reward[b] + gamma * (1.0 - batch.done[b]) * soft
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Losses {
    pub q1: f64,
    pub q2: f64,
    pub actor: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
}

impl Losses {
    fn all_finite(&self) -> Option<&'static str> {
        [
            (self.q1, "q1 loss"),
            (self.q2, "q2 loss"),
            (self.actor, "actor loss"),
            (self.alpha_loss, "alpha loss"),
            (self.alpha, "alpha"),
        ]
        .into_iter()
        .find(|(v, _)| !v.is_finite())
        .map(|(_, name)| name)
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: SacConfig,
    pub actor: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub log_alpha: f64,
    opt_actor: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
    opt_alpha: Adam,
    pub env_steps: u64,
    pub updates: u64,
    rng: ChaCha8Rng,
}

fn sizes(base: [usize; 4], hidden: usize) -> [usize; 4] {
    [base[0], hidden, hidden, base[3]]
}

impl Trainer {
    /// Fresh networks from `init_seed`; `rng` drives exploration, replay
    /// sampling and reparameterisation noise.
    pub fn new(cfg: SacConfig, init_seed: u64, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut init = seed::rng(init_seed, Stream::Policy);
        let actor = Mlp::new(&sizes(actor_sizes(), cfg.hidden), &mut init);
        let q1 = Mlp::new(&sizes(critic_sizes(), cfg.hidden), &mut init);
        let q2 = Mlp::new(&sizes(critic_sizes(), cfg.hidden), &mut init);
        let lr = cfg.learning_rate;
        Ok(Self {
            opt_actor: Adam::new(actor.params().len(), lr),
            opt_q1: Adam::new(q1.params().len(), lr),
            opt_q2: Adam::new(q2.params().len(), lr),
            opt_alpha: Adam::new(1, lr),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            log_alpha: cfg.init_alpha.ln(),
            actor,
            q1,
            q2,
            cfg,
            env_steps: 0,
            updates: 0,
            rng,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.sample(rand_distr::StandardNormal)).collect()
    }

    /// Stochastic action for one normalised observation.
    pub fn explore(&mut self, obs: &[f64; OBS_DIM]) -> Result<[f64; ACT_DIM]> {
        let out = actor_forward(&self.actor, obs, 1)?;
        let (a, _) = sample_squashed(&mut self.rng, &out.mean, &out.log_std, false);
        Ok([a[0], a[1]])
    }

    pub fn random_action(&mut self) -> [f64; ACT_DIM] {
        [self.rng.random_range(-1.0..1.0), self.rng.random_range(-1.0..1.0)]
    }

    /// Whether an update may run given the buffer fill and step count.
    pub fn can_update(&self, buffer: &ReplayBuffer) -> bool {
        buffer.len() >= self.cfg.batch_size && self.env_steps >= self.cfg.learning_starts
    }

    /// One SAC gradient step on a batch.
    pub fn update(&mut self, batch: &Batch) -> Result<Losses> {
        let n = batch.len();
        let eps_pi = self.normals(n * ACT_DIM);
        let eps_next = self.normals(n * ACT_DIM);

        // temperature, using the pre-update value everywhere below
        let alpha = self.alpha();
        let pi = policy_sample(&self.actor, &batch.obs, &eps_pi)?;
        let (alpha_loss, g_alpha) = alpha_loss(self.log_alpha, &pi.log_prob, self.cfg.target_entropy());
        let mut la = [self.log_alpha];
        self.opt_alpha.step(&mut la, &[g_alpha]);
        self.log_alpha = la[0];

        let target = critic_targets(
            &self.actor,
            &self.q1_target,
            &self.q2_target,
            batch,
            &eps_next,
            alpha,
            self.cfg.gamma,
        )?;
        let x = critic_input(&batch.obs, &batch.action);
        let (l1, g1) = critic_loss(&self.q1, &x, &target)?;
        let (l2, g2) = critic_loss(&self.q2, &x, &target)?;
        self.opt_q1.step(self.q1.params_mut(), &g1);
        self.opt_q2.step(self.q2.params_mut(), &g2);

        let al = actor_loss(&self.actor, &self.q1, &self.q2, &batch.obs, &eps_pi, alpha)?;
        self.opt_actor.step(self.actor.params_mut(), &al.grad);

        self.updates += 1;
        if self.updates % self.cfg.target_update_interval == 0 {
            self.q1_target.polyak_from(&self.q1, self.cfg.tau);
            self.q2_target.polyak_from(&self.q2, self.cfg.tau);
        }
        Ok(Losses {
            q1: l1,
            q2: l2,
            actor: al.loss,
            alpha_loss,
            alpha,
        })
    }

    fn params_finite(&self) -> bool {
        [&self.actor, &self.q1, &self.q2]
            .iter()
            .all(|m| m.params().iter().all(|p| p.is_finite()))
    }

    pub fn sample_batch(&mut self, buffer: &ReplayBuffer) -> Result<Batch> {
        buffer.sample(&mut self.rng, self.cfg.batch_size)
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub env_step: u64,
    pub mean_eval_return: f64,
    pub mean_eval_pnl: f64,
    pub q1_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
}

pub fn curve_csv(rows: &[CurveRow], header: &str) -> String {
    let mut s = String::from(header);
    s.push_str("env_step,mean_eval_return,mean_eval_pnl,q1_loss,actor_loss,alpha\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.env_step, r.mean_eval_return, r.mean_eval_pnl, r.q1_loss, r.actor_loss, r.alpha
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_policy: PolicyCheckpoint,
    pub best_policy: PolicyCheckpoint,
    pub best_eval_return: Option<f64>,
    pub curve: Vec<CurveRow>,
}

fn evaluate(
    env_cfg: &EnvConfig,
    actor: &Mlp,
    norm: &NormStats,
    episodes: usize,
    seed_base: u64,
) -> Result<(f64, f64)> {
    let ctl = Neural::new(actor.clone(), norm.clone(), env_cfg.inventory_limit, env_cfg.max_offset_ticks);
    let recs = run_monte_carlo(env_cfg, &ctl, episodes, seed_base)?;
    let ret: Vec<f64> = recs.iter().map(|r| r.episode_return).collect();
    let pnl: Vec<f64> = recs.iter().map(|r| r.pnl).collect();
    Ok((stats::mean(&ret), stats::mean(&pnl)))
}

/// Trains a policy. Randomness derives from `master_seed` through the
/// training and training-evaluation purposes. On a non-finite loss the
/// current actor is written to `diagnostic` (when given) and training aborts.
pub fn train(
    env_cfg: &EnvConfig,
    cfg: &SacConfig,
    norm: &NormStats,
    master_seed: u64,
    diagnostic: Option<&Path>,
    mut progress: impl FnMut(&CurveRow),
) -> Result<TrainOutcome> {
    env_cfg.validate()?;
    cfg.validate()?;
    let train_seed = seed::derive(master_seed, Purpose::Training);
    let eval_seed = seed::derive(master_seed, Purpose::TrainingEval);
    let mut tr = Trainer::new(
        cfg.clone(),
        seed::child(train_seed, u64::MAX),
        seed::rng(train_seed, Stream::Policy),
    )?;
    let snapshot = |actor: &Mlp| PolicyCheckpoint {
        actor: actor.clone(),
        norm: norm.clone(),
    };
    let mut best: Option<(f64, PolicyCheckpoint)> = None;
    let mut curve = Vec::new();
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut env = MarketEnv::new(env_cfg.clone())?;
    let c = env_cfg.inventory_limit;
    let mut episode = 0u64;
    let mut obs = norm.normalize(&env.reset(seed::child(train_seed, episode)), c)?.to_array();
    let mut last = Losses::default();

    for _ in 0..cfg.total_steps {
        let action = if tr.env_steps < cfg.learning_starts {
            tr.random_action()
        } else {
            tr.explore(&obs)?
        };
        let res = env.step(map_action(&action, env_cfg.max_offset_ticks))?;
        let next = norm.normalize(&res.obs, c)?.to_array();
        buffer.push(Transition {
            obs,
            action,
            reward: res.reward,
            next_obs: next,
            done: res.done,
        });
        obs = if res.done {
            episode += 1;
            norm.normalize(&env.reset(seed::child(train_seed, episode)), c)?.to_array()
        } else {
            next
        };
        tr.env_steps += 1;

        if tr.env_steps % cfg.train_freq == 0 && tr.can_update(&buffer) {
            for _ in 0..cfg.gradient_steps {
                let batch = tr.sample_batch(&buffer)?;
                last = tr.update(&batch)?;
                let bad = last
                    .all_finite()
                    .or_else(|| (!tr.params_finite()).then_some("network parameters"));
                if let Some(what) = bad {
                    if let Some(path) = diagnostic {
                        snapshot(&tr.actor).save(path)?;
                    }
                    return Err(Error::NonFinite {
                        what: what.into(),
                        step: tr.env_steps,
                    });
                }
            }
        }

        if tr.env_steps % cfg.eval_interval == 0 {
            let (ret, pnl) = evaluate(env_cfg, &tr.actor, norm, cfg.eval_episodes, eval_seed)?;
            let row = CurveRow {
                env_step: tr.env_steps,
                mean_eval_return: ret,
                mean_eval_pnl: pnl,
                q1_loss: last.q1,
                actor_loss: last.actor,
                alpha: tr.alpha(),
            };
            progress(&row);
            curve.push(row);
            if best.as_ref().is_none_or(|(b, _)| ret > *b) {
                best = Some((ret, snapshot(&tr.actor)));
            }
        }
    }
    let final_policy = snapshot(&tr.actor);
    let (best_eval_return, best_policy) = match best {
        Some((r, p)) => (Some(r), p),
        None => (None, final_policy.clone()),
    };
    Ok(TrainOutcome {
        final_policy,
        best_policy,
        best_eval_return,
        curve,
    })
}
