//! Multi-agent PPO with centralised training and decentralised execution:
//! rollout collection over parallel environments, truncated GAE, the clipped
//! surrogate with entropy bonus, value regression and minibatch updates.
//!
//! Buffers are laid out `[step][env][agent]`; a forward batch stacks its
//! samples agent-major (row `a * B + b`), matching [`FcmNet::forward_vars`].

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{choose_actions, ActMode, ChannelTopology, FcmNet, ForwardInput, MemoryBank};
use crate::disturbance::{sample_step, DisturbanceConfig, GradMode, LinkDraws};
use crate::env::{PathfindConfig, PathfindEnv};
use crate::error::{Error, Result};
use crate::recurrent::LstmState;
use crate::seeding::substream;
use crate::tensor::{clip_grad_norm, AdamState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub n_envs: usize,
    pub steps_per_env: usize,
    /// Broadcast the team-mean reward to every agent.
    pub shared_reward: bool,
    /// Timesteps per gradient chunk inside a minibatch. Only affects speed
    /// and memory, never the result.
    pub grad_chunk: usize,
    /// Regress the critic on running-normalised value targets.
    pub value_norm: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            lr: 3e-4,
            epochs: 4,
            minibatches: 32,
            entropy_coef: 0.001,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            n_envs: 16,
            steps_per_env: 2048,
            shared_reward: false,
            grad_chunk: 256,
            value_norm: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo.{m}")));
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return bad("epochs and minibatches must be at least 1");
        }
        if self.n_envs == 0 || self.steps_per_env == 0 || self.grad_chunk == 0 {
            return bad("n_envs, steps_per_env and grad_chunk must be at least 1");
        }
        if self.minibatches > self.n_envs * self.steps_per_env {
            return bad("minibatches exceed the timesteps in one rollout; a minibatch must hold at least one step");
        }
        Ok(())
    }

    pub fn steps_per_iteration(&self) -> usize {
        self.n_envs * self.steps_per_env
    }
}

/// Running mean and variance of value targets. The critic predicts
/// normalised values; [`ValueNorm::denormalize`] maps them back to returns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueNorm {
    pub enabled: bool,
    pub beta: f64,
    running_mean: f64,
    running_mean_sq: f64,
    debias: f64,
}

impl ValueNorm {
    pub fn new(enabled: bool) -> Self {
        ValueNorm {
            enabled,
            beta: 0.9,
            running_mean: 0.0,
            running_mean_sq: 0.0,
            debias: 0.0,
        }
    }

    /// Debiased `(mean, std)`; identity until the first update.
    pub fn stats(&self) -> (f64, f64) {
        if !self.enabled || self.debias == 0.0 {
            return (0.0, 1.0);
        }
        let mean = self.running_mean / self.debias;
        let var = (self.running_mean_sq / self.debias - mean * mean).max(1e-4);
        (mean, var.sqrt())
    }

    /// Folds one batch of targets into the running statistics.
    pub fn update(&mut self, targets: &[f64]) {
        if !self.enabled || targets.is_empty() {
            return;
        }
        let k = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / k;
        let mean_sq = targets.iter().map(|t| t * t).sum::<f64>() / k;
        self.running_mean = self.beta * self.running_mean + (1.0 - self.beta) * mean;
        self.running_mean_sq = self.beta * self.running_mean_sq + (1.0 - self.beta) * mean_sq;
        self.debias = self.beta * self.debias + (1.0 - self.beta);
    }

    pub fn normalize(&self, v: f64) -> f64 {
        let (m, s) = self.stats();
        (v - m) / s
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        let (m, s) = self.stats();
        v * s + m
    }
}

/// Truncated generalised advantage estimate for one reward stream.
///
/// `dones[t]` marks that the transition at `t` ended an episode; `bootstrap`
/// is the value of the state following the last step. Returns
/// `(advantages, value targets)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let len = rewards.len();
    if values.len() != len || dones.len() != len {
        return Err(Error::dim(
            "compute_gae",
            &[len],
            &[values.len(), dones.len()],
        ));
    }
    let mut adv = vec![0.0; len];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..len).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)` for a single sample.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Clipped policy loss with entropy bonus on plain numbers:
/// `−mean(surrogate) − c_ent · mean(entropy)`.
pub fn actor_loss(
    new_log_probs: &[f64],
    old_log_probs: &[f64],
    advantages: &[f64],
    entropies: &[f64],
    eps: f64,
    entropy_coef: f64,
) -> Result<f64> {
    let n = new_log_probs.len();
    if old_log_probs.len() != n || advantages.len() != n || entropies.len() != n || n == 0 {
        return Err(Error::dim(
            "actor_loss",
            &[n],
            &[old_log_probs.len(), advantages.len()],
        ));
    }
    let surrogate: f64 = new_log_probs
        .iter()
        .zip(old_log_probs)
        .zip(advantages)
        .map(|((new, old), a)| clipped_surrogate((new - old).exp(), *a, eps))
        .sum();
    let entropy: f64 = entropies.iter().sum();
    Ok(-surrogate / n as f64 - entropy_coef * entropy / n as f64)
}

/// Mean squared error between predictions and targets.
pub fn critic_loss(values: &[f64], targets: &[f64]) -> Result<f64> {
    if values.len() != targets.len() || values.is_empty() {
        return Err(Error::dim("critic_loss", &[values.len()], &[targets.len()]));
    }
    let sq: f64 = values
        .iter()
        .zip(targets)
        .map(|(v, t)| (v - t) * (v - t))
        .sum();
    Ok(sq / values.len() as f64)
}

/// Handles produced by [`record_actor_loss`].
#[derive(Clone, Copy, Debug)]
pub struct ActorLossVars {
    pub loss: Var,
    /// Per-row log-probability of the taken action.
    pub log_probs: Var,
    /// Per-row probability ratio against the behaviour policy.
    pub ratios: Var,
    pub surrogate_sum: Var,
    pub entropy_sum: Var,
}

/// Records the clipped policy loss for a block of rows. Sums are divided by
/// `denom` rather than the row count so that chunks of a minibatch add up to
/// the minibatch mean.
#[allow(clippy::too_many_arguments)]
pub fn record_actor_loss(
    tape: &mut Tape,
    logits: Var,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    eps: f64,
    entropy_coef: f64,
    denom: f64,
) -> Result<ActorLossVars> {
    let log_pi = tape.log_softmax(logits)?;
    let log_probs = tape.pick_cols(log_pi, actions)?;
    let old = tape.leaf(Tensor::vector(old_log_probs.to_vec()));
    let adv = tape.leaf(Tensor::vector(advantages.to_vec()));
    let diff = tape.sub(log_probs, old)?;
    let ratios = tape.exp(diff);
    let unclipped = tape.mul(ratios, adv)?;
    let clipped = tape.clamp(ratios, 1.0 - eps, 1.0 + eps);
    let clipped = tape.mul(clipped, adv)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let surrogate_sum = tape.sum(surrogate);
    let pi = tape.exp(log_pi);
    let plogp = tape.mul(pi, log_pi)?;
    let neg_entropy = tape.sum(plogp);
    let entropy_sum = tape.scale(neg_entropy, -1.0);
    let policy_term = tape.scale(surrogate_sum, -1.0 / denom);
    let entropy_term = tape.scale(entropy_sum, -entropy_coef / denom);
    let loss = tape.add(policy_term, entropy_term)?;
    Ok(ActorLossVars {
        loss,
        log_probs,
        ratios,
        surrogate_sum,
        entropy_sum,
    })
}

/// Records `coef · Σ(v − target)² / denom`; returns `(loss, squared-error sum)`.
pub fn record_critic_loss(
    tape: &mut Tape,
    values: Var,
    targets: &[f64],
    coef: f64,
    denom: f64,
) -> Result<(Var, Var)> {
    let shape = tape.shape(values).to_vec();
    let t = tape.leaf(Tensor::new(shape, targets.to_vec())?);
    let diff = tape.sub(values, t)?;
    let sq = tape.mul(diff, diff)?;
    let sq_sum = tape.sum(sq);
    let loss = tape.scale(sq_sum, coef / denom);
    Ok((loss, sq_sum))
}

/// One iteration's worth of transitions from all environments.
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub hidden: usize,
    pub n_envs: usize,
    pub steps: usize,
    /// `[step][env][agent][obs_dim]`.
    pub obs: Vec<f64>,
    /// Incoming self-memory, `[step][env][agent][2H]` as `(h, c)`.
    pub actor_memory: Vec<f64>,
    pub critic_memory: Vec<f64>,
    /// `[step][env][agent]`.
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Value of the final state of an episode cut by the time limit, else 0.
    pub truncation_values: Vec<f64>,
    /// `[step][env]`.
    pub dones: Vec<bool>,
    pub base_topology: ChannelTopology,
    /// Per `[step][env]` when orders are randomised, otherwise empty.
    pub topologies: Vec<ChannelTopology>,
    /// Per `[step][env]` when the channels are disturbed, otherwise empty.
    pub actor_links: Vec<LinkDraws>,
    pub critic_links: Vec<LinkDraws>,
    /// Value of the state after the last step, `[env][agent]`.
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

impl RolloutBuffer {
    fn new(n: usize, obs_dim: usize, hidden: usize, n_envs: usize, steps: usize) -> Result<Self> {
        let cap = n_envs * steps;
        Ok(RolloutBuffer {
            n_agents: n,
            obs_dim,
            hidden,
            n_envs,
            steps,
            obs: Vec::with_capacity(cap * n * obs_dim),
            actor_memory: Vec::with_capacity(cap * n * 2 * hidden),
            critic_memory: Vec::with_capacity(cap * n * 2 * hidden),
            actions: Vec::with_capacity(cap * n),
            log_probs: Vec::with_capacity(cap * n),
            values: Vec::with_capacity(cap * n),
            rewards: vec![0.0; cap * n],
            truncation_values: vec![0.0; cap * n],
            dones: vec![false; cap],
            base_topology: ChannelTopology::default_for(n)?,
            topologies: Vec::new(),
            actor_links: Vec::new(),
            critic_links: Vec::new(),
            bootstrap: Vec::new(),
            advantages: Vec::new(),
            targets: Vec::new(),
        })
    }

    /// Number of stored timesteps (env-steps).
    pub fn len(&self) -> usize {
        self.n_envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Agent-transitions held: timesteps times agents.
    pub fn transitions(&self) -> usize {
        self.len() * self.n_agents
    }

    /// Runs GAE independently for every (env, agent) stream. A time-limit
    /// cut is handled by folding `γ·V(final state)` into that step's reward.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        let (n, e_count, steps) = (self.n_agents, self.n_envs, self.steps);
        if self.bootstrap.len() != e_count * n {
            return Err(Error::Contract("rollout buffer is not full".into()));
        }
        self.advantages = vec![0.0; self.transitions()];
        self.targets = vec![0.0; self.transitions()];
        for e in 0..e_count {
            let dones: Vec<bool> = (0..steps).map(|t| self.dones[t * e_count + e]).collect();
            for a in 0..n {
                let at = |t: usize| (t * e_count + e) * n + a;
                let rewards: Vec<f64> = (0..steps)
                    .map(|t| self.rewards[at(t)] + gamma * self.truncation_values[at(t)])
                    .collect();
                let values: Vec<f64> = (0..steps).map(|t| self.values[at(t)]).collect();
                let (adv, tgt) = compute_gae(
                    &rewards,
                    &values,
                    &dones,
                    self.bootstrap[e * n + a],
                    gamma,
                    lambda,
                )?;
                for t in 0..steps {
                    self.advantages[at(t)] = adv[t];
                    self.targets[at(t)] = tgt[t];
                }
            }
        }
        Ok(())
    }

    /// Network inputs for the given timesteps, stacked agent-major.
    fn batch(
        &self,
        steps: &[usize],
        critic: bool,
    ) -> Result<(Tensor, LstmState, Vec<ChannelTopology>, Vec<LinkDraws>)> {
        let (n, b, d, h) = (self.n_agents, steps.len(), self.obs_dim, self.hidden);
        let mut obs = Vec::with_capacity(n * b * d);
        let mut mh = Vec::with_capacity(n * b * h);
        let mut mc = Vec::with_capacity(n * b * h);
        let memory = if critic {
            &self.critic_memory
        } else {
            &self.actor_memory
        };
        for a in 0..n {
            for &s in steps {
                let r = s * n + a;
                obs.extend_from_slice(&self.obs[r * d..(r + 1) * d]);
                mh.extend_from_slice(&memory[r * 2 * h..r * 2 * h + h]);
                mc.extend_from_slice(&memory[r * 2 * h + h..(r + 1) * 2 * h]);
            }
        }
        let topologies = if self.topologies.is_empty() {
            vec![self.base_topology.clone()]
        } else {
            steps.iter().map(|&s| self.topologies[s].clone()).collect()
        };
        let source = if critic {
            &self.critic_links
        } else {
            &self.actor_links
        };
        let links = if source.is_empty() {
            Vec::new()
        } else {
            steps.iter().map(|&s| source[s].clone()).collect()
        };
        Ok((
            Tensor::new(vec![n * b, d], obs)?,
            LstmState {
                h: Tensor::new(vec![n * b, h], mh)?,
                c: Tensor::new(vec![n * b, h], mc)?,
            },
            topologies,
            links,
        ))
    }

    /// Per-agent entries of `field` for the given timesteps, agent-major.
    fn gather<T: Copy>(&self, field: &[T], steps: &[usize]) -> Vec<T> {
        let n = self.n_agents;
        (0..n)
            .flat_map(|a| steps.iter().map(move |&s| field[s * n + a]))
            .collect()
    }

    /// Log-probabilities of the stored actions under `actor`, agent-major.
    pub fn recompute_log_probs(
        &self,
        actor: &FcmNet,
        steps: &[usize],
        grad_mode: GradMode,
    ) -> Result<Vec<f64>> {
        let (obs, memory, topologies, links) = self.batch(steps, false)?;
        let input = ForwardInput {
            obs: &obs,
            memory: &memory,
            topologies: &topologies,
            links: &links,
            grad_mode,
        };
        let mut tape = Tape::new();
        let bound = actor.bind(&mut tape);
        let fv = actor.forward_vars(&mut tape, &bound, &input)?;
        let log_pi = tape.log_softmax(fv.out)?;
        let picked = tape.pick_cols(log_pi, &self.gather(&self.actions, steps))?;
        Ok(tape.value(picked).data().to_vec())
    }
}

/// Episodes finished during a collection phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    /// Undiscounted return averaged over agents, one entry per episode.
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
    pub solved: usize,
}

impl EpisodeStats {
    pub fn mean_return(&self) -> Option<f64> {
        mean(&self.returns)
    }

    pub fn mean_length(&self) -> Option<f64> {
        let l: Vec<f64> = self.lengths.iter().map(|&l| l as f64).collect();
        mean(&l)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Stacks the memory banks of the listed environments agent-major.
fn stack_memory(banks: &[MemoryBank], envs: &[usize]) -> Result<LstmState> {
    let n = banks[envs[0]].n();
    let h = banks[envs[0]].state.h.shape()[1];
    let mut mh = Vec::with_capacity(n * envs.len() * h);
    let mut mc = Vec::with_capacity(n * envs.len() * h);
    for a in 0..n {
        for &e in envs {
            mh.extend_from_slice(banks[e].state.h.row(a));
            mc.extend_from_slice(banks[e].state.c.row(a));
        }
    }
    let rows = n * envs.len();
    Ok(LstmState {
        h: Tensor::new(vec![rows, h], mh)?,
        c: Tensor::new(vec![rows, h], mc)?,
    })
}

fn scatter_memory(state: &LstmState, banks: &mut [MemoryBank], envs: &[usize]) {
    let b = envs.len();
    let h = state.h.shape()[1];
    for (j, &e) in envs.iter().enumerate() {
        let n = banks[e].n();
        for a in 0..n {
            let src = a * b + j;
            banks[e].state.h.data_mut()[a * h..(a + 1) * h].copy_from_slice(state.h.row(src));
            banks[e].state.c.data_mut()[a * h..(a + 1) * h].copy_from_slice(state.c.row(src));
        }
    }
}

fn stack_obs(obs: &[&Vec<Vec<f64>>]) -> Result<Tensor> {
    let n = obs[0].len();
    let d = obs[0][0].len();
    let mut data = Vec::with_capacity(n * obs.len() * d);
    for a in 0..n {
        for o in obs {
            data.extend_from_slice(&o[a]);
        }
    }
    Tensor::new(vec![n * obs.len(), d], data)
}

/// Per-environment channel randomness for one timestep.
struct StepDraws {
    topologies: Vec<ChannelTopology>,
    actor: Vec<LinkDraws>,
    critic: Vec<LinkDraws>,
}

fn draw_step<R: Rng + ?Sized>(
    dist: &DisturbanceConfig,
    base: &ChannelTopology,
    count: usize,
    rng: &mut R,
) -> StepDraws {
    let mut d = StepDraws {
        topologies: Vec::new(),
        actor: Vec::new(),
        critic: Vec::new(),
    };
    if dist.is_clean() {
        d.topologies.push(base.clone());
        return d;
    }
    for _ in 0..count {
        let (t, a, c) = sample_step(dist, base, rng);
        d.topologies.push(t);
        d.actor.push(a);
        d.critic.push(c);
    }
    if !dist.random_order {
        d.topologies.truncate(1);
    }
    d
}

fn eval_net(
    net: &FcmNet,
    obs: &Tensor,
    memory: &LstmState,
    topologies: &[ChannelTopology],
    links: &[LinkDraws],
    grad_mode: GradMode,
) -> Result<(Tensor, LstmState)> {
    net.evaluate(&ForwardInput {
        obs,
        memory,
        topologies,
        links,
        grad_mode,
    })
}

/// Parallel environments plus the recurrent state that survives between
/// collection phases.
#[derive(Clone, Debug)]
pub struct Collector {
    envs: Vec<PathfindEnv<ChaCha8Rng>>,
    obs: Vec<Vec<Vec<f64>>>,
    actor_memory: Vec<MemoryBank>,
    critic_memory: Vec<MemoryBank>,
    topology: ChannelTopology,
    ep_return: Vec<f64>,
    ep_len: Vec<usize>,
    policy_rng: ChaCha8Rng,
    disturbance_rng: ChaCha8Rng,
}

impl Collector {
    /// Environments use streams `env/<i>`; action sampling and channel
    /// disturbances use `policy` and `disturbance`.
    pub fn new(env_cfg: &PathfindConfig, n_envs: usize, hidden: usize, seed: u64) -> Result<Self> {
        env_cfg.validate()?;
        let n = env_cfg.n_agents;
        let mut envs = Vec::with_capacity(n_envs);
        let mut obs = Vec::with_capacity(n_envs);
        for i in 0..n_envs {
            let (env, o) = PathfindEnv::new(env_cfg.clone(), substream(seed, "env", i as u64));
            envs.push(env);
            obs.push(o);
        }
        Ok(Collector {
            envs,
            obs,
            actor_memory: vec![MemoryBank::zeros(n, hidden); n_envs],
            critic_memory: vec![MemoryBank::zeros(n, hidden); n_envs],
            topology: ChannelTopology::default_for(n)?,
            ep_return: vec![0.0; n_envs],
            ep_len: vec![0; n_envs],
            policy_rng: substream(seed, "policy", 0),
            disturbance_rng: substream(seed, "disturbance", 0),
        })
    }

    pub fn n_envs(&self) -> usize {
        self.envs.len()
    }

    /// Runs the sampled policy for `steps` steps in every environment.
    pub fn collect(
        &mut self,
        actor: &FcmNet,
        critic: &FcmNet,
        value_norm: &ValueNorm,
        dist: &DisturbanceConfig,
        steps: usize,
        shared_reward: bool,
    ) -> Result<(RolloutBuffer, EpisodeStats)> {
        dist.validate()?;
        let e_count = self.envs.len();
        let n = actor.n_agents();
        let h = actor.hidden();
        let mut buf = RolloutBuffer::new(n, actor.obs_dim(), h, e_count, steps)?;
        let mut stats = EpisodeStats::default();
        let all: Vec<usize> = (0..e_count).collect();
        for t in 0..steps {
            let draws = draw_step(dist, &self.topology, e_count, &mut self.disturbance_rng);
            let obs = stack_obs(&self.obs.iter().collect::<Vec<_>>())?;
            let a_mem = stack_memory(&self.actor_memory, &all)?;
            let c_mem = stack_memory(&self.critic_memory, &all)?;
            let (logits, a_next) = eval_net(
                actor,
                &obs,
                &a_mem,
                &draws.topologies,
                &draws.actor,
                dist.grad_mode,
            )?;
            let (values, c_next) = eval_net(
                critic,
                &obs,
                &c_mem,
                &draws.topologies,
                &draws.critic,
                dist.grad_mode,
            )?;
            let (actions, log_probs) =
                choose_actions(&logits, ActMode::Sample, &mut self.policy_rng)?;

            for e in 0..e_count {
                for a in 0..n {
                    let r = a * e_count + e;
                    buf.obs.extend_from_slice(&self.obs[e][a]);
                    buf.actor_memory.extend_from_slice(a_mem.h.row(r));
                    buf.actor_memory.extend_from_slice(a_mem.c.row(r));
                    buf.critic_memory.extend_from_slice(c_mem.h.row(r));
                    buf.critic_memory.extend_from_slice(c_mem.c.row(r));
                    buf.actions.push(actions[r]);
                    buf.log_probs.push(log_probs[r]);
                    buf.values.push(value_norm.denormalize(values.data()[r]));
                }
            }
            if dist.random_order {
                buf.topologies.extend(draws.topologies);
            }
            buf.actor_links.extend(draws.actor);
            buf.critic_links.extend(draws.critic);
            scatter_memory(&a_next, &mut self.actor_memory, &all);
            scatter_memory(&c_next, &mut self.critic_memory, &all);

            let mut truncated = Vec::new();
            for e in 0..e_count {
                let acts: Vec<usize> = (0..n).map(|a| actions[a * e_count + e]).collect();
                let res = self.envs[e].step(&acts).map_err(|err| Error::Env {
                    index: e,
                    msg: err.to_string(),
                })?;
                let rewards = if shared_reward {
                    let team = res.rewards.iter().sum::<f64>() / n as f64;
                    vec![team; n]
                } else {
                    res.rewards.clone()
                };
                let s = t * e_count + e;
                buf.rewards[s * n..(s + 1) * n].copy_from_slice(&rewards);
                buf.dones[s] = res.done;
                self.ep_return[e] += rewards.iter().sum::<f64>() / n as f64;
                self.ep_len[e] += 1;
                if res.done {
                    stats.returns.push(self.ep_return[e]);
                    stats.lengths.push(self.ep_len[e]);
                    stats.solved += usize::from(res.solved);
                    self.ep_return[e] = 0.0;
                    self.ep_len[e] = 0;
                    if !res.solved {
                        truncated.push((e, res.obs));
                    }
                    self.obs[e] = self.envs[e].reset();
                } else {
                    self.obs[e] = res.obs;
                }
            }
            if !truncated.is_empty() {
                let idx: Vec<usize> = truncated.iter().map(|(e, _)| *e).collect();
                let final_obs: Vec<&Vec<Vec<f64>>> = truncated.iter().map(|(_, o)| o).collect();
                let vals =
                    self.values_of(critic, value_norm, dist, &stack_obs(&final_obs)?, &idx)?;
                for (j, &e) in idx.iter().enumerate() {
                    let s = t * e_count + e;
                    for a in 0..n {
                        buf.truncation_values[s * n + a] = vals[a * idx.len() + j];
                    }
                }
            }
            for e in 0..e_count {
                if buf.dones[t * e_count + e] {
                    self.actor_memory[e].reset();
                    self.critic_memory[e].reset();
                }
            }
        }
        let obs = stack_obs(&self.obs.iter().collect::<Vec<_>>())?;
        let boot = self.values_of(critic, value_norm, dist, &obs, &all)?;
        buf.bootstrap = vec![0.0; e_count * n];
        for e in 0..e_count {
            for a in 0..n {
                buf.bootstrap[e * n + a] = boot[a * e_count + e];
            }
        }
        Ok((buf, stats))
    }

    /// Critic values (agent-major) for the listed environments' current
    /// critic memory and the given observations.
    fn values_of(
        &mut self,
        critic: &FcmNet,
        value_norm: &ValueNorm,
        dist: &DisturbanceConfig,
        obs: &Tensor,
        envs: &[usize],
    ) -> Result<Vec<f64>> {
        let draws = draw_step(dist, &self.topology, envs.len(), &mut self.disturbance_rng);
        let mem = stack_memory(&self.critic_memory, envs)?;
        let (v, _) = eval_net(
            critic,
            obs,
            &mem,
            &draws.topologies,
            &draws.critic,
            dist.grad_mode,
        )?;
        Ok(v.data()
            .iter()
            .map(|&x| value_norm.denormalize(x))
            .collect())
    }
}

/// Averages over every minibatch of an update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateMetrics {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Gradient sums and statistics of one chunk of a minibatch.
struct ChunkResult {
    actor_grads: Vec<Tensor>,
    critic_grads: Vec<Tensor>,
    actor_loss: f64,
    sq_err: f64,
    entropy: f64,
    clipped: usize,
}

struct MinibatchCtx<'a> {
    buf: &'a RolloutBuffer,
    actor: &'a FcmNet,
    critic: &'a FcmNet,
    cfg: &'a PpoConfig,
    grad_mode: GradMode,
    /// Normalised advantages of the minibatch, keyed by buffer position.
    adv: &'a [f64],
    /// Critic regression targets in the critic's output scale.
    targets: &'a [f64],
    denom: f64,
}

fn chunk_grads(ctx: &MinibatchCtx, steps: &[usize]) -> Result<ChunkResult> {
    let buf = ctx.buf;
    let cfg = ctx.cfg;

    let (obs, memory, topologies, links) = buf.batch(steps, false)?;
    let mut tape = Tape::new();
    let bound = ctx.actor.bind(&mut tape);
    let fv = ctx.actor.forward_vars(
        &mut tape,
        &bound,
        &ForwardInput {
            obs: &obs,
            memory: &memory,
            topologies: &topologies,
            links: &links,
            grad_mode: ctx.grad_mode,
        },
    )?;
    let lv = record_actor_loss(
        &mut tape,
        fv.out,
        &buf.gather(&buf.actions, steps),
        &buf.gather(&buf.log_probs, steps),
        &buf.gather(ctx.adv, steps),
        cfg.clip_eps,
        cfg.entropy_coef,
        ctx.denom,
    )?;
    let mut grads = tape.backward(lv.loss)?;
    let actor_grads = bound.params.iter().map(|&p| grads.take(p)).collect();
    let clipped = tape
        .value(lv.ratios)
        .data()
        .iter()
        .filter(|r| (*r - 1.0).abs() > cfg.clip_eps)
        .count();
    let actor_loss = tape.value(lv.loss).data()[0];
    let entropy = tape.value(lv.entropy_sum).data()[0];
    drop(tape);

    let (obs, memory, topologies, links) = buf.batch(steps, true)?;
    let mut tape = Tape::new();
    let bound = ctx.critic.bind(&mut tape);
    let fv = ctx.critic.forward_vars(
        &mut tape,
        &bound,
        &ForwardInput {
            obs: &obs,
            memory: &memory,
            topologies: &topologies,
            links: &links,
            grad_mode: ctx.grad_mode,
        },
    )?;
    let (loss, sq) = record_critic_loss(
        &mut tape,
        fv.out,
        &buf.gather(ctx.targets, steps),
        cfg.value_coef,
        ctx.denom,
    )?;
    let mut grads_c = tape.backward(loss)?;
    let critic_grads = bound.params.iter().map(|&p| grads_c.take(p)).collect();
    Ok(ChunkResult {
        actor_grads,
        critic_grads,
        actor_loss,
        sq_err: tape.value(sq).data()[0],
        entropy,
        clipped,
    })
}

fn add_into(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>) -> Result<()> {
    match acc {
        None => *acc = Some(grads),
        Some(sum) => {
            for (s, g) in sum.iter_mut().zip(&grads) {
                s.axpy(1.0, g)?;
            }
        }
    }
    Ok(())
}

/// Zero-mean, unit-variance copy of the advantages at the given timesteps;
/// other positions are left at zero.
fn normalized_advantages(buf: &RolloutBuffer, steps: &[usize], out: &mut [f64]) {
    let n = buf.n_agents;
    let vals: Vec<f64> = steps
        .iter()
        .flat_map(|&s| buf.advantages[s * n..(s + 1) * n].iter().copied())
        .collect();
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
    let scale = 1.0 / (var.sqrt() + 1e-8);
    for &s in steps {
        for k in s * n..(s + 1) * n {
            out[k] = (buf.advantages[k] - m) * scale;
        }
    }
}

/// Shuffles the timesteps `0..total` and cuts them into `count` contiguous
/// minibatches whose sizes differ by at most one. Indices are whole
/// timesteps, so every minibatch carries all agents of each step.
pub fn minibatches<R: Rng + ?Sized>(total: usize, count: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    (0..count)
        .map(|m| order[m * total / count..(m + 1) * total / count].to_vec())
        .collect()
}

/// Runs the PPO epochs over a full buffer and applies the Adam steps.
///
/// Minibatches are made of whole timesteps so every sample carries all `n`
/// agents through the channels. Chunks of a minibatch may be processed on up
/// to `threads` workers; their gradients are summed in a fixed order, so the
/// result does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn update<R: Rng + ?Sized>(
    actor: &mut FcmNet,
    critic: &mut FcmNet,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    grad_mode: GradMode,
    actor_opt: &mut AdamState,
    critic_opt: &mut AdamState,
    value_norm: &mut ValueNorm,
    rng: &mut R,
    threads: usize,
) -> Result<UpdateMetrics> {
    cfg.validate()?;
    if buf.advantages.len() != buf.transitions() {
        return Err(Error::Contract(
            "advantages must be computed before the update".into(),
        ));
    }
    let total = buf.len();
    if total / cfg.minibatches == 0 {
        return Err(Error::Config(format!(
            "{} minibatches over {total} timesteps leaves an empty minibatch",
            cfg.minibatches
        )));
    }
    value_norm.update(&buf.targets);
    let targets: Vec<f64> = buf
        .targets
        .iter()
        .map(|&t| value_norm.normalize(t))
        .collect();
    let mut adv = vec![0.0; buf.transitions()];
    let mut metrics = UpdateMetrics::default();
    let mut batches = 0usize;
    for _ in 0..cfg.epochs {
        for steps in minibatches(total, cfg.minibatches, rng) {
            let steps = steps.as_slice();
            normalized_advantages(buf, steps, &mut adv);
            let rows = (steps.len() * buf.n_agents) as f64;
            let ctx = MinibatchCtx {
                buf,
                actor,
                critic,
                cfg,
                grad_mode,
                adv: &adv,
                targets: &targets,
                denom: rows,
            };
            let chunks: Vec<&[usize]> = steps.chunks(cfg.grad_chunk).collect();
            let results = run_chunks(&ctx, &chunks, threads)?;

            let mut a_sum = None;
            let mut c_sum = None;
            let (mut a_loss, mut sq, mut ent, mut clipped) = (0.0, 0.0, 0.0, 0usize);
            for r in results {
                add_into(&mut a_sum, r.actor_grads)?;
                add_into(&mut c_sum, r.critic_grads)?;
                a_loss += r.actor_loss;
                sq += r.sq_err;
                ent += r.entropy;
                clipped += r.clipped;
            }
            let mut a_grads = a_sum.expect("minibatch has at least one chunk");
            let mut c_grads = c_sum.expect("minibatch has at least one chunk");
            clip_grad_norm(&mut a_grads, cfg.max_grad_norm);
            clip_grad_norm(&mut c_grads, cfg.max_grad_norm);
            actor_opt.step(&mut actor.params_mut(), &a_grads)?;
            critic_opt.step(&mut critic.params_mut(), &c_grads)?;

            metrics.actor_loss += a_loss;
            metrics.critic_loss += sq / rows;
            metrics.entropy += ent / rows;
            metrics.clip_fraction += clipped as f64 / rows;
            batches += 1;
        }
    }
    let k = batches as f64;
    metrics.actor_loss /= k;
    metrics.critic_loss /= k;
    metrics.entropy /= k;
    metrics.clip_fraction /= k;
    Ok(metrics)
}

fn run_chunks(ctx: &MinibatchCtx, chunks: &[&[usize]], threads: usize) -> Result<Vec<ChunkResult>> {
    let threads = threads.clamp(1, chunks.len().max(1));
    if threads == 1 {
        return chunks.iter().map(|c| chunk_grads(ctx, c)).collect();
    }
    let mut slots: Vec<Option<Result<ChunkResult>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                scope.spawn(move || {
                    (w..chunks.len())
                        .step_by(threads)
                        .map(|i| (i, chunk_grads(ctx, chunks[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("gradient worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every chunk is assigned"))
        .collect()
}

/// Builds an Adam state for every parameter of `net`.
pub fn optimizer_for(net: &FcmNet, lr: f64) -> AdamState {
    let shapes: Vec<Vec<usize>> = net
        .named_params()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let config = crate::tensor::AdamConfig {
        lr,
        ..Default::default()
    };
    AdamState::new(config, shapes.iter().map(|s| s.as_slice()))
}
