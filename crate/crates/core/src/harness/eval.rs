use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{choose_actions, ActMode, ChannelTopology, FcmNet, ForwardInput, MemoryBank};
use crate::disturbance::{sample_step, DisturbanceConfig};
use crate::env::{oracle_actions, PathfindConfig, PathfindEnv, N_ACTIONS};
use crate::error::{Error, Result};
use crate::recurrent::LstmState;
use crate::seeding::substream;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::Tensor;

use super::ExperimentConfig;

/// Episode lengths of one evaluation round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env_steps: usize,
    pub mean_length: f64,
    pub std_length: f64,
    pub lengths: Vec<usize>,
    pub solved: usize,
}

impl EvalReport {
    fn from_lengths(env_steps: usize, lengths: Vec<usize>, solved: usize) -> Self {
        let k = lengths.len().max(1) as f64;
        let mean = lengths.iter().sum::<usize>() as f64 / k;
        let var = lengths
            .iter()
            .map(|&l| (l as f64 - mean).powi(2))
            .sum::<f64>()
            / k;
        EvalReport {
            env_steps,
            mean_length: mean,
            std_length: var.sqrt(),
            lengths,
            solved,
        }
    }
}

/// Runs `episodes` episodes side by side with the actor choosing actions.
///
/// Episode `i` always uses environment stream `eval.env/<i>`, so successive
/// evaluations of a training run face the same start states. The network is
/// only read.
pub fn evaluate_policy(
    actor: &FcmNet,
    env_cfg: &PathfindConfig,
    dist: &DisturbanceConfig,
    episodes: usize,
    seed: u64,
    mode: ActMode,
    env_steps: usize,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    env_cfg.validate()?;
    dist.validate()?;
    let n = env_cfg.n_agents;
    let h = actor.hidden();
    let base = ChannelTopology::default_for(n)?;
    let mut dist_rng = substream(seed, "eval.disturbance", 0);
    let mut policy_rng = substream(seed, "eval.policy", 0);
    let mut envs = Vec::with_capacity(episodes);
    let mut obs = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let (env, o) = PathfindEnv::new(env_cfg.clone(), substream(seed, "eval.env", i as u64));
        envs.push(env);
        obs.push(o);
    }
    let mut memory = vec![MemoryBank::zeros(n, h); episodes];
    let mut lengths = vec![0usize; episodes];
    let mut solved = 0;
    let mut active: Vec<usize> = (0..episodes).collect();
    while !active.is_empty() {
        let b = active.len();
        let mut obs_rows = Vec::with_capacity(n * b * env_cfg.obs_dim());
        let mut mh = Vec::with_capacity(n * b * h);
        let mut mc = Vec::with_capacity(n * b * h);
        for a in 0..n {
            for &e in &active {
                obs_rows.extend_from_slice(&obs[e][a]);
                mh.extend_from_slice(memory[e].state.h.row(a));
                mc.extend_from_slice(memory[e].state.c.row(a));
            }
        }
        let mut topologies = Vec::new();
        let mut links = Vec::new();
        if dist.is_clean() {
            topologies.push(base.clone());
        } else {
            for _ in 0..b {
                let (t, l, _) = sample_step(dist, &base, &mut dist_rng);
                topologies.push(t);
                links.push(l);
            }
        }
        let obs_t = Tensor::new(vec![n * b, env_cfg.obs_dim()], obs_rows)?;
        let mem = LstmState {
            h: Tensor::new(vec![n * b, h], mh)?,
            c: Tensor::new(vec![n * b, h], mc)?,
        };
        let (logits, next) = actor.evaluate(&ForwardInput {
            obs: &obs_t,
            memory: &mem,
            topologies: &topologies,
            links: &links,
            grad_mode: dist.grad_mode,
        })?;
        let (actions, _) = choose_actions(&logits, mode, &mut policy_rng)?;
        let mut still = Vec::with_capacity(b);
        for (j, &e) in active.iter().enumerate() {
            let acts: Vec<usize> = (0..n).map(|a| actions[a * b + j]).collect();
            let res = envs[e].step(&acts).map_err(|err| Error::Env {
                index: e,
                msg: err.to_string(),
            })?;
            lengths[e] += 1;
            for a in 0..n {
                memory[e].state.h.data_mut()[a * h..(a + 1) * h]
                    .copy_from_slice(next.h.row(a * b + j));
                memory[e].state.c.data_mut()[a * h..(a + 1) * h]
                    .copy_from_slice(next.c.row(a * b + j));
            }
            if res.done {
                solved += usize::from(res.solved);
            } else {
                obs[e] = res.obs;
                still.push(e);
            }
        }
        active = still;
    }
    Ok(EvalReport::from_lengths(env_steps, lengths, solved))
}

fn scripted_episodes<F>(
    env_cfg: &PathfindConfig,
    episodes: usize,
    seed: u64,
    stream: &str,
    mut policy: F,
) -> Result<EvalReport>
where
    F: FnMut(&PathfindEnv<rand_chacha::ChaCha8Rng>) -> Vec<usize>,
{
    env_cfg.validate()?;
    let mut lengths = Vec::with_capacity(episodes);
    let mut solved = 0;
    for i in 0..episodes {
        let (mut env, _) = PathfindEnv::new(env_cfg.clone(), substream(seed, stream, i as u64));
        let mut len = 0;
        loop {
            let acts = policy(&env);
            let res = env.step(&acts)?;
            len += 1;
            if res.done {
                solved += usize::from(res.solved);
                break;
            }
        }
        lengths.push(len);
    }
    Ok(EvalReport::from_lengths(0, lengths, solved))
}

/// Uniformly random actions: the untrained-policy reference length.
pub fn random_baseline(env_cfg: &PathfindConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    let mut rng = substream(seed, "baseline.policy", 0);
    let n = env_cfg.n_agents;
    scripted_episodes(env_cfg, episodes, seed, "baseline.env", |_| {
        (0..n).map(|_| rng.random_range(0..N_ACTIONS)).collect()
    })
}

/// Straight-line policy that is allowed to see its own goal.
pub fn oracle_baseline(env_cfg: &PathfindConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    scripted_episodes(env_cfg, episodes, seed, "baseline.env", |env| {
        oracle_actions(&env.state)
    })
}

/// A checkpoint restored into networks, with the configuration it was
/// trained under.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub actor: FcmNet,
    pub critic: FcmNet,
    pub env_steps: usize,
}

pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path)?;
    let meta_err = |m: &str| Error::Format {
        offset: 8,
        msg: format!("checkpoint header: {m}"),
    };
    let config: ExperimentConfig = serde_json::from_value(
        ckpt.meta
            .get("config")
            .cloned()
            .ok_or_else(|| meta_err("missing `config`"))?,
    )?;
    let env_steps = ckpt
        .meta
        .get("env_steps")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| meta_err("missing `env_steps`"))? as usize;
    let (mut actor, mut critic) = config.build_nets()?;
    actor.load_params(|name| ckpt.get(name))?;
    critic.load_params(|name| ckpt.get(name))?;
    Ok(Loaded {
        config,
        actor,
        critic,
        env_steps,
    })
}

/// Evaluates a saved policy under the disturbances it was configured with.
pub fn cmd_eval(ckpt: &Path, episodes: usize, mode: ActMode) -> Result<EvalReport> {
    let loaded = load_checkpoint(ckpt)?;
    let cfg = &loaded.config;
    evaluate_policy(
        &loaded.actor,
        &cfg.env,
        &cfg.disturbance,
        episodes,
        cfg.seed,
        mode,
        loaded.env_steps,
    )
}
