use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{FcmNet, NetConfig, Role};
use crate::disturbance::DisturbanceConfig;
use crate::env::PathfindConfig;
use crate::env::N_ACTIONS;
use crate::error::{Error, Result};
use crate::ppo::PpoConfig;
use crate::seeding::substream;

/// Complete description of a run. Unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Environment timesteps (not agent transitions) to train for.
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Episodes used for the random-policy and oracle baselines.
    pub baseline_episodes: usize,
    pub out_dir: PathBuf,
    pub env: PathfindConfig,
    pub net: NetConfig,
    pub ppo: PpoConfig,
    pub disturbance: DisturbanceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            total_steps: 2_000_000,
            eval_interval: 100_000,
            eval_episodes: 16,
            baseline_episodes: 80,
            out_dir: PathBuf::from("runs/default"),
            env: PathfindConfig::default(),
            net: NetConfig::default(),
            ppo: PpoConfig::default(),
            disturbance: DisturbanceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be at least 1".into()));
        }
        self.env.validate()?;
        self.net.validate()?;
        self.ppo.validate()?;
        self.disturbance.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Freshly initialised actor and critic, drawn from the `init` stream.
    pub fn build_nets(&self) -> Result<(FcmNet, FcmNet)> {
        let mut rng = substream(self.seed, "init", 0);
        let n = self.env.n_agents;
        let obs = self.env.obs_dim();
        let bits = self
            .disturbance
            .binarize
            .then_some(self.disturbance.binary_len);
        let actor = FcmNet::new(Role::Actor, n, obs, N_ACTIONS, &self.net, bits, &mut rng)?;
        let critic = FcmNet::new(Role::Critic, n, obs, N_ACTIONS, &self.net, None, &mut rng)?;
        Ok((actor, critic))
    }
}

/// Worker cap from `FCM_THREADS`, else the machine's parallelism.
pub fn threads_from_env() -> usize {
    std::env::var("FCM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
