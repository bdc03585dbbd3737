//! Hidden-goal path-finding: point-mass agents in the unit square must each
//! reach a private goal that only their teammates can see.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of discrete actions: push +x, -x, +y, -y, or nothing.
pub const N_ACTIONS: usize = 5;

const DIRECTIONS: [[f64; 2]; N_ACTIONS] =
    [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [0.0, 0.0]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathfindConfig {
    pub n_agents: usize,
    /// Success radius around each goal.
    pub tau: f64,
    pub max_steps: usize,
    /// Per-goal, per-step probability of resampling the goal.
    pub relocate_p: f64,
    pub force: f64,
    /// Velocity retained per step.
    pub damping: f64,
    pub dt: f64,
    pub time_penalty: f64,
    /// Multiplier applied to the velocity entries of observations.
    pub velocity_obs_scale: f64,
}

impl Default for PathfindConfig {
    fn default() -> Self {
        PathfindConfig {
            n_agents: 5,
            tau: 0.01,
            max_steps: 1024,
            relocate_p: 0.01,
            force: 0.1,
            damping: 0.9,
            dt: 0.1,
            time_penalty: 0.05,
            velocity_obs_scale: 10.0,
        }
    }
}

impl PathfindConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("env.{m}")));
        if self.n_agents < 2 {
            return bad("n_agents must be at least 2");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.relocate_p) {
            return bad("relocate_p must lie in [0, 1]");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        Ok(())
    }

    /// Observation width: own position and velocity, teammates' positions,
    /// teammates' goals.
    pub fn obs_dim(&self) -> usize {
        4 * self.n_agents
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathfindState {
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
    pub goals: Vec<[f64; 2]>,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub done: bool,
    /// Every agent ended the step within `tau` of its goal.
    pub solved: bool,
    pub distances: Vec<f64>,
}

fn uniform_point<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    [rng.random::<f64>(), rng.random::<f64>()]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl PathfindState {
    pub fn reset<R: Rng + ?Sized>(cfg: &PathfindConfig, rng: &mut R) -> (Self, Vec<Vec<f64>>) {
        let n = cfg.n_agents;
        let pos = (0..n).map(|_| uniform_point(rng)).collect();
        let goals = (0..n).map(|_| uniform_point(rng)).collect();
        let state = PathfindState {
            pos,
            vel: vec![[0.0; 2]; n],
            goals,
            t: 0,
        };
        let obs = state.observe_all(cfg);
        (state, obs)
    }

    pub fn n(&self) -> usize {
        self.pos.len()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.pos
            .iter()
            .zip(&self.goals)
            .map(|(&p, &g)| dist(p, g))
            .collect()
    }

    /// Agent `i`'s view; its own goal appears nowhere in it.
    pub fn observe(&self, i: usize, cfg: &PathfindConfig) -> Vec<f64> {
        let n = self.n();
        let mut o = Vec::with_capacity(4 * n);
        o.extend_from_slice(&self.pos[i]);
        o.extend(self.vel[i].iter().map(|v| v * cfg.velocity_obs_scale));
        for j in (0..n).filter(|&j| j != i) {
            o.extend_from_slice(&self.pos[j]);
        }
        for j in (0..n).filter(|&j| j != i) {
            o.extend_from_slice(&self.goals[j]);
        }
        o
    }

    pub fn observe_all(&self, cfg: &PathfindConfig) -> Vec<Vec<f64>> {
        (0..self.n()).map(|i| self.observe(i, cfg)).collect()
    }

    pub fn step<R: Rng + ?Sized>(
        &mut self,
        actions: &[usize],
        cfg: &PathfindConfig,
        rng: &mut R,
    ) -> Result<StepResult> {
        let n = self.n();
        if actions.len() != n {
            return Err(Error::Contract(format!(
                "{} actions for {n} agents",
                actions.len()
            )));
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= N_ACTIONS) {
            return Err(Error::Contract(format!(
                "action index {a} out of range 0..{N_ACTIONS}"
            )));
        }
        for i in 0..n {
            let dir = DIRECTIONS[actions[i]];
            for k in 0..2 {
                let v = cfg.damping * self.vel[i][k] + cfg.force * dir[k] * cfg.dt;
                let p = self.pos[i][k] + v * cfg.dt;
                if !(0.0..=1.0).contains(&p) {
                    self.pos[i][k] = p.clamp(0.0, 1.0);
                    self.vel[i][k] = 0.0;
                } else {
                    self.pos[i][k] = p;
                    self.vel[i][k] = v;
                }
            }
        }
        for g in self.goals.iter_mut() {
            if rng.random::<f64>() < cfg.relocate_p {
                *g = uniform_point(rng);
            }
        }
        self.t += 1;
        let distances = self.distances();
        let rewards = distances.iter().map(|d| -d - cfg.time_penalty).collect();
        let solved = distances.iter().all(|&d| d < cfg.tau);
        let done = solved || self.t >= cfg.max_steps;
        Ok(StepResult {
            obs: self.observe_all(cfg),
            rewards,
            done,
            solved,
            distances,
        })
    }
}

/// Scripted policy that sees its own goal: push along the axis with the
/// larger remaining displacement.
pub fn oracle_actions(state: &PathfindState) -> Vec<usize> {
    state
        .pos
        .iter()
        .zip(&state.goals)
        .map(|(p, g)| {
            let dx = g[0] - p[0];
            let dy = g[1] - p[1];
            if dx.abs() >= dy.abs() {
                if dx >= 0.0 {
                    0
                } else {
                    1
                }
            } else if dy >= 0.0 {
                2
            } else {
                3
            }
        })
        .collect()
}

/// An environment instance owning its random stream.
#[derive(Clone, Debug)]
pub struct PathfindEnv<R> {
    pub cfg: PathfindConfig,
    pub state: PathfindState,
    pub rng: R,
}

impl<R: Rng> PathfindEnv<R> {
    pub fn new(cfg: PathfindConfig, mut rng: R) -> (Self, Vec<Vec<f64>>) {
        let (state, obs) = PathfindState::reset(&cfg, &mut rng);
        (PathfindEnv { cfg, state, rng }, obs)
    }

    pub fn reset(&mut self) -> Vec<Vec<f64>> {
        let (state, obs) = PathfindState::reset(&self.cfg, &mut self.rng);
        self.state = state;
        obs
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        self.state.step(actions, &self.cfg, &mut self.rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub agent: usize,
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
    pub action: usize,
    pub reward: f64,
}

impl TraceRow {
    /// One row per agent describing the state after a step.
    pub fn from_step(state: &PathfindState, actions: &[usize], rewards: &[f64]) -> Vec<TraceRow> {
        (0..state.n())
            .map(|i| TraceRow {
                t: state.t,
                agent: i,
                pos: state.pos[i],
                vel: state.vel[i],
                goal: state.goals[i],
                action: actions[i],
                reward: rewards[i],
            })
            .collect()
    }
}

pub fn write_trace<W: Write>(mut w: W, rows: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "t,agent,px,py,vx,vy,gx,gy,action,reward")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.agent,
            r.pos[0],
            r.pos[1],
            r.vel[0],
            r.vel[1],
            r.goal[0],
            r.goal[1],
            r.action,
            r.reward
        )?;
    }
    Ok(())
}
