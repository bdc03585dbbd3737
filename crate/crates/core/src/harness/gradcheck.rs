use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{param_group, ChannelTopology, FcmNet, ForwardInput, Role};
use crate::disturbance::{sample_step, GradMode, LinkDraws};
use crate::env::N_ACTIONS;
use crate::error::{Error, Result};
use crate::ppo::{record_actor_loss, record_critic_loss};
use crate::recurrent::LstmState;
use crate::seeding::substream;
use crate::tensor::{Tape, Tensor};

use super::ExperimentConfig;

const STEP: f64 = 1e-5;
const BATCH: usize = 2;
/// Entries sampled per parameter tensor; smaller tensors are checked fully.
const ENTRIES_PER_TENSOR: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub net: String,
    pub group: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
    /// Largest |∂(agent k's outputs)/∂(agent j's observation)| over j ≠ k.
    pub actor_cross_agent_grad: f64,
    pub critic_cross_agent_grad: f64,
    /// Whether the disturbance must cut every cross-agent gradient path.
    pub actor_cut_expected: bool,
    pub critic_cut_expected: bool,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let verdict = if g.max_rel_error <= self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            let _ = writeln!(
                s,
                "{:<6} {:<14} entries {:>4}  max rel err {:.3e}  {verdict}",
                g.net, g.group, g.entries, g.max_rel_error
            );
        }
        for (net, v, cut) in [
            (
                "actor",
                self.actor_cross_agent_grad,
                self.actor_cut_expected,
            ),
            (
                "critic",
                self.critic_cross_agent_grad,
                self.critic_cut_expected,
            ),
        ] {
            let note = if cut { " (must be 0)" } else { "" };
            let _ = writeln!(s, "{net:<6} cross-agent input gradient {v:.3e}{note}");
        }
        let _ = writeln!(s, "{}", if self.pass { "PASS" } else { "FAIL" });
        s
    }
}

/// A fixed synthetic batch on which both losses are evaluated.
struct Probe {
    obs: Tensor,
    memory: LstmState,
    topologies: Vec<ChannelTopology>,
    actor_links: Vec<LinkDraws>,
    critic_links: Vec<LinkDraws>,
    grad_mode: GradMode,
    actions: Vec<usize>,
    advantages: Vec<f64>,
    old_log_probs: Vec<f64>,
    targets: Vec<f64>,
    eps: f64,
    entropy_coef: f64,
    value_coef: f64,
}

impl Probe {
    fn input<'a>(&'a self, role: Role) -> ForwardInput<'a> {
        ForwardInput {
            obs: &self.obs,
            memory: &self.memory,
            topologies: &self.topologies,
            links: match role {
                Role::Actor => &self.actor_links,
                Role::Critic => &self.critic_links,
            },
            grad_mode: self.grad_mode,
        }
    }

    /// Loss value and, when asked, the gradient of every parameter.
    fn loss(&self, net: &FcmNet, with_grad: bool) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let fv = net.forward_vars(&mut tape, &bound, &self.input(net.role))?;
        let rows = self.obs.shape()[0] as f64;
        let loss = match net.role {
            Role::Actor => {
                record_actor_loss(
                    &mut tape,
                    fv.out,
                    &self.actions,
                    &self.old_log_probs,
                    &self.advantages,
                    self.eps,
                    self.entropy_coef,
                    rows,
                )?
                .loss
            }
            Role::Critic => {
                record_critic_loss(&mut tape, fv.out, &self.targets, self.value_coef, rows)?.0
            }
        };
        let value = tape.value(loss).data()[0];
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(loss)?;
        Ok((value, bound.params.iter().map(|&p| g.take(p)).collect()))
    }

    /// Largest input gradient leaking from another agent's observation into
    /// one agent's outputs.
    fn cross_agent_gradient(&self, net: &FcmNet) -> Result<f64> {
        let n = net.n_agents();
        let b = self.obs.shape()[0] / n;
        let mut worst = 0.0f64;
        for k in 0..n {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let fv = net.forward_vars(&mut tape, &bound, &self.input(net.role))?;
            let rows: Vec<usize> = (k * b..(k + 1) * b).collect();
            let mine = tape.gather_rows(fv.out, &rows)?;
            let total = tape.sum(mine);
            let g = tape.backward(total)?.wrt(fv.obs);
            let width = g.shape()[1];
            for r in 0..n * b {
                if r / b != k {
                    for v in &g.data()[r * width..(r + 1) * width] {
                        worst = worst.max(v.abs());
                    }
                }
            }
        }
        Ok(worst)
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares analytic gradients of the actor and critic losses with central
/// differences on a random batch, per parameter group.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, tolerance: f64) -> Result<GradcheckReport> {
    cfg.validate()?;
    let n = cfg.env.n_agents;
    if n > 3 {
        return Err(Error::Contract(format!(
            "gradcheck is meant for small teams (n <= 3), got n = {n}"
        )));
    }
    let (actor, critic) = cfg.build_nets()?;
    let mut rng = substream(cfg.seed, "gradcheck", 0);
    let rows = n * BATCH;
    let h = cfg.net.hidden;
    let dist = &cfg.disturbance;
    let base = ChannelTopology::default_for(n)?;
    let mut topologies = Vec::new();
    let mut actor_links = Vec::new();
    let mut critic_links = Vec::new();
    if dist.is_clean() {
        topologies.push(base);
    } else {
        for _ in 0..BATCH {
            let (t, a, c) = sample_step(dist, &base, &mut rng);
            topologies.push(t);
            actor_links.push(a);
            critic_links.push(c);
        }
    }
    let mut probe = Probe {
        obs: Tensor::uniform(&[rows, cfg.env.obs_dim()], 1.0, &mut rng),
        memory: LstmState {
            h: Tensor::uniform(&[rows, h], 0.5, &mut rng),
            c: Tensor::uniform(&[rows, h], 1.0, &mut rng),
        },
        topologies,
        actor_links,
        critic_links,
        grad_mode: dist.grad_mode,
        actions: (0..rows).map(|_| rng.random_range(0..N_ACTIONS)).collect(),
        advantages: (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect(),
        old_log_probs: Vec::new(),
        targets: (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect(),
        eps: cfg.ppo.clip_eps,
        entropy_coef: cfg.ppo.entropy_coef,
        value_coef: cfg.ppo.value_coef,
    };
    // Behaviour log-probs equal to the current policy put every ratio at 1,
    // inside the clip range where the surrogate is smooth.
    let (logits, _) = actor.evaluate(&probe.input(Role::Actor))?;
    probe.old_log_probs = (0..rows)
        .map(|r| crate::arch::log_softmax(logits.row(r))[probe.actions[r]])
        .collect();

    let mut groups = Vec::new();
    for net in [&actor, &critic] {
        let (_, analytic) = probe.loss(net, true)?;
        let mut worst: BTreeMap<String, (usize, f64)> = BTreeMap::new();
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        let mut work = net.clone();
        for (pi, name) in names.iter().enumerate() {
            let numel = analytic[pi].numel();
            let picks: Vec<usize> = if numel <= ENTRIES_PER_TENSOR {
                (0..numel).collect()
            } else {
                sample(&mut rng, numel, ENTRIES_PER_TENSOR).into_vec()
            };
            for &k in &picks {
                let orig = work.params_mut()[pi].data()[k];
                work.params_mut()[pi].data_mut()[k] = orig + STEP;
                let (up, _) = probe.loss(&work, false)?;
                work.params_mut()[pi].data_mut()[k] = orig - STEP;
                let (down, _) = probe.loss(&work, false)?;
                work.params_mut()[pi].data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                let e = rel_error(analytic[pi].data()[k], numeric);
                let entry = worst
                    .entry(param_group(name).to_string())
                    .or_insert((0, 0.0));
                entry.0 += 1;
                entry.1 = entry.1.max(e);
            }
        }
        for (group, (entries, max_rel_error)) in worst {
            groups.push(GroupCheck {
                net: net.role.name().to_string(),
                group,
                entries,
                max_rel_error,
            });
        }
    }

    let actor_cut_expected =
        dist.loss_p >= 1.0 || (dist.binarize && dist.grad_mode == GradMode::Stop);
    let critic_cut_expected = dist.loss_p >= 1.0 && dist.loss_in_critic;
    let actor_cross = probe.cross_agent_gradient(&actor)?;
    let critic_cross = probe.cross_agent_gradient(&critic)?;
    let pass = groups.iter().all(|g| g.max_rel_error <= tolerance)
        && (!actor_cut_expected || actor_cross == 0.0)
        && (!critic_cut_expected || critic_cross == 0.0);
    Ok(GradcheckReport {
        tolerance,
        groups,
        actor_cross_agent_grad: actor_cross,
        critic_cross_agent_grad: critic_cross,
        actor_cut_expected,
        critic_cut_expected,
        pass,
    })
}
