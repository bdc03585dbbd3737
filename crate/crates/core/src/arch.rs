//! The FCMNet actor/critic network.
//!
//! Each agent encodes its observation with a shared fully-connected layer.
//! For every channel `j`, a chain of LSTM units (one per agent, parameters
//! shared within the channel) runs in the channel's order: the first unit
//! starts from a zero state and every unit hands its `(h, c)` pair to the
//! next. Each agent concatenates the hidden outputs of its units in all `n`
//! channels with the hidden output of its self-memory LSTM, then a tanh
//! layer and a linear head produce action logits (actor) or a value (critic).
//!
//! Batched evaluation stacks agents row-wise: the row for agent `a` of
//! sample `b` in a batch of `B` samples is `a * B + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::disturbance::{
    sample_step, transmit_binarized, BinarizerParams, BinarizerVars, DisturbanceConfig, GradMode,
    LinkDraws,
};
use crate::error::{Error, Result};
use crate::recurrent::{lstm_step, LstmParams, LstmState, LstmVars, StateVars};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Actor,
    Critic,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Actor => "actor",
            Role::Critic => "critic",
        }
    }
}

/// Fully-connected layer, weight stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// Uniform `±scale/sqrt(in)` weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, scale: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::uniform(&[input, output], scale / (input as f64).sqrt(), rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> LinearVars {
        LinearVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    pub fn apply(tape: &mut Tape, vars: &LinearVars, x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars.weight)?;
        tape.add_bias(y, vars.bias)
    }
}

/// Order in which each channel visits the agents (0-based indices).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelTopology {
    orders: Vec<Vec<usize>>,
    positions: Vec<Vec<usize>>,
}

impl ChannelTopology {
    /// Channel `i` visits `0, …, i-1, i+1, …, n-1` and then `i`.
    pub fn default_for(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Contract(format!(
                "a communication topology needs at least 2 agents, got {n}"
            )));
        }
        let orders = (0..n)
            .map(|owner| {
                (0..n)
                    .filter(|&a| a != owner)
                    .chain(std::iter::once(owner))
                    .collect()
            })
            .collect();
        Self::from_orders(orders)
    }

    pub fn from_orders(orders: Vec<Vec<usize>>) -> Result<Self> {
        let n = orders.len();
        let mut positions = vec![vec![usize::MAX; n]; n];
        for (j, order) in orders.iter().enumerate() {
            if order.len() != n {
                return Err(Error::Contract(format!(
                    "channel {j} has {} slots for {n} agents",
                    order.len()
                )));
            }
            for (k, &a) in order.iter().enumerate() {
                if a >= n || positions[j][a] != usize::MAX {
                    return Err(Error::Contract(format!(
                        "channel {j} order {order:?} is not a permutation"
                    )));
                }
                positions[j][a] = k;
            }
        }
        Ok(ChannelTopology { orders, positions })
    }

    pub fn n(&self) -> usize {
        self.orders.len()
    }

    pub fn orders(&self) -> &[Vec<usize>] {
        &self.orders
    }

    /// Slot of `agent` within `channel`.
    pub fn position(&self, channel: usize, agent: usize) -> usize {
        self.positions[channel][agent]
    }
}

/// Widths of the layers around the communication layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// LSTM hidden units; the message is `(h, c)`, twice this wide.
    pub hidden: usize,
    pub encoder_width: usize,
    pub post_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: 64,
            encoder_width: 64,
            post_width: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.encoder_width == 0 || self.post_width == 0 {
            return Err(Error::Config("net widths must be positive".into()));
        }
        Ok(())
    }
}

/// Per-agent self-memory states of one environment, stored as `n × H`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub state: LstmState,
}

impl MemoryBank {
    pub fn zeros(n: usize, hidden: usize) -> Self {
        MemoryBank {
            state: LstmState::zeros_batch(n, hidden),
        }
    }

    pub fn n(&self) -> usize {
        self.state.h.shape()[0]
    }

    pub fn reset(&mut self) {
        self.state.h.fill(0.0);
        self.state.c.fill(0.0);
    }
}

/// Everything a batched forward pass consumes besides the parameters.
#[derive(Clone, Copy, Debug)]
pub struct ForwardInput<'a> {
    /// `n·B × obs_dim`, agent-major.
    pub obs: &'a Tensor,
    /// Incoming self-memory, `n·B × H`, agent-major.
    pub memory: &'a LstmState,
    /// One topology shared by the batch, or one per sample.
    pub topologies: &'a [ChannelTopology],
    /// Empty for an undisturbed pass, otherwise one entry per sample.
    pub links: &'a [LinkDraws],
    pub grad_mode: GradMode,
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// The observation leaf, for probing input gradients.
    pub obs: Var,
    /// `n·B × out_dim`.
    pub out: Var,
    /// Concatenated per-agent features, `n·B × (n+1)·H`.
    pub features: Var,
    /// Hidden outputs per channel, each `n·B × H`, rows agent-major.
    pub channel_features: Vec<Var>,
    /// Outgoing self-memory state.
    pub memory: StateVars,
}

#[derive(Clone, Debug)]
pub struct BoundNet {
    encoder: LinearVars,
    channels: Vec<LstmVars>,
    binarizers: Vec<BinarizerVars>,
    selfmem: LstmVars,
    post: LinearVars,
    head: LinearVars,
    /// Leaves in the same order as [`FcmNet::named_params`].
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcmNet {
    pub role: Role,
    n: usize,
    obs_dim: usize,
    pub encoder: Linear,
    pub channels: Vec<LstmParams>,
    pub binarizers: Vec<BinarizerParams>,
    pub selfmem: LstmParams,
    pub post: Linear,
    pub head: Linear,
}

impl FcmNet {
    /// Builds a freshly initialised network. Binarizers are only created for
    /// an actor when `binary_len` is given.
    pub fn new<R: Rng + ?Sized>(
        role: Role,
        n: usize,
        obs_dim: usize,
        n_actions: usize,
        cfg: &NetConfig,
        binary_len: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if n < 2 {
            return Err(Error::Contract(format!(
                "FCMNet needs at least 2 agents, got {n}"
            )));
        }
        let h = cfg.hidden;
        let out_dim = match role {
            Role::Actor => n_actions,
            Role::Critic => 1,
        };
        let head_scale = match role {
            Role::Actor => 0.01,
            Role::Critic => 1.0,
        };
        let encoder = Linear::init(obs_dim, cfg.encoder_width, 1.0, rng);
        let channels = (0..n)
            .map(|_| LstmParams::init(cfg.encoder_width, h, rng))
            .collect();
        let binarizers = match (role, binary_len) {
            (Role::Actor, Some(bits)) => (0..n)
                .map(|_| BinarizerParams::init(h, bits, rng))
                .collect(),
            _ => Vec::new(),
        };
        let selfmem = LstmParams::init(obs_dim, h, rng);
        let post = Linear::init((n + 1) * h, cfg.post_width, 1.0, rng);
        let head = Linear::init(cfg.post_width, out_dim, head_scale, rng);
        Ok(FcmNet {
            role,
            n,
            obs_dim,
            encoder,
            channels,
            binarizers,
            selfmem,
            post,
            head,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn hidden(&self) -> usize {
        self.selfmem.hidden()
    }

    pub fn out_dim(&self) -> usize {
        self.head.out_width()
    }

    pub fn has_binarizers(&self) -> bool {
        !self.binarizers.is_empty()
    }

    /// Parameter names are `<role>.<group>.<tensor>`, with groups `encoder`,
    /// `channel.<j>` (1-based), `binarizer.<j>`, `selfmem` and `head`.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let role = self.role.name();
        let mut out = Vec::new();
        out.push((format!("{role}.encoder.weight"), &self.encoder.weight));
        out.push((format!("{role}.encoder.bias"), &self.encoder.bias));
        for (j, ch) in self.channels.iter().enumerate() {
            for (t, name) in ch.tensors().into_iter().zip(LSTM_NAMES) {
                out.push((format!("{role}.channel.{}.{name}", j + 1), t));
            }
        }
        for (j, b) in self.binarizers.iter().enumerate() {
            for (t, name) in binarizer_tensors(b).into_iter().zip(BINARIZER_NAMES) {
                out.push((format!("{role}.binarizer.{}.{name}", j + 1), t));
            }
        }
        for (t, name) in self.selfmem.tensors().into_iter().zip(LSTM_NAMES) {
            out.push((format!("{role}.selfmem.{name}"), t));
        }
        out.push((format!("{role}.head.hidden_weight"), &self.post.weight));
        out.push((format!("{role}.head.hidden_bias"), &self.post.bias));
        out.push((format!("{role}.head.out_weight"), &self.head.weight));
        out.push((format!("{role}.head.out_bias"), &self.head.bias));
        out
    }

    /// Mutable parameters, same order as [`FcmNet::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.encoder.weight, &mut self.encoder.bias];
        for ch in &mut self.channels {
            out.extend(ch.tensors_mut());
        }
        for b in &mut self.binarizers {
            out.extend([
                &mut b.encoder.weight,
                &mut b.encoder.bias,
                &mut b.decoder.weight,
                &mut b.decoder.bias,
            ]);
        }
        out.extend(self.selfmem.tensors_mut());
        out.extend([
            &mut self.post.weight,
            &mut self.post.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copies values for every parameter from `lookup`, checking shapes.
    pub fn load_params<'a>(&mut self, lookup: impl Fn(&str) -> Option<&'a Tensor>) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.params_mut()) {
            let src = lookup(name).ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("checkpoint lacks parameter `{name}`"),
            })?;
            if src.shape() != slot.shape() {
                return Err(Error::dim("load_params", slot.shape(), src.shape()));
            }
            *slot = src.clone();
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundNet {
        let encoder = self.encoder.bind(tape);
        let channels: Vec<LstmVars> = self.channels.iter().map(|c| c.bind(tape)).collect();
        let binarizers: Vec<BinarizerVars> = self.binarizers.iter().map(|b| b.bind(tape)).collect();
        let selfmem = self.selfmem.bind(tape);
        let post = self.post.bind(tape);
        let head = self.head.bind(tape);
        let mut params = vec![encoder.weight, encoder.bias];
        for c in &channels {
            params.extend([c.w_input, c.w_recurrent, c.bias]);
        }
        for b in &binarizers {
            params.extend([b.enc_w, b.enc_b, b.dec_w, b.dec_b]);
        }
        params.extend([selfmem.w_input, selfmem.w_recurrent, selfmem.bias]);
        params.extend([post.weight, post.bias, head.weight, head.bias]);
        BoundNet {
            encoder,
            channels,
            binarizers,
            selfmem,
            post,
            head,
            params,
        }
    }

    /// Records a batched forward pass on `tape`.
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        bound: &BoundNet,
        input: &ForwardInput,
    ) -> Result<ForwardVars> {
        let n = self.n;
        let h = self.hidden();
        let (rows, width) = input.obs.as_matrix()?;
        if width != self.obs_dim || rows % n != 0 || rows == 0 {
            return Err(Error::dim(
                "fcmnet forward",
                input.obs.shape(),
                &[n, self.obs_dim],
            ));
        }
        let batch = rows / n;
        if input.memory.h.shape() != [rows, h] || input.memory.c.shape() != [rows, h] {
            return Err(Error::dim(
                "fcmnet memory",
                input.memory.h.shape(),
                &[rows, h],
            ));
        }
        let topo_for = |b: usize| -> &ChannelTopology {
            if input.topologies.len() == 1 {
                &input.topologies[0]
            } else {
                &input.topologies[b]
            }
        };
        if input.topologies.len() != 1 && input.topologies.len() != batch {
            return Err(Error::Contract(format!(
                "{} topologies for a batch of {batch}",
                input.topologies.len()
            )));
        }
        if input.topologies.iter().any(|t| t.n() != n) {
            return Err(Error::Contract(
                "topology agent count differs from the network".into(),
            ));
        }
        let disturbed = !input.links.is_empty();
        let bits = self.binarizers.first().map_or(0, BinarizerParams::bits);
        if disturbed {
            if input.links.len() != batch {
                return Err(Error::Config(format!(
                    "{} link draws for a batch of {batch}",
                    input.links.len()
                )));
            }
            for l in input.links {
                if l.keep.len() != n * (n - 1) {
                    return Err(Error::Config(format!(
                        "link draws cover {} transmissions, the network has {}",
                        l.keep.len(),
                        n * (n - 1)
                    )));
                }
                if self.has_binarizers() && l.uniforms.len() != n * (n - 1) * bits {
                    return Err(Error::Config(format!(
                        "binarized messages need {} draws per sample, got {}",
                        n * (n - 1) * bits,
                        l.uniforms.len()
                    )));
                }
            }
        } else if self.has_binarizers() {
            return Err(Error::Config(
                "a binarizing network needs link draws for its code bits".into(),
            ));
        }

        let obs = tape.leaf(input.obs.clone());
        let enc = Linear::apply(tape, &bound.encoder, obs)?;
        let enc = tape.tanh(enc);

        let mut channel_features = Vec::with_capacity(n);
        for j in 0..n {
            let mut state = LstmState::zeros_batch(batch, h).bind(tape);
            let mut outputs = Vec::with_capacity(n);
            for k in 0..n {
                let idx: Vec<usize> = (0..batch)
                    .map(|b| topo_for(b).orders()[j][k] * batch + b)
                    .collect();
                let xk = tape.gather_rows(enc, &idx)?;
                let out = lstm_step(tape, &bound.channels[j], xk, state)?;
                outputs.push(out.h);
                if k + 1 < n {
                    state = self.transmit(tape, bound, out, j, k, batch, input)?;
                }
            }
            let by_position = tape.concat(&outputs, 0)?;
            let inv: Vec<usize> = (0..n)
                .flat_map(|a| (0..batch).map(move |b| (a, b)))
                .map(|(a, b)| topo_for(b).position(j, a) * batch + b)
                .collect();
            channel_features.push(tape.gather_rows(by_position, &inv)?);
        }

        let mem_in = input.memory.bind(tape);
        let memory = lstm_step(tape, &bound.selfmem, obs, mem_in)?;

        let mut parts = channel_features.clone();
        parts.push(memory.h);
        let features = tape.concat(&parts, 1)?;
        let z = Linear::apply(tape, &bound.post, features)?;
        let z = tape.tanh(z);
        let out = Linear::apply(tape, &bound.head, z)?;
        Ok(ForwardVars {
            obs,
            out,
            features,
            channel_features,
            memory,
        })
    }

    /// Disturbance pipeline for the message leaving slot `k` of channel `j`:
    /// binarize (actor only), then zero the samples whose transmission was lost.
    #[allow(clippy::too_many_arguments)]
    fn transmit(
        &self,
        tape: &mut Tape,
        bound: &BoundNet,
        msg: StateVars,
        j: usize,
        k: usize,
        batch: usize,
        input: &ForwardInput,
    ) -> Result<StateVars> {
        if input.links.is_empty() {
            return Ok(msg);
        }
        let n = self.n;
        let link = j * (n - 1) + k;
        let mut msg = msg;
        if let (Some(params), Some(vars)) = (self.binarizers.get(j), bound.binarizers.get(j)) {
            let bits = params.bits();
            let mut uniforms = Vec::with_capacity(batch * bits);
            for l in input.links {
                uniforms.extend_from_slice(&l.uniforms[link * bits..(link + 1) * bits]);
            }
            msg = transmit_binarized(tape, params, vars, msg, &uniforms, input.grad_mode)?;
        }
        let keep: Vec<bool> = input.links.iter().map(|l| l.keep[link]).collect();
        if keep.iter().all(|&k| k) {
            return Ok(msg);
        }
        Ok(StateVars {
            h: tape.mask_rows(msg.h, &keep)?,
            c: tape.mask_rows(msg.c, &keep)?,
        })
    }

    /// Forward pass without gradients: outputs and the next self-memory.
    pub fn evaluate(&self, input: &ForwardInput) -> Result<(Tensor, LstmState)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let v = self.forward_vars(&mut tape, &bound, input)?;
        Ok((
            tape.value(v.out).clone(),
            LstmState {
                h: tape.value(v.memory.h).clone(),
                c: tape.value(v.memory.c).clone(),
            },
        ))
    }
}

const LSTM_NAMES: [&str; 3] = ["w_input", "w_recurrent", "bias"];
const BINARIZER_NAMES: [&str; 4] = ["enc_weight", "enc_bias", "dec_weight", "dec_bias"];

fn binarizer_tensors(b: &BinarizerParams) -> [&Tensor; 4] {
    [
        &b.encoder.weight,
        &b.encoder.bias,
        &b.decoder.weight,
        &b.decoder.bias,
    ]
}

/// Parameter group of a full parameter name: `actor.channel.2.bias` → `channel.2`.
pub fn param_group(name: &str) -> &str {
    let without_role = name.split_once('.').map_or(name, |(_, rest)| rest);
    without_role
        .rsplit_once('.')
        .map_or(without_role, |(g, _)| g)
}

/// Single-environment forward: one observation vector per agent.
pub fn forward<R: Rng + ?Sized>(
    net: &FcmNet,
    topology: &ChannelTopology,
    obs: &[Vec<f64>],
    memory: &MemoryBank,
    disturbance: &DisturbanceConfig,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, MemoryBank)> {
    let n = net.n_agents();
    if obs.len() != n || memory.n() != n {
        return Err(Error::Contract(format!(
            "forward needs {n} observations and memories, got {} and {}",
            obs.len(),
            memory.n()
        )));
    }
    disturbance.validate()?;
    if disturbance.binarize != net.has_binarizers() && net.role == Role::Actor {
        return Err(Error::Config(
            "binarize setting does not match the network's binarizer layers".into(),
        ));
    }
    if net.has_binarizers() && disturbance.binary_len != net.binarizers[0].bits() {
        return Err(Error::Config(format!(
            "binary_len {} does not match the network's code width {}",
            disturbance.binary_len,
            net.binarizers[0].bits()
        )));
    }
    let obs_t = Tensor::from_rows(obs)?;
    let (topo, actor_links, critic_links) = sample_step(disturbance, topology, rng);
    let links = match net.role {
        Role::Actor => actor_links,
        Role::Critic => critic_links,
    };
    let links = [links];
    let topologies = [topo];
    let input = ForwardInput {
        obs: &obs_t,
        memory: &memory.state,
        topologies: &topologies,
        links: if disturbance.is_clean() { &[] } else { &links },
        grad_mode: disturbance.grad_mode,
    };
    let (out, mem) = net.evaluate(&input)?;
    let outputs = (0..n).map(|a| out.row(a).to_vec()).collect();
    Ok((outputs, MemoryBank { state: mem }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Index of the largest logit, lowest index on ties.
pub fn greedy_action(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Log-probabilities of a logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Draws an index from the categorical distribution given by `log_probs`.
pub fn sample_action<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Picks an action per logit row; returns actions and their log-probabilities.
pub fn choose_actions<R: Rng + ?Sized>(
    logits: &Tensor,
    mode: ActMode,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (rows, _) = logits.as_matrix()?;
    let mut actions = Vec::with_capacity(rows);
    let mut log_probs = Vec::with_capacity(rows);
    for r in 0..rows {
        let lp = log_softmax(logits.row(r));
        let a = match mode {
            ActMode::Greedy => greedy_action(logits.row(r)),
            ActMode::Sample => sample_action(&lp, rng),
        };
        actions.push(a);
        log_probs.push(lp[a]);
    }
    Ok((actions, log_probs))
}

/// Single-environment action selection for an actor network.
pub fn act<R: Rng + ?Sized>(
    net: &FcmNet,
    topology: &ChannelTopology,
    obs: &[Vec<f64>],
    memory: &MemoryBank,
    disturbance: &DisturbanceConfig,
    mode: ActMode,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<f64>, MemoryBank)> {
    if net.role != Role::Actor {
        return Err(Error::Contract("act requires an actor network".into()));
    }
    let (logits, memory) = forward(net, topology, obs, memory, disturbance, rng)?;
    let logits = Tensor::from_rows(&logits)?;
    let (actions, log_probs) = choose_actions(&logits, mode, rng)?;
    Ok((actions, log_probs, memory))
}
