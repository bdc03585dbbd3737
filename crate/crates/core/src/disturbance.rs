//! Channel disturbances: Bernoulli message loss, stochastic binarization
//! through a per-channel autoencoder, and per-timestep order shuffling.
//!
//! Randomness is drawn up front into [`LinkDraws`] so that a forward pass is
//! a pure function of its inputs and can be replayed exactly during the
//! policy update.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ChannelTopology, Linear};
use crate::error::{Error, Result};
use crate::recurrent::StateVars;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// No gradient crosses the binarizer.
    #[default]
    Stop,
    /// The binarizer's backward rule is the identity.
    StraightThrough,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceConfig {
    /// Probability that a single inter-agent transmission is replaced by zeros.
    pub loss_p: f64,
    pub binarize: bool,
    pub binary_len: usize,
    pub grad_mode: GradMode,
    pub random_order: bool,
    /// Whether message loss also hits the critic's channels.
    pub loss_in_critic: bool,
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        DisturbanceConfig {
            loss_p: 0.0,
            binarize: false,
            binary_len: 20,
            grad_mode: GradMode::Stop,
            random_order: false,
            loss_in_critic: true,
        }
    }
}

impl DisturbanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.loss_p) {
            return Err(Error::Config(format!(
                "disturbance.loss_p must lie in [0, 1], got {}",
                self.loss_p
            )));
        }
        if self.binary_len == 0 {
            return Err(Error::Config(
                "disturbance.binary_len must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// True when a forward pass needs no per-link randomness at all.
    pub fn is_clean(&self) -> bool {
        self.loss_p == 0.0 && !self.binarize && !self.random_order
    }
}

/// Randomness consumed by one network's channels for one sample.
///
/// `keep` is indexed `[channel][link]` with `n - 1` links per channel;
/// `uniforms` is `[channel][link][bit]` and empty when binarization is off.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinkDraws {
    pub keep: Vec<bool>,
    pub uniforms: Vec<f64>,
}

impl LinkDraws {
    pub fn clean(n: usize) -> Self {
        LinkDraws {
            keep: vec![true; n * (n - 1)],
            uniforms: Vec::new(),
        }
    }

    /// Draws one Bernoulli loss event per transmission and, when `bits > 0`,
    /// the uniforms that drive the stochastic binarizer.
    pub fn sample<R: Rng + ?Sized>(n: usize, loss_p: f64, bits: usize, rng: &mut R) -> Self {
        let links = n * (n - 1);
        let keep = (0..links).map(|_| !drop_message(loss_p, rng)).collect();
        let uniforms = (0..links * bits).map(|_| rng.random::<f64>()).collect();
        LinkDraws { keep, uniforms }
    }
}

/// Samples the per-timestep randomness for the actor and critic of one
/// environment: the (possibly shuffled) topology and each network's link draws.
pub fn sample_step<R: Rng + ?Sized>(
    cfg: &DisturbanceConfig,
    topology: &ChannelTopology,
    rng: &mut R,
) -> (ChannelTopology, LinkDraws, LinkDraws) {
    let n = topology.n();
    let orders = if cfg.random_order {
        randomize_orders(topology, rng)
    } else {
        topology.clone()
    };
    let bits = if cfg.binarize { cfg.binary_len } else { 0 };
    let actor = LinkDraws::sample(n, cfg.loss_p, bits, rng);
    let critic_p = if cfg.loss_in_critic { cfg.loss_p } else { 0.0 };
    let critic = LinkDraws::sample(n, critic_p, 0, rng);
    (orders, actor, critic)
}

fn drop_message<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < p
}

/// Replaces the message by zero vectors with probability `p`.
pub fn apply_loss<R: Rng + ?Sized>(
    h: &Tensor,
    c: &Tensor,
    p: f64,
    rng: &mut R,
) -> (Tensor, Tensor) {
    if drop_message(p, rng) {
        (Tensor::zeros(h.shape()), Tensor::zeros(c.shape()))
    } else {
        (h.clone(), c.clone())
    }
}

/// Deterministic core of the binarizer: `+1` when `u < (1 + x) / 2`.
pub fn binarize_with_uniform(x: f64, u: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::NumericDomain {
            op: "binarize",
            value: x,
        });
    }
    Ok(if u < (1.0 + x) / 2.0 { 1.0 } else { -1.0 })
}

/// `b(x) ∈ {-1, 1}` with `P(b = 1) = (1 + x) / 2`.
pub fn binarize_scalar<R: Rng + ?Sized>(x: f64, rng: &mut R) -> Result<f64> {
    binarize_with_uniform(x, rng.random::<f64>())
}

/// Per-channel autoencoder around the binary code.
#[derive(Clone, Debug, PartialEq)]
pub struct BinarizerParams {
    /// `2H → bits`, followed by tanh.
    pub encoder: Linear,
    /// `bits → 2H`, no output activation.
    pub decoder: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BinarizerVars {
    pub enc_w: Var,
    pub enc_b: Var,
    pub dec_w: Var,
    pub dec_b: Var,
}

impl BinarizerParams {
    pub fn init<R: Rng + ?Sized>(hidden: usize, bits: usize, rng: &mut R) -> Self {
        BinarizerParams {
            encoder: Linear::init(2 * hidden, bits, 1.0, rng),
            decoder: Linear::init(bits, 2 * hidden, 1.0, rng),
        }
    }

    pub fn bits(&self) -> usize {
        self.encoder.out_width()
    }

    pub fn bind(&self, tape: &mut Tape) -> BinarizerVars {
        BinarizerVars {
            enc_w: tape.leaf(self.encoder.weight.clone()),
            enc_b: tape.leaf(self.encoder.bias.clone()),
            dec_w: tape.leaf(self.decoder.weight.clone()),
            dec_b: tape.leaf(self.decoder.bias.clone()),
        }
    }

    /// Encodes a `B × 2H` message into its `B × bits` continuous code.
    pub fn encode(&self, tape: &mut Tape, vars: &BinarizerVars, msg: Var) -> Result<Var> {
        let z = tape.matmul(msg, vars.enc_w)?;
        let z = tape.add_bias(z, vars.enc_b)?;
        Ok(tape.tanh(z))
    }
}

/// Sends a batch of `(h, c)` messages through encode → binarize → decode.
///
/// `uniforms` holds `B × bits` draws, row-major.
pub fn transmit_binarized(
    tape: &mut Tape,
    params: &BinarizerParams,
    vars: &BinarizerVars,
    msg: StateVars,
    uniforms: &[f64],
    mode: GradMode,
) -> Result<StateVars> {
    let hidden = tape.shape(msg.h)[1];
    let expected = params.encoder.in_width();
    if 2 * hidden != expected {
        return Err(Error::Config(format!(
            "binarizer expects messages of width {expected}, got {}",
            2 * hidden
        )));
    }
    let rows = tape.shape(msg.h)[0];
    if uniforms.len() != rows * params.bits() {
        return Err(Error::Config(format!(
            "binarizer needs {} draws for {rows} messages, got {}",
            rows * params.bits(),
            uniforms.len()
        )));
    }
    let joined = tape.concat(&[msg.h, msg.c], 1)?;
    let z = params.encode(tape, vars, joined)?;
    let code = tape.binarize(z, uniforms, mode == GradMode::StraightThrough)?;
    let rec = tape.matmul(code, vars.dec_w)?;
    let rec = tape.add_bias(rec, vars.dec_b)?;
    let parts = tape.split(rec, &[hidden, hidden], 1)?;
    Ok(StateVars {
        h: parts[0],
        c: parts[1],
    })
}

/// Shuffles every channel's prefix uniformly while keeping its owner last.
pub fn randomize_orders<R: Rng + ?Sized>(
    topology: &ChannelTopology,
    rng: &mut R,
) -> ChannelTopology {
    let orders = topology
        .orders()
        .iter()
        .enumerate()
        .map(|(owner, _)| {
            let mut prefix: Vec<usize> = (0..topology.n()).filter(|&a| a != owner).collect();
            prefix.shuffle(rng);
            prefix.push(owner);
            prefix
        })
        .collect();
    ChannelTopology::from_orders(orders).expect("shuffled prefix plus owner is a permutation")
}
