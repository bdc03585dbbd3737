//! Helpers shared by the integration tests: seeded generators, a central
//! finite-difference oracle, and small network fixtures.
#![allow(dead_code)]

use fcmnet::arch::{ChannelTopology, FcmNet, ForwardInput, Linear, NetConfig, Role};
use fcmnet::disturbance::{GradMode, LinkDraws};
use fcmnet::env::N_ACTIONS;
use fcmnet::recurrent::{lstm_step, LstmState};
use fcmnet::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Largest relative error between the tape's gradient of `build` and central
/// differences with step `h`, over every entry of every input.
pub fn fd_check(inputs: &[Tensor], h: f64, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let run = |vals: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let value = tape.value(loss).data()[0];
        let g = tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| g.wrt(v)).collect())
    };
    let (_, analytic) = run(inputs);
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for k in 0..inputs[i].numel() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let up = run(&work).0;
            work[i].data_mut()[k] = orig - h;
            let down = run(&work).0;
            work[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i].data()[k], numeric, 1e-6));
        }
    }
    worst
}

/// Reduces a node to a scalar through fixed pseudo-random weights so every
/// output entry carries a distinct sensitivity.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let w = Tensor::uniform(&shape, 1.0, &mut rng(seed));
    let w = tape.leaf(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

pub fn actor(n: usize, obs_dim: usize, hidden: usize, seed: u64) -> FcmNet {
    let cfg = NetConfig {
        hidden,
        encoder_width: hidden,
        post_width: hidden,
    };
    FcmNet::new(
        Role::Actor,
        n,
        obs_dim,
        N_ACTIONS,
        &cfg,
        None,
        &mut rng(seed),
    )
    .unwrap()
}

pub fn critic(n: usize, obs_dim: usize, hidden: usize, seed: u64) -> FcmNet {
    let cfg = NetConfig {
        hidden,
        encoder_width: hidden,
        post_width: hidden,
    };
    FcmNet::new(
        Role::Critic,
        n,
        obs_dim,
        N_ACTIONS,
        &cfg,
        None,
        &mut rng(seed),
    )
    .unwrap()
}

/// Random observations (`n·B × obs_dim`) and self-memory for a batch.
pub fn batch_inputs(
    n: usize,
    batch: usize,
    obs_dim: usize,
    hidden: usize,
    seed: u64,
) -> (Tensor, LstmState) {
    let mut r = rng(seed);
    let obs = Tensor::uniform(&[n * batch, obs_dim], 1.0, &mut r);
    let mem = LstmState {
        h: Tensor::uniform(&[n * batch, hidden], 0.5, &mut r),
        c: Tensor::uniform(&[n * batch, hidden], 1.0, &mut r),
    };
    (obs, mem)
}

/// Undisturbed forward outputs with the default topology.
pub fn clean_outputs(net: &FcmNet, obs: &Tensor, mem: &LstmState) -> Tensor {
    let topo = [ChannelTopology::default_for(net.n_agents()).unwrap()];
    net.evaluate(&ForwardInput {
        obs,
        memory: mem,
        topologies: &topo,
        links: &[],
        grad_mode: GradMode::Stop,
    })
    .unwrap()
    .0
}

/// Forward outputs with explicit link draws, one entry per sample.
pub fn outputs_with_links(
    net: &FcmNet,
    obs: &Tensor,
    mem: &LstmState,
    links: &[LinkDraws],
) -> Tensor {
    let topo = [ChannelTopology::default_for(net.n_agents()).unwrap()];
    net.evaluate(&ForwardInput {
        obs,
        memory: mem,
        topologies: &topo,
        links,
        grad_mode: GradMode::Stop,
    })
    .unwrap()
    .0
}

/// Bitwise equality of shape and every entry.
pub fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// The forward pass with every inter-agent message forced to zero, assembled
/// directly from the layers: each channel unit then sees a zero state, so all
/// agents of a channel can be evaluated in one step.
pub fn hard_zeroed_forward(net: &FcmNet, obs: &Tensor, mem: &LstmState) -> Tensor {
    let mut tape = Tape::new();
    let rows = obs.shape()[0];
    let h = net.hidden();
    let o = tape.leaf(obs.clone());
    let ev = net.encoder.bind(&mut tape);
    let enc = Linear::apply(&mut tape, &ev, o).unwrap();
    let enc = tape.tanh(enc);
    let mut parts = Vec::new();
    for ch in &net.channels {
        let cv = ch.bind(&mut tape);
        let zero = LstmState::zeros_batch(rows, h).bind(&mut tape);
        parts.push(lstm_step(&mut tape, &cv, enc, zero).unwrap().h);
    }
    let sv = net.selfmem.bind(&mut tape);
    let m = mem.bind(&mut tape);
    parts.push(lstm_step(&mut tape, &sv, o, m).unwrap().h);
    let feat = tape.concat(&parts, 1).unwrap();
    let pv = net.post.bind(&mut tape);
    let z = Linear::apply(&mut tape, &pv, feat).unwrap();
    let z = tape.tanh(z);
    let hv = net.head.bind(&mut tape);
    let out = Linear::apply(&mut tape, &hv, z).unwrap();
    tape.value(out).clone()
}

/// Direct evaluation of the truncated advantage sum
/// `Â_t = Σ_k (γλ)^{k−t} · Π_{m<k} (1 − done_m) · δ_k`.
pub fn brute_force_gae(
    r: &[f64],
    v: &[f64],
    d: &[bool],
    boot: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let len = r.len();
    let live = |t: usize| if d[t] { 0.0 } else { 1.0 };
    let delta = |k: usize| {
        let next = if k + 1 < len { v[k + 1] } else { boot };
        r[k] + gamma * next * live(k) - v[k]
    };
    (0..len)
        .map(|t| {
            let mut total = 0.0;
            for k in t..len {
                let mut weight = (gamma * lambda).powi((k - t) as i32);
                for m in t..k {
                    weight *= live(m);
                }
                total += weight * delta(k);
            }
            total
        })
        .collect()
}
