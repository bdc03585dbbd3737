#![allow(clippy::needless_range_loop)]

mod common;

use common::rng;
use fcmnet::env::{
    oracle_actions, write_trace, PathfindConfig, PathfindEnv, PathfindState, TraceRow, N_ACTIONS,
};
use fcmnet::Error;
use proptest::prelude::*;

fn cfg(n: usize) -> PathfindConfig {
    PathfindConfig {
        n_agents: n,
        ..PathfindConfig::default()
    }
}

/// One-sample Kolmogorov–Smirnov statistic against U(0, 1).
fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x))
        .fold(0.0, f64::max)
}

#[test]
fn reset_goals_are_uniform() {
    let c = cfg(2);
    let mut r = rng(1);
    let resets = 10_000;
    let mut coords: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(resets)).collect();
    for _ in 0..resets {
        let (s, _) = PathfindState::reset(&c, &mut r);
        for (k, g) in s.goals.iter().enumerate() {
            coords[2 * k].push(g[0]);
            coords[2 * k + 1].push(g[1]);
        }
    }
    // Asymptotic 1% critical value 1.628 / sqrt(N).
    let critical = 1.628 / (resets as f64).sqrt();
    for (k, xs) in coords.into_iter().enumerate() {
        let d = ks_uniform(xs);
        assert!(d < critical, "goal coordinate {k}: D = {d}");
    }
}

#[test]
fn reset_examples() {
    let c = cfg(5);
    let (s, obs) = PathfindState::reset(&c, &mut rng(2));
    assert_eq!(obs.len(), 5);
    assert!(obs.iter().all(|o| o.len() == 20));
    assert!(s.vel.iter().all(|v| *v == [0.0, 0.0]));
    assert_eq!(s.t, 0);
    for (i, o) in obs.iter().enumerate() {
        for g in &s.goals[i] {
            assert!(!o.contains(g), "agent {i} sees its own goal");
        }
    }
    let (s2, _) = PathfindState::reset(&c, &mut rng(2));
    assert_eq!(s, s2);
}

#[test]
fn observation_layout() {
    let c = cfg(4);
    let (mut s, _) = PathfindState::reset(&c, &mut rng(3));
    s.vel[2] = [0.01, -0.02];
    let o = s.observe(2, &c);
    assert_eq!(&o[0..2], &s.pos[2]);
    assert_eq!(&o[2..4], &[0.1, -0.2]);
    let others = [0, 1, 3];
    for (slot, &j) in others.iter().enumerate() {
        assert_eq!(&o[4 + 2 * slot..6 + 2 * slot], &s.pos[j]);
        assert_eq!(&o[10 + 2 * slot..12 + 2 * slot], &s.goals[j]);
    }
}

#[test]
fn swapping_two_other_goals_permutes_their_slots() {
    let c = cfg(5);
    let (s, _) = PathfindState::reset(&c, &mut rng(4));
    let before = s.observe(0, &c);
    let mut t = s.clone();
    t.goals.swap(1, 3);
    let after = t.observe(0, &c);
    // Goals of agents 1..4 occupy slots 0..3 of the goal block (offset 12).
    let slot = |j: usize| 12 + 2 * (j - 1);
    for k in 0..20 {
        let expected = if (slot(1)..slot(1) + 2).contains(&k) {
            before[k - slot(1) + slot(3)]
        } else if (slot(3)..slot(3) + 2).contains(&k) {
            before[k - slot(3) + slot(1)]
        } else {
            before[k]
        };
        assert_eq!(after[k], expected, "slot {k}");
    }
}

/// Independent restatement of the point-mass update for one agent.
fn reference_step(p: [f64; 2], v: [f64; 2], a: usize, c: &PathfindConfig) -> ([f64; 2], [f64; 2]) {
    let dir = match a {
        0 => [1.0, 0.0],
        1 => [-1.0, 0.0],
        2 => [0.0, 1.0],
        3 => [0.0, -1.0],
        _ => [0.0, 0.0],
    };
    let mut p2 = [0.0; 2];
    let mut v2 = [0.0; 2];
    for k in 0..2 {
        let nv = c.damping * v[k] + c.force * dir[k] * c.dt;
        let np = p[k] + nv * c.dt;
        if (0.0..=1.0).contains(&np) {
            p2[k] = np;
            v2[k] = nv;
        } else {
            p2[k] = np.clamp(0.0, 1.0);
            v2[k] = 0.0;
        }
    }
    (p2, v2)
}

#[test]
fn dynamics_match_reference_and_rewards_are_individual() {
    let c = PathfindConfig {
        relocate_p: 0.0,
        ..cfg(3)
    };
    let (mut env, _) = PathfindEnv::new(c.clone(), rng(5));
    let mut r = rng(6);
    for _ in 0..300 {
        use rand::Rng;
        let acts: Vec<usize> = (0..3).map(|_| r.random_range(0..N_ACTIONS)).collect();
        let prev = env.state.clone();
        let res = env.step(&acts).unwrap();
        for i in 0..3 {
            let (p, v) = reference_step(prev.pos[i], prev.vel[i], acts[i], &c);
            assert_eq!(env.state.pos[i], p);
            assert_eq!(env.state.vel[i], v);
            let d = ((p[0] - prev.goals[i][0]).powi(2) + (p[1] - prev.goals[i][1]).powi(2)).sqrt();
            assert_eq!(res.rewards[i], -d - c.time_penalty);
            assert_eq!(res.distances[i], d);
        }
        if res.done {
            break;
        }
    }
}

#[test]
fn idle_agent_at_rest_keeps_position() {
    let c = cfg(2);
    let (mut s, _) = PathfindState::reset(&c, &mut rng(7));
    let before = s.pos.clone();
    let res = s
        .step(
            &[4, 4],
            &PathfindConfig {
                relocate_p: 0.0,
                ..c.clone()
            },
            &mut rng(8),
        )
        .unwrap();
    assert_eq!(s.pos, before);
    for i in 0..2 {
        assert_eq!(res.rewards[i], -res.distances[i] - c.time_penalty);
    }
}

#[test]
fn agents_on_their_goals_terminate_immediately() {
    let c = cfg(3);
    let (mut s, _) = PathfindState::reset(&c, &mut rng(9));
    s.goals = s.pos.clone();
    let res = s
        .step(
            &[4, 4, 4],
            &PathfindConfig {
                relocate_p: 0.0,
                ..c
            },
            &mut rng(10),
        )
        .unwrap();
    assert!(res.done && res.solved);
}

#[test]
fn bad_actions_are_contract_errors() {
    let c = cfg(2);
    let (mut s, _) = PathfindState::reset(&c, &mut rng(11));
    assert!(matches!(
        s.step(&[0, 5], &c, &mut rng(0)),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        s.step(&[0], &c, &mut rng(0)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn relocation_rate_matches_configuration() {
    let c = PathfindConfig {
        relocate_p: 0.01,
        max_steps: 100_000,
        ..cfg(2)
    };
    let (mut env, _) = PathfindEnv::new(c, rng(12));
    let steps = 50_000;
    let mut moves = 0usize;
    for _ in 0..steps {
        let before = env.state.goals.clone();
        env.step(&[4, 4]).unwrap();
        moves += before
            .iter()
            .zip(&env.state.goals)
            .filter(|(a, b)| a != b)
            .count();
    }
    let trials = 2 * steps;
    let sigma = (0.01 * 0.99 / trials as f64).sqrt();
    assert!(
        (moves as f64 / trials as f64 - 0.01).abs() <= 3.0 * sigma,
        "{moves}"
    );
}

#[test]
fn straight_line_oracle_solves_from_any_start() {
    // Single agent on a grid of starts and goals, including corners.
    let c = PathfindConfig {
        relocate_p: 0.0,
        ..cfg(2)
    };
    let grid = [0.0, 0.13, 0.5, 0.77, 1.0];
    let mut worst = 0;
    for &px in &grid {
        for &py in &grid {
            for &gx in &grid {
                for &gy in &grid {
                    let (mut s, _) = PathfindState::reset(&c, &mut rng(13));
                    s.pos = vec![[px, py], [0.5, 0.5]];
                    s.goals = vec![[gx, gy], [0.5, 0.5]];
                    let mut t = 0;
                    loop {
                        let res = s.step(&oracle_actions(&s), &c, &mut rng(0)).unwrap();
                        t += 1;
                        if res.distances[0] < c.tau {
                            break;
                        }
                        assert!(
                            t < c.max_steps,
                            "start ({px},{py}) goal ({gx},{gy}) unsolved"
                        );
                    }
                    worst = worst.max(t);
                }
            }
        }
    }
    assert!(worst < c.max_steps);
}

#[test]
fn oracle_team_median_is_well_under_two_hundred_steps() {
    let c = PathfindConfig {
        relocate_p: 0.0,
        ..cfg(5)
    };
    let mut lengths = Vec::new();
    for e in 0..64 {
        let (mut env, _) = PathfindEnv::new(c.clone(), rng(100 + e));
        let len = loop {
            let res = env.step(&oracle_actions(&env.state)).unwrap();
            if res.done {
                assert!(res.solved);
                break env.state.t;
            }
        };
        lengths.push(len);
    }
    lengths.sort_unstable();
    assert!(lengths[32] < 200, "{lengths:?}");
}

#[test]
fn trace_rows_and_csv() {
    let c = cfg(2);
    let (mut s, _) = PathfindState::reset(&c, &mut rng(14));
    let res = s.step(&[0, 3], &c, &mut rng(15)).unwrap();
    let rows = TraceRow::from_step(&s, &[0, 3], &res.rewards);
    assert_eq!(rows.len(), 2);
    let mut out = Vec::new();
    write_trace(&mut out, &rows).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,agent,px,py,vx,vy,gx,gy,action,reward");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("1,1,"));
}

#[test]
fn config_validation() {
    for bad in [
        PathfindConfig { tau: 0.0, ..cfg(2) },
        PathfindConfig {
            max_steps: 0,
            ..cfg(2)
        },
        PathfindConfig {
            relocate_p: 1.1,
            ..cfg(2)
        },
        PathfindConfig {
            n_agents: 1,
            ..cfg(2)
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn state_invariants_hold_along_random_episodes(
        seed in any::<u64>(),
        n in 2usize..6,
        actions in prop::collection::vec(0usize..N_ACTIONS, 64),
    ) {
        let c = PathfindConfig { max_steps: 40, ..cfg(n) };
        let (mut env, _) = PathfindEnv::new(c.clone(), rng(seed));
        for (t, &a) in actions.iter().enumerate() {
            let acts: Vec<usize> = (0..n).map(|i| (a + i) % N_ACTIONS).collect();
            let res = env.step(&acts).unwrap();
            prop_assert_eq!(res.rewards.len(), n);
            prop_assert!(env.state.t <= c.max_steps);
            for p in &env.state.pos {
                prop_assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
            }
            for (r, d) in res.rewards.iter().zip(&res.distances) {
                prop_assert!(*r <= -c.time_penalty);
                prop_assert_eq!(*r == -c.time_penalty, *d == 0.0);
            }
            let all_close = res.distances.iter().all(|&d| d < c.tau);
            prop_assert_eq!(res.done, all_close || env.state.t == c.max_steps);
            if res.done {
                prop_assert!(t < c.max_steps);
                env.reset();
            }
        }
    }
}
