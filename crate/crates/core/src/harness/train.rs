use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::arch::{ActMode, FcmNet};
use crate::error::{Error, Result};
use crate::ppo::{optimizer_for, update, Collector, ValueNorm};
use crate::seeding::substream;
use crate::tensor::checkpoint::Checkpoint;

use super::plot::{write_chart, Series};
use super::{
    evaluate_policy, oracle_baseline, random_baseline, threads_from_env, EvalReport,
    ExperimentConfig,
};

/// Contents of `summary.json`. Baselines are filled in before training starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub random_baseline: EvalReport,
    pub oracle_baseline: EvalReport,
    /// Half the random-policy mean episode length.
    pub convergence_bar: f64,
    pub env_steps: usize,
    pub iterations: usize,
    pub final_eval: Option<EvalReport>,
    pub converged: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub summary: Summary,
    pub evals: Vec<EvalReport>,
}

struct CsvFile {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvFile {
    fn create(path: PathBuf, header: &str) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut f = CsvFile {
            path,
            out: BufWriter::new(file),
        };
        f.row(header)?;
        Ok(f)
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn save_checkpoint(
    dir: &Path,
    cfg: &ExperimentConfig,
    actor: &FcmNet,
    critic: &FcmNet,
    value_norm: &ValueNorm,
    env_steps: usize,
) -> Result<()> {
    let params = actor
        .named_params()
        .into_iter()
        .chain(critic.named_params())
        .map(|(name, t)| (name, t.clone()))
        .collect();
    let ckpt = Checkpoint {
        meta: serde_json::json!({ "config": cfg, "env_steps": env_steps, "value_norm": value_norm }),
        params,
    };
    ckpt.save(&dir.join(format!("ckpt_{env_steps}.fcm")))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

/// Trains a fresh actor-critic pair and evaluates it greedily every
/// `eval_interval` environment steps.
///
/// The run directory receives `config.json`, `summary.json`, `metrics.csv`
/// (fully determined by the configuration), `timing.csv` (wall-clock only),
/// `eval.csv`, `ckpt_<steps>.fcm` files and the learning-curve charts.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join("config.json"), cfg)?;
    let threads = threads_from_env();
    let started = Instant::now();

    let (mut actor, mut critic) = cfg.build_nets()?;
    let random = random_baseline(&cfg.env, cfg.baseline_episodes, cfg.seed)?;
    let oracle = oracle_baseline(&cfg.env, cfg.baseline_episodes, cfg.seed)?;
    let mut summary = Summary {
        convergence_bar: 0.5 * random.mean_length,
        random_baseline: random,
        oracle_baseline: oracle,
        env_steps: 0,
        iterations: 0,
        final_eval: None,
        converged: None,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    let mut value_norm = ValueNorm::new(cfg.ppo.value_norm);
    save_checkpoint(&dir, cfg, &actor, &critic, &value_norm, 0)?;
    log::info!(
        "baselines: random {:.1}, oracle {:.1}",
        summary.random_baseline.mean_length,
        summary.oracle_baseline.mean_length
    );

    let mut metrics = CsvFile::create(
        dir.join("metrics.csv"),
        "iteration,env_steps,mean_return,mean_episode_length,actor_loss,critic_loss,entropy,clip_fraction",
    )?;
    let mut timing = CsvFile::create(dir.join("timing.csv"), "iteration,env_steps,wall_time_s")?;
    let mut eval_csv = CsvFile::create(
        dir.join("eval.csv"),
        "env_steps,mean_length,std_length,solved,lengths",
    )?;

    let mut collector = Collector::new(&cfg.env, cfg.ppo.n_envs, cfg.net.hidden, cfg.seed)?;
    let mut shuffle_rng = substream(cfg.seed, "shuffle", 0);
    let mut actor_opt = optimizer_for(&actor, cfg.ppo.lr);
    let mut critic_opt = optimizer_for(&critic, cfg.ppo.lr);
    let mut evals: Vec<EvalReport> = Vec::new();
    let mut train_curve = Series {
        label: "training episodes".into(),
        x: Vec::new(),
        y: Vec::new(),
        spread: None,
    };
    let mut steps = 0usize;
    let mut iteration = 0usize;
    let mut evaluated_at = 0usize;

    while steps < cfg.total_steps {
        let (mut buf, stats) = collector.collect(
            &actor,
            &critic,
            &value_norm,
            &cfg.disturbance,
            cfg.ppo.steps_per_env,
            cfg.ppo.shared_reward,
        )?;
        buf.compute_advantages(cfg.ppo.gamma, cfg.ppo.gae_lambda)?;
        let m = update(
            &mut actor,
            &mut critic,
            &buf,
            &cfg.ppo,
            cfg.disturbance.grad_mode,
            &mut actor_opt,
            &mut critic_opt,
            &mut value_norm,
            &mut shuffle_rng,
            threads,
        )?;
        steps += buf.len();
        iteration += 1;
        metrics.row(&format!(
            "{iteration},{steps},{},{},{},{},{},{}",
            opt(stats.mean_return()),
            opt(stats.mean_length()),
            m.actor_loss,
            m.critic_loss,
            m.entropy,
            m.clip_fraction
        ))?;
        timing.row(&format!(
            "{iteration},{steps},{:.3}",
            started.elapsed().as_secs_f64()
        ))?;
        if let Some(l) = stats.mean_length() {
            train_curve.x.push(steps as f64);
            train_curve.y.push(l);
        }
        log::info!(
            "iter {iteration} steps {steps}: episode length {} return {} entropy {:.3} clip {:.3}",
            opt(stats.mean_length()),
            opt(stats.mean_return()),
            m.entropy,
            m.clip_fraction
        );

        let crossed = steps / cfg.eval_interval > evaluated_at / cfg.eval_interval;
        let last = steps >= cfg.total_steps;
        if crossed || last {
            let report = evaluate_policy(
                &actor,
                &cfg.env,
                &cfg.disturbance,
                cfg.eval_episodes,
                cfg.seed,
                ActMode::Greedy,
                steps,
            )?;
            let lengths: Vec<String> = report.lengths.iter().map(|l| l.to_string()).collect();
            eval_csv.row(&format!(
                "{steps},{},{},{},{}",
                report.mean_length,
                report.std_length,
                report.solved,
                lengths.join(";")
            ))?;
            log::info!("eval at {steps}: mean length {:.1}", report.mean_length);
            save_checkpoint(&dir, cfg, &actor, &critic, &value_norm, steps)?;
            evaluated_at = steps;
            evals.push(report);
        }
    }

    summary.env_steps = steps;
    summary.iterations = iteration;
    if let Some(last) = evals.last() {
        summary.converged = Some(last.mean_length <= summary.convergence_bar);
        summary.final_eval = Some(last.clone());
    }
    write_json(&dir.join("summary.json"), &summary)?;
    let eval_curve = Series {
        label: "greedy evaluation".into(),
        x: evals.iter().map(|r| r.env_steps as f64).collect(),
        y: evals.iter().map(|r| r.mean_length).collect(),
        spread: Some(evals.iter().map(|r| r.std_length).collect()),
    };
    write_chart(
        &dir,
        "eval_curve",
        "Evaluation episode length",
        "environment steps",
        "episode length",
        &[eval_curve],
    )?;
    write_chart(
        &dir,
        "train_curve",
        "Training episode length",
        "environment steps",
        "episode length",
        &[train_curve],
    )?;
    Ok(TrainOutcome {
        dir,
        summary,
        evals,
    })
}
