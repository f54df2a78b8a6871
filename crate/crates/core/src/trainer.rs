//! Training loop, evaluation, rollouts and sub-step calibration.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::env::{Centroid, EnvConfig, Environment, GateAction};
use crate::nn::{policy_forward, sample_action, value_forward, MlpSpec, Network};
use crate::ppo::{ppo_update, PpoConfig, Trajectory};
use crate::render::render_frame;
use crate::seeding::{self, STREAM_ACTIONS, STREAM_CALIBRATE, STREAM_EPISODE, STREAM_EVAL, STREAM_INIT, STREAM_UPDATE};
use crate::{Error, Result};

pub const MOVING_AVERAGE_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub policy: Network,
    pub value: Network,
}

impl Agent {
    pub fn init(ppo: &PpoConfig, master_seed: u64) -> Self {
        let mut rng = seeding::rng(master_seed, STREAM_INIT, 0);
        let policy = Network::orthogonal(MlpSpec::policy(&ppo.hidden_sizes), 0.01, &mut rng);
        let value = Network::orthogonal(MlpSpec::value(&ppo.hidden_sizes), 1.0, &mut rng);
        Self { policy, value }
    }
}

pub enum ActionMode<'a> {
    Sample(&'a mut ChaCha8Rng),
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EpisodeStatus {
    Terminated,
    Truncated,
    /// The flow solver failed; the episode is scored 0.
    SolverError(String),
}

impl EpisodeStatus {
    pub fn label(&self) -> &'static str {
        match self {
            EpisodeStatus::Terminated => "terminated",
            EpisodeStatus::Truncated => "truncated",
            EpisodeStatus::SolverError(_) => "solver_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub field_seed: u64,
    pub trajectory: Trajectory,
    pub score: f64,
    pub steps: usize,
    pub status: EpisodeStatus,
    pub centroid: Option<Centroid>,
}

/// Play one episode on the field generated from `field_seed`.
///
/// The value network is queried only when given (training rollouts).
pub fn run_episode(
    env: &mut Environment,
    policy: &Network,
    value: Option<&Network>,
    field_seed: u64,
    mut mode: ActionMode<'_>,
) -> Result<EpisodeRecord> {
    let mut obs = env.reset(field_seed)?;
    let mut traj = Trajectory::default();
    loop {
        let input = obs.to_input();
        let dist = policy_forward(policy, &input)?;
        let (action, log_prob) = match &mut mode {
            ActionMode::Sample(rng) => sample_action(&dist, *rng),
            ActionMode::Greedy => {
                let a = dist.argmax();
                (a, dist.log_probs[a])
            }
        };
        let v = match value {
            Some(net) => value_forward(net, &input)?,
            None => 0.0,
        };
        let out = match env.step(GateAction::from_index(action)?) {
            Ok(out) => out,
            Err(e) => {
                traj.score = 0.0;
                return Ok(EpisodeRecord {
                    field_seed,
                    steps: traj.len(),
                    trajectory: traj,
                    score: 0.0,
                    status: EpisodeStatus::SolverError(e.to_string()),
                    centroid: None,
                });
            }
        };
        traj.push(input.to_vec(), action, log_prob, v, out.reward);
        obs = out.observation;
        if out.done {
            let score = out.info.score.unwrap_or(0.0);
            traj.terminal = !out.info.truncated;
            traj.score = score;
            let status = if out.info.truncated {
                EpisodeStatus::Truncated
            } else {
                EpisodeStatus::Terminated
            };
            return Ok(EpisodeRecord {
                field_seed,
                steps: traj.len(),
                trajectory: traj,
                score,
                status,
                centroid: out.info.centroid,
            });
        }
    }
}

/// Sampled training episodes `indices`, split over `workers` threads.
/// Results are ordered by index and independent of the worker count.
fn collect(
    agent: &Agent,
    env_cfg: &EnvConfig,
    master_seed: u64,
    indices: std::ops::Range<usize>,
    workers: usize,
) -> Result<Vec<EpisodeRecord>> {
    let play = |i: usize, env: &mut Environment| {
        let field_seed = seeding::derive(master_seed, STREAM_EPISODE, i as u64);
        let mut rng = seeding::rng(master_seed, STREAM_ACTIONS, i as u64);
        run_episode(env, &agent.policy, Some(&agent.value), field_seed, ActionMode::Sample(&mut rng))
    };
    let all: Vec<usize> = indices.collect();
    if workers <= 1 {
        let mut env = Environment::new(env_cfg.clone())?;
        return all.iter().map(|&i| play(i, &mut env)).collect();
    }
    let chunk = all.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = all
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut env = Environment::new(env_cfg.clone())?;
                    part.iter().map(|&i| play(i, &mut env)).collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(all.len());
        for h in handles {
            out.extend(h.join().expect("rollout worker panicked")?);
        }
        Ok(out)
    })
}

/// Mean of the last `min(window, n)` entries at every position.
pub fn moving_average(scores: &[f64], window: usize) -> Result<Vec<f64>> {
    if scores.is_empty() || window == 0 {
        return Err(Error::Usage(
            "moving average needs a non-empty series and window".into(),
        ));
    }
    Ok((0..scores.len())
        .map(|i| {
            let part = &scores[(i + 1).saturating_sub(window)..=i];
            part.iter().sum::<f64>() / part.len() as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub scores: Vec<f64>,
    pub moving_average: Vec<f64>,
    pub batches: usize,
    pub final_checkpoint: PathBuf,
    pub evaluation: Option<EvalStats>,
    pub agent: Agent,
}

pub const LOG_HEADER: &str = "episode,field_seed,score,moving_avg_100,steps,status,centroid_offset,\
policy_loss,value_loss,entropy,clip_fraction,approx_kl";

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Train from scratch. Writes `training_log.csv`, `timing.csv`,
/// `config.toml`, `checkpoints/ckpt_<batch>.bin` and, when
/// `eval_episodes > 0`, `evaluation.csv` under `cfg.output_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
    let log_path = out.join("training_log.csv");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(io_err(&log_path))?);
    writeln!(log, "{LOG_HEADER}").map_err(io_err(&log_path))?;
    let timing_path = out.join("timing.csv");
    let mut timing = std::io::BufWriter::new(std::fs::File::create(&timing_path).map_err(io_err(&timing_path))?);
    writeln!(timing, "batch,episodes,wall_clock_seconds").map_err(io_err(&timing_path))?;

    let env_cfg = cfg.env();
    let ppo = &cfg.ppo;
    let mut agent = Agent::init(ppo, cfg.master_seed);
    let batches = ppo.total_episodes.div_ceil(ppo.episodes_per_batch);
    let mut scores = Vec::with_capacity(ppo.total_episodes);
    let mut final_checkpoint = PathBuf::new();
    let start = Instant::now();
    for b in 0..batches {
        let lo = b * ppo.episodes_per_batch;
        let hi = (lo + ppo.episodes_per_batch).min(ppo.total_episodes);
        let records = collect(&agent, &env_cfg, cfg.master_seed, lo..hi, cfg.workers)?;
        let batch: Vec<Trajectory> = records
            .iter()
            .filter(|r| !matches!(r.status, EpisodeStatus::SolverError(_)) && r.steps > 0)
            .map(|r| r.trajectory.clone())
            .collect();
        let stats = if batch.is_empty() {
            None
        } else {
            let mut rng = seeding::rng(cfg.master_seed, STREAM_UPDATE, b as u64);
            Some(ppo_update(&mut agent.policy, &mut agent.value, &batch, ppo, &mut rng)?)
        };

        for (k, rec) in records.iter().enumerate() {
            scores.push(rec.score);
            let window = &scores[scores.len().saturating_sub(MOVING_AVERAGE_WINDOW)..];
            let ma = window.iter().sum::<f64>() / window.len() as f64;
            let mut row = format!(
                "{},{},{},{},{},{},",
                lo + k + 1,
                rec.field_seed,
                rec.score,
                ma,
                rec.steps,
                rec.status.label()
            );
            if let Some(c) = rec.centroid.filter(|_| rec.status == EpisodeStatus::Terminated) {
                write!(row, "{}", c.deviation()).unwrap();
            }
            match (&stats, k + 1 == records.len()) {
                (Some(s), true) => write!(
                    row,
                    ",{},{},{},{},{}",
                    s.policy_loss, s.value_loss, s.entropy, s.clip_fraction, s.approx_kl
                )
                .unwrap(),
                _ => row.push_str(",,,,,"),
            }
            writeln!(log, "{row}").map_err(io_err(&log_path))?;
            if let EpisodeStatus::SolverError(msg) = &rec.status {
                eprintln!("episode {}: {msg}", lo + k + 1);
            }
        }
        log.flush().map_err(io_err(&log_path))?;
        writeln!(timing, "{},{},{:.3}", b + 1, hi, start.elapsed().as_secs_f64())
            .map_err(io_err(&timing_path))?;

        if (b + 1) % cfg.checkpoint_every == 0 || b + 1 == batches {
            let path = ckpt_dir.join(format!("ckpt_{}.bin", b + 1));
            Checkpoint {
                batch: (b + 1) as u64,
                episodes: hi as u64,
                config: cfg.clone(),
                policy: agent.policy.clone(),
                value: agent.value.clone(),
            }
            .save(&path)?;
            final_checkpoint = path;
        }
    }
    timing.flush().map_err(io_err(&timing_path))?;

    let evaluation = if cfg.eval_episodes > 0 {
        let stats = evaluate(&agent.policy, &env_cfg, cfg.eval_episodes, cfg.master_seed)?;
        let path = out.join("evaluation.csv");
        std::fs::write(&path, stats.to_csv()).map_err(io_err(&path))?;
        Some(stats)
    } else {
        None
    };
    let moving_average = moving_average(&scores, MOVING_AVERAGE_WINDOW)?;
    Ok(TrainSummary {
        output_dir: out,
        scores,
        moving_average,
        batches,
        final_checkpoint,
        evaluation,
        agent,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub scores: Vec<f64>,
    /// Terminal |c_y - c_center| per episode (NaN when undefined).
    pub offsets: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl EvalStats {
    fn from_records(records: &[EpisodeRecord]) -> Self {
        let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
        let offsets = records
            .iter()
            .map(|r| r.centroid.map_or(f64::NAN, |c| c.deviation()))
            .collect();
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            mean,
            std,
            min: scores.iter().cloned().fold(f64::INFINITY, f64::min),
            max: scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            scores,
            offsets,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("episode,score,centroid_offset\n");
        for (i, (sc, off)) in self.scores.iter().zip(&self.offsets).enumerate() {
            writeln!(s, "{},{},{}", i + 1, sc, off).unwrap();
        }
        s
    }
}

/// Field seed of evaluation episode `i` under evaluation seed `seed`.
pub fn eval_field_seed(seed: u64, i: usize) -> u64 {
    seeding::derive(seed, STREAM_EVAL, i as u64)
}

/// Greedy evaluation on `n` fresh fields.
pub fn evaluate(policy: &Network, env_cfg: &EnvConfig, n: usize, seed: u64) -> Result<EvalStats> {
    if n == 0 {
        return Err(Error::Usage("evaluation needs at least one episode".into()));
    }
    let mut env = Environment::new(env_cfg.clone())?;
    let records = (0..n)
        .map(|i| run_episode(&mut env, policy, None, eval_field_seed(seed, i), ActionMode::Greedy))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalStats::from_records(&records))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSummary {
    pub dir: PathBuf,
    pub steps: usize,
    pub score: f64,
    pub centroid: Option<Centroid>,
    pub frames: usize,
}

pub const TRACE_HEADER: &str =
    "step,action,p_top,p_bottom,p_both,reward,active_sensors,pairs_completed,c_y,done";

/// Greedy episode on the field generated directly from `seed`, traced to
/// `<out>/rollout_<seed>/trace.csv` with one frame per step when `render`.
pub fn rollout(policy: &Network, env_cfg: &EnvConfig, seed: u64, out: &Path, render: bool) -> Result<RolloutSummary> {
    let dir = out.join(format!("rollout_{seed}"));
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut env = Environment::new(env_cfg.clone())?;
    let mut obs = env.reset(seed)?;
    let perm_path = dir.join("permeability.csv");
    let file = std::fs::File::create(&perm_path).map_err(io_err(&perm_path))?;
    env.field()
        .write_csv(std::io::BufWriter::new(file))
        .map_err(io_err(&perm_path))?;

    let mut trace = String::from(TRACE_HEADER);
    trace.push('\n');
    let mut frames = 0;
    loop {
        let dist = policy_forward(policy, &obs.to_input())?;
        let action = GateAction::from_index(dist.argmax())?;
        let out = env.step(action)?;
        obs = out.observation;
        let t = out.info.step_index;
        writeln!(
            trace,
            "{t},{},{},{},{},{},{},{},{},{}",
            action.name(),
            dist.probs[0],
            dist.probs[1],
            dist.probs[2],
            out.reward,
            obs.active_count(),
            out.info.pairs_completed,
            out.info.centroid.map_or(String::new(), |c| c.c_y.to_string()),
            u8::from(out.done)
        )
        .unwrap();
        if render {
            let img = render_frame(env.field(), env.state(), env.sensors(), &obs, out.info.centroid.as_ref());
            img.save(&dir.join(format!("frame_{t:04}.ppm")))?;
            frames += 1;
        }
        if out.done {
            let path = dir.join("trace.csv");
            std::fs::write(&path, trace).map_err(io_err(&path))?;
            return Ok(RolloutSummary {
                dir,
                steps: t,
                score: out.info.score.unwrap_or(0.0),
                centroid: out.info.centroid,
                frames,
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Sub-steps to termination under Both-gates, one per field.
    pub substeps: Vec<usize>,
    /// (substeps_per_action, median episode length) for every candidate.
    pub candidates: Vec<(usize, f64)>,
    pub chosen: usize,
    pub median_length: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Choose `substeps_per_action` so the median Both-gates episode length is
/// closest to `target_steps` (ties go to the smaller value).
///
/// Each field is run once at one sub-step per action; under a constant
/// policy an episode with `n` sub-steps lasts `ceil(n / S)` actions.
pub fn calibrate(env_cfg: &EnvConfig, fields: usize, seed: u64, target_steps: f64) -> Result<Calibration> {
    if fields == 0 {
        return Err(Error::Usage("calibration needs at least one field".into()));
    }
    let mut cfg = env_cfg.clone();
    cfg.solver.substeps_per_action = 1;
    cfg.step_cap = usize::MAX;
    let mut env = Environment::new(cfg)?;
    let mut substeps = Vec::with_capacity(fields);
    for i in 0..fields {
        env.reset(seeding::derive(seed, STREAM_CALIBRATE, i as u64))?;
        loop {
            let out = env.step(GateAction::Both)?;
            if out.done {
                substeps.push(out.info.step_index);
                break;
            }
        }
    }
    let longest = *substeps.iter().max().unwrap();
    let candidates: Vec<(usize, f64)> = (1..=longest)
        .map(|s| {
            let lengths: Vec<f64> = substeps.iter().map(|&n| n.div_ceil(s) as f64).collect();
            (s, median(&lengths))
        })
        .collect();
    let &(chosen, median_length) = candidates
        .iter()
        .min_by(|a, b| (a.1 - target_steps).abs().total_cmp(&(b.1 - target_steps).abs()))
        .unwrap();
    Ok(Calibration {
        substeps,
        candidates,
        chosen,
        median_length,
    })
}

/// Evaluate the policy stored in a checkpoint under its embedded config.
pub fn evaluate_checkpoint(ck: &Checkpoint, n: usize, seed: u64) -> Result<EvalStats> {
    evaluate(&ck.policy, &ck.config.env(), n, seed)
}
