//! The training loop: lockstep rollouts into `D`, per-agent dynamics
//! training, intrinsic re-scoring into `D'`, SAC updates, greedy evaluation
//! and convergence detection, plus the experiments built on top of it.

mod config;
mod eval;
mod experiments;

pub use config::TrainConfig;
pub use eval::{
    evaluate, evaluate_policy, export_traces, mean_and_stderr, random_baseline, zero_shot_swap,
    EvalMetrics, RunCheckpoint, SwapTeam, TeamPolicy, ZeroShotReport,
};
pub use experiments::{noise_ablation, run_reward_mse, scale_sweep, AblationRow, ScaleRow};

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsModel, NextObsPredictor, PredictionQuery};
use crate::error::{Error, Result};
use crate::intrinsic::{intrinsic_rewards, neighbor_sets, total_reward};
use crate::nn::{write_checkpoint, Checkpoint, OptimState};
use crate::sac::{
    policy_actions, ActionMode, AgentLearner, BufferKind, LossReport, NeighborMask, Transition,
};
use crate::tasks::{self, Observation, TaskSpec, Visibility};
use crate::world::{apply_actions, DiscreteAction, Physics, WorldState};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Column order of `metrics.csv`. Empty cells mean "not applicable" (no
/// dynamics model, no update performed, no adversaries).
pub const METRICS_HEADER: [&str; 18] = [
    "epoch",
    "env_steps",
    "updates",
    "train_ex_reward",
    "train_in_reward",
    "dyn_mse",
    "reward_mse",
    "critic1_loss",
    "critic2_loss",
    "actor_loss",
    "entropy",
    "eval_reward",
    "eval_reward_stderr",
    "eval_occupancy",
    "eval_collisions",
    "eval_min_target_dist",
    "eval_min_adv_dist",
    "best_eval_reward",
];

const ROLLOUT_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const AGENT_STREAM_BASE: u64 = 16;
const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

fn agent_dir(checkpoint_dir: &Path, agent: usize) -> PathBuf {
    checkpoint_dir.join(format!("agent_{agent}"))
}

/// Observations of every agent in every state, indexed `[state][agent]`.
fn observe_all(states: &[WorldState], spec: &TaskSpec) -> Result<Vec<Vec<Observation>>> {
    states
        .iter()
        .map(|s| {
            (0..spec.n_total_agents())
                .map(|i| tasks::observe(s, i, spec))
                .collect()
        })
        .collect()
}

fn obs_matrix(obs: &[Vec<Observation>], agent: usize, dim: usize) -> Array2<f64> {
    let mut x = Array2::zeros((obs.len(), dim));
    for (mut row, o) in x.rows_mut().into_iter().zip(obs) {
        row.as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(&o[agent].values);
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub env_steps: usize,
    /// Gradient updates performed per agent this epoch.
    pub updates: usize,
    /// Per agent, mean episode extrinsic reward of this epoch's rollouts.
    pub train_ex_reward: Vec<f64>,
    /// Per agent, mean intrinsic reward of the re-scored sample.
    pub train_in_reward: Vec<Option<f64>>,
    /// Per agent, dynamics training MSE.
    pub dyn_mse: Vec<Option<f64>>,
    /// Team mean of the per-entry squared error of reward-time predictions
    /// (noise included) against the true next observation.
    pub reward_mse: Option<f64>,
    /// Mean over agents and updates.
    pub losses: Option<LossReport>,
    pub eval: EvalMetrics,
    pub best_eval_reward: f64,
    pub wall_clock_seconds: f64,
}

fn team_mean(values: &[Option<f64>], n_team: usize) -> Option<f64> {
    let v: Vec<f64> = values[..n_team].iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EpochReport {
    pub fn csv_record(&self, n_team: usize) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let train_ex = self.train_ex_reward[..n_team].iter().sum::<f64>() / n_team as f64;
        vec![
            self.epoch.to_string(),
            self.env_steps.to_string(),
            self.updates.to_string(),
            train_ex.to_string(),
            opt(team_mean(&self.train_in_reward, n_team)),
            opt(team_mean(&self.dyn_mse, n_team)),
            opt(self.reward_mse),
            opt(self.losses.map(|l| l.critic1_loss)),
            opt(self.losses.map(|l| l.critic2_loss)),
            opt(self.losses.map(|l| l.actor_loss)),
            opt(self.losses.map(|l| l.entropy)),
            self.eval.reward_mean.to_string(),
            opt(self.eval.reward_stderr),
            self.eval.occupancy_per_step.to_string(),
            self.eval.collisions_per_step.to_string(),
            self.eval.min_target_dist.to_string(),
            opt(self.eval.min_adv_dist),
            self.best_eval_reward.to_string(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxEpochs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: TrainConfig,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    pub best_eval_reward: f64,
    pub final_eval: EvalMetrics,
    pub reports: Vec<EpochReport>,
}

/// Dynamics model of one team agent with its optimizer.
#[derive(Debug, Clone)]
pub struct AgentDynamics {
    pub model: DynamicsModel,
    pub opt: OptimState,
}

#[derive(Debug)]
struct Agent {
    learner: AgentLearner,
    dynamics: Option<AgentDynamics>,
    rng: ChaCha8Rng,
}

/// Per-agent output of the scoring phase.
struct Scored {
    in_reward: Option<f64>,
    dyn_mse: Option<f64>,
    reward_mse: Option<f64>,
}

/// Training state of one run. [`Trainer::run_epoch`] performs one epoch;
/// [`run`] drives it to convergence and writes the run directory.
pub struct Trainer {
    config: TrainConfig,
    physics: Physics,
    agents: Vec<Agent>,
    rollout_rng: ChaCha8Rng,
    epoch: usize,
    env_steps: usize,
    best_eval: f64,
    since_best: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let spec = &config.task;
        let seed = config.seed();
        let obs_dim = spec.obs_dim();
        let mut agents = Vec::with_capacity(spec.n_total_agents());
        for i in 0..spec.n_total_agents() {
            let net_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let learner = AgentLearner::new(i, obs_dim, config.sac.clone(), net_seed)?;
            let dynamics = if config.reward_mode.uses_dynamics() && !spec.is_adversary(i) {
                let model = DynamicsModel::new(obs_dim, &config.dyn_hidden, i, net_seed ^ 0xd1a5)?
                    .with_noise(config.noise_sigma)?;
                let opt = OptimState::new(&model.net.params, config.dyn_lr)?;
                Some(AgentDynamics { model, opt })
            } else {
                None
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(AGENT_STREAM_BASE + i as u64);
            agents.push(Agent {
                learner,
                dynamics,
                rng,
            });
        }
        let mut rollout_rng = ChaCha8Rng::seed_from_u64(seed);
        rollout_rng.set_stream(ROLLOUT_STREAM);
        Ok(Self {
            config,
            physics: Physics::default(),
            agents,
            rollout_rng,
            epoch: 0,
            env_steps: 0,
            best_eval: f64::NEG_INFINITY,
            since_best: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn learners(&self) -> impl Iterator<Item = &AgentLearner> {
        self.agents.iter().map(|a| &a.learner)
    }

    pub fn learner(&self, agent: usize) -> &AgentLearner {
        &self.agents[agent].learner
    }

    pub fn dynamics(&self, agent: usize) -> Option<&AgentDynamics> {
        self.agents[agent].dynamics.as_ref()
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// True once the best evaluation reward has not improved for
    /// `convergence_patience` consecutive epochs.
    pub fn converged(&self) -> bool {
        self.since_best >= self.config.convergence_patience
    }

    pub fn best_eval_reward(&self) -> f64 {
        self.best_eval
    }

    /// Phase 1: `B` lockstep episodes under the stochastic policies; every
    /// agent's transitions go to its `D`. Returns mean episode reward per
    /// agent.
    fn collect(&mut self) -> Result<Vec<f64>> {
        let spec = &self.config.task;
        let n = spec.n_total_agents();
        let b = self.config.episodes_per_epoch;
        let mut states = (0..b)
            .map(|_| tasks::reset(spec, &mut self.rollout_rng))
            .collect::<Result<Vec<_>>>()?;
        let mut obs = observe_all(&states, spec)?;
        let mut returns = vec![0.0; n];
        for _ in 0..self.config.episode_length {
            let mut actions = vec![Vec::with_capacity(n); b];
            for (i, agent) in self.agents.iter().enumerate() {
                let x = obs_matrix(&obs, i, spec.obs_dim());
                let acts = policy_actions(
                    &agent.learner.actor,
                    x.view(),
                    ActionMode::Sample,
                    &mut self.rollout_rng,
                )?;
                for (joint, a) in actions.iter_mut().zip(acts) {
                    joint.push(a);
                }
            }
            let physics = &self.physics;
            let stepped: Vec<(WorldState, Vec<Observation>, Vec<Transition>)> = states
                .par_iter()
                .zip(&obs)
                .zip(&actions)
                .map(|((state, o), joint)| step_env(spec, physics, state, o, joint))
                .collect::<Result<_>>()?;
            states.clear();
            obs.clear();
            for (state, next_obs, transitions) in stepped {
                for t in transitions {
                    returns[t.agent] += t.reward;
                    self.agents[t.agent].learner.push_transition(t, BufferKind::D);
                }
                states.push(state);
                obs.push(next_obs);
            }
            self.env_steps += b;
        }
        Ok(returns.into_iter().map(|r| r / b as f64).collect())
    }

    /// Phases 2 and 3, per agent: train the dynamics model on a sample of
    /// `D`, then re-score a fresh sample with the trained model into `D'`.
    fn train_dynamics_and_score(&mut self) -> Result<Vec<Scored>> {
        let cfg = &self.config;
        let layout = cfg.task.layout();
        let obs_dim = cfg.task.obs_dim();
        self.agents
            .par_iter_mut()
            .map(|agent| {
                let d = &agent.learner.buffer_d;
                let mut dyn_mse = None;
                if let Some(dm) = agent.dynamics.as_mut() {
                    let sample = d.sample(cfg.dyn_samples.min(d.len()), &mut agent.rng);
                    for _ in 0..cfg.dyn_epochs {
                        dyn_mse = Some(dm.model.train_epoch(
                            &sample,
                            cfg.dyn_batch_size,
                            &mut dm.opt,
                            &mut agent.rng,
                        )?);
                    }
                }
                let sample = d.sample(cfg.reward_samples.min(d.len()), &mut agent.rng);
                let (rescored, in_reward, reward_mse) = match &agent.dynamics {
                    None => {
                        let copies: Vec<Transition> =
                            sample.iter().map(|t| t.rescored(t.reward)).collect();
                        (copies, None, None)
                    }
                    Some(dm) => {
                        let model: &dyn NextObsPredictor = &dm.model;
                        let r_in = intrinsic_rewards(
                            cfg.reward_mode,
                            &sample,
                            &layout,
                            Some(model),
                            &mut agent.rng,
                        )?;
                        let copies = sample
                            .iter()
                            .zip(&r_in)
                            .map(|(t, &r)| t.rescored(total_reward(t.agent, t.reward, r, obs_dim).r_total))
                            .collect();
                        let mean_in = r_in.iter().sum::<f64>() / r_in.len() as f64;
                        let mse = reward_time_mse(&dm.model, &sample, &mut agent.rng)?;
                        (copies, Some(mean_in), Some(mse))
                    }
                };
                for t in rescored {
                    agent.learner.buffer_dprime.push(t);
                }
                Ok(Scored {
                    in_reward,
                    dyn_mse,
                    reward_mse,
                })
            })
            .collect()
    }

    /// Phase 4. Agents whose `D'` is still smaller than one minibatch skip
    /// their updates.
    fn update_policies(&mut self) -> Result<(usize, Option<LossReport>)> {
        let n_updates = self.config.updates_per_epoch();
        let per_agent: Vec<Vec<LossReport>> = self
            .agents
            .par_iter_mut()
            .map(|agent| {
                if agent.learner.buffer_dprime.len() < agent.learner.config.batch_size {
                    return Ok(Vec::new());
                }
                (0..n_updates)
                    .map(|_| agent.learner.update(&mut agent.rng))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let all: Vec<&LossReport> = per_agent.iter().flatten().collect();
        let updates = per_agent.iter().map(Vec::len).max().unwrap_or(0);
        if all.is_empty() {
            return Ok((updates, None));
        }
        let k = all.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| all.iter().map(|l| f(l)).sum::<f64>() / k;
        Ok((
            updates,
            Some(LossReport {
                critic1_loss: avg(|l| l.critic1_loss),
                critic2_loss: avg(|l| l.critic2_loss),
                actor_loss: avg(|l| l.actor_loss),
                entropy: avg(|l| l.entropy),
            }),
        ))
    }

    pub fn evaluate(&self) -> Result<EvalMetrics> {
        let actors: Vec<_> = self.agents.iter().map(|a| a.learner.actor.clone()).collect();
        evaluate_policy(
            TeamPolicy::Greedy(&actors),
            &self.config.task,
            self.config.eval_episodes,
            self.config.episode_length,
            self.config.seed(),
        )
    }

    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let start = Instant::now();
        let train_ex_reward = self.collect()?;
        let scored = self.train_dynamics_and_score()?;
        let (updates, losses) = self.update_policies()?;
        let eval = self.evaluate()?;
        if eval.reward_mean > self.best_eval + IMPROVEMENT_THRESHOLD {
            self.best_eval = eval.reward_mean;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        let n_team = self.config.task.n_agents;
        let report = EpochReport {
            epoch: self.epoch,
            env_steps: self.env_steps,
            updates,
            train_ex_reward,
            train_in_reward: scored.iter().map(|s| s.in_reward).collect(),
            dyn_mse: scored.iter().map(|s| s.dyn_mse).collect(),
            reward_mse: team_mean(
                &scored.iter().map(|s| s.reward_mse).collect::<Vec<_>>(),
                n_team,
            ),
            losses,
            eval,
            best_eval_reward: self.best_eval,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        Ok(report)
    }

    /// Writes the config snapshot and per-agent networks (plus dynamics
    /// models) under `run_dir`.
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let config_path = run_dir.join(CONFIG_FILE);
        std::fs::write(&config_path, self.config.to_toml_string()?)
            .map_err(|e| Error::io(&config_path, e))?;
        let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
        for (i, agent) in self.agents.iter().enumerate() {
            let dir = agent_dir(&ckpt_dir, i);
            agent.learner.save(&dir)?;
            if let Some(dm) = &agent.dynamics {
                write_checkpoint(
                    &dir.join("dynamics.bin"),
                    &Checkpoint {
                        spec: dm.model.net.spec.clone(),
                        params: dm.model.net.params.clone(),
                        optimizer: Some(dm.opt.clone()),
                    },
                )?;
            }
        }
        Ok(())
    }
}

/// Steps `state` under `joint` and returns the next state with every agent's
/// transition, as stored in `D` during training.
pub fn step_transitions(
    spec: &TaskSpec,
    physics: &Physics,
    state: &WorldState,
    joint: &[DiscreteAction],
) -> Result<(WorldState, Vec<Transition>)> {
    let obs: Vec<Observation> = (0..spec.n_total_agents())
        .map(|i| tasks::observe(state, i, spec))
        .collect::<Result<_>>()?;
    let (next, _, transitions) = step_env(spec, physics, state, &obs, joint)?;
    Ok((next, transitions))
}

/// Steps one environment and builds each agent's transition, recording the
/// neighbor sets and masks of the pre-step state.
fn step_env(
    spec: &TaskSpec,
    physics: &Physics,
    state: &WorldState,
    obs: &[Observation],
    joint: &[DiscreteAction],
) -> Result<(WorldState, Vec<Observation>, Vec<Transition>)> {
    let next = apply_actions(state, joint, physics)?;
    let rewards = tasks::extrinsic_reward(state, joint, &next, spec)?;
    let next_obs: Vec<Observation> = (0..spec.n_total_agents())
        .map(|i| tasks::observe(&next, i, spec))
        .collect::<Result<_>>()?;
    let neighbors = neighbor_sets(state, spec);
    let masks = |list: &[usize]| -> Vec<NeighborMask> {
        list.iter()
            .map(|&j| NeighborMask {
                agent: j,
                pre: obs[j].visibility.clone(),
                post: next_obs[j].visibility.clone(),
            })
            .collect()
    };
    let transitions = (0..spec.n_total_agents())
        .map(|i| Transition {
            agent: i,
            obs: obs[i].values.clone(),
            action: joint[i],
            reward: rewards[i],
            next_obs: next_obs[i].values.clone(),
            // episodes end on the time limit only, which is not a terminal state
            done: false,
            team_neighbors: masks(&neighbors.team[i]),
            adv_neighbors: masks(&neighbors.adversaries[i]),
        })
        .collect();
    Ok((next, next_obs, transitions))
}

/// Mean per-entry squared error of the model's reward-time (noisy)
/// prediction from the full own observation.
fn reward_time_mse(
    model: &DynamicsModel,
    sample: &[&Transition],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let Some(first) = sample.first() else {
        return Err(Error::EmptySample);
    };
    let all = Visibility(vec![true; first.obs.len()]);
    let queries: Vec<PredictionQuery<'_>> = sample
        .iter()
        .map(|t| PredictionQuery {
            obs: t.obs.clone(),
            mask: &all,
            action: t.action,
        })
        .collect();
    let preds = model.predict_batch(&queries, rng)?;
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(sample) {
        total += p.iter().zip(&t.next_obs).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / (sample.len() * first.obs.len()) as f64)
}

/// Result of [`run`].
pub struct RunOutcome {
    pub trainer: Trainer,
    pub reports: Vec<EpochReport>,
    pub stop_reason: StopReason,
}

/// Trains until convergence or `max_epochs`. With `run_dir`, streams
/// `metrics.csv` and `timings.csv` and finishes with the checkpoint, the
/// config snapshot and `summary.json`.
pub fn run(config: TrainConfig, run_dir: Option<&Path>) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(config)?;
    let n_team = trainer.config.task.n_agents;
    let mut writers = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let open = |name: &str| -> Result<csv::Writer<File>> {
                let path = dir.join(name);
                let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
                Ok(csv::Writer::from_writer(file))
            };
            let mut metrics = open(METRICS_FILE)?;
            metrics.write_record(METRICS_HEADER)?;
            let mut timings = open(TIMINGS_FILE)?;
            timings.write_record(["epoch", "wall_clock_seconds"])?;
            Some((metrics, timings))
        }
        None => None,
    };
    let mut reports = Vec::new();
    let stop_reason = loop {
        let report = trainer.run_epoch()?;
        if let Some((metrics, timings)) = writers.as_mut() {
            metrics.write_record(report.csv_record(n_team))?;
            metrics.flush().map_err(|e| Error::io(Path::new(METRICS_FILE), e))?;
            timings.write_record([
                report.epoch.to_string(),
                report.wall_clock_seconds.to_string(),
            ])?;
            timings.flush().map_err(|e| Error::io(Path::new(TIMINGS_FILE), e))?;
        }
        reports.push(report);
        if trainer.converged() {
            break StopReason::Converged;
        }
        if trainer.epochs_done() >= trainer.config.max_epochs {
            break StopReason::MaxEpochs;
        }
    };
    if let Some(dir) = run_dir {
        trainer.save(dir)?;
        let summary = RunSummary {
            config: trainer.config.clone(),
            epochs_run: reports.len(),
            stop_reason,
            best_eval_reward: trainer.best_eval,
            final_eval: reports.last().expect("at least one epoch").eval.clone(),
            reports: reports.clone(),
        };
        let path = dir.join(SUMMARY_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(file, &summary)?;
    }
    Ok(RunOutcome {
        trainer,
        reports,
        stop_reason,
    })
}
