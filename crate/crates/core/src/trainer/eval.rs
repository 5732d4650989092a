use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{agent_dir, obs_matrix, observe_all, TrainConfig, CHECKPOINT_DIR, CONFIG_FILE, EVAL_STREAM};
use crate::error::{Error, Result};
use crate::nn::{read_checkpoint, Mlp};
use crate::sac::{policy_actions, ActionMode};
use crate::tasks::{self, TaskSpec};
use crate::world::{apply_actions, DiscreteAction, Physics, TraceRecord, WorldState};

/// How actions are chosen during an evaluation rollout.
#[derive(Debug, Clone, Copy)]
pub enum TeamPolicy<'a> {
    /// Argmax of each agent's policy, one network per agent slot.
    Greedy(&'a [Mlp]),
    /// Uniformly random actions.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_episodes: usize,
    pub episode_length: usize,
    /// Mean over episodes of the team-mean episode extrinsic reward.
    pub reward_mean: f64,
    /// Standard error of `reward_mean`; `None` for a single episode.
    pub reward_stderr: Option<f64>,
    /// Mean episode extrinsic reward per agent (team then adversaries).
    pub agent_rewards: Vec<f64>,
    pub occupancy_per_step: f64,
    pub collisions_per_step: f64,
    /// Mean distance from a team agent to its nearest target landmark.
    pub min_target_dist: f64,
    pub min_adv_dist: Option<f64>,
}

fn eval_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    rng
}

fn joint_actions(
    policy: TeamPolicy<'_>,
    states: &[WorldState],
    spec: &TaskSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<DiscreteAction>>> {
    let n = spec.n_total_agents();
    let mut joint = vec![Vec::with_capacity(n); states.len()];
    match policy {
        TeamPolicy::Greedy(actors) => {
            let obs = observe_all(states, spec)?;
            for (i, actor) in actors.iter().enumerate() {
                let x = obs_matrix(&obs, i, spec.obs_dim());
                let acts = policy_actions(actor, x.view(), ActionMode::Greedy, rng)?;
                for (j, a) in joint.iter_mut().zip(acts) {
                    j.push(a);
                }
            }
        }
        TeamPolicy::Random => {
            for j in joint.iter_mut() {
                for _ in 0..n {
                    let k = rng.random_range(0..DiscreteAction::COUNT);
                    j.push(DiscreteAction::ALL[k]);
                }
            }
        }
    }
    Ok(joint)
}

/// Runs `n_episodes` lockstep episodes. Starting states depend only on
/// `seed`, so different policies are compared on identical episodes.
pub fn evaluate_policy(
    policy: TeamPolicy<'_>,
    spec: &TaskSpec,
    n_episodes: usize,
    episode_length: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    evaluate_with(policy, spec, n_episodes, episode_length, seed, |_, _, _| Ok(()))
}

fn evaluate_with(
    policy: TeamPolicy<'_>,
    spec: &TaskSpec,
    n_episodes: usize,
    episode_length: usize,
    seed: u64,
    mut on_step: impl FnMut(usize, &WorldState, &[DiscreteAction]) -> Result<()>,
) -> Result<EvalMetrics> {
    spec.validate()?;
    if n_episodes == 0 || episode_length == 0 {
        return Err(Error::InvalidConfig(
            "evaluation needs at least one episode of at least one step".into(),
        ));
    }
    let n = spec.n_total_agents();
    if let TeamPolicy::Greedy(actors) = policy {
        if actors.len() != n {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} policies for {n} agents",
                actors.len()
            )));
        }
    }
    let physics = Physics::default();
    let mut rng = eval_rng(seed);
    let mut states = (0..n_episodes)
        .map(|_| tasks::reset(spec, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut returns = vec![vec![0.0; n]; n_episodes];
    let (mut occupancy, mut collisions, mut target_dist) = (0usize, 0usize, 0.0);
    let mut adv_dist: Option<f64> = None;
    for _ in 0..episode_length {
        let joint = joint_actions(policy, &states, spec, &mut rng)?;
        for (e, (state, actions)) in states.iter_mut().zip(&joint).enumerate() {
            on_step(e, state, actions)?;
            let next = apply_actions(state, actions, &physics)?;
            let r = tasks::extrinsic_reward(state, actions, &next, spec)?;
            for (acc, v) in returns[e].iter_mut().zip(r) {
                *acc += v;
            }
            let m = tasks::step_metrics(&next, spec)?;
            occupancy += m.occupancy_count;
            collisions += m.collision_count;
            target_dist += m.min_agent_target_dist.iter().sum::<f64>() / spec.n_agents as f64;
            if let Some(d) = m.min_adv_agent_dist {
                *adv_dist.get_or_insert(0.0) += d;
            }
            *state = next;
        }
    }
    let steps = (n_episodes * episode_length) as f64;
    let team: Vec<f64> = returns
        .iter()
        .map(|r| r[..spec.n_agents].iter().sum::<f64>() / spec.n_agents as f64)
        .collect();
    let (mean, stderr) = mean_and_stderr(&team);
    let agent_rewards = (0..n)
        .map(|i| returns.iter().map(|r| r[i]).sum::<f64>() / n_episodes as f64)
        .collect();
    Ok(EvalMetrics {
        n_episodes,
        episode_length,
        reward_mean: mean,
        reward_stderr: stderr,
        agent_rewards,
        occupancy_per_step: occupancy as f64 / steps,
        collisions_per_step: collisions as f64 / steps,
        min_target_dist: target_dist / steps,
        min_adv_dist: adv_dist.map(|d| d / steps),
    })
}

/// Sample mean and standard error; the error is undefined for one value.
pub fn mean_and_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// Trained policies of one run, loaded from its directory.
#[derive(Debug, Clone)]
pub struct RunCheckpoint {
    pub config: TrainConfig,
    pub actors: Vec<Mlp>,
}

impl RunCheckpoint {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let config = TrainConfig::load(&run_dir.join(CONFIG_FILE))?;
        let n = config.task.n_total_agents();
        let mut actors = Vec::with_capacity(n);
        for i in 0..n {
            let ckpt = read_checkpoint(&agent_dir(&run_dir.join(CHECKPOINT_DIR), i).join("actor.bin"))?;
            actors.push(Mlp {
                spec: ckpt.spec,
                params: ckpt.params,
            });
        }
        let ckpt = Self { config, actors };
        ckpt.check_task(&ckpt.config.task.clone())?;
        Ok(ckpt)
    }

    /// Policies fit `task` when the entity counts, and so the observation
    /// layout, agree.
    pub fn check_task(&self, task: &TaskSpec) -> Result<()> {
        let own = &self.config.task;
        if own.kind != task.kind
            || own.n_agents != task.n_agents
            || own.n_adversaries != task.n_adversaries
            || own.n_landmarks != task.n_landmarks
        {
            return Err(Error::IncompatibleCheckpoint(format!(
                "trained on {} {}v{} with {} landmarks, asked for {} {}v{} with {}",
                own.kind.name(),
                own.n_agents,
                own.n_adversaries,
                own.n_landmarks,
                task.kind.name(),
                task.n_agents,
                task.n_adversaries,
                task.n_landmarks
            )));
        }
        for (i, a) in self.actors.iter().enumerate() {
            if a.spec.input_dim() != task.obs_dim() || a.spec.output_dim() != DiscreteAction::COUNT {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "agent {i} policy maps {} -> {}, task needs {} -> {}",
                    a.spec.input_dim(),
                    a.spec.output_dim(),
                    task.obs_dim(),
                    DiscreteAction::COUNT
                )));
            }
        }
        Ok(())
    }
}

/// Greedy evaluation of a trained run on `task`.
pub fn evaluate(
    checkpoint: &RunCheckpoint,
    task: &TaskSpec,
    n_episodes: usize,
    episode_length: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    checkpoint.check_task(task)?;
    evaluate_policy(
        TeamPolicy::Greedy(&checkpoint.actors),
        task,
        n_episodes,
        episode_length,
        seed,
    )
}

pub fn random_baseline(
    task: &TaskSpec,
    n_episodes: usize,
    episode_length: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    evaluate_policy(TeamPolicy::Random, task, n_episodes, episode_length, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapTeam {
    /// Run index each agent slot was drawn from.
    pub sources: Vec<usize>,
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub teams: Vec<SwapTeam>,
    pub reward_mean: f64,
    pub occupancy_per_step: f64,
}

/// Team `r` takes agent slot `k` from run `(k + r) mod n_runs`, for
/// `r = 0..n_runs`. Neighboring slots therefore always come from different
/// runs.
pub fn zero_shot_swap(
    runs: &[RunCheckpoint],
    task: &TaskSpec,
    n_episodes: usize,
    episode_length: usize,
    seed: u64,
) -> Result<ZeroShotReport> {
    if runs.len() < 2 {
        return Err(Error::IncompatibleCheckpoint(
            "zero-shot evaluation needs at least two runs".into(),
        ));
    }
    if task.n_total_agents() < 2 {
        return Err(Error::IncompatibleCheckpoint(
            "zero-shot evaluation needs at least two agent slots".into(),
        ));
    }
    let mut reference = runs[0].config.task.clone();
    for run in runs {
        run.check_task(task)?;
        reference.seed = run.config.task.seed;
        if run.config.task != reference {
            return Err(Error::IncompatibleCheckpoint(
                "runs were trained on different task configurations".into(),
            ));
        }
    }
    let mut teams = Vec::with_capacity(runs.len());
    for r in 0..runs.len() {
        let sources: Vec<usize> = (0..task.n_total_agents())
            .map(|k| (k + r) % runs.len())
            .collect();
        let actors: Vec<Mlp> = sources
            .iter()
            .enumerate()
            .map(|(k, &s)| runs[s].actors[k].clone())
            .collect();
        let metrics = evaluate_policy(
            TeamPolicy::Greedy(&actors),
            task,
            n_episodes,
            episode_length,
            seed,
        )?;
        teams.push(SwapTeam { sources, metrics });
    }
    let n = teams.len() as f64;
    Ok(ZeroShotReport {
        reward_mean: teams.iter().map(|t| t.metrics.reward_mean).sum::<f64>() / n,
        occupancy_per_step: teams.iter().map(|t| t.metrics.occupancy_per_step).sum::<f64>() / n,
        teams,
    })
}

/// Writes one JSON line per agent step of greedy episodes: the state before
/// the step and the joint action taken. Returns the number of lines.
pub fn export_traces<W: Write>(
    checkpoint: &RunCheckpoint,
    task: &TaskSpec,
    n_episodes: usize,
    episode_length: usize,
    seed: u64,
    out: &mut W,
) -> Result<usize> {
    checkpoint.check_task(task)?;
    let mut lines = 0;
    evaluate_with(
        TeamPolicy::Greedy(&checkpoint.actors),
        task,
        n_episodes,
        episode_length,
        seed,
        |episode, state, actions| {
            let record = TraceRecord::new(episode, state, actions);
            serde_json::to_writer(&mut *out, &record)?;
            out.write_all(b"\n")
                .map_err(|e| Error::io(Path::new("<trace output>"), e))?;
            lines += 1;
            Ok(())
        },
    )?;
    Ok(lines)
}
