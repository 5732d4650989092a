//! Decentralized discrete soft actor-critic.
//!
//! Each agent owns a softmax actor, twin Q critics with Polyak-averaged
//! targets, and two replay buffers: `D` for raw environment transitions and
//! `D'` for copies whose rewards include the intrinsic term. Policy updates
//! read only from `D'`.

mod replay;

pub use replay::{NeighborMask, ReplayBuffer, Transition};

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, log_softmax_rows, read_checkpoint, write_checkpoint, Checkpoint, Gradients, Mlp,
    MlpSpec, OptimState, OutputActivation,
};
use crate::world::DiscreteAction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub entropy_coeff: f64,
    pub soft_update_coeff: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            gamma: 0.95,
            entropy_coeff: 0.1,
            soft_update_coeff: 0.01,
            actor_lr: 0.001,
            critic_lr: 0.001,
            batch_size: 1024,
            buffer_capacity: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferKind {
    D,
    DPrime,
}

/// Dense minibatch view of a set of transitions.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub obs: Array2<f64>,
    pub actions: Vec<usize>,
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
    /// `1 - done`.
    pub not_done: Array1<f64>,
}

impl Minibatch {
    pub fn from_transitions(transitions: &[&Transition], obs_dim: usize) -> Result<Self> {
        let n = transitions.len();
        let mut obs = Array2::zeros((n, obs_dim));
        let mut next_obs = Array2::zeros((n, obs_dim));
        for (b, t) in transitions.iter().enumerate() {
            if t.obs.len() != obs_dim || t.next_obs.len() != obs_dim {
                return Err(Error::dim("transition observation", obs_dim, t.obs.len()));
            }
            obs.row_mut(b)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&t.obs);
            next_obs
                .row_mut(b)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&t.next_obs);
        }
        Ok(Self {
            obs,
            actions: transitions.iter().map(|t| t.action.index()).collect(),
            rewards: transitions.iter().map(|t| t.reward).collect(),
            next_obs,
            not_done: transitions
                .iter()
                .map(|t| if t.done { 0.0 } else { 1.0 })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub critic1_loss: f64,
    pub critic2_loss: f64,
    pub actor_loss: f64,
    pub entropy: f64,
}

fn elementwise_min(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    out.zip_mut_with(b, |x, &y| *x = x.min(y));
    out
}

/// Soft Bellman targets
/// `y = r + gamma (1 - done) sum_a pi(a|o') (min Q_target(o', a) - alpha log pi(a|o'))`.
pub fn soft_value_targets(
    actor: &Mlp,
    target1: &Mlp,
    target2: &Mlp,
    batch: &Minibatch,
    gamma: f64,
    alpha: f64,
) -> Result<Array1<f64>> {
    let tape = actor.forward_tape(batch.next_obs.view())?;
    let log_pi = log_softmax_rows(&tape.logits().view());
    let pi = tape.output();
    let q = elementwise_min(
        &target1.forward_batch(batch.next_obs.view())?,
        &target2.forward_batch(batch.next_obs.view())?,
    );
    let soft_q = q - &(log_pi * alpha);
    let v = (pi * &soft_q).sum_axis(Axis(1));
    Ok(&batch.rewards + &(v * &batch.not_done * gamma))
}

/// `mean_b (Q(o_b, a_b) - y_b)^2`, its gradient, and all Q values.
pub fn critic_loss_and_grad(
    critic: &Mlp,
    obs: ArrayView2<f64>,
    actions: &[usize],
    targets: &Array1<f64>,
) -> Result<(f64, Gradients, Array2<f64>)> {
    let tape = critic.forward_tape(obs)?;
    let q = tape.output();
    let n = actions.len();
    if q.nrows() != n || targets.len() != n {
        return Err(Error::dim("critic minibatch", q.nrows(), n.max(targets.len())));
    }
    let mut upstream = Array2::zeros(q.dim());
    let mut loss = 0.0;
    for (b, &a) in actions.iter().enumerate() {
        let diff = q[[b, a]] - targets[b];
        loss += diff * diff;
        upstream[[b, a]] = 2.0 * diff / n as f64;
    }
    let (grads, _) = critic.backward_batch(&tape, upstream.view())?;
    Ok((loss / n as f64, grads, tape.into_output()))
}

pub fn critic_loss(
    critic: &Mlp,
    obs: ArrayView2<f64>,
    actions: &[usize],
    targets: &Array1<f64>,
) -> Result<f64> {
    let q = critic.forward_batch(obs)?;
    let n = actions.len() as f64;
    Ok(actions
        .iter()
        .enumerate()
        .map(|(b, &a)| (q[[b, a]] - targets[b]).powi(2))
        .sum::<f64>()
        / n)
}

/// `mean_b sum_a pi(a|o) (alpha log pi(a|o) - Q_min(o, a))`, its gradient
/// and the mean policy entropy.
pub fn actor_loss_and_grad(
    actor: &Mlp,
    obs: ArrayView2<f64>,
    q_min: ArrayView2<f64>,
    alpha: f64,
) -> Result<(f64, Gradients, f64)> {
    let tape = actor.forward_tape(obs)?;
    if q_min.dim() != tape.output().dim() {
        return Err(Error::dim("actor q values", tape.output().len(), q_min.len()));
    }
    let n = obs.nrows() as f64;
    let log_pi = log_softmax_rows(&tape.logits().view());
    let pi = tape.output();
    let per_action = &log_pi * alpha - &q_min;
    let loss = (pi * &per_action).sum() / n;
    let entropy = -(pi * &log_pi).sum() / n;
    // d/d pi_a of pi_a (alpha log pi_a - Q_a) = alpha log pi_a + alpha - Q_a
    let upstream = (per_action + alpha) / n;
    let (grads, _) = actor.backward_batch(&tape, upstream.view())?;
    Ok((loss, grads, entropy))
}

pub fn actor_loss(actor: &Mlp, obs: ArrayView2<f64>, q_min: ArrayView2<f64>, alpha: f64) -> Result<f64> {
    let tape = actor.forward_tape(obs)?;
    let log_pi = log_softmax_rows(&tape.logits().view());
    let per_action = &log_pi * alpha - &q_min;
    Ok((tape.output() * &per_action).sum() / obs.nrows() as f64)
}

fn pick(probs: &[f64], mode: ActionMode, rng: &mut dyn RngCore) -> DiscreteAction {
    let index = match mode {
        ActionMode::Greedy => {
            let mut best = 0;
            for (k, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = k;
                }
            }
            best
        }
        ActionMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = probs.len() - 1;
            for (k, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = k;
                    break;
                }
            }
            chosen
        }
    };
    DiscreteAction::from_index(index).expect("policy head has one output per action")
}

/// Actions for a batch of observations from a softmax policy network.
pub fn policy_actions(
    actor: &Mlp,
    obs: ArrayView2<f64>,
    mode: ActionMode,
    rng: &mut dyn RngCore,
) -> Result<Vec<DiscreteAction>> {
    let tape = actor.forward_tape(obs)?;
    if tape.logits().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    Ok(tape
        .output()
        .rows()
        .into_iter()
        .map(|row| pick(row.as_slice().expect("standard layout"), mode, rng))
        .collect())
}

#[derive(Debug, Clone)]
pub struct AgentLearner {
    pub agent: usize,
    pub config: SacConfig,
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target_critic1: Mlp,
    pub target_critic2: Mlp,
    pub actor_opt: OptimState,
    pub critic1_opt: OptimState,
    pub critic2_opt: OptimState,
    pub buffer_d: ReplayBuffer<Transition>,
    pub buffer_dprime: ReplayBuffer<Transition>,
}

impl AgentLearner {
    pub fn new(agent: usize, obs_dim: usize, config: SacConfig, seed: u64) -> Result<Self> {
        let n_actions = DiscreteAction::COUNT;
        let actor_spec =
            MlpSpec::with_hidden(obs_dim, &config.hidden, n_actions, OutputActivation::Softmax)?;
        let critic_spec =
            MlpSpec::with_hidden(obs_dim, &config.hidden, n_actions, OutputActivation::Identity)?;
        let actor = Mlp::new(actor_spec, seed.wrapping_mul(4).wrapping_add(1));
        let critic1 = Mlp::new(critic_spec.clone(), seed.wrapping_mul(4).wrapping_add(2));
        let critic2 = Mlp::new(critic_spec, seed.wrapping_mul(4).wrapping_add(3));
        Ok(Self {
            agent,
            actor_opt: OptimState::new(&actor.params, config.actor_lr)?,
            critic1_opt: OptimState::new(&critic1.params, config.critic_lr)?,
            critic2_opt: OptimState::new(&critic2.params, config.critic_lr)?,
            target_critic1: critic1.clone(),
            target_critic2: critic2.clone(),
            actor,
            critic1,
            critic2,
            buffer_d: ReplayBuffer::new(config.buffer_capacity),
            buffer_dprime: ReplayBuffer::new(config.buffer_capacity),
            config,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.spec.input_dim()
    }

    pub fn select_action(
        &self,
        obs: &[f64],
        mode: ActionMode,
        rng: &mut dyn RngCore,
    ) -> Result<DiscreteAction> {
        if obs.len() != self.obs_dim() {
            return Err(Error::dim("policy observation", self.obs_dim(), obs.len()));
        }
        let x = ArrayView2::from_shape((1, obs.len()), obs).expect("contiguous slice");
        Ok(policy_actions(&self.actor, x, mode, rng)?[0])
    }

    pub fn push_transition(&mut self, t: Transition, which: BufferKind) {
        match which {
            BufferKind::D => self.buffer_d.push(t),
            BufferKind::DPrime => self.buffer_dprime.push(t),
        }
    }

    /// One update from a minibatch drawn out of `D'`.
    pub fn update(&mut self, rng: &mut dyn RngCore) -> Result<LossReport> {
        let need = self.config.batch_size;
        if self.buffer_dprime.len() < need {
            return Err(Error::InsufficientBuffer {
                available: self.buffer_dprime.len(),
                required: need,
            });
        }
        let sample = self.buffer_dprime.sample(need, rng);
        let batch = Minibatch::from_transitions(&sample, self.obs_dim())?;
        self.update_on_batch(&batch)
    }

    /// Critic regression to soft targets, actor step against the pre-update
    /// twin-critic minimum, then Polyak averaging of the target critics.
    pub fn update_on_batch(&mut self, batch: &Minibatch) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::EmptySample);
        }
        let cfg = &self.config;
        let targets = soft_value_targets(
            &self.actor,
            &self.target_critic1,
            &self.target_critic2,
            batch,
            cfg.gamma,
            cfg.entropy_coeff,
        )?;
        let (critic1_loss, g1, q1) =
            critic_loss_and_grad(&self.critic1, batch.obs.view(), &batch.actions, &targets)?;
        let (critic2_loss, g2, q2) =
            critic_loss_and_grad(&self.critic2, batch.obs.view(), &batch.actions, &targets)?;
        let q_min = elementwise_min(&q1, &q2);
        let (actor_loss, ga, entropy) =
            actor_loss_and_grad(&self.actor, batch.obs.view(), q_min.view(), cfg.entropy_coeff)?;

        nn::step(&mut self.critic1.params, &g1, &mut self.critic1_opt)?;
        nn::step(&mut self.critic2.params, &g2, &mut self.critic2_opt)?;
        nn::step(&mut self.actor.params, &ga, &mut self.actor_opt)?;
        let coeff = self.config.soft_update_coeff;
        nn::soft_update(&mut self.target_critic1.params, &self.critic1.params, coeff)?;
        nn::soft_update(&mut self.target_critic2.params, &self.critic2.params, coeff)?;
        Ok(LossReport {
            critic1_loss,
            critic2_loss,
            actor_loss,
            entropy,
        })
    }

    /// Mean policy entropy over a batch of observations.
    pub fn policy_entropy(&self, obs: ArrayView2<f64>) -> Result<f64> {
        let tape = self.actor.forward_tape(obs)?;
        let log_pi = log_softmax_rows(&tape.logits().view());
        let mut total = 0.0;
        Zip::from(tape.output())
            .and(&log_pi)
            .for_each(|&p, &lp| total -= p * lp);
        Ok(total / obs.nrows() as f64)
    }

    const FILES: [&'static str; 5] = [
        "actor.bin",
        "critic1.bin",
        "critic2.bin",
        "target_critic1.bin",
        "target_critic2.bin",
    ];

    /// Writes networks and optimizer states (not the replay buffers) to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let nets: [(&Mlp, Option<&OptimState>); 5] = [
            (&self.actor, Some(&self.actor_opt)),
            (&self.critic1, Some(&self.critic1_opt)),
            (&self.critic2, Some(&self.critic2_opt)),
            (&self.target_critic1, None),
            (&self.target_critic2, None),
        ];
        for (file, (net, opt)) in Self::FILES.iter().zip(nets) {
            let ckpt = Checkpoint {
                spec: net.spec.clone(),
                params: net.params.clone(),
                optimizer: opt.cloned(),
            };
            write_checkpoint(&dir.join(file), &ckpt)?;
        }
        Ok(())
    }

    pub fn load(agent: usize, dir: &Path, config: SacConfig) -> Result<Self> {
        let mut loaded = Vec::with_capacity(5);
        for file in Self::FILES {
            loaded.push(read_checkpoint(&dir.join(file))?);
        }
        let mut it = loaded.into_iter();
        let mut next_net = |with_opt: bool| -> Result<(Mlp, Option<OptimState>)> {
            let c = it.next().expect("five files");
            if with_opt && c.optimizer.is_none() {
                return Err(Error::MalformedCheckpoint {
                    path: dir.to_path_buf(),
                    reason: "missing optimizer state".into(),
                });
            }
            Ok((
                Mlp {
                    spec: c.spec,
                    params: c.params,
                },
                c.optimizer,
            ))
        };
        let (actor, actor_opt) = next_net(true)?;
        let (critic1, critic1_opt) = next_net(true)?;
        let (critic2, critic2_opt) = next_net(true)?;
        let (target_critic1, _) = next_net(false)?;
        let (target_critic2, _) = next_net(false)?;
        Ok(Self {
            agent,
            actor,
            critic1,
            critic2,
            target_critic1,
            target_critic2,
            actor_opt: actor_opt.expect("checked"),
            critic1_opt: critic1_opt.expect("checked"),
            critic2_opt: critic2_opt.expect("checked"),
            buffer_d: ReplayBuffer::new(config.buffer_capacity),
            buffer_dprime: ReplayBuffer::new(config.buffer_capacity),
            config,
        })
    }
}
