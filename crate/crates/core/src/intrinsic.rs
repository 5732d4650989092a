//! Intrinsic rewards built on dynamics-model prediction error.
//!
//! For agent `i` and a neighbor `j`, the model input is `i`'s observation
//! restricted to the entities `j` can see, and the target is `i`'s next
//! observation under the same restriction. Alignment rewards are the negated
//! mean error over neighbors; curiosity rewards are their exact negation;
//! the adversarial variant is the positive mean error over visible
//! adversaries. A neighbor equal to `i` uses no extra restriction.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::dynamics::{NextObsPredictor, PredictionQuery};
use crate::error::{Error, Result};
use crate::sac::{NeighborMask, Transition};
use crate::tasks::{apply_mask, Observation, ObservationLayout, TaskSpec, Visibility};
use crate::world::{distance, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Sparse,
    CurioSelf,
    CurioTeam,
    ElignSelf,
    ElignTeam,
    ElignAdv,
}

impl RewardMode {
    pub const ALL: [RewardMode; 6] = [
        RewardMode::Sparse,
        RewardMode::CurioSelf,
        RewardMode::CurioTeam,
        RewardMode::ElignSelf,
        RewardMode::ElignTeam,
        RewardMode::ElignAdv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RewardMode::Sparse => "sparse",
            RewardMode::CurioSelf => "curio_self",
            RewardMode::CurioTeam => "curio_team",
            RewardMode::ElignSelf => "elign_self",
            RewardMode::ElignTeam => "elign_team",
            RewardMode::ElignAdv => "elign_adv",
        }
    }

    pub fn uses_dynamics(self) -> bool {
        self != RewardMode::Sparse
    }

    pub fn check_task(self, spec: &TaskSpec) -> Result<()> {
        if self == RewardMode::ElignAdv && spec.n_adversaries == 0 {
            return Err(Error::InvalidConfig(format!(
                "reward mode elign_adv needs adversaries, {} has none",
                spec.kind.name()
            )));
        }
        Ok(())
    }
}

impl std::str::FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RewardMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown reward mode {s:?}")))
    }
}

/// Per agent: same-side agents within `tau` (including itself) and
/// opposing agents within `tau`. Indices are global agent indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    pub team: Vec<Vec<usize>>,
    pub adversaries: Vec<Vec<usize>>,
}

pub fn neighbor_sets(state: &WorldState, spec: &TaskSpec) -> NeighborSets {
    let n = state.agents.len();
    let mut team = vec![Vec::new(); n];
    let mut adversaries = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            let near = i == j
                || distance(state.agents[i].position, state.agents[j].position) <= spec.tau;
            if !near {
                continue;
            }
            if spec.is_adversary(i) == spec.is_adversary(j) {
                team[i].push(j);
            } else {
                adversaries[i].push(j);
            }
        }
    }
    NeighborSets { team, adversaries }
}

/// `obs_i` restricted to the entities visible to `j` (mask semantics: entries
/// of invisible groups become zero, others are kept verbatim).
pub fn intersect(
    obs_i: &Observation,
    visibility_j: &Visibility,
    layout: &ObservationLayout,
) -> Result<Vec<f64>> {
    if obs_i.visibility.len() != visibility_j.len() {
        return Err(Error::dim(
            "observation intersection",
            obs_i.visibility.len(),
            visibility_j.len(),
        ));
    }
    let mut values = obs_i.values.clone();
    apply_mask(&mut values, visibility_j, layout)?;
    Ok(values)
}

/// `-||o_next - prediction||_2`.
pub fn elign_self(o_next: &[f64], prediction: &[f64]) -> Result<f64> {
    Ok(-l2_error(o_next, prediction)?)
}

fn l2_error(target: &[f64], prediction: &[f64]) -> Result<f64> {
    if target.len() != prediction.len() {
        return Err(Error::dim("prediction error", target.len(), prediction.len()));
    }
    Ok(target
        .iter()
        .zip(prediction)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NeighborKind {
    SelfOnly,
    Team,
    Adversary,
}

/// Per transition, the prediction error norm for each neighbor of the
/// requested kind. All model queries of the batch go through one call.
fn neighbor_errors(
    transitions: &[&Transition],
    kind: NeighborKind,
    layout: &ObservationLayout,
    predictor: &dyn NextObsPredictor,
    rng: &mut dyn RngCore,
) -> Result<Vec<Vec<f64>>> {
    let identity = Visibility::all(layout.n_groups());
    let mut queries = Vec::new();
    let mut targets = Vec::new();
    let mut counts = Vec::with_capacity(transitions.len());
    for t in transitions {
        if t.obs.len() != layout.dim() || t.next_obs.len() != layout.dim() {
            return Err(Error::dim("transition observation", layout.dim(), t.obs.len()));
        }
        let masks: Vec<&Visibility> = match kind {
            NeighborKind::SelfOnly => vec![&identity],
            NeighborKind::Team => t
                .team_neighbors
                .iter()
                .map(|n| neighbor_mask(t, n, &identity))
                .collect(),
            NeighborKind::Adversary => t.adv_neighbors.iter().map(|n| &n.pre).collect(),
        };
        if kind == NeighborKind::Team && masks.is_empty() {
            return Err(Error::InvalidConfig(
                "transition has an empty team neighbor set".into(),
            ));
        }
        counts.push(masks.len());
        for mask in masks {
            let mut obs = t.obs.clone();
            apply_mask(&mut obs, mask, layout)?;
            let mut target = t.next_obs.clone();
            apply_mask(&mut target, mask, layout)?;
            queries.push(PredictionQuery {
                obs,
                mask,
                action: t.action,
            });
            targets.push(target);
        }
    }
    let predictions = if queries.is_empty() {
        Vec::new()
    } else {
        predictor.predict_batch(&queries, rng)?
    };
    let mut errors = predictions
        .iter()
        .zip(&targets)
        .map(|(p, y)| l2_error(y, p));
    counts
        .into_iter()
        .map(|c| errors.by_ref().take(c).collect())
        .collect()
}

fn neighbor_mask<'a>(t: &Transition, n: &'a NeighborMask, identity: &'a Visibility) -> &'a Visibility {
    if n.agent == t.agent {
        identity
    } else {
        &n.pre
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Intrinsic reward for each transition under `mode`. `Sparse` yields zeros
/// and never touches the predictor.
pub fn intrinsic_rewards(
    mode: RewardMode,
    transitions: &[&Transition],
    layout: &ObservationLayout,
    predictor: Option<&dyn NextObsPredictor>,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if mode == RewardMode::Sparse {
        return Ok(vec![0.0; transitions.len()]);
    }
    let predictor = predictor.ok_or_else(|| {
        Error::InvalidConfig(format!("reward mode {} needs a dynamics model", mode.name()))
    })?;
    let kind = match mode {
        RewardMode::CurioSelf | RewardMode::ElignSelf => NeighborKind::SelfOnly,
        RewardMode::CurioTeam | RewardMode::ElignTeam => NeighborKind::Team,
        RewardMode::ElignAdv => NeighborKind::Adversary,
        RewardMode::Sparse => unreachable!(),
    };
    let errors = neighbor_errors(transitions, kind, layout, predictor, rng)?;
    Ok(errors
        .iter()
        .map(|e| match mode {
            RewardMode::ElignSelf | RewardMode::ElignTeam => -mean(e),
            RewardMode::CurioSelf | RewardMode::CurioTeam => mean(e),
            RewardMode::ElignAdv if e.is_empty() => 0.0,
            RewardMode::ElignAdv => mean(e),
            RewardMode::Sparse => unreachable!(),
        })
        .collect())
}

pub fn intrinsic_reward(
    mode: RewardMode,
    transition: &Transition,
    layout: &ObservationLayout,
    predictor: Option<&dyn NextObsPredictor>,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    Ok(intrinsic_rewards(mode, &[transition], layout, predictor, rng)?[0])
}

pub fn elign_team(
    transition: &Transition,
    layout: &ObservationLayout,
    predictor: &dyn NextObsPredictor,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    intrinsic_reward(RewardMode::ElignTeam, transition, layout, Some(predictor), rng)
}

pub fn elign_adv(
    transition: &Transition,
    layout: &ObservationLayout,
    predictor: &dyn NextObsPredictor,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    intrinsic_reward(RewardMode::ElignAdv, transition, layout, Some(predictor), rng)
}

pub fn curio_self(
    transition: &Transition,
    layout: &ObservationLayout,
    predictor: &dyn NextObsPredictor,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    intrinsic_reward(RewardMode::CurioSelf, transition, layout, Some(predictor), rng)
}

pub fn curio_team(
    transition: &Transition,
    layout: &ObservationLayout,
    predictor: &dyn NextObsPredictor,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    intrinsic_reward(RewardMode::CurioTeam, transition, layout, Some(predictor), rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicRewardRecord {
    pub agent: usize,
    pub r_in: f64,
    pub r_ex: f64,
    pub beta: f64,
    pub r_total: f64,
}

/// `r_ex + beta * r_in` with `beta = 1 / obs_dim`.
pub fn total_reward(agent: usize, r_ex: f64, r_in: f64, obs_dim: usize) -> IntrinsicRewardRecord {
    assert!(obs_dim >= 1, "observation dimension must be positive");
    let beta = 1.0 / obs_dim as f64;
    IntrinsicRewardRecord {
        agent,
        r_in,
        r_ex,
        beta,
        r_total: r_ex + beta * r_in,
    }
}
