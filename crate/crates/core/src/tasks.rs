//! The five particle tasks: initial layouts, observations with vicinity
//! masking, sparse extrinsic rewards and per-step metrics.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{distance, overlapping, DiscreteAction, Entity, WorldState, DEFAULT_ACCEL};

pub const BASE_AGENT_SIZE: f64 = 0.05;
/// Reference speed cap for the heterogeneous profile.
pub const BASE_MAX_SPEED: f64 = 1.0;
pub const NAV_LANDMARK_SIZE: f64 = 0.05;
pub const GOAL_LANDMARK_SIZE: f64 = 0.08;
pub const OBSTACLE_SIZE: f64 = 0.2;
pub const PREY_MAX_SPEED: f64 = 1.3;
pub const PREDATOR_SIZE: f64 = 0.075;
pub const PREDATOR_MAX_SPEED: f64 = 1.0;
/// Vicinity threshold used for the partially observable setting.
pub const PARTIAL_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CoopNav,
    HeteroNav,
    PhyDecep,
    KeepAway,
    PredPrey,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::CoopNav,
        TaskKind::HeteroNav,
        TaskKind::PhyDecep,
        TaskKind::KeepAway,
        TaskKind::PredPrey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::CoopNav => "coop_nav",
            TaskKind::HeteroNav => "hetero_nav",
            TaskKind::PhyDecep => "phy_decep",
            TaskKind::KeepAway => "keep_away",
            TaskKind::PredPrey => "pred_prey",
        }
    }

    pub fn has_adversaries(self) -> bool {
        !matches!(self, TaskKind::CoopNav | TaskKind::HeteroNav)
    }

    fn has_goal(self) -> bool {
        matches!(self, TaskKind::PhyDecep | TaskKind::KeepAway)
    }

    pub fn landmark_size(self) -> f64 {
        match self {
            TaskKind::CoopNav | TaskKind::HeteroNav => NAV_LANDMARK_SIZE,
            TaskKind::PhyDecep | TaskKind::KeepAway => GOAL_LANDMARK_SIZE,
            TaskKind::PredPrey => OBSTACLE_SIZE,
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidTask(format!("unknown task kind {s:?}")))
    }
}

/// `tau` is written as a number, or as the string `"inf"` for full
/// observability (JSON has no infinity literal).
mod tau_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(tau: &f64, s: S) -> Result<S::Ok, S::Error> {
        if tau.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*tau)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "Infinity") => {
                Ok(f64::INFINITY)
            }
            Raw::Text(t) => Err(de::Error::custom(format!("invalid tau {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(rename = "task")]
    pub kind: TaskKind,
    pub n_agents: usize,
    pub n_adversaries: usize,
    pub n_landmarks: usize,
    #[serde(with = "tau_serde")]
    pub tau: f64,
    pub symmetry_breaking: bool,
    pub seed: u64,
}

impl TaskSpec {
    /// Team sizes used in the benchmark table, partially observable.
    pub fn default_for(kind: TaskKind) -> Self {
        let (n_agents, n_adversaries, n_landmarks) = match kind {
            TaskKind::CoopNav => (3, 0, 3),
            TaskKind::HeteroNav => (4, 0, 4),
            TaskKind::PhyDecep => (2, 1, 2),
            TaskKind::KeepAway => (2, 2, 2),
            TaskKind::PredPrey => (2, 2, 2),
        };
        Self {
            kind,
            n_agents,
            n_adversaries,
            n_landmarks,
            tau: PARTIAL_TAU,
            symmetry_breaking: false,
            seed: 0,
        }
    }

    /// Same task with `n` team agents and the landmark/adversary counts the
    /// task scales with.
    pub fn scaled(&self, n: usize) -> Self {
        let mut s = self.clone();
        s.n_agents = n;
        match self.kind {
            TaskKind::CoopNav | TaskKind::HeteroNav => s.n_landmarks = n,
            TaskKind::PhyDecep => {
                s.n_landmarks = n.max(2);
                s.n_adversaries = (n / 2).max(1);
            }
            TaskKind::KeepAway | TaskKind::PredPrey => s.n_adversaries = n,
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidTask(format!("{}: {msg}", self.kind.name())));
        if self.n_agents == 0 {
            return fail("need at least one team agent".into());
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        match self.kind {
            TaskKind::CoopNav | TaskKind::HeteroNav => {
                if self.n_adversaries != 0 {
                    return fail("cooperative navigation has no adversaries".into());
                }
                if self.n_landmarks != self.n_agents {
                    return fail(format!(
                        "{} landmarks for {} agents",
                        self.n_landmarks, self.n_agents
                    ));
                }
                if self.kind == TaskKind::HeteroNav && self.n_agents % 2 != 0 {
                    return fail(format!("{} agents cannot split into two halves", self.n_agents));
                }
            }
            TaskKind::PhyDecep | TaskKind::KeepAway => {
                if self.n_adversaries == 0 {
                    return fail("needs at least one adversary".into());
                }
                if self.n_landmarks < 2 {
                    return fail("needs at least two landmarks".into());
                }
            }
            TaskKind::PredPrey => {
                if self.n_adversaries == 0 {
                    return fail("needs at least one adversary".into());
                }
                if self.n_landmarks == 0 {
                    return fail("needs at least one obstacle landmark".into());
                }
            }
        }
        Ok(())
    }

    pub fn n_total_agents(&self) -> usize {
        self.n_agents + self.n_adversaries
    }

    pub fn is_adversary(&self, agent: usize) -> bool {
        agent >= self.n_agents
    }

    pub fn team_agents(&self) -> std::ops::Range<usize> {
        0..self.n_agents
    }

    pub fn adversaries(&self) -> std::ops::Range<usize> {
        self.n_agents..self.n_total_agents()
    }

    pub fn layout(&self) -> ObservationLayout {
        ObservationLayout {
            n_agents: self.n_total_agents(),
            n_landmarks: self.n_landmarks,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.layout().dim()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads `.json` files as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    fn check_state(&self, state: &WorldState) -> Result<()> {
        if state.agents.len() != self.n_total_agents() || state.landmarks.len() != self.n_landmarks {
            return Err(Error::InvalidTask(format!(
                "state with {} agents / {} landmarks does not belong to {} ({} agents / {} landmarks)",
                state.agents.len(),
                state.landmarks.len(),
                self.kind.name(),
                self.n_total_agents(),
                self.n_landmarks
            )));
        }
        Ok(())
    }
}

/// Fixed observation layout shared by every observer of a task:
/// `[p_0 .. p_{K-1}, v_0 .. v_{K-1}, l_0 .. l_{L-1}]` over all `K` agents
/// (team then adversaries) and `L` landmark positions. Each agent owns a
/// four-entry slot group (position and velocity); each landmark owns two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservationLayout {
    pub n_agents: usize,
    pub n_landmarks: usize,
}

impl ObservationLayout {
    pub fn dim(&self) -> usize {
        4 * self.n_agents + 2 * self.n_landmarks
    }

    /// Number of slot groups (entities).
    pub fn n_groups(&self) -> usize {
        self.n_agents + self.n_landmarks
    }

    /// Value indices owned by entity `group`.
    pub fn group_indices(&self, group: usize) -> Vec<usize> {
        if group < self.n_agents {
            let vel = 2 * self.n_agents + 2 * group;
            vec![2 * group, 2 * group + 1, vel, vel + 1]
        } else {
            let base = 4 * self.n_agents + 2 * (group - self.n_agents);
            vec![base, base + 1]
        }
    }

    /// Entity owning value index `k`.
    pub fn group_of(&self, k: usize) -> usize {
        let two_k = 2 * self.n_agents;
        if k < two_k {
            k / 2
        } else if k < 2 * two_k {
            (k - two_k) / 2
        } else {
            self.n_agents + (k - 2 * two_k) / 2
        }
    }
}

/// Per-entity visibility flags in layout group order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Visibility(pub Vec<bool>);

impl Visibility {
    pub fn all(n_groups: usize) -> Self {
        Self(vec![true; n_groups])
    }

    /// Entities within `tau` of agent `observer`, plus the observer itself.
    pub fn of_agent(state: &WorldState, observer: usize, tau: f64) -> Self {
        let origin = state.agents[observer].position;
        Self(
            (0..state.n_entities())
                .map(|e| e == observer || distance(origin, state.entity(e).position) <= tau)
                .collect(),
        )
    }

    pub fn is_visible(&self, group: usize) -> bool {
        self.0[group]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Vec<f64>,
    pub visibility: Visibility,
}

/// Zero every slot group flagged invisible in `mask`.
pub fn apply_mask(values: &mut [f64], mask: &Visibility, layout: &ObservationLayout) -> Result<()> {
    if values.len() != layout.dim() {
        return Err(Error::dim("masked observation", layout.dim(), values.len()));
    }
    if mask.len() != layout.n_groups() {
        return Err(Error::dim("visibility mask", layout.n_groups(), mask.len()));
    }
    for (group, &visible) in mask.0.iter().enumerate() {
        if !visible {
            for k in layout.group_indices(group) {
                values[k] = 0.0;
            }
        }
    }
    Ok(())
}

/// Observation of agent `observer`. Entities farther than `tau` are zeroed;
/// the threshold is inclusive.
pub fn observe(state: &WorldState, observer: usize, spec: &TaskSpec) -> Result<Observation> {
    spec.check_state(state)?;
    if observer >= state.agents.len() {
        return Err(Error::InvalidTask(format!("no agent {observer}")));
    }
    let layout = spec.layout();
    let k = layout.n_agents;
    let mut values = Vec::with_capacity(layout.dim());
    for a in &state.agents {
        values.extend_from_slice(&a.position);
    }
    for a in &state.agents {
        values.extend_from_slice(&a.velocity);
    }
    for l in &state.landmarks {
        values.extend_from_slice(&l.position);
    }
    debug_assert_eq!(values.len(), 4 * k + 2 * layout.n_landmarks);
    let visibility = Visibility::of_agent(state, observer, spec.tau);
    apply_mask(&mut values, &visibility, &layout)?;
    Ok(Observation { values, visibility })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub size: f64,
    pub accel: f64,
    pub max_speed: Option<f64>,
}

/// First half slow and big, second half fast and small.
pub fn heterogeneous_profile(spec: &TaskSpec) -> Result<Vec<AgentProfile>> {
    if spec.kind != TaskKind::HeteroNav {
        return Err(Error::InvalidTask(format!(
            "heterogeneous profile requested for {}",
            spec.kind.name()
        )));
    }
    if spec.n_agents % 2 != 0 {
        return Err(Error::InvalidTask(format!(
            "{} agents cannot split into two halves",
            spec.n_agents
        )));
    }
    let half = spec.n_agents / 2;
    Ok((0..spec.n_agents)
        .map(|i| {
            let (size, speed) = if i < half {
                (2.0 * BASE_AGENT_SIZE, 0.5 * BASE_MAX_SPEED)
            } else {
                (0.5 * BASE_AGENT_SIZE, 2.0 * BASE_MAX_SPEED)
            };
            AgentProfile {
                size,
                accel: DEFAULT_ACCEL,
                max_speed: Some(speed),
            }
        })
        .collect())
}

fn agent_profiles(spec: &TaskSpec) -> Result<Vec<AgentProfile>> {
    let base = AgentProfile {
        size: BASE_AGENT_SIZE,
        accel: DEFAULT_ACCEL,
        max_speed: None,
    };
    Ok(match spec.kind {
        TaskKind::HeteroNav => heterogeneous_profile(spec)?,
        TaskKind::PredPrey => {
            let prey = AgentProfile {
                max_speed: Some(PREY_MAX_SPEED),
                ..base
            };
            let predator = AgentProfile {
                size: PREDATOR_SIZE,
                accel: DEFAULT_ACCEL,
                max_speed: Some(PREDATOR_MAX_SPEED),
            };
            let mut v = vec![prey; spec.n_agents];
            v.extend(std::iter::repeat_n(predator, spec.n_adversaries));
            v
        }
        _ => vec![base; spec.n_total_agents()],
    })
}

fn uniform_in_bounds<R: Rng + ?Sized>(rng: &mut R, bounds: f64, size: f64) -> [f64; 2] {
    let limit = bounds - size;
    [rng.random_range(-limit..=limit), rng.random_range(-limit..=limit)]
}

fn on_circle<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> [f64; 2] {
    let theta = rng.random_range(0.0..TAU);
    [radius * theta.cos(), radius * theta.sin()]
}

const LANDMARK_PLACEMENT_TRIES: usize = 1000;

fn place_landmarks_uniform<R: Rng + ?Sized>(rng: &mut R, landmarks: &mut [Entity], bounds: f64) {
    for i in 0..landmarks.len() {
        let mut pos = uniform_in_bounds(rng, bounds, landmarks[i].size);
        for _ in 0..LANDMARK_PLACEMENT_TRIES {
            let mut probe = landmarks[i].clone();
            probe.position = pos;
            if landmarks[..i].iter().all(|l| !overlapping(l, &probe)) {
                break;
            }
            pos = uniform_in_bounds(rng, bounds, landmarks[i].size);
        }
        landmarks[i].position = pos;
    }
}

/// Initial state of an episode, drawn from `rng`.
pub fn reset<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Result<WorldState> {
    spec.validate()?;
    let agents: Vec<Entity> = agent_profiles(spec)?
        .into_iter()
        .map(|p| Entity::agent(p.size, p.accel, p.max_speed))
        .collect();
    let landmarks = vec![Entity::landmark(spec.kind.landmark_size()); spec.n_landmarks];
    let mut state = WorldState::new(agents, landmarks);
    let bounds = state.bounds;
    let radius = bounds
        - state
            .landmarks
            .iter()
            .map(|l| l.size)
            .fold(0.0, f64::max);

    if !spec.symmetry_breaking {
        for a in &mut state.agents {
            a.position = uniform_in_bounds(rng, bounds, a.size);
        }
        place_landmarks_uniform(rng, &mut state.landmarks, bounds);
    } else {
        // Team agents always start at the origin.
        match spec.kind {
            TaskKind::CoopNav | TaskKind::HeteroNav | TaskKind::PhyDecep => {
                for l in &mut state.landmarks {
                    l.position = on_circle(rng, radius);
                }
            }
            TaskKind::PredPrey => {
                for a in &mut state.agents[spec.n_agents..] {
                    a.position = on_circle(rng, radius);
                }
                place_landmarks_uniform(rng, &mut state.landmarks, bounds);
            }
            TaskKind::KeepAway => {
                for a in &mut state.agents[spec.n_agents..] {
                    a.position = on_circle(rng, radius);
                }
                for l in &mut state.landmarks {
                    l.position = on_circle(rng, radius);
                }
            }
        }
    }
    if spec.kind.has_goal() {
        state.goal = Some(rng.random_range(0..spec.n_landmarks));
    }
    Ok(state)
}

fn goal_of(state: &WorldState) -> Result<&Entity> {
    state
        .goal
        .and_then(|g| state.landmarks.get(g))
        .ok_or_else(|| Error::InvalidTask("state has no goal landmark".into()))
}

/// Sparse per-agent extrinsic rewards for the transition into `after`.
pub fn extrinsic_reward(
    before: &WorldState,
    actions: &[DiscreteAction],
    after: &WorldState,
    spec: &TaskSpec,
) -> Result<Vec<f64>> {
    spec.check_state(before)?;
    spec.check_state(after)?;
    if actions.len() != spec.n_total_agents() {
        return Err(Error::dim("joint action", spec.n_total_agents(), actions.len()));
    }
    let team = &after.agents[..spec.n_agents];
    let adversaries = &after.agents[spec.n_agents..];
    let mut rewards = vec![0.0; spec.n_total_agents()];
    match spec.kind {
        TaskKind::CoopNav | TaskKind::HeteroNav => {
            let occupied = occupancy(team, &after.landmarks) as f64;
            rewards.fill(occupied);
        }
        TaskKind::PhyDecep => {
            let goal = goal_of(after)?;
            let team_on = team.iter().any(|a| overlapping(a, goal));
            let adv_on = adversaries.iter().any(|a| overlapping(a, goal));
            let team_reward = f64::from(u8::from(team_on)) - f64::from(u8::from(adv_on));
            rewards[..spec.n_agents].fill(team_reward);
            for (r, a) in rewards[spec.n_agents..].iter_mut().zip(adversaries) {
                *r = f64::from(u8::from(overlapping(a, goal)));
            }
        }
        TaskKind::KeepAway => {
            let goal = goal_of(after)?;
            let team_on = team.iter().any(|a| overlapping(a, goal));
            rewards[..spec.n_agents].fill(f64::from(u8::from(team_on)));
            for (r, adv) in rewards[spec.n_agents..].iter_mut().zip(adversaries) {
                *r = team.iter().filter(|a| overlapping(a, adv)).count() as f64;
            }
        }
        TaskKind::PredPrey => {
            for (i, a) in team.iter().enumerate() {
                for (k, adv) in adversaries.iter().enumerate() {
                    if overlapping(a, adv) {
                        rewards[i] -= 1.0;
                        rewards[spec.n_agents + k] += 1.0;
                    }
                }
            }
        }
    }
    Ok(rewards)
}

fn occupancy(team: &[Entity], landmarks: &[Entity]) -> usize {
    landmarks
        .iter()
        .filter(|l| team.iter().any(|a| overlapping(a, l)))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Landmarks overlapped by at least one team agent.
    pub occupancy_count: usize,
    /// Overlapping team-agent/adversary pairs.
    pub collision_count: usize,
    /// Per team agent, distance to the nearest target landmark (the goal in
    /// goal tasks, any landmark otherwise).
    pub min_agent_target_dist: Vec<f64>,
    /// Smallest team-agent/adversary distance; `None` without adversaries.
    pub min_adv_agent_dist: Option<f64>,
}

pub fn step_metrics(state: &WorldState, spec: &TaskSpec) -> Result<StepMetrics> {
    spec.check_state(state)?;
    let team = &state.agents[..spec.n_agents];
    let adversaries = &state.agents[spec.n_agents..];
    let targets: Vec<&Entity> = if spec.kind.has_goal() {
        vec![goal_of(state)?]
    } else {
        state.landmarks.iter().collect()
    };
    let min_agent_target_dist = team
        .iter()
        .map(|a| {
            targets
                .iter()
                .map(|t| distance(a.position, t.position))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut collision_count = 0;
    let mut min_adv: Option<f64> = None;
    for a in team {
        for adv in adversaries {
            if overlapping(a, adv) {
                collision_count += 1;
            }
            let d = distance(a.position, adv.position);
            min_adv = Some(min_adv.map_or(d, |m| m.min(d)));
        }
    }
    Ok(StepMetrics {
        occupancy_count: occupancy(team, &state.landmarks),
        collision_count,
        min_agent_target_dist,
        min_adv_agent_dist: min_adv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{apply_actions, Physics};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn default_specs_validate() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::default_for(kind);
            spec.validate().unwrap();
            let layout = spec.layout();
            assert_eq!(
                layout.dim(),
                4 + 2 * spec.n_landmarks + 4 * (spec.n_total_agents() - 1)
            );
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = TaskSpec::default_for(TaskKind::CoopNav);
        s.n_adversaries = 1;
        assert!(s.validate().is_err());
        let mut s = TaskSpec::default_for(TaskKind::HeteroNav);
        s.n_agents = 3;
        s.n_landmarks = 3;
        assert!(s.validate().is_err());
        let mut s = TaskSpec::default_for(TaskKind::PhyDecep);
        s.n_landmarks = 1;
        assert!(s.validate().is_err());
        let mut s = TaskSpec::default_for(TaskKind::CoopNav);
        s.tau = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn layout_groups_cover_every_index_once() {
        let layout = TaskSpec::default_for(TaskKind::KeepAway).layout();
        let mut seen = vec![0; layout.dim()];
        for g in 0..layout.n_groups() {
            for k in layout.group_indices(g) {
                seen[k] += 1;
                assert_eq!(layout.group_of(k), g);
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn config_round_trips_with_infinite_tau() {
        let mut spec = TaskSpec::default_for(TaskKind::PredPrey);
        spec.tau = f64::INFINITY;
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"inf\""));
        assert_eq!(TaskSpec::from_json_str(&json).unwrap(), spec);
        let toml_text = toml::to_string(&spec).unwrap();
        assert_eq!(TaskSpec::from_toml_str(&toml_text).unwrap(), spec);
        let literal = "task = \"coop_nav\"\nn_agents = 2\nn_adversaries = 0\nn_landmarks = 2\ntau = 0.5\nsymmetry_breaking = true\nseed = 3\n";
        let parsed = TaskSpec::from_toml_str(literal).unwrap();
        assert_eq!(parsed.n_agents, 2);
        assert!(parsed.symmetry_breaking);
    }

    #[test]
    fn symmetry_breaking_coop_is_equidistant() {
        let mut spec = TaskSpec::default_for(TaskKind::CoopNav);
        spec.symmetry_breaking = true;
        let s = reset(&spec, &mut rng(1)).unwrap();
        let mut ds = vec![];
        for a in &s.agents {
            assert_eq!(a.position, [0.0, 0.0]);
            for l in &s.landmarks {
                ds.push(distance(a.position, l.position));
            }
        }
        let max = ds.iter().cloned().fold(f64::MIN, f64::max);
        let min = ds.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max - min < 1e-9);
        assert!((max - (1.0 - NAV_LANDMARK_SIZE)).abs() < 1e-12);
        let m = step_metrics(&s, &spec).unwrap();
        assert_eq!(m.occupancy_count, 0);
    }

    #[test]
    fn resets_are_deterministic_and_at_rest() {
        for kind in TaskKind::ALL {
            for sb in [false, true] {
                let mut spec = TaskSpec::default_for(kind);
                spec.symmetry_breaking = sb;
                let a = reset(&spec, &mut rng(5)).unwrap();
                let b = reset(&spec, &mut rng(5)).unwrap();
                assert_eq!(a, b);
                assert!(a.agents.iter().all(|e| e.velocity == [0.0, 0.0]));
                assert_eq!(a.goal.is_some(), kind.has_goal());
            }
        }
    }

    #[test]
    fn standard_reset_landmarks_do_not_overlap() {
        let spec = TaskSpec::default_for(TaskKind::HeteroNav);
        for seed in 0..50 {
            let s = reset(&spec, &mut rng(seed)).unwrap();
            for i in 0..s.landmarks.len() {
                for j in i + 1..s.landmarks.len() {
                    assert!(!overlapping(&s.landmarks[i], &s.landmarks[j]));
                }
            }
        }
    }

    fn two_agent_state(other: [f64; 2], landmark: [f64; 2], tau: f64) -> (WorldState, TaskSpec) {
        let mut spec = TaskSpec::default_for(TaskKind::CoopNav);
        spec.n_agents = 2;
        spec.n_landmarks = 2;
        spec.tau = tau;
        let mut s = reset(&spec, &mut rng(0)).unwrap();
        s.agents[0].position = [0.0, 0.0];
        s.agents[1].position = other;
        s.agents[1].velocity = [0.3, -0.1];
        s.landmarks[0].position = landmark;
        s.landmarks[1].position = [0.9, 0.9];
        (s, spec)
    }

    #[test]
    fn full_observability_sees_everything() {
        let (s, spec) = two_agent_state([0.6, 0.0], [0.3, 0.4], f64::INFINITY);
        let obs = observe(&s, 0, &spec).unwrap();
        assert!(obs.visibility.0.iter().all(|&v| v));
        assert_eq!(obs.values[2..4], [0.6, 0.0]);
        assert_eq!(obs.values[6..8], [0.3, -0.1]);
    }

    #[test]
    fn far_agent_is_hidden_and_boundary_is_inclusive() {
        let (s, spec) = two_agent_state([0.6, 0.0], [0.3, 0.4], 0.5);
        let obs = observe(&s, 0, &spec).unwrap();
        let layout = spec.layout();
        assert!(!obs.visibility.is_visible(1));
        for k in layout.group_indices(1) {
            assert_eq!(obs.values[k], 0.0);
        }
        // landmark 0 at distance exactly 0.5
        assert!(obs.visibility.is_visible(2));
        assert_eq!(obs.values[8..10], [0.3, 0.4]);
        assert!(!obs.visibility.is_visible(3));
        assert!(obs.visibility.is_visible(0));
    }

    #[test]
    fn heterogeneous_profiles() {
        let spec = TaskSpec::default_for(TaskKind::HeteroNav);
        let p = heterogeneous_profile(&spec).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p[0].size > p[3].size && p[1].size > p[2].size);
        assert!(p[0].max_speed.unwrap() < p[2].max_speed.unwrap());
        let mut odd = spec.clone();
        odd.n_agents = 3;
        assert!(heterogeneous_profile(&odd).is_err());
        assert!(heterogeneous_profile(&TaskSpec::default_for(TaskKind::CoopNav)).is_err());
    }

    #[test]
    fn coop_rewards_count_occupied_landmarks() {
        let spec = TaskSpec::default_for(TaskKind::CoopNav);
        let mut s = reset(&spec, &mut rng(3)).unwrap();
        s.landmarks[0].position = [-0.5, -0.5];
        s.landmarks[1].position = [0.0, 0.5];
        s.landmarks[2].position = [0.5, -0.5];
        for (i, a) in s.agents.iter_mut().enumerate() {
            a.position = [-0.8 + 0.1 * i as f64, 0.9];
        }
        let acts = [DiscreteAction::Stay; 3];
        let r = extrinsic_reward(&s, &acts, &s, &spec).unwrap();
        assert_eq!(r, vec![0.0; 3]);

        s.agents[0].position = [-0.5, -0.5];
        s.agents[1].position = [-0.49, -0.5];
        s.agents[2].position = [0.0, 0.5];
        let r = extrinsic_reward(&s, &acts, &s, &spec).unwrap();
        assert_eq!(r, vec![2.0; 3]);
        assert_eq!(step_metrics(&s, &spec).unwrap().occupancy_count, 2);
    }

    #[test]
    fn pred_prey_single_capture() {
        let spec = TaskSpec::default_for(TaskKind::PredPrey);
        let mut s = reset(&spec, &mut rng(2)).unwrap();
        s.agents[0].position = [0.0, 0.0];
        s.agents[1].position = [0.8, 0.8];
        s.agents[2].position = [0.05, 0.0];
        s.agents[3].position = [-0.8, 0.8];
        let r = extrinsic_reward(&s, &[DiscreteAction::Stay; 4], &s, &spec).unwrap();
        assert_eq!(r, vec![-1.0, 0.0, 1.0, 0.0]);
        let m = step_metrics(&s, &spec).unwrap();
        assert_eq!(m.collision_count, 1);
        assert!((m.min_adv_agent_dist.unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn goal_task_rewards() {
        let spec = TaskSpec::default_for(TaskKind::PhyDecep);
        let mut s = reset(&spec, &mut rng(4)).unwrap();
        let g = s.goal.unwrap();
        let goal = s.landmarks[g].position;
        s.agents[0].position = goal;
        s.agents[1].position = [-goal[0], -goal[1]];
        s.agents[2].position = goal;
        let r = extrinsic_reward(&s, &[DiscreteAction::Stay; 3], &s, &spec).unwrap();
        assert_eq!(r, vec![0.0, 0.0, 1.0]);

        let spec = TaskSpec::default_for(TaskKind::KeepAway);
        let mut s = reset(&spec, &mut rng(4)).unwrap();
        let goal = s.landmarks[s.goal.unwrap()].position;
        s.agents[0].position = goal;
        s.agents[1].position = [0.9, -0.9];
        s.agents[2].position = goal;
        s.agents[3].position = [-0.9, -0.9];
        let r = extrinsic_reward(&s, &[DiscreteAction::Stay; 4], &s, &spec).unwrap();
        assert_eq!(r, vec![1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn reward_rejects_foreign_state() {
        let spec = TaskSpec::default_for(TaskKind::CoopNav);
        let other = TaskSpec::default_for(TaskKind::PredPrey);
        let s = reset(&other, &mut rng(0)).unwrap();
        assert!(extrinsic_reward(&s, &[DiscreteAction::Stay; 4], &s, &spec).is_err());
    }

    #[test]
    fn two_agents_on_one_landmark_count_once() {
        let spec = TaskSpec::default_for(TaskKind::CoopNav);
        let mut s = reset(&spec, &mut rng(8)).unwrap();
        s.landmarks[0].position = [0.0, 0.0];
        s.landmarks[1].position = [0.7, 0.7];
        s.landmarks[2].position = [-0.7, 0.7];
        s.agents[0].position = [0.01, 0.0];
        s.agents[1].position = [-0.01, 0.0];
        s.agents[2].position = [0.0, -0.7];
        assert_eq!(step_metrics(&s, &spec).unwrap().occupancy_count, 1);
    }

    proptest! {
        #[test]
        fn masking_invariants(seed in 0u64..10_000, kind_ix in 0usize..5, tau1 in 0.05f64..2.0, tau2 in 0.05f64..2.0) {
            let mut spec = TaskSpec::default_for(TaskKind::ALL[kind_ix]);
            let mut r = rng(seed);
            let mut s = reset(&spec, &mut r).unwrap();
            let acts: Vec<_> = (0..s.agents.len()).map(|_| DiscreteAction::from_index(r.random_range(0..5)).unwrap()).collect();
            s = apply_actions(&s, &acts, &Physics::default()).unwrap();
            let (lo, hi) = if tau1 <= tau2 { (tau1, tau2) } else { (tau2, tau1) };
            let layout = spec.layout();
            for i in 0..s.agents.len() {
                spec.tau = f64::INFINITY;
                let full = observe(&s, i, &spec).unwrap();
                spec.tau = lo;
                let a = observe(&s, i, &spec).unwrap();
                spec.tau = hi;
                let b = observe(&s, i, &spec).unwrap();
                for g in 0..layout.n_groups() {
                    prop_assert!(!a.visibility.is_visible(g) || b.visibility.is_visible(g));
                    for k in layout.group_indices(g) {
                        if a.visibility.is_visible(g) {
                            prop_assert_eq!(a.values[k], full.values[k]);
                        } else {
                            prop_assert_eq!(a.values[k], 0.0);
                        }
                    }
                }
                prop_assert!(a.visibility.is_visible(i));
            }
            let m = step_metrics(&s, &spec).unwrap();
            prop_assert!(m.occupancy_count <= spec.n_landmarks);
            if !spec.kind.has_adversaries() {
                let rw = extrinsic_reward(&s, &acts, &s, &spec).unwrap();
                prop_assert!(rw.iter().all(|&v| v == rw[0]));
            }
        }
    }
}
