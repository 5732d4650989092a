//! Two-dimensional particle physics for agents and landmarks.
//!
//! Stepping is a pure function of the state and the joint action: forces from
//! the discrete actions, linear damping, speed clipping, explicit Euler
//! integration and clamping to the square world. Overlaps are detected but
//! bodies pass through each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_DAMPING: f64 = 0.25;
pub const DEFAULT_ACCEL: f64 = 5.0;
/// Half-extent of the world on each axis.
pub const WORLD_HALF_EXTENT: f64 = 1.0;

pub fn distance(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn norm(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscreteAction {
    Stay,
    Up,
    Down,
    Left,
    Right,
}

impl DiscreteAction {
    pub const COUNT: usize = 5;
    pub const ALL: [DiscreteAction; 5] = [
        DiscreteAction::Stay,
        DiscreteAction::Up,
        DiscreteAction::Down,
        DiscreteAction::Left,
        DiscreteAction::Right,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn direction(self) -> Vec2 {
        match self {
            DiscreteAction::Stay => [0.0, 0.0],
            DiscreteAction::Up => [0.0, 1.0],
            DiscreteAction::Down => [0.0, -1.0],
            DiscreteAction::Left => [-1.0, 0.0],
            DiscreteAction::Right => [1.0, 0.0],
        }
    }

    pub fn one_hot(self) -> [f64; 5] {
        let mut v = [0.0; 5];
        v[self.index()] = 1.0;
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub position: Vec2,
    pub velocity: Vec2,
    pub size: f64,
    pub movable: bool,
    pub max_speed: Option<f64>,
    pub accel: f64,
}

impl Entity {
    pub fn agent(size: f64, accel: f64, max_speed: Option<f64>) -> Self {
        Self {
            position: [0.0, 0.0],
            velocity: [0.0, 0.0],
            size,
            movable: true,
            max_speed,
            accel,
        }
    }

    pub fn landmark(size: f64) -> Self {
        Self {
            position: [0.0, 0.0],
            velocity: [0.0, 0.0],
            size,
            movable: false,
            max_speed: None,
            accel: 0.0,
        }
    }

    pub fn speed(&self) -> f64 {
        norm(self.velocity)
    }
}

/// Integration constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Physics {
    pub dt: f64,
    pub damping: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            damping: DEFAULT_DAMPING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    /// Team agents first, then adversaries.
    pub agents: Vec<Entity>,
    pub landmarks: Vec<Entity>,
    /// Index into `landmarks` for tasks with a single goal.
    pub goal: Option<usize>,
    pub step_index: u64,
    /// Half-extent per axis; `f64::INFINITY` disables clamping.
    pub bounds: f64,
}

impl WorldState {
    pub fn new(agents: Vec<Entity>, landmarks: Vec<Entity>) -> Self {
        Self {
            agents,
            landmarks,
            goal: None,
            step_index: 0,
            bounds: WORLD_HALF_EXTENT,
        }
    }

    /// Entities in observation order: all agents, then all landmarks.
    pub fn entity(&self, index: usize) -> &Entity {
        if index < self.agents.len() {
            &self.agents[index]
        } else {
            &self.landmarks[index - self.agents.len()]
        }
    }

    pub fn n_entities(&self) -> usize {
        self.agents.len() + self.landmarks.len()
    }
}

/// Advance the world one step under the joint action.
pub fn apply_actions(
    state: &WorldState,
    actions: &[DiscreteAction],
    physics: &Physics,
) -> Result<WorldState> {
    if actions.len() != state.agents.len() {
        return Err(Error::dim("joint action", state.agents.len(), actions.len()));
    }
    let mut next = state.clone();
    for (agent, action) in next.agents.iter_mut().zip(actions) {
        if !agent.movable {
            continue;
        }
        let dir = action.direction();
        for axis in 0..2 {
            let force = agent.accel * dir[axis];
            agent.velocity[axis] = agent.velocity[axis] * (1.0 - physics.damping) + force * physics.dt;
        }
        if let Some(max_speed) = agent.max_speed {
            let speed = agent.speed();
            if speed > max_speed {
                let scale = max_speed / speed;
                agent.velocity[0] *= scale;
                agent.velocity[1] *= scale;
            }
        }
        for axis in 0..2 {
            agent.position[axis] += agent.velocity[axis] * physics.dt;
            let limit = state.bounds - agent.size;
            if agent.position[axis] > limit {
                agent.position[axis] = limit;
                agent.velocity[axis] = 0.0;
            } else if agent.position[axis] < -limit {
                agent.position[axis] = -limit;
                agent.velocity[axis] = 0.0;
            }
        }
    }
    next.step_index += 1;
    Ok(next)
}

/// Discs overlap when their centers are closer than the sum of their radii.
pub fn overlapping(a: &Entity, b: &Entity) -> bool {
    distance(a.position, b.position) < a.size + b.size
}

/// Symmetric agent-to-agent distance matrix with a zero diagonal.
pub fn pairwise_distance(state: &WorldState) -> Vec<Vec<f64>> {
    let n = state.agents.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = distance(state.agents[i].position, state.agents[j].position);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// One line of an episode trace dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: usize,
    pub step: u64,
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub landmarks: Vec<Vec2>,
    pub actions: Vec<DiscreteAction>,
}

impl TraceRecord {
    pub fn new(episode: usize, state: &WorldState, actions: &[DiscreteAction]) -> Self {
        Self {
            episode,
            step: state.step_index,
            positions: state.agents.iter().map(|a| a.position).collect(),
            velocities: state.agents.iter().map(|a| a.velocity).collect(),
            landmarks: state.landmarks.iter().map(|l| l.position).collect(),
            actions: actions.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(position: Vec2, size: f64) -> WorldState {
        let mut a = Entity::agent(size, DEFAULT_ACCEL, None);
        a.position = position;
        WorldState::new(vec![a], vec![Entity::landmark(0.05)])
    }

    #[test]
    fn stay_keeps_resting_agents_in_place() {
        let mut s = single([0.2, -0.3], 0.05);
        s.agents.push(Entity::agent(0.05, DEFAULT_ACCEL, None));
        let next = apply_actions(&s, &[DiscreteAction::Stay; 2], &Physics::default()).unwrap();
        assert_eq!(next.agents[0].position, [0.2, -0.3]);
        assert_eq!(next.agents[1].position, [0.0, 0.0]);
        assert_eq!(next.step_index, 1);
    }

    #[test]
    fn one_step_integration() {
        let s = single([0.0, 0.0], 0.05);
        let next = apply_actions(&s, &[DiscreteAction::Right], &Physics::default()).unwrap();
        assert!((next.agents[0].velocity[0] - 0.5).abs() < 1e-15);
        assert_eq!(next.agents[0].velocity[1], 0.0);
        assert!((next.agents[0].position[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn boundary_clamps_and_zeroes_velocity() {
        let mut s = single([0.99, 0.0], 0.05);
        s.agents[0].velocity = [1.0, 0.2];
        let next = apply_actions(&s, &[DiscreteAction::Right], &Physics::default()).unwrap();
        assert_eq!(next.agents[0].position[0], 1.0 - 0.05);
        assert_eq!(next.agents[0].velocity[0], 0.0);
        assert!(next.agents[0].velocity[1] != 0.0);
    }

    #[test]
    fn max_speed_clips() {
        let mut s = single([0.0, 0.0], 0.05);
        s.agents[0].max_speed = Some(0.3);
        let next = apply_actions(&s, &[DiscreteAction::Up], &Physics::default()).unwrap();
        assert!((next.agents[0].speed() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn action_count_mismatch() {
        let s = single([0.0, 0.0], 0.05);
        assert!(apply_actions(&s, &[], &Physics::default()).is_err());
    }

    #[test]
    fn overlap_cases() {
        let mut a = Entity::agent(0.05, 5.0, None);
        let mut b = Entity::landmark(0.05);
        assert!(overlapping(&a, &b));
        b.position = [0.15, 0.0];
        assert!(!overlapping(&a, &b));
        b.size = 0.08;
        b.position = [0.1299, 0.0];
        assert!(overlapping(&a, &b));
        a.position = [0.0, 0.0001];
        assert!(overlapping(&a, &b));
    }

    #[test]
    fn pairwise_distance_cases() {
        let s = single([0.4, 0.4], 0.05);
        assert_eq!(pairwise_distance(&s), vec![vec![0.0]]);

        let mut s = single([0.0, 0.0], 0.05);
        s.bounds = f64::INFINITY;
        let mut b = Entity::agent(0.05, 5.0, None);
        b.position = [3.0, 4.0];
        s.agents.push(b);
        let d = pairwise_distance(&s);
        assert_eq!(d[0][1], 5.0);
        assert_eq!(d[1][0], 5.0);
    }

    fn arb_world() -> impl Strategy<Value = WorldState> {
        proptest::collection::vec(
            (-0.9f64..0.9, -0.9f64..0.9, -2.0f64..2.0, -2.0f64..2.0, prop::option::of(0.5f64..2.0)),
            1..5,
        )
        .prop_map(|agents| {
            let agents = agents
                .into_iter()
                .map(|(x, y, vx, vy, max_speed)| {
                    let mut e = Entity::agent(0.05, DEFAULT_ACCEL, max_speed);
                    e.position = [x, y];
                    e.velocity = [vx, vy];
                    e
                })
                .collect();
            let mut l = Entity::landmark(0.05);
            l.position = [0.3, -0.2];
            WorldState::new(agents, vec![l])
        })
    }

    proptest! {
        #[test]
        fn stepping_invariants(world in arb_world(), seq in proptest::collection::vec(0usize..5, 1..40)) {
            let physics = Physics::default();
            let mut s = world;
            let landmarks = s.landmarks.clone();
            for a in seq {
                let actions = vec![DiscreteAction::from_index(a).unwrap(); s.agents.len()];
                let next = apply_actions(&s, &actions, &physics).unwrap();
                prop_assert_eq!(&next, &apply_actions(&s, &actions, &physics).unwrap());
                for e in &next.agents {
                    if let Some(m) = e.max_speed {
                        prop_assert!(e.speed() <= m + 1e-12);
                    }
                    for axis in 0..2 {
                        prop_assert!(e.position[axis].abs() <= next.bounds + e.size);
                    }
                }
                prop_assert_eq!(&next.landmarks, &landmarks);
                let d = pairwise_distance(&next);
                for i in 0..d.len() {
                    prop_assert_eq!(d[i][i], 0.0);
                    for j in 0..d.len() {
                        prop_assert_eq!(d[i][j], d[j][i]);
                    }
                }
                s = next;
            }
        }
    }
}
