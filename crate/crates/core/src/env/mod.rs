//! Point-mass task families.
//!
//! Navigation tasks move a point in the plane towards a goal on the unit
//! circle. The "Dash" tasks are 1-d point-mass proxies for velocity and
//! direction running, in two embodiments (A: obs 3 / act 1, B: obs 5 / act
//! 2) so that cross-embodiment transfer goes through [`Adapter`].
//!
//! Task families and regions are addressed by string keys such as
//! `nav_dense:left`, `nav_sparse:right`, `dash_vel:[1,2]` or `dash_dir_b`.

mod pad;
mod space;

pub use pad::{pad_adapt, Adapter};
pub use space::{Quadrant, Region, TaskSpace};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-component displacement bound for navigation.
pub const NAV_MAX_STEP: f64 = 0.1;
/// Distance within which the sparse navigation reward is paid.
pub const SPARSE_RADIUS: f64 = 0.2;
/// Integration step of the Dash point mass.
pub const DASH_DT: f64 = 0.1;
pub const DEFAULT_DISCOUNT: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    NavDense,
    NavSparse,
    DashVel,
    DashDir,
    DashVelB,
    DashDirB,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::NavDense,
        Family::NavSparse,
        Family::DashVel,
        Family::DashDir,
        Family::DashVelB,
        Family::DashDirB,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Family::NavDense => "nav_dense",
            Family::NavSparse => "nav_sparse",
            Family::DashVel => "dash_vel",
            Family::DashDir => "dash_dir",
            Family::DashVelB => "dash_vel_b",
            Family::DashDirB => "dash_dir_b",
        }
    }

    pub fn parse(key: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.key() == key)
            .ok_or_else(|| Error::UnknownKey(key.to_string()))
    }

    pub fn is_nav(self) -> bool {
        matches!(self, Family::NavDense | Family::NavSparse)
    }

    pub fn is_velocity(self) -> bool {
        matches!(self, Family::DashVel | Family::DashVelB)
    }

    pub fn is_direction(self) -> bool {
        matches!(self, Family::DashDir | Family::DashDirB)
    }

    pub fn spec(self) -> EnvSpec {
        let (obs_dim, act_dim, horizon, bound) = match self {
            Family::NavDense | Family::NavSparse => (2, 2, 100, NAV_MAX_STEP),
            Family::DashVel | Family::DashDir => (3, 1, 200, 1.0),
            Family::DashVelB | Family::DashDirB => (5, 2, 200, 1.0),
        };
        EnvSpec {
            family: self,
            obs_dim,
            act_dim,
            horizon,
            discount: DEFAULT_DISCOUNT,
            action_low: vec![-bound; act_dim],
            action_high: vec![bound; act_dim],
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub family: Family,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub horizon: usize,
    pub discount: f64,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskParams {
    /// Goal at `(cos angle, sin angle)`.
    Goal { angle: f64 },
    Velocity { target: f64 },
    /// `sign` is +1 (forward) or -1 (backward).
    Direction { sign: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub spec: EnvSpec,
    pub params: TaskParams,
}

impl Task {
    pub fn new(family: Family, params: TaskParams) -> Result<Self> {
        let ok = match params {
            TaskParams::Goal { angle } => family.is_nav() && angle.is_finite(),
            TaskParams::Velocity { target } => family.is_velocity() && target.is_finite(),
            TaskParams::Direction { sign } => family.is_direction() && (sign == 1.0 || sign == -1.0),
        };
        if !ok {
            return Err(Error::IncompatibleSpec(format!("{params:?} for {family}")));
        }
        Ok(Self { spec: family.spec(), params })
    }

    pub fn nav_goal(family: Family, angle: f64) -> Result<Self> {
        Self::new(family, TaskParams::Goal { angle })
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn goal(&self) -> Option<[f64; 2]> {
        match self.params {
            TaskParams::Goal { angle } => Some([angle.cos(), angle.sin()]),
            _ => None,
        }
    }

    /// Short label used in dumps and run ids.
    pub fn label(&self) -> String {
        match self.params {
            TaskParams::Goal { angle } => format!("{}@{:.6}", self.family(), angle),
            TaskParams::Velocity { target } => format!("{}@{:.6}", self.family(), target),
            TaskParams::Direction { sign } => format!("{}@{:+}", self.family(), sign),
        }
    }
}

/// Physical state of one environment instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnvState {
    Nav { pos: [f64; 2], t: usize },
    Dash { pos: f64, vel: f64, t: usize },
}

impl EnvState {
    pub fn initial(task: &Task) -> Self {
        if task.family().is_nav() {
            EnvState::Nav { pos: [0.0, 0.0], t: 0 }
        } else {
            EnvState::Dash { pos: 0.0, vel: 0.0, t: 0 }
        }
    }

    pub fn t(&self) -> usize {
        match *self {
            EnvState::Nav { t, .. } | EnvState::Dash { t, .. } => t,
        }
    }

    /// Planar position (Dash tasks report `(pos, vel)`).
    pub fn position(&self) -> [f64; 2] {
        match *self {
            EnvState::Nav { pos, .. } => pos,
            EnvState::Dash { pos, vel, .. } => [pos, vel],
        }
    }

    pub fn observe(&self, spec: &EnvSpec) -> Vec<f64> {
        let mut obs = vec![0.0; spec.obs_dim];
        match *self {
            EnvState::Nav { pos, .. } => obs[..2].copy_from_slice(&pos),
            EnvState::Dash { pos, vel, t } => {
                obs[0] = pos;
                obs[1] = vel;
                obs[2] = t as f64 / spec.horizon as f64;
            }
        }
        obs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Initial observation for `task`.
pub fn reset(task: &Task) -> Vec<f64> {
    EnvState::initial(task).observe(&task.spec)
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Advance `state` by one step. Out-of-range action components are clipped;
/// extra components beyond what the physics uses are ignored.
pub fn step(task: &Task, state: &EnvState, action: &[f64]) -> Result<(EnvState, StepResult)> {
    let spec = &task.spec;
    if action.len() != spec.act_dim {
        return Err(Error::DimMismatch { expected: spec.act_dim, got: action.len() });
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidAction);
    }
    let a = |i: usize| clip(action[i], spec.action_low[i], spec.action_high[i]);
    let (next, reward) = match (*state, task.params) {
        (EnvState::Nav { pos, t }, TaskParams::Goal { angle }) => {
            let pos = [pos[0] + a(0), pos[1] + a(1)];
            let dist = ((pos[0] - angle.cos()).powi(2) + (pos[1] - angle.sin()).powi(2)).sqrt();
            let reward = match spec.family {
                Family::NavSparse if dist <= SPARSE_RADIUS => 1.0 - dist,
                Family::NavSparse => 0.0,
                _ => -dist,
            };
            (EnvState::Nav { pos, t: t + 1 }, reward)
        }
        (EnvState::Dash { pos, vel, t }, params) => {
            let vel = vel + a(0) * DASH_DT;
            let pos = pos + vel * DASH_DT;
            let reward = match params {
                TaskParams::Velocity { target } => -(vel - target).abs(),
                TaskParams::Direction { sign } => sign * vel,
                TaskParams::Goal { .. } => unreachable!("goal params on a dash task"),
            };
            (EnvState::Dash { pos, vel, t: t + 1 }, reward)
        }
        (EnvState::Nav { .. }, _) => {
            return Err(Error::IncompatibleSpec("navigation state with dash task".into()))
        }
    };
    let done = next.t() >= spec.horizon;
    let next_obs = next.observe(spec);
    Ok((next, StepResult { next_obs, reward, done }))
}

/// One environment instance: a task plus its current state.
#[derive(Clone, Debug)]
pub struct Env {
    pub task: Task,
    pub state: EnvState,
}

impl Env {
    pub fn new(task: Task) -> Self {
        let state = EnvState::initial(&task);
        Self { task, state }
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.state = EnvState::initial(&self.task);
        self.state.observe(&self.task.spec)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let (next, res) = step(&self.task, &self.state, action)?;
        self.state = next;
        Ok(res)
    }
}

/// One episode in environment coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: Task,
    /// Observations before each step.
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Roll out a deterministic action sequence (used for determinism checks).
pub fn replay(task: &Task, actions: &[Vec<f64>]) -> Result<Trajectory> {
    let mut env = Env::new(task.clone());
    let mut obs = env.reset();
    let mut traj = Trajectory {
        task: task.clone(),
        observations: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        dones: Vec::new(),
    };
    for a in actions.iter().take(task.spec.horizon) {
        let res = env.step(a)?;
        traj.observations.push(std::mem::replace(&mut obs, res.next_obs));
        traj.actions.push(a.clone());
        traj.rewards.push(res.reward);
        traj.dones.push(res.done);
        if res.done {
            break;
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nav(family: Family, angle: f64) -> Task {
        Task::nav_goal(family, angle).unwrap()
    }

    #[test]
    fn horizons_and_dims() {
        assert_eq!(Family::NavDense.spec().horizon, 100);
        assert_eq!(Family::NavSparse.spec().horizon, 100);
        for f in [Family::DashVel, Family::DashDir, Family::DashVelB, Family::DashDirB] {
            assert_eq!(f.spec().horizon, 200);
        }
        assert_eq!((Family::DashVel.spec().obs_dim, Family::DashVel.spec().act_dim), (3, 1));
        assert_eq!((Family::DashDirB.spec().obs_dim, Family::DashDirB.spec().act_dim), (5, 2));
    }

    #[test]
    fn reset_observations() {
        assert_eq!(reset(&nav(Family::NavDense, 1.3)), vec![0.0, 0.0]);
        let vel = Task::new(Family::DashVel, TaskParams::Velocity { target: 1.5 }).unwrap();
        assert_eq!(reset(&vel), vec![0.0; 3]);
        let vel_b = Task::new(Family::DashVelB, TaskParams::Velocity { target: -2.5 }).unwrap();
        assert_eq!(reset(&vel_b), vec![0.0; 5]);
    }

    #[test]
    fn dense_reward_at_center() {
        let task = nav(Family::NavDense, 0.0);
        let (_, r) = step(&task, &EnvState::initial(&task), &[0.0, 0.0]).unwrap();
        assert_eq!(r.reward, -1.0);
    }

    #[test]
    fn sparse_reward_outside_threshold() {
        let task = nav(Family::NavSparse, 0.0);
        let s0 = EnvState::initial(&task);
        for a in [[0.0, 0.0], [0.1, 0.0], [-5.0, 3.0]] {
            assert_eq!(step(&task, &s0, &a).unwrap().1.reward, 0.0);
        }
        let near = EnvState::Nav { pos: [0.85, 0.0], t: 0 };
        let r = step(&task, &near, &[0.05, 0.0]).unwrap().1.reward;
        assert!((r - (1.0 - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn velocity_reward_zero_on_target() {
        let task = Task::new(Family::DashVel, TaskParams::Velocity { target: 1.0 }).unwrap();
        let s = EnvState::Dash { pos: 0.0, vel: 1.0, t: 0 };
        let (_, r) = step(&task, &s, &[0.0]).unwrap();
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn direction_reward_tracks_velocity() {
        let task = Task::new(Family::DashDirB, TaskParams::Direction { sign: -1.0 }).unwrap();
        let s = EnvState::Dash { pos: 0.0, vel: 0.0, t: 0 };
        // second component is ignored by the physics
        let (next, r) = step(&task, &s, &[-3.0, 100.0]).unwrap();
        let EnvState::Dash { pos, vel, t } = next else { panic!("dash state") };
        assert!((pos + 0.01).abs() < 1e-15 && vel == -0.1 && t == 1);
        assert!((r.reward - 0.1).abs() < 1e-15);
        assert_eq!(r.next_obs.len(), 5);
        assert_eq!(&r.next_obs[3..], &[0.0, 0.0]);
    }

    #[test]
    fn invalid_action_rejected() {
        let task = nav(Family::NavDense, 0.0);
        let s = EnvState::initial(&task);
        assert!(matches!(step(&task, &s, &[f64::NAN, 0.0]), Err(Error::InvalidAction)));
        assert!(matches!(step(&task, &s, &[f64::INFINITY, 0.0]), Err(Error::InvalidAction)));
        assert!(matches!(step(&task, &s, &[0.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn done_only_at_horizon() {
        let task = nav(Family::NavDense, 0.5);
        let traj = replay(&task, &vec![vec![0.1, 0.1]; 150]).unwrap();
        assert_eq!(traj.len(), 100);
        assert!(traj.dones[..99].iter().all(|d| !d));
        assert!(traj.dones[99]);
    }

    proptest! {
        #[test]
        fn determinism(angle in -3.2f64..3.2, acts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..100)) {
            let task = nav(Family::NavDense, angle);
            let actions: Vec<Vec<f64>> = acts.iter().map(|&(a, b)| vec![a, b]).collect();
            let a = replay(&task, &actions).unwrap();
            let b = replay(&task, &actions).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn dense_reward_bounds(angle in -3.2f64..3.2, acts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 100)) {
            let task = nav(Family::NavDense, angle);
            let mut env = Env::new(task.clone());
            env.reset();
            for (a, b) in acts {
                let r = env.step(&[a, b]).unwrap().reward;
                let p = env.state.position();
                let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
                prop_assert!(r <= 0.0);
                prop_assert!(r >= -(1.0 + norm) - 1e-12);
            }
        }

        #[test]
        fn sparse_matches_dense(angle in -3.2f64..3.2, acts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 100)) {
            let dense = nav(Family::NavDense, angle);
            let sparse = nav(Family::NavSparse, angle);
            let (mut sd, mut ss) = (EnvState::initial(&dense), EnvState::initial(&sparse));
            for (a, b) in acts {
                let (nd, rd) = step(&dense, &sd, &[a, b]).unwrap();
                let (ns, rs) = step(&sparse, &ss, &[a, b]).unwrap();
                prop_assert_eq!(nd, ns);
                if -rd.reward <= SPARSE_RADIUS {
                    prop_assert!((rs.reward - (1.0 + rd.reward)).abs() < 1e-15);
                } else {
                    prop_assert_eq!(rs.reward, 0.0);
                }
                sd = nd;
                ss = ns;
            }
        }
    }
}
