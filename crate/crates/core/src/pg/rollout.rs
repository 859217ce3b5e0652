use serde::{Deserialize, Serialize};

use crate::env::{self, Adapter, EnvSpec, EnvState, Task, TaskSpace};
use crate::par::Exec;
use crate::seed::{Rng, SeedTree};
use crate::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    #[default]
    Stochastic,
    /// Act with the distribution mean (debugging only).
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOut {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    /// Recurrent context the action was conditioned on (belief or hidden).
    pub context: Option<Vec<f64>>,
}

/// Anything that can act in an environment, step by step, with some
/// recurrent carry.
///
/// Observations and actions are in the policy's own coordinates
/// ([`Policy::spec`]); the rollout engine pads and truncates.
pub trait Policy: Sync {
    type Carry: Clone + Send;

    fn spec(&self) -> &EnvSpec;

    fn begin_trial(&self) -> Self::Carry;

    /// Called before every episode of a trial (`index` 0 included).
    fn begin_episode(&self, _carry: &mut Self::Carry, _index: usize) {}

    fn act(&self, obs: &[f64], carry: &mut Self::Carry, mask: &[bool], rng: &mut Rng, mode: ActMode) -> ActOut;

    /// Feed back the transition that followed the last `act`.
    fn observe(&self, _carry: &mut Self::Carry, _action: &[f64], _reward: f64, _next_obs: &[f64], _done: bool) {}
}

/// One episode in policy coordinates with sampling-time statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub next_obs: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contexts: Vec<Vec<f64>>,
    /// Environment position after reset and after every step.
    pub positions: Vec<[f64; 2]>,
}

impl Episode {
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

/// Consecutive episodes on one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub task: Task,
    pub episodes: Vec<Episode>,
}

impl Trial {
    pub fn frames(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.episodes.iter().enumerate().flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e, t)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub trials: Vec<Trial>,
    /// Action mask applied to every log-probability in the batch.
    pub mask: Vec<bool>,
    pub frame_count: usize,
}

impl RolloutBatch {
    pub fn new(trials: Vec<Trial>, mask: Vec<bool>) -> Self {
        let frame_count = trials.iter().map(Trial::frames).sum();
        Self { trials, mask, frame_count }
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.trials.iter().flat_map(|t| t.episodes.iter())
    }

    pub fn episode_count(&self) -> usize {
        self.trials.iter().map(|t| t.episodes.len()).sum()
    }

    pub fn mean_episode_return(&self) -> f64 {
        let n = self.episode_count().max(1) as f64;
        self.episodes().map(Episode::total_reward).sum::<f64>() / n
    }

    /// Episodes with at least one nonzero reward.
    pub fn rewarded_episodes(&self) -> usize {
        self.episodes().filter(|e| e.rewards.iter().any(|&r| r != 0.0)).count()
    }

    pub fn step_count(&self) -> usize {
        self.frame_count
    }
}

/// Where the tasks of a batch come from.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSource {
    Fixed(Task),
    Space(TaskSpace),
}

impl TaskSource {
    pub fn draw(&self, rng: &mut Rng) -> Task {
        match self {
            TaskSource::Fixed(t) => t.clone(),
            TaskSource::Space(s) => s.sample(rng),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            TaskSource::Fixed(t) => t.spec.horizon,
            TaskSource::Space(s) => s.family.spec().horizon,
        }
    }
}

/// Run `n_episodes` consecutive episodes of one trial on `task`.
pub fn run_trial<P: Policy>(policy: &P, task: &Task, n_episodes: usize, rng: &mut Rng, mode: ActMode) -> Result<Trial> {
    let adapter = Adapter::new(&task.spec, policy.spec())?;
    let mask = adapter.action_mask();
    let mut carry = policy.begin_trial();
    let mut episodes = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes {
        policy.begin_episode(&mut carry, e);
        let mut state = EnvState::initial(task);
        let h = task.spec.horizon;
        let mut ep = Episode {
            obs: Vec::with_capacity(h),
            actions: Vec::with_capacity(h),
            rewards: Vec::with_capacity(h),
            dones: Vec::with_capacity(h),
            next_obs: Vec::with_capacity(h),
            log_probs: Vec::with_capacity(h),
            values: Vec::with_capacity(h),
            contexts: Vec::new(),
            positions: vec![state.position()],
        };
        let mut obs = adapter.obs(&state.observe(&task.spec));
        loop {
            let out = policy.act(&obs, &mut carry, &mask, rng, mode);
            let (next, res) = env::step(task, &state, &adapter.env_action(&out.action))?;
            state = next;
            let next_obs = adapter.obs(&res.next_obs);
            policy.observe(&mut carry, &out.action, res.reward, &next_obs, res.done);
            ep.positions.push(state.position());
            ep.obs.push(std::mem::replace(&mut obs, next_obs.clone()));
            ep.next_obs.push(next_obs);
            ep.actions.push(out.action);
            ep.rewards.push(res.reward);
            ep.dones.push(res.done);
            ep.log_probs.push(out.log_prob);
            ep.values.push(out.value);
            if let Some(c) = out.context {
                ep.contexts.push(c);
            }
            if res.done {
                break;
            }
        }
        episodes.push(ep);
    }
    Ok(Trial { task: task.clone(), episodes })
}

/// One trial per task, each with its own stream `seeds/index(i)`.
pub fn collect_trials<P: Policy>(
    policy: &P,
    tasks: &[Task],
    episodes_per_trial: usize,
    seeds: &SeedTree,
    mode: ActMode,
    exec: Exec,
) -> Result<RolloutBatch> {
    let jobs: Vec<(usize, &Task)> = tasks.iter().enumerate().collect();
    let trials = exec.map(jobs, |(i, task)| {
        let mut rng = seeds.index(i as u64).rng();
        run_trial(policy, task, episodes_per_trial, &mut rng, mode)
    });
    let trials = trials.into_iter().collect::<Result<Vec<_>>>()?;
    let mask = match trials.first() {
        Some(t) => Adapter::new(&t.task.spec, policy.spec())?.action_mask(),
        None => vec![true; policy.spec().act_dim],
    };
    Ok(RolloutBatch::new(trials, mask))
}

/// Number of trials that cover at least `n_frames` environment steps.
pub fn trials_for_frames(n_frames: usize, horizon: usize, episodes_per_trial: usize) -> usize {
    n_frames.div_ceil(horizon).div_ceil(episodes_per_trial.max(1))
}

/// Collect `ceil(n_frames / horizon)` episodes (rounded up to whole trials)
/// from tasks drawn from `source`.
pub fn collect<P: Policy>(
    policy: &P,
    source: &TaskSource,
    n_frames: usize,
    episodes_per_trial: usize,
    seeds: &SeedTree,
    exec: Exec,
) -> Result<RolloutBatch> {
    let n = trials_for_frames(n_frames, source.horizon(), episodes_per_trial);
    let mut task_rng = seeds.child("tasks").rng();
    let tasks: Vec<Task> = (0..n).map(|_| source.draw(&mut task_rng)).collect();
    collect_trials(policy, &tasks, episodes_per_trial, &seeds.child("trials"), ActMode::Stochastic, exec)
}

/// Mean undiscounted episode return over `n_episodes` episodes, grouped
/// into independent trials of `episodes_per_trial`.
pub fn evaluate<P: Policy>(
    policy: &P,
    task: &Task,
    n_episodes: usize,
    episodes_per_trial: usize,
    seeds: &SeedTree,
    mode: ActMode,
    exec: Exec,
) -> Result<f64> {
    let ept = episodes_per_trial.max(1);
    let n_trials = n_episodes.div_ceil(ept);
    let tasks = vec![task.clone(); n_trials];
    let batch = collect_trials(policy, &tasks, ept, seeds, mode, exec)?;
    let returns: Vec<f64> = batch.episodes().take(n_episodes).map(Episode::total_reward).collect();
    Ok(returns.iter().sum::<f64>() / returns.len().max(1) as f64)
}

/// Mean return over one trial on each of the given tasks.
pub fn evaluate_tasks<P: Policy>(
    policy: &P,
    tasks: &[Task],
    episodes_per_trial: usize,
    seeds: &SeedTree,
    exec: Exec,
) -> Result<f64> {
    let batch = collect_trials(policy, tasks, episodes_per_trial, seeds, ActMode::Stochastic, exec)?;
    Ok(batch.mean_episode_return())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::env::Family;

    /// Scripted policy: fixed displacement, or straight to the goal.
    pub(crate) struct Scripted {
        pub spec: EnvSpec,
        pub goal: Option<[f64; 2]>,
    }

    impl Policy for Scripted {
        type Carry = ();
        fn spec(&self) -> &EnvSpec {
            &self.spec
        }
        fn begin_trial(&self) {}
        fn act(&self, obs: &[f64], _: &mut (), _: &[bool], _: &mut Rng, _: ActMode) -> ActOut {
            let action = match self.goal {
                None => vec![0.0; self.spec.act_dim],
                Some(g) => vec![g[0] - obs[0], g[1] - obs[1]],
            };
            ActOut { action, log_prob: 0.0, value: 0.0, context: None }
        }
    }

    fn right(f: Family) -> Task {
        Task::nav_goal(f, 0.0).unwrap()
    }

    #[test]
    fn frame_arithmetic() {
        let p = Scripted { spec: Family::NavDense.spec(), goal: None };
        let b = collect(&p, &TaskSource::Fixed(right(Family::NavDense)), 200, 1, &SeedTree::root(0), Exec::Sequential).unwrap();
        assert_eq!(b.episode_count(), 2);
        assert_eq!(b.frame_count, 200);
        assert_eq!(trials_for_frames(201, 100, 2), 2);
    }

    #[test]
    fn stationary_and_scripted_returns() {
        let seeds = SeedTree::root(1);
        let still = Scripted { spec: Family::NavDense.spec(), goal: None };
        let r = evaluate(&still, &right(Family::NavDense), 3, 1, &seeds, ActMode::Stochastic, Exec::Sequential).unwrap();
        assert!((r + 100.0).abs() < 1e-12);
        let r = evaluate(&still, &right(Family::NavSparse), 3, 1, &seeds, ActMode::Stochastic, Exec::Sequential).unwrap();
        assert_eq!(r, 0.0);
        let oracle = Scripted { spec: Family::NavDense.spec(), goal: Some([1.0, 0.0]) };
        let r = evaluate(&oracle, &right(Family::NavDense), 2, 1, &seeds, ActMode::Stochastic, Exec::Sequential).unwrap();
        assert!(r > -20.0, "oracle return {r}");
    }

    #[test]
    fn positions_cover_every_step() {
        let p = Scripted { spec: Family::NavDense.spec(), goal: Some([0.0, 1.0]) };
        let mut rng = SeedTree::root(2).rng();
        let trial = run_trial(&p, &right(Family::NavDense), 2, &mut rng, ActMode::Stochastic).unwrap();
        for ep in &trial.episodes {
            assert_eq!(ep.positions.len(), ep.len() + 1);
            assert_eq!(ep.positions[0], [0.0, 0.0]);
            assert!(ep.dones[..ep.len() - 1].iter().all(|d| !d) && ep.dones[ep.len() - 1]);
        }
    }

    #[test]
    fn cross_embodiment_pads_observations() {
        let p = Scripted { spec: Family::DashVelB.spec(), goal: None };
        let task = Task::new(Family::DashVel, crate::env::TaskParams::Velocity { target: 1.0 }).unwrap();
        let b = collect_trials(&p, &[task], 1, &SeedTree::root(3), ActMode::Stochastic, Exec::Sequential).unwrap();
        assert_eq!(b.mask, vec![true, false]);
        assert_eq!(b.trials[0].episodes[0].obs[0].len(), 5);
        let nav = Scripted { spec: Family::NavDense.spec(), goal: None };
        let task = Task::new(Family::DashVel, crate::env::TaskParams::Velocity { target: 1.0 }).unwrap();
        assert!(collect_trials(&nav, &[task], 1, &SeedTree::root(3), ActMode::Stochastic, Exec::Sequential).is_err());
    }
}
