//! Adaptation protocols, each producing a learning curve under a frame
//! budget.
//!
//! Single-task protocols (`default`, `ga`, `scratch_expert`) share one loop:
//! a batch of episodes is collected on the test task, optionally followed by
//! an update, and the policy is evaluated on a separate stream every
//! `eval_fraction` of the budget. Multi-task protocols (`cmt`,
//! `scratch_meta`) resume or start the algorithm's own meta-training on the
//! test space.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{Task, TaskParams, TaskSpace};
use crate::meta::{Agent, AgentConfig, Algo, Arch, MetaTrainConfig, MetaTrainRun, TrainState};
use crate::par::Exec;
use crate::pg::{collect, ActMode, Diagnostics, LearningCurve, RolloutBatch, TaskSource};
use crate::seed::SeedTree;
use crate::with_actor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Default,
    Ga,
    Cmt,
    ScratchExpert,
    ScratchMeta,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Default, Mode::Ga, Mode::Cmt, Mode::ScratchExpert, Mode::ScratchMeta];

    pub fn key(self) -> &'static str {
        match self {
            Mode::Default => "default",
            Mode::Ga => "ga",
            Mode::Cmt => "cmt",
            Mode::ScratchExpert => "scratch_expert",
            Mode::ScratchMeta => "scratch_meta",
        }
    }

    pub fn is_single_task(self) -> bool {
        matches!(self, Mode::Default | Mode::Ga | Mode::ScratchExpert)
    }

    pub fn is_scratch(self) -> bool {
        matches!(self, Mode::ScratchExpert | Mode::ScratchMeta)
    }

    /// Baseline the mode is scored against.
    pub fn baseline(self) -> Mode {
        if self.is_single_task() {
            Mode::ScratchExpert
        } else {
            Mode::ScratchMeta
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.key() == s).ok_or_else(|| Error::UnknownKey(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Task(Task),
    Space(TaskSpace),
}

impl Target {
    pub fn horizon(&self) -> usize {
        match self {
            Target::Task(t) => t.spec.horizon,
            Target::Space(s) => s.family.spec().horizon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub frame_budget: usize,
    /// Evaluation every `eval_fraction * frame_budget` frames.
    pub eval_fraction: f64,
    /// Episodes per single-task evaluation point.
    pub eval_episodes: usize,
    /// Tasks per multi-task evaluation point.
    pub eval_tasks: usize,
    /// Episodes collected between two context-method updates.
    pub ga_episodes: usize,
    /// `(policy, vae)` learning rates for context-method updates; the
    /// algorithm's own rates when `None`.
    pub ga_lr: Option<(f64, f64)>,
    /// Step size of MAML's test-time policy gradient; its inner rate when
    /// `None`.
    pub maml_lr: Option<f64>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            frame_budget: 10_000,
            eval_fraction: 0.02,
            eval_episodes: 10,
            eval_tasks: 10,
            ga_episodes: 4,
            ga_lr: None,
            maml_lr: None,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_budget == 0 || self.eval_episodes == 0 || self.eval_tasks == 0 || self.ga_episodes == 0 {
            return Err(Error::Config("adaptation budget and counts must be positive".into()));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction <= 1.0) {
            return Err(Error::Config("eval_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn eval_every(&self) -> usize {
        ((self.frame_budget as f64 * self.eval_fraction).ceil() as usize).max(1)
    }
}

/// One line of `traj_dump.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajRecord {
    pub task: TaskParams,
    pub family: String,
    pub trial: usize,
    pub episode: usize,
    pub positions: Vec<[f64; 2]>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beliefs: Option<Vec<Vec<f64>>>,
}

impl TrajRecord {
    pub fn from_batch(batch: &RolloutBatch, with_context: bool) -> Vec<TrajRecord> {
        let mut out = Vec::new();
        for (ti, trial) in batch.trials.iter().enumerate() {
            for (ei, ep) in trial.episodes.iter().enumerate() {
                out.push(TrajRecord {
                    task: trial.task.params,
                    family: trial.task.family().key().to_string(),
                    trial: ti,
                    episode: ei,
                    positions: ep.positions.clone(),
                    actions: ep.actions.clone(),
                    rewards: ep.rewards.clone(),
                    beliefs: (with_context && !ep.contexts.is_empty()).then(|| ep.contexts.clone()),
                });
            }
        }
        out
    }

    pub fn write_jsonl(records: &[TrajRecord], path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdaptationRun {
    pub mode: Mode,
    pub curve: LearningCurve,
    pub agent: Agent,
    /// Environment frames consumed (evaluation excluded).
    pub frames: usize,
    pub diag: Diagnostics,
    /// MAML test-time or inner-loop gradient norms, in order.
    pub grad_norms: Vec<f64>,
    /// Number of collected (non-evaluation) episodes with a nonzero reward.
    pub rewarded_episodes: usize,
    /// Episodes of the last evaluation point.
    pub dump: Vec<TrajRecord>,
}

impl AdaptationRun {
    /// Return of the starting parameters: the first curve point.
    pub fn initial_return(&self) -> Option<f64> {
        self.curve.first_return()
    }
}

fn single_task_eval(agent: &Agent, task: &Task, cfg: &AdaptationConfig, seeds: &SeedTree, exec: Exec) -> Result<(f64, RolloutBatch)> {
    let ept = agent.episodes_per_trial();
    let tasks = vec![task.clone(); cfg.eval_episodes.div_ceil(ept)];
    let batch = agent.trials(&tasks, seeds, ActMode::Stochastic, exec)?;
    Ok((batch.mean_episode_return(), batch))
}

/// Shared single-task loop. `update == false` collects without learning.
fn single_task(agent: Agent, task: &Task, mode: Mode, update: bool, cfg: &AdaptationConfig, run_id: &str, seed: u64, seeds: &SeedTree, exec: Exec) -> Result<AdaptationRun> {
    cfg.validate()?;
    let ept = agent.episodes_per_trial();
    let is_maml = matches!(agent.arch, Arch::Mlp(_));
    let episodes = if is_maml { agent.config.maml.inner_batch_tasks } else { cfg.ga_episodes.div_ceil(ept) * ept };
    let step_frames = episodes * task.spec.horizon;
    let every = cfg.eval_every();
    let maml_lr = cfg.maml_lr.unwrap_or(agent.config.maml.inner_lr);
    let source = TaskSource::Fixed(task.clone());

    let mut state = TrainState::new(agent);
    state.reset_optimizers();
    let mut curve = LearningCurve::new(run_id, seed);
    let mut diag = Diagnostics::default();
    let mut grad_norms = Vec::new();
    let mut rewarded = 0;
    let mut frames = 0;
    let mut evals = 0u64;
    let eval_seeds = seeds.child("eval");
    let (r, mut last) = single_task_eval(&state.agent, task, cfg, &eval_seeds.index(evals), exec)?;
    curve.push(0, r)?;
    evals += 1;
    let mut iter = 0u64;
    while frames + step_frames <= cfg.frame_budget {
        let node = seeds.child("step").index(iter);
        iter += 1;
        let (used, rew) = if update && is_maml {
            let s = state.pg_step(task, episodes, maml_lr, &node.child("collect"), exec)?;
            grad_norms.extend(&s.inner_grad_norms);
            diag.append(s.diag);
            (s.frames, s.rewarded_episodes)
        } else if update {
            let s = state.context_iteration(&source, episodes / ept, cfg.ga_lr, &node, exec)?;
            diag.append(s.diag);
            (s.frames, s.rewarded_episodes)
        } else {
            // identical collection stream, no learning
            let sub = node.child("collect");
            let b = with_actor!(state.agent, a => collect(&a, &source, step_frames, ept, &sub, exec))?;
            let rew = b.episodes().filter(|e| e.rewards.iter().any(|&r| r != 0.0)).count();
            (b.frame_count, rew)
        };
        frames += used;
        rewarded += rew;
        let last_step = frames + step_frames > cfg.frame_budget;
        if frames >= evals as usize * every || last_step {
            let (r, b) = single_task_eval(&state.agent, task, cfg, &eval_seeds.index(evals), exec)?;
            curve.push(frames as u64, r)?;
            last = b;
            evals += 1;
        }
    }
    let dump = TrajRecord::from_batch(&last, true);
    Ok(AdaptationRun { mode, curve, agent: state.agent, frames, diag, grad_norms, rewarded_episodes: rewarded, dump })
}

/// Unroll the trained agent on `task` without any parameter update.
pub fn adapt_default(agent: &Agent, task: &Task, cfg: &AdaptationConfig, run_id: &str, seed: u64, seeds: &SeedTree, exec: Exec) -> Result<AdaptationRun> {
    if !agent.algo.is_context_based() {
        return Err(Error::DefaultModeUndefined);
    }
    single_task(agent.clone(), task, Mode::Default, false, cfg, run_id, seed, seeds, exec)
}

/// Keep training every component on `task`: PPO (and the VAE) for context
/// methods, plain policy gradient for MAML.
pub fn adapt_ga(agent: &Agent, task: &Task, cfg: &AdaptationConfig, run_id: &str, seed: u64, seeds: &SeedTree, exec: Exec) -> Result<AdaptationRun> {
    single_task(agent.clone(), task, Mode::Ga, true, cfg, run_id, seed, seeds, exec)
}

fn multi_task(agent: Agent, space: &TaskSpace, mode: Mode, cfg: &AdaptationConfig, run_id: &str, seed: u64, seeds: &SeedTree, exec: Exec) -> Result<AdaptationRun> {
    cfg.validate()?;
    if space.family.spec() != *agent.spec() {
        crate::env::Adapter::new(&space.family.spec(), agent.spec())?;
    }
    let mt = MetaTrainConfig { frames: cfg.frame_budget, eval_fraction: cfg.eval_fraction, eval_tasks: cfg.eval_tasks, eval_episodes: 1 };
    let mut run = MetaTrainRun::start(agent, run_id, seed);
    run.run(&TaskSource::Space(space.clone()), &mt, seeds, exec, None)?;
    let mut rng = seeds.child("dump").rng();
    let tasks: Vec<Task> = (0..cfg.eval_tasks).map(|_| space.sample(&mut rng)).collect();
    let last = run.state.agent.trials(&tasks, &seeds.child("dump"), ActMode::Stochastic, exec)?;
    Ok(AdaptationRun {
        mode,
        curve: run.curve,
        agent: run.state.agent,
        frames: run.frames,
        diag: run.diag,
        grad_norms: run.inner_grad_norms,
        rewarded_episodes: run.rewarded_episodes,
        dump: TrajRecord::from_batch(&last, true),
    })
}

/// Resume the algorithm's own meta-training on `space`.
pub fn continue_meta_train(agent: &Agent, space: &TaskSpace, cfg: &AdaptationConfig, run_id: &str, seed: u64, seeds: &SeedTree, exec: Exec) -> Result<AdaptationRun> {
    multi_task(agent.clone(), space, Mode::Cmt, cfg, run_id, seed, seeds, exec)
}

/// From-scratch baselines: the expert is the algorithm's own backbone and
/// test-time learner started from a fresh initialisation on one task; the
/// meta baseline meta-trains a fresh agent on the space.
pub fn train_scratch(algo: Algo, agent_cfg: &AgentConfig, target: &Target, cfg: &AdaptationConfig, run_id: &str, seed: u64, seeds: &SeedTree, exec: Exec) -> Result<AdaptationRun> {
    match target {
        Target::Task(task) => {
            let agent = Agent::new(algo, agent_cfg, &task.spec, &seeds.child("theta0"))?;
            single_task(agent, task, Mode::ScratchExpert, true, cfg, run_id, seed, seeds, exec)
        }
        Target::Space(space) => {
            let agent = Agent::new(algo, agent_cfg, &space.family.spec(), &seeds.child("theta0"))?;
            multi_task(agent, space, Mode::ScratchMeta, cfg, run_id, seed, seeds, exec)
        }
    }
}

/// Dispatch on `mode`. `agent` is the meta-trained checkpoint (ignored by
/// the scratch modes, which need only its algorithm and configuration).
pub fn run_mode(mode: Mode, agent: &Agent, target: &Target, cfg: &AdaptationConfig, run_id: &str, seed: u64, seeds: &SeedTree, exec: Exec) -> Result<AdaptationRun> {
    let need_task = || Error::Config(format!("mode {mode} needs a single task"));
    let need_space = || Error::Config(format!("mode {mode} needs a task space"));
    match (mode, target) {
        (Mode::Default, Target::Task(t)) => adapt_default(agent, t, cfg, run_id, seed, seeds, exec),
        (Mode::Ga, Target::Task(t)) => adapt_ga(agent, t, cfg, run_id, seed, seeds, exec),
        (Mode::Cmt, Target::Space(s)) => continue_meta_train(agent, s, cfg, run_id, seed, seeds, exec),
        (Mode::ScratchExpert, Target::Task(_)) | (Mode::ScratchMeta, Target::Space(_)) => {
            train_scratch(agent.algo, &agent.config, target, cfg, run_id, seed, seeds, exec)
        }
        (Mode::Default | Mode::Ga | Mode::ScratchExpert, _) => Err(need_task()),
        (Mode::Cmt | Mode::ScratchMeta, _) => Err(need_space()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Family, Quadrant};

    fn small() -> AgentConfig {
        let mut c = AgentConfig::default();
        c.maml.inner_batch_tasks = 2;
        c.maml.outer_batch_tasks = 2;
        c.rl2.trials_per_update = 2;
        c.varibad.trials_per_update = 2;
        c.varibad.vae.batch_trials = 2;
        c.varibad.vae.subsample_elbos = Some(10);
        c
    }

    fn cfg(budget: usize) -> AdaptationConfig {
        AdaptationConfig { frame_budget: budget, eval_fraction: 0.25, eval_episodes: 2, eval_tasks: 2, ga_episodes: 2, ..AdaptationConfig::default() }
    }

    fn agent(algo: Algo) -> Agent {
        Agent::new(algo, &small(), &Family::NavDense.spec(), &SeedTree::root(1)).unwrap()
    }

    fn task() -> Task {
        Task::nav_goal(Family::NavDense, 2.5).unwrap()
    }

    #[test]
    fn mode_keys_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.key().parse::<Mode>().unwrap(), m);
        }
        assert!("fine_tune".parse::<Mode>().is_err());
        assert_eq!(Mode::Ga.baseline(), Mode::ScratchExpert);
        assert_eq!(Mode::Cmt.baseline(), Mode::ScratchMeta);
    }

    #[test]
    fn default_mode_is_undefined_for_maml() {
        let r = adapt_default(&agent(Algo::Maml), &task(), &cfg(1000), "x", 0, &SeedTree::root(0), Exec::Sequential);
        assert!(matches!(r, Err(Error::DefaultModeUndefined)));
    }

    #[test]
    fn default_mode_never_changes_parameters() {
        for algo in [Algo::Rl2, Algo::Varibad] {
            let a = agent(algo);
            let run = adapt_default(&a, &task(), &cfg(1000), "x", 0, &SeedTree::root(0), Exec::Sequential).unwrap();
            assert!(run.agent.policy.bit_eq(&a.policy) && run.agent.vae.bit_eq(&a.vae));
            assert!(run.frames <= 1000 && run.curve.final_frame() <= 1000);
        }
    }

    #[test]
    fn zero_rate_ga_reproduces_default_exactly() {
        for algo in [Algo::Rl2, Algo::Varibad] {
            let a = agent(algo);
            let seeds = SeedTree::root(4);
            let d = adapt_default(&a, &task(), &cfg(1200), "x", 0, &seeds, Exec::Sequential).unwrap();
            let c = AdaptationConfig { ga_lr: Some((0.0, 0.0)), ..cfg(1200) };
            let g = adapt_ga(&a, &task(), &c, "x", 0, &seeds, Exec::Parallel).unwrap();
            assert_eq!(d.curve, g.curve);
            assert_eq!(d.dump, g.dump);
            assert_eq!(d.frames, g.frames);
        }
    }

    #[test]
    fn ga_changes_every_component() {
        let a = agent(Algo::Varibad);
        let run = adapt_ga(&a, &task(), &cfg(600), "x", 0, &SeedTree::root(2), Exec::Sequential).unwrap();
        assert!(!run.agent.policy.bit_eq(&a.policy));
        assert!(!run.agent.vae.bit_eq(&a.vae));
    }

    #[test]
    fn maml_ga_logs_gradient_norms_within_budget() {
        let a = agent(Algo::Maml);
        let run = adapt_ga(&a, &task(), &cfg(1000), "x", 0, &SeedTree::root(2), Exec::Sequential).unwrap();
        assert_eq!(run.grad_norms.len(), 5);
        assert_eq!(run.frames, 1000);
        assert_eq!(run.curve.len(), 5);
    }

    #[test]
    fn cmt_and_scratch_meta_share_the_evaluation_protocol() {
        let a = agent(Algo::Rl2);
        let space = TaskSpace::quadrant(Family::NavDense, Quadrant::Up).unwrap();
        let seeds = SeedTree::root(5);
        let c = cfg(1600);
        let cmt = run_mode(Mode::Cmt, &a, &Target::Space(space.clone()), &c, "x", 0, &seeds, Exec::Sequential).unwrap();
        let scr = run_mode(Mode::ScratchMeta, &a, &Target::Space(space), &c, "x", 0, &seeds, Exec::Sequential).unwrap();
        assert_eq!(cmt.curve.frames(), scr.curve.frames());
        assert!(cmt.frames <= 1600);
    }

    #[test]
    fn scratch_expert_starts_from_fresh_parameters() {
        let a = agent(Algo::Rl2);
        let c = cfg(400);
        let t = Target::Task(task());
        let s1 = run_mode(Mode::ScratchExpert, &a, &t, &c, "x", 0, &SeedTree::root(7), Exec::Sequential).unwrap();
        let mut other = a.clone();
        other.policy.scale(3.0);
        let s2 = run_mode(Mode::ScratchExpert, &other, &t, &c, "x", 0, &SeedTree::root(7), Exec::Sequential).unwrap();
        assert_eq!(s1.curve, s2.curve);
    }

    #[test]
    fn mode_target_mismatch_is_rejected() {
        let a = agent(Algo::Rl2);
        let space = TaskSpace::quadrant(Family::NavDense, Quadrant::Up).unwrap();
        assert!(run_mode(Mode::Ga, &a, &Target::Space(space), &cfg(400), "x", 0, &SeedTree::root(0), Exec::Sequential).is_err());
        assert!(run_mode(Mode::Cmt, &a, &Target::Task(task()), &cfg(400), "x", 0, &SeedTree::root(0), Exec::Sequential).is_err());
    }

    #[test]
    fn dumps_carry_beliefs_for_varibad() {
        let a = agent(Algo::Varibad);
        let run = adapt_default(&a, &task(), &cfg(400), "x", 0, &SeedTree::root(0), Exec::Sequential).unwrap();
        assert_eq!(run.dump.len(), 2);
        let r = &run.dump[0];
        assert_eq!(r.positions.len(), 101);
        assert_eq!(r.beliefs.as_ref().unwrap().len(), 100);
        let line = serde_json::to_string(r).unwrap();
        assert_eq!(serde_json::from_str::<TrajRecord>(&line).unwrap(), *r);
    }
}
