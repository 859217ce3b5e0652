//! MAML (first order), RL² and VariBAD agents and their meta-training loops.

pub mod maml;
pub mod mlp;
pub mod rl2;
pub mod varibad;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use maml::{inner_adapt, outer_gradient, outer_update, MamlConfig, INNER_LR_GRID};
pub use mlp::{MlpActor, MlpArch, MlpPolicyConfig};
pub use rl2::{Rl2Actor, Rl2Arch, Rl2Carry, Rl2Config};
pub use varibad::{kl_diag_gauss, vae_update, VaeConfig, VaeNoise, VariBadActor, VariBadArch, VariBadCarry, VariBadConfig};

use crate::diffnet::{Adam, AdamConfig, ParamSet};
use crate::env::{EnvSpec, Task};
use crate::par::Exec;
use crate::pg::{
    collect, collect_trials, ppo_update, vanilla_pg_update, ActMode, Diagnostics, Episode, LearningCurve, RolloutBatch,
    TaskSource, Trial,
};
use crate::seed::SeedTree;
use crate::{Error, Result};

/// Rows of per-step vectors for the selected trials, in trial / episode /
/// step order.
pub(crate) fn stack_rows<'b, F>(batch: &'b RolloutBatch, trials: &[usize], dim: usize, f: F) -> Array2<f64>
where
    F: Fn(&'b Episode, usize) -> &'b Vec<f64>,
{
    let n: usize = trials.iter().map(|&i| batch.trials[i].frames()).sum();
    let mut out = Array2::zeros((n, dim));
    let mut r = 0;
    for &i in trials {
        for ep in &batch.trials[i].episodes {
            for t in 0..ep.len() {
                out.row_mut(r).assign(&ndarray::ArrayView1::from(f(ep, t).as_slice()));
                r += 1;
            }
        }
    }
    out
}

/// Episode lengths shared by all selected trials.
pub(crate) fn check_lockstep(batch: &RolloutBatch, trials: &[usize]) -> Result<Vec<usize>> {
    let first = trials.first().ok_or_else(|| Error::Config("empty minibatch".into()))?;
    let lens: Vec<usize> = batch.trials[*first].episodes.iter().map(Episode::len).collect();
    for &i in trials {
        let l: Vec<usize> = batch.trials[i].episodes.iter().map(Episode::len).collect();
        if l != lens {
            return Err(Error::Config("recurrent minibatch trials differ in episode structure".into()));
        }
    }
    Ok(lens)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Maml,
    Rl2,
    Varibad,
}

impl Algo {
    pub const ALL: [Algo; 3] = [Algo::Maml, Algo::Rl2, Algo::Varibad];

    pub fn key(self) -> &'static str {
        match self {
            Algo::Maml => "maml",
            Algo::Rl2 => "rl2",
            Algo::Varibad => "varibad",
        }
    }

    pub fn is_context_based(self) -> bool {
        !matches!(self, Algo::Maml)
    }

    /// Component names stored in checkpoints.
    pub fn components(self) -> &'static [&'static str] {
        match self {
            Algo::Varibad => &["policy", "vae"],
            _ => &["policy"],
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL.into_iter().find(|a| a.key() == s).ok_or_else(|| Error::UnknownKey(s.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub maml: MamlConfig,
    pub rl2: Rl2Config,
    pub varibad: VariBadConfig,
}

#[derive(Clone, Debug)]
pub enum Arch {
    Mlp(MlpArch),
    Rl2(Rl2Arch),
    Varibad(VariBadArch),
}

/// Architecture plus parameters of one agent.
#[derive(Clone, Debug)]
pub struct Agent {
    pub algo: Algo,
    pub config: AgentConfig,
    pub arch: Arch,
    pub policy: ParamSet,
    /// VariBAD encoder and decoders (empty otherwise).
    pub vae: ParamSet,
}

/// Run `$body` with `$a` bound to the agent's [`crate::pg::Policy`].
#[macro_export]
macro_rules! with_actor {
    ($agent:expr, $a:ident => $body:expr) => {
        match &$agent.arch {
            $crate::meta::Arch::Mlp(arch) => {
                let $a = arch.actor(&$agent.policy);
                $body
            }
            $crate::meta::Arch::Rl2(arch) => {
                let $a = arch.actor(&$agent.policy);
                $body
            }
            $crate::meta::Arch::Varibad(arch) => {
                let $a = arch.actor(&$agent.policy, &$agent.vae);
                $body
            }
        }
    };
}

impl Agent {
    pub fn build_arch(algo: Algo, config: &AgentConfig, spec: &EnvSpec) -> Result<Arch> {
        Ok(match algo {
            Algo::Maml => Arch::Mlp(MlpArch::new(spec, &config.maml.policy)?),
            Algo::Rl2 => Arch::Rl2(Rl2Arch::new(spec, &config.rl2)?),
            Algo::Varibad => Arch::Varibad(VariBadArch::new(spec, &config.varibad)?),
        })
    }

    /// Freshly initialised agent (`theta_0`).
    pub fn new(algo: Algo, config: &AgentConfig, spec: &EnvSpec, seeds: &SeedTree) -> Result<Self> {
        let arch = Self::build_arch(algo, config, spec)?;
        let mut rng = seeds.child("init").rng();
        let (policy, vae) = match &arch {
            Arch::Mlp(a) => (a.init(&mut rng), ParamSet::new()),
            Arch::Rl2(a) => (a.init(&mut rng), ParamSet::new()),
            Arch::Varibad(a) => a.init(&mut rng),
        };
        Ok(Self { algo, config: config.clone(), arch, policy, vae })
    }

    pub fn spec(&self) -> &EnvSpec {
        match &self.arch {
            Arch::Mlp(a) => &a.spec,
            Arch::Rl2(a) => &a.spec,
            Arch::Varibad(a) => &a.spec,
        }
    }

    pub fn episodes_per_trial(&self) -> usize {
        match self.algo {
            Algo::Maml => 1,
            Algo::Rl2 => self.config.rl2.episodes_per_trial.max(1),
            Algo::Varibad => self.config.varibad.episodes_per_trial.max(1),
        }
    }

    pub fn components(&self) -> Vec<(&'static str, &ParamSet)> {
        match self.algo {
            Algo::Varibad => vec![("policy", &self.policy), ("vae", &self.vae)],
            _ => vec![("policy", &self.policy)],
        }
    }

    pub fn set_component(&mut self, name: &str, p: ParamSet) -> Result<()> {
        match name {
            "policy" => self.policy = p,
            "vae" if self.algo == Algo::Varibad => self.vae = p,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Mean return over `n_episodes` on `task` with the current parameters
    /// (no adaptation beyond in-context inference).
    pub fn evaluate(&self, task: &Task, n_episodes: usize, seeds: &SeedTree, exec: Exec) -> Result<f64> {
        let ept = self.episodes_per_trial();
        with_actor!(self, a => crate::pg::evaluate(&a, task, n_episodes, ept, seeds, ActMode::Stochastic, exec))
    }

    /// Trials on the given tasks with the current parameters.
    pub fn trials(&self, tasks: &[Task], seeds: &SeedTree, mode: ActMode, exec: Exec) -> Result<RolloutBatch> {
        let ept = self.episodes_per_trial();
        with_actor!(self, a => collect_trials(&a, tasks, ept, seeds, mode, exec))
    }

    /// Meta-evaluation return on `tasks`: context methods run one trial per
    /// task; MAML adapts once per task and is then evaluated.
    pub fn meta_evaluate(&self, tasks: &[Task], n_episodes: usize, seeds: &SeedTree, exec: Exec) -> Result<f64> {
        match &self.arch {
            Arch::Mlp(arch) => {
                let cfg = &self.config.maml;
                let jobs: Vec<(usize, &Task)> = tasks.iter().enumerate().collect();
                let rs = exec.map(jobs, |(i, t)| {
                    maml::adapted_return(arch, &self.policy, t, cfg, n_episodes, &seeds.index(i as u64), Exec::Sequential)
                });
                let rs = rs.into_iter().collect::<Result<Vec<f64>>>()?;
                Ok(rs.iter().sum::<f64>() / rs.len().max(1) as f64)
            }
            _ => {
                let ept = self.episodes_per_trial();
                let per_task = n_episodes.div_ceil(ept).max(1);
                let expanded: Vec<Task> = tasks.iter().flat_map(|t| std::iter::repeat_n(t.clone(), per_task)).collect();
                Ok(self.trials(&expanded, seeds, ActMode::Stochastic, exec)?.mean_episode_return())
            }
        }
    }
}

/// Mutable learning state: agent, optimiser moments and the VAE buffer.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub agent: Agent,
    pub opt_policy: Adam,
    pub opt_vae: Adam,
    pub vae_buffer: VecDeque<Trial>,
}

#[derive(Clone, Debug, Default)]
pub struct IterStats {
    pub frames: usize,
    pub diag: Diagnostics,
    pub inner_grad_norms: Vec<f64>,
    pub mean_return: f64,
    pub rewarded_episodes: usize,
}

impl TrainState {
    pub fn new(agent: Agent) -> Self {
        let outer = match agent.algo {
            Algo::Maml => agent.config.maml.outer,
            Algo::Rl2 => AdamConfig { lr: agent.config.rl2.pg.learning_rate, ..AdamConfig::default() },
            Algo::Varibad => AdamConfig { lr: agent.config.varibad.pg.learning_rate, ..AdamConfig::default() },
        };
        let vae = AdamConfig { lr: agent.config.varibad.vae.lr, ..AdamConfig::default() };
        Self { agent, opt_policy: Adam::new(outer), opt_vae: Adam::new(vae), vae_buffer: VecDeque::new() }
    }

    /// Fresh optimiser moments (used when adaptation starts).
    pub fn reset_optimizers(&mut self) {
        self.opt_policy = Adam::new(self.opt_policy.config);
        self.opt_vae = Adam::new(self.opt_vae.config);
        self.vae_buffer.clear();
    }

    /// Environment frames one meta-iteration consumes.
    pub fn meta_iteration_frames(&self, horizon: usize) -> usize {
        let c = &self.agent.config;
        match self.agent.algo {
            Algo::Maml => c.maml.outer_frames(horizon),
            Algo::Rl2 => c.rl2.trials_per_update * c.rl2.episodes_per_trial.max(1) * horizon,
            Algo::Varibad => c.varibad.trials_per_update * c.varibad.episodes_per_trial.max(1) * horizon,
        }
    }

    /// One iteration of the algorithm's own meta-training on `source`.
    pub fn meta_iteration(&mut self, source: &TaskSource, seeds: &SeedTree, exec: Exec) -> Result<IterStats> {
        match self.agent.algo {
            Algo::Maml => {
                let Arch::Mlp(arch) = &self.agent.arch else { unreachable!() };
                let cfg = self.agent.config.maml.clone();
                let out = outer_update(arch, &mut self.agent.policy, &mut self.opt_policy, source, &cfg, seeds, exec)?;
                let mut diag = Diagnostics::default();
                diag.push(out.post_loss, out.mean.norm(), self.agent.policy.norm());
                Ok(IterStats {
                    frames: out.frames,
                    diag,
                    inner_grad_norms: out.inner_grad_norms,
                    mean_return: f64::NAN,
                    rewarded_episodes: out.rewarded_episodes,
                })
            }
            _ => {
                let n_trials = match self.agent.algo {
                    Algo::Rl2 => self.agent.config.rl2.trials_per_update,
                    _ => self.agent.config.varibad.trials_per_update,
                };
                self.context_iteration(source, n_trials, None, seeds, exec)
            }
        }
    }

    /// Context-method iteration: collect `n_trials`, PPO on the policy, and
    /// (VariBAD) VAE updates. `lr` overrides both learning rates.
    pub fn context_iteration(
        &mut self,
        source: &TaskSource,
        n_trials: usize,
        lr: Option<(f64, f64)>,
        seeds: &SeedTree,
        exec: Exec,
    ) -> Result<IterStats> {
        let ept = self.agent.episodes_per_trial();
        let frames = n_trials * ept * source.horizon();
        let batch = with_actor!(self.agent, a => collect(&a, source, frames, ept, &seeds.child("collect"), exec))?;
        let mut rng = seeds.child("update").rng();
        let mean_return = batch.mean_episode_return();
        let rewarded_episodes = batch.rewarded_episodes();
        let frames = batch.frame_count;
        let mut diag;
        match &self.agent.arch {
            Arch::Rl2(arch) => {
                let mut pg = self.agent.config.rl2.pg.clone();
                if let Some((p, _)) = lr {
                    pg.learning_rate = p;
                }
                diag = ppo_update(arch, &mut self.agent.policy, &mut self.opt_policy, &batch, &pg, &mut rng)?;
            }
            Arch::Varibad(arch) => {
                let mut arch = arch.clone();
                if let Some((p, v)) = lr {
                    arch.config.pg.learning_rate = p;
                    arch.config.vae.lr = v;
                }
                let pg = arch.config.pg.clone();
                diag = ppo_update(&arch, &mut self.agent.policy, &mut self.opt_policy, &batch, &pg, &mut rng)?;
                let cap = arch.config.vae.buffer_trials.max(1);
                for t in batch.trials {
                    if self.vae_buffer.len() == cap {
                        self.vae_buffer.pop_front();
                    }
                    self.vae_buffer.push_back(t);
                }
                let buf: Vec<Trial> = self.vae_buffer.iter().cloned().collect();
                let vd = vae_update(&arch, &mut self.agent.vae, &mut self.opt_vae, &buf, &mut rng)?;
                diag.append(vd);
            }
            Arch::Mlp(_) => return Err(Error::Config("context iteration on an MLP agent".into())),
        }
        Ok(IterStats { frames, diag, inner_grad_norms: Vec::new(), mean_return, rewarded_episodes })
    }

    /// One plain policy-gradient step for an MLP agent on a single task.
    pub fn pg_step(&mut self, task: &Task, n_episodes: usize, lr: f64, seeds: &SeedTree, exec: Exec) -> Result<IterStats> {
        let Arch::Mlp(arch) = &self.agent.arch else {
            return Err(Error::Config("policy-gradient step needs an MLP agent".into()));
        };
        let source = TaskSource::Fixed(task.clone());
        let batch = collect(&arch.actor(&self.agent.policy), &source, n_episodes * task.spec.horizon, 1, seeds, exec)?;
        let (next, gn) = vanilla_pg_update(arch, &self.agent.policy, &batch, lr, self.agent.config.maml.discount)?;
        self.agent.policy = next;
        let mut diag = Diagnostics::default();
        diag.push(f64::NAN, gn, self.agent.policy.norm());
        Ok(IterStats {
            frames: batch.frame_count,
            diag,
            inner_grad_norms: vec![gn],
            mean_return: batch.mean_episode_return(),
            rewarded_episodes: batch.rewarded_episodes(),
        })
    }
}

/// Meta-training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaTrainConfig {
    pub frames: usize,
    /// Evaluate every `eval_fraction * frames` frames.
    pub eval_fraction: f64,
    pub eval_tasks: usize,
    pub eval_episodes: usize,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self { frames: 25_000, eval_fraction: 0.02, eval_tasks: 10, eval_episodes: 1 }
    }
}

/// Meta-training progress; cloneable and resumable.
#[derive(Clone, Debug)]
pub struct MetaTrainRun {
    pub state: TrainState,
    pub frames: usize,
    pub iteration: u64,
    pub evals: u64,
    pub curve: LearningCurve,
    pub diag: Diagnostics,
    pub best: Agent,
    pub best_return: f64,
    pub inner_grad_norms: Vec<f64>,
    pub rewarded_episodes: usize,
}

impl MetaTrainRun {
    pub fn start(agent: Agent, run_id: &str, seed: u64) -> Self {
        let best = agent.clone();
        Self {
            state: TrainState::new(agent),
            frames: 0,
            iteration: 0,
            evals: 0,
            curve: LearningCurve::new(run_id, seed),
            diag: Diagnostics::default(),
            best,
            best_return: f64::NEG_INFINITY,
            inner_grad_norms: Vec::new(),
            rewarded_episodes: 0,
        }
    }

    fn eval_point(&mut self, space: &TaskSource, cfg: &MetaTrainConfig, seeds: &SeedTree, exec: Exec) -> Result<f64> {
        let node = seeds.child("eval").index(self.evals);
        let mut rng = node.child("tasks").rng();
        let tasks: Vec<Task> = (0..cfg.eval_tasks).map(|_| space.draw(&mut rng)).collect();
        let r = self.state.agent.meta_evaluate(&tasks, cfg.eval_episodes, &node.child("run"), exec)?;
        self.evals += 1;
        self.curve.push(self.frames as u64, r)?;
        if r > self.best_return {
            self.best_return = r;
            self.best = self.state.agent.clone();
        }
        Ok(r)
    }

    pub fn is_done(&self, cfg: &MetaTrainConfig, horizon: usize) -> bool {
        self.frames + self.state.meta_iteration_frames(horizon) > cfg.frames
    }

    /// Advance by at most `max_iters` iterations (all remaining when `None`).
    pub fn run(&mut self, space: &TaskSource, cfg: &MetaTrainConfig, seeds: &SeedTree, exec: Exec, max_iters: Option<u64>) -> Result<()> {
        let horizon = space.horizon();
        if self.evals == 0 {
            self.eval_point(space, cfg, seeds, exec)?;
        }
        let every = ((cfg.frames as f64 * cfg.eval_fraction).ceil() as usize).max(1);
        let mut done_iters = 0;
        while !self.is_done(cfg, horizon) {
            if max_iters.is_some_and(|m| done_iters >= m) {
                return Ok(());
            }
            let stats = self.state.meta_iteration(space, &seeds.child("iter").index(self.iteration), exec)?;
            self.iteration += 1;
            done_iters += 1;
            self.frames += stats.frames;
            self.diag.append(stats.diag);
            self.inner_grad_norms.extend(stats.inner_grad_norms);
            self.rewarded_episodes += stats.rewarded_episodes;
            let next_eval = self.evals as usize * every;
            if self.frames >= next_eval || self.is_done(cfg, horizon) {
                self.eval_point(space, cfg, seeds, exec)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Family, Quadrant, TaskSpace};

    fn small_config() -> AgentConfig {
        let mut c = AgentConfig::default();
        c.maml.inner_batch_tasks = 2;
        c.maml.outer_batch_tasks = 2;
        c.rl2.trials_per_update = 2;
        c.varibad.trials_per_update = 2;
        c.varibad.vae.batch_trials = 2;
        c
    }

    fn right() -> TaskSource {
        TaskSource::Space(TaskSpace::quadrant(Family::NavDense, Quadrant::Right).unwrap())
    }

    #[test]
    fn algo_keys_round_trip() {
        for a in Algo::ALL {
            assert_eq!(a.key().parse::<Algo>().unwrap(), a);
        }
        assert!(matches!("pearl".parse::<Algo>(), Err(Error::UnknownKey(_))));
    }

    #[test]
    fn agent_components_follow_algorithm() {
        let spec = Family::NavDense.spec();
        for a in Algo::ALL {
            let agent = Agent::new(a, &small_config(), &spec, &SeedTree::root(0)).unwrap();
            let names: Vec<&str> = agent.components().iter().map(|c| c.0).collect();
            assert_eq!(names, a.components());
            assert_eq!(agent.vae.is_empty(), a != Algo::Varibad);
        }
    }

    #[test]
    fn varibad_iteration_updates_both_blocks_and_honours_zero_rates() {
        let spec = Family::NavDense.spec();
        let agent = Agent::new(Algo::Varibad, &small_config(), &spec, &SeedTree::root(1)).unwrap();
        let mut st = TrainState::new(agent.clone());
        st.context_iteration(&right(), 2, None, &SeedTree::root(2), Exec::Sequential).unwrap();
        assert!(!st.agent.policy.bit_eq(&agent.policy));
        assert!(!st.agent.vae.bit_eq(&agent.vae));

        let mut st = TrainState::new(agent.clone());
        st.context_iteration(&right(), 2, Some((1e-3, 0.0)), &SeedTree::root(2), Exec::Sequential).unwrap();
        assert!(st.agent.vae.bit_eq(&agent.vae));
        assert!(!st.agent.policy.bit_eq(&agent.policy));

        let mut st = TrainState::new(agent.clone());
        st.context_iteration(&right(), 2, Some((0.0, 1e-3)), &SeedTree::root(2), Exec::Sequential).unwrap();
        assert!(st.agent.policy.bit_eq(&agent.policy));
        assert!(!st.agent.vae.bit_eq(&agent.vae));
    }

    #[test]
    fn meta_iteration_frame_accounting() {
        let spec = Family::NavDense.spec();
        for a in Algo::ALL {
            let agent = Agent::new(a, &small_config(), &spec, &SeedTree::root(1)).unwrap();
            let mut st = TrainState::new(agent);
            let want = st.meta_iteration_frames(100);
            let got = st.meta_iteration(&right(), &SeedTree::root(3), Exec::Sequential).unwrap().frames;
            assert_eq!(got, want, "{a}");
        }
    }

    #[test]
    fn interrupted_meta_training_matches_uninterrupted() {
        let spec = Family::NavDense.spec();
        let cfg = MetaTrainConfig { frames: 2000, eval_fraction: 0.2, eval_tasks: 2, eval_episodes: 1 };
        let seeds = SeedTree::root(11);
        for a in [Algo::Rl2, Algo::Maml] {
            let agent = Agent::new(a, &small_config(), &spec, &seeds).unwrap();
            let mut whole = MetaTrainRun::start(agent.clone(), "x", 0);
            whole.run(&right(), &cfg, &seeds, Exec::Parallel, None).unwrap();
            let mut part = MetaTrainRun::start(agent, "x", 0);
            part.run(&right(), &cfg, &seeds, Exec::Sequential, Some(1)).unwrap();
            let mut resumed = part.clone();
            resumed.run(&right(), &cfg, &seeds, Exec::Sequential, None).unwrap();
            assert_eq!(whole.curve, resumed.curve);
            assert!(whole.state.agent.policy.bit_eq(&resumed.state.agent.policy));
            assert!(whole.frames <= cfg.frames);
            let best = whole.curve.returns().into_iter().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(whole.best_return, best);
        }
    }
}
