use serde::{Deserialize, Serialize};

use super::mlp::{MlpArch, MlpPolicyConfig};
use crate::diffnet::{Adam, AdamConfig, GradSet, ParamSet};
use crate::env::{Task, TaskSpace};
use crate::par::Exec;
use crate::pg::{collect, evaluate, pg_gradient, vanilla_pg_update, ActMode, TaskSource};
use crate::seed::SeedTree;
use crate::{Error, Result};

pub const INNER_LR_GRID: [f64; 4] = [0.1, 0.05, 0.02, 0.01];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MamlConfig {
    pub inner_lr: f64,
    /// Episodes per inner-loop (and post-adaptation) batch.
    pub inner_batch_tasks: usize,
    /// Tasks per outer step.
    pub outer_batch_tasks: usize,
    pub inner_steps: usize,
    pub discount: f64,
    pub outer: AdamConfig,
    pub policy: MlpPolicyConfig,
}

impl Default for MamlConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.1,
            inner_batch_tasks: 10,
            outer_batch_tasks: 10,
            inner_steps: 1,
            discount: 0.99,
            outer: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            policy: MlpPolicyConfig::default(),
        }
    }
}

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_batch_tasks == 0 || self.outer_batch_tasks == 0 {
            return Err(Error::Config("MAML batch sizes must be positive".into()));
        }
        if !(self.inner_lr >= 0.0) {
            return Err(Error::Config("MAML inner_lr must be non-negative".into()));
        }
        Ok(())
    }

    pub fn outer_frames(&self, horizon: usize) -> usize {
        self.outer_batch_tasks * (self.inner_steps + 1) * self.inner_batch_tasks * horizon
    }
}

#[derive(Clone, Debug)]
pub struct InnerResult {
    pub params: ParamSet,
    pub grad_norms: Vec<f64>,
    pub frames: usize,
    pub rewarded_episodes: usize,
}

/// `k_steps` plain policy-gradient steps, each on a fresh batch of
/// `cfg.inner_batch_tasks` episodes from `task`.
pub fn inner_adapt(
    arch: &MlpArch,
    theta: &ParamSet,
    task: &Task,
    k_steps: usize,
    inner_lr: f64,
    cfg: &MamlConfig,
    seeds: &SeedTree,
    exec: Exec,
) -> Result<InnerResult> {
    let mut params = theta.clone();
    let mut grad_norms = Vec::with_capacity(k_steps);
    let mut frames = 0;
    let mut rewarded_episodes = 0;
    let source = TaskSource::Fixed(task.clone());
    for s in 0..k_steps {
        let n = cfg.inner_batch_tasks * task.spec.horizon;
        let batch = collect(&arch.actor(&params), &source, n, 1, &seeds.index(s as u64), exec)?;
        frames += batch.frame_count;
        rewarded_episodes += batch.rewarded_episodes();
        let (next, gn) = vanilla_pg_update(arch, &params, &batch, inner_lr, cfg.discount)?;
        params = next;
        grad_norms.push(gn);
    }
    Ok(InnerResult { params, grad_norms, frames, rewarded_episodes })
}

#[derive(Clone, Debug)]
pub struct OuterGradient {
    pub mean: GradSet,
    pub per_task: Vec<GradSet>,
    pub frames: usize,
    pub inner_grad_norms: Vec<f64>,
    pub post_loss: f64,
    pub rewarded_episodes: usize,
}

/// First-order meta-gradient: the mean over tasks of the policy gradient at
/// each task's adapted parameters.
pub fn outer_gradient(
    arch: &MlpArch,
    theta: &ParamSet,
    tasks: &[Task],
    cfg: &MamlConfig,
    seeds: &SeedTree,
    exec: Exec,
) -> Result<OuterGradient> {
    let jobs: Vec<(usize, &Task)> = tasks.iter().enumerate().collect();
    let per = exec.map(jobs, |(i, task)| -> Result<_> {
        let node = seeds.index(i as u64);
        let inner = inner_adapt(arch, theta, task, cfg.inner_steps, cfg.inner_lr, cfg, &node.child("inner"), Exec::Sequential)?;
        let source = TaskSource::Fixed(task.clone());
        let n = cfg.inner_batch_tasks * task.spec.horizon;
        let post = collect(&arch.actor(&inner.params), &source, n, 1, &node.child("post"), Exec::Sequential)?;
        let (g, loss) = pg_gradient(arch, &inner.params, &post, cfg.discount)?;
        Ok((g, loss, inner.frames + post.frame_count, inner.grad_norms, inner.rewarded_episodes + post.rewarded_episodes()))
    });
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut frames = 0;
    let mut inner_grad_norms = Vec::new();
    let mut post_loss = 0.0;
    let mut rewarded_episodes = 0;
    for r in per {
        let (g, loss, f, norms, rew) = r?;
        rewarded_episodes += rew;
        per_task.push(g);
        frames += f;
        inner_grad_norms.extend(norms);
        post_loss += loss;
    }
    let mut mean = theta.zeros_like();
    for g in &per_task {
        mean.add_scaled(g, 1.0 / per_task.len() as f64);
    }
    post_loss /= per_task.len().max(1) as f64;
    Ok(OuterGradient { mean, per_task, frames, inner_grad_norms, post_loss, rewarded_episodes })
}

/// Sample tasks, take the first-order meta-gradient, one optimiser step.
pub fn outer_update(
    arch: &MlpArch,
    theta: &mut ParamSet,
    opt: &mut Adam,
    space: &TaskSource,
    cfg: &MamlConfig,
    seeds: &SeedTree,
    exec: Exec,
) -> Result<OuterGradient> {
    let mut task_rng = seeds.child("tasks").rng();
    let tasks: Vec<Task> = (0..cfg.outer_batch_tasks).map(|_| space.draw(&mut task_rng)).collect();
    let out = outer_gradient(arch, theta, &tasks, cfg, &seeds.child("grad"), exec)?;
    opt.step(theta, &out.mean);
    if !theta.is_finite() {
        return Err(Error::Diverged("non-finite parameters after MAML outer step".into()));
    }
    Ok(out)
}

/// Post-adaptation return on `task`: one inner adaptation, then evaluation.
pub fn adapted_return(
    arch: &MlpArch,
    theta: &ParamSet,
    task: &Task,
    cfg: &MamlConfig,
    n_episodes: usize,
    seeds: &SeedTree,
    exec: Exec,
) -> Result<f64> {
    let inner = inner_adapt(arch, theta, task, cfg.inner_steps, cfg.inner_lr, cfg, &seeds.child("inner"), exec)?;
    evaluate(&arch.actor(&inner.params), task, n_episodes, 1, &seeds.child("eval"), ActMode::Stochastic, exec)
}

/// Sampled meta-test tasks for a space (helper for evaluation protocols).
pub fn sample_tasks(space: &TaskSpace, n: usize, seeds: &SeedTree) -> Vec<Task> {
    let mut rng = seeds.rng();
    (0..n).map(|_| space.sample(&mut rng)).collect()
}
