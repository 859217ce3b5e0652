//! Finite-difference checks of every differentiable loss on miniature
//! instances: two episodes of horizon five, hidden width four.

use rand_distr::{Distribution, Normal};

use crate::diffnet::{fd_check, FdReport, Graph, ParamSet, DEFAULT_EPS};
use crate::env::{Family, Task};
use crate::meta::{MlpArch, MlpPolicyConfig, Rl2Arch, Rl2Config, VaeNoise, VariBadArch, VariBadConfig};
use crate::par::Exec;
use crate::pg::{
    advantages_and_targets, collect_trials, pg_gradient, ppo_loss, value_loss, ActMode, PgConfig, RolloutBatch,
};
use crate::seed::{Rng, SeedTree};
use crate::Result;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub report: FdReport,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < TOLERANCE
    }
}

const HORIZON: usize = 5;
const EPISODES: usize = 2;
const WIDTH: usize = 4;

fn mini_task(angle: f64) -> Task {
    let mut t = Task::nav_goal(Family::NavDense, angle).expect("nav task");
    t.spec.horizon = HORIZON;
    t
}

fn mini_tasks() -> Vec<Task> {
    vec![mini_task(0.3), mini_task(2.0)]
}

/// Zero-mean Gaussian jitter so that ratios and saturations are not trivial.
fn jitter(p: &mut ParamSet, sd: f64, rng: &mut Rng) {
    let n = Normal::new(0.0, sd).expect("sd");
    for (_, v) in p.iter_mut() {
        v.mapv_inplace(|x| x + n.sample(rng));
    }
}

fn pg_cfg() -> PgConfig {
    PgConfig { entropy_coef: 0.01, ..PgConfig::default() }
}

fn mlp_fixture(seeds: &SeedTree) -> Result<(MlpArch, ParamSet, RolloutBatch)> {
    let spec = mini_task(0.0).spec;
    let cfg = MlpPolicyConfig { hidden: vec![WIDTH, WIDTH], out_scale: 1.0, ..MlpPolicyConfig::default() };
    let arch = MlpArch::new(&spec, &cfg)?;
    let mut params = arch.init(&mut seeds.child("init").rng());
    let batch = collect_trials(&arch.actor(&params), &mini_tasks(), EPISODES, &seeds.child("roll"), ActMode::Stochastic, Exec::Sequential)?;
    jitter(&mut params, 0.05, &mut seeds.child("jitter").rng());
    Ok((arch, params, batch))
}

fn rl2_fixture(seeds: &SeedTree, reset_per_trial: bool) -> Result<(Rl2Arch, ParamSet, RolloutBatch)> {
    let spec = mini_task(0.0).spec;
    let cfg = Rl2Config { hidden: WIDTH, head_hidden: vec![WIDTH], out_scale: 1.0, reset_per_trial, episodes_per_trial: EPISODES, ..Rl2Config::default() };
    let arch = Rl2Arch::new(&spec, &cfg)?;
    let mut params = arch.init(&mut seeds.child("init").rng());
    let batch = collect_trials(&arch.actor(&params), &mini_tasks(), EPISODES, &seeds.child("roll"), ActMode::Stochastic, Exec::Sequential)?;
    jitter(&mut params, 0.05, &mut seeds.child("jitter").rng());
    Ok((arch, params, batch))
}

fn varibad_fixture(seeds: &SeedTree) -> Result<(VariBadArch, ParamSet, ParamSet, RolloutBatch)> {
    let spec = mini_task(0.0).spec;
    let mut cfg = VariBadConfig {
        encoder_hidden: WIDTH,
        policy_hidden: vec![WIDTH],
        decoder_hidden: vec![WIDTH],
        out_scale: 1.0,
        episodes_per_trial: EPISODES,
        ..VariBadConfig::default()
    };
    cfg.vae.state_weight = 0.5;
    let arch = VariBadArch::new(&spec, &cfg)?;
    let (mut policy, mut vae) = arch.init(&mut seeds.child("init").rng());
    let batch = collect_trials(&arch.actor(&policy, &vae), &mini_tasks(), EPISODES, &seeds.child("roll"), ActMode::Stochastic, Exec::Sequential)?;
    let mut rng = seeds.child("jitter").rng();
    jitter(&mut policy, 0.05, &mut rng);
    jitter(&mut vae, 0.1, &mut rng);
    Ok((arch, policy, vae, batch))
}

pub fn mlp_surrogate(seeds: &SeedTree) -> Result<GradCheck> {
    let (arch, params, batch) = mlp_fixture(seeds)?;
    let cfg = pg_cfg();
    let report = fd_check(&[params], DEFAULT_EPS, |s| ppo_loss(&arch, &s[0], &batch, &cfg).map(|(v, g)| (v, vec![g])))?;
    Ok(GradCheck { name: "mlp policy surrogate", report })
}

pub fn mlp_reinforce(seeds: &SeedTree) -> Result<GradCheck> {
    let (arch, params, batch) = mlp_fixture(seeds)?;
    let report = fd_check(&[params], DEFAULT_EPS, |s| pg_gradient(&arch, &s[0], &batch, 0.99).map(|(g, v)| (v, vec![g])))?;
    Ok(GradCheck { name: "mlp reinforce loss", report })
}

pub fn rl2_surrogate(seeds: &SeedTree, reset_per_trial: bool) -> Result<GradCheck> {
    let (arch, params, batch) = rl2_fixture(seeds, reset_per_trial)?;
    let cfg = pg_cfg();
    let report = fd_check(&[params], DEFAULT_EPS, |s| ppo_loss(&arch, &s[0], &batch, &cfg).map(|(v, g)| (v, vec![g])))?;
    let name = if reset_per_trial { "rl2 recurrent surrogate (trial carry)" } else { "rl2 recurrent surrogate" };
    Ok(GradCheck { name, report })
}

pub fn rl2_value(seeds: &SeedTree) -> Result<GradCheck> {
    let (arch, params, batch) = rl2_fixture(seeds, false)?;
    let (_, targets) = advantages_and_targets(&batch, &pg_cfg())?;
    let report = fd_check(&[params], DEFAULT_EPS, |s| value_loss(&arch, &s[0], &batch, &targets).map(|(v, g)| (v, vec![g])))?;
    Ok(GradCheck { name: "rl2 value loss", report })
}

pub fn varibad_elbo(seeds: &SeedTree) -> Result<GradCheck> {
    let (arch, _, vae, batch) = varibad_fixture(seeds)?;
    let trials: Vec<_> = batch.trials.iter().collect();
    let t_len = trials[0].frames();
    let noise = VaeNoise::draw(&arch.config.vae, arch.config.latent_dim, trials.len(), t_len, &mut seeds.child("noise").rng());
    let report = fd_check(&[vae], DEFAULT_EPS, |s| {
        let mut g = Graph::new();
        let p = g.bind(&s[0]);
        let l = arch.vae_loss(&mut g, &p, &trials, &noise)?;
        let v = g.scalar_value(l.total);
        Ok((v, vec![g.backward(l.total)?.for_params(&p)]))
    })?;
    Ok(GradCheck { name: "varibad elbo", report })
}

pub fn varibad_surrogate(seeds: &SeedTree) -> Result<GradCheck> {
    let (arch, policy, _, batch) = varibad_fixture(seeds)?;
    let cfg = pg_cfg();
    let report = fd_check(&[policy], DEFAULT_EPS, |s| ppo_loss(&arch, &s[0], &batch, &cfg).map(|(v, g)| (v, vec![g])))?;
    Ok(GradCheck { name: "varibad belief-policy surrogate", report })
}

pub fn varibad_value(seeds: &SeedTree) -> Result<GradCheck> {
    let (arch, policy, _, batch) = varibad_fixture(seeds)?;
    let (_, targets) = advantages_and_targets(&batch, &pg_cfg())?;
    let report = fd_check(&[policy], DEFAULT_EPS, |s| value_loss(&arch, &s[0], &batch, &targets).map(|(v, g)| (v, vec![g])))?;
    Ok(GradCheck { name: "varibad value loss", report })
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<GradCheck>> {
    let root = SeedTree::root(seed).child("gradcheck");
    Ok(vec![
        mlp_surrogate(&root.child("mlp"))?,
        mlp_reinforce(&root.child("mlp"))?,
        rl2_surrogate(&root.child("rl2"), false)?,
        rl2_surrogate(&root.child("rl2"), true)?,
        rl2_value(&root.child("rl2"))?,
        varibad_elbo(&root.child("varibad"))?,
        varibad_surrogate(&root.child("varibad"))?,
        varibad_value(&root.child("varibad"))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for c in run_all(7).unwrap() {
            assert!(c.passed(), "{}: {:?}", c.name, c.report);
            assert!(c.report.checked > 20, "{}", c.name);
        }
    }
}
