use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::stack_rows;
use crate::diffnet::{Bound, GaussianHead, Graph, Mlp, MlpSpec, ParamSet, Var};
use crate::env::EnvSpec;
use crate::pg::{ActMode, ActOut, ModelOut, Policy, PolicyModel, RolloutBatch};
use crate::seed::Rng;
use crate::Result;

pub const LOG_STD: &str = "pi.log_std";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpPolicyConfig {
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub out_scale: f64,
    /// Squash the mean into the action box with `tanh`.
    pub squash_mean: bool,
}

impl Default for MlpPolicyConfig {
    fn default() -> Self {
        Self { hidden: vec![32, 32], init_log_std: (0.05f64).ln(), out_scale: 0.01, squash_mean: true }
    }
}

/// Feed-forward Gaussian policy `obs -> mean`, state-independent std.
#[derive(Clone, Debug)]
pub struct MlpArch {
    pub spec: EnvSpec,
    pub config: MlpPolicyConfig,
    pub net: Mlp,
}

impl MlpArch {
    pub fn new(spec: &EnvSpec, config: &MlpPolicyConfig) -> Result<Self> {
        let net = MlpSpec::new(spec.obs_dim, &config.hidden, spec.act_dim)?.with_out_scale(config.out_scale).build("pi");
        Ok(Self { spec: spec.clone(), config: config.clone(), net })
    }

    pub fn init(&self, rng: &mut Rng) -> ParamSet {
        let mut p = ParamSet::new();
        self.net.init(&mut p, rng);
        p.insert(LOG_STD, Array2::from_elem((1, self.spec.act_dim), self.config.init_log_std));
        p
    }

    pub fn actor<'a>(&'a self, params: &'a ParamSet) -> MlpActor<'a> {
        MlpActor { arch: self, params }
    }

    pub(crate) fn mean_vec(&self, params: &ParamSet, obs: &[f64]) -> Vec<f64> {
        let mut m = self.net.eval_vec(params, obs);
        if self.config.squash_mean {
            for (v, hi) in m.iter_mut().zip(&self.spec.action_high) {
                *v = hi * v.tanh();
            }
        }
        m
    }

    pub(crate) fn mean_graph<'g>(&self, g: &mut Graph<'g>, p: &Bound<'g>, obs: Var) -> Result<Var> {
        let out = self.net.forward(g, p, obs)?;
        if !self.config.squash_mean {
            return Ok(out);
        }
        let t = g.tanh(out);
        let hi = g.constant(Array2::from_shape_vec((1, self.spec.act_dim), self.spec.action_high.clone()).expect("shape"));
        Ok(g.mul_row(t, hi))
    }
}

impl PolicyModel for MlpArch {
    fn forward<'g>(&self, g: &mut Graph<'g>, p: &Bound<'g>, batch: &RolloutBatch, trials: &[usize]) -> Result<ModelOut> {
        let obs = g.constant(stack_rows(batch, trials, self.spec.obs_dim, |ep, t| &ep.obs[t]));
        let act = g.constant(stack_rows(batch, trials, self.spec.act_dim, |ep, t| &ep.actions[t]));
        let mean = self.mean_graph(g, p, obs)?;
        let ls = p.var(LOG_STD);
        let log_probs = GaussianHead::log_prob_graph(g, mean, ls, act, &batch.mask);
        let entropy = GaussianHead::entropy_graph(g, ls, &batch.mask);
        Ok(ModelOut { log_probs, values: None, entropy: Some(entropy) })
    }
}

pub struct MlpActor<'a> {
    pub arch: &'a MlpArch,
    pub params: &'a ParamSet,
}

impl Policy for MlpActor<'_> {
    type Carry = ();

    fn spec(&self) -> &EnvSpec {
        &self.arch.spec
    }

    fn begin_trial(&self) {}

    fn act(&self, obs: &[f64], _: &mut (), mask: &[bool], rng: &mut Rng, mode: ActMode) -> ActOut {
        let mean = self.arch.mean_vec(self.params, obs);
        let ls = self.params.get(LOG_STD).expect("log_std");
        let ls = ls.as_slice().expect("contiguous");
        let (action, log_prob) = match mode {
            ActMode::Stochastic => GaussianHead::sample(&mean, ls, mask, rng),
            ActMode::Mean => {
                let lp = GaussianHead::log_prob(&mean, ls, mask, &mean);
                (mean, lp)
            }
        };
        ActOut { action, log_prob, value: 0.0, context: None }
    }
}
