use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{check_lockstep, stack_rows};
use crate::diffnet::{Bound, GaussianHead, Graph, GruCell, GruCellSpec, Mlp, MlpSpec, ParamSet};
use crate::env::EnvSpec;
use crate::pg::{ActMode, ActOut, ModelOut, PgConfig, Policy, PolicyModel, RolloutBatch};
use crate::seed::Rng;
use crate::Result;

use super::mlp::LOG_STD;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rl2Config {
    pub hidden: usize,
    pub head_hidden: Vec<usize>,
    pub init_log_std: f64,
    pub out_scale: f64,
    /// Keep the hidden state across the episodes of a trial.
    pub reset_per_trial: bool,
    pub episodes_per_trial: usize,
    pub trials_per_update: usize,
    pub pg: PgConfig,
}

impl Default for Rl2Config {
    fn default() -> Self {
        Self {
            hidden: 32,
            head_hidden: vec![32],
            init_log_std: (0.05f64).ln(),
            out_scale: 0.01,
            reset_per_trial: false,
            episodes_per_trial: 1,
            trials_per_update: 8,
            pg: PgConfig::default(),
        }
    }
}

/// Recurrent policy over `(obs, prev_action, prev_reward, prev_done)` with
/// actor and critic heads on `(obs, hidden)`.
#[derive(Clone, Debug)]
pub struct Rl2Arch {
    pub spec: EnvSpec,
    pub config: Rl2Config,
    pub gru: GruCell,
    pub actor: Mlp,
    pub critic: Mlp,
}

fn head(input: usize, hidden: &[usize], output: usize) -> Result<MlpSpec> {
    if hidden.is_empty() {
        MlpSpec::linear(input, output)
    } else {
        MlpSpec::new(input, hidden, output)
    }
}

impl Rl2Arch {
    pub fn new(spec: &EnvSpec, config: &Rl2Config) -> Result<Self> {
        let in_dim = spec.obs_dim + spec.act_dim + 2;
        let feat = spec.obs_dim + config.hidden;
        Ok(Self {
            spec: spec.clone(),
            config: config.clone(),
            gru: GruCellSpec::new(in_dim, config.hidden)?.build("rnn"),
            actor: head(feat, &config.head_hidden, spec.act_dim)?.with_out_scale(config.out_scale).build("pi"),
            critic: head(feat, &config.head_hidden, 1)?.build("vf"),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.obs_dim + self.spec.act_dim + 2
    }

    pub fn init(&self, rng: &mut Rng) -> ParamSet {
        let mut p = ParamSet::new();
        self.gru.init(&mut p, rng);
        self.actor.init(&mut p, rng);
        p.insert(LOG_STD, Array2::from_elem((1, self.spec.act_dim), self.config.init_log_std));
        self.critic.init(&mut p, rng);
        p
    }

    pub fn actor<'a>(&'a self, params: &'a ParamSet) -> Rl2Actor<'a> {
        Rl2Actor { arch: self, params }
    }

    fn write_input(&self, row: &mut [f64], obs: &[f64], prev: Option<(&[f64], f64, bool)>) {
        let (o, a) = (self.spec.obs_dim, self.spec.act_dim);
        row[..o].copy_from_slice(obs);
        match prev {
            Some((pa, pr, pd)) => {
                row[o..o + a].copy_from_slice(pa);
                row[o + a] = pr;
                row[o + a + 1] = if pd { 1.0 } else { 0.0 };
            }
            None => row[o..].iter_mut().for_each(|v| *v = 0.0),
        }
    }
}

impl PolicyModel for Rl2Arch {
    fn forward<'g>(&self, g: &mut Graph<'g>, p: &Bound<'g>, batch: &RolloutBatch, trials: &[usize]) -> Result<ModelOut> {
        let lens = check_lockstep(batch, trials)?;
        let total: usize = lens.iter().sum();
        let b = trials.len();
        let hd = self.config.hidden;
        let zero_h = g.constant(Array2::zeros((b, hd)));
        let mut h = zero_h;
        let mut hs = Vec::with_capacity(total);
        for (e, &len) in lens.iter().enumerate() {
            if e == 0 || !self.config.reset_per_trial {
                h = zero_h;
            }
            for t in 0..len {
                let mut x = Array2::zeros((b, self.input_dim()));
                for (r, &ti) in trials.iter().enumerate() {
                    let eps = &batch.trials[ti].episodes;
                    let ep = &eps[e];
                    let prev = if t > 0 {
                        Some((ep.actions[t - 1].as_slice(), ep.rewards[t - 1], ep.dones[t - 1]))
                    } else if e > 0 && self.config.reset_per_trial {
                        let pe = &eps[e - 1];
                        let k = pe.len() - 1;
                        Some((pe.actions[k].as_slice(), pe.rewards[k], pe.dones[k]))
                    } else {
                        None
                    };
                    self.write_input(x.row_mut(r).into_slice().expect("row"), &ep.obs[t], prev);
                }
                let xv = g.constant(x);
                h = self.gru.step(g, p, xv, h)?;
                hs.push(h);
            }
        }
        let stacked = g.concat_rows(&hs);
        let idx: Vec<usize> = (0..b).flat_map(|r| (0..total).map(move |s| s * b + r)).collect();
        let hc = g.select_rows(stacked, idx);
        let obs = g.constant(stack_rows(batch, trials, self.spec.obs_dim, |ep, t| &ep.obs[t]));
        let act = g.constant(stack_rows(batch, trials, self.spec.act_dim, |ep, t| &ep.actions[t]));
        let feat = g.concat_cols(&[obs, hc]);
        let mean = self.actor.forward(g, p, feat)?;
        let values = self.critic.forward(g, p, feat)?;
        let ls = p.var(LOG_STD);
        let log_probs = GaussianHead::log_prob_graph(g, mean, ls, act, &batch.mask);
        let entropy = GaussianHead::entropy_graph(g, ls, &batch.mask);
        Ok(ModelOut { log_probs, values: Some(values), entropy: Some(entropy) })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rl2Carry {
    pub hidden: Vec<f64>,
    pub prev_action: Vec<f64>,
    pub prev_reward: f64,
    pub prev_done: bool,
    /// `false` until the first transition of the current (reset) segment.
    pub has_prev: bool,
}

pub struct Rl2Actor<'a> {
    pub arch: &'a Rl2Arch,
    pub params: &'a ParamSet,
}

impl Rl2Actor<'_> {
    fn reset(&self, c: &mut Rl2Carry) {
        c.hidden.iter_mut().for_each(|v| *v = 0.0);
        c.prev_action.iter_mut().for_each(|v| *v = 0.0);
        c.prev_reward = 0.0;
        c.prev_done = false;
        c.has_prev = false;
    }
}

impl Policy for Rl2Actor<'_> {
    type Carry = Rl2Carry;

    fn spec(&self) -> &EnvSpec {
        &self.arch.spec
    }

    fn begin_trial(&self) -> Rl2Carry {
        Rl2Carry {
            hidden: vec![0.0; self.arch.config.hidden],
            prev_action: vec![0.0; self.arch.spec.act_dim],
            prev_reward: 0.0,
            prev_done: false,
            has_prev: false,
        }
    }

    fn begin_episode(&self, carry: &mut Rl2Carry, index: usize) {
        if index == 0 || !self.arch.config.reset_per_trial {
            self.reset(carry);
        }
    }

    fn act(&self, obs: &[f64], carry: &mut Rl2Carry, mask: &[bool], rng: &mut Rng, mode: ActMode) -> ActOut {
        let mut x = vec![0.0; self.arch.input_dim()];
        let prev = carry.has_prev.then_some((carry.prev_action.as_slice(), carry.prev_reward, carry.prev_done));
        self.arch.write_input(&mut x, obs, prev);
        carry.hidden = self.arch.gru.eval_vec(self.params, &x, &carry.hidden);
        let mut feat = obs.to_vec();
        feat.extend_from_slice(&carry.hidden);
        let mean = self.arch.actor.eval_vec(self.params, &feat);
        let value = self.arch.critic.eval_vec(self.params, &feat)[0];
        let ls = self.params.get(LOG_STD).expect("log_std").as_slice().expect("contiguous");
        let (action, log_prob) = match mode {
            ActMode::Stochastic => GaussianHead::sample(&mean, ls, mask, rng),
            ActMode::Mean => {
                let lp = GaussianHead::log_prob(&mean, ls, mask, &mean);
                (mean, lp)
            }
        };
        ActOut { action, log_prob, value, context: Some(carry.hidden.clone()) }
    }

    fn observe(&self, carry: &mut Rl2Carry, action: &[f64], reward: f64, _next_obs: &[f64], done: bool) {
        carry.prev_action.copy_from_slice(action);
        carry.prev_reward = reward;
        carry.prev_done = done;
        carry.has_prev = true;
    }
}
