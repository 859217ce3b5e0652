use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::returns::{discounted_returns, gae, normalize};
use super::rollout::RolloutBatch;
use crate::diffnet::{clip_global_norm, Adam, Bound, GradSet, Graph, ParamSet, Var};
use crate::seed::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgConfig {
    pub discount: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub ppo_clip: f64,
    pub epochs_per_batch: usize,
    pub minibatch_count: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self {
            discount: 0.99,
            gae_lambda: 0.95,
            learning_rate: 1e-3,
            ppo_clip: 0.2,
            epochs_per_batch: 4,
            minibatch_count: 4,
            entropy_coef: 0.0,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            normalize_advantages: true,
        }
    }
}

impl PgConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.discount > 0.0
            && self.discount <= 1.0
            && (0.0..=1.0).contains(&self.gae_lambda)
            && self.ppo_clip > 0.0
            && self.epochs_per_batch > 0
            && self.minibatch_count > 0
            && self.learning_rate >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid policy-gradient config {self:?}")))
        }
    }
}

/// Graph outputs of a policy over every step of the selected trials, rows
/// in trial / episode / step order.
pub struct ModelOut {
    pub log_probs: Var,
    pub values: Option<Var>,
    pub entropy: Option<Var>,
}

/// A differentiable view of a policy over recorded data.
pub trait PolicyModel: Sync {
    fn forward<'g>(&self, g: &mut Graph<'g>, p: &Bound<'g>, batch: &RolloutBatch, trials: &[usize]) -> Result<ModelOut>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagRow {
    pub update_idx: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub param_norm: f64,
}

/// Per-update log: `update_idx,loss,grad_norm,param_norm`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub rows: Vec<DiagRow>,
}

impl Diagnostics {
    pub fn push(&mut self, loss: f64, grad_norm: f64, param_norm: f64) {
        let update_idx = self.rows.len();
        self.rows.push(DiagRow { update_idx, loss, grad_norm, param_norm });
    }

    pub fn append(&mut self, other: Diagnostics) {
        for r in other.rows {
            self.push(r.loss, r.grad_norm, r.param_norm);
        }
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let rows = rd.deserialize().collect::<std::result::Result<Vec<DiagRow>, _>>()?;
        Ok(Self { rows })
    }
}

/// Start offset of every trial in the flattened step order.
pub fn trial_offsets(batch: &RolloutBatch) -> Vec<usize> {
    let mut off = Vec::with_capacity(batch.trials.len() + 1);
    let mut acc = 0;
    for t in &batch.trials {
        off.push(acc);
        acc += t.frames();
    }
    off.push(acc);
    off
}

fn gather(all: &[f64], offsets: &[usize], trials: &[usize]) -> Array2<f64> {
    let v: Vec<f64> = trials.iter().flat_map(|&i| all[offsets[i]..offsets[i + 1]].iter().copied()).collect();
    Array2::from_shape_vec((v.len(), 1), v).expect("column")
}

/// GAE advantages and value targets in flattened order. Each episode ends
/// in a terminal state.
pub fn advantages_and_targets(batch: &RolloutBatch, cfg: &PgConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut adv = Vec::with_capacity(batch.frame_count);
    let mut targets = Vec::with_capacity(batch.frame_count);
    for ep in batch.episodes() {
        let mut v = ep.values.clone();
        v.push(0.0);
        let a = gae(&ep.rewards, &v, cfg.discount, cfg.gae_lambda)?;
        targets.extend(a.iter().zip(&ep.values).map(|(a, v)| a + v));
        adv.extend(a);
    }
    if cfg.normalize_advantages {
        normalize(&mut adv);
    }
    Ok((adv, targets))
}

fn old_log_probs(batch: &RolloutBatch) -> Vec<f64> {
    batch.episodes().flat_map(|e| e.log_probs.iter().copied()).collect()
}

struct PpoTerms {
    loss: Var,
    surrogate: Var,
}

#[allow(clippy::too_many_arguments)]
fn ppo_terms<'g>(
    g: &mut Graph<'g>,
    out: &ModelOut,
    old_lp: Array2<f64>,
    adv: Array2<f64>,
    targets: Array2<f64>,
    cfg: &PgConfig,
) -> PpoTerms {
    let old = g.constant(old_lp);
    let a = g.constant(adv);
    let diff = g.sub(out.log_probs, old);
    let ratio = g.exp(diff);
    let s1 = g.mul(ratio, a);
    let clipped = g.clamp(ratio, 1.0 - cfg.ppo_clip, 1.0 + cfg.ppo_clip);
    let s2 = g.mul(clipped, a);
    let m = g.min(s1, s2);
    let surrogate = g.mean(m);
    let mut loss = g.neg(surrogate);
    if let (Some(v), true) = (out.values, cfg.value_coef != 0.0) {
        let t = g.constant(targets);
        let d = g.sub(v, t);
        let sq = g.square(d);
        let vl = g.mean(sq);
        let vl = g.scale(vl, cfg.value_coef);
        loss = g.add(loss, vl);
    }
    if let (Some(e), true) = (out.entropy, cfg.entropy_coef != 0.0) {
        let eb = g.scale(e, -cfg.entropy_coef);
        loss = g.add(loss, eb);
    }
    PpoTerms { loss, surrogate }
}

/// Clipped surrogate objective of `params` on `batch` (all trials at once).
pub fn ppo_surrogate<M: PolicyModel>(model: &M, params: &ParamSet, batch: &RolloutBatch, cfg: &PgConfig) -> Result<f64> {
    let (adv, targets) = advantages_and_targets(batch, cfg)?;
    let old = old_log_probs(batch);
    let off = trial_offsets(batch);
    let all: Vec<usize> = (0..batch.trials.len()).collect();
    let mut g = Graph::new();
    let p = g.bind_frozen(params);
    let out = model.forward(&mut g, &p, batch, &all)?;
    let terms = ppo_terms(&mut g, &out, gather(&old, &off, &all), gather(&adv, &off, &all), gather(&targets, &off, &all), cfg);
    Ok(g.scalar_value(terms.surrogate))
}

/// Full-batch PPO loss (clipped surrogate, value and entropy terms) and its
/// gradient.
pub fn ppo_loss<M: PolicyModel>(model: &M, params: &ParamSet, batch: &RolloutBatch, cfg: &PgConfig) -> Result<(f64, GradSet)> {
    let (adv, targets) = advantages_and_targets(batch, cfg)?;
    let old = old_log_probs(batch);
    let off = trial_offsets(batch);
    let all: Vec<usize> = (0..batch.trials.len()).collect();
    let mut g = Graph::new();
    let p = g.bind(params);
    let out = model.forward(&mut g, &p, batch, &all)?;
    let terms = ppo_terms(&mut g, &out, gather(&old, &off, &all), gather(&adv, &off, &all), gather(&targets, &off, &all), cfg);
    let v = g.scalar_value(terms.loss);
    Ok((v, g.backward(terms.loss)?.for_params(&p)))
}

/// Mean squared error of the value head against fixed targets.
pub fn value_loss<M: PolicyModel>(model: &M, params: &ParamSet, batch: &RolloutBatch, targets: &[f64]) -> Result<(f64, GradSet)> {
    let off = trial_offsets(batch);
    let all: Vec<usize> = (0..batch.trials.len()).collect();
    let mut g = Graph::new();
    let p = g.bind(params);
    let out = model.forward(&mut g, &p, batch, &all)?;
    let v = out.values.ok_or_else(|| Error::Config("model has no value head".into()))?;
    let t = g.constant(gather(targets, &off, &all));
    let d = g.sub(v, t);
    let sq = g.square(d);
    let l = g.mean(sq);
    let value = g.scalar_value(l);
    Ok((value, g.backward(l)?.for_params(&p)))
}

/// Epochs of minibatch PPO steps on `batch`.
pub fn ppo_update<M: PolicyModel>(
    model: &M,
    params: &mut ParamSet,
    opt: &mut Adam,
    batch: &RolloutBatch,
    cfg: &PgConfig,
    rng: &mut Rng,
) -> Result<Diagnostics> {
    let (adv, targets) = advantages_and_targets(batch, cfg)?;
    let old = old_log_probs(batch);
    let off = trial_offsets(batch);
    let n = batch.trials.len();
    let mut diag = Diagnostics::default();
    opt.config.lr = cfg.learning_rate;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs_per_batch {
        order.shuffle(rng);
        let mb = cfg.minibatch_count.min(n).max(1);
        for k in 0..mb {
            let idx: Vec<usize> = order.iter().copied().skip(k).step_by(mb).collect();
            if idx.is_empty() {
                continue;
            }
            let mut grads;
            let loss;
            {
                let mut g = Graph::new();
                let p = g.bind(params);
                let out = model.forward(&mut g, &p, batch, &idx)?;
                let terms = ppo_terms(&mut g, &out, gather(&old, &off, &idx), gather(&adv, &off, &idx), gather(&targets, &off, &idx), cfg);
                loss = g.scalar_value(terms.loss);
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("ppo loss {loss}")));
                }
                grads = g.backward(terms.loss)?.for_params(&p);
            }
            if !grads.is_finite() {
                return Err(Error::Diverged("non-finite ppo gradient".into()));
            }
            let gn = clip_global_norm(&mut grads, cfg.max_grad_norm);
            opt.step(params, &grads);
            if !params.is_finite() {
                return Err(Error::Diverged("non-finite parameters after ppo step".into()));
            }
            diag.push(loss, gn, params.norm());
        }
    }
    Ok(diag)
}

/// Returns minus a time-indexed batch-mean baseline, then normalised.
pub fn baseline_advantages(batch: &RolloutBatch, gamma: f64) -> Vec<f64> {
    let returns: Vec<Vec<f64>> = batch.episodes().map(|e| discounted_returns(&e.rewards, gamma)).collect();
    let max_len = returns.iter().map(Vec::len).max().unwrap_or(0);
    let mut sum = vec![0.0; max_len];
    let mut cnt = vec![0usize; max_len];
    for r in &returns {
        for (t, g) in r.iter().enumerate() {
            sum[t] += g;
            cnt[t] += 1;
        }
    }
    let mut adv: Vec<f64> = returns
        .iter()
        .flat_map(|r| r.iter().enumerate().map(|(t, g)| g - sum[t] / cnt[t] as f64).collect::<Vec<_>>())
        .collect();
    normalize(&mut adv);
    adv
}

/// Gradient of the REINFORCE loss `-mean(log pi(a|s) * A)`; returns the
/// gradient and the loss value.
pub fn pg_gradient<M: PolicyModel>(model: &M, params: &ParamSet, batch: &RolloutBatch, gamma: f64) -> Result<(GradSet, f64)> {
    let adv = baseline_advantages(batch, gamma);
    let off = trial_offsets(batch);
    let all: Vec<usize> = (0..batch.trials.len()).collect();
    let mut g = Graph::new();
    let p = g.bind(params);
    let out = model.forward(&mut g, &p, batch, &all)?;
    let a = g.constant(gather(&adv, &off, &all));
    let prod = g.mul(out.log_probs, a);
    let m = g.mean(prod);
    let loss = g.neg(m);
    let value = g.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::Diverged(format!("policy-gradient loss {value}")));
    }
    let grads = g.backward(loss)?.for_params(&p);
    Ok((grads, value))
}

/// One plain gradient step `theta - lr * grad` on the REINFORCE loss.
/// Returns the updated parameters and the gradient norm.
pub fn vanilla_pg_update<M: PolicyModel>(
    model: &M,
    params: &ParamSet,
    batch: &RolloutBatch,
    learning_rate: f64,
    gamma: f64,
) -> Result<(ParamSet, f64)> {
    let (grads, _) = pg_gradient(model, params, batch, gamma)?;
    let norm = grads.norm();
    let mut next = params.clone();
    if learning_rate != 0.0 {
        next.add_scaled(&grads, -learning_rate);
    }
    if !next.is_finite() {
        return Err(Error::Diverged("non-finite parameters after policy-gradient step".into()));
    }
    Ok((next, norm))
}
