use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::stack_rows;
use crate::diffnet::{Bound, GaussianHead, Graph, GruCell, GruCellSpec, Mlp, MlpSpec, ParamSet, Var};
use crate::env::EnvSpec;
use crate::pg::{ActMode, ActOut, ModelOut, PgConfig, Policy, PolicyModel, RolloutBatch, Trial};
use crate::seed::Rng;
use crate::{Error, Result};

use super::mlp::LOG_STD;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub lr: f64,
    pub kl_weight: f64,
    pub reward_weight: f64,
    pub state_weight: f64,
    /// Most recent trials kept for VAE updates.
    pub buffer_trials: usize,
    pub updates_per_iter: usize,
    pub batch_trials: usize,
    /// Number of beliefs per trajectory that decode (all when `None`).
    pub subsample_elbos: Option<usize>,
    /// Number of transitions each belief decodes (all when `None`).
    pub subsample_decodes: Option<usize>,
    pub max_grad_norm: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            kl_weight: 0.1,
            reward_weight: 1.0,
            state_weight: 0.0,
            buffer_trials: 64,
            updates_per_iter: 2,
            batch_trials: 8,
            subsample_elbos: None,
            subsample_decodes: None,
            max_grad_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariBadConfig {
    /// Latent size on navigation families.
    pub latent_dim: usize,
    /// Latent size on the point-mass velocity and direction families.
    pub dash_latent_dim: usize,
    pub encoder_hidden: usize,
    pub policy_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub init_log_std: f64,
    pub out_scale: f64,
    pub episodes_per_trial: usize,
    pub trials_per_update: usize,
    pub pg: PgConfig,
    pub vae: VaeConfig,
}

impl Default for VariBadConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            dash_latent_dim: 5,
            encoder_hidden: 32,
            policy_hidden: vec![32, 32],
            decoder_hidden: vec![32, 32],
            init_log_std: (0.05f64).ln(),
            out_scale: 0.01,
            episodes_per_trial: 1,
            trials_per_update: 8,
            pg: PgConfig::default(),
            vae: VaeConfig::default(),
        }
    }
}

/// Encoder GRU over `(next_obs, action, reward)` producing a diagonal
/// Gaussian belief, reward/state decoders, and a policy on
/// `(obs, mu, sigma)`.
#[derive(Clone, Debug)]
pub struct VariBadArch {
    pub spec: EnvSpec,
    pub config: VariBadConfig,
    pub encoder: GruCell,
    pub enc_mu: Mlp,
    pub enc_log_sigma: Mlp,
    pub reward_decoder: Mlp,
    pub state_decoder: Mlp,
    pub actor: Mlp,
    pub critic: Mlp,
}

/// KL divergence between diagonal Gaussians given by means and log-stds.
pub fn kl_diag_gauss(mu1: &[f64], ls1: &[f64], mu2: &[f64], ls2: &[f64]) -> f64 {
    (0..mu1.len())
        .map(|i| {
            let v1 = (2.0 * ls1[i]).exp();
            let v2 = (2.0 * ls2[i]).exp();
            ls2[i] - ls1[i] + (v1 + (mu1[i] - mu2[i]).powi(2)) / (2.0 * v2) - 0.5
        })
        .sum()
}

/// Graph pieces of the VAE objective (all `1 x 1`, averaged over trials).
pub struct VaeLoss {
    pub total: Var,
    pub reward_recon: Var,
    pub state_recon: Option<Var>,
    pub kl: Var,
}

/// Reparameterisation noise: one `B x latent` block per belief index.
pub struct VaeNoise {
    pub eps: Vec<Array2<f64>>,
    pub elbo_idx: Vec<usize>,
    pub decode_idx: Vec<usize>,
}

impl VaeNoise {
    /// Noise for `b` trajectories of `t` transitions, with index subsets
    /// drawn by the configured subsampling.
    pub fn draw(cfg: &VaeConfig, latent: usize, b: usize, t: usize, rng: &mut Rng) -> Self {
        let eps = (0..=t)
            .map(|_| Array2::from_shape_fn((b, latent), |_| StandardNormal.sample(rng)))
            .collect();
        let pick = |n: usize, k: Option<usize>, rng: &mut Rng| -> Vec<usize> {
            match k {
                Some(k) if k < n => {
                    let mut v = rand::seq::index::sample(rng, n, k).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..n).collect(),
            }
        };
        let elbo_idx = pick(t + 1, cfg.subsample_elbos, rng);
        let decode_idx = pick(t, cfg.subsample_decodes, rng);
        Self { eps, elbo_idx, decode_idx }
    }
}

impl VariBadArch {
    pub fn new(spec: &EnvSpec, config: &VariBadConfig) -> Result<Self> {
        let (o, a) = (spec.obs_dim, spec.act_dim);
        let m = if spec.family.is_nav() { config.latent_dim } else { config.dash_latent_dim };
        if m == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        let config = &VariBadConfig { latent_dim: m, ..config.clone() };
        let h = config.encoder_hidden;
        let pol_in = o + 2 * m;
        let dec = |input: usize, out: usize, name: &str| -> Result<Mlp> {
            let s = if config.decoder_hidden.is_empty() {
                MlpSpec::linear(input, out)?
            } else {
                MlpSpec::new(input, &config.decoder_hidden, out)?
            };
            Ok(s.build(name))
        };
        Ok(Self {
            spec: spec.clone(),
            config: config.clone(),
            encoder: GruCellSpec::new(o + a + 1, h)?.build("enc.gru"),
            enc_mu: MlpSpec::linear(h, m)?.build("enc.mu"),
            enc_log_sigma: MlpSpec::linear(h, m)?.build("enc.ls"),
            reward_decoder: dec(m + o, 1, "dec_r")?,
            state_decoder: dec(m + o + a, o, "dec_s")?,
            actor: MlpSpec::new(pol_in, &config.policy_hidden, a)?.with_out_scale(config.out_scale).build("pi"),
            critic: MlpSpec::new(pol_in, &config.policy_hidden, 1)?.build("vf"),
        })
    }

    pub fn belief_dim(&self) -> usize {
        2 * self.config.latent_dim
    }

    /// `(policy, vae)` parameter sets.
    pub fn init(&self, rng: &mut Rng) -> (ParamSet, ParamSet) {
        let mut pol = ParamSet::new();
        self.actor.init(&mut pol, rng);
        pol.insert(LOG_STD, Array2::from_elem((1, self.spec.act_dim), self.config.init_log_std));
        self.critic.init(&mut pol, rng);
        let mut vae = ParamSet::new();
        self.encoder.init(&mut vae, rng);
        self.enc_mu.init(&mut vae, rng);
        self.enc_log_sigma.init(&mut vae, rng);
        self.reward_decoder.init(&mut vae, rng);
        self.state_decoder.init(&mut vae, rng);
        (pol, vae)
    }

    pub fn actor<'a>(&'a self, policy: &'a ParamSet, vae: &'a ParamSet) -> VariBadActor<'a> {
        VariBadActor { arch: self, policy, vae }
    }

    /// `(mu, sigma)` concatenated, from an encoder hidden state.
    pub fn belief_from_hidden(&self, vae: &ParamSet, h: &[f64]) -> Vec<f64> {
        let mut b = self.enc_mu.eval_vec(vae, h);
        b.extend(self.enc_log_sigma.eval_vec(vae, h).into_iter().map(f64::exp));
        b
    }

    fn encoder_input(row: &mut [f64], next_obs: &[f64], action: &[f64], reward: f64) {
        let (o, a) = (next_obs.len(), action.len());
        row[..o].copy_from_slice(next_obs);
        row[o..o + a].copy_from_slice(action);
        row[o + a] = reward;
    }

    /// ELBO-style loss over lockstep trials: every selected belief decodes
    /// every selected transition, plus KL between consecutive beliefs with
    /// a standard-normal prior before the first.
    pub fn vae_loss<'g>(&self, g: &mut Graph<'g>, p: &Bound<'g>, trials: &[&Trial], noise: &VaeNoise) -> Result<VaeLoss> {
        let b = trials.len();
        if b == 0 {
            return Err(Error::Config("vae loss on an empty batch".into()));
        }
        let flat: Vec<Vec<(usize, usize)>> = trials.iter().map(|t| t.steps().collect()).collect();
        let t_len = flat[0].len();
        if flat.iter().any(|f| f.len() != t_len) {
            return Err(Error::Config("vae batch trials differ in length".into()));
        }
        let (o, a) = (self.spec.obs_dim, self.spec.act_dim);
        let cfg = &self.config.vae;
        let step = |r: usize, j: usize| {
            let (e, t) = flat[r][j];
            let ep = &trials[r].episodes[e];
            (&ep.obs[t], &ep.actions[t], ep.rewards[t], &ep.next_obs[t])
        };

        // encoder unroll: beliefs b_0 (zero hidden) .. b_T
        let mut h = g.constant(Array2::zeros((b, self.config.encoder_hidden)));
        let mut mus = Vec::with_capacity(t_len + 1);
        let mut lss = Vec::with_capacity(t_len + 1);
        for k in 0..=t_len {
            if k > 0 {
                let mut x = Array2::zeros((b, o + a + 1));
                for r in 0..b {
                    let (_, act, rew, nobs) = step(r, k - 1);
                    Self::encoder_input(x.row_mut(r).into_slice().expect("row"), nobs, act, rew);
                }
                let xv = g.constant(x);
                h = self.encoder.step(g, p, xv, h)?;
            }
            mus.push(self.enc_mu.forward(g, p, h)?);
            lss.push(self.enc_log_sigma.forward(g, p, h)?);
        }

        // KL chain
        let mut kl_terms = Vec::with_capacity(t_len + 1);
        for k in 0..=t_len {
            let (mu, ls) = (mus[k], lss[k]);
            let two_ls = g.scale(ls, 2.0);
            let var = g.exp(two_ls);
            let term = if k == 0 {
                let mu2 = g.square(mu);
                let s = g.add(mu2, var);
                let s = g.sub(s, two_ls);
                let s = g.add_scalar(s, -1.0);
                g.scale(s, 0.5)
            } else {
                let (mp, lp) = (mus[k - 1], lss[k - 1]);
                let d = g.sub(mu, mp);
                let d2 = g.square(d);
                let num = g.add(var, d2);
                let neg2lp = g.scale(lp, -2.0);
                let inv_vp = g.exp(neg2lp);
                let frac = g.mul(num, inv_vp);
                let frac = g.scale(frac, 0.5);
                let diff_ls = g.sub(lp, ls);
                let s = g.add(diff_ls, frac);
                g.add_scalar(s, -0.5)
            };
            kl_terms.push(g.sum(term));
        }
        let kl_rows = g.concat_rows(&kl_terms);
        let kl = g.sum(kl_rows);

        // decodes
        let nj = noise.decode_idx.len();
        let rows = b * nj;
        let mut next_obs = Array2::zeros((rows, o));
        let mut obs_act = Array2::zeros((rows, o + a));
        let mut rew = Array2::zeros((rows, 1));
        for r in 0..b {
            for (q, &j) in noise.decode_idx.iter().enumerate() {
                let (ob, act, rw, nob) = step(r, j);
                let row = r * nj + q;
                next_obs.row_mut(row).assign(&ndarray::ArrayView1::from(nob.as_slice()));
                obs_act.row_mut(row).slice_mut(ndarray::s![..o]).assign(&ndarray::ArrayView1::from(ob.as_slice()));
                obs_act.row_mut(row).slice_mut(ndarray::s![o..]).assign(&ndarray::ArrayView1::from(act.as_slice()));
                rew[[row, 0]] = rw;
            }
        }
        let use_state = cfg.state_weight != 0.0;
        let next_obs_v = g.constant(next_obs);
        let obs_act_v = if use_state { Some(g.constant(obs_act)) } else { None };
        let rew_v = g.constant(rew);
        let rep: Vec<usize> = (0..b).flat_map(|r| std::iter::repeat_n(r, nj)).collect();
        let mut r_terms = Vec::with_capacity(noise.elbo_idx.len());
        let mut s_terms = Vec::new();
        for &k in &noise.elbo_idx {
            let sigma = g.exp(lss[k]);
            let e = g.constant(noise.eps[k].clone());
            let se = g.mul(sigma, e);
            let latent = g.add(mus[k], se);
            let lat_rep = g.select_rows(latent, rep.clone());
            let rin = g.concat_cols(&[lat_rep, next_obs_v]);
            let pred = self.reward_decoder.forward(g, p, rin)?;
            let d = g.sub(pred, rew_v);
            let d2 = g.square(d);
            r_terms.push(g.sum(d2));
            if let Some(oa) = obs_act_v {
                let sin = g.concat_cols(&[lat_rep, oa]);
                let pred = self.state_decoder.forward(g, p, sin)?;
                let d = g.sub(pred, next_obs_v);
                let d2 = g.square(d);
                s_terms.push(g.sum(d2));
            }
        }
        let r_rows = g.concat_rows(&r_terms);
        let reward_recon = g.sum(r_rows);
        let inv_b = 1.0 / b as f64;
        // subsampled sums are rescaled to estimate the full double sum
        let coverage = ((t_len + 1) * t_len) as f64 / (noise.elbo_idx.len() * nj).max(1) as f64;
        let reward_recon = g.scale(reward_recon, inv_b * coverage);
        let kl = g.scale(kl, inv_b);
        let wr = g.scale(reward_recon, cfg.reward_weight);
        let wk = g.scale(kl, cfg.kl_weight);
        let mut total = g.add(wr, wk);
        let state_recon = if s_terms.is_empty() {
            None
        } else {
            let s_rows = g.concat_rows(&s_terms);
            let s = g.sum(s_rows);
            let s = g.scale(s, inv_b * coverage);
            let ws = g.scale(s, cfg.state_weight);
            total = g.add(total, ws);
            Some(s)
        };
        Ok(VaeLoss { total, reward_recon, state_recon, kl })
    }
}

/// Policy over recorded beliefs; binds only the policy parameters.
impl PolicyModel for VariBadArch {
    fn forward<'g>(&self, g: &mut Graph<'g>, p: &Bound<'g>, batch: &RolloutBatch, trials: &[usize]) -> Result<ModelOut> {
        let bd = self.belief_dim();
        for &ti in trials {
            if batch.trials[ti].episodes.iter().any(|e| e.contexts.len() != e.len()) {
                return Err(Error::Config("varibad batch lacks recorded beliefs".into()));
            }
        }
        let obs = g.constant(stack_rows(batch, trials, self.spec.obs_dim, |ep, t| &ep.obs[t]));
        let bel = g.constant(stack_rows(batch, trials, bd, |ep, t| &ep.contexts[t]));
        let act = g.constant(stack_rows(batch, trials, self.spec.act_dim, |ep, t| &ep.actions[t]));
        let feat = g.concat_cols(&[obs, bel]);
        let mean = self.actor.forward(g, p, feat)?;
        let values = self.critic.forward(g, p, feat)?;
        let ls = p.var(LOG_STD);
        let log_probs = GaussianHead::log_prob_graph(g, mean, ls, act, &batch.mask);
        let entropy = GaussianHead::entropy_graph(g, ls, &batch.mask);
        Ok(ModelOut { log_probs, values: Some(values), entropy: Some(entropy) })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariBadCarry {
    pub hidden: Vec<f64>,
    pub belief: Vec<f64>,
}

pub struct VariBadActor<'a> {
    pub arch: &'a VariBadArch,
    pub policy: &'a ParamSet,
    pub vae: &'a ParamSet,
}

impl Policy for VariBadActor<'_> {
    type Carry = VariBadCarry;

    fn spec(&self) -> &EnvSpec {
        &self.arch.spec
    }

    fn begin_trial(&self) -> VariBadCarry {
        let hidden = vec![0.0; self.arch.config.encoder_hidden];
        let belief = self.arch.belief_from_hidden(self.vae, &hidden);
        VariBadCarry { hidden, belief }
    }

    fn act(&self, obs: &[f64], carry: &mut VariBadCarry, mask: &[bool], rng: &mut Rng, mode: ActMode) -> ActOut {
        let mut feat = obs.to_vec();
        feat.extend_from_slice(&carry.belief);
        let mean = self.arch.actor.eval_vec(self.policy, &feat);
        let value = self.arch.critic.eval_vec(self.policy, &feat)[0];
        let ls = self.policy.get(LOG_STD).expect("log_std").as_slice().expect("contiguous");
        let (action, log_prob) = match mode {
            ActMode::Stochastic => GaussianHead::sample(&mean, ls, mask, rng),
            ActMode::Mean => {
                let lp = GaussianHead::log_prob(&mean, ls, mask, &mean);
                (mean, lp)
            }
        };
        ActOut { action, log_prob, value, context: Some(carry.belief.clone()) }
    }

    fn observe(&self, carry: &mut VariBadCarry, action: &[f64], reward: f64, next_obs: &[f64], _done: bool) {
        let (o, a) = (next_obs.len(), action.len());
        let mut x = vec![0.0; o + a + 1];
        VariBadArch::encoder_input(&mut x, next_obs, action, reward);
        carry.hidden = self.arch.encoder.eval_vec(self.vae, &x, &carry.hidden);
        carry.belief = self.arch.belief_from_hidden(self.vae, &carry.hidden);
    }
}

/// Gradient steps on the VAE objective over trials sampled from `buffer`.
pub fn vae_update(
    arch: &VariBadArch,
    vae: &mut ParamSet,
    opt: &mut crate::diffnet::Adam,
    buffer: &[Trial],
    rng: &mut Rng,
) -> Result<crate::pg::Diagnostics> {
    let cfg = &arch.config.vae;
    let mut diag = crate::pg::Diagnostics::default();
    if buffer.is_empty() || cfg.updates_per_iter == 0 {
        return Ok(diag);
    }
    opt.config.lr = cfg.lr;
    for _ in 0..cfg.updates_per_iter {
        let k = cfg.batch_trials.min(buffer.len()).max(1);
        let idx = rand::seq::index::sample(rng, buffer.len(), k).into_vec();
        // group by length so every graph is lockstep
        let first = buffer[idx[0]].frames();
        let picked: Vec<&Trial> = idx.iter().map(|&i| &buffer[i]).filter(|t| t.frames() == first).collect();
        let noise = VaeNoise::draw(cfg, arch.config.latent_dim, picked.len(), first, rng);
        let (loss, mut grads) = {
            let mut g = Graph::new();
            let p = g.bind(vae);
            let l = arch.vae_loss(&mut g, &p, &picked, &noise)?;
            let v = g.scalar_value(l.total);
            if !v.is_finite() {
                return Err(Error::Diverged(format!("vae loss {v}")));
            }
            (v, g.backward(l.total)?.for_params(&p))
        };
        let gn = crate::diffnet::clip_global_norm(&mut grads, cfg.max_grad_norm);
        opt.step(vae, &grads);
        if !vae.is_finite() {
            return Err(Error::Diverged("non-finite VAE parameters".into()));
        }
        diag.push(loss, gn, vae.norm());
    }
    Ok(diag)
}
