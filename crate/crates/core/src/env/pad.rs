use super::{EnvSpec, Family};
use crate::{Error, Result};

/// Maps observations and actions between an environment's spec and the
/// (possibly wider or narrower) spec an agent was built for.
///
/// Observations are zero-padded or truncated; the action mask marks the
/// agent action dimensions that actually drive the environment, so policy
/// losses can ignore the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub source: EnvSpec,
    pub target: EnvSpec,
}

fn family_group(f: Family) -> u8 {
    if f.is_nav() {
        0
    } else {
        1
    }
}

impl Adapter {
    pub fn new(source: &EnvSpec, target: &EnvSpec) -> Result<Self> {
        if family_group(source.family) != family_group(target.family) {
            return Err(Error::NoAdapter {
                from: source.family.to_string(),
                to: target.family.to_string(),
            });
        }
        Ok(Self { source: source.clone(), target: target.clone() })
    }

    pub fn identity(spec: &EnvSpec) -> Self {
        Self { source: spec.clone(), target: spec.clone() }
    }

    pub fn is_identity(&self) -> bool {
        self.source.obs_dim == self.target.obs_dim && self.source.act_dim == self.target.act_dim
    }

    /// Source observation in target coordinates.
    pub fn obs(&self, obs: &[f64]) -> Vec<f64> {
        resize(obs, self.target.obs_dim)
    }

    /// Target observation projected back to source coordinates.
    pub fn unpad_obs(&self, obs: &[f64]) -> Vec<f64> {
        resize(obs, self.source.obs_dim)
    }

    /// Agent (target) action mapped to an environment (source) action.
    pub fn env_action(&self, action: &[f64]) -> Vec<f64> {
        resize(action, self.source.act_dim)
    }

    /// `true` for target action dimensions that have a source counterpart.
    pub fn action_mask(&self) -> Vec<bool> {
        (0..self.target.act_dim).map(|i| i < self.source.act_dim).collect()
    }
}

fn resize(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let k = x.len().min(n);
    out[..k].copy_from_slice(&x[..k]);
    out
}

/// Free-function form of [`Adapter`]: padded observation plus action mask.
pub fn pad_adapt(obs: &[f64], source: &EnvSpec, target: &EnvSpec) -> Result<(Vec<f64>, Vec<bool>)> {
    let a = Adapter::new(source, target)?;
    Ok((a.obs(obs), a.action_mask()))
}
