//! Binary checkpoints: `MCON\0`, a little-endian `u32` version, a JSON
//! header and one parameter block per stored set.

use std::collections::VecDeque;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffnet::{Adam, AdamConfig, ParamSet};
use crate::env::EnvSpec;
use crate::meta::{Agent, AgentConfig, Algo, MetaTrainRun, TrainState};
use crate::pg::{DiagRow, Diagnostics, LearningCurve, Trial};
use crate::seed::SeedTree;
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MCON\0";
pub const VERSION: u32 = 1;

/// Position of a meta-training run in its seed stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seeds: SeedTree,
    pub iteration: u64,
    pub evals: u64,
}

/// Everything besides the parameters needed to continue meta-training.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    pub frames: usize,
    pub curve: LearningCurve,
    pub diag: Diagnostics,
    pub best_return: f64,
    pub inner_grad_norms: Vec<f64>,
    pub rewarded_episodes: usize,
    pub current: Vec<(String, ParamSet)>,
    pub opt_policy: Adam,
    pub opt_vae: Adam,
    pub vae_buffer: Vec<Trial>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub algo: Algo,
    pub spec: EnvSpec,
    pub config: AgentConfig,
    pub components: Vec<(String, ParamSet)>,
    pub eval_return: Option<f64>,
    pub rng: Option<RngState>,
    pub resume: Option<ResumeState>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct ResumeHeader {
    frames: usize,
    curve: LearningCurve,
    diag: Vec<DiagRow>,
    best_return: Option<f64>,
    inner_grad_norms: Vec<f64>,
    rewarded_episodes: usize,
    opt_policy: AdamHeader,
    opt_vae: AdamHeader,
    vae_buffer: Vec<Trial>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    algo: Algo,
    spec: EnvSpec,
    config: AgentConfig,
    components: Vec<String>,
    eval_return: Option<f64>,
    rng: Option<RngState>,
    resume: Option<ResumeHeader>,
}

fn corrupt(what: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(what.into())
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl Checkpoint {
    /// Snapshot of a trained agent.
    pub fn of_agent(agent: &Agent, eval_return: Option<f64>) -> Self {
        Self {
            version: VERSION,
            algo: agent.algo,
            spec: agent.spec().clone(),
            config: agent.config.clone(),
            components: agent.components().into_iter().map(|(n, p)| (n.to_string(), p.clone())).collect(),
            eval_return,
            rng: None,
            resume: None,
        }
    }

    /// Best-evaluation agent of `run` together with the state needed to
    /// resume it from where it stopped.
    pub fn of_run(run: &MetaTrainRun, seeds: &SeedTree) -> Self {
        let mut c = Self::of_agent(&run.best, finite(run.best_return));
        c.rng = Some(RngState { seeds: *seeds, iteration: run.iteration, evals: run.evals });
        let s = &run.state;
        c.resume = Some(ResumeState {
            frames: run.frames,
            curve: run.curve.clone(),
            diag: run.diag.clone(),
            best_return: run.best_return,
            inner_grad_norms: run.inner_grad_norms.clone(),
            rewarded_episodes: run.rewarded_episodes,
            current: s.agent.components().into_iter().map(|(n, p)| (n.to_string(), p.clone())).collect(),
            opt_policy: s.opt_policy.clone(),
            opt_vae: s.opt_vae.clone(),
            vae_buffer: s.vae_buffer.iter().cloned().collect(),
        });
        c
    }

    fn build(&self, components: &[(String, ParamSet)]) -> Result<Agent> {
        let mut agent = Agent::new(self.algo, &self.config, &self.spec, &SeedTree::root(0))?;
        let names: Vec<&str> = components.iter().map(|(n, _)| n.as_str()).collect();
        if names != self.algo.components() {
            return Err(corrupt(format!("components {names:?} do not match {}", self.algo)));
        }
        for (name, p) in components {
            let reference = agent.components().into_iter().find(|(n, _)| n == name).map(|(_, r)| r.clone()).expect("component");
            p.check_layout(&reference)?;
            agent.set_component(name, p.clone())?;
        }
        Ok(agent)
    }

    /// The stored agent, validated against the architecture its
    /// configuration declares.
    pub fn agent(&self) -> Result<Agent> {
        self.build(&self.components)
    }

    /// Rebuild the interrupted meta-training run and its seed node.
    pub fn resume_run(&self, run_id: &str, seed: u64) -> Result<(MetaTrainRun, SeedTree)> {
        let (rng, r) = match (&self.rng, &self.resume) {
            (Some(rng), Some(r)) => (rng, r),
            _ => return Err(corrupt("checkpoint holds no training state")),
        };
        let best = self.agent()?;
        let current = self.build(&r.current)?;
        let mut run = MetaTrainRun::start(current.clone(), run_id, seed);
        run.state = TrainState {
            agent: current,
            opt_policy: r.opt_policy.clone(),
            opt_vae: r.opt_vae.clone(),
            vae_buffer: r.vae_buffer.iter().cloned().collect::<VecDeque<_>>(),
        };
        run.frames = r.frames;
        run.iteration = rng.iteration;
        run.evals = rng.evals;
        run.curve = r.curve.clone();
        run.diag = r.diag.clone();
        run.best = best;
        run.best_return = r.best_return;
        run.inner_grad_norms = r.inner_grad_norms.clone();
        run.rewarded_episodes = r.rewarded_episodes;
        Ok((run, rng.seeds))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let resume = self.resume.as_ref().map(|r| ResumeHeader {
            frames: r.frames,
            curve: r.curve.clone(),
            diag: r.diag.rows.clone(),
            best_return: finite(r.best_return),
            inner_grad_norms: r.inner_grad_norms.clone(),
            rewarded_episodes: r.rewarded_episodes,
            opt_policy: AdamHeader { config: r.opt_policy.config, t: r.opt_policy.t },
            opt_vae: AdamHeader { config: r.opt_vae.config, t: r.opt_vae.t },
            vae_buffer: r.vae_buffer.clone(),
        });
        let header = Header {
            algo: self.algo,
            spec: self.spec.clone(),
            config: self.config.clone(),
            components: self.components.iter().map(|(n, _)| n.clone()).collect(),
            eval_return: self.eval_return,
            rng: self.rng,
            resume,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_all(&self.version.to_le_bytes())?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for (_, p) in &self.components {
            p.write_block(&mut out)?;
        }
        if let Some(r) = &self.resume {
            for (_, p) in &r.current {
                p.write_block(&mut out)?;
            }
            for p in [&r.opt_policy.m, &r.opt_policy.v, &r.opt_vae.m, &r.opt_vae.v] {
                p.write_block(&mut out)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| corrupt("truncated header"))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::VersionMismatch { found: version, expected: VERSION });
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| corrupt("truncated header"))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > bytes.len() {
            return Err(corrupt("truncated header"));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| corrupt("truncated header"))?;
        let h: Header = serde_json::from_slice(&json).map_err(|e| corrupt(format!("header: {e}")))?;
        let components = h
            .components
            .iter()
            .map(|n| Ok((n.clone(), ParamSet::read_block(&mut r)?)))
            .collect::<Result<Vec<_>>>()?;
        let resume = match h.resume {
            None => None,
            Some(rh) => {
                let current = h
                    .components
                    .iter()
                    .map(|n| Ok((n.clone(), ParamSet::read_block(&mut r)?)))
                    .collect::<Result<Vec<_>>>()?;
                let mut adam = |a: AdamHeader| -> Result<Adam> {
                    let m = ParamSet::read_block(&mut r)?;
                    let v = ParamSet::read_block(&mut r)?;
                    Ok(Adam { config: a.config, m, v, t: a.t })
                };
                let opt_policy = adam(rh.opt_policy)?;
                let opt_vae = adam(rh.opt_vae)?;
                Some(ResumeState {
                    frames: rh.frames,
                    curve: rh.curve,
                    diag: Diagnostics { rows: rh.diag },
                    best_return: rh.best_return.unwrap_or(f64::NEG_INFINITY),
                    inner_grad_norms: rh.inner_grad_norms,
                    rewarded_episodes: rh.rewarded_episodes,
                    current,
                    opt_policy,
                    opt_vae,
                    vae_buffer: rh.vae_buffer,
                })
            }
        };
        if (r.position() as usize) != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        let ckpt = Self { version, algo: h.algo, spec: h.spec, config: h.config, components, eval_return: h.eval_return, rng: h.rng, resume };
        ckpt.agent()?;
        Ok(ckpt)
    }

    /// Written to a sibling temporary file and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("bin.tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Family, Quadrant, TaskSpace};
    use crate::meta::MetaTrainConfig;
    use crate::par::Exec;
    use crate::pg::TaskSource;

    fn small() -> AgentConfig {
        let mut c = AgentConfig::default();
        c.maml.inner_batch_tasks = 2;
        c.maml.outer_batch_tasks = 2;
        c.rl2.trials_per_update = 2;
        c.varibad.trials_per_update = 2;
        c.varibad.vae.batch_trials = 2;
        c
    }

    fn short_run(algo: Algo, iters: Option<u64>) -> (MetaTrainRun, SeedTree, MetaTrainConfig, TaskSource) {
        let spec = Family::NavDense.spec();
        let seeds = SeedTree::root(3).child("ckpt");
        let agent = Agent::new(algo, &small(), &spec, &seeds.child("theta0")).unwrap();
        let src = TaskSource::Space(TaskSpace::quadrant(Family::NavDense, Quadrant::Left).unwrap());
        let cfg = MetaTrainConfig { frames: 2400, eval_fraction: 0.25, eval_tasks: 2, eval_episodes: 1 };
        let mut run = MetaTrainRun::start(agent, "r", 0);
        run.run(&src, &cfg, &seeds, Exec::Sequential, iters).unwrap();
        (run, seeds, cfg, src)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for algo in Algo::ALL {
            let (run, seeds, _, _) = short_run(algo, Some(3));
            let c = Checkpoint::of_run(&run, &seeds);
            let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
            assert_eq!(back.components.len(), c.components.len());
            for ((_, a), (_, b)) in back.components.iter().zip(&c.components) {
                assert!(a.bit_eq(b));
            }
            let (ra, rb) = (back.resume.as_ref().unwrap(), c.resume.as_ref().unwrap());
            assert!(ra.opt_policy.m.bit_eq(&rb.opt_policy.m));
            assert_eq!(ra.vae_buffer, rb.vae_buffer);
            assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
        }
    }

    #[test]
    fn truncation_and_version_are_reported() {
        let (run, seeds, _, _) = short_run(Algo::Rl2, Some(1));
        let bytes = Checkpoint::of_run(&run, &seeds).to_bytes().unwrap();
        for cut in [3, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut v2 = bytes.clone();
        v2[5] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::VersionMismatch { found: 2, expected: 1 })));
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let (run, seeds, _, _) = short_run(Algo::Maml, Some(1));
        let mut c = Checkpoint::of_run(&run, &seeds);
        c.config.maml.policy.hidden = vec![8];
        assert!(matches!(Checkpoint::from_bytes(&c.to_bytes().unwrap()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        for algo in Algo::ALL {
            let (full, _, cfg, src) = short_run(algo, None);
            let (part, seeds, _, _) = short_run(algo, Some(2));
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ckpt.bin");
            Checkpoint::of_run(&part, &seeds).save(&path).unwrap();
            let (mut resumed, seeds) = Checkpoint::load(&path).unwrap().resume_run("r", 0).unwrap();
            resumed.run(&src, &cfg, &seeds, Exec::Sequential, None).unwrap();
            assert_eq!(resumed.curve, full.curve, "{algo}");
            assert!(resumed.best.policy.bit_eq(&full.best.policy));
            assert!(resumed.state.agent.vae.bit_eq(&full.state.agent.vae));
        }
    }

    #[test]
    fn missing_file() {
        assert!(matches!(Checkpoint::load(Path::new("/nonexistent/ckpt.bin")), Err(Error::MissingCheckpoint(_))));
    }
}
