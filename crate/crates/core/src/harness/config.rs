use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::{AdaptationConfig, Mode};
use crate::env::{Family, TaskSpace};
use crate::meta::{AgentConfig, Algo, MetaTrainConfig};
use crate::{Error, Result};

/// Frame budgets; unset entries take the [`Budgets::desk`] values of the
/// experiment's family and algorithm.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub meta_train_frames: Option<usize>,
    pub single_task_frames: Option<usize>,
    pub multi_task_frames: Option<usize>,
}

/// Resolved frame budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameBudgets {
    pub meta_train: usize,
    pub single_task: usize,
    pub multi_task: usize,
}

impl Budgets {
    /// Reference frame counts divided by 200. MAML meta-training is divided
    /// by 10 instead: one outer step costs 20k frames, so the smaller budget
    /// would leave it at two to five steps.
    pub fn desk(family: Family, algo: Algo) -> FrameBudgets {
        let maml = algo == Algo::Maml;
        let (meta, single, multi) = match family {
            Family::NavDense if maml => (10_000_000, 2_000_000, 10_000_000),
            Family::NavDense => (5_000_000, 2_000_000, 5_000_000),
            Family::NavSparse => (20_000_000, 5_000_000, 20_000_000),
            Family::DashVel => (10_000_000, 2_000_000, 10_000_000),
            Family::DashDir => (10_000_000, 5_000_000, 10_000_000),
            Family::DashVelB | Family::DashDirB => (20_000_000, 10_000_000, 20_000_000),
        };
        let meta_div = if maml { 10 } else { 200 };
        FrameBudgets { meta_train: meta / meta_div, single_task: single / 200, multi_task: multi / 200 }
    }

    pub fn resolve(&self, family: Family, algo: Algo) -> FrameBudgets {
        let d = Self::desk(family, algo);
        FrameBudgets {
            meta_train: self.meta_train_frames.unwrap_or(d.meta_train),
            single_task: self.single_task_frames.unwrap_or(d.single_task),
            multi_task: self.multi_task_frames.unwrap_or(d.multi_task),
        }
    }
}

/// One experiment: a single algorithm over a train x test grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub algo: Algo,
    pub family: Family,
    pub train_spaces: Vec<String>,
    pub test_spaces: Vec<String>,
    pub modes: Vec<Mode>,
    pub seeds: usize,
    pub root_seed: u64,
    pub out_dir: PathBuf,
    pub budgets: Budgets,
    pub meta_train: MetaTrainConfig,
    pub adaptation: AdaptationConfig,
    pub agent: AgentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let quadrants: Vec<String> = ["left", "right", "up", "bottom"].iter().map(|q| format!("nav_dense:{q}")).collect();
        Self {
            algo: Algo::Varibad,
            family: Family::NavDense,
            train_spaces: quadrants.clone(),
            test_spaces: quadrants,
            modes: vec![Mode::Default, Mode::Ga, Mode::Cmt],
            seeds: 3,
            root_seed: 0,
            out_dir: PathBuf::from("runs"),
            budgets: Budgets::default(),
            meta_train: MetaTrainConfig::default(),
            adaptation: AdaptationConfig::default(),
            agent: AgentConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train(&self) -> Result<Vec<TaskSpace>> {
        self.train_spaces.iter().map(|k| TaskSpace::parse(k)).collect()
    }

    pub fn test(&self) -> Result<Vec<TaskSpace>> {
        self.test_spaces.iter().map(|k| TaskSpace::parse(k)).collect()
    }

    /// Copy with every budget written out.
    pub fn expanded(&self) -> Self {
        let b = self.budgets();
        let budgets = Budgets {
            meta_train_frames: Some(b.meta_train),
            single_task_frames: Some(b.single_task),
            multi_task_frames: Some(b.multi_task),
        };
        Self { budgets, ..self.clone() }
    }

    pub fn budgets(&self) -> FrameBudgets {
        self.budgets.resolve(self.family, self.algo)
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.budgets();
        if b.meta_train == 0 || b.single_task == 0 || b.multi_task == 0 {
            return Err(Error::Config("budgets must be positive".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.train_spaces.is_empty() || self.test_spaces.is_empty() {
            return Err(Error::Config("train and test spaces must be non-empty".into()));
        }
        for s in self.train()?.iter().chain(self.test()?.iter()) {
            if s.family != self.family {
                return Err(Error::Config(format!("space {} is not in family {}", s.key(), self.family)));
            }
        }
        for m in &self.modes {
            if m.is_scratch() {
                return Err(Error::Config(format!("{m} runs are scheduled automatically")));
            }
            if *m == Mode::Default && !self.algo.is_context_based() {
                return Err(Error::DefaultModeUndefined);
            }
        }
        self.adaptation.validate()
    }

    pub fn single_task_config(&self) -> AdaptationConfig {
        AdaptationConfig { frame_budget: self.budgets().single_task, ..self.adaptation.clone() }
    }

    pub fn multi_task_config(&self) -> AdaptationConfig {
        AdaptationConfig { frame_budget: self.budgets().multi_task, ..self.adaptation.clone() }
    }

    pub fn meta_train_config(&self) -> MetaTrainConfig {
        MetaTrainConfig { frames: self.budgets().meta_train, ..self.meta_train.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::default();
        c.adaptation.ga_lr = Some((1e-3, 2e-3));
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = ExperimentConfig::from_toml("algo = \"rl2\"\nseeds = 2\n[budgets]\nsingle_task_frames = 500\n").unwrap();
        assert_eq!(c.algo, Algo::Rl2);
        assert_eq!(c.budgets().single_task, 500);
        assert_eq!(c.budgets().meta_train, 25_000);
        assert_eq!(c.budgets().multi_task, 25_000);
    }

    #[test]
    fn desk_budgets_follow_family_and_algorithm() {
        let b = Budgets::desk(Family::NavDense, Algo::Maml);
        assert_eq!(b, FrameBudgets { meta_train: 1_000_000, single_task: 10_000, multi_task: 50_000 });
        let b = Budgets::desk(Family::NavSparse, Algo::Varibad);
        assert_eq!(b, FrameBudgets { meta_train: 100_000, single_task: 25_000, multi_task: 100_000 });
        let c = ExperimentConfig::from_toml("algo = \"maml\"\nfamily = \"dash_vel\"\ntrain_spaces = [\"dash_vel:[0,1]\"]\ntest_spaces = [\"dash_vel:[1,2]\"]\nmodes = [\"ga\"]\n").unwrap();
        assert_eq!(c.budgets().meta_train, 1_000_000);
        assert_eq!(c.budgets().multi_task, 50_000);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            "seeds = 0",
            "train_spaces = [\"nav_dense:north\"]",
            "test_spaces = [\"dash_vel:[0,1]\"]",
            "algo = \"maml\"\nmodes = [\"default\"]",
            "modes = [\"scratch_expert\"]",
            "[budgets]\nmeta_train_frames = 0",
        ];
        for b in bad {
            assert!(ExperimentConfig::from_toml(b).is_err(), "{b}");
        }
    }
}
