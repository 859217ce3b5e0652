//! Experiment configs, checkpoints, grid expansion and execution.
//!
//! A run directory looks like
//!
//! ```text
//! <out>/config.toml
//! <out>/meta_train/<algo>/<train>/<seed>/{ckpt.bin, curve.csv, diag.csv, train.json}
//! <out>/cells/<algo>/<train>__<test>/<mode>/<seed>/{run.json, curve.csv, diag.csv, ckpt.bin, traj_dump.jsonl}
//! <out>/baselines/<algo>/<test>/scratch_meta/<seed>/...
//! <out>/report/{report.csv, summary.csv, heatmap_*.svg}
//! ```
//!
//! Every job draws from its own node of the seed tree and writes only below
//! its own directory, so jobs can run in any order or in parallel.

pub mod checkpoint;
pub mod config;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, ResumeState, RngState, MAGIC, VERSION};
pub use config::{Budgets, ExperimentConfig, FrameBudgets};

use crate::adaptation::{run_mode, train_scratch, AdaptationRun, Mode, Target, TrajRecord};
use crate::env::{Task, TaskSpace};
use crate::meta::{Agent, MetaTrainRun};
use crate::metrics::{build_report, Aggregation, ConsistencyReport, RunMeta, RunRecord};
use crate::par::{with_workers, Exec};
use crate::pg::{ActMode, LearningCurve, TaskSource};
use crate::seed::SeedTree;
use crate::{Error, Result};

pub const WORKERS_ENV: &str = "METACON_WORKERS";
/// Meta-training iterations between two resumable checkpoints.
pub const CHECKPOINT_EVERY: u64 = 25;

/// Worker count: the explicit value, else `METACON_WORKERS`, else the
/// number of available cores.
pub fn worker_count(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1)
}

/// File-system friendly form of a space key.
pub fn slug(key: &str) -> String {
    let mut s = String::with_capacity(key.len());
    for c in key.chars() {
        match c {
            ':' => s.push('-'),
            ',' => s.push('_'),
            '[' | ']' => {}
            c if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' => s.push(c),
            _ => s.push('_'),
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub enum Job {
    MetaTrain { train: TaskSpace, seed: u64 },
    Adapt { mode: Mode, train: TaskSpace, test: TaskSpace, seed: u64 },
    Expert { train: TaskSpace, test: TaskSpace, seed: u64 },
    ScratchMeta { test: TaskSpace, seed: u64 },
}

impl Job {
    pub fn mode(&self) -> Option<Mode> {
        match self {
            Job::MetaTrain { .. } => None,
            Job::Adapt { mode, .. } => Some(*mode),
            Job::Expert { .. } => Some(Mode::ScratchExpert),
            Job::ScratchMeta { .. } => Some(Mode::ScratchMeta),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Job::MetaTrain { seed, .. } | Job::Adapt { seed, .. } | Job::Expert { seed, .. } | Job::ScratchMeta { seed, .. } => *seed,
        }
    }

    pub fn dir(&self, cfg: &ExperimentConfig, out: &Path) -> PathBuf {
        let algo = cfg.algo.key();
        let seed = self.seed().to_string();
        match self {
            Job::MetaTrain { train, .. } => meta_train_dir(cfg, out, train, self.seed()),
            Job::Adapt { train, test, .. } | Job::Expert { train, test, .. } => out
                .join("cells")
                .join(algo)
                .join(format!("{}__{}", slug(&train.key()), slug(&test.key())))
                .join(self.mode().expect("run").key())
                .join(seed),
            Job::ScratchMeta { test, .. } => out.join("baselines").join(algo).join(slug(&test.key())).join("scratch_meta").join(seed),
        }
    }

    pub fn run_id(&self, cfg: &ExperimentConfig) -> String {
        let a = cfg.algo.key();
        match self {
            Job::MetaTrain { train, seed } => format!("{a}/{}/meta_train/{seed}", train.key()),
            Job::Adapt { mode, train, test, seed } => format!("{a}/{}/{}/{mode}/{seed}", train.key(), test.key()),
            Job::Expert { train, test, seed } => format!("{a}/{}/{}/scratch_expert/{seed}", train.key(), test.key()),
            Job::ScratchMeta { test, seed } => format!("{a}/{}/scratch_meta/{seed}", test.key()),
        }
    }

    /// Seed-tree node of the job; default and GA share theirs.
    pub fn seeds(&self, cfg: &ExperimentConfig) -> SeedTree {
        let root = SeedTree::root(cfg.root_seed);
        let a = cfg.algo.key();
        let node = match self {
            Job::MetaTrain { train, .. } => root.path(["meta_train", a, &train.key()]),
            Job::Adapt { mode: Mode::Cmt, train, test, .. } => root.path(["cmt", a, &train.key(), &test.key()]),
            Job::Adapt { train, test, .. } => root.path(["adapt", a, &train.key(), &test.key()]),
            Job::Expert { train, test, .. } => root.path(["expert", a, &train.key(), &test.key()]),
            Job::ScratchMeta { test, .. } => root.path(["scratch_meta", a, &test.key()]),
        };
        node.index(self.seed())
    }
}

pub fn meta_train_dir(cfg: &ExperimentConfig, out: &Path, train: &TaskSpace, seed: u64) -> PathBuf {
    out.join("meta_train").join(cfg.algo.key()).join(slug(&train.key())).join(seed.to_string())
}

/// Test task of a (train, test, seed) cell, shared by every mode and the
/// expert of that cell.
pub fn test_task(cfg: &ExperimentConfig, train: &TaskSpace, test: &TaskSpace, seed: u64) -> Task {
    let node = SeedTree::root(cfg.root_seed).path(["task", &train.key(), &test.key()]).index(seed);
    test.sample(&mut node.rng())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPlan {
    pub meta_train: Vec<Job>,
    pub runs: Vec<Job>,
}

impl GridPlan {
    pub fn adaptation_runs(&self) -> usize {
        self.runs.iter().filter(|j| matches!(j, Job::Adapt { .. })).count()
    }

    pub fn expert_runs(&self) -> usize {
        self.runs.iter().filter(|j| matches!(j, Job::Expert { .. })).count()
    }

    pub fn scratch_meta_runs(&self) -> usize {
        self.runs.iter().filter(|j| matches!(j, Job::ScratchMeta { .. })).count()
    }
}

/// Full train x test x mode x seed product with the baselines it needs.
pub fn expand(cfg: &ExperimentConfig) -> Result<GridPlan> {
    cfg.validate()?;
    let (train, test) = (cfg.train()?, cfg.test()?);
    let seeds = 0..cfg.seeds as u64;
    let mut meta_train = Vec::new();
    for tr in &train {
        for s in seeds.clone() {
            meta_train.push(Job::MetaTrain { train: tr.clone(), seed: s });
        }
    }
    let single = cfg.modes.iter().any(|m| m.is_single_task());
    let multi = cfg.modes.iter().any(|m| !m.is_single_task());
    let mut runs = Vec::new();
    for tr in &train {
        for te in &test {
            for &mode in &cfg.modes {
                for s in seeds.clone() {
                    runs.push(Job::Adapt { mode, train: tr.clone(), test: te.clone(), seed: s });
                }
            }
            if single {
                for s in seeds.clone() {
                    runs.push(Job::Expert { train: tr.clone(), test: te.clone(), seed: s });
                }
            }
        }
    }
    if multi {
        for te in &test {
            for s in seeds.clone() {
                runs.push(Job::ScratchMeta { test: te.clone(), seed: s });
            }
        }
    }
    Ok(GridPlan { meta_train, runs })
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub meta: RunMeta,
    pub run_id: String,
    pub task: Option<String>,
    pub frames: usize,
    pub rewarded_episodes: usize,
    pub grad_norms: Vec<f64>,
    pub initial_return: Option<f64>,
}

/// Contents of `train.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_id: String,
    pub frames: usize,
    pub iterations: u64,
    pub best_return: f64,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Meta-train (or resume) the agent of one (train space, seed) pair and
/// keep its best-evaluation checkpoint.
pub fn meta_train(cfg: &ExperimentConfig, train: &TaskSpace, seed: u64, out: &Path, exec: Exec) -> Result<MetaTrainRun> {
    let job = Job::MetaTrain { train: train.clone(), seed };
    let dir = job.dir(cfg, out);
    std::fs::create_dir_all(&dir)?;
    let ckpt_path = dir.join("ckpt.bin");
    let run_id = job.run_id(cfg);
    let (mut run, seeds) = match Checkpoint::load(&ckpt_path) {
        Ok(c) if c.resume.is_some() => c.resume_run(&run_id, seed)?,
        _ => {
            let seeds = job.seeds(cfg);
            let agent = Agent::new(cfg.algo, &cfg.agent, &train.family.spec(), &seeds.child("theta0"))?;
            (MetaTrainRun::start(agent, &run_id, seed), seeds)
        }
    };
    let mt = cfg.meta_train_config();
    let source = TaskSource::Space(train.clone());
    while !(run.evals > 0 && run.is_done(&mt, source.horizon())) {
        run.run(&source, &mt, &seeds, exec, Some(CHECKPOINT_EVERY))?;
        Checkpoint::of_run(&run, &seeds).save(&ckpt_path)?;
    }
    run.curve.write_csv(&dir.join("curve.csv"))?;
    run.diag.write_csv(&dir.join("diag.csv"))?;
    write_json(&TrainSummary { run_id, frames: run.frames, iterations: run.iteration, best_return: run.best_return }, &dir.join("train.json"))?;
    Ok(run)
}

/// Best-evaluation agent of a finished meta-training run.
pub fn load_meta_trained(cfg: &ExperimentConfig, out: &Path, train: &TaskSpace, seed: u64) -> Result<Agent> {
    Checkpoint::load(&meta_train_dir(cfg, out, train, seed).join("ckpt.bin"))?.agent()
}

/// Run one adaptation or baseline job and write its artifacts.
pub fn run_job(cfg: &ExperimentConfig, job: &Job, out: &Path, exec: Exec) -> Result<Option<(RunSummary, AdaptationRun)>> {
    if let Job::MetaTrain { train, seed } = job {
        meta_train(cfg, train, *seed, out, exec)?;
        return Ok(None);
    }
    let seeds = job.seeds(cfg);
    let run_id = job.run_id(cfg);
    let seed = job.seed();
    let mode = job.mode().expect("run");
    let budget_cfg = if mode.is_single_task() { cfg.single_task_config() } else { cfg.multi_task_config() };
    let (run, train_key, test, task) = match job {
        Job::Adapt { mode, train, test, .. } => {
            let agent = load_meta_trained(cfg, out, train, seed)?;
            let (target, task) = if mode.is_single_task() {
                let t = test_task(cfg, train, test, seed);
                (Target::Task(t.clone()), Some(t))
            } else {
                (Target::Space(test.clone()), None)
            };
            (run_mode(*mode, &agent, &target, &budget_cfg, &run_id, seed, &seeds, exec)?, Some(train.key()), test, task)
        }
        Job::Expert { train, test, .. } => {
            let t = test_task(cfg, train, test, seed);
            let r = train_scratch(cfg.algo, &cfg.agent, &Target::Task(t.clone()), &budget_cfg, &run_id, seed, &seeds, exec)?;
            (r, Some(train.key()), test, Some(t))
        }
        Job::ScratchMeta { test, .. } => {
            (train_scratch(cfg.algo, &cfg.agent, &Target::Space(test.clone()), &budget_cfg, &run_id, seed, &seeds, exec)?, None, test, None)
        }
        Job::MetaTrain { .. } => unreachable!(),
    };
    let dir = job.dir(cfg, out);
    std::fs::create_dir_all(&dir)?;
    run.curve.write_csv(&dir.join("curve.csv"))?;
    run.diag.write_csv(&dir.join("diag.csv"))?;
    TrajRecord::write_jsonl(&run.dump, &dir.join("traj_dump.jsonl"))?;
    Checkpoint::of_agent(&run.agent, run.curve.points.last().map(|p| p.mean_return)).save(&dir.join("ckpt.bin"))?;
    let summary = RunSummary {
        meta: RunMeta {
            algo: cfg.algo,
            mode,
            train_space: train_key,
            test_space: test.key(),
            seed,
            budget: budget_cfg.frame_budget as u64,
        },
        run_id,
        task: task.map(|t| t.label()),
        frames: run.frames,
        rewarded_episodes: run.rewarded_episodes,
        grad_norms: run.grad_norms.clone(),
        initial_return: run.initial_return(),
    };
    write_json(&summary, &dir.join("run.json"))?;
    Ok(Some((summary, run)))
}

/// Whether a job's artifacts are complete.
pub fn is_complete(cfg: &ExperimentConfig, job: &Job, out: &Path) -> bool {
    let marker = if matches!(job, Job::MetaTrain { .. }) { "train.json" } else { "run.json" };
    job.dir(cfg, out).join(marker).exists()
}

/// Run `jobs` on a pool of `workers` threads, skipping completed ones.
/// Jobs within the call must not depend on each other.
pub fn run_jobs(cfg: &ExperimentConfig, jobs: Vec<Job>, out: &Path, workers: usize) -> Result<()> {
    let pending: Vec<Job> = jobs.into_iter().filter(|j| !is_complete(cfg, j, out)).collect();
    let results = with_workers(workers, || Exec::Parallel.map(pending, |j| run_job(cfg, &j, out, Exec::Sequential).map(|_| ())));
    results.into_iter().collect()
}

/// Expand, meta-train, adapt and report.
pub fn run_grid(cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<ConsistencyReport> {
    let plan = expand(cfg)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.expanded().to_toml()?)?;
    run_jobs(cfg, plan.meta_train, out, workers)?;
    run_jobs(cfg, plan.runs, out, workers)?;
    report(out, &out.join("report"), Aggregation::PerSeed)
}

fn find_runs(dir: &Path, acc: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_runs(&p, acc)?;
        } else if p.file_name().is_some_and(|n| n == "run.json") {
            acc.push(p);
        }
    }
    Ok(())
}

/// Every finished adaptation and baseline run below `dir`.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut files = Vec::new();
    find_runs(dir, &mut files)?;
    files
        .into_iter()
        .map(|f| {
            let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(&f)?)?;
            let curve = LearningCurve::read_csv(&f.with_file_name("curve.csv"))?;
            Ok(RunRecord { meta: summary.meta, curve })
        })
        .collect()
}

/// Build the report of the runs below `dir` and write it to `dest`.
pub fn report(dir: &Path, dest: &Path, agg: Aggregation) -> Result<ConsistencyReport> {
    let runs = collect_runs(dir)?;
    if runs.is_empty() {
        return Err(Error::Config(format!("no runs found below {}", dir.display())));
    }
    let r = build_report(&runs, agg)?;
    r.write_all(dest)?;
    Ok(r)
}

/// Roll the meta-trained agent out on `task` without updates and write the
/// per-episode positions, rewards and beliefs.
pub fn dump_trajectories(agent: &Agent, task: &Task, trials: usize, seeds: &SeedTree, path: &Path) -> Result<Vec<TrajRecord>> {
    let batch = agent.trials(&vec![task.clone(); trials.max(1)], &seeds.child("dump"), ActMode::Stochastic, Exec::Sequential)?;
    let recs = TrajRecord::from_batch(&batch, true);
    TrajRecord::write_jsonl(&recs, path)?;
    Ok(recs)
}
