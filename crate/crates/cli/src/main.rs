use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use metacon::adaptation::Mode;
use metacon::env::TaskSpace;
use metacon::gradcheck;
use metacon::harness::{self, ExperimentConfig, Job};
use metacon::metrics::{Aggregation, ConsistencyReport};
use metacon::seed::SeedTree;

#[derive(Parser, Debug)]
#[command(name = "metacon", version, about = "Meta-RL consistency experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment file (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = harness::WORKERS_ENV)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Restrict to one train space key, e.g. `nav_dense:left`.
    #[arg(long, global = true)]
    train_space: Option<String>,
    /// Restrict to one test space key.
    #[arg(long, global = true)]
    test_space: Option<String>,
    /// Frame budget of the command being run.
    #[arg(long, global = true)]
    budget: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Meta-train every (train space, seed) and keep best-evaluation checkpoints.
    MetaTrain,
    /// Adapt meta-trained checkpoints in one mode.
    Adapt,
    /// From-scratch baselines.
    Expert,
    /// Every job of the experiment followed by the report.
    Grid,
    /// Consistency report of the runs below `--out`.
    Report {
        /// Metrics of seed-averaged curves instead of per seed.
        #[arg(long)]
        mean_curve: bool,
    },
    /// Trajectory and belief dumps of meta-trained agents.
    DumpTraj {
        #[arg(long, default_value_t = 4)]
        trials: usize,
    },
    /// Finite-difference checks of every gradient.
    FdSuite,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.root_seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(b) = cli.budget {
        if cli.command == Command::MetaTrain {
            cfg.budgets.meta_train_frames = Some(b);
        } else {
            cfg.budgets.single_task_frames = Some(b);
            cfg.budgets.multi_task_frames = Some(b);
        }
    }
    if let Some(k) = &cli.train_space {
        TaskSpace::parse(k)?;
        cfg.train_spaces = vec![k.clone()];
    }
    if let Some(k) = &cli.test_space {
        TaskSpace::parse(k)?;
        cfg.test_spaces = vec![k.clone()];
    }
    if let Some(m) = cli.mode {
        if !m.is_scratch() {
            cfg.modes = vec![m];
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &ConsistencyReport) {
    for s in &r.summary {
        let score = s.mean_c_score.map(|v| format!("{v:.3}")).unwrap_or_else(|| "undefined".into());
        println!(
            "{} {}: OOD c_score {} ({} of {} cells defined), c_rate {:.3}",
            s.algo, s.mode, score, s.defined_cells, s.ood_cells, s.mean_c_rate
        );
    }
}

fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.expanded().to_toml()?)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if cli.command == Command::FdSuite {
        let checks = gradcheck::run_all(cli.seed.unwrap_or(0))?;
        let mut ok = true;
        for c in &checks {
            let status = if c.passed() { "pass" } else { "FAIL" };
            println!("{status} {:<40} max rel error {:.3e} over {} entries", c.name, c.report.max_rel_error, c.report.checked);
            ok &= c.passed();
        }
        return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
    }
    let cfg = load_config(cli)?;
    let out = cfg.out_dir.clone();
    let workers = harness::worker_count(cli.workers);
    let plan = harness::expand(&cfg)?;
    match cli.command {
        Command::MetaTrain => {
            write_config(&cfg, &out)?;
            harness::run_jobs(&cfg, plan.meta_train, &out, workers)?;
        }
        Command::Adapt => {
            if cli.mode.is_none_or(|m| m.is_scratch()) {
                bail!("adapt needs --mode default, ga or cmt");
            }
            write_config(&cfg, &out)?;
            let jobs = plan.runs.into_iter().filter(|j| matches!(j, Job::Adapt { .. })).collect();
            harness::run_jobs(&cfg, jobs, &out, workers)?;
        }
        Command::Expert => {
            write_config(&cfg, &out)?;
            let want = |j: &Job| match cli.mode {
                Some(Mode::ScratchMeta) => matches!(j, Job::ScratchMeta { .. }),
                Some(Mode::ScratchExpert) => matches!(j, Job::Expert { .. }),
                _ => matches!(j, Job::Expert { .. } | Job::ScratchMeta { .. }),
            };
            let jobs = plan.runs.into_iter().filter(want).collect();
            harness::run_jobs(&cfg, jobs, &out, workers)?;
        }
        Command::Grid => {
            let r = harness::run_grid(&cfg, &out, workers)?;
            print_report(&r);
        }
        Command::Report { mean_curve } => {
            let agg = if mean_curve { Aggregation::MeanCurve } else { Aggregation::PerSeed };
            let r = harness::report(&out, &out.join("report"), agg)?;
            print_report(&r);
            println!("wrote {}", out.join("report").display());
        }
        Command::DumpTraj { trials } => {
            for tr in cfg.train()? {
                for te in cfg.test()? {
                    for seed in 0..cfg.seeds as u64 {
                        let agent = harness::load_meta_trained(&cfg, &out, &tr, seed)?;
                        let task = harness::test_task(&cfg, &tr, &te, seed);
                        let dir = out.join("dumps").join(cfg.algo.key()).join(format!("{}__{}", harness::slug(&tr.key()), harness::slug(&te.key())));
                        std::fs::create_dir_all(&dir)?;
                        let path = dir.join(format!("{seed}.jsonl"));
                        let node = SeedTree::root(cfg.root_seed).path(["dump", &tr.key(), &te.key()]).index(seed);
                        harness::dump_trajectories(&agent, &task, trials, &node, &path)?;
                        println!("wrote {}", path.display());
                    }
                }
            }
        }
        Command::FdSuite => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
