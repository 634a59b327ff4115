//! Command-line surface: `train`, `eval` and `oracle-check`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::oracle::{run_oracle_checks, write_reports, OracleReport};
use crate::trainer::checkpoint;
use crate::trainer::{IterationStats, RunState, Split, SplitStats};

/// Overrides the directory that relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "HIMETA_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "himeta", version, about = "Hierarchical meta-RL on toy task suites")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy rollouts of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Replaces the config stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        /// CSV destination; defaults to `eval_<split>.csv` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form and gradient checks on a linear-suite checkpoint.
    OracleCheck {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        episodes: usize,
    },
}

pub const METRICS_HEADER: &str = "iteration,\
train_avg_success_mean,train_avg_success_std,train_success_mean,train_success_std,train_return_mean,train_return_std,\
test_avg_success_mean,test_avg_success_std,test_success_mean,test_success_std,test_return_mean,test_return_std,\
loss_value,loss_entropy,loss_occupancy,loss_kl,loss_transition,ppo_surrogate,ppo_entropy,clip_fraction";

/// One `metrics.csv` row; fields follow [`METRICS_HEADER`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub train: SplitStats,
    pub test: SplitStats,
    pub loss_value: f64,
    pub loss_entropy: f64,
    pub loss_occupancy: f64,
    pub loss_kl: f64,
    pub loss_transition: f64,
    pub ppo_surrogate: f64,
    pub ppo_entropy: f64,
    pub clip_fraction: f64,
}

fn split_fields(s: &SplitStats) -> [f64; 6] {
    [
        s.avg_success_mean,
        s.avg_success_std,
        s.success_mean,
        s.success_std,
        s.return_mean,
        s.return_std,
    ]
}

fn split_from(v: &[f64]) -> SplitStats {
    SplitStats {
        avg_success_mean: v[0],
        avg_success_std: v[1],
        success_mean: v[2],
        success_std: v[3],
        return_mean: v[4],
        return_std: v[5],
    }
}

impl MetricsRow {
    pub fn from_stats(s: &IterationStats) -> Self {
        Self {
            iteration: s.iteration,
            train: s.train,
            test: s.test,
            loss_value: s.hl.value,
            loss_entropy: s.hl.entropy,
            loss_occupancy: s.hl.occupancy,
            loss_kl: s.il.kl,
            loss_transition: s.il.transition,
            ppo_surrogate: s.ppo.mean.surrogate,
            ppo_entropy: s.ppo.mean.entropy,
            clip_fraction: s.ppo.mean.clip_fraction,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut fields = vec![self.iteration.to_string()];
        let rest = split_fields(&self.train).into_iter().chain(split_fields(&self.test)).chain([
            self.loss_value,
            self.loss_entropy,
            self.loss_occupancy,
            self.loss_kl,
            self.loss_transition,
            self.ppo_surrogate,
            self.ppo_entropy,
            self.clip_fraction,
        ]);
        fields.extend(rest.map(|x| x.to_string()));
        fields.join(",")
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.trim_end().split(',').collect();
        if parts.len() != METRICS_HEADER.split(',').count() {
            return Err(Error::Usage(format!("metrics row has {} fields", parts.len())));
        }
        let iteration = parts[0]
            .parse()
            .map_err(|_| Error::Usage(format!("bad iteration `{}`", parts[0])))?;
        let v = parts[1..]
            .iter()
            .map(|p| p.parse::<f64>().map_err(|_| Error::Usage(format!("bad number `{p}`"))))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Self {
            iteration,
            train: split_from(&v[0..6]),
            test: split_from(&v[6..12]),
            loss_value: v[12],
            loss_entropy: v[13],
            loss_occupancy: v[14],
            loss_kl: v[15],
            loss_transition: v[16],
            ppo_surrogate: v[17],
            ppo_entropy: v[18],
            clip_fraction: v[19],
        })
    }
}

pub fn write_metrics<W: Write>(w: &mut W, row: &MetricsRow) -> Result<()> {
    writeln!(w, "{}", row.to_csv())?;
    Ok(())
}

/// Resolves `path` against the output root override, if set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Exclusive use of an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "{} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn checkpoint_path(dir: &Path, iteration: Option<u64>) -> PathBuf {
    match iteration {
        Some(i) => dir.join(format!("checkpoint_{i:06}.bin")),
        None => dir.join("checkpoint_final.bin"),
    }
}

/// Result of a finished training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub state: RunState,
    pub history: Vec<IterationStats>,
}

/// Runs `cfg.train.iterations` iterations, writing `config.txt`,
/// `metrics.csv`, `timing.csv` and checkpoints into the output directory.
pub fn cmd_train(cfg: RunConfig) -> Result<TrainOutcome> {
    cmd_train_with(cfg, true)
}

pub fn cmd_train_with(cfg: RunConfig, verbose: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = resolve_output(&cfg.train.output_dir);
    std::fs::create_dir_all(&dir)?;
    let _lock = DirLock::acquire(&dir)?;
    std::fs::write(dir.join("config.txt"), cfg.to_config_text())?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut timing = BufWriter::new(File::create(dir.join("timing.csv"))?);
    writeln!(timing, "iteration,seconds")?;

    let mut state = RunState::new(cfg)?;
    let mut history = Vec::new();
    let every = state.cfg.train.checkpoint_every as u64;
    for _ in 0..state.cfg.train.iterations {
        let start = Instant::now();
        let stats = state.train_iteration()?;
        let row = MetricsRow::from_stats(&stats);
        write_metrics(&mut metrics, &row)?;
        metrics.flush()?;
        writeln!(timing, "{},{}", stats.iteration, start.elapsed().as_secs_f64())?;
        timing.flush()?;
        if verbose {
            println!(
                "iter {:>5}  train avg-succ {:.3}  test succ {:.3}  L_V {:.4}  L_trans {:.4}  ppo {:.4}  clip {:.3}",
                stats.iteration,
                row.train.avg_success_mean,
                row.test.success_mean,
                row.loss_value,
                row.loss_transition,
                row.ppo_surrogate,
                row.clip_fraction
            );
        }
        if state.iteration % every == 0 {
            checkpoint::save(&state, &checkpoint_path(&dir, Some(state.iteration)))?;
        }
        history.push(stats);
    }
    checkpoint::save(&state, &checkpoint_path(&dir, None))?;
    Ok(TrainOutcome {
        out_dir: dir,
        state,
        history,
    })
}

fn load_state(ckpt: &Path, config: Option<&Path>) -> Result<RunState> {
    let cfg = config.map(RunConfig::from_file).transpose()?;
    checkpoint::load_with(ckpt, cfg)
}

/// Greedy rollouts on `split`; the same checkpoint always gives the same
/// numbers.
pub fn cmd_eval(ckpt: &Path, config: Option<&Path>, split: Split, episodes: usize) -> Result<SplitStats> {
    let state = load_state(ckpt, config)?;
    let trajs = state.evaluate(split, episodes, 0)?;
    SplitStats::from_trajectories(&trajs)
}

pub fn cmd_oracle_check(ckpt: &Path, config: Option<&Path>, episodes: usize) -> Result<Vec<OracleReport>> {
    let state = load_state(ckpt, config)?;
    run_oracle_checks(&state, None, episodes)
}

fn sibling(ckpt: &Path, name: &str) -> PathBuf {
    ckpt.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

/// Exit code 2 for numeric failures, 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => 2,
        _ => 1,
    }
}

/// Dispatches a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(o) = out {
                cfg.train.output_dir = o;
            }
            let outcome = cmd_train(cfg)?;
            println!("wrote {}", outcome.out_dir.display());
            Ok(0)
        }
        Command::Eval {
            ckpt,
            split,
            config,
            episodes,
            out,
        } => {
            let split_v: Split = split.parse()?;
            let s = cmd_eval(&ckpt, config.as_deref(), split_v, episodes)?;
            println!(
                "{split}: avg success {:.4} ± {:.4}  success {:.4} ± {:.4}  return {:.4} ± {:.4}",
                s.avg_success_mean, s.avg_success_std, s.success_mean, s.success_std, s.return_mean, s.return_std
            );
            let path = out.unwrap_or_else(|| sibling(&ckpt, &format!("eval_{split}.csv")));
            let mut w = BufWriter::new(File::create(&path)?);
            writeln!(
                w,
                "split,avg_success_mean,avg_success_std,success_mean,success_std,return_mean,return_std"
            )?;
            let f = split_fields(&s).map(|x| x.to_string()).join(",");
            writeln!(w, "{split},{f}")?;
            Ok(0)
        }
        Command::OracleCheck { ckpt, config, episodes } => {
            let reports = cmd_oracle_check(&ckpt, config.as_deref(), episodes)?;
            for r in &reports {
                println!("{r}");
            }
            write_reports(File::create(sibling(&ckpt, "oracle_report.csv"))?, &reports)?;
            Ok(if reports.iter().all(|r| r.pass) { 0 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_row_round_trips() {
        let s = SplitStats {
            avg_success_mean: 0.1,
            avg_success_std: 1.0 / 3.0,
            success_mean: 0.0,
            success_std: 0.0,
            return_mean: 12.345678901234567,
            return_std: 1e-17,
        };
        let row = MetricsRow {
            iteration: 7,
            train: s,
            test: s,
            loss_value: 3.5,
            loss_entropy: -0.2,
            loss_occupancy: -1.1,
            loss_kl: 0.01,
            loss_transition: 2.0,
            ppo_surrogate: -0.3,
            ppo_entropy: 2.8,
            clip_fraction: 0.125,
        };
        assert_eq!(MetricsRow::parse_csv(&row.to_csv()).unwrap(), row);
    }

    #[test]
    fn numeric_errors_exit_with_two() {
        assert_eq!(exit_code(&Error::Numeric("x".into())), 2);
        assert_eq!(exit_code(&Error::Usage("x".into())), 1);
    }
}
