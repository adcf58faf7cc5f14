use std::path::{Path, PathBuf};

use super::{read_metrics, run_trial, write_metrics, AlgoMode, Metrics, PairedRow, TrialConfig, TrialRecord};
use crate::error::Result;
use crate::world::{make_scenario_with, ScenarioOptions, TaskKind};

/// A grid of trials: every level × seed × algorithm for one task.
#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub task: TaskKind,
    pub levels: Vec<u8>,
    pub seeds_per_level: usize,
    pub algos: Vec<AlgoMode>,
    pub scenario: ScenarioOptions,
    pub trial: TrialConfig,
}

impl SweepOptions {
    /// Scenario seed of the `index`-th environment of `level`.
    pub fn env_seed(level: u8, index: usize) -> u64 {
        level as u64 * 1000 + index as u64
    }
}

pub fn trial_path(dir: &Path, task: TaskKind, algo: &str, level: u8, index: usize) -> PathBuf {
    dir.join(task.name()).join(algo).join(format!("L{level}_S{index}.json"))
}

/// Runs every missing trial of the grid, writing one metrics file per
/// trial. Existing readable files are kept, so an interrupted sweep
/// resumes where it stopped.
pub fn run_sweep(opts: &SweepOptions, dir: &Path, mut progress: impl FnMut(&Path, bool)) -> Result<Vec<Metrics>> {
    let mut out = Vec::new();
    for &level in &opts.levels {
        for index in 0..opts.seeds_per_level {
            let seed = SweepOptions::env_seed(level, index);
            let scenario = make_scenario_with(opts.task, level, seed, &opts.scenario)?;
            for mode in &opts.algos {
                let path = trial_path(dir, opts.task, mode.kind.name(), level, index);
                if let Ok(m) = read_metrics(&path) {
                    progress(&path, true);
                    out.push(m);
                    continue;
                }
                let result = run_trial(&scenario, mode, &opts.trial)?;
                std::fs::create_dir_all(path.parent().expect("trial path has a parent"))?;
                write_metrics(&path, &result.metrics)?;
                progress(&path, false);
                out.push(result.metrics);
            }
        }
    }
    Ok(out)
}

fn collect(dir: &Path, out: &mut Vec<TrialRecord>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect(&p, out)?;
        } else if p.extension().is_some_and(|x| x == "json") {
            match read_metrics(&p) {
                Ok(m) => out.push(TrialRecord::from(&m)),
                Err(err) => log::warn!("skipping {}: {err}", p.display()),
            }
        }
    }
    Ok(())
}

/// Every readable trial file below `dir`.
pub fn load_records(dir: &Path) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    collect(dir, &mut out)?;
    Ok(out)
}

pub fn report(dir: &Path, baseline: &str) -> Result<Vec<PairedRow>> {
    Ok(super::paired_differences(&load_records(dir)?, baseline))
}

/// `task,algo,level,n,dT_mean,dT_sd,dC_mean,dC_sd`, level `all` for the
/// aggregate row.
pub fn write_tables(path: &Path, rows: &[PairedRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task", "algo", "level", "n", "dT_mean", "dT_sd", "dC_mean", "dC_sd"])?;
    for r in rows {
        let level = r.level.map_or("all".to_string(), |l| l.to_string());
        w.write_record([
            r.task.clone(),
            r.algo.clone(),
            level,
            r.n.to_string(),
            r.dt_mean.to_string(),
            r.dt_sd.to_string(),
            r.dc_mean.to_string(),
            r.dc_sd.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
