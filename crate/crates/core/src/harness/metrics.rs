use std::collections::BTreeMap;
use std::time::Duration;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Summary of one trial, written as `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub task: String,
    pub level: u8,
    pub seed: u64,
    pub algo: String,
    pub rollouts: usize,
    pub iterations: usize,
    pub trust: f64,
    pub collision_steps: usize,
    /// Goals reached, objects dropped, or mean following error (m).
    pub task_score: f64,
    pub goals_reached: usize,
    pub objects_dropped: usize,
    pub following_error: Option<f64>,
    pub control_frequency_hz: f64,
    pub per_arm_frequency_hz: Vec<f64>,
    /// Step of each arm's first reached goal.
    pub first_reach: Vec<Option<usize>>,
    pub t_max: usize,
    pub steps_run: usize,
    pub aborted: bool,
    pub nondeterministic: bool,
    pub trajectory_reads: usize,
    pub max_staleness: usize,
}

/// Number of steps with any contact.
pub fn collision_step_count(flags: &[bool]) -> usize {
    flags.iter().filter(|f| **f).count()
}

/// Mean over steps of the mean over arms of end-effector to goal distance.
pub fn following_error(ee: &[Vec<Vector3<f64>>], goals: &[Vec<Vector3<f64>>]) -> f64 {
    if ee.is_empty() {
        return 0.0;
    }
    let per_step = ee.iter().zip(goals).map(|(e, g)| {
        let n = e.len().max(1) as f64;
        e.iter().zip(g).map(|(a, b)| (a - b).norm()).sum::<f64>() / n
    });
    per_step.sum::<f64>() / ee.len() as f64
}

/// Steps per second of planning time.
pub fn control_frequency(times: &[Duration]) -> f64 {
    let total: f64 = times.iter().map(Duration::as_secs_f64).sum();
    if total > 0.0 {
        times.len() as f64 / total
    } else {
        f64::INFINITY
    }
}

/// Mean and sample standard deviation; the deviation is 0 for fewer than
/// two values.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One trial's outcome keyed by environment.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub task: String,
    pub level: u8,
    pub seed: u64,
    pub algo: String,
    pub task_score: f64,
    pub collision_steps: f64,
}

impl From<&Metrics> for TrialRecord {
    fn from(m: &Metrics) -> Self {
        TrialRecord {
            task: m.task.clone(),
            level: m.level,
            seed: m.seed,
            algo: m.algo.clone(),
            task_score: m.task_score,
            collision_steps: m.collision_steps as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedRow {
    pub task: String,
    pub algo: String,
    /// `None` aggregates all levels.
    pub level: Option<u8>,
    pub n: usize,
    pub dt_mean: f64,
    pub dt_sd: f64,
    pub dc_mean: f64,
    pub dc_sd: f64,
}

/// Per-environment differences against `baseline`, aggregated per task,
/// algorithm and level plus an all-level row. Environments without a
/// baseline result are skipped with a warning.
pub fn paired_differences(records: &[TrialRecord], baseline: &str) -> Vec<PairedRow> {
    type Env = (String, u8, u64);
    let mut base: BTreeMap<Env, &TrialRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| r.algo == baseline) {
        base.insert((r.task.clone(), r.level, r.seed), r);
    }
    // (task, algo) -> level -> diffs
    let mut groups: BTreeMap<(String, String), BTreeMap<u8, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in records {
        let Some(b) = base.get(&(r.task.clone(), r.level, r.seed)) else {
            log::warn!("no {baseline} result for {} level {} seed {}; excluded", r.task, r.level, r.seed);
            continue;
        };
        groups
            .entry((r.task.clone(), r.algo.clone()))
            .or_default()
            .entry(r.level)
            .or_default()
            .push((r.task_score - b.task_score, r.collision_steps - b.collision_steps));
    }
    let mut rows = Vec::new();
    let row = |task: &str, algo: &str, level, diffs: &[(f64, f64)]| {
        let dt: Vec<f64> = diffs.iter().map(|d| d.0).collect();
        let dc: Vec<f64> = diffs.iter().map(|d| d.1).collect();
        let (dt_mean, dt_sd) = mean_sd(&dt);
        let (dc_mean, dc_sd) = mean_sd(&dc);
        PairedRow {
            task: task.to_string(),
            algo: algo.to_string(),
            level,
            n: diffs.len(),
            dt_mean,
            dt_sd,
            dc_mean,
            dc_sd,
        }
    };
    // Baseline rows first, then the rest alphabetically.
    let mut keys: Vec<_> = groups.keys().cloned().collect();
    keys.sort_by_key(|(task, algo)| (task.clone(), algo != baseline, algo.clone()));
    for key in keys {
        let levels = &groups[&key];
        let mut all = Vec::new();
        for (level, diffs) in levels {
            rows.push(row(&key.0, &key.1, Some(*level), diffs));
            all.extend_from_slice(diffs);
        }
        rows.push(row(&key.0, &key.1, None, &all));
    }
    rows
}
