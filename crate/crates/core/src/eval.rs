//! Rollout evaluation and reporting statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{self, Actor, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::trainer::{Stage2Mode, ThresholdMode};

/// First evaluation seed; training demonstrations use seeds below it.
pub const EVAL_SEED_BASE: u64 = 10_000;
pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Mean of the values left after dropping `floor(n/4)` from each end of the
/// sorted input.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::State("IQM of an empty sample".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("IQM of a sample containing NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(trimmed_mean(&sorted))
}

fn trimmed_mean(sorted: &[f64]) -> f64 {
    let cut = sorted.len() / 4;
    let middle = &sorted[cut..sorted.len() - cut];
    let base = middle[0];
    base + middle.iter().map(|v| v - base).sum::<f64>() / middle.len() as f64
}

/// Percentile bootstrap interval of the IQM using nearest-rank percentiles.
pub fn bootstrap_ci(values: &[f64], n_resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::State("bootstrap of an empty sample".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    if n_resamples == 0 {
        return Err(Error::Config("bootstrap needs at least one resample".into()));
    }
    iqm(values)?;
    let n = values.len();
    let mut rng = rng::stream(seed, tag::BOOTSTRAP, 0);
    let mut stats = Vec::with_capacity(n_resamples);
    let mut resample = vec![0.0; n];
    for _ in 0..n_resamples {
        for slot in resample.iter_mut() {
            *slot = values[rng.random_range(0..n)];
        }
        resample.sort_by(f64::total_cmp);
        stats.push(trimmed_mean(&resample));
    }
    stats.sort_by(f64::total_cmp);
    let rank = |q: f64| {
        let r = (q * n_resamples as f64).ceil() as usize;
        stats[r.clamp(1, n_resamples) - 1]
    };
    let tail = (1.0 - level) / 2.0;
    Ok((rank(tail), rank(1.0 - tail)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub task: TaskKind,
    pub successes: Vec<u8>,
    pub n_episodes: usize,
    pub success_rate: f64,
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub seeds: Vec<u64>,
}

impl EvalSummary {
    pub fn from_successes(
        task: TaskKind,
        successes: Vec<u8>,
        seeds: Vec<u64>,
        n_resamples: usize,
        level: f64,
        bootstrap_seed: u64,
    ) -> Result<Self> {
        let values: Vec<f64> = successes.iter().map(|s| f64::from(*s)).collect();
        let iqm = iqm(&values)?;
        let (ci_low, ci_high) = bootstrap_ci(&values, n_resamples, level, bootstrap_seed)?;
        Ok(Self {
            task,
            n_episodes: successes.len(),
            success_rate: values.iter().sum::<f64>() / values.len() as f64,
            successes,
            iqm,
            ci_low,
            ci_high,
            seeds,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub base_seed: u64,
    pub n_resamples: usize,
    pub level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 100,
            base_seed: EVAL_SEED_BASE,
            n_resamples: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
        }
    }
}

/// Runs episodes on seeds `base_seed..base_seed + n_episodes`, all in
/// lockstep, and summarizes binary success.
pub fn evaluate_policy<A: Actor + ?Sized>(actor: &A, spec: &TaskSpec, config: &EvalConfig) -> Result<EvalSummary> {
    if config.n_episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let seeds: Vec<u64> = (0..config.n_episodes as u64).map(|i| config.base_seed + i).collect();
    let trajs = envs::rollout_many(actor, spec, &seeds, spec.max_steps)?;
    let successes = trajs.iter().map(|t| u8::from(t.success)).collect();
    EvalSummary::from_successes(
        spec.kind,
        successes,
        seeds,
        config.n_resamples,
        config.level,
        config.base_seed,
    )
}

/// Everything `report` needs from one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: TaskKind,
    pub n_clean: usize,
    pub n_perturbed: usize,
    pub stage2_mode: Stage2Mode,
    pub threshold_mode: ThresholdMode,
    pub seed: u64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub final_loss: Option<f64>,
    pub skipped_steps: usize,
    pub warnings: Vec<String>,
    pub eval: EvalSummary,
}

impl RunSummary {
    /// Report column: the stage-1-only run is "stage1", the unfiltered
    /// mixture is "perturbed".
    pub fn column(&self) -> String {
        match self.stage2_mode {
            Stage2Mode::None => "stage1".into(),
            Stage2Mode::Naive => "perturbed".into(),
            Stage2Mode::Offline => "offline".into(),
            Stage2Mode::Online => match self.threshold_mode {
                ThresholdMode::Mean => "online".into(),
                ThresholdMode::MeanMinusStd => "online_strict".into(),
                ThresholdMode::Fixed(v) => format!("online_fixed_{v}"),
            },
        }
    }
}

const COLUMN_ORDER: [&str; 5] = ["stage1", "perturbed", "offline", "online", "online_strict"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: TaskKind,
    pub n_clean: usize,
    pub n_perturbed: usize,
    pub cells: BTreeMap<String, Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// One row per `(task, composition)`, one column per mode. Without
/// `group_by_task` every record must share the same task and composition.
pub fn compare_runs(records: &[RunSummary], group_by_task: bool) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Validation("no run summaries to compare".into()));
    }
    if !group_by_task {
        let first = &records[0];
        if let Some(r) = records
            .iter()
            .find(|r| (r.task, r.n_clean, r.n_perturbed) != (first.task, first.n_clean, first.n_perturbed))
        {
            return Err(Error::Validation(format!(
                "runs mix {} ({},{}) with {} ({},{}); group by task to compare them",
                first.task, first.n_clean, first.n_perturbed, r.task, r.n_clean, r.n_perturbed
            )));
        }
    }
    let mut rows: BTreeMap<(TaskKind, usize, usize), BTreeMap<String, Cell>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for r in records {
        let column = r.column();
        let cells = rows.entry((r.task, r.n_clean, r.n_perturbed)).or_default();
        if cells.contains_key(&column) {
            return Err(Error::Validation(format!(
                "two runs for {} ({},{}) in column {column}",
                r.task, r.n_clean, r.n_perturbed
            )));
        }
        seen.insert(column.clone());
        cells.insert(
            column,
            Cell {
                iqm: r.eval.iqm,
                ci_low: r.eval.ci_low,
                ci_high: r.eval.ci_high,
                seed: r.seed,
            },
        );
    }
    let mut columns: Vec<String> = COLUMN_ORDER
        .iter()
        .filter(|c| seen.contains(**c))
        .map(|c| c.to_string())
        .collect();
    columns.extend(seen.into_iter().filter(|c| !COLUMN_ORDER.contains(&c.as_str())));
    Ok(Report {
        columns,
        rows: rows
            .into_iter()
            .map(|((task, n_clean, n_perturbed), cells)| ReportRow {
                task,
                n_clean,
                n_perturbed,
                cells,
            })
            .collect(),
    })
}

impl Report {
    /// One JSON object per row.
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("rows serialize") + "\n")
            .collect()
    }

    /// Aligned columns, each cell as `iqm [low, high]`.
    pub fn to_table(&self) -> String {
        let mut header = vec!["task".to_string(), "(clean,perturbed)".to_string()];
        header.extend(self.columns.iter().cloned());
        let mut lines = vec![header];
        for row in &self.rows {
            let mut line = vec![row.task.to_string(), format!("({},{})", row.n_clean, row.n_perturbed)];
            for c in &self.columns {
                line.push(match row.cells.get(c) {
                    Some(cell) => format!("{:.3} [{:.3}, {:.3}]", cell.iqm, cell.ci_low, cell.ci_high),
                    None => "-".into(),
                });
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in lines {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).expect("writing to a string");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ScriptedExpert, ZeroActor};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn iqm_examples() {
        assert_eq!(iqm(&[0.0, 1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(iqm(&[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(iqm(&[0.7; 9]).unwrap(), 0.7);
        assert_eq!(iqm(&[3.0]).unwrap(), 3.0);
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap(), 3.0);
        assert!(matches!(iqm(&[]), Err(Error::State(_))));
    }

    #[test]
    fn binary_iqm_saturates() {
        // For 100 outcomes the middle fifty are all ones once p ≥ 0.75.
        let v: Vec<f64> = (0..100).map(|i| if i < 80 { 1.0 } else { 0.0 }).collect();
        assert_eq!(iqm(&v).unwrap(), 1.0);
        let v: Vec<f64> = (0..100).map(|i| if i < 50 { 1.0 } else { 0.0 }).collect();
        assert_eq!(iqm(&v).unwrap(), 0.5);
    }

    #[test]
    fn bootstrap_constant_is_degenerate() {
        assert_eq!(bootstrap_ci(&[0.4; 20], 1000, 0.95, 1).unwrap(), (0.4, 0.4));
        assert!(bootstrap_ci(&[], 10, 0.95, 1).is_err());
        assert!(bootstrap_ci(&[1.0], 10, 1.0, 1).is_err());
    }

    #[test]
    fn bootstrap_is_stable_and_brackets() {
        let v: Vec<f64> = (0..100).map(|i| f64::from(i % 5 < 3)).collect();
        let a = bootstrap_ci(&v, 10_000, 0.95, 1).unwrap();
        let b = bootstrap_ci(&v, 10_000, 0.95, 2).unwrap();
        assert_eq!(a, bootstrap_ci(&v, 10_000, 0.95, 1).unwrap());
        assert!((a.0 - b.0).abs() < 0.05 && (a.1 - b.1).abs() < 0.05, "{a:?} vs {b:?}");
        let point = iqm(&v).unwrap();
        assert!(a.0 <= point && point <= a.1);
        assert!(a.0 < a.1);
    }

    proptest! {
        #[test]
        fn iqm_properties(mut values in proptest::collection::vec(-10.0f64..10.0, 1..40), seed in any::<u64>()) {
            let base = iqm(&values).unwrap();
            let mut rng = rng::stream(seed, 0, 0);
            for i in (1..values.len()).rev() {
                let j = rng.random_range(0..=i);
                values.swap(i, j);
            }
            prop_assert_eq!(iqm(&values).unwrap().to_bits(), base.to_bits());
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let (q1, q3) = (sorted[n / 4], sorted[n - 1 - n / 4]);
            prop_assert!(q1 - 1e-12 <= base && base <= q3 + 1e-12);
        }
    }

    #[test]
    fn expert_and_zero_bounds() {
        let spec = TaskSpec::new(TaskKind::PointReach);
        let cfg = EvalConfig {
            n_resamples: 500,
            ..EvalConfig::default()
        };
        let expert = evaluate_policy(&ScriptedExpert, &spec, &cfg).unwrap();
        assert!(expert.successes.iter().all(|s| *s == 1));
        assert_eq!((expert.iqm, expert.ci_low, expert.ci_high), (1.0, 1.0, 1.0));
        assert_eq!(expert.seeds[0], EVAL_SEED_BASE);
        let zero = evaluate_policy(&ZeroActor, &spec, &cfg).unwrap();
        assert_eq!(zero.iqm, 0.0);
        assert_eq!(zero, evaluate_policy(&ZeroActor, &spec, &cfg).unwrap());
        let one = evaluate_policy(&ScriptedExpert, &spec, &EvalConfig { n_episodes: 1, ..cfg }).unwrap();
        assert_eq!(one.iqm, 1.0);
    }

    fn summary(task: TaskKind, mode: Stage2Mode, threshold: ThresholdMode, iqm: f64) -> RunSummary {
        RunSummary {
            task,
            n_clean: 25,
            n_perturbed: 25,
            stage2_mode: mode,
            threshold_mode: threshold,
            seed: 0,
            stage1_steps: 10,
            stage2_steps: 10,
            final_loss: Some(0.1),
            skipped_steps: 0,
            warnings: vec![],
            eval: EvalSummary {
                task,
                successes: vec![1],
                n_episodes: 1,
                success_rate: iqm,
                iqm,
                ci_low: iqm,
                ci_high: iqm,
                seeds: vec![EVAL_SEED_BASE],
            },
        }
    }

    #[test]
    fn report_layout() {
        let t = TaskKind::BlockTransfer;
        let runs: Vec<RunSummary> = Stage2Mode::ALL
            .into_iter()
            .rev()
            .map(|m| summary(t, m, ThresholdMode::Mean, 0.5))
            .collect();
        let report = compare_runs(&runs, false).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.columns, vec!["stage1", "perturbed", "offline", "online"]);
        let table = report.to_table();
        assert!(table.lines().next().unwrap().contains("stage1"));
        assert_eq!(table.lines().count(), 2);
        assert_eq!(report.to_jsonl().lines().count(), 1);
    }

    #[test]
    fn report_key_checks() {
        let a = summary(TaskKind::BlockTransfer, Stage2Mode::Naive, ThresholdMode::Mean, 0.5);
        assert!(matches!(
            compare_runs(&[a.clone(), a.clone()], false),
            Err(Error::Validation(_))
        ));
        let b = summary(TaskKind::PointReach, Stage2Mode::Naive, ThresholdMode::Mean, 0.5);
        assert!(matches!(
            compare_runs(&[a.clone(), b.clone()], false),
            Err(Error::Validation(_))
        ));
        assert_eq!(compare_runs(&[a.clone(), b], true).unwrap().rows.len(), 2);
        let strict = summary(
            TaskKind::BlockTransfer,
            Stage2Mode::Online,
            ThresholdMode::MeanMinusStd,
            0.4,
        );
        let online = summary(TaskKind::BlockTransfer, Stage2Mode::Online, ThresholdMode::Mean, 0.4);
        let report = compare_runs(&[a, strict, online], false).unwrap();
        assert_eq!(report.columns, vec!["perturbed", "online", "online_strict"]);
        assert!(compare_runs(&[], true).is_err());
    }
}
