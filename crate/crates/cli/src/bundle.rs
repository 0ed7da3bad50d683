//! Result bundles: the files a run leaves on disk.
//!
//! A bundle directory holds
//!
//! * `config.json` — the fully resolved config;
//! * `trajectory_<controller>_<run>.csv` — columns `k, t, x0.., u0..,
//!   corrections, inversions, grad_norm_final`. Row `k = 0` carries the cold
//!   start (its iterations and inversions); the last row is the final state
//!   with empty input and report cells;
//! * `reports_<controller>_<run>.csv` — the full per-step solver reports;
//! * `summary.json` — totals and distribution summaries, recomputable from
//!   the trajectory CSVs;
//! * `bound_report.json` — constant estimates and the bound report, when
//!   diagnostics were run.
//!
//! Floats are written with Rust's shortest round-trip formatting, so equal
//! runs give byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pcmpc_core::closed_loop::{sup_norm_difference, ControllerKind, Summary, TrajectoryLog};
use pcmpc_core::diagnostics::{BoundReport, ConstantEstimates, OrderStudy};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GENERATOR_DESCRIPTION};
use crate::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BOUND_REPORT_FILE: &str = "bound_report.json";

pub fn trajectory_file(kind: ControllerKind, run: usize) -> String {
    format!("trajectory_{}_{run:03}.csv", kind.name())
}

pub fn reports_file(kind: ControllerKind, run: usize) -> String {
    format!("reports_{}_{run:03}.csv", kind.name())
}

/// Write `contents` to `dir/name`.
pub fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    write_file(dir, name, text)
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    // Writing to memory cannot fail.
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(row).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Trajectory CSV contents for one log.
pub fn trajectory_csv(log: &TrajectoryLog) -> Vec<u8> {
    let n = log.states[0].len();
    let p = log.inputs.first().map_or(0, |u| u.len());
    let mut header = vec!["k".to_string(), "t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..p).map(|i| format!("u{i}")));
    header.extend(["corrections", "inversions", "grad_norm_final"].map(String::from));

    let rows: Vec<Vec<String>> = log
        .states
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let mut row = vec![k.to_string(), fmt(k as f64 * log.sampling_time)];
            row.extend(x.iter().map(|v| fmt(*v)));
            match (log.inputs.get(k), log.reports.get(k)) {
                (Some(u), Some(r)) => {
                    row.extend(u.iter().map(|v| fmt(*v)));
                    row.push(r.corrections_used.to_string());
                    row.push(r.hessian_inversions.to_string());
                    row.push(fmt(r.grad_norm_final));
                }
                _ => row.extend(std::iter::repeat_n(String::new(), p + 3)),
            }
            row
        })
        .collect();
    csv_bytes(&header, &rows)
}

/// Per-step report CSV contents for one log.
pub fn reports_csv(log: &TrajectoryLog) -> Vec<u8> {
    let mut header: Vec<String> = [
        "k",
        "corrections",
        "inversions",
        "grad_norm_initial",
        "grad_norm_after_prediction",
        "grad_norm_final",
        "converged",
    ]
    .map(String::from)
    .to_vec();
    let eigs = log.min_abs_hessian_eigenvalue.as_ref();
    if eigs.is_some() {
        header.push("min_abs_hessian_eigenvalue".into());
    }
    let rows: Vec<Vec<String>> = log
        .reports
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let mut row = vec![
                k.to_string(),
                r.corrections_used.to_string(),
                r.hessian_inversions.to_string(),
                fmt(r.grad_norm_initial),
                fmt(r.grad_norm_after_prediction),
                fmt(r.grad_norm_final),
                r.converged.to_string(),
            ];
            if let Some(e) = eigs {
                row.push(e.get(k).map_or(String::new(), |v| fmt(*v)));
            }
            row
        })
        .collect();
    csv_bytes(&header, &rows)
}

/// Per-run figures in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub x0: Vec<f64>,
    /// Online inversions (steps `k >= 1`).
    pub total_inversions: u64,
    pub cold_start_inversions: usize,
    pub steps: usize,
    pub mean_corrections: f64,
    pub max_corrections: usize,
    pub final_state_norm: f64,
    pub accounting_consistent: bool,
    /// Set when the run aborted; the CSVs then hold the partial log.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RunSummary {
    pub fn of(run: usize, log: &TrajectoryLog, failure: Option<String>) -> Self {
        let online = log.online_reports();
        let corrections: Vec<usize> = online.iter().map(|r| r.corrections_used).collect();
        Self {
            run,
            x0: log.states[0].iter().copied().collect(),
            total_inversions: online.iter().map(|r| r.hessian_inversions as u64).sum(),
            cold_start_inversions: log.reports.first().map_or(0, |r| r.hessian_inversions),
            steps: log.inputs.len(),
            mean_corrections: mean(corrections.iter().map(|c| *c as f64)),
            max_corrections: corrections.iter().copied().max().unwrap_or(0),
            final_state_norm: log.final_state().norm(),
            accounting_consistent: log.accounting_consistent(),
            failure,
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Per-controller aggregate in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub controller: ControllerKind,
    pub runs: Vec<RunSummary>,
    pub failures: usize,
    /// Over runs: online inversions.
    pub total_inversions: Option<Summary>,
    /// Over all online steps of all runs.
    pub mean_corrections_per_step: f64,
    pub mean_inversions_per_step: f64,
    /// Online steps by inversions used: `inversions -> steps`.
    pub inversion_histogram: BTreeMap<usize, usize>,
    pub final_state_norm: Option<Summary>,
}

impl ControllerSummary {
    pub fn of(controller: ControllerKind, runs: Vec<RunSummary>, logs: &[&TrajectoryLog]) -> Self {
        let mut histogram = BTreeMap::new();
        let (mut steps, mut corrections, mut inversions) = (0usize, 0usize, 0usize);
        for log in logs {
            for r in log.online_reports() {
                *histogram.entry(r.hessian_inversions).or_insert(0) += 1;
                steps += 1;
                corrections += r.corrections_used;
                inversions += r.hessian_inversions;
            }
        }
        let per_step = |total: usize| if steps == 0 { 0.0 } else { total as f64 / steps as f64 };
        let ok: Vec<&RunSummary> = runs.iter().filter(|r| r.failure.is_none()).collect();
        Self {
            controller,
            failures: runs.len() - ok.len(),
            total_inversions: Summary::of(&ok.iter().map(|r| r.total_inversions as f64).collect::<Vec<_>>()),
            mean_corrections_per_step: per_step(corrections),
            mean_inversions_per_step: per_step(inversions),
            inversion_histogram: histogram,
            final_state_norm: Summary::of(&ok.iter().map(|r| r.final_state_norm).collect::<Vec<_>>()),
            runs,
        }
    }
}

/// Paired comparison of the two controllers run from the same initial states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Per pair of completed runs: `max_k ||x_pc(k) - x_n(k)||_inf`.
    pub sup_norm_difference: Vec<f64>,
    pub max_sup_norm_difference: f64,
    /// `mean(PC totals) / mean(N totals)`.
    pub inversion_ratio: Option<f64>,
    /// `max(PC totals) < min(N totals)`.
    pub pc_max_below_n_min: Option<bool>,
}

impl Comparison {
    pub fn of(
        pc: &[&TrajectoryLog],
        n: &[&TrajectoryLog],
        pc_sum: &ControllerSummary,
        n_sum: &ControllerSummary,
    ) -> Self {
        let diffs: Vec<f64> = pc
            .iter()
            .zip(n)
            .map(|(a, b)| sup_norm_difference(&a.states, &b.states))
            .collect();
        let (ps, ns) = (pc_sum.total_inversions, n_sum.total_inversions);
        Self {
            max_sup_norm_difference: diffs.iter().copied().fold(0.0, f64::max),
            sup_norm_difference: diffs,
            inversion_ratio: ps.zip(ns).map(|(p, n)| p.mean / n.mean),
            pc_max_below_n_min: ps.zip(ns).map(|(p, n)| p.max < n.min),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub controllers: Vec<ControllerSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    /// How batch initial states were generated.
    pub generator: String,
}

/// Constant estimates, the bound report and (when available) the
/// sampling-interval study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub estimates: ConstantEstimates,
    pub bounds: BoundReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_study: Option<OrderStudy>,
}

/// Outcome of one simulation as stored in a bundle.
pub struct RunRecord {
    /// Index into the run's initial states.
    pub run: usize,
    /// `None` when the run aborted before logging anything.
    pub log: Option<TrajectoryLog>,
    pub failure: Option<String>,
}

/// Everything one `run` produced, grouped by controller.
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub records: Vec<(ControllerKind, Vec<RunRecord>)>,
}

impl RunOutput {
    /// Logs of runs that completed, by run index.
    pub fn complete_logs(&self, kind: ControllerKind) -> BTreeMap<usize, &TrajectoryLog> {
        self.records
            .iter()
            .filter(|(k, _)| *k == kind)
            .flat_map(|(_, rs)| rs.iter())
            .filter(|r| r.failure.is_none())
            .filter_map(|r| r.log.as_ref().map(|l| (r.run, l)))
            .collect()
    }

    pub fn failures(&self) -> Vec<String> {
        self.records
            .iter()
            .flat_map(|(k, rs)| {
                rs.iter()
                    .filter_map(move |r| r.failure.as_ref().map(|f| format!("{} run {}: {f}", k.name(), r.run)))
            })
            .collect()
    }

    pub fn summary(&self) -> BundleSummary {
        let controllers: Vec<ControllerSummary> = self
            .records
            .iter()
            .map(|(kind, records)| {
                let runs = records
                    .iter()
                    .filter_map(|r| r.log.as_ref().map(|l| RunSummary::of(r.run, l, r.failure.clone())))
                    .collect();
                let logs: Vec<&TrajectoryLog> = records.iter().filter_map(|r| r.log.as_ref()).collect();
                let lost = records.iter().filter(|r| r.log.is_none()).count();
                let mut summary = ControllerSummary::of(*kind, runs, &logs);
                summary.failures += lost;
                summary
            })
            .collect();
        let find = |k| controllers.iter().find(|c| c.controller == k);
        let comparison = match (find(ControllerKind::PcMpc), find(ControllerKind::NMpc)) {
            (Some(pc), Some(n)) => {
                let (pc_logs, n_logs) = (
                    self.complete_logs(ControllerKind::PcMpc),
                    self.complete_logs(ControllerKind::NMpc),
                );
                let (a, b): (Vec<_>, Vec<_>) = pc_logs
                    .iter()
                    .filter_map(|(i, l)| n_logs.get(i).map(|m| (*l, *m)))
                    .unzip();
                Some(Comparison::of(&a, &b, pc, n))
            }
            _ => None,
        };
        BundleSummary {
            controllers,
            comparison,
            generator: GENERATOR_DESCRIPTION.to_string(),
        }
    }

    /// Write the config echo, CSVs and summary into `dir`.
    pub fn write(&self, dir: &Path) -> Result<BundleSummary, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_json(dir, CONFIG_FILE, &self.config)?;
        for (kind, records) in &self.records {
            for r in records {
                if let Some(log) = &r.log {
                    write_file(dir, &trajectory_file(*kind, r.run), trajectory_csv(log))?;
                    write_file(dir, &reports_file(*kind, r.run), reports_csv(log))?;
                }
            }
        }
        let summary = self.summary();
        write_json(dir, SUMMARY_FILE, &summary)?;
        Ok(summary)
    }
}

/// One parsed trajectory CSV, for consumers that only have the files.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub states: Vec<Vec<f64>>,
    /// `(corrections, inversions)` per row that has a report.
    pub work: Vec<(usize, usize)>,
}

impl TrajectoryTable {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            other => bad(format!("{other:?}")),
        })?;
        let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| bad(format!("missing column {name}")))
        };
        let (corr, inv) = (col("corrections")?, col("inversions")?);
        let xs: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with('x')).collect();
        let mut table = Self {
            states: Vec::new(),
            work: Vec::new(),
        };
        for rec in reader.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(e.to_string()));
            table.states.push(xs.iter().map(|&i| num(i)).collect::<Result<_, _>>()?);
            if !rec[inv].is_empty() {
                let int = |i: usize| rec[i].parse::<usize>().map_err(|e| bad(e.to_string()));
                table.work.push((int(corr)?, int(inv)?));
            }
        }
        Ok(table)
    }

    /// Online inversions (rows `k >= 1`).
    pub fn online_inversions(&self) -> u64 {
        self.work.iter().skip(1).map(|w| w.1 as u64).sum()
    }
}
