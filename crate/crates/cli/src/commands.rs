//! The three subcommands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use pcmpc_core::closed_loop::{run_batch, simulate, ControllerKind, SimulationSpec, TrajectoryLog};
use pcmpc_core::diagnostics::{
    check_bounds, estimate_constants, prediction_order_study, EstimateConfig, ReferenceConfig,
};

use crate::bundle::{
    fmt, trajectory_csv, trajectory_file, write_file, write_json, BundleSummary, DiagnosticsReport, RunOutput,
    RunRecord, BOUND_REPORT_FILE,
};
use crate::config::{BatchSection, ExperimentConfig, ModelKind};
use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "PCMPC_OUT";
pub const DEFAULT_OUT: &str = "pcmpc-out";

/// Output directory: explicit flag, then the config, then `PCMPC_OUT`, then
/// `./pcmpc-out`.
pub fn output_dir(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Simulate every (controller, initial state) pair of a resolved config.
pub fn execute(config: &ExperimentConfig, jobs: Option<usize>) -> Result<RunOutput, CliError> {
    let records = config
        .specs()?
        .into_iter()
        .map(|(kind, specs)| {
            let batch = run_batch(&specs, jobs);
            let records = batch
                .runs
                .into_iter()
                .enumerate()
                .map(|(run, r)| match r {
                    Ok(log) => RunRecord {
                        run,
                        log: Some(log),
                        failure: None,
                    },
                    Err(e) => RunRecord {
                        run,
                        failure: Some(e.to_string()),
                        log: e.partial.map(|b| *b),
                    },
                })
                .collect();
            (kind, records)
        })
        .collect();
    Ok(RunOutput {
        config: config.clone(),
        records,
    })
}

/// Constant estimates and bound checks for one prediction-correction log,
/// plus the sampling-interval study when the config allows it.
pub fn diagnostics_for(config: &ExperimentConfig, log: &TrajectoryLog) -> Result<DiagnosticsReport, CliError> {
    let problem = config.build_problem()?;
    let estimates = estimate_constants(log, &problem, EstimateConfig::default())?;
    let bounds = check_bounds(&estimates, log, &problem, ReferenceConfig::default())?;
    let order_study = match config.build_half_plant()? {
        Some(half) => Some(prediction_order_study(
            &problem,
            log,
            half.as_ref(),
            ReferenceConfig::default(),
        )?),
        None => None,
    };
    Ok(DiagnosticsReport {
        estimates,
        bounds,
        order_study,
    })
}

/// Result of `pcmpc run`.
pub struct RunResult {
    pub dir: PathBuf,
    pub output: RunOutput,
    pub summary: BundleSummary,
    pub diagnostics: Option<DiagnosticsReport>,
}

/// Run a config and write its bundle. Single-state runs with a
/// prediction-correction controller also get a bound report. Failed runs
/// still leave their partial outputs on disk before the error is returned.
pub fn run(config_path: &Path, out: Option<&Path>, jobs: Option<usize>) -> Result<RunResult, CliError> {
    let config = ExperimentConfig::load(config_path)?.resolve()?;
    let dir = output_dir(out, &config);
    run_config(&config, &dir, jobs)
}

pub fn run_config(config: &ExperimentConfig, dir: &Path, jobs: Option<usize>) -> Result<RunResult, CliError> {
    let output = execute(config, jobs)?;
    let summary = output.write(dir)?;
    let failures = output.failures();
    if !failures.is_empty() {
        return Err(CliError::Solver(format!(
            "{} run(s) failed, partial outputs in {}: {}",
            failures.len(),
            dir.display(),
            failures.join("; ")
        )));
    }
    let diagnostics = match output.complete_logs(ControllerKind::PcMpc).get(&0) {
        Some(log) if !config.is_batch() => {
            let report = diagnostics_for(config, log)?;
            write_json(dir, BOUND_REPORT_FILE, &report)?;
            Some(report)
        }
        _ => None,
    };
    Ok(RunResult {
        dir: dir.to_path_buf(),
        output,
        summary,
        diagnostics,
    })
}

/// Re-simulate the first prediction-correction run of `config`, check that
/// it reproduces the trajectory stored in `logdir`, then estimate the
/// constants and write `bound_report.json` into `logdir`.
pub fn diagnose(config_path: &Path, logdir: &Path) -> Result<DiagnosticsReport, CliError> {
    let config = ExperimentConfig::load(config_path)?.resolve()?;
    diagnose_config(&config, logdir)
}

pub fn diagnose_config(config: &ExperimentConfig, logdir: &Path) -> Result<DiagnosticsReport, CliError> {
    let stored_path = logdir.join(trajectory_file(ControllerKind::PcMpc, 0));
    let stored = std::fs::read(&stored_path).map_err(|e| CliError::io(&stored_path, e))?;

    let problem = Arc::new(config.build_problem()?);
    let x0 = config
        .initial_states()
        .into_iter()
        .next()
        .ok_or_else(|| CliError::Config("config has no initial state".into()))?;
    let mut spec = SimulationSpec::new(
        problem.clone(),
        x0,
        config.run.steps.unwrap_or(0),
        ControllerKind::PcMpc,
        config.solver_config()?,
        config.ts(),
    );
    spec.true_plant = config.build_true_plant(&problem)?;
    spec.record_eigenvalues = true;
    let log = simulate(&spec).map_err(|e| CliError::Solver(e.to_string()))?;
    if trajectory_csv(&log) != stored {
        return Err(CliError::Config(format!(
            "{} was not produced by this config",
            stored_path.display()
        )));
    }
    let report = diagnostics_for(config, &log)?;
    write_json(logdir, BOUND_REPORT_FILE, &report)?;
    Ok(report)
}

pub const FIGURES: [&str; 5] = ["fig2", "fig3", "fig4", "fig5", "fig6"];

/// Canned config reproducing one figure of the benchmark study.
pub fn figure_config(id: &str) -> Result<ExperimentConfig, CliError> {
    let mut config = match id {
        "fig2" | "fig3" | "fig4" => ExperimentConfig::defaults_for(ModelKind::Friction),
        "fig5" | "fig6" => ExperimentConfig::defaults_for(ModelKind::Hicks),
        other => {
            return Err(CliError::Config(format!(
                "unknown figure `{other}` (expected one of {})",
                FIGURES.join(", ")
            )))
        }
    };
    match id {
        "fig2" => config.solver.epsilon = Some(1e-2),
        "fig5" => {
            config.run.batch = Some(BatchSection {
                count: 1,
                rng_seed: 0,
                perturbation: 0.2,
            })
        }
        _ => {}
    }
    config.solver.epsilon_cold = config.solver.epsilon;
    config.resolve()
}

/// Run a canned figure config and add its plot-ready CSVs to the bundle.
pub fn paper(id: &str, out: Option<&Path>, jobs: Option<usize>) -> Result<RunResult, CliError> {
    let config = figure_config(id)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
            .join(id),
    };
    let result = run_config(&config, &dir, jobs)?;
    let pc = result.output.complete_logs(ControllerKind::PcMpc);
    let n = result.output.complete_logs(ControllerKind::NMpc);
    match id {
        "fig2" | "fig4" | "fig5" => {
            write_file(&dir, &format!("{id}.csv"), paired_series_csv(pc[&0], n[&0]))?;
        }
        "fig3" => {
            write_file(&dir, "fig3_inversions.csv", inversion_histogram_csv(pc[&0], n[&0]))?;
            write_file(&dir, "fig3_error.csv", error_histogram_csv(pc[&0], n[&0]))?;
        }
        "fig6" => {
            write_file(&dir, "fig6.csv", boxplot_csv(&result.summary))?;
        }
        _ => unreachable!("validated by figure_config"),
    }
    Ok(result)
}

fn csv_from(header: Vec<String>, rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory csv");
    for r in rows {
        w.write_record(&r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

/// Time series of input and state for both controllers side by side.
pub fn paired_series_csv(pc: &TrajectoryLog, n: &TrajectoryLog) -> Vec<u8> {
    let nx = pc.states[0].len();
    let nu = pc.inputs.first().map_or(0, |u| u.len());
    let mut header = vec!["k".to_string(), "t".to_string()];
    for name in ["pcmpc", "nmpc"] {
        header.extend((0..nu).map(|i| format!("{name}_u{i}")));
        header.extend((0..nx).map(|i| format!("{name}_x{i}")));
    }
    let rows = (0..pc.states.len().min(n.states.len()))
        .map(|k| {
            let mut row = vec![k.to_string(), fmt(k as f64 * pc.sampling_time)];
            for log in [pc, n] {
                match log.inputs.get(k) {
                    Some(u) => row.extend(u.iter().map(|v| fmt(*v))),
                    None => row.extend(std::iter::repeat_n(String::new(), nu)),
                }
                row.extend(log.states[k].iter().map(|v| fmt(*v)));
            }
            row
        })
        .collect();
    csv_from(header, rows)
}

/// Online steps by inversions used, for both controllers.
pub fn inversion_histogram_csv(pc: &TrajectoryLog, n: &TrajectoryLog) -> Vec<u8> {
    let count = |log: &TrajectoryLog, v: usize| {
        log.online_reports()
            .iter()
            .filter(|r| r.hessian_inversions == v)
            .count()
    };
    let max = [pc, n]
        .iter()
        .flat_map(|l| l.online_reports().iter().map(|r| r.hessian_inversions))
        .max()
        .unwrap_or(0);
    let rows = (0..=max)
        .map(|v| vec![v.to_string(), count(pc, v).to_string(), count(n, v).to_string()])
        .collect();
    csv_from(vec!["inversions".into(), "pcmpc".into(), "nmpc".into()], rows)
}

/// Online steps by decade of the final gradient norm, for both controllers.
pub fn error_histogram_csv(pc: &TrajectoryLog, n: &TrajectoryLog) -> Vec<u8> {
    let decade = |v: f64| if v > 0.0 { v.log10().floor() as i32 } else { i32::MIN };
    let decades = |log: &TrajectoryLog| {
        log.online_reports()
            .iter()
            .map(|r| decade(r.grad_norm_final))
            .collect::<Vec<_>>()
    };
    let (a, b) = (decades(pc), decades(n));
    let finite = a.iter().chain(&b).copied().filter(|d| *d != i32::MIN);
    let (lo, hi) = finite.fold((i32::MAX, i32::MIN), |(lo, hi), d| (lo.min(d), hi.max(d)));
    let mut rows = Vec::new();
    if a.iter().chain(&b).any(|d| *d == i32::MIN) {
        let zeros = |v: &[i32]| v.iter().filter(|d| **d == i32::MIN).count().to_string();
        rows.push(vec!["0".into(), "0".into(), zeros(&a), zeros(&b)]);
    }
    if lo <= hi {
        for d in lo..=hi {
            let c = |v: &[i32]| v.iter().filter(|x| **x == d).count().to_string();
            rows.push(vec![fmt(10f64.powi(d)), fmt(10f64.powi(d + 1)), c(&a), c(&b)]);
        }
    }
    csv_from(
        vec![
            "grad_norm_lo".into(),
            "grad_norm_hi".into(),
            "pcmpc".into(),
            "nmpc".into(),
        ],
        rows,
    )
}

/// Five-number summaries of per-run online inversions.
pub fn boxplot_csv(summary: &BundleSummary) -> Vec<u8> {
    let rows = summary
        .controllers
        .iter()
        .filter_map(|c| {
            c.total_inversions.map(|s| {
                vec![
                    c.controller.name().to_string(),
                    s.count.to_string(),
                    fmt(s.min),
                    fmt(s.q1),
                    fmt(s.median),
                    fmt(s.q3),
                    fmt(s.max),
                    fmt(s.mean),
                ]
            })
        })
        .collect();
    csv_from(
        ["controller", "count", "min", "q1", "median", "q3", "max", "mean"]
            .map(String::from)
            .to_vec(),
        rows,
    )
}
