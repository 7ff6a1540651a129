//! The `simulate`, `cost`, `sweep` and `pipeline` commands.
//!
//! Each command reads a validated [`Scenario`], writes its files into the
//! output directory and returns a [`RunReport`] naming them. Errors map onto
//! the process exit codes: 1 for domain or validation failures, 2 for usage
//! errors such as a missing scenario section.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::cost::{
    break_even, cumulative_series, usage_sweep, CostSeries, Electricity, UsageProfile, UsageSweep,
};
use crate::scenario::{CostSection, OutputFormat, Scenario, ScenarioError, UsageSource, WorkloadSection};
use crate::sched::SchedulingMode;
use crate::sim::{run, utilization, SimError, SimulationTrace, UtilizationReport};
use crate::workload::{generate_workload, WorkloadError};

pub const DEFAULT_MONTHS: u32 = 16;
pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("{0}")]
    Domain(String),
    #[error("writing {path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Command-line values that take precedence over the scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub months: Option<u32>,
    pub mode: Option<SchedulingMode>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub fractions: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunReport {
    pub utilization: Option<UtilizationReport>,
    pub cost: Option<CostSeries>,
    /// Break-even month per offering; `None` when it never breaks even within the horizon.
    pub break_even: BTreeMap<String, Option<u32>>,
    pub sweep: Option<UsageSweep>,
    pub files: Vec<PathBuf>,
}

/// Usage fractions 0.10, 0.15, ..., 0.70.
pub fn default_fractions() -> Vec<f64> {
    (10..=70).step_by(5).map(|p| p as f64 / 100.0).collect()
}

struct Output {
    dir: PathBuf,
    json: bool,
}

impl Output {
    fn new(scenario: &Scenario, overrides: &Overrides) -> Result<Self, CommandError> {
        let dir = overrides
            .out
            .clone()
            .or_else(|| scenario.file.output.directory.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        fs::create_dir_all(&dir).map_err(|e| CommandError::Output {
            path: dir.clone(),
            message: e.to_string(),
        })?;
        Ok(Output {
            dir,
            json: scenario.file.output.formats.contains(&OutputFormat::Json),
        })
    }

    fn write<F>(&self, report: &mut RunReport, name: &str, body: F) -> Result<(), CommandError>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<(), Box<dyn std::error::Error>>,
    {
        let path = self.dir.join(name);
        let fail = |e: &dyn std::fmt::Display| CommandError::Output {
            path: path.clone(),
            message: e.to_string(),
        };
        let file = File::create(&path).map_err(|e| fail(&e))?;
        let mut w = BufWriter::new(file);
        body(&mut w).map_err(|e| fail(&e))?;
        w.flush().map_err(|e| fail(&e))?;
        report.files.push(path);
        Ok(())
    }

    fn finish(&self, mut report: RunReport) -> Result<RunReport, CommandError> {
        if self.json {
            let snapshot = report.clone();
            self.write(&mut report, "report.json", |w| {
                serde_json::to_writer_pretty(&mut *w, &snapshot)?;
                writeln!(w)?;
                Ok(())
            })?;
        }
        Ok(report)
    }
}

fn simulate_trace(
    scenario: &Scenario,
    overrides: &Overrides,
) -> Result<SimulationTrace, CommandError> {
    let workload = scenario
        .workload()
        .ok_or_else(|| CommandError::Usage("scenario has no workload section".into()))?;
    let cluster = scenario
        .cluster
        .clone()
        .ok_or_else(|| CommandError::Usage("scenario has no cluster section".into()))?;
    let jobs = match workload {
        WorkloadSection::Jobs(jobs) => {
            let mut jobs = jobs.clone();
            jobs.sort_by_key(|j| (j.submit_time_min, j.job_id));
            jobs
        }
        WorkloadSection::Generate(params) => {
            let mut params = params.clone();
            if let Some(seed) = overrides.seed {
                params.seed = seed;
            }
            generate_workload(&params)?
        }
    };
    let mode = overrides.mode.unwrap_or(scenario.mode());
    Ok(run(cluster, &jobs, mode, scenario.file.scheduler.horizon_min)?)
}

fn write_simulation(
    out: &Output,
    report: &mut RunReport,
    trace: &SimulationTrace,
    util: &UtilizationReport,
) -> Result<(), CommandError> {
    out.write(report, "trace.csv", |w| Ok(trace.write_csv(w)?))?;
    out.write(report, "utilization.csv", |w| Ok(util.write_csv(w)?))?;
    Ok(())
}

pub fn cmd_simulate(scenario: &Scenario, overrides: &Overrides) -> Result<RunReport, CommandError> {
    let trace = simulate_trace(scenario, overrides)?;
    let util = utilization(&trace)?;
    let out = Output::new(scenario, overrides)?;
    let mut report = RunReport::default();
    write_simulation(&out, &mut report, &trace, &util)?;
    report.utilization = Some(util);
    out.finish(report)
}

fn cost_section(scenario: &Scenario) -> Result<&CostSection, CommandError> {
    scenario
        .cost()
        .ok_or_else(|| CommandError::Usage("scenario has no cost section".into()))
}

fn months(scenario: &Scenario, overrides: &Overrides) -> Result<u32, CommandError> {
    let m = overrides
        .months
        .or_else(|| scenario.cost().and_then(|c| c.months))
        .unwrap_or(DEFAULT_MONTHS);
    if m == 0 {
        return Err(CommandError::Usage("--months must be at least 1".into()));
    }
    Ok(m)
}

fn cost_gpus(scenario: &Scenario) -> Result<u32, CommandError> {
    scenario
        .cost_gpus()
        .ok_or_else(|| CommandError::Domain("cost section needs a GPU count".into()))
}

fn write_costs(
    out: &Output,
    report: &mut RunReport,
    cost: &CostSection,
    usage: &UsageProfile,
    n_months: u32,
) -> Result<(), CommandError> {
    let series = cumulative_series(&cost.onprem, &cost.offerings, usage, n_months);
    out.write(report, "cost_table.csv", |w| Ok(series.write_csv(w)?))?;
    if !cost.offerings.is_empty() {
        for o in &cost.offerings {
            let be = break_even(&series, &o.name).map_err(|e| CommandError::Domain(e.to_string()))?;
            report.break_even.insert(o.name.clone(), be.month());
        }
        let summary = report.break_even.clone();
        out.write(report, "breakeven.json", |w| {
            serde_json::to_writer_pretty(&mut *w, &summary)?;
            writeln!(w)?;
            Ok(())
        })?;
    }
    report.cost = Some(series);
    Ok(())
}

pub fn cmd_cost(scenario: &Scenario, overrides: &Overrides) -> Result<RunReport, CommandError> {
    let cost = cost_section(scenario)?;
    let n_months = months(scenario, overrides)?;
    let hours = match cost.usage {
        UsageSource::Fixed { gpu_hours_per_month } => gpu_hours_per_month,
        UsageSource::Simulated => {
            return Err(CommandError::Usage(
                "usage source is \"simulated\"; run the pipeline command instead".into(),
            ))
        }
    };
    let usage = UsageProfile::from_hours(hours, cost_gpus(scenario)?);
    let out = Output::new(scenario, overrides)?;
    let mut report = RunReport::default();
    write_costs(&out, &mut report, cost, &usage, n_months)?;
    out.finish(report)
}

pub fn cmd_sweep(scenario: &Scenario, overrides: &Overrides) -> Result<RunReport, CommandError> {
    let cost = cost_section(scenario)?;
    let n_months = months(scenario, overrides)?;
    let fractions = overrides.fractions.clone().unwrap_or_else(default_fractions);
    if fractions.is_empty() {
        return Err(CommandError::Usage("at least one usage fraction is required".into()));
    }
    let modeled = matches!(cost.onprem.electricity, Electricity::Modeled { .. });
    let offering = cost
        .offerings
        .iter()
        .find(|o| o.is_usage_priced())
        .or_else(|| cost.offerings.first().filter(|_| modeled))
        .ok_or_else(|| {
            CommandError::Domain(
                "nothing varies with usage: add a per_gpu_hour offering or modeled electricity".into(),
            )
        })?;
    let sweep = usage_sweep(&cost.onprem, offering, &fractions, cost_gpus(scenario)?, n_months)
        .map_err(|e| CommandError::Domain(e.to_string()))?;
    let out = Output::new(scenario, overrides)?;
    let mut report = RunReport::default();
    out.write(&mut report, "sweep.csv", |w| Ok(sweep.write_csv(w)?))?;
    out.write(&mut report, "sweep_band.csv", |w| Ok(sweep.write_band_csv(w)?))?;
    report.sweep = Some(sweep);
    out.finish(report)
}

/// Simulates the workload, then prices the measured monthly GPU usage.
pub fn cmd_pipeline(scenario: &Scenario, overrides: &Overrides) -> Result<RunReport, CommandError> {
    let cost = cost_section(scenario)?;
    if cost.usage != UsageSource::Simulated {
        return Err(CommandError::Usage(
            "pipeline needs a cost usage source of \"simulated\"".into(),
        ));
    }
    let n_months = months(scenario, overrides)?;
    let trace = simulate_trace(scenario, overrides)?;
    let util = utilization(&trace)?;
    let usage = UsageProfile::from_hours(util.mean_monthly_usage_hours, cost_gpus(scenario)?);

    let out = Output::new(scenario, overrides)?;
    let mut report = RunReport::default();
    write_simulation(&out, &mut report, &trace, &util)?;
    write_costs(&out, &mut report, cost, &usage, n_months)?;
    report.utilization = Some(util);
    out.finish(report)
}

/// Parses `0.1,0.2,0.4`. An empty string yields an empty list.
pub fn parse_fractions(text: &str) -> Result<Vec<f64>, CommandError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|f| (0.0..=1.0).contains(f))
                .ok_or_else(|| CommandError::Usage(format!("invalid usage fraction {s:?}")))
        })
        .collect()
}

/// Loads the scenario at `path` and runs `command` on it.
pub fn run_command(
    command: &str,
    path: &Path,
    overrides: &Overrides,
) -> Result<RunReport, CommandError> {
    let scenario = crate::scenario::load_scenario(path)?;
    match command {
        "simulate" => cmd_simulate(&scenario, overrides),
        "cost" => cmd_cost(&scenario, overrides),
        "sweep" => cmd_sweep(&scenario, overrides),
        "pipeline" => cmd_pipeline(&scenario, overrides),
        other => Err(CommandError::Usage(format!("unknown command {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_thirteen_points() {
        let f = default_fractions();
        assert_eq!(f.len(), 13);
        assert_eq!(f[0], 0.10);
        assert_eq!(f[2], 0.20);
        assert_eq!(f[6], 0.40);
        assert_eq!(f[12], 0.70);
    }

    #[test]
    fn fraction_parsing() {
        assert_eq!(parse_fractions("0.1, 0.25").unwrap(), [0.1, 0.25]);
        assert!(parse_fractions("").unwrap().is_empty());
        assert!(parse_fractions("1.5").is_err());
        assert!(parse_fractions("abc").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CommandError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CommandError::Domain("x".into()).exit_code(), 1);
    }
}
