//! Event-driven simulation of the scheduler and GPU-hour accounting.
//!
//! Time is integer minutes. At each distinct timestamp the engine processes
//! every completion, then every submission (each kind in ascending job id),
//! then runs exactly one scheduling pass.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::cluster::ValidatedCluster;
use crate::sched::{DenyReason, JobRequest, PolicyDecision, QueueState, SchedError, SchedulingMode};

/// Minutes in one accounting month (730 h).
pub const MINUTES_PER_MONTH: u64 = 43_800;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Submit,
    Start,
    Complete,
    Deny,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Submit => "SUBMIT",
            EventKind::Start => "START",
            EventKind::Complete => "COMPLETE",
            EventKind::Deny => "DENY",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub time_min: u64,
    pub kind: EventKind,
    pub job_id: u64,
    pub node_id: Option<String>,
    /// GPU type a START took its GPUs from. Not part of the CSV export.
    #[serde(skip)]
    pub gpu_type: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub events: Vec<TraceEvent>,
    /// Start of the observation window.
    pub start_min: u64,
    /// End of the observation window.
    pub horizon_min: u64,
    pub jobs: BTreeMap<u64, JobRequest>,
    pub denials: BTreeMap<u64, DenyReason>,
    pub cluster: Arc<ValidatedCluster>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

// Pending engine events. The derived order is the processing order:
// time, then completions before submissions, then job id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    Complete,
    Submit,
}

/// Runs `jobs` through the scheduler.
///
/// With `horizon_min = None` the simulation runs until every admitted job has
/// completed and the horizon is the time of the last event. Otherwise events
/// after the horizon are dropped and jobs still running are left open in the trace.
pub fn run(
    cluster: Arc<ValidatedCluster>,
    jobs: &[JobRequest],
    mode: SchedulingMode,
    horizon_min: Option<u64>,
) -> Result<SimulationTrace, SimError> {
    let mut state = QueueState::new(cluster.clone());
    let mut queue = BinaryHeap::new();
    let mut by_id = BTreeMap::new();
    for job in jobs {
        if by_id.insert(job.job_id, job.clone()).is_some() {
            return Err(SchedError::DuplicateJobId(job.job_id).into());
        }
        queue.push(Reverse((job.submit_time_min, Pending::Submit, job.job_id)));
    }

    let mut events = Vec::new();
    let mut denials = BTreeMap::new();
    let mut last_time = 0;

    while let Some(&Reverse((now, _, _))) = queue.peek() {
        if horizon_min.is_some_and(|h| now > h) {
            break;
        }
        last_time = now;
        while let Some(&Reverse((t, kind, job_id))) = queue.peek() {
            if t != now {
                break;
            }
            queue.pop();
            match kind {
                Pending::Complete => {
                    let done = state.release(job_id, now)?;
                    events.push(TraceEvent {
                        time_min: now,
                        kind: EventKind::Complete,
                        job_id,
                        node_id: Some(done.placement.node_id),
                        gpu_type: None,
                    });
                }
                Pending::Submit => {
                    let job = by_id[&job_id].clone();
                    events.push(TraceEvent {
                        time_min: now,
                        kind: EventKind::Submit,
                        job_id,
                        node_id: None,
                        gpu_type: None,
                    });
                    match state.authorize(&job)? {
                        PolicyDecision::Allow => state.submit(job)?,
                        PolicyDecision::Deny(reason) => {
                            denials.insert(job_id, reason);
                            events.push(TraceEvent {
                                time_min: now,
                                kind: EventKind::Deny,
                                job_id,
                                node_id: None,
                                gpu_type: None,
                            });
                        }
                    }
                }
            }
        }
        for a in state.schedule_step(now, mode) {
            let duration = by_id[&a.job_id].duration_min;
            queue.push(Reverse((now + duration, Pending::Complete, a.job_id)));
            events.push(TraceEvent {
                time_min: now,
                kind: EventKind::Start,
                job_id: a.job_id,
                node_id: Some(a.placement.node_id),
                gpu_type: a.placement.gpu_type,
            });
        }
    }

    Ok(SimulationTrace {
        events,
        start_min: 0,
        horizon_min: horizon_min.unwrap_or(last_time),
        jobs: by_id,
        denials,
        cluster,
    })
}

impl SimulationTrace {
    /// Writes the trace as CSV with columns `time_min,kind,job_id,node_id`.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time_min", "kind", "job_id", "node_id"])?;
        for e in &self.events {
            w.write_record([
                e.time_min.to_string(),
                e.kind.as_str().to_string(),
                e.job_id.to_string(),
                e.node_id.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Start/complete intervals of every started job, clipped to the window.
    ///
    /// Returns `(job, node_id, start, end)`; `end` is the horizon for jobs still running.
    pub fn busy_segments(&self) -> Result<Vec<(&JobRequest, &str, u64, u64)>, SimError> {
        let bad = |msg: String| SimError::MalformedTrace(msg);
        let mut submitted = BTreeMap::new();
        let mut started: BTreeMap<u64, (&str, u64)> = BTreeMap::new();
        let mut segments = Vec::new();
        let mut prev_time = 0;
        for e in &self.events {
            if e.time_min < prev_time {
                return Err(bad(format!("events out of order at job {}", e.job_id)));
            }
            prev_time = e.time_min;
            let job = self
                .jobs
                .get(&e.job_id)
                .ok_or_else(|| bad(format!("unknown job {}", e.job_id)))?;
            match e.kind {
                EventKind::Submit => {
                    submitted.insert(e.job_id, e.time_min);
                }
                EventKind::Deny => {
                    if !submitted.contains_key(&e.job_id) {
                        return Err(bad(format!("job {} denied before submit", e.job_id)));
                    }
                }
                EventKind::Start => {
                    if !submitted.contains_key(&e.job_id) {
                        return Err(bad(format!("job {} started before submit", e.job_id)));
                    }
                    let node = e
                        .node_id
                        .as_deref()
                        .ok_or_else(|| bad(format!("job {} started without a node", e.job_id)))?;
                    if started.insert(e.job_id, (node, e.time_min)).is_some() {
                        return Err(bad(format!("job {} started twice", e.job_id)));
                    }
                }
                EventKind::Complete => {
                    let (node, start) = started
                        .remove(&e.job_id)
                        .ok_or_else(|| bad(format!("job {} completed before start", e.job_id)))?;
                    if e.time_min - start != job.duration_min {
                        return Err(bad(format!("job {} ran for the wrong duration", e.job_id)));
                    }
                    segments.push((job, node, start, e.time_min));
                }
            }
        }
        for (id, (node, start)) in started {
            segments.push((&self.jobs[&id], node, start, self.horizon_min.max(start)));
        }
        let window = (self.start_min, self.horizon_min);
        Ok(segments
            .into_iter()
            .map(|(job, node, s, e)| {
                let s = s.clamp(window.0, window.1);
                let e = e.clamp(window.0, window.1);
                (job, node, s, e)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaitStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilizationReport {
    pub gpu_hours: f64,
    pub total_gpu_capacity_hours: f64,
    pub grade_of_operation: f64,
    pub mean_monthly_usage_hours: f64,
    pub per_node_busy_fraction: BTreeMap<String, f64>,
    /// `None` when no job started.
    pub wait_time_stats: Option<WaitStats>,
}

/// GPU-hour accounting over the trace window, using 730-hour months.
pub fn utilization(trace: &SimulationTrace) -> Result<UtilizationReport, SimError> {
    utilization_with_month(trace, MINUTES_PER_MONTH)
}

/// Like [`utilization`], with an explicit month length for the monthly mean.
pub fn utilization_with_month(
    trace: &SimulationTrace,
    month_min: u64,
) -> Result<UtilizationReport, SimError> {
    let segments = trace.busy_segments()?;
    let window_min = trace.horizon_min.saturating_sub(trace.start_min);
    let window_h = window_min as f64 / 60.0;

    let mut node_gpu_min: BTreeMap<&str, u64> = BTreeMap::new();
    let mut gpu_min = 0u64;
    for (job, node, s, e) in &segments {
        let used = job.gpu_count as u64 * (e - s);
        gpu_min += used;
        *node_gpu_min.entry(node).or_insert(0) += used;
    }
    let gpu_hours = gpu_min as f64 / 60.0;
    let capacity = trace.cluster.total_gpus() as f64 * window_h;
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };

    let per_node_busy_fraction = trace
        .cluster
        .nodes()
        .iter()
        .map(|n| {
            let used = node_gpu_min.get(n.node_id.as_str()).copied().unwrap_or(0) as f64 / 60.0;
            (n.node_id.clone(), ratio(used, n.total_gpus() as f64 * window_h))
        })
        .collect();

    let mut submit = BTreeMap::new();
    let mut waits = Vec::new();
    for e in &trace.events {
        match e.kind {
            EventKind::Submit => {
                submit.insert(e.job_id, e.time_min);
            }
            EventKind::Start => waits.push((e.time_min - submit[&e.job_id]) as f64),
            _ => {}
        }
    }
    let wait_time_stats = (!waits.is_empty()).then(|| WaitStats {
        min: waits.iter().copied().fold(f64::INFINITY, f64::min),
        mean: waits.iter().sum::<f64>() / waits.len() as f64,
        max: waits.iter().copied().fold(0.0, f64::max),
    });

    Ok(UtilizationReport {
        gpu_hours,
        total_gpu_capacity_hours: capacity,
        grade_of_operation: ratio(gpu_hours, capacity),
        mean_monthly_usage_hours: ratio(gpu_hours, window_min as f64 / month_min as f64),
        per_node_busy_fraction,
        wait_time_stats,
    })
}

impl UtilizationReport {
    /// One header row and one data row; per-node fractions become `busy_fraction_<node>` columns.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut header = vec![
            "gpu_hours".to_string(),
            "total_gpu_capacity_hours".into(),
            "grade_of_operation".into(),
            "mean_monthly_usage_hours".into(),
            "wait_min".into(),
            "wait_mean".into(),
            "wait_max".into(),
        ];
        let mut row = vec![
            format!("{:.4}", self.gpu_hours),
            format!("{:.4}", self.total_gpu_capacity_hours),
            format!("{:.6}", self.grade_of_operation),
            format!("{:.4}", self.mean_monthly_usage_hours),
        ];
        match self.wait_time_stats {
            Some(w) => row.extend([
                format!("{:.2}", w.min),
                format!("{:.2}", w.mean),
                format!("{:.2}", w.max),
            ]),
            None => row.extend(["".to_string(), "".into(), "".into()]),
        }
        for (node, frac) in &self.per_node_busy_fraction {
            header.push(format!("busy_fraction_{node}"));
            row.push(format!("{frac:.6}"));
        }
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&header)?;
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    }
}
