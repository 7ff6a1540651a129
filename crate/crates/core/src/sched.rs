//! FIFO queueing, policy authorization and node placement.
//!
//! [`QueueState`] holds the pending queue, the running set and the free
//! resources of every node. All mutation goes through [`QueueState::submit`],
//! [`QueueState::schedule_step`] and [`QueueState::release`], which keep the
//! per-node accounting conserved: free + busy = installed at all times.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{GroupPolicy, NodeSpec, ValidatedCluster};

/// The GPU type a job asks for.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum GpuRequest {
    #[default]
    Any,
    Type(String),
}

impl GpuRequest {
    pub fn matches(&self, gpu_type: &str) -> bool {
        match self {
            GpuRequest::Any => true,
            GpuRequest::Type(t) => t == gpu_type,
        }
    }
}

impl From<String> for GpuRequest {
    fn from(s: String) -> Self {
        if s.eq_ignore_ascii_case("any") {
            GpuRequest::Any
        } else {
            GpuRequest::Type(s)
        }
    }
}

impl From<GpuRequest> for String {
    fn from(r: GpuRequest) -> Self {
        match r {
            GpuRequest::Any => "ANY".to_string(),
            GpuRequest::Type(t) => t,
        }
    }
}

impl fmt::Display for GpuRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GpuRequest::Any => f.write_str("ANY"),
            GpuRequest::Type(t) => f.write_str(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRequest {
    pub job_id: u64,
    pub user: String,
    pub group: String,
    pub gpu_count: u32,
    #[serde(default)]
    pub gpu_type: GpuRequest,
    #[serde(default)]
    pub mem_gb: u32,
    pub duration_min: u64,
    pub submit_time_min: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulingMode {
    /// The head of the queue blocks every later job.
    #[default]
    Strict,
    /// Later jobs may start past a blocked head if they fit.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DenyReason {
    /// No node the group may use hosts a permitted GPU type matching the request.
    GpuTypeForbidden,
    TooManyGpus,
    RuntimeExceeded,
    /// The request exceeds the installed capacity of every node the group may use.
    Unsatisfiable,
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DenyReason::GpuTypeForbidden => "gpu_type_forbidden",
            DenyReason::TooManyGpus => "too_many_gpus",
            DenyReason::RuntimeExceeded => "runtime_exceeded",
            DenyReason::Unsatisfiable => "unsatisfiable",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyDecision {
    Allow,
    Deny(DenyReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedError {
    #[error("unknown group {0:?}")]
    UnknownGroup(String),
    #[error("job {0} was already submitted")]
    DuplicateJobId(u64),
    #[error("unknown job {0}")]
    UnknownJob(u64),
    #[error("job {0} is not running")]
    NotRunning(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Placement {
    pub node_id: String,
    /// GPU type the job's GPUs are taken from; `None` for GPU-less jobs.
    pub gpu_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub job_id: u64,
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunningJob {
    pub job: JobRequest,
    pub placement: Placement,
    pub start_min: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinishedJob {
    pub job: JobRequest,
    pub placement: Placement,
    pub start_min: u64,
    pub end_min: u64,
}

/// Free resources of a single node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeResources {
    pub gpus: BTreeMap<String, u32>,
    pub mem_gb: u32,
}

impl NodeResources {
    fn installed(node: &NodeSpec) -> Self {
        let mut gpus = BTreeMap::new();
        for slot in &node.gpus {
            *gpus.entry(slot.gpu_type.clone()).or_insert(0) += slot.count;
        }
        NodeResources {
            gpus,
            mem_gb: node.ram_gb,
        }
    }

    pub fn total_gpus(&self) -> u32 {
        self.gpus.values().sum()
    }
}

/// GPU types on `node` that `policy` permits and `job` accepts, in name order.
fn permitted_types<'a>(
    node: &'a NodeSpec,
    job: &'a JobRequest,
    policy: &'a GroupPolicy,
) -> impl Iterator<Item = &'a str> + 'a {
    let types: BTreeSet<&str> = node
        .gpus
        .iter()
        .filter(|s| s.count > 0)
        .map(|s| s.gpu_type.as_str())
        .filter(|t| policy.allowed_gpu_types.contains(t) && job.gpu_type.matches(t))
        .collect();
    types.into_iter()
}

/// Nodes a group may be placed on. GPU-less nodes are never placement targets.
fn placeable_nodes<'a>(
    cluster: &'a ValidatedCluster,
    policy: &'a GroupPolicy,
) -> impl Iterator<Item = &'a NodeSpec> + 'a {
    cluster
        .nodes()
        .iter()
        .filter(|n| n.total_gpus() > 0 && policy.allowed_nodes.contains(&n.node_id))
}

/// Checks a job against its group's policy.
///
/// Concurrency caps are not checked here; they defer jobs in
/// [`QueueState::schedule_step`] instead of rejecting them.
pub fn authorize(
    job: &JobRequest,
    cluster: &ValidatedCluster,
) -> Result<PolicyDecision, SchedError> {
    let policy = cluster
        .policy(&job.group)
        .ok_or_else(|| SchedError::UnknownGroup(job.group.clone()))?;
    Ok(authorize_with(job, policy, cluster))
}

pub fn authorize_with(
    job: &JobRequest,
    policy: &GroupPolicy,
    cluster: &ValidatedCluster,
) -> PolicyDecision {
    use PolicyDecision::Deny;

    if job.gpu_count > 0
        && !placeable_nodes(cluster, policy).any(|n| permitted_types(n, job, policy).next().is_some())
    {
        return Deny(DenyReason::GpuTypeForbidden);
    }
    if let Some(max) = policy.max_gpus_per_job {
        if job.gpu_count > max {
            return Deny(DenyReason::TooManyGpus);
        }
    }
    if let Some(hours) = policy.max_runtime_hours {
        if job.duration_min as f64 > 60.0 * hours {
            return Deny(DenyReason::RuntimeExceeded);
        }
    }
    let fits_somewhere = placeable_nodes(cluster, policy).any(|n| {
        n.ram_gb >= job.mem_gb
            && (job.gpu_count == 0
                || permitted_types(n, job, policy).any(|t| n.gpus_of(t) >= job.gpu_count))
    });
    if !fits_somewhere {
        return Deny(DenyReason::Unsatisfiable);
    }
    PolicyDecision::Allow
}

/// Picks the candidate with the fewest busy GPUs, ties going to the smallest id.
pub fn least_loaded<'a, I>(candidates: I) -> Option<&'a str>
where
    I: IntoIterator<Item = (&'a str, u32)>,
{
    candidates
        .into_iter()
        .min_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)))
        .map(|(id, _)| id)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invariant violated: {0}")]
pub struct InvariantViolation(pub String);

#[derive(Debug, Clone)]
pub struct QueueState {
    cluster: Arc<ValidatedCluster>,
    pending: Vec<JobRequest>,
    running: BTreeMap<u64, RunningJob>,
    finished: BTreeMap<u64, FinishedJob>,
    free: BTreeMap<String, NodeResources>,
    running_per_group: BTreeMap<String, u32>,
    seen: BTreeSet<u64>,
}

impl QueueState {
    pub fn new(cluster: Arc<ValidatedCluster>) -> Self {
        let free = cluster
            .nodes()
            .iter()
            .map(|n| (n.node_id.clone(), NodeResources::installed(n)))
            .collect();
        QueueState {
            cluster,
            pending: Vec::new(),
            running: BTreeMap::new(),
            finished: BTreeMap::new(),
            free,
            running_per_group: BTreeMap::new(),
            seen: BTreeSet::new(),
        }
    }

    pub fn cluster(&self) -> &ValidatedCluster {
        &self.cluster
    }

    pub fn pending(&self) -> &[JobRequest] {
        &self.pending
    }

    pub fn running(&self) -> &BTreeMap<u64, RunningJob> {
        &self.running
    }

    pub fn finished(&self) -> &BTreeMap<u64, FinishedJob> {
        &self.finished
    }

    pub fn free(&self, node_id: &str) -> Option<&NodeResources> {
        self.free.get(node_id)
    }

    pub fn running_in_group(&self, group: &str) -> u32 {
        self.running_per_group.get(group).copied().unwrap_or(0)
    }

    fn busy_gpus(&self, node: &NodeSpec) -> u32 {
        node.total_gpus() - self.free[&node.node_id].total_gpus()
    }

    pub fn authorize(&self, job: &JobRequest) -> Result<PolicyDecision, SchedError> {
        authorize(job, &self.cluster)
    }

    /// Enqueues an authorized job.
    ///
    /// Pending jobs stay ordered by `(submit_time_min, job_id)`, so in-order
    /// submissions are appended at the tail.
    pub fn submit(&mut self, job: JobRequest) -> Result<(), SchedError> {
        if self.cluster.policy(&job.group).is_none() {
            return Err(SchedError::UnknownGroup(job.group));
        }
        if self.seen.contains(&job.job_id) {
            return Err(SchedError::DuplicateJobId(job.job_id));
        }
        let key = (job.submit_time_min, job.job_id);
        let pos = self
            .pending
            .partition_point(|p| (p.submit_time_min, p.job_id) <= key);
        self.seen.insert(job.job_id);
        self.pending.insert(pos, job);
        Ok(())
    }

    /// Where `job` would start right now, if anywhere.
    pub fn place(&self, job: &JobRequest, policy: &GroupPolicy) -> Option<Placement> {
        let mut candidates: Vec<(&str, u32, Option<&str>)> = Vec::new();
        for node in placeable_nodes(&self.cluster, policy) {
            let free = &self.free[&node.node_id];
            if free.mem_gb < job.mem_gb {
                continue;
            }
            let gpu_type = if job.gpu_count == 0 {
                None
            } else {
                match permitted_types(node, job, policy)
                    .find(|t| free.gpus.get(*t).copied().unwrap_or(0) >= job.gpu_count)
                {
                    Some(t) => Some(t),
                    None => continue,
                }
            };
            candidates.push((node.node_id.as_str(), self.busy_gpus(node), gpu_type));
        }
        let chosen = least_loaded(candidates.iter().map(|(id, busy, _)| (*id, *busy)))?;
        let (node_id, _, gpu_type) = candidates.iter().find(|c| c.0 == chosen)?;
        Some(Placement {
            node_id: node_id.to_string(),
            gpu_type: gpu_type.map(str::to_string),
        })
    }

    fn cap_allows(&self, job: &JobRequest, policy: &GroupPolicy) -> bool {
        policy
            .max_running_jobs
            .is_none_or(|cap| self.running_in_group(&job.group) < cap)
    }

    fn try_place(&self, job: &JobRequest) -> Option<Placement> {
        let policy = self.cluster.policy(&job.group)?;
        if !self.cap_allows(job, policy) {
            return None;
        }
        self.place(job, policy)
    }

    fn start(&mut self, job: JobRequest, placement: Placement, now_min: u64) {
        let free = self.free.get_mut(&placement.node_id).expect("placed on known node");
        free.mem_gb -= job.mem_gb;
        if let Some(t) = &placement.gpu_type {
            *free.gpus.get_mut(t).expect("placed on installed type") -= job.gpu_count;
        }
        *self.running_per_group.entry(job.group.clone()).or_insert(0) += 1;
        self.running.insert(
            job.job_id,
            RunningJob {
                job,
                placement,
                start_min: now_min,
            },
        );
    }

    /// Starts every job the mode allows at `now_min` and returns the assignments in start order.
    pub fn schedule_step(&mut self, now_min: u64, mode: SchedulingMode) -> Vec<Assignment> {
        let mut started = Vec::new();
        let mut i = 0;
        while i < self.pending.len() {
            match self.try_place(&self.pending[i]) {
                Some(placement) => {
                    let job = self.pending.remove(i);
                    started.push(Assignment {
                        job_id: job.job_id,
                        placement: placement.clone(),
                    });
                    self.start(job, placement, now_min);
                }
                None if mode == SchedulingMode::Strict => break,
                None => i += 1,
            }
        }
        started
    }

    /// Finishes a running job at `now_min` and returns its resources to the free pool.
    pub fn release(&mut self, job_id: u64, now_min: u64) -> Result<FinishedJob, SchedError> {
        let Some(run) = self.running.remove(&job_id) else {
            return Err(if self.seen.contains(&job_id) {
                SchedError::NotRunning(job_id)
            } else {
                SchedError::UnknownJob(job_id)
            });
        };
        let free = self.free.get_mut(&run.placement.node_id).expect("known node");
        free.mem_gb += run.job.mem_gb;
        if let Some(t) = &run.placement.gpu_type {
            *free.gpus.get_mut(t).expect("installed type") += run.job.gpu_count;
        }
        if let Some(n) = self.running_per_group.get_mut(&run.job.group) {
            *n -= 1;
        }
        let done = FinishedJob {
            job: run.job,
            placement: run.placement,
            start_min: run.start_min,
            end_min: now_min,
        };
        self.finished.insert(job_id, done.clone());
        Ok(done)
    }

    /// Re-derives the resource accounting from scratch and compares it with the tracked state.
    pub fn audit(&self) -> Result<(), InvariantViolation> {
        let fail = |msg: String| Err(InvariantViolation(msg));
        for node in self.cluster.nodes() {
            let installed = NodeResources::installed(node);
            let free = &self.free[&node.node_id];
            let mut busy_mem = 0u32;
            let mut busy_gpus: BTreeMap<&str, u32> = BTreeMap::new();
            for r in self.running.values().filter(|r| r.placement.node_id == node.node_id) {
                busy_mem += r.job.mem_gb;
                if let Some(t) = &r.placement.gpu_type {
                    *busy_gpus.entry(t).or_insert(0) += r.job.gpu_count;
                }
            }
            if free.mem_gb + busy_mem != installed.mem_gb {
                return fail(format!("memory not conserved on {}", node.node_id));
            }
            for (t, &cap) in &installed.gpus {
                let f = free.gpus.get(t).copied().unwrap_or(0);
                let b = busy_gpus.get(t.as_str()).copied().unwrap_or(0);
                if f > cap || b > cap || f + b != cap {
                    return fail(format!("{t} GPUs not conserved on {}", node.node_id));
                }
            }
            if free.gpus.len() != installed.gpus.len() {
                return fail(format!("unexpected GPU type on {}", node.node_id));
            }
        }
        for policy in self.cluster.groups() {
            let running = self
                .running
                .values()
                .filter(|r| r.job.group == policy.group_name)
                .count() as u32;
            if running != self.running_in_group(&policy.group_name) {
                return fail(format!("group counter drift for {}", policy.group_name));
            }
            if policy.max_running_jobs.is_some_and(|cap| running > cap) {
                return fail(format!("group {} exceeds its cap", policy.group_name));
            }
        }
        for job in &self.pending {
            if self.running.contains_key(&job.job_id) || self.finished.contains_key(&job.job_id) {
                return fail(format!("job {} in more than one state", job.job_id));
            }
        }
        if self.running.keys().any(|id| self.finished.contains_key(id)) {
            return fail("job both running and finished".into());
        }
        Ok(())
    }
}
