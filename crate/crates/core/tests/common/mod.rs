//! Test support: random small instances, a minute-stepping reference
//! simulator and a trace replay checker.
//!
//! The reference simulator re-implements authorization, queueing and
//! placement directly from the scheduling rules without going through
//! `sched` or `sim`. It advances time one minute at a time and re-evaluates
//! everything each minute.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use clusterplan::cluster::{
    validate_cluster, ClusterSpec, GpuSlot, GpuType, GroupPolicy, NodeSpec, Selection, ValidatedCluster,
};
use clusterplan::sched::{GpuRequest, JobRequest, QueueState, SchedulingMode};
use clusterplan::sim::{EventKind, SimulationTrace};
use proptest::prelude::*;

const TYPES: [&str; 2] = ["a", "b"];

#[derive(Debug, Clone)]
pub struct Instance {
    pub spec: ClusterSpec,
    pub jobs: Vec<JobRequest>,
}

impl Instance {
    pub fn cluster(&self) -> Arc<ValidatedCluster> {
        Arc::new(validate_cluster(self.spec.clone()).expect("generated clusters are valid"))
    }
}

type NodeParts = (u32, u32, u32);
type GroupParts = (Option<u8>, Option<u8>, Option<u32>, Option<u32>, Option<u32>);
type JobParts = (usize, u32, u8, u32, u64, u64);

fn build(nodes: Vec<NodeParts>, groups: Vec<GroupParts>, jobs: Vec<JobParts>) -> Instance {
    let nodes: Vec<NodeSpec> = nodes
        .into_iter()
        .enumerate()
        .map(|(i, (a, b, ram))| NodeSpec {
            node_id: format!("n{i}"),
            gpus: [("a", a), ("b", b)]
                .into_iter()
                .filter(|(_, c)| *c > 0)
                .map(|(t, c)| GpuSlot {
                    gpu_type: t.into(),
                    count: c,
                })
                .collect(),
            cpu_desc: String::new(),
            ram_gb: ram,
            storage_gb: 0,
            max_power_watts: 0.0,
        })
        .collect();
    let installed: Vec<&str> = TYPES
        .into_iter()
        .filter(|t| nodes.iter().any(|n| n.gpus_of(t) > 0))
        .collect();
    let groups: Vec<GroupPolicy> = groups
        .into_iter()
        .enumerate()
        .map(|(i, (node_mask, type_mask, cap, max_gpus, runtime_min))| GroupPolicy {
            group_name: format!("g{i}"),
            allowed_nodes: match node_mask {
                None => Selection::All,
                Some(m) => Selection::only(
                    nodes
                        .iter()
                        .enumerate()
                        .filter(|(k, _)| m & (1 << k) != 0)
                        .map(|(_, n)| n.node_id.clone()),
                ),
            },
            allowed_gpu_types: match type_mask {
                None => Selection::All,
                Some(m) => Selection::only(
                    installed
                        .iter()
                        .enumerate()
                        .filter(|(k, _)| m & (1 << k) != 0)
                        .map(|(_, t)| *t),
                ),
            },
            max_running_jobs: cap,
            max_gpus_per_job: max_gpus,
            max_runtime_hours: runtime_min.map(|m| m as f64 / 60.0),
        })
        .collect();
    let n_groups = groups.len();
    let jobs = jobs
        .into_iter()
        .enumerate()
        .map(|(i, (g, gpus, ty, mem, dur, submit))| JobRequest {
            job_id: i as u64 + 1,
            user: "u".into(),
            group: format!("g{}", g % n_groups),
            gpu_count: gpus,
            gpu_type: match ty {
                0 | 1 => GpuRequest::Any,
                2 => GpuRequest::Type("a".into()),
                _ => GpuRequest::Type("b".into()),
            },
            mem_gb: mem,
            duration_min: dur,
            submit_time_min: submit,
        })
        .collect();
    Instance {
        spec: ClusterSpec {
            gpu_types: TYPES
                .iter()
                .map(|t| GpuType {
                    name: t.to_string(),
                    vram_gb: 16.0,
                })
                .collect(),
            nodes,
            groups,
        },
        jobs,
    }
}

/// Clusters of 1..=`max_nodes` nodes with up to 4+3 GPUs each, one or two
/// groups with random restrictions, and up to `max_jobs` jobs.
pub fn instances(max_nodes: usize, max_jobs: usize) -> impl Strategy<Value = Instance> {
    let node = (0u32..=4, prop_oneof![Just(0u32), 0u32..=3], 8u32..=64);
    let group = (
        prop::option::weighted(0.5, 0u8..8),
        prop::option::weighted(0.3, 0u8..4),
        prop::option::weighted(0.5, 1u32..=2),
        prop::option::weighted(0.2, 1u32..=4),
        prop::option::weighted(0.2, 5u32..=20),
    );
    let job = (0usize..2, 0u32..=4, 0u8..4, 0u32..=32, 1u64..=20, 0u64..=30);
    (
        prop::collection::vec(node, 1..=max_nodes),
        prop::collection::vec(group, 1..=2),
        prop::collection::vec(job, 0..=max_jobs),
    )
        .prop_map(|(n, g, j)| build(n, g, j))
}

/// Start and completion times, keyed by job id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Schedule {
    pub start: BTreeMap<u64, u64>,
    pub complete: BTreeMap<u64, u64>,
    pub denied: BTreeSet<u64>,
}

impl Schedule {
    pub fn from_trace(trace: &SimulationTrace) -> Self {
        let mut s = Schedule::default();
        for e in &trace.events {
            match e.kind {
                EventKind::Start => {
                    s.start.insert(e.job_id, e.time_min);
                }
                EventKind::Complete => {
                    s.complete.insert(e.job_id, e.time_min);
                }
                EventKind::Deny => {
                    s.denied.insert(e.job_id);
                }
                EventKind::Submit => {}
            }
        }
        s
    }
}

fn node_allowed(policy: &GroupPolicy, node: &NodeSpec) -> bool {
    match &policy.allowed_nodes {
        Selection::All => true,
        Selection::Only(ids) => ids.iter().any(|id| *id == node.node_id),
    }
}

fn type_allowed(policy: &GroupPolicy, t: &str) -> bool {
    match &policy.allowed_gpu_types {
        Selection::All => true,
        Selection::Only(types) => types.iter().any(|x| x == t),
    }
}

/// Sorted GPU types on `node` usable by `job` under `policy`.
fn usable_types(policy: &GroupPolicy, node: &NodeSpec, job: &JobRequest) -> Vec<String> {
    let mut out: Vec<String> = node
        .gpus
        .iter()
        .filter(|s| s.count > 0 && type_allowed(policy, &s.gpu_type))
        .filter(|s| match &job.gpu_type {
            GpuRequest::Any => true,
            GpuRequest::Type(t) => *t == s.gpu_type,
        })
        .map(|s| s.gpu_type.clone())
        .collect();
    out.sort();
    out.dedup();
    out
}

fn reference_allows(spec: &ClusterSpec, policy: &GroupPolicy, job: &JobRequest) -> bool {
    let targets: Vec<&NodeSpec> = spec
        .nodes
        .iter()
        .filter(|n| n.gpus.iter().map(|s| s.count).sum::<u32>() > 0 && node_allowed(policy, n))
        .collect();
    if job.gpu_count > 0 && targets.iter().all(|n| usable_types(policy, n, job).is_empty()) {
        return false;
    }
    if policy.max_gpus_per_job.is_some_and(|m| job.gpu_count > m) {
        return false;
    }
    if policy
        .max_runtime_hours
        .is_some_and(|h| job.duration_min as f64 > h * 60.0)
    {
        return false;
    }
    targets.iter().any(|n| {
        n.ram_gb >= job.mem_gb
            && (job.gpu_count == 0
                || usable_types(policy, n, job)
                    .iter()
                    .any(|t| n.gpus_of(t) >= job.gpu_count))
    })
}

/// Minute-by-minute brute-force simulation of the scheduling rules.
pub fn reference_schedule(spec: &ClusterSpec, jobs: &[JobRequest], mode: SchedulingMode) -> Schedule {
    let strict = mode == SchedulingMode::Strict;
    let n = spec.nodes.len();
    let mut free_gpus: Vec<BTreeMap<String, u32>> = spec
        .nodes
        .iter()
        .map(|node| {
            let mut m = BTreeMap::new();
            for s in &node.gpus {
                *m.entry(s.gpu_type.clone()).or_insert(0) += s.count;
            }
            m
        })
        .collect();
    let mut free_ram: Vec<u32> = spec.nodes.iter().map(|n| n.ram_gb).collect();
    let installed: Vec<u32> = spec
        .nodes
        .iter()
        .map(|n| n.gpus.iter().map(|s| s.count).sum())
        .collect();

    let mut by_arrival: Vec<&JobRequest> = jobs.iter().collect();
    by_arrival.sort_by_key(|j| (j.submit_time_min, j.job_id));

    let mut out = Schedule::default();
    let mut pending: Vec<&JobRequest> = Vec::new();
    // (job, node index, gpu type, end time)
    let mut running: Vec<(&JobRequest, usize, Option<String>, u64)> = Vec::new();
    let policy = |g: &str| spec.groups.iter().find(|p| p.group_name == g).unwrap();

    let mut t = 0u64;
    loop {
        let resolved = out.denied.len() + out.complete.len();
        if resolved == jobs.len() {
            break;
        }
        assert!(t < 100_000, "reference simulation did not terminate");

        let (done, still): (Vec<_>, Vec<_>) = running.into_iter().partition(|r| r.3 == t);
        running = still;
        for (job, node, ty, _) in done {
            free_ram[node] += job.mem_gb;
            if let Some(ty) = ty {
                *free_gpus[node].get_mut(&ty).unwrap() += job.gpu_count;
            }
            out.complete.insert(job.job_id, t);
        }

        for job in by_arrival.iter().filter(|j| j.submit_time_min == t) {
            if reference_allows(spec, policy(&job.group), job) {
                pending.push(job);
            } else {
                out.denied.insert(job.job_id);
            }
        }

        let mut i = 0;
        while i < pending.len() {
            let job = pending[i];
            let p = policy(&job.group);
            let in_group = running.iter().filter(|r| r.0.group == job.group).count() as u32;
            let cap_ok = p.max_running_jobs.is_none_or(|c| in_group < c);
            let mut best: Option<(u32, &str, usize, Option<String>)> = None;
            if cap_ok {
                for k in 0..n {
                    let node = &spec.nodes[k];
                    if installed[k] == 0 || !node_allowed(p, node) || free_ram[k] < job.mem_gb {
                        continue;
                    }
                    let ty = if job.gpu_count == 0 {
                        None
                    } else {
                        match usable_types(p, node, job)
                            .into_iter()
                            .find(|t| free_gpus[k].get(t).copied().unwrap_or(0) >= job.gpu_count)
                        {
                            Some(t) => Some(t),
                            None => continue,
                        }
                    };
                    let busy = installed[k] - free_gpus[k].values().sum::<u32>();
                    let better = match &best {
                        None => true,
                        Some((b, id, _, _)) => (busy, node.node_id.as_str()) < (*b, *id),
                    };
                    if better {
                        best = Some((busy, &node.node_id, k, ty));
                    }
                }
            }
            match best {
                Some((_, _, k, ty)) => {
                    free_ram[k] -= job.mem_gb;
                    if let Some(ty) = &ty {
                        *free_gpus[k].get_mut(ty).unwrap() -= job.gpu_count;
                    }
                    out.start.insert(job.job_id, t);
                    running.push((job, k, ty, t + job.duration_min));
                    pending.remove(i);
                }
                None if strict => break,
                None => i += 1,
            }
        }
        t += 1;
    }
    out
}

/// Replays a trace and checks ordering, durations, capacity per node and GPU
/// type, memory, and group concurrency caps after every event.
pub fn replay_check(trace: &SimulationTrace, spec: &ClusterSpec) -> Result<(), String> {
    let mut used_gpus: BTreeMap<(String, String), u32> = BTreeMap::new();
    let mut used_mem: BTreeMap<String, u32> = BTreeMap::new();
    let mut in_group: BTreeMap<String, u32> = BTreeMap::new();
    let mut submitted = BTreeSet::new();
    let mut started: BTreeMap<u64, (u64, String, Option<String>)> = BTreeMap::new();
    let mut last = 0;
    for e in &trace.events {
        if e.time_min < last {
            return Err(format!("events out of order at job {}", e.job_id));
        }
        last = e.time_min;
        let job = &trace.jobs[&e.job_id];
        match e.kind {
            EventKind::Submit => {
                submitted.insert(e.job_id);
            }
            EventKind::Deny => {}
            EventKind::Start => {
                if !submitted.contains(&e.job_id) {
                    return Err(format!("job {} started before submit", e.job_id));
                }
                let node = e.node_id.clone().ok_or("start without node")?;
                if let Some(t) = &e.gpu_type {
                    *used_gpus.entry((node.clone(), t.clone())).or_insert(0) += job.gpu_count;
                } else if job.gpu_count > 0 {
                    return Err(format!("job {} started without a GPU type", e.job_id));
                }
                *used_mem.entry(node.clone()).or_insert(0) += job.mem_gb;
                *in_group.entry(job.group.clone()).or_insert(0) += 1;
                started.insert(e.job_id, (e.time_min, node, e.gpu_type.clone()));
            }
            EventKind::Complete => {
                let (s, node, ty) = started
                    .remove(&e.job_id)
                    .ok_or(format!("job {} completed before start", e.job_id))?;
                if e.time_min - s != job.duration_min {
                    return Err(format!("job {} has the wrong duration", e.job_id));
                }
                if let Some(t) = ty {
                    *used_gpus.get_mut(&(node.clone(), t)).unwrap() -= job.gpu_count;
                }
                *used_mem.get_mut(&node).unwrap() -= job.mem_gb;
                *in_group.get_mut(&job.group).unwrap() -= 1;
            }
        }
        for ((node, t), used) in &used_gpus {
            let n = spec.nodes.iter().find(|n| n.node_id == *node).unwrap();
            if *used > n.gpus_of(t) {
                return Err(format!("{node} over capacity on {t} at {}", e.time_min));
            }
        }
        for (node, used) in &used_mem {
            let n = spec.nodes.iter().find(|n| n.node_id == *node).unwrap();
            if *used > n.ram_gb {
                return Err(format!("{node} over memory at {}", e.time_min));
            }
        }
        for (g, count) in &in_group {
            let p = spec.groups.iter().find(|p| p.group_name == *g).unwrap();
            if p.max_running_jobs.is_some_and(|c| *count > c) {
                return Err(format!("group {g} over its cap at {}", e.time_min));
            }
        }
    }
    Ok(())
}

/// Drives a real `QueueState` minute by minute and audits it after every operation.
pub fn drive_with_audit(instance: &Instance, mode: SchedulingMode) -> Result<(), String> {
    let mut state = QueueState::new(instance.cluster());
    let mut ends: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    let horizon = instance
        .jobs
        .iter()
        .map(|j| j.submit_time_min)
        .max()
        .unwrap_or(0)
        + instance.jobs.iter().map(|j| j.duration_min).sum::<u64>()
        + 1;
    let audit = |s: &QueueState| s.audit().map_err(|e| e.to_string());
    for t in 0..=horizon {
        for id in ends.remove(&t).unwrap_or_default() {
            state.release(id, t).map_err(|e| e.to_string())?;
            audit(&state)?;
        }
        for job in instance.jobs.iter().filter(|j| j.submit_time_min == t) {
            if state.authorize(job).map_err(|e| e.to_string())?
                == clusterplan::sched::PolicyDecision::Allow
            {
                state.submit(job.clone()).map_err(|e| e.to_string())?;
                audit(&state)?;
            }
        }
        for a in state.schedule_step(t, mode) {
            let job = &state.running()[&a.job_id].job;
            ends.entry(t + job.duration_min).or_default().push(a.job_id);
        }
        audit(&state)?;
    }
    if !state.pending().is_empty() || !state.running().is_empty() {
        return Err("jobs left unfinished".into());
    }
    Ok(())
}
