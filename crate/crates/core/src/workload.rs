//! Seeded synthetic workloads.
//!
//! Randomness comes from ChaCha8 seeded with `seed` via `seed_from_u64`, so a
//! given parameter set yields the same job list on every platform.
//! Exponential inter-arrival gaps are drawn by inversion, `-mean * ln(1 - u)`.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sched::{GpuRequest, JobRequest};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalProcess {
    /// Exponentially distributed gaps (Poisson arrivals).
    #[default]
    Exponential,
    /// Every gap equals the mean.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformRange {
    pub lo: u64,
    pub hi: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weighted<T> {
    pub value: T,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Generate exactly this many jobs.
    Jobs(usize),
    /// Generate jobs whose arrival time is below this minute.
    HorizonMin(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadParams {
    pub seed: u64,
    pub stop: StopRule,
    pub mean_interarrival_min: f64,
    #[serde(default)]
    pub arrival: ArrivalProcess,
    pub duration_min: UniformRange,
    pub gpu_count: Vec<Weighted<u32>>,
    pub groups: Vec<Weighted<String>>,
    #[serde(default)]
    pub gpu_type: Vec<Weighted<GpuRequest>>,
    #[serde(default = "zero_range")]
    pub mem_gb: UniformRange,
    #[serde(default = "one")]
    pub users_per_group: u32,
}

fn zero_range() -> UniformRange {
    UniformRange { lo: 0, hi: 0 }
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

fn weighted_index<T>(field: &str, items: &[Weighted<T>]) -> Result<WeightedIndex<f64>, WorkloadError> {
    if items.iter().any(|w| !(w.weight >= 0.0) || !w.weight.is_finite()) {
        return Err(WorkloadError::InvalidDistribution(format!(
            "{field}: weights must be finite and non-negative"
        )));
    }
    WeightedIndex::new(items.iter().map(|w| w.weight)).map_err(|_| {
        WorkloadError::InvalidDistribution(format!("{field}: weights must sum to more than zero"))
    })
}

impl WorkloadParams {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidDistribution(m.to_string()));
        if !(self.mean_interarrival_min > 0.0) || !self.mean_interarrival_min.is_finite() {
            return bad("mean_interarrival_min must be positive");
        }
        if self.duration_min.lo == 0 || self.duration_min.lo > self.duration_min.hi {
            return bad("duration_min needs 0 < lo <= hi");
        }
        if self.mem_gb.lo > self.mem_gb.hi {
            return bad("mem_gb needs lo <= hi");
        }
        if self.users_per_group == 0 {
            return bad("users_per_group must be positive");
        }
        if matches!(self.stop, StopRule::HorizonMin(0)) {
            return bad("horizon_min must be positive");
        }
        weighted_index("gpu_count", &self.gpu_count)?;
        weighted_index("groups", &self.groups)?;
        if !self.gpu_type.is_empty() {
            weighted_index("gpu_type", &self.gpu_type)?;
        }
        Ok(())
    }
}

/// Generates a job list. Arrival times are non-decreasing and job ids count up from 1.
pub fn generate_workload(params: &WorkloadParams) -> Result<Vec<JobRequest>, WorkloadError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let gpu_counts = weighted_index("gpu_count", &params.gpu_count)?;
    let groups = weighted_index("groups", &params.groups)?;
    let gpu_types = if params.gpu_type.is_empty() {
        None
    } else {
        Some(weighted_index("gpu_type", &params.gpu_type)?)
    };

    let mut jobs = Vec::new();
    let mut clock = 0.0f64;
    loop {
        if let StopRule::Jobs(n) = params.stop {
            if jobs.len() >= n {
                break;
            }
        }
        let gap = match params.arrival {
            ArrivalProcess::Constant => params.mean_interarrival_min,
            ArrivalProcess::Exponential => {
                let u: f64 = rng.gen();
                -params.mean_interarrival_min * (1.0 - u).ln()
            }
        };
        clock += gap;
        let submit_time_min = clock.round() as u64;
        if let StopRule::HorizonMin(h) = params.stop {
            if submit_time_min >= h {
                break;
            }
        }
        let group = &params.groups[groups.sample(&mut rng)].value;
        let user_idx = rng.gen_range(0..params.users_per_group);
        let gpu_count = params.gpu_count[gpu_counts.sample(&mut rng)].value;
        let gpu_type = match &gpu_types {
            Some(dist) => params.gpu_type[dist.sample(&mut rng)].value.clone(),
            None => GpuRequest::Any,
        };
        let duration_min = rng.gen_range(params.duration_min.lo..=params.duration_min.hi);
        let mem_gb = rng.gen_range(params.mem_gb.lo..=params.mem_gb.hi) as u32;
        jobs.push(JobRequest {
            job_id: jobs.len() as u64 + 1,
            user: format!("{group}-{user_idx}"),
            group: group.clone(),
            gpu_count,
            gpu_type,
            mem_gb,
            duration_min,
            submit_time_min,
        });
    }
    Ok(jobs)
}
