//! Scenario files: one JSON document describing the cluster, group policies,
//! scheduler settings, workload, cost inputs and output location.
//!
//! Unknown keys are rejected. Errors carry a JSON-pointer location
//! (`/cluster/nodes/0/gpus_`) or, for malformed JSON, a line and column.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{validate_cluster, ClusterSpec, GpuType, GroupPolicy, NodeSpec, ValidatedCluster};
use crate::cost::{CloudOffering, OnPremScenario};
use crate::sched::{JobRequest, SchedulingMode};
use crate::workload::WorkloadParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    #[serde(default)]
    pub gpu_types: Vec<GpuType>,
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    #[serde(default)]
    pub mode: SchedulingMode,
    /// End of the simulated window. Without it the run lasts until the last job completes.
    #[serde(default)]
    pub horizon_min: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadSection {
    Jobs(Vec<JobRequest>),
    Generate(WorkloadParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum UsageSource {
    /// Usage comes from a simulation run (`pipeline`).
    Simulated,
    Fixed { gpu_hours_per_month: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub onprem: OnPremScenario,
    #[serde(default)]
    pub offerings: Vec<CloudOffering>,
    pub usage: UsageSource,
    /// GPU count the usage refers to; defaults to the cluster's inventory.
    #[serde(default)]
    pub total_gpus: Option<u32>,
    #[serde(default)]
    pub months: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub directory: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: None,
            formats: default_formats(),
        }
    }
}

fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv]
}

/// The file as written, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub cluster: Option<ClusterSection>,
    #[serde(default)]
    pub groups: Vec<GroupPolicy>,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub workload: Option<WorkloadSection>,
    #[serde(default)]
    pub cost: Option<CostSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("syntax error at {location}: {message}")]
    Syntax { location: String, message: String },
    #[error("schema error at {location}: {message}")]
    Schema { location: String, message: String },
    #[error("invalid scenario: {0}")]
    Validation(String),
}

/// A scenario whose sections have all been checked.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub cluster: Option<Arc<ValidatedCluster>>,
}

impl Scenario {
    pub fn mode(&self) -> SchedulingMode {
        self.file.scheduler.mode
    }

    pub fn workload(&self) -> Option<&WorkloadSection> {
        self.file.workload.as_ref()
    }

    pub fn cost(&self) -> Option<&CostSection> {
        self.file.cost.as_ref()
    }

    /// GPU count that cost usage figures refer to.
    pub fn cost_gpus(&self) -> Option<u32> {
        self.cost()
            .and_then(|c| c.total_gpus)
            .or_else(|| self.cluster.as_ref().map(|c| c.total_gpus()))
    }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push_str(&key.replace('~', "~0").replace('/', "~1"))
            }
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Parses scenario JSON text without touching the filesystem.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ScenarioFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        match inner.classify() {
            serde_json::error::Category::Data => ScenarioError::Schema {
                location: json_pointer(e.path()),
                message: inner.to_string(),
            },
            _ => ScenarioError::Syntax {
                location: format!("line {} column {}", inner.line(), inner.column()),
                message: inner.to_string(),
            },
        }
    })?;
    validate_scenario(file)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| {
        if source.kind() == io::ErrorKind::NotFound {
            ScenarioError::FileNotFound(path.to_path_buf())
        } else {
            ScenarioError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    parse_scenario(&text)
}

pub fn validate_scenario(file: ScenarioFile) -> Result<Scenario, ScenarioError> {
    let invalid = |m: String| ScenarioError::Validation(m);

    let cluster = match &file.cluster {
        Some(section) => {
            let spec = ClusterSpec {
                gpu_types: section.gpu_types.clone(),
                nodes: section.nodes.clone(),
                groups: file.groups.clone(),
            };
            Some(Arc::new(validate_cluster(spec).map_err(|e| invalid(e.to_string()))?))
        }
        None if !file.groups.is_empty() => {
            return Err(invalid("groups require a cluster section".into()));
        }
        None => None,
    };

    if let Some(workload) = &file.workload {
        let Some(cluster) = &cluster else {
            return Err(invalid("a workload requires a cluster section".into()));
        };
        match workload {
            WorkloadSection::Generate(params) => {
                params.validate().map_err(|e| invalid(e.to_string()))?;
                for g in &params.groups {
                    if cluster.policy(&g.value).is_none() {
                        return Err(invalid(format!("workload group {:?} is not defined", g.value)));
                    }
                }
            }
            WorkloadSection::Jobs(jobs) => {
                for j in jobs {
                    if j.duration_min == 0 {
                        return Err(invalid(format!("job {} has zero duration", j.job_id)));
                    }
                    if cluster.policy(&j.group).is_none() {
                        return Err(invalid(format!("job {} uses unknown group {:?}", j.job_id, j.group)));
                    }
                }
            }
        }
    }

    if let Some(cost) = &file.cost {
        cost.onprem.validate().map_err(|e| invalid(e.to_string()))?;
        for (i, o) in cost.offerings.iter().enumerate() {
            o.validate().map_err(|e| invalid(e.to_string()))?;
            if cost.offerings[..i].iter().any(|p| p.name == o.name) {
                return Err(invalid(format!("duplicate offering {:?}", o.name)));
            }
            if o.name == "onprem" {
                return Err(invalid("offering name \"onprem\" is reserved".into()));
            }
        }
        if let UsageSource::Fixed { gpu_hours_per_month } = cost.usage {
            if !(gpu_hours_per_month >= 0.0) || !gpu_hours_per_month.is_finite() {
                return Err(invalid("gpu_hours_per_month must be non-negative".into()));
            }
        }
        if cost.months == Some(0) {
            return Err(invalid("cost months must be at least 1".into()));
        }
        if cost.total_gpus.is_none() && cluster.is_none() {
            return Err(invalid("cost section needs total_gpus when no cluster is given".into()));
        }
    }

    Ok(Scenario { file, cluster })
}
