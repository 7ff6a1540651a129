//! Cluster data model: GPU types, nodes, group policies and validation.
//!
//! A [`ClusterSpec`] is plain data as read from a scenario file. Running it
//! through [`validate_cluster`] produces a [`ValidatedCluster`], which is the
//! only form the scheduler and simulator accept. Validation reports every
//! violation it finds rather than stopping at the first one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuType {
    pub name: String,
    pub vram_gb: f64,
}

/// A number of GPUs of one type installed in a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSlot {
    #[serde(rename = "type")]
    pub gpu_type: String,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub node_id: String,
    #[serde(default)]
    pub gpus: Vec<GpuSlot>,
    #[serde(default)]
    pub cpu_desc: String,
    pub ram_gb: u32,
    #[serde(default)]
    pub storage_gb: u64,
    /// Whole-node power draw. Zero excludes the node from electricity modeling.
    #[serde(default)]
    pub max_power_watts: f64,
}

impl NodeSpec {
    pub fn total_gpus(&self) -> u32 {
        self.gpus.iter().map(|s| s.count).sum()
    }

    /// Installed GPUs of `gpu_type` on this node.
    pub fn gpus_of(&self, gpu_type: &str) -> u32 {
        self.gpus
            .iter()
            .filter(|s| s.gpu_type == gpu_type)
            .map(|s| s.count)
            .sum()
    }
}

/// Either every member of a set, or an explicit subset.
///
/// Serialized as the string `"ALL"` or as a JSON array of identifiers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Selection {
    #[default]
    All,
    Only(BTreeSet<String>),
}

impl Selection {
    pub fn only<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Selection::Only(items.into_iter().map(Into::into).collect())
    }

    pub fn contains(&self, item: &str) -> bool {
        match self {
            Selection::All => true,
            Selection::Only(set) => set.contains(item),
        }
    }
}

impl Serialize for Selection {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Selection::All => serializer.serialize_str("ALL"),
            Selection::Only(set) => set.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for Selection {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct SelectionVisitor;

        impl<'de> serde::de::Visitor<'de> for SelectionVisitor {
            type Value = Selection;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("the string \"ALL\" or an array of identifiers")
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<Selection, E> {
                if v.eq_ignore_ascii_case("all") {
                    Ok(Selection::All)
                } else {
                    Err(E::invalid_value(serde::de::Unexpected::Str(v), &self))
                }
            }

            fn visit_seq<A: serde::de::SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> Result<Selection, A::Error> {
                let mut set = BTreeSet::new();
                while let Some(item) = seq.next_element::<String>()? {
                    set.insert(item);
                }
                Ok(Selection::Only(set))
            }
        }

        deserializer.deserialize_any(SelectionVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupPolicy {
    pub group_name: String,
    #[serde(default)]
    pub allowed_nodes: Selection,
    #[serde(default)]
    pub allowed_gpu_types: Selection,
    /// `None` means unlimited.
    #[serde(default)]
    pub max_running_jobs: Option<u32>,
    #[serde(default)]
    pub max_gpus_per_job: Option<u32>,
    #[serde(default)]
    pub max_runtime_hours: Option<f64>,
}

impl GroupPolicy {
    /// A policy with no restrictions at all.
    pub fn unrestricted(group_name: impl Into<String>) -> Self {
        GroupPolicy {
            group_name: group_name.into(),
            allowed_nodes: Selection::All,
            allowed_gpu_types: Selection::All,
            max_running_jobs: None,
            max_gpus_per_job: None,
            max_runtime_hours: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    #[serde(default)]
    pub gpu_types: Vec<GpuType>,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub groups: Vec<GroupPolicy>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationIssue {
    #[error("cluster has no nodes")]
    NoNodes,
    #[error("duplicate node id {0:?}")]
    DuplicateNodeId(String),
    #[error("duplicate GPU type {0:?}")]
    DuplicateGpuType(String),
    #[error("duplicate group {0:?}")]
    DuplicateGroup(String),
    #[error("empty identifier in {0}")]
    EmptyName(&'static str),
    #[error("GPU type {0:?} must have vram_gb > 0")]
    NonPositiveVram(String),
    #[error("node {node:?} references undeclared GPU type {gpu_type:?}")]
    UnknownGpuType { node: String, gpu_type: String },
    #[error("policy references unknown node or GPU type {0:?}")]
    UnknownPolicyReference(String),
    #[error("group {group:?}: {field} must be strictly positive")]
    NonPositiveLimit { group: String, field: &'static str },
    #[error("node {0:?}: max_power_watts must be a non-negative number")]
    InvalidPower(String),
}

/// All violations found while validating a [`ClusterSpec`].
#[derive(Debug, Clone, PartialEq, Error)]
pub struct ValidationErrors(pub Vec<ValidationIssue>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

impl ValidationErrors {
    pub fn issues(&self) -> &[ValidationIssue] {
        &self.0
    }
}

/// A cluster whose invariants have been checked. Immutable.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedCluster {
    spec: ClusterSpec,
}

impl ValidatedCluster {
    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.spec.nodes
    }

    pub fn node(&self, node_id: &str) -> Option<&NodeSpec> {
        self.spec.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn groups(&self) -> &[GroupPolicy] {
        &self.spec.groups
    }

    pub fn policy(&self, group: &str) -> Option<&GroupPolicy> {
        self.spec.groups.iter().find(|g| g.group_name == group)
    }

    pub fn gpu_types(&self) -> &[GpuType] {
        &self.spec.gpu_types
    }

    pub fn total_gpus(&self) -> u32 {
        self.spec.nodes.iter().map(NodeSpec::total_gpus).sum()
    }

    /// Sum of `max_power_watts` over all nodes, in kW.
    pub fn total_power_kw(&self) -> f64 {
        self.spec.nodes.iter().map(|n| n.max_power_watts).sum::<f64>() / 1000.0
    }
}

pub fn validate_cluster(spec: ClusterSpec) -> Result<ValidatedCluster, ValidationErrors> {
    let mut issues = Vec::new();

    if spec.nodes.is_empty() {
        issues.push(ValidationIssue::NoNodes);
    }

    let mut type_names = BTreeSet::new();
    for t in &spec.gpu_types {
        if t.name.is_empty() {
            issues.push(ValidationIssue::EmptyName("gpu_types"));
        } else if !type_names.insert(t.name.as_str()) {
            issues.push(ValidationIssue::DuplicateGpuType(t.name.clone()));
        }
        if !(t.vram_gb > 0.0) {
            issues.push(ValidationIssue::NonPositiveVram(t.name.clone()));
        }
    }

    let mut node_ids = BTreeSet::new();
    let mut installed_types = BTreeSet::new();
    for node in &spec.nodes {
        if node.node_id.is_empty() {
            issues.push(ValidationIssue::EmptyName("nodes"));
        } else if !node_ids.insert(node.node_id.as_str()) {
            issues.push(ValidationIssue::DuplicateNodeId(node.node_id.clone()));
        }
        if !(node.max_power_watts >= 0.0) || !node.max_power_watts.is_finite() {
            issues.push(ValidationIssue::InvalidPower(node.node_id.clone()));
        }
        for slot in &node.gpus {
            if !type_names.contains(slot.gpu_type.as_str()) {
                issues.push(ValidationIssue::UnknownGpuType {
                    node: node.node_id.clone(),
                    gpu_type: slot.gpu_type.clone(),
                });
            }
            installed_types.insert(slot.gpu_type.as_str());
        }
    }

    let mut group_names = BTreeSet::new();
    for g in &spec.groups {
        if g.group_name.is_empty() {
            issues.push(ValidationIssue::EmptyName("groups"));
        } else if !group_names.insert(g.group_name.as_str()) {
            issues.push(ValidationIssue::DuplicateGroup(g.group_name.clone()));
        }
        if let Selection::Only(nodes) = &g.allowed_nodes {
            for n in nodes {
                if !node_ids.contains(n.as_str()) {
                    issues.push(ValidationIssue::UnknownPolicyReference(n.clone()));
                }
            }
        }
        if let Selection::Only(types) = &g.allowed_gpu_types {
            for t in types {
                if !installed_types.contains(t.as_str()) {
                    issues.push(ValidationIssue::UnknownPolicyReference(t.clone()));
                }
            }
        }
        let limit = |field| ValidationIssue::NonPositiveLimit {
            group: g.group_name.clone(),
            field,
        };
        if g.max_running_jobs == Some(0) {
            issues.push(limit("max_running_jobs"));
        }
        if g.max_gpus_per_job == Some(0) {
            issues.push(limit("max_gpus_per_job"));
        }
        if let Some(h) = g.max_runtime_hours {
            if !(h > 0.0) {
                issues.push(limit("max_runtime_hours"));
            }
        }
    }

    if issues.is_empty() {
        Ok(ValidatedCluster { spec })
    } else {
        Err(ValidationErrors(issues))
    }
}

/// Total installed GPUs per type across all nodes. Types with a zero total are omitted.
pub fn gpu_inventory(cluster: &ValidatedCluster) -> BTreeMap<String, u32> {
    let mut inventory = BTreeMap::new();
    for node in cluster.nodes() {
        for slot in &node.gpus {
            if slot.count > 0 {
                *inventory.entry(slot.gpu_type.clone()).or_insert(0) += slot.count;
            }
        }
    }
    inventory
}

/// The reference cluster: interface node `I` plus the
/// two compute nodes `C1` and `C2`, with the faculty/students policies.
pub fn reference_cluster() -> ClusterSpec {
    ClusterSpec {
        gpu_types: vec![
            GpuType {
                name: "rtx2080ti".into(),
                vram_gb: 11.0,
            },
            GpuType {
                name: "a6000".into(),
                vram_gb: 48.0,
            },
        ],
        nodes: vec![
            NodeSpec {
                node_id: "I".into(),
                gpus: vec![],
                cpu_desc: "1x AMD EPYC 7302P, 3.00 GHz".into(),
                ram_gb: 126,
                storage_gb: 460,
                max_power_watts: 0.0,
            },
            NodeSpec {
                node_id: "C1".into(),
                gpus: vec![GpuSlot {
                    gpu_type: "rtx2080ti".into(),
                    count: 8,
                }],
                cpu_desc: "2x Intel Xeon Silver 4114, 2.20 GHz".into(),
                ram_gb: 230,
                storage_gb: 8230,
                max_power_watts: 2600.0,
            },
            NodeSpec {
                node_id: "C2".into(),
                gpus: vec![GpuSlot {
                    gpu_type: "a6000".into(),
                    count: 3,
                }],
                cpu_desc: "2x AMD EPYC 7452, 2.35GHz".into(),
                ram_gb: 512,
                storage_gb: 8240,
                max_power_watts: 0.0,
            },
        ],
        groups: vec![
            GroupPolicy::unrestricted("faculty"),
            GroupPolicy {
                allowed_nodes: Selection::only(["C1"]),
                max_running_jobs: Some(1),
                ..GroupPolicy::unrestricted("students")
            },
        ],
    }
}
