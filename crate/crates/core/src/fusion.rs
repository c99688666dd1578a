//! Probability-averaging ensemble.
//!
//! Level 1 averages every run of one (architecture, resolution); level 2
//! averages one architecture's level-1 nodes over the resolutions from 128 px
//! up; level 3 averages the level-2 nodes over architectures. A separate
//! single-resolution node averages the architectures at one resolution.
//! Every fusion is the unweighted arithmetic mean.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_if_changed;
use crate::plan::{Architecture, MatrixAxes, Resolution};
use crate::predictions::{table_path, PredictionTable, ProbabilityVector};
use crate::scalar::{CompensatedSum, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FusionLevel {
    L1,
    L2,
    L3,
    #[serde(rename = "single_res")]
    SingleRes,
}

pub fn level1_id(architecture: Architecture, resolution: Resolution) -> String {
    format!("L1/{architecture}/{resolution}")
}

pub fn level2_id(architecture: Architecture) -> String {
    format!("L2/{architecture}")
}

pub const LEVEL3_ID: &str = "L3/final";

pub fn single_resolution_id(resolution: Resolution) -> String {
    format!("single/{resolution}")
}

/// Mean of several tables over an identical image set.
///
/// Tables are summed in sorted `source_id` order with compensated summation,
/// so the result does not depend on argument order.
pub fn average_tables<T: Scalar>(node_id: &str, tables: &[&PredictionTable<T>]) -> Result<PredictionTable<T>> {
    let Some(first) = tables.first() else {
        return Err(Error::Contract(format!("fusion node {node_id} has no inputs")));
    };
    let reference: BTreeSet<&String> = first.rows.keys().collect();
    for t in &tables[1..] {
        let ids: BTreeSet<&String> = t.rows.keys().collect();
        if ids != reference {
            let diff: Vec<String> = reference.symmetric_difference(&ids).map(|s| s.to_string()).collect();
            return Err(Error::Fusion(format!(
                "{node_id}: image sets of {} and {} differ; symmetric difference {:?}",
                first.source_id, t.source_id, diff
            )));
        }
    }
    let mut ordered: Vec<&PredictionTable<T>> = tables.to_vec();
    ordered.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    let n = T::from_usize_lossy(ordered.len());

    let mut out = PredictionTable::new(node_id);
    for id in reference {
        let mut acc = [CompensatedSum::<T>::new(); 3];
        for t in &ordered {
            let p = t.rows[id];
            for k in 0..3 {
                acc[k].add(p.0[k]);
            }
        }
        let p = ProbabilityVector(acc.map(|s| s.total() / n));
        out.insert(id.clone(), p)?;
    }
    Ok(out)
}

/// Where fusion reads child tables from and writes node tables to.
pub trait TableStore<T> {
    fn get(&self, source_id: &str) -> Result<Option<PredictionTable<T>>>;
    fn put(&mut self, table: &PredictionTable<T>) -> Result<()>;
}

/// In-memory store, keyed by source id.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore<T> {
    pub tables: BTreeMap<String, PredictionTable<T>>,
}

impl<T: Scalar> MemoryStore<T> {
    pub fn new() -> Self {
        Self { tables: BTreeMap::new() }
    }
}

impl<T: Scalar> TableStore<T> for MemoryStore<T> {
    fn get(&self, source_id: &str) -> Result<Option<PredictionTable<T>>> {
        Ok(self.tables.get(source_id).cloned())
    }

    fn put(&mut self, table: &PredictionTable<T>) -> Result<()> {
        self.tables.insert(table.source_id.clone(), table.clone());
        Ok(())
    }
}

/// Prediction CSVs under a directory (`<dir>/<source_id>.csv`).
#[derive(Debug, Clone)]
pub struct DirStore {
    pub dir: PathBuf,
}

impl DirStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl<T: Scalar> TableStore<T> for DirStore {
    fn get(&self, source_id: &str) -> Result<Option<PredictionTable<T>>> {
        if !table_path(&self.dir, source_id).exists() {
            return Ok(None);
        }
        PredictionTable::load(&self.dir, source_id).map(Some)
    }

    fn put(&mut self, table: &PredictionTable<T>) -> Result<()> {
        table.save(&self.dir).map(|_| ())
    }
}

fn fetch_all<T: Scalar>(store: &dyn TableStore<T>, node_id: &str, ids: &[String]) -> Result<Vec<PredictionTable<T>>> {
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for id in ids {
        match store.get(id)? {
            Some(t) => found.push(t),
            None => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Fusion(format!("{node_id}: missing children {missing:?}")));
    }
    Ok(found)
}

fn fuse_into<T: Scalar>(store: &mut dyn TableStore<T>, node_id: &str, children: &[String]) -> Result<PredictionTable<T>> {
    let tables = fetch_all(&*store, node_id, children)?;
    let refs: Vec<&PredictionTable<T>> = tables.iter().collect();
    let fused = average_tables(node_id, &refs)?;
    store.put(&fused)?;
    Ok(fused)
}

/// Level 1: mean over every (optimiser, repeat) run of one architecture at
/// one resolution.
pub fn fuse_level1<T: Scalar>(
    architecture: Architecture,
    resolution: Resolution,
    axes: &MatrixAxes,
    store: &mut dyn TableStore<T>,
) -> Result<PredictionTable<T>> {
    let children: Vec<String> = axes.level1_cells(architecture, resolution).iter().map(|c| c.run_id()).collect();
    fuse_into(store, &level1_id(architecture, resolution), &children)
}

/// Level 2: mean of one architecture's level-1 nodes. 64 px is never allowed.
pub fn fuse_level2<T: Scalar>(
    architecture: Architecture,
    resolutions: &[Resolution],
    store: &mut dyn TableStore<T>,
) -> Result<PredictionTable<T>> {
    if let Some(r) = resolutions.iter().find(|r| !r.in_multi_resolution_fusion()) {
        return Err(Error::Contract(format!(
            "{}: resolution {r} is excluded from multi-resolution fusion",
            level2_id(architecture)
        )));
    }
    let children: Vec<String> = resolutions.iter().map(|&r| level1_id(architecture, r)).collect();
    fuse_into(store, &level2_id(architecture), &children)
}

/// Level 3: mean of the level-2 nodes of every architecture.
pub fn fuse_level3<T: Scalar>(architectures: &[Architecture], store: &mut dyn TableStore<T>) -> Result<PredictionTable<T>> {
    let children: Vec<String> = architectures.iter().map(|&a| level2_id(a)).collect();
    fuse_into(store, LEVEL3_ID, &children)
}

/// Cross-architecture mean at a single resolution (64 px allowed).
pub fn fuse_single_resolution<T: Scalar>(
    resolution: Resolution,
    architectures: &[Architecture],
    store: &mut dyn TableStore<T>,
) -> Result<PredictionTable<T>> {
    let children: Vec<String> = architectures.iter().map(|&a| level1_id(a, resolution)).collect();
    fuse_into(store, &single_resolution_id(resolution), &children)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionNode {
    pub node_id: String,
    pub level: FusionLevel,
    pub children: Vec<String>,
    /// Number of trained runs transitively under this node.
    pub leaf_runs: usize,
}

/// The complete node tree implied by a run matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionGraph {
    pub axes: MatrixAxes,
    pub nodes: Vec<FusionNode>,
}

impl FusionGraph {
    pub fn from_axes(axes: &MatrixAxes) -> Result<Self> {
        let axes = axes.normalized()?;
        let mut nodes = Vec::new();
        let runs_per_l1 = axes.optimizers.len() * axes.repeats.len();
        for &a in &axes.architectures {
            for &r in &axes.resolutions {
                nodes.push(FusionNode {
                    node_id: level1_id(a, r),
                    level: FusionLevel::L1,
                    children: axes.level1_cells(a, r).iter().map(|c| c.run_id()).collect(),
                    leaf_runs: runs_per_l1,
                });
            }
        }
        for &r in &axes.resolutions {
            nodes.push(FusionNode {
                node_id: single_resolution_id(r),
                level: FusionLevel::SingleRes,
                children: axes.architectures.iter().map(|&a| level1_id(a, r)).collect(),
                leaf_runs: runs_per_l1 * axes.architectures.len(),
            });
        }
        let multi: Vec<Resolution> = axes.resolutions.iter().copied().filter(|r| r.in_multi_resolution_fusion()).collect();
        if !multi.is_empty() {
            for &a in &axes.architectures {
                nodes.push(FusionNode {
                    node_id: level2_id(a),
                    level: FusionLevel::L2,
                    children: multi.iter().map(|&r| level1_id(a, r)).collect(),
                    leaf_runs: runs_per_l1 * multi.len(),
                });
            }
            nodes.push(FusionNode {
                node_id: LEVEL3_ID.to_string(),
                level: FusionLevel::L3,
                children: axes.architectures.iter().map(|&a| level2_id(a)).collect(),
                leaf_runs: runs_per_l1 * multi.len() * axes.architectures.len(),
            });
        }
        Ok(Self { axes, nodes })
    }

    pub fn node(&self, node_id: &str) -> Option<&FusionNode> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn nodes_at(&self, level: FusionLevel) -> impl Iterator<Item = &FusionNode> {
        self.nodes.iter().filter(move |n| n.level == level)
    }

    /// Run ids reachable from `node_id` by walking children.
    pub fn leaf_run_ids(&self, node_id: &str) -> Vec<String> {
        match self.node(node_id) {
            None => vec![node_id.to_string()],
            Some(n) => n.children.iter().flat_map(|c| self.leaf_run_ids(c)).collect(),
        }
    }

    /// Fuse the nodes of one level (or all levels, in dependency order).
    pub fn execute<T: Scalar>(&self, store: &mut dyn TableStore<T>, only: Option<FusionLevel>) -> Result<Vec<String>> {
        let mut done = Vec::new();
        for level in [FusionLevel::L1, FusionLevel::SingleRes, FusionLevel::L2, FusionLevel::L3] {
            if only.is_some_and(|l| l != level) {
                continue;
            }
            for n in self.nodes_at(level) {
                match level {
                    FusionLevel::L2 => {
                        let a: Architecture = n.node_id.trim_start_matches("L2/").parse()?;
                        let rs: Vec<Resolution> = self.axes.resolutions.iter().copied().filter(|r| r.in_multi_resolution_fusion()).collect();
                        fuse_level2(a, &rs, store)?;
                    }
                    _ => {
                        fuse_into(store, &n.node_id, &n.children)?;
                    }
                }
                done.push(n.node_id.clone());
            }
        }
        Ok(done)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes") + "\n"
    }

    /// Write the graph manifest; untouched when unchanged.
    pub fn save(&self, path: &Path) -> Result<bool> {
        write_if_changed(path, self.to_json().as_bytes())
    }
}
