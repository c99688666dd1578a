//! Per-run records, lock files and the run-matrix executor.
//!
//! Layout: `<runs>/<run_id>/run.json`, `<runs>/<run_id>/model.safetensors`
//! (with its `.sha256` sidecar) and, while a run is in progress,
//! `<runs>/<run_id>/lock` holding the owner's process id.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dermres_core::fsutil::{atomic_write, read_verified};
use dermres_core::{Resolution, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{train_run, FeatureCache, RunResult, TrainConfig, TrainingSet};
use crate::weights::WeightStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    pub status: RunStatus,
    pub epoch_losses: Vec<f64>,
    pub checkpoint_sha256: Option<String>,
    pub error: Option<String>,
}

impl RunRecord {
    fn new(config: &TrainConfig, status: RunStatus) -> Self {
        Self {
            run_id: config.run_id(),
            config: config.clone(),
            config_hash: config.content_hash(),
            seed: config.seed,
            status,
            epoch_losses: vec![],
            checkpoint_sha256: None,
            error: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunRegistry {
    pub root: PathBuf,
}

/// Removes the lock file when dropped.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn process_alive(pid: u32) -> bool {
    pid == std::process::id() || Path::new(&format!("/proc/{pid}")).exists()
}

impl RunRegistry {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn record_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("run.json")
    }

    pub fn checkpoint_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("model.safetensors")
    }

    pub fn lock_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("lock")
    }

    pub fn load(&self, run_id: &str) -> Result<Option<RunRecord>> {
        let path = self.record_path(run_id);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| Error::Core(dermres_core::Error::Schema { path, row: 0, message: e.to_string() })),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, record: &RunRecord) -> Result<()> {
        let json = serde_json::to_string_pretty(record).expect("record serializes");
        Ok(atomic_write(&self.record_path(&record.run_id), json.as_bytes())?)
    }

    /// Completed with the same configuration and a checkpoint whose bytes
    /// still match the recorded digest.
    pub fn is_complete(&self, config: &TrainConfig) -> bool {
        let id = config.run_id();
        let Ok(Some(rec)) = self.load(&id) else { return false };
        if rec.status != RunStatus::Completed || rec.config_hash != config.content_hash() {
            return false;
        }
        match read_verified(&self.checkpoint_path(&id)) {
            Ok((_, sha)) => rec.checkpoint_sha256.as_deref() == Some(sha.as_str()),
            Err(_) => false,
        }
    }

    /// Take the per-run lock. A lock left by a dead process is broken only
    /// when `break_stale` is set.
    pub fn lock(&self, run_id: &str, break_stale: bool) -> Result<RunLock> {
        let path = self.lock_path(run_id);
        fs::create_dir_all(self.run_dir(run_id)).map_err(|e| Error::io(self.run_dir(run_id), e))?;
        for _ in 0..2 {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).unwrap_or_default();
                    let pid = holder.trim().parse::<u32>().ok();
                    let stale = pid.map(|p| !process_alive(p)).unwrap_or(true);
                    if !stale {
                        return Err(Error::Locked { run_id: run_id.into(), holder: format!("pid {}", holder.trim()) });
                    }
                    if !break_stale {
                        return Err(Error::Locked {
                            run_id: run_id.into(),
                            holder: format!("stale lock of pid {:?}; rerun with --resume to break it", holder.trim()),
                        });
                    }
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::Locked { run_id: run_id.into(), holder: "concurrent writer".into() })
    }

    /// Every readable record, by run id.
    pub fn records(&self) -> Result<BTreeMap<String, RunRecord>> {
        let mut out = BTreeMap::new();
        let Ok(dir) = fs::read_dir(&self.root) else { return Ok(out) };
        for entry in dir.flatten() {
            let id = entry.file_name().to_string_lossy().into_owned();
            if let Some(rec) = self.load(&id)? {
                out.insert(id, rec);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixOptions {
    pub workers: usize,
    /// Break lock files left behind by dead processes.
    pub resume: bool,
    /// Per-worker byte budget of the frozen-feature cache.
    pub feature_cache_bytes: usize,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        Self { workers: 1, resume: false, feature_cache_bytes: 1 << 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RunOutcome {
    Trained { result: RunResult },
    Skipped { run_id: String },
    Failed { run_id: String, error: String },
}

impl RunOutcome {
    pub fn run_id(&self) -> &str {
        match self {
            RunOutcome::Trained { result } => &result.run_id,
            RunOutcome::Skipped { run_id } | RunOutcome::Failed { run_id, .. } => run_id,
        }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self, RunOutcome::Failed { .. })
    }
}

fn run_cell<T: Scalar>(
    config: &TrainConfig,
    set: &TrainingSet<T>,
    store: &dyn WeightStore,
    registry: &RunRegistry,
    cache: &mut FeatureCache<T>,
    resume: bool,
) -> RunOutcome {
    let run_id = config.run_id();
    if registry.is_complete(config) {
        return RunOutcome::Skipped { run_id };
    }
    let mut attempt = || -> Result<std::result::Result<RunResult, Error>> {
        let _lock = registry.lock(&run_id, resume)?;
        registry.save(&RunRecord::new(config, RunStatus::Running))?;
        let trained = train_run(config, set, store, cache, &registry.checkpoint_path(&run_id));
        let mut rec = RunRecord::new(config, RunStatus::Completed);
        match &trained {
            Ok(r) => {
                rec.epoch_losses = r.epoch_losses.clone();
                rec.checkpoint_sha256 = Some(r.checkpoint_sha256.clone());
            }
            Err(e) => {
                rec.status = RunStatus::Failed;
                rec.error = Some(e.to_string());
            }
        }
        registry.save(&rec)?;
        Ok(trained)
    };
    match attempt() {
        Ok(Ok(result)) => RunOutcome::Trained { result },
        Ok(Err(e)) | Err(e) => RunOutcome::Failed { run_id, error: e.to_string() },
    }
}

/// Execute or resume every cell. Cells sharing an (architecture,
/// resolution) pair go to the same worker so they share frozen features.
/// Individual failures are recorded and never stop the matrix.
pub fn run_matrix<T: Scalar>(
    configs: &[TrainConfig],
    sets: &BTreeMap<Resolution, TrainingSet<T>>,
    store: &dyn WeightStore,
    registry: &RunRegistry,
    options: MatrixOptions,
) -> Result<Vec<RunOutcome>> {
    let mut seen = BTreeSet::new();
    for c in configs {
        if !seen.insert(c.run_id()) {
            return Err(Error::contract(format!("duplicate run id {} in plan", c.run_id())));
        }
        if !sets.contains_key(&c.resolution) {
            return Err(Error::Prerequisite {
                stage: "preprocess",
                detail: format!("no training set loaded at {} px", c.resolution),
            });
        }
    }
    let mut groups: BTreeMap<(dermres_core::Architecture, Resolution), Vec<usize>> = BTreeMap::new();
    for (i, c) in configs.iter().enumerate() {
        groups.entry((c.backbone.architecture, c.resolution)).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<RunOutcome>>> = Mutex::new(vec![None; configs.len()]);
    let workers = options.workers.clamp(1, groups.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let mut cache = FeatureCache::new(options.feature_cache_bytes);
                loop {
                    let g = next.fetch_add(1, Ordering::SeqCst);
                    let Some(group) = groups.get(g) else { break };
                    for &i in group {
                        let c = &configs[i];
                        let out = run_cell(c, &sets[&c.resolution], store, registry, &mut cache, options.resume);
                        slots.lock().expect("slot mutex")[i] = Some(out);
                    }
                }
            });
        }
    });
    Ok(slots.into_inner().expect("slot mutex").into_iter().map(|o| o.expect("every cell ran")).collect())
}
