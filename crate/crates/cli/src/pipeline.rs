//! The pipeline stages. Each stage reads only upstream artifacts, reports a
//! missing one as a prerequisite error, and leaves up-to-date outputs
//! untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dermres_core::catalog::{verify_dataset, ValidationReport};
use dermres_core::evaluator::{exemplar_lists, write_roc_svg};
use dermres_core::fsutil::{sha256_hex, write_if_changed};
use dermres_core::fusion::{DirStore, FusionGraph, FusionLevel, LEVEL3_ID};
use dermres_core::predictions::table_path;
use dermres_core::preprocess::materialize_cache;
use dermres_core::synth::write_synthetic_dataset;
use dermres_core::{
    evaluate_table, load_manifest, Architecture, Cell, DatasetManifest, EvalReport, PredictionTable32, Resolution, Split,
};
use dermres_nn::{
    load_checkpoint, predict_dataset, run_matrix, DirWeightStore, FallbackStore, FeatureMemo, MatrixOptions,
    MemoizedModel, RandomInitStore, RunOutcome, RunRegistry, TrainConfig, TrainingSet32, WeightStore,
};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::report::build_reports;

/// Progress lines go to stderr so stdout stays machine-readable.
pub fn log(stage: &str, msg: impl AsRef<str>) {
    eprintln!("[{stage}] {}", msg.as_ref());
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { workers: 1, resume: false }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

fn save_json<T: Serialize>(path: &Path, v: &T) -> Result<bool> {
    Ok(write_if_changed(path, to_json(v).as_bytes())?)
}

/// Manifest of the configured dataset, or a prerequisite error pointing at
/// `ingest` when a synthetic dataset has not been generated yet.
pub fn manifest(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    let path = &cfg.paths.manifest;
    if !path.exists() {
        return Err(match cfg.synthetic {
            Some(_) => CliError::prerequisite("ingest", format!("{} does not exist yet", path.display())),
            None => CliError::Config(format!("manifest {} does not exist", path.display())),
        });
    }
    Ok(load_manifest(path)?)
}

pub fn ingest(cfg: &PipelineConfig) -> Result<ValidationReport> {
    if let Some(spec) = &cfg.synthetic {
        let dir = cfg.paths.manifest.parent().unwrap_or(Path::new("."));
        write_synthetic_dataset(dir, spec)?;
        log("ingest", format!("synthetic dataset ready at {}", dir.display()));
    }
    let m = manifest(cfg)?;
    let report = verify_dataset(&m);
    let path = cfg.paths.reports.join("dataset.json");
    if save_json(&path, &report)? {
        log("ingest", format!("wrote {}", path.display()));
    }
    for (split, counts) in &report.class_counts {
        log("ingest", format!("{split}: {counts:?}"));
    }
    if !report.ok {
        return Err(CliError::Runtime(format!(
            "dataset check failed: {} unreadable, {} not RGB, {} with wrong dimensions; see {}",
            report.unreadable.len(),
            report.non_rgb.len(),
            report.dimension_mismatches.len(),
            path.display()
        )));
    }
    Ok(report)
}

pub fn preprocess(cfg: &PipelineConfig) -> Result<()> {
    let m = manifest(cfg)?;
    let summary = materialize_cache(&m, &cfg.preprocess_configs(), &cfg.paths.cache_root)?;
    log(
        "preprocess",
        format!("{} cache entries written, {} up to date, under {}", summary.written, summary.skipped, cfg.paths.cache_root.display()),
    );
    Ok(())
}

/// Identifies the training inputs of a resolution: the preprocessing
/// settings plus the labelled training ids.
pub fn train_input_digest(m: &DatasetManifest, cfg: &PipelineConfig, resolution: Resolution) -> String {
    let ids: Vec<(&str, &str)> = m.split(Split::Train).map(|r| (r.image_id.as_str(), r.label.as_str())).collect();
    let key = serde_json::json!({ "preprocess": cfg.preprocess_config(resolution).content_hash(), "train": ids });
    sha256_hex(key.to_string().as_bytes())
}

/// Full training configuration of every cell, in plan order.
pub fn train_configs(cfg: &PipelineConfig, m: &DatasetManifest) -> Vec<TrainConfig> {
    let digests: BTreeMap<Resolution, String> =
        cfg.axes.resolutions.iter().map(|&r| (r, train_input_digest(m, cfg, r))).collect();
    cfg.axes
        .cells()
        .iter()
        .map(|cell| {
            let mut c = cfg.train_config(cell);
            c.input_digest = digests[&cell.resolution].clone();
            c
        })
        .collect()
}

fn weight_store(cfg: &PipelineConfig) -> FallbackStore {
    FallbackStore { primary: DirWeightStore::new(&cfg.paths.weights), fallback: RandomInitStore::default() }
}

pub fn train(cfg: &PipelineConfig, opts: RunOptions) -> Result<Vec<RunOutcome>> {
    let m = manifest(cfg)?;
    let configs = train_configs(cfg, &m);
    let registry = RunRegistry::new(&cfg.paths.runs);
    let pending: BTreeSet<Resolution> =
        configs.iter().filter(|c| !registry.is_complete(c)).map(|c| c.resolution).collect();
    let mut sets = BTreeMap::new();
    for &r in &cfg.axes.resolutions {
        if pending.contains(&r) {
            sets.insert(r, TrainingSet32::from_cache(&m, &cfg.preprocess_config(r), &cfg.paths.cache_root)?);
        } else {
            sets.insert(r, TrainingSet32 { resolution: r, image_ids: vec![], images: vec![], labels: vec![] });
        }
    }
    let store = weight_store(cfg);
    if cfg.training.pretrained {
        for &a in &cfg.axes.architectures {
            log("train", format!("{a} backbone from {}", store.identity(a)?));
        }
    }
    let options = MatrixOptions { workers: opts.workers.max(1), resume: opts.resume, feature_cache_bytes: cfg.feature_cache_bytes() };
    let outcomes = run_matrix(&configs, &sets, &store, &registry, options)?;
    let mut failed = Vec::new();
    for o in &outcomes {
        match o {
            RunOutcome::Trained { result } => {
                let l = &result.epoch_losses;
                let summary = match (l.first(), l.last()) {
                    (Some(a), Some(b)) => format!("loss {a:.4} -> {b:.4} over {} epochs", l.len()),
                    _ => "no epochs".into(),
                };
                log("train", format!("{} trained, {summary}", result.run_id));
            }
            RunOutcome::Skipped { run_id } => log("train", format!("{run_id} up to date")),
            RunOutcome::Failed { run_id, error } => {
                log("train", format!("{run_id} FAILED: {error}"));
                failed.push(run_id.clone());
            }
        }
    }
    if !failed.is_empty() {
        return Err(CliError::Runtime(format!("{} of {} runs failed: {}", failed.len(), outcomes.len(), failed.join(", "))));
    }
    Ok(outcomes)
}

/// What a prediction table was computed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PredictStamp {
    checkpoint_sha256: String,
    preprocess_hash: String,
    test_ids_sha256: String,
}

fn predict_stamp_path(registry: &RunRegistry, run_id: &str) -> PathBuf {
    registry.run_dir(run_id).join("predict.json")
}

fn test_ids_digest(m: &DatasetManifest) -> String {
    let ids: Vec<&str> = m.split(Split::Test).map(|r| r.image_id.as_str()).collect();
    sha256_hex(ids.join("\n").as_bytes())
}

fn stamp_current(registry: &RunRegistry, run_id: &str, stamp: &PredictStamp, preds: &Path) -> bool {
    let Ok(text) = std::fs::read_to_string(predict_stamp_path(registry, run_id)) else { return false };
    serde_json::from_str::<PredictStamp>(&text).is_ok_and(|s| s == *stamp)
        && PredictionTable32::load(preds, run_id).is_ok()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictSummary {
    pub written: Vec<String>,
    pub skipped: Vec<String>,
}

fn predict_group(
    cfg: &PipelineConfig,
    m: &DatasetManifest,
    registry: &RunRegistry,
    jobs: &[(TrainConfig, PredictStamp)],
) -> Result<Vec<String>> {
    let mut memo = FeatureMemo::new(cfg.feature_cache_bytes());
    let mut done = Vec::new();
    for (config, stamp) in jobs {
        let run_id = config.run_id();
        let mut model = load_checkpoint::<f32>(&registry.checkpoint_path(&run_id))?;
        let mut memoized = MemoizedModel::new(&mut model, &mut memo);
        let pc = cfg.preprocess_config(config.resolution);
        let table = predict_dataset(&mut memoized, m, Split::Test, &pc, &cfg.paths.cache_root, &run_id)?;
        table.save(&cfg.paths.predictions)?;
        save_json(&predict_stamp_path(registry, &run_id), stamp)?;
        log("predict", format!("{run_id}: {} test images", table.len()));
        done.push(run_id);
    }
    Ok(done)
}

pub fn predict(cfg: &PipelineConfig, opts: RunOptions) -> Result<PredictSummary> {
    let m = manifest(cfg)?;
    let registry = RunRegistry::new(&cfg.paths.runs);
    let test_ids = test_ids_digest(&m);
    let mut summary = PredictSummary::default();
    let mut groups: BTreeMap<(Architecture, Resolution), Vec<(TrainConfig, PredictStamp)>> = BTreeMap::new();
    for config in train_configs(cfg, &m) {
        let run_id = config.run_id();
        if !registry.is_complete(&config) {
            return Err(CliError::prerequisite("train", format!("run {run_id} has no checkpoint for the current configuration")));
        }
        let record = registry.load(&run_id)?.expect("complete run has a record");
        let stamp = PredictStamp {
            checkpoint_sha256: record.checkpoint_sha256.unwrap_or_default(),
            preprocess_hash: cfg.preprocess_config(config.resolution).content_hash(),
            test_ids_sha256: test_ids.clone(),
        };
        if stamp_current(&registry, &run_id, &stamp, &cfg.paths.predictions) {
            log("predict", format!("{run_id} up to date"));
            summary.skipped.push(run_id);
        } else {
            groups.entry((config.backbone.architecture, config.resolution)).or_default().push((config, stamp));
        }
    }
    let groups: Vec<_> = groups.into_values().collect();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    let workers = opts.workers.max(1).min(groups.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(jobs) = groups.get(i) else { break };
                let r = predict_group(cfg, &m, &registry, jobs);
                results.lock().expect("no worker panicked").push(r);
            });
        }
    });
    for r in results.into_inner().expect("no worker panicked") {
        summary.written.extend(r?);
    }
    summary.written.sort();
    Ok(summary)
}

/// Parse a `--level` value: 1, 2, 3, `single` or `all`.
pub fn parse_level(s: &str) -> Result<Option<FusionLevel>> {
    match s {
        "1" => Ok(Some(FusionLevel::L1)),
        "2" => Ok(Some(FusionLevel::L2)),
        "3" => Ok(Some(FusionLevel::L3)),
        "single" => Ok(Some(FusionLevel::SingleRes)),
        "all" => Ok(None),
        other => Err(CliError::Config(format!("unknown fusion level {other:?}; use 1, 2, 3, single or all"))),
    }
}

fn level_flag(level: FusionLevel) -> &'static str {
    match level {
        FusionLevel::L1 => "fuse --level 1",
        FusionLevel::L2 => "fuse --level 2",
        FusionLevel::L3 => "fuse --level 3",
        FusionLevel::SingleRes => "fuse --level single",
    }
}

/// Stage that produces table `id`.
fn producer(graph: &FusionGraph, id: &str) -> &'static str {
    graph.node(id).map(|n| level_flag(n.level)).unwrap_or("predict")
}

pub fn fuse(cfg: &PipelineConfig, level: Option<FusionLevel>) -> Result<Vec<String>> {
    let graph = cfg.fusion_graph()?;
    if let Some(l) = level {
        if graph.nodes_at(l).next().is_none() {
            return Err(CliError::Config(format!("the plan has no {l:?} nodes; level 2 and 3 need a resolution of 128 px or more")));
        }
    }
    let produced: BTreeSet<&str> =
        graph.nodes.iter().filter(|n| level.is_none_or(|l| l == n.level)).map(|n| n.node_id.as_str()).collect();
    for id in &produced {
        for child in &graph.node(id).expect("node exists").children {
            if !produced.contains(child.as_str()) && !table_path(&cfg.paths.predictions, child).exists() {
                return Err(CliError::prerequisite(producer(&graph, child), format!("{child} is needed by {id}")));
            }
        }
    }
    if graph.save(&cfg.fusion_graph_path())? {
        log("fuse", format!("wrote {}", cfg.fusion_graph_path().display()));
    }
    let mut store = DirStore::new(&cfg.paths.predictions);
    let done = graph.execute::<f32>(&mut store, level)?;
    log("fuse", format!("{} nodes fused", done.len()));
    Ok(done)
}

/// Every table of the plan: runs first, then fusion nodes.
fn all_table_ids(graph: &FusionGraph) -> Vec<String> {
    let mut ids: Vec<String> = graph.axes.cells().iter().map(Cell::run_id).collect();
    ids.extend(graph.nodes.iter().map(|n| n.node_id.clone()));
    ids
}

pub fn evaluate(cfg: &PipelineConfig) -> Result<BTreeMap<String, EvalReport>> {
    let m = manifest(cfg)?;
    let graph = cfg.fusion_graph()?;
    let ids = all_table_ids(&graph);
    if let Some(missing) = ids.iter().find(|id| !table_path(&cfg.paths.predictions, id).exists()) {
        return Err(CliError::prerequisite(producer(&graph, missing), format!("no prediction table for {missing}")));
    }
    let mut out = BTreeMap::new();
    let mut written = 0;
    for id in ids {
        let table = PredictionTable32::load(&cfg.paths.predictions, &id)?;
        let report = evaluate_table(&table, &m)?;
        let path = dermres_core::evaluator::report_path(&cfg.eval_dir(), &id);
        if write_if_changed(&path, report.to_json().as_bytes())? {
            written += 1;
        }
        out.insert(id, report);
    }
    log("evaluate", format!("{} tables evaluated, {written} reports changed", out.len()));
    if let Some(r) = out.get(LEVEL3_ID) {
        log("evaluate", format!("{LEVEL3_ID}: MM {:.4}, SK {:.4}, avg {:.4}", r.auc_mm, r.auc_sk, r.auc_avg));
    }
    Ok(out)
}

pub fn load_reports(cfg: &PipelineConfig, graph: &FusionGraph) -> Result<BTreeMap<String, EvalReport>> {
    let mut out = BTreeMap::new();
    for id in all_table_ids(graph) {
        if !dermres_core::evaluator::report_path(&cfg.eval_dir(), &id).exists() {
            return Err(CliError::prerequisite("evaluate", format!("no evaluation report for {id}")));
        }
        out.insert(id.clone(), EvalReport::load(&cfg.eval_dir(), &id)?);
    }
    Ok(out)
}

/// Files written by `report`.
pub fn report_paths(cfg: &PipelineConfig) -> [PathBuf; 4] {
    let r = &cfg.paths.reports;
    [r.join("tables.txt"), r.join("tables.json"), r.join("roc_level3.svg"), r.join("exemplars.json")]
}

pub fn report(cfg: &PipelineConfig) -> Result<String> {
    let graph = cfg.fusion_graph()?;
    let reports = load_reports(cfg, &graph)?;
    let set = build_reports(&graph, &reports, &cfg.evaluation.approach)?;
    let text = set.render_text();
    let [txt, json, svg, exemplars] = report_paths(cfg);
    let mut changed = Vec::new();
    if write_if_changed(&txt, text.as_bytes())? {
        changed.push(txt);
    }
    if write_if_changed(&json, set.to_json().as_bytes())? {
        changed.push(json);
    }
    if let Some(l3) = reports.get(LEVEL3_ID) {
        if write_roc_svg(l3, "Three-level fusion", &svg)? {
            changed.push(svg);
        }
        let m = manifest(cfg)?;
        let table = PredictionTable32::load(&cfg.paths.predictions, LEVEL3_ID)?;
        if save_json(&exemplars, &exemplar_lists(&table, &m)?)? {
            changed.push(exemplars);
        }
    }
    for p in &changed {
        log("report", format!("wrote {}", p.display()));
    }
    if changed.is_empty() {
        log("report", "reports up to date");
    }
    Ok(text)
}

/// The whole chain, stopping at the first failing stage.
pub fn all(cfg: &PipelineConfig, opts: RunOptions) -> Result<String> {
    ingest(cfg)?;
    preprocess(cfg)?;
    train(cfg, opts)?;
    predict(cfg, opts)?;
    fuse(cfg, None)?;
    evaluate(cfg)?;
    report(cfg)
}

/// Human-readable plan: cells, fusion tree and every output location.
/// Reads nothing from disk.
pub fn describe_plan(cfg: &PipelineConfig) -> Result<String> {
    let graph = cfg.fusion_graph()?;
    let p = &cfg.paths;
    let registry = RunRegistry::new(&p.runs);
    let mut s = String::new();
    s += &format!("manifest: {}\n", p.manifest.display());
    if let Some(spec) = &cfg.synthetic {
        s += &format!("  synthetic: {} train + {} test images, {}x{} px, seed {}\n", spec.n_train, spec.n_test, spec.width, spec.height, spec.seed);
    }
    s += &format!("ingest report: {}\n", p.reports.join("dataset.json").display());
    s += "preprocess:\n";
    for pc in cfg.preprocess_configs() {
        s += &format!(
            "  {} px -> {}/<image_id>.f32 (config {})\n",
            pc.target_resolution,
            p.cache_root.join(pc.target_resolution.to_string()).display(),
            &pc.content_hash()[..12]
        );
    }
    let cells = cfg.axes.cells();
    s += &format!("train: {} cells, weights from {}\n", cells.len(), p.weights.display());
    for cell in &cells {
        let id = cell.run_id();
        let t = cfg.train_config(cell);
        s += &format!(
            "  {id}: {} epochs, batch {}, lr {:e} -> {} | predictions {}\n",
            t.epochs,
            t.batch_size,
            t.optimizer.base_lr,
            registry.checkpoint_path(&id).display(),
            table_path(&p.predictions, &id).display()
        );
    }
    s += &format!("fusion graph: {}\n", cfg.fusion_graph_path().display());
    for level in [FusionLevel::L1, FusionLevel::SingleRes, FusionLevel::L2, FusionLevel::L3] {
        for n in graph.nodes_at(level) {
            s += &format!(
                "  {} <- [{}] ({} runs) -> {}\n",
                n.node_id,
                n.children.join(", "),
                n.leaf_runs,
                table_path(&p.predictions, &n.node_id).display()
            );
        }
    }
    s += &format!("evaluate: {}/<table>.json\n", cfg.eval_dir().display());
    s += "report:\n";
    for path in report_paths(cfg) {
        s += &format!("  {}\n", path.display());
    }
    Ok(s)
}
