//! Acceptance checks. Prints one PASS/FAIL line per criterion with its
//! runtime and exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Instant, SystemTime};

use dermres_core::augment::orbit;
use dermres_core::evaluator::{exemplar_lists, PUBLISHED_BASELINES};
use dermres_core::fusion::{fuse_level2, level1_id, level2_id, MemoryStore, TableStore, LEVEL3_ID};
use dermres_core::preprocess::{
    channel_means, grayworld, materialize_cache, preprocess_image, resize_bicubic, resize_bicubic_to, subtract_mean,
};
use dermres_core::synth::{write_synthetic_dataset, SynthSpec};
use dermres_core::{
    average_tables, load_manifest, roc_auc, Architecture, Cell, DihedralElement, FusionGraph, Label, MatrixAxes,
    OptimizerKind, PredictionTable, PreprocessConfig, ProbabilityVector, Resolution, Tensor,
};
use dermres_nn::{
    build_model, lr_at_epoch, probe_batch, softmax_cross_entropy, train_run, tta_predict, AdaptedModel, AugmentPolicy,
    BackboneSpec, Classifier, FeatureCache, Mode, ModelConfig, Optimizer, OptimizerSpec, Partition, RandomInitStore,
    TrainConfig, TrainingSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[3, h, w], |_| rng.random_range(1.0..255.0))
}

fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

fn preprocess_suite() -> Outcome {
    let mut r = rng(1);
    let mut worst_means: f64 = 0.0;
    for _ in 0..50 {
        let (h, w) = (r.random_range(4..40), r.random_range(4..40));
        let x = random_image(&mut r, h, w);
        let g = ok(grayworld(&x))?;
        let m = ok(channel_means(&g))?;
        let mean_all = (m[0] + m[1] + m[2]) / 3.0;
        worst_means = worst_means.max(m.iter().map(|v| (v - mean_all).abs() / mean_all).fold(0.0, f64::max));

        let k = r.random_range(0.1..10.0);
        let gk = ok(grayworld(&x.map(|v| v * k)))?;
        ensure(max_rel(&gk, &g.map(|v| v * k)) <= 1e-9, || "gray-world is not scale equivariant".into())?;
        ensure(max_rel(&ok(grayworld(&g))?, &g) <= 1e-9, || "gray-world is not idempotent".into())?;
    }
    ensure(worst_means <= 1e-6, || format!("channel means differ by {worst_means:e}"))?;

    for res in [Resolution::R64, Resolution::R128] {
        let x = random_image(&mut r, 37, 51);
        let cfg = PreprocessConfig::new(res);
        let composed = ok(resize_bicubic(&ok(subtract_mean(&ok(grayworld(&x))?, cfg.mean_rgb))?, res.side()))?;
        ensure(ok(preprocess_image(&x, &cfg))? == composed, || format!("pipeline differs from composition at {res}"))?;
    }

    let golden: Value = ok(serde_json::from_str(include_str!("../../core/tests/data/bicubic_golden.json")))?;
    for (name, tol) in [("up", 1e-4), ("down", 1e-9)] {
        let case = &golden[name];
        let dims = |k: &str| case[k].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect::<Vec<_>>();
        let vals = |k: &str| case[k].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect::<Vec<_>>();
        let input = ok(Tensor::from_vec(&dims("in_shape"), vals("input")))?;
        let out = dims("out_shape");
        let got = ok(resize_bicubic_to(&input, out[1], out[2]))?;
        let worst = got.data().iter().zip(vals("output")).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(worst <= tol, || format!("bicubic golden {name}: deviation {worst:e}"))?;
    }
    Ok(format!("channel means within {worst_means:.1e}; order and golden files match"))
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn sorted_orbit(x: &Tensor<f64>) -> Result<Vec<Vec<f64>>, String> {
    let mut o: Vec<Vec<f64>> = ok(orbit(x))?.into_iter().map(Tensor::into_vec).collect();
    o.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(o)
}

fn augment_suite() -> Outcome {
    let mut r = rng(2);
    let x = random_image(&mut r, 6, 6);
    let o = ok(orbit(&x))?;
    ensure(o.len() == 8, || format!("orbit has {} elements", o.len()))?;
    let mut compositions = 0;
    for g in DihedralElement::all() {
        for h in DihedralElement::all() {
            let gh = ok(g.apply(&ok(h.apply(&x))?))?;
            let matches: Vec<usize> = (0..8).filter(|&k| o[k] == gh).collect();
            ensure(matches == [g.compose(h).index()], || format!("{g} after {h} does not close"))?;
            compositions += 1;
        }
    }
    let base = sorted_orbit(&x)?;
    for g in DihedralElement::all() {
        let gx = ok(g.apply(&x))?;
        ensure(sorted(gx.data()) == sorted(x.data()), || format!("{g} is lossy"))?;
        ensure(sorted_orbit(&gx)? == base, || format!("orbit of {g} x differs"))?;
    }
    Ok(format!("8 elements, {compositions} compositions closed, lossless, orbit invariant"))
}

fn model_suite() -> Outcome {
    let build = |arch| -> Result<AdaptedModel<f32>, String> {
        ok(build_model(BackboneSpec { architecture: arch, pretrained: true }, &ModelConfig::default(), &RandomInitStore::default(), 7))
    };
    let mut cases = 0;
    for arch in Architecture::ALL {
        let mut m = build(arch)?;
        for res in Resolution::all() {
            let y = ok(m.forward(&probe_batch::<f32>(1, res.side(), 1)))?;
            ensure(y.shape() == [1, 3] && y.all_finite(), || format!("{arch} at {res}: {:?}", y.shape()))?;
            cases += 1;
        }
        let before = m.state();
        let feats = ok(m.frozen_features(&probe_batch::<f32>(4, 64, 3)))?;
        let logits = m.forward_trainable(feats, Mode::Train);
        let (_, d) = softmax_cross_entropy(&logits, &[0, 1, 2, 0]);
        m.params.zero_grad();
        m.backward(&d);
        Optimizer::new(OptimizerSpec::standard(OptimizerKind::Sgdm)).step(&mut m.params, 1e-3);
        let after = m.state();
        for e in m.params.entries() {
            if e.partition == Partition::Frozen {
                ensure(before[&e.name] == after[&e.name] && e.grad.as_ref().is_none_or(|g| g.data().iter().all(|&v| v == 0.0)), || {
                    format!("{arch}: frozen {} moved", e.name)
                })?;
            }
        }
    }
    let m: AdaptedModel<f64> = ok(build_model(
        BackboneSpec { architecture: Architecture::ResNet18, pretrained: true },
        &ModelConfig::default(),
        &RandomInitStore::default(),
        11,
    ))?;
    let w: Vec<f64> = m.params.entries().iter().filter(|e| e.name == "head.fc1.weight").flat_map(|e| e.value.data().to_vec()).collect();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64).sqrt();
    ensure(w.len() >= 10_000 && (0.9..=1.1).contains(&std), || format!("head std {std} over {} weights", w.len()))?;
    Ok(format!("{cases} shapes, frozen weights fixed for 3 architectures, head std {std:.4} over {} weights", w.len()))
}

fn trainer_suite() -> Outcome {
    for kind in OptimizerKind::ALL {
        let c = TrainConfig::for_cell(&Cell { architecture: Architecture::ResNet18, resolution: Resolution::R64, optimizer: kind, repeat: 1 });
        let lr0 = c.optimizer.base_lr;
        for epoch in 1..=15 {
            let want = lr0 / [1.0, 10.0, 100.0][(epoch - 1) / 5];
            let (b, h) = ok(lr_at_epoch(&c, epoch))?;
            ensure((b - want).abs() <= 1e-15 * want && (h / b - 10.0).abs() <= 1e-12, || format!("{kind} epoch {epoch}: {b} / {h}"))?;
        }
    }

    let dir = ok(tempfile::tempdir())?;
    let spec = SynthSpec { n_test: 0, ..SynthSpec::default() };
    let manifest = ok(load_manifest(ok(write_synthetic_dataset(&dir.path().join("data"), &spec))?))?;
    let pre = PreprocessConfig::new(Resolution::R64);
    ok(materialize_cache(&manifest, &[pre], &dir.path().join("cache")))?;
    let set: TrainingSet<f32> = ok(TrainingSet::from_cache(&manifest, &pre, &dir.path().join("cache")))?;
    let mut cache = FeatureCache::new(1 << 30);
    let mut ratios = Vec::new();
    for kind in OptimizerKind::ALL {
        let mut c = TrainConfig::for_cell(&Cell { architecture: Architecture::ResNet18, resolution: Resolution::R64, optimizer: kind, repeat: 1 });
        c.model.frozen_units = Some(7);
        c.augment = AugmentPolicy::RandomElement;
        let run = ok(train_run(&c, &set, &RandomInitStore::default(), &mut cache, &dir.path().join(format!("{kind}.safetensors"))))?;
        let l = &run.epoch_losses;
        let ratio = l[l.len() - 1] / l[0];
        ensure(ratio < 0.5, || format!("{kind}: loss {:.4} -> {:.4}", l[0], l[l.len() - 1]))?;
        ratios.push(format!("{kind} {ratio:.3}"));
    }
    Ok(format!("schedule exact; {} images, final/first loss: {}", set.len(), ratios.join(", ")))
}

/// Logits depend on orientation through the top-left pixel.
struct Corner;

impl Classifier<f64> for Corner {
    fn logits(&mut self, batch: &Tensor<f64>) -> dermres_nn::Result<Tensor<f64>> {
        let (b, c, h, w) = batch.dims4();
        let plane = c * h * w;
        Ok(Tensor::from_fn(&[b, 3], |i| {
            let v = batch.data()[(i / 3) * plane];
            [v, -v, 0.5 * v][i % 3]
        }))
    }
}

fn tta_suite() -> Outcome {
    let mut model: AdaptedModel<f64> = ok(build_model(
        BackboneSpec { architecture: Architecture::ResNet18, pretrained: true },
        &ModelConfig::default(),
        &RandomInitStore::default(),
        3,
    ))?;
    let x = ok(probe_batch::<f64>(1, 64, 9).reshape(&[3, 64, 64]))?;
    let p = ok(tta_predict(&mut model, &x, "x"))?;
    let mut worst: f64 = 0.0;
    for g in DihedralElement::all() {
        let q = ok(tta_predict(&mut model, &ok(g.apply(&x))?, "gx"))?;
        worst = worst.max((0..3).map(|k| (p.0[k] - q.0[k]).abs()).fold(0.0, f64::max));
    }
    ensure(worst <= 1e-5, || format!("orbit deviation {worst:e}"))?;
    let single = ok(model.logits(&ok(Tensor::stack(&ok(orbit(&x))?))?))?;
    let rows: Vec<[f64; 3]> =
        single.data().chunks(3).map(|c| ProbabilityVector::softmax([c[0], c[1], c[2]]).0).collect();
    let spread = rows.iter().flat_map(|a| rows.iter().map(move |b| (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max))).fold(0.0, f64::max);
    ensure(spread > 1e-6, || format!("single orientations agree to {spread:e}; the check is vacuous"))?;
    let sum: f64 = p.0.iter().sum();
    ensure((sum - 1.0).abs() <= 1e-6 && p.0.iter().all(|&v| v >= 0.0), || format!("not a simplex point: {:?}", p.0))?;

    let y = Tensor::from_fn(&[3, 4, 4], |i| i as f64 * 0.37 - 2.0);
    let got = ok(tta_predict(&mut Corner, &y, "stub"))?;
    let logits = ok(Corner.logits(&ok(Tensor::stack(&ok(orbit(&y))?))?))?;
    let rows: Vec<[f64; 3]> = logits.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let mut mean_prob = [0.0; 3];
    let mut mean_logit = [0.0; 3];
    for row in &rows {
        let s = ProbabilityVector::softmax(*row);
        for k in 0..3 {
            mean_prob[k] += s.0[k] / 8.0;
            mean_logit[k] += row[k] / 8.0;
        }
    }
    let other = ProbabilityVector::softmax(mean_logit);
    let dev = (0..3).map(|k| (got.0[k] - mean_prob[k]).abs()).fold(0.0, f64::max);
    let gap = (0..3).map(|k| (got.0[k] - other.0[k]).abs()).fold(0.0, f64::max);
    ensure(dev <= 1e-12 && gap > 1e-3, || format!("stub: {dev:e} from probability mean, {gap:e} from logit mean"))?;
    Ok(format!("orbit deviation {worst:.1e} (single-view spread {spread:.1e}); stub matches probability mean ({gap:.3} from logit mean)"))
}

fn random_table(id: &str, ids: &[String], r: &mut ChaCha8Rng) -> PredictionTable<f64> {
    let mut t = PredictionTable::new(id);
    for img in ids {
        let v: [f64; 3] = [r.random_range(0.01..1.0), r.random_range(0.01..1.0), r.random_range(0.01..1.0)];
        let s: f64 = v.iter().sum();
        t.insert(img.clone(), ProbabilityVector::new(v.map(|x| x / s)).unwrap()).unwrap();
    }
    t
}

fn fusion_suite() -> Outcome {
    let mut r = rng(7);
    let ids: Vec<String> = (0..25).map(|i| format!("img{i:02}")).collect();
    let a = random_table("a", &ids, &mut r);
    let b = random_table("b", &ids, &mut r);
    let c = random_table("c", &ids, &mut r);

    let same = ok(average_tables("n", &[&a, &a, &a]))?;
    let idem = ids.iter().flat_map(|i| (0..3).map(move |k| (i, k))).map(|(i, k)| (same.rows[i].0[k] - a.rows[i].0[k]).abs()).fold(0.0, f64::max);
    ensure(idem <= 1e-12, || format!("mean of identical tables moved by {idem:e}"))?;
    let abc = ok(average_tables("n", &[&a, &b, &c]))?;
    let cab = ok(average_tables("n", &[&c, &a, &b]))?;
    ensure(abc == cab, || "fusion depends on argument order".into())?;
    for p in abc.rows.values() {
        ok(p.check())?;
    }

    let axes = MatrixAxes {
        architectures: Architecture::ALL.to_vec(),
        resolutions: vec![Resolution::R128, Resolution::R224],
        optimizers: vec![OptimizerKind::Sgdm, OptimizerKind::Adam],
        repeats: vec![1],
    };
    let graph = ok(FusionGraph::from_axes(&axes))?;
    let mut store = MemoryStore::new();
    let mut leaves = Vec::new();
    for cell in axes.cells() {
        let t = random_table(&cell.run_id(), &ids, &mut r);
        ok(store.put(&t))?;
        leaves.push(t);
    }
    ok(graph.execute(&mut store, None))?;
    let l3 = ok(store.get(LEVEL3_ID))?.ok_or("no L3 table")?;
    let refs: Vec<&PredictionTable<f64>> = leaves.iter().collect();
    let flat = ok(average_tables("flat", &refs))?;
    let nested_gap =
        ids.iter().flat_map(|i| (0..3).map(move |k| (i, k))).map(|(i, k)| (l3.rows[i].0[k] - flat.rows[i].0[k]).abs()).fold(0.0, f64::max);
    ensure(leaves.len() == 12 && nested_gap <= 1e-9, || format!("{} leaves, nested vs flat {nested_gap:e}", leaves.len()))?;

    let full = ok(FusionGraph::from_axes(&MatrixAxes::full()))?;
    let l3_runs = full.node(LEVEL3_ID).map(|n| n.leaf_runs).unwrap_or(0);
    ensure(l3_runs == 108 && full.leaf_run_ids(LEVEL3_ID).len() == 108, || format!("L3 has {l3_runs} leaf runs"))?;
    let l2 = full.node(&level2_id(Architecture::ResNet18)).ok_or("no L2 node")?;
    ensure(!l2.children.contains(&level1_id(Architecture::ResNet18, Resolution::R64)), || "L2 includes 64 px".into())?;
    let excluded = fuse_level2(Architecture::ResNet18, &[Resolution::R64, Resolution::R128], &mut store).is_err();
    ensure(excluded, || "64 px accepted at level 2".into())?;
    Ok(format!("nested vs flat over 12 leaves {nested_gap:.1e}; 108 leaf runs on the full plan; 64 px rejected at level 2"))
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    num / pairs
}

fn evaluator_suite() -> Outcome {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    while instances < 1000 {
        let n = r.random_range(2..=200);
        let levels = if r.random_bool(0.5) { 5.0 } else { 1e9 };
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0.0f64..1.0) * levels).round() / levels).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let (_, auc) = ok(roc_auc(&scores, &labels))?;
        worst = worst.max((auc - pairwise_auc(&scores, &labels)).abs());
        let (_, warped) = ok(roc_auc(&scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect::<Vec<_>>(), &labels))?;
        ensure((warped - auc).abs() <= 1e-12, || format!("monotone transform moved AUC {auc} -> {warped}"))?;
        instances += 1;
    }
    ensure(worst <= 1e-9, || format!("trapezoid vs pairwise {worst:e}"))?;

    let labels = [true, true, false, false, false];
    let perfect = ok(roc_auc(&[0.9, 0.8, 0.3, 0.2, 0.1], &labels))?.1;
    let uniform = ok(roc_auc(&[1.0 / 3.0; 5], &labels))?.1;
    let tied = ok(roc_auc(&[0.7; 5], &labels))?.1;
    ensure((perfect, uniform, tied) == (1.0, 0.5, 0.5), || format!("{perfect} {uniform} {tied}"))?;

    let dir = ok(tempfile::tempdir())?;
    let mut csv = String::from("image_id,file_path,label,split\n");
    let mut table = PredictionTable::<f64>::new("t");
    for i in 0..30 {
        let label = Label::ALL[i % 3];
        csv += &format!("i{i},i{i}.png,{label},test\n");
        let p = if i % 7 == 0 { ProbabilityVector::uniform() } else { ProbabilityVector::one_hot(Label::ALL[(i * 5) % 3]) };
        ok(table.insert(format!("i{i}"), p))?;
    }
    std::fs::write(dir.path().join("m.csv"), csv).unwrap();
    let manifest = ok(load_manifest(dir.path().join("m.csv")))?;
    for (task, ex) in ok(exemplar_lists(&table, &manifest))? {
        ensure(ex.correct.len() + ex.incorrect.len() == 30, || format!("{task}: partition does not cover the test set"))?;
    }

    let published = [
        ["86.8", "95.3", "91.1"],
        ["85.6", "96.5", "91.0"],
        ["87.4", "94.3", "90.8"],
        ["87.3", "95.5", "91.4"],
        ["87.5", "95.8", "91.7"],
        ["88.3", "n/a", "n/a"],
        ["87.4", "95.9", "91.7"],
        ["89.2", "96.6", "92.9"],
    ];
    for (row, want) in PUBLISHED_BASELINES.iter().zip(published) {
        ensure(row[2..] == want, || format!("baseline {} is {:?}", row[0], &row[2..]))?;
    }
    Ok(format!("{instances} instances within {worst:.1e}; edge cases 1/0.5/0.5; partitions and baselines exact"))
}

/// Every file under `root` with its modification time and content.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, (SystemTime, Vec<u8>)> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let meta = std::fs::metadata(&p).unwrap();
                out.insert(p.clone(), (meta.modified().unwrap(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out
}

fn end_to_end() -> Outcome {
    let repo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let dir = ok(tempfile::tempdir())?;
    let configs = dir.path().join("configs");
    std::fs::create_dir_all(&configs).unwrap();
    for name in ["toy.toml", "toy_plan.toml"] {
        ok(std::fs::copy(repo.join("configs").join(name), configs.join(name)))?;
    }
    let run = || {
        Command::new(env!("CARGO_BIN_EXE_dermres"))
            .arg("--config")
            .arg(configs.join("toy.toml"))
            .arg("--plan")
            .arg(configs.join("toy_plan.toml"))
            .arg("all")
            .env_remove("DERMRES_CACHE_ROOT")
            .output()
    };
    let first = ok(run())?;
    ensure(first.status.success(), || format!("all failed: {}", String::from_utf8_lossy(&first.stderr)))?;
    let work = dir.path().join("work/toy");
    let graph: Value = ok(serde_json::from_str(&ok(std::fs::read_to_string(work.join("predictions/fusion_graph.json")))?))?;
    let nodes = graph["nodes"].as_array().map(Vec::len).unwrap_or(0);
    let l3: Value = ok(serde_json::from_str(&ok(std::fs::read_to_string(work.join("reports/eval/L3/final.json")))?))?;
    let auc = l3["auc_avg"].as_f64().unwrap_or(0.0);
    ensure(auc >= 0.95, || format!("fused average AUC {auc:.4}"))?;
    let runs = std::fs::read_dir(work.join("runs")).map(|d| d.count()).unwrap_or(0);
    ensure(runs == 16, || format!("{runs} runs"))?;

    let before = snapshot(dir.path());
    let second = ok(run())?;
    ensure(second.status.success() && second.stdout == first.stdout, || "re-run output differs".into())?;
    let after = snapshot(dir.path());
    let changed: Vec<_> = after.iter().filter(|(k, v)| before.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    ensure(changed.is_empty() && before.len() == after.len(), || format!("re-run touched {changed:?}"))?;
    Ok(format!("16 runs, {nodes} fusion nodes, fused average AUC {auc:.4}, re-run changed nothing"))
}

fn main() {
    let criteria: [(&str, f64, fn() -> Outcome); 8] = [
        ("preprocess suite", 10.0, preprocess_suite),
        ("augment suite", 5.0, augment_suite),
        ("model suite", 300.0, model_suite),
        ("trainer suite", 600.0, trainer_suite),
        ("TTA suite", f64::INFINITY, tta_suite),
        ("fusion suite", f64::INFINITY, fusion_suite),
        ("evaluator suite", f64::INFINITY, evaluator_suite),
        ("end-to-end toy run", 1800.0, end_to_end),
    ];
    let mut failures = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let limit_text = if limit.is_finite() { format!(", limit {limit:.0}s") } else { String::new() };
        let result = result.and_then(|d| if secs <= limit { Ok(d) } else { Err(format!("{d}; too slow")) });
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1}s{limit_text}): {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {name} ({secs:.1}s{limit_text}): {detail}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
