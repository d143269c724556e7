use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use log::{info, warn};
use ndarray::Array2;
use qmaxvit::checkpoint::{self, CheckpointMeta};
use qmaxvit::data::{load_dataset, make_splits, synth_shapes_dataset, write_dataset, ImageSample, LoadOptions, SplitSpec, Splits};
use qmaxvit::losses::LossWeights;
use qmaxvit::metrics::{self, MetricReport};
use qmaxvit::model::{ModelConfig, QMaxVitUnet, Toggles};
use qmaxvit::nn::counter;
use qmaxvit::train::{self, fit, History, TrainConfig};
use qmaxvit::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::manifest::RunManifest;
use crate::plots::{self, PanelRow};
use crate::{AblateArgs, EvalArgs, Grid, ModelArgs, OptimArgs, Preset, PredictArgs, ReportArgs, SplitArgs, SplitName, SynthArgs, TrainArgs};

/// Loss-weight settings swept by `ablate --grid weights`.
pub const WEIGHT_GRID: [(f64, f64, f64); 4] = [(0.5, 0.5, 0.5), (0.7, 0.2, 0.4), (0.8, 0.4, 0.3), (1.0, 0.5, 0.2)];

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let samples = synth_shapes_dataset(a.n, a.size, a.classes, a.seed)?;
    create_dir(&a.out)?;
    write_dataset(&a.out, &samples)?;
    let mut m = RunManifest::start("synth", a.seed, json!({ "n": a.n, "size": a.size, "classes": a.classes }));
    for p in ["meta.csv", "images", "scribbles", "edges", "masks"] {
        m.add(p);
    }
    m.finish(&a.out)?;
    info!("wrote {} records to {}", samples.len(), a.out.display());
    Ok(())
}

pub fn model_config(m: &ModelArgs) -> ModelConfig {
    let mut cfg = match m.preset {
        Preset::Standard => ModelConfig::standard(m.classes, m.size),
        Preset::Desk => ModelConfig::desk(m.classes, m.size),
    };
    cfg.in_channels = m.channels;
    cfg.toggles = Toggles {
        dual_decoder: !m.no_dual,
        query: !m.no_query,
        edge: !m.no_edge,
    };
    cfg
}

fn train_config(m: &ModelArgs, o: &OptimArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::new(model_config(m));
    cfg.epochs = o.epochs;
    cfg.lr = o.lr;
    cfg.weight_decay = o.wd;
    cfg.loss_weights = LossWeights::new(o.lambda1, o.lambda2, o.lambda3)?;
    cfg.batch_size = o.batch_size;
    cfg.clip_grad_norm = o.clip_grad;
    cfg.dice_background = !o.dice_no_background;
    cfg.augment = !o.no_augment;
    cfg.seed = o.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn load(data: &Path, cfg: &ModelConfig) -> Result<Vec<ImageSample>> {
    let samples = load_dataset(
        data,
        &LoadOptions {
            size: cfg.input_size(),
            num_classes: cfg.num_classes,
            channels: cfg.in_channels,
            edge_supervision: cfg.toggles.edge,
        },
    )?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no records in meta.csv", data.display())));
    }
    Ok(samples)
}

fn subset(samples: &[ImageSample], idx: &[usize]) -> Vec<ImageSample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

fn split_spec(s: &SplitArgs, fold: usize) -> Result<SplitSpec> {
    if fold >= s.folds {
        return Err(Error::Config(format!("--fold {fold} must be below --folds {}", s.folds)));
    }
    Ok(SplitSpec {
        fold_count: s.folds,
        fold_index: fold,
        test_patients: s.test_patients,
    })
}

fn folds_to_run(s: &SplitArgs) -> Result<Vec<usize>> {
    match s.fold {
        Some(f) => {
            split_spec(s, f)?;
            Ok(vec![f])
        }
        None if s.folds == 0 => Err(Error::Config("--folds must be at least 1".into())),
        None => Ok((0..s.folds).collect()),
    }
}

fn with_masks(samples: Vec<ImageSample>, what: &str) -> Option<Vec<ImageSample>> {
    let missing = samples.iter().filter(|s| s.dense_gt.is_none()).count();
    if samples.is_empty() {
        None
    } else if missing > 0 {
        warn!("{missing} of {} {what} records have no mask; skipping their metrics", samples.len());
        let kept: Vec<ImageSample> = samples.into_iter().filter(|s| s.dense_gt.is_some()).collect();
        (!kept.is_empty()).then_some(kept)
    } else {
        Some(samples)
    }
}

/// Outcome of training one fold.
#[derive(Debug, Clone, Serialize)]
struct FoldOutcome {
    fold: usize,
    best_epoch: usize,
    val: Option<BTreeMap<String, f64>>,
    test: Option<BTreeMap<String, f64>>,
}

/// Trains on one split, writing checkpoint, history, curves, reports and a
/// manifest into `dir`.
fn run_fold(cfg: &TrainConfig, samples: &[ImageSample], splits: &Splits, fold: usize, dir: &Path, extra: serde_json::Value) -> Result<FoldOutcome> {
    create_dir(dir)?;
    let mut manifest = RunManifest::start(
        "train",
        cfg.seed,
        json!({ "train": cfg, "fold": fold, "extra": extra, "sizes": {
            "train": splits.train.len(), "val": splits.val.len(), "test": splits.test.len() } }),
    );
    let train_set = subset(samples, &splits.train);
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let val_set = with_masks(subset(samples, &splits.val), "validation");
    let result = fit(cfg, &train_set, val_set.as_deref(), |r| {
        info!(
            "fold {fold} epoch {}/{} loss {:.4} (ssl {:.4} psl {:.4} esl {:.4}) val dsc {:.4} hd95 {:.3} lr {:.2e}",
            r.epoch, cfg.epochs, r.loss_total, r.loss_ssl, r.loss_psl, r.loss_esl, r.val_dsc, r.val_hd95, r.lr
        )
    })?;
    let mut meta = CheckpointMeta::default();
    meta.extra.insert("train_config".into(), serde_json::to_string(cfg)?);
    meta.extra.insert("rng_state".into(), result.trainer.rng_state()?);
    meta.extra.insert("best_epoch".into(), result.best_epoch.to_string());
    meta.extra.insert("fold".into(), fold.to_string());
    checkpoint::save(&dir.join("checkpoint.safetensors"), &result.trainer.model, &meta)?;
    manifest.add("checkpoint.safetensors");
    result.history.write_csv(&dir.join("history.csv"))?;
    manifest.add("history.csv");
    match plots::training_curves(&result.history, &dir.join("curves.png")) {
        Ok(()) => manifest.add("curves.png"),
        Err(e) => warn!("{e}"),
    }
    let mut outcome = FoldOutcome {
        fold,
        best_epoch: result.best_epoch,
        val: None,
        test: None,
    };
    if let Some(v) = &val_set {
        let (r, _) = train::evaluate(&result.trainer.model, v)?;
        write_json(&dir.join("val_report.json"), &r.flat())?;
        manifest.add("val_report.json");
        outcome.val = Some(r.flat());
    }
    if let Some(t) = with_masks(subset(samples, &splits.test), "test") {
        let (r, _) = train::evaluate(&result.trainer.model, &t)?;
        write_json(&dir.join("test_report.json"), &r.flat())?;
        manifest.add("test_report.json");
        info!("fold {fold} test dsc {:.4} hd95 {:.3}", r.dsc_avg, r.hd95_avg);
        outcome.test = Some(r.flat());
    }
    manifest.finish(dir)?;
    Ok(outcome)
}

fn write_summary(path: &Path, rows: &[(String, FoldOutcome)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["run", "fold", "best_epoch", "val_dsc", "val_hd95", "test_dsc", "test_hd95"])?;
    let get = |m: &Option<BTreeMap<String, f64>>, k: &str| {
        m.as_ref()
            .and_then(|m| m.get(k))
            .map(|v| v.to_string())
            .unwrap_or_default()
    };
    for (name, o) in rows {
        w.write_record([
            name.clone(),
            o.fold.to_string(),
            o.best_epoch.to_string(),
            get(&o.val, "dsc.avg"),
            get(&o.val, "hd95.avg"),
            get(&o.test, "dsc.avg"),
            get(&o.test, "hd95.avg"),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(&a.model, &a.optim)?;
    let folds = folds_to_run(&a.split)?;
    let samples = load(&a.data, &cfg.model)?;
    if folds.len() == 1 {
        let splits = make_splits(&samples, split_spec(&a.split, folds[0])?, cfg.seed)?;
        run_fold(&cfg, &samples, &splits, folds[0], &a.out, json!({ "data": a.data }))?;
        return Ok(());
    }
    create_dir(&a.out)?;
    let mut manifest = RunManifest::start("train", cfg.seed, json!({ "train": cfg, "folds": a.split.folds, "data": a.data }));
    let mut rows = Vec::new();
    for f in folds {
        let splits = make_splits(&samples, split_spec(&a.split, f)?, cfg.seed)?;
        let name = format!("fold{f}");
        let o = run_fold(&cfg, &samples, &splits, f, &a.out.join(&name), json!({ "data": a.data }))?;
        manifest.add(&name);
        rows.push((name, o));
    }
    write_summary(&a.out.join("cv_summary.csv"), &rows)?;
    manifest.add("cv_summary.csv");
    manifest.finish(&a.out)
}

fn select(samples: &[ImageSample], name: SplitName, s: &SplitArgs, seed: u64) -> Result<Vec<ImageSample>> {
    if name == SplitName::All {
        return Ok(samples.to_vec());
    }
    let splits = make_splits(samples, split_spec(s, s.fold.unwrap_or(0))?, seed)?;
    let idx = match name {
        SplitName::Train => splits.train,
        SplitName::Val => splits.val,
        SplitName::Test => splits.test,
        SplitName::All => unreachable!(),
    };
    Ok(subset(samples, &idx))
}

fn write_predictions(dir: &Path, samples: &[ImageSample], preds: &[Array2<u32>], manifest: &mut RunManifest) -> Result<()> {
    let pred_dir = dir.join("predictions");
    create_dir(&pred_dir)?;
    for (s, p) in samples.iter().zip(preds) {
        plots::save_label_map(p, &pred_dir.join(format!("{}.png", s.id)))?;
    }
    manifest.add("predictions");
    Ok(())
}

/// Per-sample reports, their aggregate, and CSV/JSON files for both.
fn write_reports(dir: &Path, samples: &[&ImageSample], preds: &[&Array2<u32>], k: usize, manifest: &mut RunManifest) -> Result<MetricReport> {
    let mut reports = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(preds) {
        let gt = s.dense_gt.as_ref().expect("caller keeps masked samples");
        if gt.iter().any(|&v| v as usize >= k) {
            return Err(Error::Data(format!("{}: labels outside {k} model classes", s.id)));
        }
        reports.push(MetricReport::compute(p.view(), gt.view(), k, s.spacing)?);
    }
    let agg = metrics::aggregate(&reports)?;
    let flat = agg.flat();
    write_json(&dir.join("report.json"), &flat)?;
    let path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["metric", "value"])?;
    for (key, v) in &flat {
        w.write_record([key.clone(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join("per_sample.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let keys: Vec<String> = flat.keys().cloned().collect();
    w.write_record(std::iter::once("id".to_string()).chain(keys.iter().cloned()))?;
    for (s, r) in samples.iter().zip(&reports) {
        let f = r.flat();
        w.write_record(std::iter::once(s.id.clone()).chain(keys.iter().map(|k| f[k].to_string())))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    for f in ["report.json", "report.csv", "per_sample.csv"] {
        manifest.add(f);
    }
    Ok(agg)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&a.checkpoint, DType::F32)?;
    let cfg = model.config().clone();
    let samples = select(&load(&a.data, &cfg)?, a.split, &a.split_args, a.seed)?;
    if samples.is_empty() {
        return Err(Error::Data("selected split is empty".into()));
    }
    create_dir(&a.out)?;
    let mut manifest = RunManifest::start(
        "eval",
        a.seed,
        json!({ "checkpoint": a.checkpoint, "data": a.data, "split": format!("{:?}", a.split), "model": cfg }),
    );
    let preds = train::predict(&model, &samples, 8)?;
    write_predictions(&a.out, &samples, &preds, &mut manifest)?;

    let masked: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].dense_gt.is_some()).collect();
    if masked.len() < samples.len() {
        warn!("{} of {} records have no mask; their metrics are skipped", samples.len() - masked.len(), samples.len());
    }
    if masked.is_empty() {
        warn!("no masks available; writing predictions only");
    } else {
        let s: Vec<&ImageSample> = masked.iter().map(|&i| &samples[i]).collect();
        let p: Vec<&Array2<u32>> = masked.iter().map(|&i| &preds[i]).collect();
        let agg = write_reports(&a.out, &s, &p, cfg.num_classes, &mut manifest)?;
        info!("dsc {:.4} hd95 {:.3} over {} records", agg.dsc_avg, agg.hd95_avg, s.len());
    }

    if a.panel > 0 {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(a.seed));
        let mut chosen: Vec<usize> = order.into_iter().take(a.panel).collect();
        chosen.sort_unstable();
        let rows: Vec<PanelRow<'_>> = chosen
            .iter()
            .map(|&i| PanelRow {
                image: &samples[i].image,
                scribble: &samples[i].scribble,
                prediction: &preds[i],
                ground_truth: samples[i].dense_gt.as_ref(),
            })
            .collect();
        plots::qualitative_panel(&rows, &a.out.join("panel.png"))?;
        manifest.add("panel.png");
    }

    let history = a.history.clone().or_else(|| {
        let p = a.checkpoint.parent().unwrap_or(Path::new(".")).join("history.csv");
        p.exists().then_some(p)
    });
    if let Some(h) = history {
        let hist = History::read_csv(&h)?;
        match plots::training_curves(&hist, &a.out.join("curves.png")) {
            Ok(()) => manifest.add("curves.png"),
            Err(e) => warn!("{e}"),
        }
    }
    manifest.finish(&a.out)
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&a.checkpoint, DType::F32)?;
    let cfg = model.config().clone();
    let samples = load(&a.data, &cfg)?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::start("predict", 0, json!({ "checkpoint": a.checkpoint, "data": a.data }));
    let preds = train::predict(&model, &samples, 8)?;
    write_predictions(&a.out, &samples, &preds, &mut manifest)?;
    info!("wrote {} predictions", preds.len());
    manifest.finish(&a.out)
}

/// One row of an ablation grid.
#[derive(Debug, Clone, Serialize)]
struct AblationRow {
    row: usize,
    label: String,
    dual_decoder: bool,
    query: bool,
    edge: bool,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    best_epoch: usize,
    dsc_avg: f64,
    hd95_avg: f64,
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let base = train_config(&a.model, &a.optim)?;
    let fold = a.split.fold.unwrap_or(0);
    let spec = split_spec(&a.split, fold)?;
    let on_test = a.split.test_patients > 0;
    if !on_test && a.split.folds < 2 {
        return Err(Error::Config("ablation needs held-out data: set --test-patients or --folds above 1".into()));
    }
    let configs: Vec<(String, TrainConfig)> = match a.grid {
        Grid::Components => Toggles::grid()
            .into_iter()
            .map(|t| {
                let mut c = base.clone();
                c.model.toggles = t;
                (t.label(), c)
            })
            .collect(),
        Grid::Weights => WEIGHT_GRID
            .iter()
            .enumerate()
            .map(|(i, &(l1, l2, l3))| {
                let mut c = base.clone();
                c.loss_weights = LossWeights::new(l1, l2, l3)?;
                Ok((format!("set #{}: lambda=({l1}, {l2}, {l3})", i + 1), c))
            })
            .collect::<Result<_>>()?,
    };
    let samples = load(&a.data, &base.model)?;
    let splits = make_splits(&samples, spec, base.seed)?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::start("ablate", base.seed, json!({ "grid": format!("{:?}", a.grid), "base": base, "data": a.data }));
    let mut rows = Vec::new();
    for (i, (label, cfg)) in configs.iter().enumerate() {
        info!("ablation row {}/{}: {label}", i + 1, configs.len());
        let name = format!("row{}", i + 1);
        let o = run_fold(cfg, &samples, &splits, fold, &a.out.join(&name), json!({ "label": label }))?;
        manifest.add(&name);
        let report = if on_test { &o.test } else { &o.val };
        let get = |k: &str| report.as_ref().and_then(|m| m.get(k)).copied().unwrap_or(f64::NAN);
        let t = cfg.model.toggles;
        let w = cfg.loss_weights;
        rows.push(AblationRow {
            row: i + 1,
            label: label.clone(),
            dual_decoder: t.dual_decoder,
            query: t.query,
            edge: t.edge,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            best_epoch: o.best_epoch,
            dsc_avg: get("dsc.avg"),
            hd95_avg: get("hd95.avg"),
        });
    }
    let path = a.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&a.out.join("ablation.json"), &rows)?;
    manifest.add("ablation.csv");
    manifest.add("ablation.json");
    for r in &rows {
        info!("{:<40} dsc {:.4} hd95 {:.3}", r.label, r.dsc_avg, r.hd95_avg);
    }
    manifest.finish(&a.out)
}

/// Parameter count, MACs of one forward pass and latency statistics.
#[derive(Debug, Clone, Serialize)]
pub struct Complexity {
    pub parameters: usize,
    pub trainable_active: usize,
    pub macs: u64,
    /// Convolution share of `macs`; proportional to input area.
    pub conv_macs: u64,
    pub input: [usize; 4],
    pub trials: usize,
    pub latency_mean_ms: f64,
    pub latency_std_ms: f64,
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let (model, parameters, source) = match &a.checkpoint {
        Some(p) => {
            let (m, _) = checkpoint::load(p, DType::F32)?;
            (m, checkpoint::parameter_count(p)?, p.display().to_string())
        }
        None => {
            let cfg = model_config(&a.model);
            let m = QMaxVitUnet::new(&cfg, DType::F32, a.seed)?;
            let n = m.store().vars().iter().map(|(_, v)| v.elem_count()).sum();
            (m, n, format!("{:?} preset", a.model.preset))
        }
    };
    let cfg = model.config();
    let s = cfg.input_size();
    let input = [1, cfg.in_channels, s, s];
    let x = Tensor::rand(0f32, 1f32, (1, cfg.in_channels, s, s), &Device::Cpu)?;
    counter::reset();
    model.forward(&x, false)?;
    let (macs, conv_macs) = (counter::macs(), counter::conv_macs());
    let mut times = Vec::with_capacity(a.trials);
    for _ in 0..a.trials {
        let t = Instant::now();
        model.predict(&x)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let n = times.len().max(1) as f64;
    let mean = times.iter().sum::<f64>() / n;
    let std = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
    let c = Complexity {
        parameters,
        trainable_active: model.active_param_count(),
        macs,
        conv_macs,
        input,
        trials: a.trials,
        latency_mean_ms: mean,
        latency_std_ms: std,
    };
    println!("model: {source}");
    println!("parameters: {} ({:.2} M)", c.parameters, c.parameters as f64 / 1e6);
    println!("active trainable parameters: {}", c.trainable_active);
    println!("MACs at {:?}: {} ({:.3} G)", c.input, c.macs, c.macs as f64 / 1e9);
    println!("convolution MACs: {} ({:.3} G)", c.conv_macs, c.conv_macs as f64 / 1e9);
    println!("latency over {} trials: {:.2} ± {:.2} ms", c.trials, c.latency_mean_ms, c.latency_std_ms);
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("complexity.json"), &c)?;
        let mut m = RunManifest::start("report", a.seed, json!({ "source": source, "model": cfg }));
        m.add("complexity.json");
        m.finish(out)?;
    }
    Ok(())
}
