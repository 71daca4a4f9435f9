//! Command implementations behind the `yoloret` binary. Each returns a
//! serializable report; the binary only parses arguments and prints.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bench::{benchmark_run, BenchReport};
use crate::config::ModelConfig;
use crate::data::{read_ppm, synth_dataset, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_coco, evaluate_voc, CocoReport, VocReport};
use crate::geometry::Detection;
use crate::model::{FlopsReport, ParamReport, YoloRet, BACKBONE};
use crate::train::{loss_csv, prepare, prime_head, train_two_phase, LossParts, TrainConfig};
use crate::weights::WeightStore;

pub fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::load(p),
        None => Ok(ModelConfig::default()),
    }
}

pub fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Weights from a file, or a seeded random initialization.
pub fn load_weights(model: &YoloRet, path: Option<&Path>, seed: u64) -> Result<WeightStore> {
    let store = match path {
        Some(p) => WeightStore::load(p)?,
        None => model.init(seed),
    };
    model.check_store(&store)?;
    Ok(store)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectReport {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub detections: Vec<Detection>,
}

pub fn run_detect(model: &YoloRet, store: &WeightStore, image: &Path, conf: f32) -> Result<DetectReport> {
    let img = read_ppm(image)?;
    let s = img.shape();
    Ok(DetectReport {
        image: image.display().to_string(),
        width: s.w(),
        height: s.h(),
        detections: model.detect(store, &img, conf)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Voc,
    Coco,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Metrics {
    Voc(VocReport),
    Coco(CocoReport),
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub conf_thresh: f32,
    pub detections: usize,
    pub metrics: Metrics,
}

/// Detections in source-image pixels for every image of `ds`.
pub fn detect_dataset(model: &YoloRet, store: &WeightStore, ds: &Dataset, conf: f32) -> Result<Vec<Vec<Detection>>> {
    ds.images.iter().map(|img| model.detect(store, img, conf)).collect()
}

pub fn run_eval(model: &YoloRet, store: &WeightStore, ds: &Dataset, metric: Metric, conf: f32) -> Result<EvalReport> {
    let dets = detect_dataset(model, store, ds, conf)?;
    let gts = ds.ground_truths();
    let metrics = match metric {
        Metric::Voc => Metrics::Voc(evaluate_voc(&dets, &gts, 0.5)),
        Metric::Coco => Metrics::Coco(evaluate_coco(&dets, &gts)),
    };
    Ok(EvalReport {
        images: ds.len(),
        conf_thresh: conf,
        detections: dets.iter().map(Vec::len).sum(),
        metrics,
    })
}

pub fn run_bench(model: &YoloRet, store: &WeightStore, warmup: usize, iters: usize) -> Result<BenchReport> {
    benchmark_run(model, store, warmup, iters)
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub flops: FlopsReport,
    pub params: ParamReport,
}

pub fn run_flops(model: &YoloRet) -> Result<CostReport> {
    Ok(CostReport {
        flops: model.flops()?,
        params: model.params(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TruncateReport {
    pub blocks_before: usize,
    pub blocks_after: usize,
    pub backbone_params_before: usize,
    pub backbone_params_after: usize,
    pub removed_fraction: f64,
}

/// Drop the parameters of the last `blocks` backbone blocks. The block
/// count is read from the parameter names.
pub fn truncate_store(store: &mut WeightStore, blocks: usize) -> Result<TruncateReport> {
    let root = format!("{BACKBONE}.blocks.");
    let index = |name: &str| -> Option<usize> { name.strip_prefix(&root)?.split('.').next()?.parse().ok() };
    let count = store.names().filter_map(index).max().map_or(0, |m| m + 1);
    if blocks > count {
        return Err(Error::invalid(format!("truncate: {blocks} blocks requested, store has {count}")));
    }
    let backbone_params = |s: &WeightStore| {
        s.iter()
            .filter(|(n, _)| n.starts_with(&format!("{BACKBONE}.")) && !crate::context::is_buffer(n))
            .map(|(_, t)| t.numel())
            .sum::<usize>()
    };
    let before = backbone_params(store);
    let keep = count - blocks;
    store.retain(|n| index(n).is_none_or(|i| i < keep));
    let after = backbone_params(store);
    Ok(TruncateReport {
        blocks_before: count,
        blocks_after: keep,
        backbone_params_before: before,
        backbone_params_after: after,
        removed_fraction: if before == 0 { 0.0 } else { (before - after) as f64 / before as f64 },
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainToyOptions {
    pub seed: u64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    /// Source weights and the number of leading backbone blocks to copy.
    pub transfer: Option<(WeightStore, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainToyReport {
    pub seed: u64,
    pub images: usize,
    pub steps: usize,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub frozen_params: usize,
    pub first_loss: Option<LossParts>,
    pub final_loss: Option<LossParts>,
    pub ap50: f64,
    pub ap50_per_class: BTreeMap<usize, f64>,
    pub weights_sha256: String,
    pub train: TrainConfig,
}

pub struct TrainToyOutcome {
    pub report: TrainToyReport,
    pub weights: WeightStore,
    pub loss_csv: String,
    /// Parameters held fixed during phase 1.
    pub frozen: HashSet<String>,
    /// Weights after the last phase-1 step, if phase 1 ran.
    pub phase1_weights: Option<WeightStore>,
}

/// Initialize (optionally with partial backbone transfer), prime the head,
/// train both phases and score AP50 on the training images.
pub fn run_train_toy(model: &YoloRet, ds: &Dataset, cfg: &TrainConfig, opts: TrainToyOptions) -> Result<TrainToyOutcome> {
    let mut cfg = cfg.clone();
    cfg.epochs_phase1 = opts.epochs_phase1;
    cfg.epochs_phase2 = opts.epochs_phase2;
    cfg.seed = opts.seed;
    cfg.validate()?;
    let mut params = model.init(opts.seed);
    let frozen = match &opts.transfer {
        Some((src, k)) => model.backbone().init_partial_transfer(&mut params, src, *k, opts.seed)?,
        None => HashSet::new(),
    };
    prime_head(model, &mut params, &cfg)?;
    let data = prepare(ds, model.resolution())?;
    let phase1_steps = cfg.epochs_phase1 * data.images.len().div_ceil(cfg.batch_size);
    let mut phase1_weights = None;
    let rows = train_two_phase(model, &mut params, &frozen, &data, &cfg, |row, p| {
        if row.step + 1 == phase1_steps {
            phase1_weights = Some(p.clone());
        }
    })?;
    let dets = detect_dataset(model, &params, ds, 0.01)?;
    let voc = evaluate_voc(&dets, &ds.ground_truths(), 0.5);
    let report = TrainToyReport {
        seed: opts.seed,
        images: ds.len(),
        steps: rows.len(),
        phase1_steps: rows.iter().filter(|r| r.phase == 1).count(),
        phase2_steps: rows.iter().filter(|r| r.phase == 2).count(),
        frozen_params: frozen.len(),
        first_loss: rows.first().map(|r| r.loss),
        final_loss: rows.last().map(|r| r.loss),
        ap50: voc.map,
        ap50_per_class: voc.per_class,
        weights_sha256: sha256_hex(&params.to_bytes()?),
        train: cfg,
    };
    Ok(TrainToyOutcome {
        report,
        weights: params,
        loss_csv: loss_csv(&rows),
        frozen,
        phase1_weights,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthReport {
    pub annotations: String,
    pub images: usize,
    pub size: usize,
    pub seed: u64,
}

pub fn run_synth(dir: &Path, n: usize, size: usize, seed: u64) -> Result<SynthReport> {
    if n == 0 || size < 32 {
        return Err(Error::invalid("synth: need n >= 1 and size >= 32"));
    }
    let ds = synth_dataset(n, size, seed);
    let path = write_dataset(&ds, dir)?;
    Ok(SynthReport {
        annotations: path.display().to_string(),
        images: n,
        size,
        seed,
    })
}
