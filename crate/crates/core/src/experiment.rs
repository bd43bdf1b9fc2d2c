//! Fold × seed × variant sweeps with validation-based model selection.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::Variant;
use crate::data::{DatasetIndex, LabeledTile, Role, TileKey, NUM_CLASSES};
use crate::error::{config_err, Error, Result};
use crate::optim::{AdamConfig, Optimizer};
use crate::params::ModelParams;
use crate::training::{evaluate, train_step, Batch, FeedbackNet, MetricsRecord, Normalization, Pass, StepContext};
use crate::unet::UNetConfig;

/// Tiles plus their fold/role assignment.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub tiles: Vec<LabeledTile>,
    pub index: DatasetIndex,
}

impl Dataset {
    pub fn keys(&self) -> Vec<TileKey> {
        self.tiles.iter().map(|t| t.key.clone()).collect()
    }

    pub fn split(&self, fold: usize, role: Role) -> Result<Vec<&LabeledTile>> {
        let idx = self.index.split(&self.keys(), fold, role)?;
        Ok(idx.into_iter().map(|i| &self.tiles[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub unet: UNetConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Fold indices to run; must exist in the dataset index.
    pub folds: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Plain SGD at `adam.lr` instead of Adam.
    pub sgd: bool,
    pub detach_feedback: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            variants: vec![Variant::SourceTarget],
            seeds: vec![0],
            folds: vec![0],
            epochs: 10,
            batch_size: 4,
            adam: AdamConfig::default(),
            sgd: false,
            detach_feedback: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.variants.is_empty() || self.seeds.is_empty() || self.folds.is_empty() {
            return config_err("need at least one variant, seed and fold");
        }
        if self.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return config_err(format!("learning rate {} must be finite and non-negative", self.adam.lr));
        }
        Ok(())
    }

    pub fn net(&self, variant: Variant) -> FeedbackNet {
        FeedbackNet { detach_feedback: self.detach_feedback, ..FeedbackNet::new(self.unet, variant) }
    }

    /// Every (variant, fold, seed) combination, in output order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &fold in &self.folds {
                for &seed in &self.seeds {
                    out.push(Cell { variant, fold, seed });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub variant: Variant,
    pub fold: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Second-pass validation mIoU, when a validation split exists.
    pub val_mean_iou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: Cell,
    pub net: FeedbackNet,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    /// Test metrics of the selected snapshot, first pass then second.
    pub test: [MetricsRecord; 2],
    pub model: ModelParams<f32>,
}

fn batch_rng(cell: &Cell) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cell.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ cell.fold as u64)
}

/// Trains one cell. The network is initialized from `cell.seed` alone, so
/// every variant starts from the same U-Net weights for a given seed. The
/// snapshot with the best second-pass validation mIoU (earliest on ties)
/// is scored on the test split; without a validation split the final
/// epoch is used.
pub fn train_cell(dataset: &Dataset, cfg: &ExperimentConfig, cell: Cell) -> Result<CellOutcome> {
    let net = cfg.net(cell.variant);
    let train = dataset.split(cell.fold, Role::Train)?;
    let val = dataset.split(cell.fold, Role::Val)?;
    let test = dataset.split(cell.fold, Role::Test)?;
    if train.is_empty() {
        return Err(Error::Usage(format!("fold {} has no training tiles", cell.fold)));
    }
    if test.is_empty() {
        return Err(Error::Usage(format!("fold {} has no test tiles", cell.fold)));
    }

    let mut model = net.build::<f32>(cell.seed)?;
    let norm = Normalization::fit(&train);
    norm.store(&mut model);
    let mut opt = if cfg.sgd { Optimizer::sgd(cfg.adam.lr) } else { Optimizer::adam(cfg.adam) };
    let mut rng = batch_rng(&cell);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best: Option<(f64, usize, ModelParams<f32>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let tiles: Vec<&LabeledTile> = chunk.iter().map(|&i| train[i]).collect();
            let batch = Batch::from_tiles(&tiles, norm)?;
            loss_sum += train_step(&mut model, &net, &batch, &mut opt, StepContext { epoch, batch: bi })?;
            batches += 1;
        }
        let val_mean_iou = if val.is_empty() {
            None
        } else {
            Some(evaluate(&model, &net, &val, cfg.batch_size)?[1].mean_iou)
        };
        if let Some(score) = val_mean_iou {
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch, model.clone()));
            }
        }
        history.push(EpochLog { epoch, train_loss: loss_sum / batches as f64, val_mean_iou });
    }

    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (cfg.epochs, model),
    };
    let mut test_records = evaluate(&model, &net, &test, cfg.batch_size)?;
    for r in &mut test_records {
        r.variant = net.label();
        r.fold = cell.fold;
        r.seed = cell.seed;
        r.epoch = best_epoch;
    }
    Ok(CellOutcome { cell, net, best_epoch, history, test: test_records, model })
}

/// Runs every cell on up to `jobs` worker threads. Results keep the order
/// of [`ExperimentConfig::cells`] regardless of scheduling.
pub fn run_experiment(dataset: &Dataset, cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<CellOutcome>> {
    cfg.validate()?;
    let n_folds = dataset.index.folds();
    if let Some(&f) = cfg.folds.iter().find(|&&f| f >= n_folds) {
        return config_err(format!("fold {f} requested but the index has {n_folds} folds"));
    }
    let cells = cfg.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| cells.par_iter().map(|&c| train_cell(dataset, cfg, c)).collect())
}

pub fn metrics_header(classes: usize) -> Vec<String> {
    let mut h: Vec<String> = ["variant", "fold", "seed", "epoch", "pass"].iter().map(|s| s.to_string()).collect();
    h.extend((0..classes).map(|c| format!("class_{c}_iou")));
    h.push("mean_iou".into());
    h.push("loss".into());
    h
}

pub fn write_metrics_csv<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let classes = records.first().map_or(NUM_CLASSES, |r| r.per_class_iou.len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(metrics_header(classes))?;
    for r in records {
        let mut row = vec![
            r.variant.clone(),
            r.fold.to_string(),
            r.seed.to_string(),
            r.epoch.to_string(),
            r.pass.name().to_string(),
        ];
        row.extend(r.per_class_iou.iter().map(|v| format!("{v:.6}")));
        row.push(format!("{:.6}", r.mean_iou));
        row.push(format!("{:.6}", r.loss));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    let classes = header.len().checked_sub(7).ok_or_else(|| Error::Data("metrics header too short".into()))?;
    if header.iter().collect::<Vec<_>>() != metrics_header(classes) {
        return Err(Error::Data(format!("unexpected metrics header {header:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Data(format!("bad number {s:?} in metrics")));
    let int = |s: &str| s.parse::<u64>().map_err(|_| Error::Data(format!("bad integer {s:?} in metrics")));
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let pass = match &row[4] {
            "first" => Pass::First,
            "second" => Pass::Second,
            other => return Err(Error::Data(format!("unknown pass {other:?}"))),
        };
        let per_class_iou = (0..classes).map(|c| num(&row[5 + c])).collect::<Result<Vec<_>>>()?;
        out.push(MetricsRecord {
            variant: row[0].to_string(),
            fold: int(&row[1])? as usize,
            seed: int(&row[2])?,
            epoch: int(&row[3])? as usize,
            pass,
            per_class_iou,
            mean_iou: num(&row[5 + classes])?,
            loss: num(&row[6 + classes])?,
        });
    }
    Ok(out)
}

/// Test mIoU over runs for one (variant, pass) group.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub pass: Pass,
    pub runs: usize,
    pub mean_iou: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_iou: f64,
}

/// Groups records by (variant, pass) in order of first appearance.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut groups: Vec<((String, Pass), Vec<f64>)> = Vec::new();
    for r in records {
        let key = (r.variant.clone(), r.pass);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.mean_iou),
            None => groups.push((key, vec![r.mean_iou])),
        }
    }
    groups
        .into_iter()
        .map(|((variant, pass), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            SummaryRow { variant, pass, runs: v.len(), mean_iou: mean, std_iou: var.sqrt() }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "pass", "runs", "mean_iou", "std_iou"])?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.pass.name().to_string(),
            r.runs.to_string(),
            format!("{:.6}", r.mean_iou),
            format!("{:.6}", r.std_iou),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_history_csv<W: Write>(out: W, outcomes: &[CellOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "fold", "seed", "epoch", "train_loss", "val_mean_iou"])?;
    for o in outcomes {
        for h in &o.history {
            w.write_record([
                o.net.label(),
                o.cell.fold.to_string(),
                o.cell.seed.to_string(),
                h.epoch.to_string(),
                format!("{:.6}", h.train_loss),
                h.val_mean_iou.map_or(String::new(), |v| format!("{v:.6}")),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
