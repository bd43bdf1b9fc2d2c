//! Command-line entry points: `train`, `eval`, `ablate`, `export-attention`
//! and `synth`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::{AttentionMapView, Variant};
use crate::checkpoint;
use crate::config::{DatasetSource, RunConfig};
use crate::data::{
    make_folds, synth_generate, tile_dataset, to_label_image, write_dataset, DatasetIndex, LabelPalette, LabeledTile,
    Role, SplitSizes,
};
use crate::error::{Error, Result};
use crate::experiment::{
    run_experiment, summarize, write_history_csv, write_metrics_csv, write_summary_csv, CellOutcome, Dataset,
};
use crate::tensor::Tensor;
use crate::training::{argmax_classes, evaluate, infer, FeedbackNet, MetricsRecord, Normalization};
use crate::unet::TapLocation;

#[derive(Parser, Debug)]
#[command(name = "fbseg", version, about = "Two-pass U-Net segmentation with feedback attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train every (variant, fold, seed) cell and write checkpoints and metrics.
    Train(RunArgs),
    /// Re-evaluate the checkpoints of a finished run.
    Eval(EvalArgs),
    /// Train the connector ablation over both tap locations.
    Ablate(RunArgs),
    /// Write attention rows for query pixels and the predicted label map.
    ExportAttention(ExportArgs),
    /// Write a synthetic dataset as images/ and labels/ PNGs.
    Synth(SynthArgs),
}

/// Settings shared by `train` and `ablate`. Flags override `--config`,
/// which overrides the defaults.
#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// key = value settings file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `synthetic` or a directory with images/ and labels/
    #[arg(long)]
    pub dataset: Option<String>,
    /// Connector variant(s), comma separated: unet, st, self, add, conv1x1, se, light
    #[arg(long)]
    pub variant: Option<String>,
    /// one-conv or two-conv
    #[arg(long)]
    pub tap: Option<String>,
    #[arg(long)]
    pub base_channels: Option<String>,
    #[arg(long)]
    pub depth: Option<String>,
    /// Explicit seed value(s), comma separated
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<String>,
    /// Number of seeds; runs seeds 0..N
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub folds: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    /// adam or sgd
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Backpropagate through the first pass as well
    #[arg(long)]
    pub full_backprop: bool,
    /// Output directory
    #[arg(long)]
    pub out: Option<String>,
    /// Cells trained concurrently
    #[arg(long)]
    pub jobs: Option<String>,
    #[arg(long)]
    pub tile_size: Option<String>,
    /// Center-crop side for directory datasets (0 keeps whole tiles)
    #[arg(long)]
    pub crop: Option<String>,
    /// Seed for fold assignment and synthetic data
    #[arg(long)]
    pub data_seed: Option<String>,
    #[arg(long)]
    pub synth_images: Option<String>,
    #[arg(long)]
    pub synth_size: Option<String>,
    /// train/val/test tile counts, or `auto`
    #[arg(long)]
    pub split: Option<String>,
    /// raw:class pairs, e.g. 0:0,85:1,170:2,255:3
    #[arg(long)]
    pub palette: Option<String>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let seeds = match &self.seeds {
            Some(n) => {
                let n: u64 = n
                    .trim()
                    .parse()
                    .map_err(|_| Error::Usage(format!("--seeds expects a count, got {n:?}")))?;
                Some((0..n).map(|s| s.to_string()).collect::<Vec<_>>().join(","))
            }
            None => self.seed.clone(),
        };
        let flags = [
            ("dataset", &self.dataset),
            ("variant", &self.variant),
            ("tap", &self.tap),
            ("base-channels", &self.base_channels),
            ("depth", &self.depth),
            ("seeds", &seeds),
            ("folds", &self.folds),
            ("epochs", &self.epochs),
            ("batch-size", &self.batch_size),
            ("lr", &self.lr),
            ("optimizer", &self.optimizer),
            ("out", &self.out),
            ("jobs", &self.jobs),
            ("tile-size", &self.tile_size),
            ("crop", &self.crop),
            ("data-seed", &self.data_seed),
            ("synth-images", &self.synth_images),
            ("synth-size", &self.synth_size),
            ("split", &self.split),
            ("palette", &self.palette),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if self.full_backprop {
            cfg.full_backprop = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train` or `ablate`
    #[arg(long)]
    pub run: PathBuf,
    /// train, val or test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output CSV (default: <run>/eval_<split>.csv)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Checkpoint directory (holds model.bin, model.manifest, net.txt)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Grayscale input tile
    #[arg(long)]
    pub image: PathBuf,
    /// Query pixel as y,x; repeatable
    #[arg(long = "query")]
    pub queries: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 56)]
    pub images: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 2 usage or configuration, 3 data or I/O,
/// 4 numeric failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let outcomes = train_run(&cfg, &[cfg.tap])?;
            print_summary(&outcomes);
            Ok(())
        }
        Command::Ablate(args) => {
            let mut cfg = args.resolve()?;
            if args.variant.is_none() && !config_sets_variant(args.config.as_deref())? {
                cfg.variants = ABLATION_VARIANTS.to_vec();
            }
            let outcomes = train_run(&cfg, &[TapLocation::AfterConv1, TapLocation::AfterConv2])?;
            print_summary(&outcomes);
            Ok(())
        }
        Command::Eval(args) => eval_run(&args),
        Command::ExportAttention(args) => export_attention(&args),
        Command::Synth(args) => {
            let tiles = synth_generate(args.images, args.size, args.seed);
            write_dataset(&args.out, &tiles, &LabelPalette::default())?;
            println!("wrote {} synthetic images to {}", tiles.len(), args.out.display());
            Ok(())
        }
    }
}

/// Connectors compared by `ablate` unless a variant list is given.
pub const ABLATION_VARIANTS: [Variant; 6] = [
    Variant::Add,
    Variant::Conv1x1,
    Variant::SqueezeExcitation,
    Variant::Light,
    Variant::SourceTarget,
    Variant::SelfAttention,
];

fn config_sets_variant(path: Option<&Path>) -> Result<bool> {
    let Some(path) = path else { return Ok(false) };
    let text = fs::read_to_string(path)?;
    Ok(text.lines().any(|l| {
        let key = l.split('#').next().unwrap_or("").split('=').next().unwrap_or("").trim();
        matches!(key, "variant" | "variants")
    }))
}

/// Tiles and fold index for a resolved configuration.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let (tiles, default_split): (Vec<LabeledTile>, fn(usize) -> SplitSizes) = match &cfg.dataset {
        DatasetSource::Synthetic => (synth_generate(cfg.synth_images, cfg.synth_size, cfg.data_seed), SplitSizes::sevenths),
        DatasetSource::Dir(dir) => {
            if !dir.is_dir() {
                return Err(Error::Data(format!("dataset directory {} does not exist", dir.display())));
            }
            let tiles = tile_dataset(&dir.join("images"), &dir.join("labels"), cfg.tile_size, &cfg.palette)?;
            let tiles = if cfg.crop > 0 && cfg.crop < cfg.tile_size {
                tiles.iter().map(|t| t.center_crop(cfg.crop)).collect::<Result<_>>()?
            } else {
                tiles
            };
            let rule: fn(usize) -> SplitSizes =
                |n| if n == SplitSizes::SSTEM.total() { SplitSizes::SSTEM } else { SplitSizes::proportional(n) };
            (tiles, rule)
        }
    };
    let sizes = cfg.split.unwrap_or_else(|| default_split(tiles.len()));
    let folds = make_folds(tiles.len(), cfg.folds, sizes, cfg.data_seed)?;
    let keys: Vec<_> = tiles.iter().map(|t| t.key.clone()).collect();
    Ok(Dataset { index: DatasetIndex::build(&keys, &folds), tiles })
}

fn cell_dir_name(o: &CellOutcome) -> String {
    format!("{}-f{}-s{}", o.net.label(), o.cell.fold, o.cell.seed)
}

/// Checkpoint metadata: enough to rebuild the network and identify the cell.
pub struct CheckpointMeta {
    pub net: FeedbackNet,
    pub fold: usize,
    pub seed: u64,
    pub epoch: usize,
    pub palette: LabelPalette,
}

pub const META_FILE: &str = "net.txt";
/// Checkpoint directory names in training order, so `eval` rows line up
/// with `metrics.csv`.
pub const ORDER_FILE: &str = "order.txt";

impl CheckpointMeta {
    fn to_text(&self) -> String {
        let u = &self.net.unet;
        format!(
            "variant = {}\ntap = {}\nbase-channels = {}\ndepth = {}\nfull-backprop = {}\nfold = {}\nseed = {}\nepoch = {}\npalette = {}\n",
            self.net.variant().name(),
            u.tap_location.label(),
            u.base_channels,
            u.depth,
            !self.net.detach_feedback,
            self.fold,
            self.seed,
            self.epoch,
            self.palette.to_spec()
        )
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(META_FILE))?;
        let mut cfg = RunConfig::default();
        let (mut fold, mut epoch) = (None, None);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad line {line:?} in {}", dir.join(META_FILE).display())))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Data(format!("bad number {v:?} in checkpoint metadata")))
            };
            match k.trim() {
                "fold" => fold = Some(num(v)?),
                "epoch" => epoch = Some(num(v)?),
                key => cfg.set(key, v)?,
            }
        }
        let (Some(fold), Some(epoch), [variant], [seed]) = (fold, epoch, &cfg.variants[..], &cfg.seeds[..]) else {
            return Err(Error::Data(format!("incomplete checkpoint metadata in {}", dir.display())));
        };
        let mut net = FeedbackNet::new(cfg.unet(), *variant);
        net.detach_feedback = !cfg.full_backprop;
        Ok(Self { net, fold, seed: *seed, epoch, palette: cfg.palette })
    }
}

fn write_csv_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Trains every tap × variant × fold × seed cell and writes the run
/// directory.
fn train_run(cfg: &RunConfig, taps: &[TapLocation]) -> Result<Vec<CellOutcome>> {
    let dataset = load_dataset(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    let seeds: String = cfg.seeds.iter().map(|s| format!("{s}\n")).collect();
    fs::write(cfg.out.join("seeds.txt"), seeds)?;
    dataset.index.write(&cfg.out.join("index.csv"))?;

    let mut outcomes: Vec<CellOutcome> = Vec::new();
    for &tap in taps {
        let run_cfg = RunConfig { tap, ..cfg.clone() };
        outcomes.extend(run_experiment(&dataset, &run_cfg.experiment(), cfg.jobs)?);
    }
    let order: String = outcomes.iter().map(|o| cell_dir_name(o) + "\n").collect();
    fs::create_dir_all(cfg.out.join("checkpoints"))?;
    fs::write(cfg.out.join("checkpoints").join(ORDER_FILE), order)?;
    for o in &outcomes {
        let dir = cfg.out.join("checkpoints").join(cell_dir_name(o));
        checkpoint::save(&dir, &o.model)?;
        let meta = CheckpointMeta {
            net: o.net,
            fold: o.cell.fold,
            seed: o.cell.seed,
            epoch: o.best_epoch,
            palette: cfg.palette.clone(),
        };
        fs::write(dir.join(META_FILE), meta.to_text())?;
    }
    let records: Vec<MetricsRecord> = outcomes.iter().flat_map(|o| o.test.clone()).collect();
    write_csv_file(&cfg.out.join("metrics.csv"), |b| write_metrics_csv(b, &records))?;
    write_csv_file(&cfg.out.join("summary.csv"), |b| write_summary_csv(b, &summarize(&records)))?;
    write_csv_file(&cfg.out.join("history.csv"), |b| write_history_csv(b, &outcomes))?;
    Ok(outcomes)
}

fn print_summary(outcomes: &[CellOutcome]) {
    let records: Vec<MetricsRecord> = outcomes.iter().flat_map(|o| o.test.clone()).collect();
    println!("{:<16} {:<7} {:>4} {:>9} {:>9}", "variant", "pass", "runs", "mIoU", "std");
    for r in summarize(&records) {
        println!(
            "{:<16} {:<7} {:>4} {:>9.4} {:>9.4}",
            r.variant,
            r.pass.name(),
            r.runs,
            r.mean_iou,
            r.std_iou
        );
    }
}

fn eval_run(args: &EvalArgs) -> Result<()> {
    let role: Role = args.split.parse()?;
    if !args.run.join("config.txt").is_file() {
        return Err(Error::Data(format!("{} is not a run directory (no config.txt)", args.run.display())));
    }
    let mut cfg = RunConfig::default();
    cfg.apply_file(&args.run.join("config.txt"))?;
    let mut dataset = load_dataset(&cfg)?;
    dataset.index = DatasetIndex::read(&args.run.join("index.csv"))?;

    let ckpt_root = args.run.join("checkpoints");
    let dirs: Vec<PathBuf> = match fs::read_to_string(ckpt_root.join(ORDER_FILE)) {
        Ok(text) => text.lines().filter(|l| !l.is_empty()).map(|l| ckpt_root.join(l)).collect(),
        Err(_) => {
            let mut dirs: Vec<PathBuf> = fs::read_dir(&ckpt_root)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join(META_FILE).is_file())
                .collect();
            dirs.sort();
            dirs
        }
    };
    if dirs.is_empty() {
        return Err(Error::Data(format!("no checkpoints under {}", ckpt_root.display())));
    }
    let mut rows = Vec::new();
    for dir in dirs {
        let meta = CheckpointMeta::read(&dir)?;
        let model = checkpoint::load(&dir)?;
        let tiles = dataset.split(meta.fold, role)?;
        for mut r in evaluate(&model, &meta.net, &tiles, cfg.batch_size)? {
            r.variant = meta.net.label();
            r.fold = meta.fold;
            r.seed = meta.seed;
            r.epoch = meta.epoch;
            rows.push(r);
        }
    }
    let out = args.out.clone().unwrap_or_else(|| args.run.join(format!("eval_{role}.csv")));
    write_csv_file(&out, |b| write_metrics_csv(b, &rows))?;
    for r in &rows {
        println!(
            "{:<16} fold {} seed {} {:<6} mIoU {:.4}",
            r.variant,
            r.fold,
            r.seed,
            r.pass.name(),
            r.mean_iou
        );
    }
    Ok(())
}

fn parse_query(q: &str) -> Result<(usize, usize)> {
    let bad = || Error::Usage(format!("query {q:?} must be y,x"));
    let (y, x) = q.split_once(',').ok_or_else(bad)?;
    Ok((y.trim().parse().map_err(|_| bad())?, x.trim().parse().map_err(|_| bad())?))
}

fn export_attention(args: &ExportArgs) -> Result<()> {
    let meta = CheckpointMeta::read(&args.checkpoint)?;
    let model = checkpoint::load(&args.checkpoint)?;
    let img = image::open(&args.image)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    meta.net.unet.check_input(h, w)?;
    let queries = args.queries.iter().map(|q| parse_query(q)).collect::<Result<Vec<_>>>()?;
    if let Some(&(y, x)) = queries.iter().find(|&&(y, x)| y >= h || x >= w) {
        return Err(Error::Usage(format!("query ({y},{x}) lies outside the {h}x{w} image")));
    }
    if !queries.is_empty() && !meta.net.variant().is_attention() {
        return Err(Error::Usage(format!(
            "variant {} has no attention map; use a st or self checkpoint",
            meta.net.variant().name()
        )));
    }
    let norm = Normalization::from_model(&model);
    let pixels = img.pixels().map(|p| (p.0[0] as f32 / 255.0 - norm.mean) / norm.std).collect();
    let out = infer(&model, &meta.net, Tensor::from_vec([1, 1, h, w], pixels)?)?;

    fs::create_dir_all(&args.out)?;
    let pred: Vec<u8> = argmax_classes(&out.second_logits).into_iter().map(|c| c as u8).collect();
    if h == w {
        to_label_image(&pred, w, &meta.palette).save(args.out.join("prediction.png"))?;
    } else {
        let lab = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([meta.palette.raw_of(pred[y as usize * w + x as usize])])
        });
        lab.save(args.out.join("prediction.png"))?;
    }
    if let Some(attn) = &out.attn {
        let view = AttentionMapView::from_tensor(attn, h, w)?;
        for &(y, x) in &queries {
            let row = view.row(0, y, x);
            let max = row.iter().copied().fold(0.0f32, f32::max);
            let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
            let map = image::GrayImage::from_fn(w as u32, h as u32, |px, py| {
                image::Luma([(row[py as usize * w + px as usize] * scale).round().clamp(0.0, 255.0) as u8])
            });
            map.save(args.out.join(format!("attention_y{y}_x{x}.png")))?;
        }
    }
    println!(
        "wrote prediction and {} attention map(s) to {}",
        queries.len(),
        args.out.display()
    );
    Ok(())
}
