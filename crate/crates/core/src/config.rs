//! Run configuration with a plain `key = value` file format.
//!
//! Resolution order is defaults, then the config file, then command-line
//! flags; every source goes through [`RunConfig::set`], so all values are
//! parsed and validated the same way.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::Variant;
use crate::data::{LabelPalette, SplitSizes};
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::optim::AdamConfig;
use crate::unet::{TapLocation, UNetConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic,
    /// Directory holding `images/` and `labels/`.
    Dir(PathBuf),
}

impl DatasetSource {
    fn render(&self) -> String {
        match self {
            DatasetSource::Synthetic => "synthetic".into(),
            DatasetSource::Dir(p) => p.display().to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub variants: Vec<Variant>,
    pub tap: TapLocation,
    pub base_channels: usize,
    pub depth: usize,
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub full_backprop: bool,
    pub out: PathBuf,
    pub jobs: usize,
    /// Tile side used when cutting source images.
    pub tile_size: usize,
    /// Center-crop side applied to every tile; 0 keeps whole tiles.
    pub crop: usize,
    /// Seed for fold assignment and for the synthetic generator.
    pub data_seed: u64,
    pub synth_images: usize,
    pub synth_size: usize,
    /// Explicit train/val/test tile counts; `None` picks a default.
    pub split: Option<SplitSizes>,
    pub palette: LabelPalette,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic,
            variants: vec![Variant::SelfAttention],
            tap: TapLocation::AfterConv2,
            base_channels: 8,
            depth: 4,
            seeds: vec![0],
            folds: 1,
            epochs: 100,
            batch_size: 4,
            lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            full_backprop: false,
            out: PathBuf::from("runs/latest"),
            jobs: 1,
            tile_size: 256,
            crop: 64,
            data_seed: 0,
            synth_images: 56,
            synth_size: 32,
            split: None,
            palette: LabelPalette::default(),
        }
    }
}

/// Keys accepted by [`RunConfig::set`], in the order they are written out.
pub const KEYS: [&str; 21] = [
    "dataset",
    "variant",
    "tap",
    "base-channels",
    "depth",
    "seeds",
    "folds",
    "epochs",
    "batch-size",
    "lr",
    "optimizer",
    "full-backprop",
    "out",
    "jobs",
    "tile-size",
    "crop",
    "data-seed",
    "synth-images",
    "synth-size",
    "split",
    "palette",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Usage(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(Error::Usage(format!("invalid value {other:?} for {key}; expected true or false"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting. Underscores in keys are accepted
    /// in place of dashes.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let v = value.trim();
        match key.as_str() {
            "dataset" => {
                self.dataset = if v == "synthetic" {
                    DatasetSource::Synthetic
                } else {
                    DatasetSource::Dir(PathBuf::from(v))
                }
            }
            "variant" | "variants" => self.variants = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?,
            "tap" => self.tap = v.parse()?,
            "base-channels" => self.base_channels = parse(&key, v)?,
            "depth" => self.depth = parse(&key, v)?,
            "seeds" | "seed" => self.seeds = parse_list(&key, v)?,
            "folds" => self.folds = parse(&key, v)?,
            "epochs" => self.epochs = parse(&key, v)?,
            "batch-size" => self.batch_size = parse(&key, v)?,
            "lr" => self.lr = parse(&key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    other => return Err(Error::Usage(format!("unknown optimizer {other:?}; expected adam or sgd"))),
                }
            }
            "full-backprop" => self.full_backprop = parse_bool(&key, v)?,
            "out" => self.out = PathBuf::from(v),
            "jobs" => self.jobs = parse(&key, v)?,
            "tile-size" => self.tile_size = parse(&key, v)?,
            "crop" => self.crop = parse(&key, v)?,
            "data-seed" => self.data_seed = parse(&key, v)?,
            "synth-images" => self.synth_images = parse(&key, v)?,
            "synth-size" => self.synth_size = parse(&key, v)?,
            "split" => {
                self.split = if v == "auto" {
                    None
                } else {
                    let parts: Vec<usize> = v
                        .split('/')
                        .map(|p| parse(&key, p))
                        .collect::<Result<_>>()?;
                    let [train, val, test] = parts[..] else {
                        return Err(Error::Usage(format!("split {v:?} must be train/val/test")));
                    };
                    Some(SplitSizes { train, val, test })
                }
            }
            "palette" => self.palette = LabelPalette::parse(v)?,
            other => {
                return Err(Error::Usage(format!(
                    "unknown setting {other:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies every `key = value` line of a config file. Blank lines and
    /// `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected key = value, got {line:?}", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            base_channels: self.base_channels,
            depth: self.depth,
            tap_location: self.tap,
            ..Default::default()
        }
    }

    /// Tile side the network will see.
    pub fn input_size(&self) -> usize {
        match self.dataset {
            DatasetSource::Synthetic => self.synth_size,
            DatasetSource::Dir(_) if self.crop > 0 => self.crop,
            DatasetSource::Dir(_) => self.tile_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet().validate()?;
        let usage = |m: String| Err(Error::Usage(m));
        if self.variants.is_empty() {
            return usage("no variant given".into());
        }
        if self.seeds.is_empty() {
            return usage("no seed given".into());
        }
        if self.folds == 0 || self.epochs == 0 || self.batch_size == 0 || self.jobs == 0 {
            return usage("folds, epochs, batch-size and jobs must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return usage(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if let DatasetSource::Dir(_) = self.dataset {
            if self.tile_size == 0 {
                return usage("tile-size must be positive".into());
            }
            if self.crop > self.tile_size {
                return usage(format!("crop {} exceeds tile-size {}", self.crop, self.tile_size));
            }
        } else if self.synth_images == 0 {
            return usage("synth-images must be positive".into());
        }
        self.unet().check_input(self.input_size(), self.input_size())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            unet: self.unet(),
            variants: self.variants.clone(),
            seeds: self.seeds.clone(),
            folds: (0..self.folds).collect(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig { lr: self.lr, ..Default::default() },
            sgd: self.optimizer == OptimizerKind::Sgd,
            detach_feedback: !self.full_backprop,
        }
    }

    /// Every resolved setting as `key = value` lines; feeding the text back
    /// through [`RunConfig::apply_text`] reproduces this configuration.
    pub fn to_text(&self) -> String {
        let join = |it: Vec<String>| it.join(",");
        let mut s = String::new();
        for key in KEYS {
            let value = match key {
                "dataset" => self.dataset.render(),
                "variant" => join(self.variants.iter().map(|v| v.name().to_string()).collect()),
                "tap" => self.tap.label().to_string(),
                "base-channels" => self.base_channels.to_string(),
                "depth" => self.depth.to_string(),
                "seeds" => join(self.seeds.iter().map(u64::to_string).collect()),
                "folds" => self.folds.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch-size" => self.batch_size.to_string(),
                "lr" => format!("{:e}", self.lr),
                "optimizer" => match self.optimizer {
                    OptimizerKind::Adam => "adam".into(),
                    OptimizerKind::Sgd => "sgd".into(),
                },
                "full-backprop" => self.full_backprop.to_string(),
                "out" => self.out.display().to_string(),
                "jobs" => self.jobs.to_string(),
                "tile-size" => self.tile_size.to_string(),
                "crop" => self.crop.to_string(),
                "data-seed" => self.data_seed.to_string(),
                "synth-images" => self.synth_images.to_string(),
                "synth-size" => self.synth_size.to_string(),
                "split" => match self.split {
                    Some(sp) => format!("{}/{}/{}", sp.train, sp.val, sp.test),
                    None => "auto".into(),
                },
                "palette" => self.palette.to_spec(),
                _ => unreachable!("every key is rendered"),
            };
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("variant = st,self\nseeds = 7, 8\nlr = 0.001\ntap = one-conv\nsplit = 4/2/2\npalette = 0:0,85:1,170:2,255:3\n")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.seeds, vec![7, 8]);
        assert_eq!(back.variants, vec![Variant::SourceTarget, Variant::SelfAttention]);
    }

    #[test]
    fn later_settings_win() {
        let mut c = RunConfig::default();
        c.apply_text("epochs = 5\n# comment\nepochs = 6 # trailing\n").unwrap();
        c.set("epochs", "9").unwrap();
        assert_eq!(c.epochs, 9);
    }

    #[test]
    fn bad_settings_are_usage_errors() {
        let mut c = RunConfig::default();
        let err = c.set("variant", "bogus").unwrap_err();
        assert!(err.to_string().contains("self"), "{err}");
        assert_eq!(err.exit_code(), 2);
        assert!(matches!(c.set("epochs", "many"), Err(Error::Usage(_))));
        assert!(matches!(c.set("colour", "red"), Err(Error::Usage(_))));
        assert!(matches!(c.apply_text("epochs 5"), Err(Error::Usage(_))));
    }

    #[test]
    fn validation_checks_input_size() {
        let mut c = RunConfig { synth_size: 40, ..Default::default() };
        assert!(c.validate().is_err());
        c.synth_size = 32;
        c.validate().unwrap();
        c.base_channels = 4;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }
}
