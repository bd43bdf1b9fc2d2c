//! U-Net encoder-decoder exposing the early encoder feature map and the
//! last full-resolution decoder feature map (before its ReLU).
//!
//! Parameter layout for depth `d` and base width `b` (level `l` has width
//! `b·2^l`):
//!
//! - `enc{l}.conv{1,2}.weight` (+ `enc{l}.bn{1,2}`) for `l` in `0..=d`;
//!   level `d` is the bottleneck.
//! - `dec{l}.up.weight` (2×2 transposed conv from level `l+1`), then
//!   `dec{l}.conv{1,2}.weight` (+ bn) over the skip concatenation.
//! - `head.weight`: 1×1 classifier.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{config_err, dim_err, Error, Result};
use crate::params::{Graph, ModelParams};
use crate::tensor::Real;

/// Multiplier on the He standard deviation of the classifier kernel.
pub const HEAD_INIT_GAIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TapLocation {
    /// Feature map after the first 3×3 conv of the first encoder block.
    AfterConv1,
    /// Feature map after both 3×3 convs of the first encoder block.
    #[default]
    AfterConv2,
}

impl TapLocation {
    pub fn label(self) -> &'static str {
        match self {
            TapLocation::AfterConv1 => "one-conv",
            TapLocation::AfterConv2 => "two-conv",
        }
    }
}

impl fmt::Display for TapLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TapLocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-conv" | "after-conv1" | "conv1" => Ok(TapLocation::AfterConv1),
            "two-conv" | "after-conv2" | "conv2" => Ok(TapLocation::AfterConv2),
            other => Err(Error::Usage(format!(
                "unknown tap location {other:?}; expected one-conv or two-conv"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub use_bn_in_blocks: bool,
    pub tap_location: TapLocation,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            depth: 4,
            num_classes: 4,
            input_channels: 1,
            use_bn_in_blocks: true,
            tap_location: TapLocation::AfterConv2,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 8 {
            return config_err(format!(
                "base_channels {} leaves fewer than one attention channel (C/8 < 1)",
                self.base_channels
            ));
        }
        if self.depth == 0 || self.depth > 8 {
            return config_err(format!("depth {} outside 1..=8", self.depth));
        }
        if self.num_classes == 0 || self.input_channels == 0 {
            return config_err("num_classes and input_channels must be positive");
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return config_err(format!(
                "input {h}x{w} is not divisible by 2^{} = {m}",
                self.depth
            ));
        }
        Ok(())
    }
}

/// Feature maps produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct UNetTaps {
    pub logits: Var,
    pub f_tap: Var,
    pub o_final: Var,
}

pub fn build_unet<T: Real>(config: &UNetConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    let add_block = |p: &mut ModelParams<T>, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize| {
        p.add_conv(format!("{prefix}.conv1.weight"), [cout, cin, 3, 3], cin * 9, rng)?;
        if config.use_bn_in_blocks {
            p.add_bn(&format!("{prefix}.bn1"), cout)?;
        }
        p.add_conv(format!("{prefix}.conv2.weight"), [cout, cout, 3, 3], cout * 9, rng)?;
        if config.use_bn_in_blocks {
            p.add_bn(&format!("{prefix}.bn2"), cout)?;
        }
        Ok::<(), Error>(())
    };
    let mut cin = config.input_channels;
    for level in 0..=config.depth {
        let c = config.width(level);
        add_block(&mut p, &mut rng, &format!("enc{level}"), cin, c)?;
        cin = c;
    }
    for level in (0..config.depth).rev() {
        let (c, below) = (config.width(level), config.width(level + 1));
        p.add_conv(format!("dec{level}.up.weight"), [below, c, 2, 2], below * 4, &mut rng)?;
        add_block(&mut p, &mut rng, &format!("dec{level}"), 2 * c, c)?;
    }
    // A small head keeps initial logits near uniform (loss close to ln K).
    p.add_conv_scaled(
        "head.weight",
        [config.num_classes, config.base_channels, 1, 1],
        config.base_channels,
        HEAD_INIT_GAIN,
        &mut rng,
    )?;
    Ok(p)
}

fn conv_unit<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &UNetConfig,
    x: Var,
    prefix: &str,
    idx: u8,
    relu: bool,
) -> Result<Var> {
    let y = g.conv(x, &format!("{prefix}.conv{idx}.weight"), 1, 1)?;
    let y = if cfg.use_bn_in_blocks {
        g.bn(y, &format!("{prefix}.bn{idx}"))?
    } else {
        y
    };
    if relu {
        g.tape.relu(y)
    } else {
        Ok(y)
    }
}

/// Runs the network on `x`. When `injected_f` is given it replaces the
/// encoder tap (and everything downstream sees it, including the level-0
/// skip connection when tapping after the second conv).
pub fn forward<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &UNetConfig,
    x: Var,
    injected_f: Option<Var>,
) -> Result<UNetTaps> {
    let [n, c, h, w] = g.tape.shape(x)?;
    cfg.check_input(h, w)?;
    if c != cfg.input_channels {
        return config_err(format!(
            "input has {c} channels, network expects {}",
            cfg.input_channels
        ));
    }
    let tap_shape = [n, cfg.base_channels, h, w];
    if let Some(inj) = injected_f {
        let s = g.tape.shape(inj)?;
        if s != tap_shape {
            return dim_err(format!("injected feature map {s:?} does not match tap shape {tap_shape:?}"));
        }
    }

    let (f_tap, level0) = match (cfg.tap_location, injected_f) {
        (TapLocation::AfterConv1, inj) => {
            let f = match inj {
                Some(v) => v,
                None => conv_unit(g, cfg, x, "enc0", 1, true)?,
            };
            (f, conv_unit(g, cfg, f, "enc0", 2, true)?)
        }
        (TapLocation::AfterConv2, Some(v)) => (v, v),
        (TapLocation::AfterConv2, None) => {
            let a = conv_unit(g, cfg, x, "enc0", 1, true)?;
            let b = conv_unit(g, cfg, a, "enc0", 2, true)?;
            (b, b)
        }
    };

    let mut skips = vec![level0];
    let mut cur = g.tape.maxpool2d(level0)?;
    for level in 1..=cfg.depth {
        let prefix = format!("enc{level}");
        let a = conv_unit(g, cfg, cur, &prefix, 1, true)?;
        let b = conv_unit(g, cfg, a, &prefix, 2, true)?;
        if level < cfg.depth {
            skips.push(b);
            cur = g.tape.maxpool2d(b)?;
        } else {
            cur = b;
        }
    }
    for level in (0..cfg.depth).rev() {
        let prefix = format!("dec{level}");
        let up_w = g.param(&format!("{prefix}.up.weight"))?;
        let up = g.tape.conv_transpose2d(cur, up_w, 2)?;
        let cat = g.tape.concat_channels(skips[level], up)?;
        let a = conv_unit(g, cfg, cat, &prefix, 1, true)?;
        // The classifier has no bias, so a ReLU here would leave pixels
        // with all channels clipped stuck at uniform logits.
        cur = conv_unit(g, cfg, a, &prefix, 2, level > 0)?;
    }
    let o_final = cur;
    let logits = g.conv(o_final, "head.weight", 1, 0)?;
    Ok(UNetTaps { logits, f_tap, o_final })
}
