//! Feedback connectors mapping the encoder tap `F` and the final decoder
//! map `O` to the re-injected feature map `A`.
//!
//! Every connector has the form `A = scale · branch(F, O) + F` with `scale`
//! starting at zero, so each one is the identity on `F` at initialization.
//!
//! The two attention connectors build Query/Key (C/8 channels) and Value
//! (C/2 channels) with 1×1 conv + batch norm, form the (H·W)×(H·W) map
//! `w[i][j] = softmax_j(Query_i · Key_j)` and aggregate
//! `Σ_j w[i][j] · Value_j` at every position `i` before projecting back to
//! C channels.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{config_err, dim_err, Error, Result};
use crate::params::{Graph, ModelParams};
use crate::tensor::{Real, Tensor};

pub const PREFIX: &str = "fb";
pub const SCALE: &str = "fb.scale";
pub const DEFAULT_POSITION_BUDGET: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Plain U-Net, no second pass.
    None,
    SourceTarget,
    SelfAttention,
    Add,
    Conv1x1,
    SqueezeExcitation,
    Light,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::None,
        Variant::SourceTarget,
        Variant::SelfAttention,
        Variant::Add,
        Variant::Conv1x1,
        Variant::SqueezeExcitation,
        Variant::Light,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "unet",
            Variant::SourceTarget => "st",
            Variant::SelfAttention => "self",
            Variant::Add => "add",
            Variant::Conv1x1 => "conv1x1",
            Variant::SqueezeExcitation => "se",
            Variant::Light => "light",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Variant::SourceTarget | Variant::SelfAttention)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => return Ok(Variant::None),
            "source-target" => return Ok(Variant::SourceTarget),
            _ => {}
        }
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Usage(format!("unknown variant {s:?}; valid variants: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub variant: Variant,
    /// Channel count C of F and O.
    pub channels: usize,
    pub query_reduction: usize,
    pub value_reduction: usize,
    pub se_reduction: usize,
    /// Largest H·W for which the attention map may be materialized.
    pub position_budget: usize,
    /// Source-target only: take Query from O and Key from F.
    pub swap_query_key: bool,
}

impl AttentionConfig {
    pub fn new(variant: Variant, channels: usize) -> Self {
        Self {
            variant,
            channels,
            query_reduction: 8,
            value_reduction: 2,
            se_reduction: 16,
            position_budget: DEFAULT_POSITION_BUDGET,
            swap_query_key: false,
        }
    }

    pub fn query_channels(&self) -> usize {
        self.channels / self.query_reduction
    }

    pub fn value_channels(&self) -> usize {
        self.channels / self.value_reduction
    }

    pub fn se_hidden(&self) -> usize {
        (self.channels / self.se_reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return config_err("connector needs at least one channel");
        }
        if self.variant.is_attention()
            && (!self.channels.is_multiple_of(self.query_reduction) || !self.channels.is_multiple_of(self.value_reduction))
        {
            return config_err(format!(
                "attention needs C divisible by {} and {}, got C = {}",
                self.query_reduction, self.value_reduction, self.channels
            ));
        }
        Ok(())
    }
}

/// Learnable parameters for the configured connector, all under `fb.`.
pub fn build_connector<T: Real>(cfg: &AttentionConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fb00);
    let mut p = ModelParams::new();
    let c = cfg.channels;
    match cfg.variant {
        Variant::None => return Ok(p),
        Variant::SourceTarget | Variant::SelfAttention => {
            let (cq, cv) = (cfg.query_channels(), cfg.value_channels());
            for (name, out) in [("query", cq), ("key", cq), ("value", cv)] {
                p.add_conv(format!("fb.{name}.weight"), [out, c, 1, 1], c, &mut rng)?;
                p.add_bn(&format!("fb.{name}_bn"), out)?;
            }
            p.add_conv("fb.out.weight", [c, cv, 1, 1], cv, &mut rng)?;
            if cfg.variant == Variant::SourceTarget {
                p.add_bn("fb.out_bn", c)?;
            }
        }
        Variant::Add => {}
        Variant::Conv1x1 => p.add_conv("fb.conv.weight", [c, c, 1, 1], c, &mut rng)?,
        Variant::SqueezeExcitation => {
            let hidden = cfg.se_hidden();
            p.add_conv("fb.se_fc1.weight", [hidden, c, 1, 1], c, &mut rng)?;
            p.add_conv("fb.se_fc2.weight", [c, hidden, 1, 1], hidden, &mut rng)?;
        }
        Variant::Light => p.add_conv("fb.light.weight", [c, c, 3, 3], 9 * c, &mut rng)?,
    }
    p.add_scale(SCALE)?;
    Ok(p)
}

/// Result of applying a connector.
#[derive(Clone, Copy, Debug)]
pub struct ConnectorOutput {
    pub a: Var,
    /// Row-stochastic attention map of shape (N, 1, H·W, H·W).
    pub attn: Option<Var>,
    /// SE channel gate of shape (N, C, 1, 1).
    pub gate: Option<Var>,
}

fn project<T: Real>(g: &mut Graph<'_, T>, x: Var, name: &str, with_bn: bool) -> Result<Var> {
    let y = g.conv(x, &format!("fb.{name}.weight"), 1, 0)?;
    if with_bn {
        g.bn(y, &format!("fb.{name}_bn"))
    } else {
        Ok(y)
    }
}

/// softmax over Key positions of Queryᵀ·Key, then Value aggregation.
/// Returns (aggregated Value as (N, C/2, H, W), attention map).
fn attend<T: Real>(
    g: &mut Graph<'_, T>,
    query_src: Var,
    key_src: Var,
    value_src: Var,
) -> Result<(Var, Var)> {
    let q = project(g, query_src, "query", true)?;
    let k = project(g, key_src, "key", true)?;
    let v = project(g, value_src, "value", true)?;
    let [n, cq, h, w] = g.tape.shape(q)?;
    let cv = g.tape.shape(v)?[1];
    let p = h * w;
    let qm = g.tape.reshape(q, [n, 1, cq, p])?;
    let km = g.tape.reshape(k, [n, 1, cq, p])?;
    let vm = g.tape.reshape(v, [n, 1, cv, p])?;
    let (agg, attn) = g.tape.attention(qm, km, vm)?;
    let agg = g.tape.reshape(agg, [n, cv, h, w])?;
    Ok((agg, attn))
}

pub fn apply_connector<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &AttentionConfig,
    f: Var,
    o: Var,
) -> Result<ConnectorOutput> {
    let (sf, so) = (g.tape.shape(f)?, g.tape.shape(o)?);
    if sf != so {
        return dim_err(format!("connector inputs differ: F {sf:?} vs O {so:?}"));
    }
    if sf[1] != cfg.channels {
        return dim_err(format!(
            "connector configured for {} channels, feature maps have {}",
            cfg.channels, sf[1]
        ));
    }
    if cfg.variant.is_attention() && sf[2] * sf[3] > cfg.position_budget {
        return config_err(format!(
            "attention over {}x{} = {} positions exceeds the budget of {}",
            sf[2],
            sf[3],
            sf[2] * sf[3],
            cfg.position_budget
        ));
    }
    let mut attn = None;
    let mut gate = None;
    let branch = match cfg.variant {
        Variant::None => return Ok(ConnectorOutput { a: f, attn: None, gate: None }),
        Variant::SourceTarget => {
            let (qs, ks) = if cfg.swap_query_key { (o, f) } else { (f, o) };
            let (agg, map) = attend(g, qs, ks, o)?;
            attn = Some(map);
            project(g, agg, "out", true)?
        }
        Variant::SelfAttention => {
            let (agg, map) = attend(g, o, o, o)?;
            attn = Some(map);
            project(g, agg, "out", false)?
        }
        Variant::Add => o,
        Variant::Conv1x1 => g.conv(o, "fb.conv.weight", 1, 0)?,
        Variant::SqueezeExcitation => {
            let pooled = g.tape.global_avg_pool(o)?;
            let hdn = g.conv(pooled, "fb.se_fc1.weight", 1, 0)?;
            let hdn = g.tape.relu(hdn)?;
            let z = g.conv(hdn, "fb.se_fc2.weight", 1, 0)?;
            let s = g.tape.sigmoid(z)?;
            gate = Some(s);
            g.tape.mul_channel(o, s)?
        }
        Variant::Light => {
            let z = g.conv(o, "fb.light.weight", 1, 1)?;
            let s = g.tape.sigmoid(z)?;
            g.tape.mul(o, s)?
        }
    };
    let scale = g.param(SCALE)?;
    let a = g.tape.scale_add(scale, branch, f)?;
    Ok(ConnectorOutput { a, attn, gate })
}

/// Row-stochastic (H·W)×(H·W) attention weights for each batch item, with
/// row-major pixel indexing.
#[derive(Clone, Debug)]
pub struct AttentionMapView<T> {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<T>,
}

impl<T: Real> AttentionMapView<T> {
    pub fn from_tensor(map: &Tensor<T>, height: usize, width: usize) -> Result<Self> {
        let [n, one, r, c] = map.shape();
        let p = height * width;
        if one != 1 || r != p || c != p {
            return dim_err(format!(
                "attention tensor {:?} does not match {height}x{width} positions",
                map.shape()
            ));
        }
        Ok(Self { batch: n, height, width, data: map.data().to_vec() })
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Weights of query pixel `(y, x)` over all key pixels.
    pub fn row(&self, batch: usize, y: usize, x: usize) -> &[T] {
        let p = self.positions();
        let i = y * self.width + x;
        &self.data[(batch * p + i) * p..(batch * p + i + 1) * p]
    }

    pub fn row_by_index(&self, batch: usize, i: usize) -> &[T] {
        let p = self.positions();
        &self.data[(batch * p + i) * p..(batch * p + i + 1) * p]
    }

    /// Largest |row sum − 1| over every row.
    pub fn max_row_sum_error(&self) -> f64 {
        let p = self.positions();
        self.data
            .chunks(p.max(1))
            .map(|r| (r.iter().copied().sum::<T>().to_f64().unwrap_or(f64::NAN) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }
}
