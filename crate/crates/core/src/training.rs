//! Two-pass shared-weight execution, the training step, and IoU evaluation.

use std::fmt;

use crate::attention::{apply_connector, build_connector, AttentionConfig, Variant};
use crate::autograd::Var;
use crate::data::LabeledTile;
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::params::{Graph, Mode, ModelParams};
use crate::tensor::{Real, Tensor};
use crate::unet::{build_unet, forward, TapLocation, UNetConfig};

/// Network description: U-Net plus feedback connector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedbackNet {
    pub unet: UNetConfig,
    pub connector: AttentionConfig,
    /// Stop gradients at F and O before the connector, so the network is
    /// trained only through the second pass.
    pub detach_feedback: bool,
}

impl FeedbackNet {
    pub fn new(unet: UNetConfig, variant: Variant) -> Self {
        Self {
            unet,
            connector: AttentionConfig::new(variant, unet.base_channels),
            detach_feedback: true,
        }
    }

    pub fn variant(&self) -> Variant {
        self.connector.variant
    }

    pub fn tap(&self) -> TapLocation {
        self.unet.tap_location
    }

    /// Label used in metrics output: the variant name, suffixed with
    /// `-oneconv` when tapping after the first conv.
    pub fn label(&self) -> String {
        variant_label(self.variant(), self.tap())
    }

    pub fn build<T: Real>(&self, seed: u64) -> Result<ModelParams<T>> {
        let mut p = build_unet(&self.unet, seed)?;
        p.extend(build_connector(&self.connector, seed)?)?;
        p.set_buffer("input.mean", Tensor::scalar(T::zero()));
        p.set_buffer("input.std", Tensor::scalar(T::one()));
        Ok(p)
    }
}

pub fn variant_label(variant: Variant, tap: TapLocation) -> String {
    match (variant, tap) {
        (Variant::None, _) | (_, TapLocation::AfterConv2) => variant.name().to_string(),
        (v, TapLocation::AfterConv1) => format!("{}-oneconv", v.name()),
    }
}

/// Graph handles of both passes.
#[derive(Clone, Copy, Debug)]
pub struct TwoPassOutput {
    pub first_logits: Var,
    pub second_logits: Var,
    pub feedback: Var,
    pub attn: Option<Var>,
}

/// Pass 1 yields (F, O, first logits); the connector maps (F, O) to A;
/// pass 2 reruns the same parameters with A injected at the tap.
pub fn two_pass_forward<T: Real>(g: &mut Graph<'_, T>, net: &FeedbackNet, x: Var) -> Result<TwoPassOutput> {
    let first = forward(g, &net.unet, x, None)?;
    if net.variant() == Variant::None {
        return Ok(TwoPassOutput {
            first_logits: first.logits,
            second_logits: first.logits,
            feedback: first.f_tap,
            attn: None,
        });
    }
    let (f, o) = if net.detach_feedback {
        (g.tape.detach(first.f_tap)?, g.tape.detach(first.o_final)?)
    } else {
        (first.f_tap, first.o_final)
    };
    let conn = apply_connector(g, &net.connector, f, o)?;
    let second = forward(g, &net.unet, x, Some(conn.a))?;
    Ok(TwoPassOutput {
        first_logits: first.logits,
        second_logits: second.logits,
        feedback: conn.a,
        attn: conn.attn,
    })
}

/// Input standardization fitted on training images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Normalization {
    pub fn fit(tiles: &[&LabeledTile]) -> Self {
        let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
        for t in tiles {
            for &v in t.image.data() {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
                n += 1;
            }
        }
        if n == 0 {
            return Self { mean: 0.0, std: 1.0 };
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
        Self { mean: mean as f32, std: std as f32 }
    }

    pub fn from_model<T: Real>(model: &ModelParams<T>) -> Self {
        let read = |k: &str, d: f32| {
            model
                .buffer(k)
                .and_then(|t| t.data()[0].to_f32())
                .unwrap_or(d)
        };
        Self { mean: read("input.mean", 0.0), std: read("input.std", 1.0) }
    }

    pub fn store<T: Real>(&self, model: &mut ModelParams<T>) {
        model.set_buffer("input.mean", Tensor::scalar(T::lit(self.mean as f64)));
        model.set_buffer("input.std", Tensor::scalar(T::lit(self.std as f64)));
    }
}

/// Stacked, normalized images with their flattened labels.
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn from_tiles(tiles: &[&LabeledTile], norm: Normalization) -> Result<Self> {
        let first = tiles
            .first()
            .ok_or_else(|| Error::Usage("empty batch".into()))?;
        let s = first.size();
        let mut data = Vec::with_capacity(tiles.len() * s * s);
        let mut labels = Vec::with_capacity(tiles.len() * s * s);
        for t in tiles {
            if t.size() != s {
                return Err(Error::Data(format!(
                    "batch mixes tile sizes {s} and {}",
                    t.size()
                )));
            }
            data.extend(t.image.data().iter().map(|&v| T::lit(((v - norm.mean) / norm.std) as f64)));
            labels.extend(t.labels.iter().map(|&l| l as usize));
        }
        Ok(Self { images: Tensor::from_vec([tiles.len(), 1, s, s], data)?, labels })
    }
}

/// Where a training step happened, for diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepContext {
    pub epoch: usize,
    pub batch: usize,
}

/// One optimizer step on the second-pass cross-entropy. Returns the loss.
pub fn train_step<T: Real>(
    model: &mut ModelParams<T>,
    net: &FeedbackNet,
    batch: &Batch<T>,
    optimizer: &mut Optimizer<T>,
    ctx: StepContext,
) -> Result<f64> {
    model.zero_grads();
    let loss = {
        let mut g = Graph::new(model, Mode::Train);
        let x = g.input(batch.images.clone());
        let out = two_pass_forward(&mut g, net, x)?;
        let loss = g.tape.cross_entropy(out.second_logits, &batch.labels)?;
        let value = g.tape.value(loss)?.data()[0].to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            drop(g);
            return Err(Error::Numeric(format!(
                "non-finite loss {value} at epoch {} batch {} (parameter norm {:.4e})",
                ctx.epoch,
                ctx.batch,
                model.param_norm()
            )));
        }
        g.backward(loss)?;
        value
    };
    let gnorm = model.grad_norm();
    if !gnorm.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient at epoch {} batch {} (parameter norm {:.4e}, gradient norm {gnorm})",
            ctx.epoch,
            ctx.batch,
            model.param_norm()
        )));
    }
    optimizer.step(model);
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pass {
    First,
    Second,
}

impl Pass {
    pub fn name(self) -> &'static str {
        match self {
            Pass::First => "first",
            Pass::Second => "second",
        }
    }
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// K×K pixel counts, `counts[truth][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// TP / (TP + FP + FN); a class absent from both truth and prediction
    /// scores 1.
    pub fn iou(&self, class: usize) -> f64 {
        let tp = self.count(class, class);
        let fn_: u64 = (0..self.classes).filter(|&p| p != class).map(|p| self.count(class, p)).sum();
        let fp: u64 = (0..self.classes).filter(|&t| t != class).map(|t| self.count(t, class)).sum();
        let denom = tp + fp + fn_;
        if denom == 0 {
            1.0
        } else {
            tp as f64 / denom as f64
        }
    }

    pub fn per_class_iou(&self) -> Vec<f64> {
        (0..self.classes).map(|c| self.iou(c)).collect()
    }
}

/// Class index with the highest logit at every pixel; ties go to the lower
/// class index. Output is (N, H, W) row-major.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let [n, k, h, w] = logits.shape();
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * hw + p] > d[(b * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub variant: String,
    pub fold: usize,
    pub seed: u64,
    pub epoch: usize,
    pub pass: Pass,
    pub per_class_iou: Vec<f64>,
    pub mean_iou: f64,
    pub loss: f64,
}

impl MetricsRecord {
    pub fn from_confusion(cm: &ConfusionMatrix, loss: f64, pass: Pass) -> Self {
        let per_class_iou = cm.per_class_iou();
        let mean_iou = per_class_iou.iter().sum::<f64>() / per_class_iou.len() as f64;
        Self {
            variant: String::new(),
            fold: 0,
            seed: 0,
            epoch: 0,
            pass,
            per_class_iou,
            mean_iou,
            loss,
        }
    }
}

/// First- and second-pass metrics over `tiles`, with confusion counts
/// accumulated over every pixel (micro aggregation). Runs in eval mode.
pub fn evaluate(
    model: &ModelParams<f32>,
    net: &FeedbackNet,
    tiles: &[&LabeledTile],
    batch_size: usize,
) -> Result<[MetricsRecord; 2]> {
    if tiles.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let norm = Normalization::from_model(model);
    let k = net.unet.num_classes;
    let mut cms = [ConfusionMatrix::new(k), ConfusionMatrix::new(k)];
    let mut loss_sum = [0.0f64; 2];
    let mut pixels = 0usize;
    let mut scratch = model.clone();
    for chunk in tiles.chunks(batch_size.max(1)) {
        let batch = Batch::<f32>::from_tiles(chunk, norm)?;
        let mut g = Graph::new(&mut scratch, Mode::Eval);
        let x = g.input(batch.images);
        let out = two_pass_forward(&mut g, net, x)?;
        for (pi, logits) in [out.first_logits, out.second_logits].into_iter().enumerate() {
            let ce = g.tape.cross_entropy(logits, &batch.labels)?;
            loss_sum[pi] += g.tape.value(ce)?.data()[0] as f64 * batch.labels.len() as f64;
            let pred = argmax_classes(g.tape.value(logits)?);
            for (&t, &p) in batch.labels.iter().zip(&pred) {
                cms[pi].add(t, p);
            }
        }
        pixels += batch.labels.len();
    }
    Ok([
        MetricsRecord::from_confusion(&cms[0], loss_sum[0] / pixels as f64, Pass::First),
        MetricsRecord::from_confusion(&cms[1], loss_sum[1] / pixels as f64, Pass::Second),
    ])
}

/// Eval-mode logits of both passes and the attention map (if any) for a
/// single normalized input.
pub struct Inference {
    pub first_logits: Tensor<f32>,
    pub second_logits: Tensor<f32>,
    pub attn: Option<Tensor<f32>>,
}

pub fn infer(model: &ModelParams<f32>, net: &FeedbackNet, images: Tensor<f32>) -> Result<Inference> {
    let mut scratch = model.clone();
    let mut g = Graph::new(&mut scratch, Mode::Eval);
    let x = g.input(images);
    let out = two_pass_forward(&mut g, net, x)?;
    Ok(Inference {
        first_logits: g.tape.value(out.first_logits)?.clone(),
        second_logits: g.tape.value(out.second_logits)?.clone(),
        attn: match out.attn {
            Some(a) => Some(g.tape.value(a)?.clone()),
            None => None,
        },
    })
}
