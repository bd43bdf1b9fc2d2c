//! Nested-loop reference evaluation of the attention connectors, plus
//! helpers that build connectors with every parameter moved off its
//! initial value.

use fbseg::attention::{apply_connector, build_connector, AttentionConfig, Variant, SCALE};
use fbseg::params::{Graph, Mode, ModelParams, ParamKind};
use fbseg::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Connector parameters with every value (including bn affine terms,
/// running statistics and the scale) moved away from its initial value.
pub fn randomized(variant: Variant, channels: usize, seed: u64, scale: f64) -> (AttentionConfig, ModelParams<f64>) {
    let cfg = AttentionConfig::new(variant, channels);
    let mut p = build_connector::<f64>(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for param in p.iter_mut() {
        for v in param.value.data_mut() {
            *v = match param.kind {
                ParamKind::ConvKernel => rng.random_range(-0.8..0.8),
                ParamKind::BnGamma => rng.random_range(0.5..1.5),
                ParamKind::BnBeta => rng.random_range(-0.3..0.3),
                ParamKind::ScaleScalar => scale,
            };
        }
    }
    let names: Vec<String> = p.buffers().map(|(k, _)| k.clone()).collect();
    for name in names {
        let mut t = p.buffer(&name).unwrap().clone();
        let is_var = name.ends_with("running_var");
        for v in t.data_mut() {
            *v = if is_var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.5..0.5) };
        }
        p.set_buffer(name, t);
    }
    (cfg, p)
}

pub fn run(
    cfg: &AttentionConfig,
    p: &mut ModelParams<f64>,
    f: &Tensor<f64>,
    o: &Tensor<f64>,
    mode: Mode,
) -> (Tensor<f64>, Option<Tensor<f64>>, Option<Tensor<f64>>) {
    let mut g = Graph::new(p, mode);
    let fv = g.input(f.clone());
    let ov = g.input(o.clone());
    let out = apply_connector(&mut g, cfg, fv, ov).unwrap();
    let a = g.tape.value(out.a).unwrap().clone();
    let attn = out.attn.map(|v| g.tape.value(v).unwrap().clone());
    let gate = out.gate.map(|v| g.tape.value(v).unwrap().clone());
    (a, attn, gate)
}

/// [channel][position] for batch item 0.
pub type Map = Vec<Vec<f64>>;

pub fn to_map(t: &Tensor<f64>) -> Map {
    let [_, c, _, _] = t.shape();
    (0..c).map(|ch| t.plane(0, ch).to_vec()).collect()
}

pub fn ref_conv1x1(x: &Map, w: &Tensor<f64>) -> Map {
    let [co, ci, _, _] = w.shape();
    let positions = x[0].len();
    (0..co)
        .map(|o| {
            (0..positions)
                .map(|p| (0..ci).map(|c| w.at(o, c, 0, 0) * x[c][p]).sum())
                .collect()
        })
        .collect()
}

pub fn ref_bn(x: &Map, p: &ModelParams<f64>, prefix: &str, mode: Mode) -> Map {
    let gamma = &p.get(&format!("{prefix}.gamma")).unwrap().value;
    let beta = &p.get(&format!("{prefix}.beta")).unwrap().value;
    x.iter()
        .enumerate()
        .map(|(c, row)| {
            let (mean, var) = match mode {
                Mode::Train => {
                    let m = row.iter().sum::<f64>() / row.len() as f64;
                    (m, row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / row.len() as f64)
                }
                Mode::Eval => (
                    p.buffer(&format!("{prefix}.running_mean")).unwrap().data()[c],
                    p.buffer(&format!("{prefix}.running_var")).unwrap().data()[c],
                ),
            };
            row.iter()
                .map(|v| gamma.data()[c] * (v - mean) / (var + 1e-5).sqrt() + beta.data()[c])
                .collect()
        })
        .collect()
}

pub fn ref_proj(x: &Map, p: &ModelParams<f64>, name: &str, bn: bool, mode: Mode) -> Map {
    let y = ref_conv1x1(x, &p.get(&format!("fb.{name}.weight")).unwrap().value);
    if bn {
        ref_bn(&y, p, &format!("fb.{name}_bn"), mode)
    } else {
        y
    }
}

/// Returns (A, w) with w[i][j] the weight of query position i on key j.
pub fn reference_attention(
    variant: Variant,
    p: &ModelParams<f64>,
    f: &Tensor<f64>,
    o: &Tensor<f64>,
    mode: Mode,
) -> (Map, Vec<Vec<f64>>) {
    let (fm, om) = (to_map(f), to_map(o));
    let query_src = if variant == Variant::SourceTarget { &fm } else { &om };
    let query = ref_proj(query_src, p, "query", true, mode);
    let key = ref_proj(&om, p, "key", true, mode);
    let value = ref_proj(&om, p, "value", true, mode);
    let positions = fm[0].len();
    let mut w = vec![vec![0.0; positions]; positions];
    for i in 0..positions {
        let scores: Vec<f64> = (0..positions)
            .map(|j| (0..query.len()).map(|k| query[k][i] * key[k][j]).sum::<f64>().exp())
            .collect();
        let z: f64 = scores.iter().sum();
        for j in 0..positions {
            w[i][j] = scores[j] / z;
        }
    }
    let agg: Map = (0..value.len())
        .map(|c| {
            (0..positions)
                .map(|i| (0..positions).map(|j| w[i][j] * value[c][j]).sum())
                .collect()
        })
        .collect();
    let out = ref_proj(&agg, p, "out", variant == Variant::SourceTarget, mode);
    let scale = p.get(SCALE).unwrap().value.data()[0];
    let a = fm
        .iter()
        .zip(&out)
        .map(|(fr, orow)| fr.iter().zip(orow).map(|(fv, ov)| scale * ov + fv).collect())
        .collect();
    (a, w)
}
