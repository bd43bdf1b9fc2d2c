//! Model checkpoints: `model.bin` holds every parameter and buffer as raw
//! little-endian f32, and `model.manifest` lists `name<TAB>shape<TAB>offset`
//! per tensor, in file order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamKind};
use crate::tensor::{numel, Shape, Tensor};

pub const BIN_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "model.manifest";

/// Parameter kind implied by a tensor name; `None` marks a buffer.
fn kind_of(name: &str) -> Option<ParamKind> {
    if name.ends_with(".weight") {
        Some(ParamKind::ConvKernel)
    } else if name.ends_with(".gamma") {
        Some(ParamKind::BnGamma)
    } else if name.ends_with(".beta") {
        Some(ParamKind::BnBeta)
    } else if name.ends_with(".scale") {
        Some(ParamKind::ScaleScalar)
    } else {
        None
    }
}

pub fn save(dir: &Path, model: &ModelParams<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut manifest = String::new();
    let entries = model
        .iter()
        .map(|p| (&p.name, &p.value))
        .chain(model.buffers());
    for (name, t) in entries {
        if name.contains(char::is_whitespace) {
            return Err(Error::Usage(format!("tensor name {name:?} contains whitespace")));
        }
        let [n, c, h, w] = t.shape();
        manifest.push_str(&format!("{name}\t{n},{c},{h},{w}\t{}\n", bytes.len()));
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(BIN_FILE), bytes)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

fn parse_shape(s: &str) -> Option<Shape> {
    let dims: Vec<usize> = s.split(',').map(|d| d.trim().parse().ok()).collect::<Option<_>>()?;
    dims.try_into().ok()
}

pub fn load(dir: &Path) -> Result<ModelParams<f32>> {
    let bytes = fs::read(dir.join(BIN_FILE))?;
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut model = ModelParams::new();
    for (lineno, line) in manifest.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |why: &str| Error::Data(format!("manifest line {}: {why}: {line:?}", lineno + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, shape, offset] = cols[..] else {
            return Err(bad("expected name, shape and offset"));
        };
        let shape = parse_shape(shape).ok_or_else(|| bad("bad shape"))?;
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        let len = numel(&shape) * 4;
        let raw = bytes
            .get(offset..offset + len)
            .ok_or_else(|| bad("tensor runs past the end of the data file"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(shape, data)?;
        match kind_of(name) {
            Some(kind) => model.add(name, kind, t)?,
            None => model.set_buffer(name, t),
        }
    }
    Ok(model)
}
