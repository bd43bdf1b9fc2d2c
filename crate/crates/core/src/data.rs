//! Dataset ingestion: non-overlapping tiling of square source images,
//! seeded per-fold train/val/test assignment, the persisted tile index, and
//! a synthetic four-texture generator for small-scale runs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["membrane", "mitochondria", "synapse", "cytoplasm"];
const IMAGE_EXTS: [&str; 3] = ["png", "tif", "tiff"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            other => Err(Error::Data(format!("unknown split role {other:?}"))),
        }
    }
}

/// Identity of one tile within its source image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileKey {
    pub image_id: String,
    pub tile_row: usize,
    pub tile_col: usize,
}

#[derive(Clone, Debug)]
pub struct LabeledTile {
    pub key: TileKey,
    /// (1, 1, S, S) grayscale in [0, 1].
    pub image: Tensor<f32>,
    /// S·S row-major class indices.
    pub labels: Vec<u8>,
}

impl LabeledTile {
    pub fn size(&self) -> usize {
        self.image.shape()[2]
    }

    /// Central `side`×`side` window (offset rounded down). The key is kept.
    pub fn center_crop(&self, side: usize) -> Result<LabeledTile> {
        let s = self.size();
        if side == 0 || side > s {
            return config_err(format!("cannot crop a {s}x{s} tile to {side}x{side}"));
        }
        let off = (s - side) / 2;
        let mut pixels = Vec::with_capacity(side * side);
        let mut labels = Vec::with_capacity(side * side);
        for y in off..off + side {
            pixels.extend_from_slice(&self.image.data()[y * s + off..y * s + off + side]);
            labels.extend_from_slice(&self.labels[y * s + off..y * s + off + side]);
        }
        Ok(LabeledTile {
            key: self.key.clone(),
            image: Tensor::from_vec([1, 1, side, side], pixels)?,
            labels,
        })
    }
}

/// Maps raw label-file pixel values to class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelPalette {
    map: BTreeMap<u8, u8>,
}

impl Default for LabelPalette {
    fn default() -> Self {
        Self { map: (0..NUM_CLASSES as u8).map(|c| (c, c)).collect() }
    }
}

impl LabelPalette {
    pub fn new(map: BTreeMap<u8, u8>) -> Result<Self> {
        if let Some((raw, cls)) = map.iter().find(|(_, &c)| c as usize >= NUM_CLASSES) {
            return config_err(format!("palette maps {raw} to class {cls}, only {NUM_CLASSES} classes exist"));
        }
        Ok(Self { map })
    }

    /// Parses `raw:class` pairs separated by commas, e.g. `0:3,255:0`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for pair in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (raw, cls) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("palette entry {pair:?} is not raw:class")))?;
            let raw: u8 = raw.trim().parse().map_err(|_| Error::Config(format!("bad palette value {raw:?}")))?;
            let cls: u8 = cls.trim().parse().map_err(|_| Error::Config(format!("bad palette class {cls:?}")))?;
            map.insert(raw, cls);
        }
        Self::new(map)
    }

    /// Inverse of [`LabelPalette::parse`].
    pub fn to_spec(&self) -> String {
        self.map.iter().map(|(r, c)| format!("{r}:{c}")).collect::<Vec<_>>().join(",")
    }

    pub fn class_of(&self, raw: u8) -> Option<u8> {
        self.map.get(&raw).copied()
    }

    /// Raw value written for a class (first raw value mapping to it).
    pub fn raw_of(&self, class: u8) -> u8 {
        self.map
            .iter()
            .find(|(_, &c)| c == class)
            .map(|(&r, _)| r)
            .unwrap_or(class)
    }
}

fn find_with_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("dataset directory {} not found", dir.display())));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if path.is_file() && IMAGE_EXTS.contains(&ext.as_str()) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Splits one source image and its label map into non-overlapping
/// `tile_size` tiles in row-major order.
pub fn tile_image(
    image_id: &str,
    image: &GrayImage,
    labels: &GrayImage,
    tile_size: usize,
    palette: &LabelPalette,
) -> Result<Vec<LabeledTile>> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w != h {
        return Err(Error::Data(format!("image {image_id} is {w}x{h}, expected square")));
    }
    if (labels.width() as usize, labels.height() as usize) != (w, h) {
        return Err(Error::Data(format!(
            "label map for {image_id} is {}x{}, image is {w}x{h}",
            labels.width(),
            labels.height()
        )));
    }
    if tile_size == 0 || w % tile_size != 0 {
        return Err(Error::Data(format!(
            "image {image_id} side {w} is not divisible by tile size {tile_size}"
        )));
    }
    let mut bad = Vec::new();
    let mut classes = vec![0u8; w * h];
    for (x, y, Luma([raw])) in labels.enumerate_pixels() {
        match palette.class_of(*raw) {
            Some(c) => classes[y as usize * w + x as usize] = c,
            None => bad.push((y, x, *raw)),
        }
    }
    if !bad.is_empty() {
        let shown: Vec<String> = bad.iter().take(8).map(|(y, x, v)| format!("({y},{x})={v}")).collect();
        return Err(Error::Data(format!(
            "label map for {image_id} has {} pixels with unknown values: {}{}",
            bad.len(),
            shown.join(" "),
            if bad.len() > 8 { " ..." } else { "" }
        )));
    }
    let per_side = w / tile_size;
    let mut tiles = Vec::with_capacity(per_side * per_side);
    for tr in 0..per_side {
        for tc in 0..per_side {
            let mut pixels = Vec::with_capacity(tile_size * tile_size);
            let mut lab = Vec::with_capacity(tile_size * tile_size);
            for y in tr * tile_size..(tr + 1) * tile_size {
                for x in tc * tile_size..(tc + 1) * tile_size {
                    pixels.push(image.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0);
                    lab.push(classes[y * w + x]);
                }
            }
            tiles.push(LabeledTile {
                key: TileKey { image_id: image_id.to_string(), tile_row: tr, tile_col: tc },
                image: Tensor::from_vec([1, 1, tile_size, tile_size], pixels)?,
                labels: lab,
            });
        }
    }
    Ok(tiles)
}

/// Reads `images/<id>.{png,tif}` with matching `labels/<id>.*` and tiles
/// every pair. Tiles are ordered by image id, then row-major.
pub fn tile_dataset(
    images_dir: &Path,
    labels_dir: &Path,
    tile_size: usize,
    palette: &LabelPalette,
) -> Result<Vec<LabeledTile>> {
    let images = list_images(images_dir)?;
    if images.is_empty() {
        return Err(Error::Data(format!("no images in {}", images_dir.display())));
    }
    let mut tiles = Vec::new();
    for (id, path) in images {
        let label_path = find_with_stem(labels_dir, &id)
            .ok_or_else(|| Error::Data(format!("no label map for image {id} in {}", labels_dir.display())))?;
        let image = image::open(&path)?.to_luma8();
        let labels = image::open(&label_path)?.to_luma8();
        tiles.extend(tile_image(&id, &image, &labels, tile_size, palette)?);
    }
    Ok(tiles)
}

/// Reassembles one image's tiles (given in row-major order).
pub fn assemble(tiles: &[LabeledTile]) -> Result<(Vec<f32>, Vec<u8>, usize)> {
    let per_side = (tiles.len() as f64).sqrt().round() as usize;
    if per_side * per_side != tiles.len() || tiles.is_empty() {
        return Err(Error::Data(format!("{} tiles do not form a square grid", tiles.len())));
    }
    let s = tiles[0].size();
    let side = s * per_side;
    let mut pixels = vec![0.0; side * side];
    let mut labels = vec![0; side * side];
    for t in tiles {
        for y in 0..s {
            for x in 0..s {
                let dst = (t.key.tile_row * s + y) * side + t.key.tile_col * s + x;
                pixels[dst] = t.image.data()[y * s + x];
                labels[dst] = t.labels[y * s + x];
            }
        }
    }
    Ok((pixels, labels, side))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 192 / 48 / 80 of 320 tiles.
    pub const SSTEM: SplitSizes = SplitSizes { train: 192, val: 48, test: 80 };

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// 4 : 1 : 2, i.e. 32 / 8 / 16 of 56 tiles.
    pub fn sevenths(total: usize) -> Self {
        let test = total * 2 / 7;
        let val = total / 7;
        SplitSizes { train: total - test - val, val, test }
    }

    /// Same 60/15/25 proportions for an arbitrary tile count.
    pub fn proportional(total: usize) -> Self {
        let test = total * 80 / 320;
        let val = total * 48 / 320;
        SplitSizes { train: total - test - val, val, test }
    }
}

/// Role of every tile in every fold: `result[fold][tile]`. Each fold is an
/// independent seeded split, so test sets of different folds may overlap.
pub fn make_folds(tile_count: usize, n_folds: usize, sizes: SplitSizes, seed: u64) -> Result<Vec<Vec<Role>>> {
    if n_folds == 0 {
        return config_err("need at least one fold");
    }
    if sizes.total() != tile_count {
        return config_err(format!(
            "split sizes {}+{}+{} do not add up to {tile_count} tiles",
            sizes.train, sizes.val, sizes.test
        ));
    }
    Ok((0..n_folds)
        .map(|fold| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(fold as u64));
            let mut order: Vec<usize> = (0..tile_count).collect();
            order.shuffle(&mut rng);
            let mut roles = vec![Role::Train; tile_count];
            for (rank, &tile) in order.iter().enumerate() {
                roles[tile] = if rank < sizes.test {
                    Role::Test
                } else if rank < sizes.test + sizes.val {
                    Role::Val
                } else {
                    Role::Train
                };
            }
            roles
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileRecord {
    pub image_id: String,
    pub tile_row: usize,
    pub tile_col: usize,
    pub fold: usize,
    pub role: Role,
}

/// Persisted fold/role assignment, one record per (tile, fold).
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DatasetIndex {
    pub records: Vec<TileRecord>,
}

const INDEX_HEADER: [&str; 5] = ["image_id", "tile_row", "tile_col", "fold", "role"];

impl DatasetIndex {
    pub fn build(keys: &[TileKey], folds: &[Vec<Role>]) -> Self {
        let mut records = Vec::with_capacity(keys.len() * folds.len());
        for (fold, roles) in folds.iter().enumerate() {
            for (key, &role) in keys.iter().zip(roles) {
                records.push(TileRecord {
                    image_id: key.image_id.clone(),
                    tile_row: key.tile_row,
                    tile_col: key.tile_col,
                    fold,
                    role,
                });
            }
        }
        Self { records }
    }

    pub fn folds(&self) -> usize {
        self.records.iter().map(|r| r.fold + 1).max().unwrap_or(0)
    }

    /// Tile indices (positions within `keys`) holding `role` in `fold`.
    pub fn split(&self, keys: &[TileKey], fold: usize, role: Role) -> Result<Vec<usize>> {
        let pos: HashMap<&TileKey, usize> = keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
        let mut out = Vec::new();
        for r in self.records.iter().filter(|r| r.fold == fold && r.role == role) {
            let key = TileKey { image_id: r.image_id.clone(), tile_row: r.tile_row, tile_col: r.tile_col };
            let i = pos
                .get(&key)
                .ok_or_else(|| Error::Data(format!("index refers to unknown tile {key:?}")))?;
            out.push(*i);
        }
        Ok(out)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(INDEX_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.image_id.clone(),
                r.tile_row.to_string(),
                r.tile_col.to_string(),
                r.fold.to_string(),
                r.role.name().to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if header != INDEX_HEADER {
            return Err(Error::Data(format!("unexpected index header {header:?}")));
        }
        let parse = |field: &str, what: &str| -> Result<usize> {
            field.parse().map_err(|_| Error::Data(format!("bad {what} {field:?} in index")))
        };
        let mut records = Vec::new();
        for row in r.records() {
            let row = row?;
            records.push(TileRecord {
                image_id: row[0].to_string(),
                tile_row: parse(&row[1], "tile_row")?,
                tile_col: parse(&row[2], "tile_col")?,
                fold: parse(&row[3], "fold")?,
                role: row[4].parse()?,
            });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

/// Class intensities of the synthetic textures before noise.
const SYNTH_LEVELS: [f32; NUM_CLASSES] = [0.12, 0.38, 0.95, 0.68];

/// Generates `n_images` square tiles with exact labels: dark wavy curves
/// (membrane, 0), mid-gray blobs (mitochondria, 1), small bright dots
/// (synapse, 2) over a textured background (cytoplasm, 3). Pixel values are
/// quantized to multiples of 1/255 so a PNG round trip is lossless.
pub fn synth_generate(n_images: usize, size: usize, seed: u64) -> Vec<LabeledTile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, 0.04).expect("valid std");
    let sz = size as f64;
    (0..n_images)
        .map(|i| {
            let mut labels = vec![3u8; size * size];
            // blobs
            let blobs = rng.random_range(2..=4);
            for _ in 0..blobs {
                let (cy, cx) = (rng.random_range(0.0..sz), rng.random_range(0.0..sz));
                let ry = rng.random_range(sz / 10.0..sz / 5.5).max(1.5);
                let rx = rng.random_range(sz / 10.0..sz / 5.5).max(1.5);
                for y in 0..size {
                    for x in 0..size {
                        let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                        if dy * dy + dx * dx <= 1.0 {
                            labels[y * size + x] = 1;
                        }
                    }
                }
            }
            // curves y = a + b·sin(ω x + φ), horizontal or vertical
            let curves = rng.random_range(2..=3);
            for _ in 0..curves {
                let a = rng.random_range(0.1 * sz..0.9 * sz);
                let b = rng.random_range(0.03 * sz..0.12 * sz);
                let omega = rng.random_range(1.0..3.0) * std::f64::consts::TAU / sz;
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let vertical = rng.random_bool(0.5);
                for y in 0..size {
                    for x in 0..size {
                        let (along, across) = if vertical { (y, x) } else { (x, y) };
                        let center = a + b * (omega * along as f64 + phi).sin();
                        if (across as f64 - center).abs() <= 1.4 {
                            labels[y * size + x] = 0;
                        }
                    }
                }
            }
            // dots
            let radius: f64 = if size >= 32 { 1.6 } else { 1.0 };
            let dots = ((sz * sz * 0.035) / (std::f64::consts::PI * radius * radius)).ceil().max(1.0) as usize;
            for _ in 0..dots {
                let (cy, cx) = (rng.random_range(0.0..sz), rng.random_range(0.0..sz));
                for y in 0..size {
                    for x in 0..size {
                        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                        if dy * dy + dx * dx <= radius * radius {
                            labels[y * size + x] = 2;
                        }
                    }
                }
            }
            let pixels = labels
                .iter()
                .map(|&c| {
                    let v = SYNTH_LEVELS[c as usize] as f64 + noise.sample(&mut rng);
                    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
                })
                .collect();
            LabeledTile {
                key: TileKey { image_id: format!("synth{i:04}"), tile_row: 0, tile_col: 0 },
                image: Tensor::from_vec([1, 1, size, size], pixels).expect("sized"),
                labels,
            }
        })
        .collect()
}

pub fn class_histogram(tiles: &[LabeledTile]) -> [usize; NUM_CLASSES] {
    let mut h = [0; NUM_CLASSES];
    for t in tiles {
        for &l in &t.labels {
            h[l as usize] += 1;
        }
    }
    h
}

pub fn to_gray_image(pixels: &[f32], side: usize) -> GrayImage {
    GrayImage::from_fn(side as u32, side as u32, |x, y| {
        Luma([(pixels[y as usize * side + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

pub fn to_label_image(labels: &[u8], side: usize, palette: &LabelPalette) -> GrayImage {
    GrayImage::from_fn(side as u32, side as u32, |x, y| {
        Luma([palette.raw_of(labels[y as usize * side + x as usize])])
    })
}

/// Writes tiles as `images/<id>.png` and `labels/<id>.png` under `dir`.
pub fn write_dataset(dir: &Path, tiles: &[LabeledTile], palette: &LabelPalette) -> Result<()> {
    let (img_dir, lab_dir) = (dir.join("images"), dir.join("labels"));
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&lab_dir)?;
    for t in tiles {
        let s = t.size();
        let name = format!("{}.png", t.key.image_id);
        to_gray_image(t.image.data(), s).save(img_dir.join(&name))?;
        to_label_image(&t.labels, s, palette).save(lab_dir.join(&name))?;
    }
    Ok(())
}
