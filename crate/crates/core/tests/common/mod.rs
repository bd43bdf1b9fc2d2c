#![allow(dead_code)]

pub mod reference;

use std::path::Path;

use fbseg::data::LabelPalette;
use image::{GrayImage, Luma};

/// Raw label values used by the fixture dataset.
pub const PALETTE: &str = "0:0,85:1,170:2,255:3";

pub fn palette() -> LabelPalette {
    LabelPalette::parse(PALETTE).unwrap()
}

/// Writes `n` deterministic `side`×`side` image/label pairs in the layout
/// `tile_dataset` reads. Label regions are axis-aligned stripes and
/// rectangles so every class occurs in every image.
pub fn write_fixture(dir: &Path, n: usize, side: u32) {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    std::fs::create_dir_all(dir.join("labels")).unwrap();
    for i in 0..n as u32 {
        let img = GrayImage::from_fn(side, side, |x, y| Luma([((x * 7 + y * 3 + i * 11) % 256) as u8]));
        let lab = GrayImage::from_fn(side, side, |x, y| {
            let class = if (x + i) % 97 < 4 || (y + 2 * i) % 131 < 3 {
                0
            } else if (x / 40 + y / 40 + i) % 5 == 0 {
                1
            } else if (x % 61 < 5) && (y % 53 < 5) {
                2
            } else {
                3
            };
            Luma([class * 85])
        });
        img.save(dir.join("images").join(format!("img{i:02}.png"))).unwrap();
        lab.save(dir.join("labels").join(format!("img{i:02}.png"))).unwrap();
    }
}
