//! Deterministic synthetic concept: a warm rounded block on a cool
//! two-tone background, with its exact mask.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::image::RgbImage;
use crate::masks::{save_mask, ForegroundMask};

pub const SIZE: usize = 64;

fn inside(y: usize, x: usize) -> bool {
    let dy = (y as f64 + 0.5 - 34.0) / 18.0;
    let dx = (x as f64 + 0.5 - 30.0) / 14.0;
    dy * dy + dx * dx <= 1.0
}

pub fn concept_image() -> RgbImage {
    let mut img = RgbImage::filled(SIZE, SIZE, [0.15, 0.3, 0.55]);
    for y in 0..SIZE {
        for x in 0..SIZE {
            if y >= 44 {
                img.set_pixel(y, x, [0.2, 0.45, 0.25]);
            }
            if inside(y, x) {
                let shade = 0.75 + 0.2 * (x as f64 / SIZE as f64);
                img.set_pixel(y, x, [shade, 0.55, 0.2]);
            }
        }
    }
    img
}

pub fn concept_mask(class_word: &str) -> ForegroundMask {
    let values: Vec<f64> = (0..SIZE * SIZE)
        .map(|i| if inside(i / SIZE, i % SIZE) { 1.0 } else { 0.0 })
        .collect();
    ForegroundMask::from_values(SIZE, SIZE, &values, class_word).expect("non-empty fixture mask")
}

/// A second, visually distinct concept for composition tests.
pub fn second_image() -> RgbImage {
    let mut img = RgbImage::filled(SIZE, SIZE, [0.85, 0.85, 0.8]);
    for y in 8..40 {
        for x in 24..60 {
            img.set_pixel(y, x, [0.1, 0.2, 0.7]);
        }
    }
    img
}

pub fn second_mask(class_word: &str) -> ForegroundMask {
    let values: Vec<f64> = (0..SIZE * SIZE)
        .map(|i| {
            let (y, x) = (i / SIZE, i % SIZE);
            if (8..40).contains(&y) && (24..60).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    ForegroundMask::from_values(SIZE, SIZE, &values, class_word).expect("non-empty fixture mask")
}

/// Writes `concept.png`, `concept_mask.png`, `second.png` and
/// `second_mask.png` into `dir` and returns their paths in that order.
pub fn write_files(dir: &Path) -> Result<[PathBuf; 4]> {
    std::fs::create_dir_all(dir)?;
    let paths = ["concept.png", "concept_mask.png", "second.png", "second_mask.png"].map(|n| dir.join(n));
    concept_image().save(&paths[0])?;
    save_mask(&concept_mask("x").image_mask, &paths[1])?;
    second_image().save(&paths[2])?;
    save_mask(&second_mask("x").image_mask, &paths[3])?;
    Ok(paths)
}
