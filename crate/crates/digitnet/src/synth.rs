//! Deterministic synthetic digit corpus in IDX format.
//!
//! Renders a 5x7 digit font into 28x28 images with seeded affine jitter,
//! per-image contrast, and pixel noise. The corpus is a stand-in for
//! environments where no real handwritten-digit corpus can be downloaded;
//! identical seeds produce byte-identical files.

use std::io::Write;
use std::path::Path;

use crate::data::{IMAGE_MAGIC, LABEL_MAGIC};
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};

/// 5x7 glyphs, one row of bits per byte (low 5 bits used).
const GLYPHS: [[u8; 7]; 10] = [
    [
        0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110,
    ], // 0
    [
        0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110,
    ], // 1
    [
        0b01110, 0b10001, 0b00001, 0b00110, 0b01000, 0b10000, 0b11111,
    ], // 2
    [
        0b01110, 0b10001, 0b00001, 0b00110, 0b00001, 0b10001, 0b01110,
    ], // 3
    [
        0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010,
    ], // 4
    [
        0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110,
    ], // 5
    [
        0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110,
    ], // 6
    [
        0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000,
    ], // 7
    [
        0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110,
    ], // 8
    [
        0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100,
    ], // 9
];

pub const IMG_SIDE: usize = 28;

/// Bilinear sample of the glyph treated as a [0,1] intensity field.
fn glyph_sample(glyph: &[u8; 7], x: f64, y: f64) -> f64 {
    let at = |c: i64, r: i64| -> f64 {
        if (0..5).contains(&c) && (0..7).contains(&r) && (glyph[r as usize] >> (4 - c)) & 1 == 1 {
            1.0
        } else {
            0.0
        }
    };
    let (c0, r0) = (x.floor(), y.floor());
    let (fx, fy) = (x - c0, y - r0);
    let (c0, r0) = (c0 as i64, r0 as i64);
    let top = at(c0, r0) * (1.0 - fx) + at(c0 + 1, r0) * fx;
    let bot = at(c0, r0 + 1) * (1.0 - fx) + at(c0 + 1, r0 + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// One 28x28 image of `digit` with jitter drawn from `rng`.
fn render(digit: usize, rng: &mut Rng) -> Vec<u8> {
    let glyph = &GLYPHS[digit];
    let angle = rng.uniform_f64(-0.25, 0.25);
    let scale = rng.uniform_f64(2.4, 3.2);
    let shear = rng.uniform_f64(-0.15, 0.15);
    let dx = rng.uniform_f64(-2.0, 2.0);
    let dy = rng.uniform_f64(-2.0, 2.0);
    let contrast = rng.uniform_f64(0.75, 1.0);
    let (sin, cos) = angle.sin_cos();
    let cx = IMG_SIDE as f64 / 2.0 + dx;
    let cy = IMG_SIDE as f64 / 2.0 + dy;
    let mut out = vec![0u8; IMG_SIDE * IMG_SIDE];
    for r in 0..IMG_SIDE {
        for c in 0..IMG_SIDE {
            // map the image pixel back into glyph coordinates
            let px = c as f64 - cx;
            let py = r as f64 - cy;
            let rx = (cos * px + sin * py) / scale;
            let ry = (-sin * px + cos * py) / scale;
            let gx = rx - shear * ry + 2.0;
            let gy = ry + 3.0;
            let v = glyph_sample(glyph, gx, gy) * contrast;
            let noise = rng.uniform_f64(-0.04, 0.04);
            out[r * IMG_SIDE + c] = ((v + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

/// Generates `count` labeled images. Labels cycle through the digits so every
/// class appears with equal frequency.
pub fn generate_corpus(count: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut pixels = Vec::with_capacity(count * IMG_SIDE * IMG_SIDE);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let digit = i % 10;
        let mut rng = Rng::from_stream(seed, Stream::Data, i as u64);
        pixels.extend(render(digit, &mut rng));
        labels.push(digit as u8);
    }
    (pixels, labels)
}

pub fn write_idx_images(path: impl AsRef<Path>, count: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != count * IMG_SIDE * IMG_SIDE {
        return Err(Error::contract("pixel buffer does not match image count"));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&IMAGE_MAGIC.to_be_bytes())
        .and_then(|_| f.write_all(&(count as u32).to_be_bytes()))
        .and_then(|_| f.write_all(&(IMG_SIDE as u32).to_be_bytes()))
        .and_then(|_| f.write_all(&(IMG_SIDE as u32).to_be_bytes()))
        .and_then(|_| f.write_all(pixels))
        .map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&LABEL_MAGIC.to_be_bytes())
        .and_then(|_| f.write_all(&(labels.len() as u32).to_be_bytes()))
        .and_then(|_| f.write_all(labels))
        .map_err(|e| Error::io(path, e))
}

/// Writes train and test splits with the conventional IDX file names.
pub fn write_corpus(dir: impl AsRef<Path>, train: usize, test: usize, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (px, lb) = generate_corpus(train, seed);
    write_idx_images(dir.join("train-images-idx3-ubyte"), train, &px)?;
    write_idx_labels(dir.join("train-labels-idx1-ubyte"), &lb)?;
    // disjoint stream offset keeps test samples independent of train
    let (px, lb) = generate_corpus(test, seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    write_idx_images(dir.join("t10k-images-idx3-ubyte"), test, &px)?;
    write_idx_labels(dir.join("t10k-labels-idx1-ubyte"), &lb)
}
