//! Binary PGM (P5) export of image grids.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const GUTTER: usize = 2;

/// Maps a value in [-1, 1] to a byte; out-of-range values clamp.
fn to_byte<T: Scalar>(v: T) -> u8 {
    let x = (v.to_f64() + 1.0) / 2.0 * 255.0;
    x.round().clamp(0.0, 255.0) as u8
}

/// Tiles (N, 1, H, W) images row-major into `columns` columns with a
/// 2-pixel black gutter and writes a P5 PGM. Unfilled cells in the last row
/// stay black.
pub fn write_image_grid<T: Scalar>(
    path: impl AsRef<Path>,
    images: &Tensor<T>,
    columns: usize,
) -> Result<()> {
    let path = path.as_ref();
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::contract(format!(
            "image grid expects (N, 1, H, W), got {shape:?}"
        )));
    }
    if columns == 0 {
        return Err(Error::contract("grid needs at least one column"));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let cols = columns.min(n);
    let rows = n.div_ceil(cols);
    let width = cols * w + (cols - 1) * GUTTER;
    let height = rows * h + (rows - 1) * GUTTER;
    let mut pixels = vec![0u8; width * height];
    let data = images.data();
    for i in 0..n {
        let (gr, gc) = (i / cols, i % cols);
        let top = gr * (h + GUTTER);
        let left = gc * (w + GUTTER);
        for r in 0..h {
            for c in 0..w {
                pixels[(top + r) * width + left + c] = to_byte(data[(i * h + r) * w + c]);
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    f.write_all(&pixels).map_err(|e| Error::io(path, e))
}
