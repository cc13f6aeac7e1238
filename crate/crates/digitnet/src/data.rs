//! IDX corpus ingestion: parse, pad to 32x32, rescale, one-hot encode, and
//! iterate seeded shuffled batches.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 32;

/// Raw unsigned-byte images as stored in an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rescale {
    /// x / 255 into [0, 1].
    Unit,
    /// x / 127.5 - 1 into [-1, 1].
    Symmetric,
}

/// Fully prepared corpus: padded to 32x32 and rescaled.
pub struct Dataset<T: Scalar> {
    pub images: Vec<T>,
    pub labels: Vec<u8>,
    pub count: usize,
    pub rescale: Rescale,
}

fn read_u32(path: &Path, r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(path, format!("file ends before {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<RawImages> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let magic = read_u32(path, &mut f, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            path,
            format!("image magic is {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let count = read_u32(path, &mut f, "image count")? as usize;
    let rows = read_u32(path, &mut f, "row count")? as usize;
    let cols = read_u32(path, &mut f, "column count")? as usize;
    let expected = count * rows * cols;
    let mut pixels = Vec::with_capacity(expected);
    f.read_to_end(&mut pixels).map_err(|e| Error::io(path, e))?;
    if pixels.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "payload truncated at byte {} of {}",
                16 + pixels.len(),
                16 + expected
            ),
        ));
    }
    Ok(RawImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let magic = read_u32(path, &mut f, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            path,
            format!("label magic is {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let count = read_u32(path, &mut f, "label count")? as usize;
    let mut labels = Vec::with_capacity(count);
    f.read_to_end(&mut labels).map_err(|e| Error::io(path, e))?;
    if labels.len() != count {
        return Err(Error::format(
            path,
            format!(
                "payload truncated at byte {} of {}",
                8 + labels.len(),
                8 + count
            ),
        ));
    }
    Ok(labels)
}

/// Centers each image in a 32x32 zero border. An odd margin puts the extra
/// pixel on the bottom and right. 32x32 input passes through unchanged.
pub fn pad_to_32(raw: &RawImages) -> Result<RawImages> {
    if raw.rows > SIDE || raw.cols > SIDE {
        return Err(Error::contract(format!(
            "images are {}x{}, larger than {SIDE}x{SIDE}",
            raw.rows, raw.cols
        )));
    }
    if raw.rows == SIDE && raw.cols == SIDE {
        return Ok(raw.clone());
    }
    let top = (SIDE - raw.rows) / 2;
    let left = (SIDE - raw.cols) / 2;
    let mut pixels = vec![0u8; raw.count * SIDE * SIDE];
    for i in 0..raw.count {
        for r in 0..raw.rows {
            let src = (i * raw.rows + r) * raw.cols;
            let dst = (i * SIDE + top + r) * SIDE + left;
            pixels[dst..dst + raw.cols].copy_from_slice(&raw.pixels[src..src + raw.cols]);
        }
    }
    Ok(RawImages {
        count: raw.count,
        rows: SIDE,
        cols: SIDE,
        pixels,
    })
}

pub fn rescale<T: Scalar>(pixels: &[u8], mode: Rescale) -> Vec<T> {
    pixels
        .iter()
        .map(|&b| match mode {
            Rescale::Unit => T::from_f64(b as f64 / 255.0),
            Rescale::Symmetric => T::from_f64(b as f64 / 127.5 - 1.0),
        })
        .collect()
}

/// Loads, pads, and rescales an image/label pair.
pub fn load_dataset<T: Scalar>(
    image_path: impl AsRef<Path>,
    label_path: impl AsRef<Path>,
    mode: Rescale,
) -> Result<Dataset<T>> {
    let raw = load_idx_images(&image_path)?;
    let labels = load_idx_labels(&label_path)?;
    if raw.count != labels.len() {
        return Err(Error::contract(format!(
            "{} images but {} labels",
            raw.count,
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().position(|&l| l > 9) {
        return Err(Error::format(
            label_path.as_ref(),
            format!("label {} at index {bad} is outside [0, 9]", labels[bad]),
        ));
    }
    let padded = pad_to_32(&raw)?;
    Ok(Dataset {
        images: rescale(&padded.pixels, mode),
        labels,
        count: padded.count,
        rescale: mode,
    })
}

impl<T: Scalar> Dataset<T> {
    /// Images at `indices` as an (B, 1, 32, 32) tensor with their labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<u8>)> {
        let plane = SIDE * SIDE;
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.count {
                return Err(Error::contract(format!(
                    "index {i} out of range for {} samples",
                    self.count
                )));
            }
            data.extend_from_slice(&self.images[i * plane..(i + 1) * plane]);
            labels.push(self.labels[i]);
        }
        let x = Tensor::from_vec(vec![indices.len(), 1, SIDE, SIDE], data)?;
        Ok((x, labels))
    }

    /// Deterministic leading subset, useful for fixed evaluation slices.
    pub fn take(&self, n: usize) -> Dataset<T> {
        let n = n.min(self.count);
        Dataset {
            images: self.images[..n * SIDE * SIDE].to_vec(),
            labels: self.labels[..n].to_vec(),
            count: n,
            rescale: self.rescale,
        }
    }
}

/// Standard basis vector of length `k`.
pub fn one_hot<T: Scalar>(label: usize, k: usize) -> Result<Vec<T>> {
    if label >= k {
        return Err(Error::contract(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    let mut v = vec![T::zero(); k];
    v[label] = T::one();
    Ok(v)
}

/// One-hot rows for a batch of labels as a (B, k) tensor.
pub fn one_hot_rows<T: Scalar>(labels: &[u8], k: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(labels.len() * k);
    for &l in labels {
        data.extend(one_hot::<T>(l as usize, k)?);
    }
    Tensor::from_vec(vec![labels.len(), k], data)
}

/// Endless batch sequence with a fresh seeded permutation per epoch. The
/// permutation for epoch `e` depends only on `(seed, e)`, so iteration can be
/// resumed mid-stream by skipping.
pub struct BatchIter {
    count: usize,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
    epoch: u64,
    pos: usize,
    perm: Vec<usize>,
}

impl BatchIter {
    pub fn new(count: usize, batch_size: usize, seed: u64, drop_last: bool) -> Result<BatchIter> {
        if count == 0 {
            return Err(Error::contract("cannot iterate an empty dataset"));
        }
        if batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        if drop_last && batch_size > count {
            return Err(Error::contract(format!(
                "batch size {batch_size} exceeds dataset size {count} with drop_last"
            )));
        }
        let mut it = BatchIter {
            count,
            batch_size,
            seed,
            drop_last,
            epoch: 0,
            pos: 0,
            perm: Vec::new(),
        };
        it.reshuffle();
        Ok(it)
    }

    fn reshuffle(&mut self) {
        let mut rng = Rng::from_stream(self.seed, Stream::Shuffle, self.epoch);
        self.perm = (0..self.count).collect();
        rng.shuffle(&mut self.perm);
        self.pos = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        if self.drop_last {
            self.count / self.batch_size
        } else {
            self.count.div_ceil(self.batch_size)
        }
    }

    /// Next batch of sample indices; rolls over to a new epoch when the
    /// current permutation is exhausted.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let remaining = self.count - self.pos;
        let too_few = if self.drop_last {
            remaining < self.batch_size
        } else {
            remaining == 0
        };
        if too_few {
            self.epoch += 1;
            self.reshuffle();
        }
        let take = self.batch_size.min(self.count - self.pos);
        let batch = self.perm[self.pos..self.pos + take].to_vec();
        self.pos += take;
        batch
    }

    /// Advances past `n` batches without materializing them.
    pub fn skip_batches(&mut self, n: u64) {
        let per_epoch = self.batches_per_epoch() as u64;
        let whole_epochs = n / per_epoch;
        if whole_epochs > 0 {
            self.epoch += whole_epochs;
            self.reshuffle();
        }
        for _ in 0..n % per_epoch {
            self.next_batch();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_images(
        dir: &Path,
        name: &str,
        count: u32,
        rows: u32,
        cols: u32,
        px: &[u8],
    ) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(&IMAGE_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        f.write_all(px).unwrap();
        p
    }

    fn write_labels(dir: &Path, name: &str, labels: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(&LABEL_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        p
    }

    #[test]
    fn loads_two_28x28_images() {
        let dir = tempfile::tempdir().unwrap();
        let px = vec![7u8; 2 * 28 * 28];
        let p = write_images(dir.path(), "img", 2, 28, 28, &px);
        let raw = load_idx_images(&p).unwrap();
        assert_eq!((raw.count, raw.rows, raw.cols), (2, 28, 28));
        assert_eq!(raw.pixels, px);
    }

    #[test]
    fn wrong_magic_cites_observed_value() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        std::fs::write(&p, 0x00000801u32.to_be_bytes()).unwrap();
        let err = load_idx_images(&p).unwrap_err().to_string();
        assert!(err.contains("0x00000801"), "{err}");
    }

    #[test]
    fn truncated_payload_names_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let px = vec![0u8; 100];
        let p = write_images(dir.path(), "img", 1, 28, 28, &px);
        let err = load_idx_images(&p).unwrap_err().to_string();
        assert!(err.contains("byte 116 of 800"), "{err}");
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let pi = write_images(dir.path(), "img", 2, 28, 28, &vec![0u8; 2 * 784]);
        let pl = write_labels(dir.path(), "lbl", &[1, 2, 3]);
        assert!(load_dataset::<f32>(&pi, &pl, Rescale::Unit).is_err());
    }

    #[test]
    fn pad_28_centers_with_two_pixel_border() {
        let mut px = vec![0u8; 28 * 28];
        px[0] = 9;
        px[27 * 28 + 27] = 5;
        let raw = RawImages {
            count: 1,
            rows: 28,
            cols: 28,
            pixels: px,
        };
        let out = pad_to_32(&raw).unwrap();
        assert_eq!(out.rows, 32);
        assert_eq!(out.pixels[2 * 32 + 2], 9);
        assert_eq!(out.pixels[29 * 32 + 29], 5);
        let sum_in: u32 = raw.pixels.iter().map(|&v| v as u32).sum();
        let sum_out: u32 = out.pixels.iter().map(|&v| v as u32).sum();
        assert_eq!(sum_in, sum_out);
    }

    #[test]
    fn pad_odd_margin_extra_on_bottom_right() {
        let raw = RawImages {
            count: 1,
            rows: 27,
            cols: 27,
            pixels: vec![1u8; 27 * 27],
        };
        let out = pad_to_32(&raw).unwrap();
        // margin 5: 2 on top/left, 3 on bottom/right
        assert_eq!(out.pixels[2 * 32 + 2], 1);
        assert_eq!(out.pixels[28 * 32 + 28], 1);
        assert_eq!(out.pixels[29 * 32 + 29], 0);
    }

    #[test]
    fn pad_32_is_identity_and_33_rejected() {
        let raw = RawImages {
            count: 1,
            rows: 32,
            cols: 32,
            pixels: vec![3u8; 1024],
        };
        assert_eq!(pad_to_32(&raw).unwrap(), raw);
        let big = RawImages {
            count: 1,
            rows: 33,
            cols: 33,
            pixels: vec![0u8; 33 * 33],
        };
        assert!(pad_to_32(&big).is_err());
    }

    #[test]
    fn rescale_endpoints() {
        let s: Vec<f64> = rescale(&[0, 255], Rescale::Symmetric);
        assert_eq!(s, vec![-1.0, 1.0]);
        let u: Vec<f64> = rescale(&[0, 255], Rescale::Unit);
        assert_eq!(u, vec![0.0, 1.0]);
        // 127 and 128 straddle zero symmetrically
        let mid: Vec<f64> = rescale(&[127, 128], Rescale::Symmetric);
        assert!((mid[0] + mid[1]).abs() < 1e-12);
    }

    #[test]
    fn symmetric_is_affine_of_unit() {
        let bytes: Vec<u8> = (0..=255).collect();
        let u: Vec<f64> = rescale(&bytes, Rescale::Unit);
        let s: Vec<f64> = rescale(&bytes, Rescale::Symmetric);
        for (a, b) in u.iter().zip(&s) {
            assert!((2.0 * a - 1.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_basics() {
        let v: Vec<f32> = one_hot(3, 10).unwrap();
        assert_eq!(v[3], 1.0);
        assert_eq!(v.iter().sum::<f32>(), 1.0);
        let fake: Vec<f32> = one_hot(10, 11).unwrap();
        assert_eq!(fake[10], 1.0);
        assert!(one_hot::<f32>(10, 10).is_err());
    }

    #[test]
    fn batch_iter_partitions_an_epoch() {
        let mut it = BatchIter::new(10, 3, 42, false).unwrap();
        let mut seen = Vec::new();
        let sizes: Vec<usize> = (0..4)
            .map(|_| {
                let b = it.next_batch();
                seen.extend_from_slice(&b);
                b.len()
            })
            .collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_iter_drop_last() {
        let mut it = BatchIter::new(10, 3, 42, true).unwrap();
        let total: usize = (0..3).map(|_| it.next_batch().len()).sum();
        assert_eq!(total, 9);
        // fourth batch starts the next epoch at full size
        assert_eq!(it.next_batch().len(), 3);
    }

    #[test]
    fn same_seed_same_sequence_and_epochs_differ() {
        let mut a = BatchIter::new(20, 4, 7, false).unwrap();
        let mut b = BatchIter::new(20, 4, 7, false).unwrap();
        let ea: Vec<Vec<usize>> = (0..5).map(|_| a.next_batch()).collect();
        let eb: Vec<Vec<usize>> = (0..5).map(|_| b.next_batch()).collect();
        assert_eq!(ea, eb);
        let second: Vec<Vec<usize>> = (0..5).map(|_| a.next_batch()).collect();
        assert_ne!(ea, second);
    }

    #[test]
    fn skip_matches_stepping() {
        let mut a = BatchIter::new(10, 3, 9, true).unwrap();
        let mut b = BatchIter::new(10, 3, 9, true).unwrap();
        for _ in 0..8 {
            a.next_batch();
        }
        b.skip_batches(8);
        for _ in 0..5 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(BatchIter::new(0, 3, 1, false).is_err());
        assert!(BatchIter::new(5, 0, 1, false).is_err());
    }

    #[test]
    fn full_pipeline_preserves_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mut px = vec![0u8; 3 * 784];
        for i in 0..3 {
            px[i * 784] = (i as u8 + 1) * 10;
        }
        let pi = write_images(dir.path(), "img", 3, 28, 28, &px);
        let pl = write_labels(dir.path(), "lbl", &[4, 0, 9]);
        let ds: Dataset<f32> = load_dataset(&pi, &pl, Rescale::Unit).unwrap();
        assert_eq!(ds.count, 3);
        let (x, y) = ds.gather(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 1, 32, 32]);
        assert_eq!(y, vec![9, 4]);
        // corner pixel of image 0 lands at (2, 2) after padding
        assert!((x.data()[1024 + 2 * 32 + 2] - 10.0 / 255.0).abs() < 1e-6);
    }
}
