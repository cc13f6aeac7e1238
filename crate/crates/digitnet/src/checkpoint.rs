//! Checkpoint serialization.
//!
//! Layout: magic "BHND", format version u32, entry count u32, then per entry
//! a u16-length UTF-8 name, ndim u8, u32 dims, a dtype tag (0 = float32),
//! and the raw little-endian payload. The file ends with a CRC32 of all
//! preceding bytes, validated before any tensor is surfaced. Integers are
//! little-endian. Writes go to a temp file renamed into place.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"BHND";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub type Entry = (String, Vec<usize>, Vec<f32>);

pub fn save_checkpoint(path: impl AsRef<Path>, entries: &[Entry]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in entries {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(DTYPE_F32);
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "file truncated at byte {}",
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < MAGIC.len() + 12 {
        return Err(Error::format(path, "file too short to be a checkpoint"));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::format(
            path,
            format!("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}"),
        ));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic, not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("format version {version}, this build reads version {VERSION}"),
        ));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(
                path,
                format!("tensor {name} has unknown dtype tag {dtype}"),
            ));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, shape, data));
    }
    if r.pos != body.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after last entry", body.len() - r.pos),
        ));
    }
    Ok(entries)
}

/// Checks that the loaded names are exactly the expected set; missing and
/// extra names are listed in the error.
pub fn expect_names(entries: &[Entry], expected: &[String]) -> Result<()> {
    let have: HashSet<&str> = entries.iter().map(|e| e.0.as_str()).collect();
    let want: HashSet<&str> = expected.iter().map(|s| s.as_str()).collect();
    let mut missing: Vec<&str> = want.difference(&have).copied().collect();
    let mut extra: Vec<&str> = have.difference(&want).copied().collect();
    missing.sort_unstable();
    extra.sort_unstable();
    if missing.is_empty() && extra.is_empty() {
        return Ok(());
    }
    let mut parts = Vec::new();
    if !missing.is_empty() {
        parts.push(format!("missing: {}", missing.join(", ")));
    }
    if !extra.is_empty() {
        parts.push(format!("extra: {}", extra.join(", ")));
    }
    Err(Error::Checkpoint(parts.join("; ")))
}
