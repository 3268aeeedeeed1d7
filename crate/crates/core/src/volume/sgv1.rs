//! SGV1 binary volume container.
//!
//! | bytes  | content                                        |
//! |--------|------------------------------------------------|
//! | 0..4   | magic `SGV1`                                   |
//! | 4..16  | `nx, ny, nz` as little-endian `u32`            |
//! | 16..28 | spacing `sx, sy, sz` as little-endian `f32` mm |
//! | 28     | dtype code: 0 = `f32` image, 1 = `u8` mask     |
//! | 29..   | payload, x-fastest                             |

use std::fs;
use std::path::Path;

use super::{Grid3, LabelMask, Spacing, Volume};
use crate::error::{Error, Result};

pub const SGV1_MAGIC: &[u8; 4] = b"SGV1";
pub const SGV1_HEADER_LEN: usize = 29;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DtypeCode {
    Float32 = 0,
    Uint8 = 1,
}

impl DtypeCode {
    fn element_size(self) -> usize {
        match self {
            DtypeCode::Float32 => 4,
            DtypeCode::Uint8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeFile {
    Image(Volume),
    Mask(LabelMask),
}

impl VolumeFile {
    pub fn dtype(&self) -> DtypeCode {
        match self {
            VolumeFile::Image(_) => DtypeCode::Float32,
            VolumeFile::Mask(_) => DtypeCode::Uint8,
        }
    }

    pub fn into_image(self) -> Result<Volume> {
        match self {
            VolumeFile::Image(v) => Ok(v),
            VolumeFile::Mask(_) => Err(Error::Format {
                offset: 28,
                message: "expected float32 image, found uint8 mask".into(),
            }),
        }
    }

    pub fn into_mask(self) -> Result<LabelMask> {
        match self {
            VolumeFile::Mask(m) => Ok(m),
            VolumeFile::Image(_) => Err(Error::Format {
                offset: 28,
                message: "expected uint8 mask, found float32 image".into(),
            }),
        }
    }
}

impl From<Volume> for VolumeFile {
    fn from(v: Volume) -> Self {
        VolumeFile::Image(v)
    }
}

impl From<LabelMask> for VolumeFile {
    fn from(m: LabelMask) -> Self {
        VolumeFile::Mask(m)
    }
}

pub fn encode(file: &VolumeFile) -> Vec<u8> {
    let (dims, spacing) = match file {
        VolumeFile::Image(v) => (v.dims(), v.spacing()),
        VolumeFile::Mask(m) => (m.dims(), m.spacing()),
    };
    let n = dims[0] * dims[1] * dims[2];
    let mut out = Vec::with_capacity(SGV1_HEADER_LEN + n * file.dtype().element_size());
    out.extend_from_slice(SGV1_MAGIC);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing.0 {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(file.dtype() as u8);
    match file {
        VolumeFile::Image(v) => {
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        VolumeFile::Mask(m) => out.extend_from_slice(m.data()),
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<VolumeFile> {
    if bytes.len() < 4 || &bytes[0..4] != SGV1_MAGIC {
        return Err(format_err(0, "bad magic, expected \"SGV1\""));
    }
    if bytes.len() < SGV1_HEADER_LEN {
        return Err(format_err(
            bytes.len(),
            format!(
                "truncated header: expected {SGV1_HEADER_LEN} bytes, got {}",
                bytes.len()
            ),
        ));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = [u32_at(4) as usize, u32_at(8) as usize, u32_at(12) as usize];
    let spacing = Spacing([f32_at(16), f32_at(20), f32_at(24)]);
    let dtype = match bytes[28] {
        0 => DtypeCode::Float32,
        1 => DtypeCode::Uint8,
        code => return Err(format_err(28, format!("unknown dtype code {code}"))),
    };
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(4, "dimension product overflows"))?;
    let payload = &bytes[SGV1_HEADER_LEN..];
    let expected = n * dtype.element_size();
    if payload.len() < expected {
        return Err(format_err(
            bytes.len(),
            format!(
                "truncated payload: expected {n} elements ({expected} bytes), got {} bytes",
                payload.len()
            ),
        ));
    }
    if payload.len() > expected {
        return Err(format_err(
            SGV1_HEADER_LEN + expected,
            format!(
                "trailing bytes after payload: expected {expected} bytes, got {}",
                payload.len()
            ),
        ));
    }
    let wrap = |e: Error| match e {
        Error::Format { .. } => e,
        other => format_err(4, other.to_string()),
    };
    match dtype {
        DtypeCode::Float32 => {
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let grid = Grid3::from_vec(dims, data)?;
            Volume::new(grid, spacing).map(VolumeFile::Image).map_err(wrap)
        }
        DtypeCode::Uint8 => {
            let grid = Grid3::from_vec(dims, payload.to_vec())?;
            LabelMask::new(grid, spacing).map(VolumeFile::Mask).map_err(wrap)
        }
    }
}

pub fn write_volume(file: &VolumeFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(file)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
