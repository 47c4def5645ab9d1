//! Binary sample container.
//!
//! Layout (little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `CASP` |
//! | 2 | version (`1`) |
//! | 2 | flags (reserved, `0`) |
//! | 6 x 4 | `H, W, T_i, T_o, F_s, F_d` as `u32` |
//! | 4 | grid resolution, `f32` meters per cell |
//! | 2 x 4 | ego anchor row and column, `u32` |
//! | `F_s·H·W` | static maps, `u8`, channel-major |
//! | `4·T_i·F_d·H·W` | dynamic maps, `f32`, step-major then channel-major |
//! | `H·W` | drivable mask, `u8` |
//! | `4·2·T_o` | ground truth `(x = column, y = row)`, `f32` |
//! | 4 | CRC32 of the channel payloads (everything after the header) |

use std::path::Path;

use bevtraj_core::scene::{RasterSample, F_D, F_S};

pub const MAGIC: &[u8; 4] = b"CASP";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 6 * 4 + 4 + 2 * 4;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("invalid content: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Little-endian cursor over a byte slice with truncation checks.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated { needed: usize::MAX, available: self.buf.len() })?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated { needed: end, available: self.buf.len() });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::Invalid("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect())
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn dim(v: usize) -> u32 {
    u32::try_from(v).expect("raster dimensions fit in u32")
}

pub fn encode_sample(s: &RasterSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + s.static_maps.len() + 4 * s.dynamic.len() + s.drivable_mask.len() + 8 * s.gt.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in [s.height, s.width, s.t_in, s.t_out, F_S, F_D] {
        out.extend_from_slice(&dim(v).to_le_bytes());
    }
    out.extend_from_slice(&s.resolution.to_le_bytes());
    out.extend_from_slice(&dim(s.ego_cell.0).to_le_bytes());
    out.extend_from_slice(&dim(s.ego_cell.1).to_le_bytes());
    out.extend_from_slice(&s.static_maps);
    for v in &s.dynamic {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.drivable_mask);
    for p in &s.gt {
        out.extend_from_slice(&p[0].to_le_bytes());
        out.extend_from_slice(&p[1].to_le_bytes());
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_sample(bytes: &[u8]) -> Result<RasterSample, FormatError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(FormatError::BadMagic { expected: "CASP" });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch { found: version as u32, expected: VERSION as u32 });
    }
    let _flags = r.u16()?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [height, width, t_in, t_out, fs, fd] = dims;
    if fs != F_S || fd != F_D {
        return Err(FormatError::Invalid(format!("channel counts {fs}/{fd} differ from {F_S}/{F_D}")));
    }
    let resolution = f32::from_le_bytes(r.take(4)?.try_into().expect("four bytes"));
    let ego_cell = (r.u32()? as usize, r.u32()? as usize);
    let plane = height.checked_mul(width).ok_or(FormatError::Invalid("grid too large".into()))?;
    let payload_len = fs * plane + 4 * t_in * fd * plane + plane + 8 * t_out;
    let needed = HEADER_LEN + payload_len + 4;
    if bytes.len() < needed {
        return Err(FormatError::Truncated { needed, available: bytes.len() });
    }
    let payload_start = r.position();
    let static_maps = r.take(fs * plane)?.to_vec();
    let dynamic = r.f32s(t_in * fd * plane)?;
    let drivable_mask = r.take(plane)?.to_vec();
    let gt = r.f32s(2 * t_out)?.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let computed = crc32fast::hash(&bytes[payload_start..r.position()]);
    let stored = r.u32()?;
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    if r.remaining() != 0 {
        return Err(FormatError::Invalid(format!("{} trailing bytes", r.remaining())));
    }
    let sample = RasterSample { height, width, t_in, t_out, resolution, static_maps, dynamic, drivable_mask, gt, ego_cell };
    sample.validate().map_err(FormatError::Invalid)?;
    Ok(sample)
}

pub fn write_sample(path: &Path, s: &RasterSample) -> Result<(), FormatError> {
    Ok(std::fs::write(path, encode_sample(s))?)
}

pub fn read_sample(path: &Path) -> Result<RasterSample, FormatError> {
    decode_sample(&std::fs::read(path)?)
}
