//! `CSID` binary recordings.
//!
//! 64-byte little-endian header: magic `CSID`, version `u32` = 1, T, S, A as
//! `u32`, sample rate `f64`, gesture/location/orientation/user/room as `u16`,
//! origin `u8` (0 real, 1 synthetic), zero padding. The payload follows as
//! T·S·A pairs of `f64` (re, im), t-major then subcarrier then antenna.

use std::fs;
use std::path::Path;

use super::{Complex, ConditionLabel, CsiDims, CsiRecording, Origin};
use crate::error::{Error, Result};

pub const CSID_MAGIC: &[u8; 4] = b"CSID";
pub const CSID_HEADER_LEN: usize = 64;
const VERSION: u32 = 1;

pub fn encode_csid(rec: &CsiRecording) -> Vec<u8> {
    let d = rec.dims();
    let mut out = Vec::with_capacity(CSID_HEADER_LEN + rec.samples().len() * 16);
    out.extend_from_slice(CSID_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [d.frames, d.subcarriers, d.antennas] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&rec.sample_rate_hz().to_le_bytes());
    write_condition(&mut out, &rec.condition);
    out.push(rec.origin.to_byte());
    out.resize(CSID_HEADER_LEN, 0);
    for z in rec.samples() {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    out
}

pub(crate) fn write_condition(out: &mut Vec<u8>, c: &ConditionLabel) {
    for v in [c.gesture, c.location, c.orientation, c.user, c.room] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_condition(b: &[u8]) -> ConditionLabel {
    let f = |i: usize| u16::from_le_bytes([b[2 * i], b[2 * i + 1]]);
    ConditionLabel {
        gesture: f(0),
        location: f(1),
        orientation: f(2),
        user: f(3),
        room: f(4),
    }
}

pub(crate) fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

pub(crate) fn f64_at(b: &[u8], off: usize) -> f64 {
    f64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

/// Decode a `CSID` buffer; `path` is only used in error messages.
pub fn decode_csid(buf: &[u8], path: &Path) -> Result<CsiRecording> {
    if buf.len() < 4 || &buf[..4] != CSID_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "CSID",
        });
    }
    if buf.len() < CSID_HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            len: buf.len(),
            expected: CSID_HEADER_LEN,
        });
    }
    let version = u32_at(buf, 4);
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            version,
        });
    }
    let dims = CsiDims {
        frames: u32_at(buf, 8) as usize,
        subcarriers: u32_at(buf, 12) as usize,
        antennas: u32_at(buf, 16) as usize,
    };
    let sample_rate = f64_at(buf, 20);
    let condition = read_condition(&buf[28..38]);
    let origin = Origin::from_byte(buf[38])
        .ok_or_else(|| Error::invalid(format!("{}: unknown origin byte {}", path.display(), buf[38])))?;
    let payload = dims
        .len()
        .and_then(|n| n.checked_mul(16))
        .and_then(|n| n.checked_add(CSID_HEADER_LEN))
        .ok_or_else(|| Error::DimensionOverflow {
            path: path.to_path_buf(),
        })?;
    if buf.len() != payload {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            len: buf.len(),
            expected: payload,
        });
    }
    let samples = buf[CSID_HEADER_LEN..]
        .chunks_exact(16)
        .map(|c| Complex::new(f64_at(c, 0), f64_at(c, 8)))
        .collect();
    CsiRecording::new(dims, samples, sample_rate, condition, origin)
}

pub fn write_csid(rec: &CsiRecording, path: &Path) -> Result<()> {
    fs::write(path, encode_csid(rec)).map_err(|e| Error::io(path, e))
}

pub fn read_csid(path: &Path) -> Result<CsiRecording> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_csid(&buf, path)
}
