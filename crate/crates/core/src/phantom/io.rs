//! PVOL1 volume files.
//!
//! Layout: 8-byte magic `PVOL1\0\0\0`, a little-endian `u32` byte length,
//! a UTF-8 JSON header `{extents, spacing, has_mask, dtype: "f32"}`,
//! row-major little-endian `f32` intensities, then (if `has_mask`) the roi
//! mask packed LSB-first, eight voxels per byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const MAGIC: &[u8; 8] = b"PVOL1\0\0\0";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    extents: [usize; 3],
    spacing: f64,
    has_mask: bool,
    dtype: String,
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        extents: v.extents,
        spacing: v.spacing,
        has_mask: v.roi_mask.is_some(),
        dtype: "f32".into(),
    })?;
    let n = v.len();
    let mut out = Vec::with_capacity(12 + header.len() + 4 * n + n / 8 + 1);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for x in &v.intensities {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(mask) = &v.roi_mask {
        let mut packed = vec![0u8; n.div_ceil(8)];
        for (i, &b) in mask.iter().enumerate() {
            if b {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic: not a PVOL1 file".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::Format(format!(
            "header truncated: expected {hlen} bytes, found {}",
            body.len()
        )));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let n: usize = header.extents.iter().product();
    let mask_bytes = if header.has_mask { n.div_ceil(8) } else { 0 };
    let expected = 4 * n + mask_bytes;
    let payload = &body[hlen..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload size mismatch for extents {:?}: expected {expected} bytes, found {}",
            header.extents,
            payload.len()
        )));
    }
    let intensities = payload[..4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let roi_mask = header.has_mask.then(|| {
        let packed = &payload[4 * n..];
        (0..n).map(|i| packed[i / 8] & (1 << (i % 8)) != 0).collect()
    });
    Ok(Volume {
        extents: header.extents,
        spacing: header.spacing,
        intensities,
        roi_mask,
    })
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    fs::write(path, encode_volume(v)?)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode_volume(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let mut v = Volume::filled([3, 4, 5], 1.5, -1.0);
        for (i, x) in v.intensities.iter_mut().enumerate() {
            *x = (i as f32 * 0.37).sin();
        }
        v.roi_mask = Some((0..60).map(|i| i % 7 < 3).collect());
        v
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let v = sample();
        let back = decode_volume(&encode_volume(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        let mut nomask = v.clone();
        nomask.roi_mask = None;
        assert_eq!(decode_volume(&encode_volume(&nomask).unwrap()).unwrap(), nomask);
    }

    #[test]
    fn truncated_file_reports_byte_counts() {
        let bytes = encode_volume(&sample()).unwrap();
        let err = decode_volume(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("expected 248 bytes, found 245"), "{err}");
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut bytes = encode_volume(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(decode_volume(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn extents_disagreeing_with_payload_rejected() {
        let v = sample();
        let mut bytes = encode_volume(&v).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[12..12 + hlen].to_vec()).unwrap();
        let patched = header.replace("[3,4,5]", "[3,4,6]");
        assert_eq!(patched.len(), header.len());
        bytes.splice(12..12 + hlen, patched.into_bytes());
        assert!(decode_volume(&bytes).unwrap_err().to_string().contains("mismatch"));
    }
}
