//! FVB: little-endian binary snippet-feature files.
//!
//! ```text
//! "FVB1" | u32 T | u32 F | u8 label | u32 gt_len | gt_len × u8 | T·F × f32 (row-major)
//! ```
//!
//! Values are stored as `f32`; sequences whose values are exactly
//! representable in `f32` round-trip bit for bit.

use std::fs;
use std::path::Path;

use super::{VideoFeatureSequence, VideoLabel, FRAMES_PER_SNIPPET};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FVB_MAGIC: &[u8; 4] = b"FVB1";
const HEADER_LEN: usize = 4 + 4 + 4 + 1 + 4;

pub fn encode_fvb(seq: &VideoFeatureSequence) -> Result<Vec<u8>> {
    seq.validate()?;
    let (t, f) = (seq.snippets(), seq.feature_dim());
    let gt = seq.frame_gt.as_deref().unwrap_or(&[]);
    let mut out = Vec::with_capacity(HEADER_LEN + gt.len() + 4 * t * f);
    out.extend_from_slice(FVB_MAGIC);
    out.extend_from_slice(&u32_of(t, "T")?.to_le_bytes());
    out.extend_from_slice(&u32_of(f, "F")?.to_le_bytes());
    out.push(seq.video_label.as_u8());
    out.extend_from_slice(&u32_of(gt.len(), "gt_len")?.to_le_bytes());
    out.extend_from_slice(gt);
    for &v in seq.features.data() {
        let single = v as f32;
        if !single.is_finite() {
            return Err(Error::Input(format!(
                "{}: value {v} does not fit in f32",
                seq.id
            )));
        }
        out.extend_from_slice(&single.to_le_bytes());
    }
    Ok(out)
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Input(format!("{what} = {v} exceeds u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.bytes.len(),
                detail: format!("truncated while reading {what} at byte {}", self.pos),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses an FVB byte buffer; `id` names the resulting sequence.
pub fn decode_fvb(bytes: &[u8], id: &str) -> Result<VideoFeatureSequence> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != FVB_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let t = cur.u32("T")? as usize;
    let f = cur.u32("F")? as usize;
    if t == 0 || f == 0 {
        return Err(Error::Format {
            offset: 4,
            detail: format!("empty feature matrix {t}x{f}"),
        });
    }
    let label_at = cur.pos;
    let label_byte = cur.take(1, "label")?[0];
    let label = VideoLabel::from_u8(label_byte).ok_or_else(|| Error::Format {
        offset: label_at,
        detail: format!("label byte {label_byte} is not 0 or 1"),
    })?;
    let gt_len_at = cur.pos;
    let gt_len = cur.u32("gt_len")? as usize;
    let frame_gt = if gt_len == 0 {
        None
    } else {
        if gt_len != FRAMES_PER_SNIPPET * t {
            return Err(Error::Format {
                offset: gt_len_at,
                detail: format!("gt_len {gt_len} != 16·T = {}", FRAMES_PER_SNIPPET * t),
            });
        }
        let gt_at = cur.pos;
        let gt = cur.take(gt_len, "frame ground truth")?;
        if let Some(k) = gt.iter().position(|&v| v > 1) {
            return Err(Error::Format {
                offset: gt_at + k,
                detail: format!("ground-truth byte {} is not 0 or 1", gt[k]),
            });
        }
        Some(gt.to_vec())
    };
    let n = t.checked_mul(f).ok_or_else(|| Error::Format {
        offset: 4,
        detail: "T·F overflows".into(),
    })?;
    let payload_at = cur.pos;
    let payload = cur.take(4 * n, "feature payload")?;
    let mut data = Vec::with_capacity(n);
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::Format {
                offset: payload_at + 4 * k,
                detail: format!("non-finite feature value {v}"),
            });
        }
        data.push(v as f64);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            detail: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    VideoFeatureSequence::new(id, Tensor::matrix(t, f, data)?, label, frame_gt)
}

/// Reads an FVB file; the sequence id is the file stem.
pub fn read_fvb(path: impl AsRef<Path>) -> Result<VideoFeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_fvb(&bytes, &id)
}

pub fn write_fvb(seq: &VideoFeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_fvb(seq)?)?;
    Ok(())
}
