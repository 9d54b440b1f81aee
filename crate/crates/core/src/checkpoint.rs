//! Binary model checkpoints.
//!
//! Layout, little-endian: `"URDM"`, u32 version, u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims and f64
//! values. The training configuration follows as `key=value` lines.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"URDM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model, cfg: &TrainConfig) -> Result<Vec<u8>> {
    if model.cfg != cfg.model {
        return Err(Error::Checkpoint("model and training configs disagree".into()));
    }
    let store = &model.store;
    let mut out = Vec::with_capacity(16 + 8 * store.total_values());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(cfg.to_kv().as_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.bytes.len(),
            detail: format!("truncated checkpoint while reading {what}"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TrainConfig, Model)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, detail: "bad checkpoint magic".into() });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.pos;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format { offset: at + 2, detail: "tensor name is not UTF-8".into() })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let payload = numel
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format { offset: at, detail: format!("tensor {name} is too large") })?;
        let data = r
            .take(payload, "payload")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if store.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    let trailer = std::str::from_utf8(&bytes[r.pos..])
        .map_err(|_| Error::Format { offset: r.pos, detail: "config trailer is not UTF-8".into() })?;
    if !trailer.ends_with('\n') {
        return Err(Error::Format { offset: bytes.len(), detail: "truncated config trailer".into() });
    }
    let cfg = TrainConfig::from_kv(trailer).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let model = Model::from_store(cfg.model, store)?;
    Ok((cfg, model))
}

pub fn save_checkpoint(model: &Model, cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, cfg)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrainConfig, Model)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::DetRng;
    use rand::SeedableRng;

    fn small() -> (TrainConfig, Model) {
        let model = ModelConfig {
            feature_dim: 5,
            dim: 16,
            ff_dim: 8,
            mem_n: 3,
            mem_a: 4,
            cls_hidden: (6, 3),
            ..Default::default()
        };
        let cfg = TrainConfig { model, seed: 11, ..Default::default() };
        (cfg, Model::init(model, &mut DetRng::seed_from_u64(11)).unwrap())
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let (cfg, model) = small();
        let bytes = encode_checkpoint(&model, &cfg).unwrap();
        let (cfg2, model2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(model2.store, model.store);
        assert_eq!(encode_checkpoint(&model2, &cfg2).unwrap(), bytes);
        let x = Tensor::matrix(3, 5, (0..15).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(model.score(&x).unwrap(), model2.score(&x).unwrap());
    }

    #[test]
    fn file_round_trip() {
        let (cfg, model) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.urdm");
        save_checkpoint(&model, &cfg, &path).unwrap();
        let (_, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.store, model.store);
    }

    #[test]
    fn header_faults() {
        let (cfg, model) = small();
        let bytes = encode_checkpoint(&model, &cfg).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn every_truncation_is_a_fault() {
        let (cfg, model) = small();
        let bytes = encode_checkpoint(&model, &cfg).unwrap();
        for cut in (0..bytes.len()).step_by(7).chain([bytes.len() - 1]) {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn config_shape_mismatch_is_a_fault() {
        let (cfg, model) = small();
        let bytes = encode_checkpoint(&model, &cfg).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        assert!(text.contains("mem_n=3\n"));
        let start = bytes.len() - cfg.to_kv().len();
        let mut bad = bytes[..start].to_vec();
        bad.extend_from_slice(cfg.to_kv().replace("mem_n=3", "mem_n=5").as_bytes());
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
    }
}
