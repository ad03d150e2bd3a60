//! Binary checkpoints, little-endian:
//!
//! ```text
//! "AFCKPT01" | u32 version = 1 | u32 count |
//!   count × ( u16 name_len | name | u8 ndim | ndim × u32 dim | f32 payload )
//! ```

use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::FusionModel;
use crate::numerics::Tensor;
use crate::params::ModelParams;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AFCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * params.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(params.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name {name} is too long")))?;
        let ndim = u8::try_from(t.shape().len()).map_err(|_| Error::Checkpoint(format!("tensor {name} has too many dims")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("tensor {name} is too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut params = ModelParams::new();
    for i in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i} has a non-UTF-8 name")))?
            .to_string();
        let ndim = r.take(1, "ndim")?[0] as usize;
        let shape = (0..ndim).map(|_| r.u32(&format!("shape of {name}")).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?, &format!("payload of {name}"))?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        params
            .insert(name.clone(), Tensor::new(&shape, data)?)
            .map_err(|_| Error::Checkpoint(format!("duplicate tensor {name}")))?;
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last tensor", bytes.len() - r.at)));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint without checking it against any configuration.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Reads a checkpoint and validates every tensor against the model that `cfg`
/// describes.
pub fn load_for_config(path: &Path, cfg: &TrainConfig) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    params.validate(&FusionModel::new(cfg)?.parameter_specs())?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        FusionModel::new(&TrainConfig::tiny()).unwrap().init_params(1).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let bytes = encode_checkpoint(&p).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), p.names().collect::<Vec<_>>());
        for ((_, a), (_, b)) in p.iter().zip(back.iter()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn layout_header() {
        let mut p = ModelParams::new();
        p.insert("ab", Tensor::new(&[2], vec![1.0f32, 2.0]).unwrap()).unwrap();
        let bytes = encode_checkpoint(&p).unwrap();
        // 8 magic + 4 version + 4 count + 2 len + 2 name + 1 ndim + 4 dim + 8 payload
        assert_eq!(bytes.len(), 33);
        assert_eq!(&bytes[16..18], &2u16.to_le_bytes());
        assert_eq!(&bytes[18..20], b"ab");
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode_checkpoint(&params()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
        for cut in [4, 15, 40, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&params(), &path).unwrap();
        let mut cfg = TrainConfig::tiny();
        assert!(load_for_config(&path, &cfg).is_ok());
        cfg.dk = 8;
        let msg = load_for_config(&path, &cfg).unwrap_err().to_string();
        assert!(msg.contains("fusion.vggish.wq"), "{msg}");
    }
}
