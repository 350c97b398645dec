//! Single-file checkpoint container: versioned header, stage tag, step
//! counter, config snapshot and hash, free-form metadata, a named tensor
//! table with little-endian float32 payloads, and a SHA-256 integrity
//! trailer. Save -> load -> save is byte-identical.
//!
//! Because payloads are f32, [`snap_to_f32`] rounds in-memory f64 parameters
//! to their stored values at every save; training continued in-process and
//! training resumed from the file then see bit-identical numbers.

use std::io::{Read, Write};

use indexmap::IndexMap;
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PVOXCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub step: u64,
    pub config_hash: String,
    pub config_toml: String,
    /// JSON blob for stage extras: loss history, balancer draws, optimizer
    /// step counters, retained code sets, effective model configs.
    pub meta_json: String,
    pub tensors: IndexMap<String, Array2<f64>>,
}

fn write_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn read_u64(data: &[u8], at: &mut usize) -> Result<u64> {
    let end = *at + 8;
    if end > data.len() {
        return Err(Error::format("checkpoint truncated"));
    }
    let v = u64::from_le_bytes(data[*at..end].try_into().unwrap());
    *at = end;
    Ok(v)
}

fn read_bytes<'d>(data: &'d [u8], at: &mut usize) -> Result<&'d [u8]> {
    let len = read_u64(data, at)? as usize;
    let end = *at + len;
    if end > data.len() {
        return Err(Error::format("checkpoint truncated"));
    }
    let s = &data[*at..end];
    *at = end;
    Ok(s)
}

fn read_str(data: &[u8], at: &mut usize) -> Result<String> {
    let bytes = read_bytes(data, at)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::format("checkpoint string not UTF-8"))
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_bytes(&mut out, self.stage.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        write_bytes(&mut out, self.config_hash.as_bytes());
        write_bytes(&mut out, self.config_toml.as_bytes());
        write_bytes(&mut out, self.meta_json.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, tensor) in &self.tensors {
            write_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(tensor.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(tensor.ncols() as u32).to_le_bytes());
            for &v in tensor.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(data: &[u8]) -> Result<Checkpoint> {
        if data.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::format("checkpoint too short"));
        }
        let (body, trailer) = data.split_at(data.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != trailer {
            return Err(Error::format("checkpoint checksum mismatch"));
        }
        if &body[..8] != MAGIC {
            return Err(Error::format("bad checkpoint magic"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Unsupported(format!("checkpoint version {version}")));
        }
        let mut at = 12usize;
        let stage = read_str(body, &mut at)?;
        let step = read_u64(body, &mut at)?;
        let config_hash = read_str(body, &mut at)?;
        let config_toml = read_str(body, &mut at)?;
        let meta_json = read_str(body, &mut at)?;
        let n_tensors = read_u64(body, &mut at)? as usize;
        let mut tensors = IndexMap::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = read_str(body, &mut at)?;
            if at + 8 > body.len() {
                return Err(Error::format("checkpoint truncated in tensor header"));
            }
            let rows = u32::from_le_bytes(body[at..at + 4].try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(body[at + 4..at + 8].try_into().unwrap()) as usize;
            at += 8;
            let count = rows * cols;
            let end = at + count * 4;
            if end > body.len() {
                return Err(Error::format("checkpoint truncated in tensor payload"));
            }
            let mut values = Vec::with_capacity(count);
            for chunk in body[at..end].chunks_exact(4) {
                values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
            at = end;
            let tensor = Array2::from_shape_vec((rows, cols), values)
                .map_err(|_| Error::format("bad tensor shape"))?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::format(format!("duplicate tensor {name}")));
            }
        }
        if at != body.len() {
            return Err(Error::format("trailing bytes in checkpoint"));
        }
        Ok(Checkpoint {
            stage,
            step,
            config_hash,
            config_toml,
            meta_json,
            tensors,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let mut data = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Dependency(format!("{}: {e}", path.display())))?
            .read_to_end(&mut data)?;
        Self::decode(&data)
    }
}

/// Rounds every value through f32, so in-memory parameters equal what a
/// checkpoint stores.
pub fn snap_to_f32(tensor: &mut Array2<f64>) {
    tensor.mapv_inplace(|v| v as f32 as f64);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = IndexMap::new();
        tensors.insert(
            "a.weight".to_string(),
            Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.25),
        );
        tensors.insert("b.bias".to_string(), Array2::from_elem((1, 4), -1.5));
        Checkpoint {
            stage: "vqvae".to_string(),
            step: 123,
            config_hash: "deadbeef".to_string(),
            config_toml: "[dsp]\nn_fft = 1024\n".to_string(),
            meta_json: r#"{"losses":[1.0,0.5]}"#.to_string(),
            tensors,
        }
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let ckpt = sample();
        let bytes = ckpt.encode();
        let loaded = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(loaded, ckpt);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = sample();
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let ckpt = sample();
        let mut bytes = ckpt.encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        match Checkpoint::decode(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("checksum")),
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 10]).is_err());
    }

    #[test]
    fn f32_snap_is_idempotent_under_roundtrip() {
        let mut ckpt = sample();
        for (_, t) in ckpt.tensors.iter_mut() {
            t[[0, 0]] = 0.1 + 0.2; // not f32-exact
        }
        let first = Checkpoint::decode(&ckpt.encode()).unwrap();
        let second = Checkpoint::decode(&first.encode()).unwrap();
        assert_eq!(first, second);

        // snapping in memory matches what the file stores
        let mut t = Array2::from_elem((1, 1), 0.1 + 0.2);
        snap_to_f32(&mut t);
        assert_eq!(t[[0, 0]], first.tensors["a.weight"][[0, 0]]);
    }
}
