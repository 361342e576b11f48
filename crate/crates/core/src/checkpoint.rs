//! NSCK v1 checkpoint files.
//!
//! Layout (little-endian): magic `NSCK`, u32 version, u32 tensor count; per
//! tensor a u16 name length + UTF-8 name, u8 dtype (0 = f32), u8 rank,
//! rank × u64 extents and the row-major payload; finally u32 metadata length
//! + UTF-8 JSON metadata.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::field::Field;

const MAGIC: &[u8; 4] = b"NSCK";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub schedule: String,
    pub config_hash: String,
    #[serde(default)]
    pub frozen: bool,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Field)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Field> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, f)| f)
    }

    /// Content hash over every tensor name, shape and payload bit pattern.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, f) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update(f.digest().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, field) in &self.tensors {
            ensure!(
                seen.insert(name.as_str()),
                Format,
                "duplicate tensor name '{name}'"
            );
            ensure!(name.len() <= u16::MAX as usize, Format, "name too long");
            ensure!(field.shape().len() <= u8::MAX as usize, Format, "rank too large");
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(field.shape().len() as u8);
            for &d in field.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in field.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        ensure!(r.take(4)? == MAGIC, Format, "bad magic bytes");
        let version = r.u32()?;
        ensure!(version == VERSION, Format, "unsupported version {version}");
        let count = r.u32()? as usize;
        let mut seen = HashSet::new();
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            ensure!(
                seen.insert(name.clone()),
                Format,
                "duplicate tensor name '{name}'"
            );
            let dtype = r.u8()?;
            ensure!(dtype == DTYPE_F32, Format, "unsupported dtype {dtype}");
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format("extent overflow".into()))?;
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("extent overflow".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Field::new(shape, data)?));
        }
        let mlen = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(mlen)?)?;
        ensure!(r.pos == bytes.len(), Format, "trailing bytes after metadata");
        Ok(Checkpoint { tensors, meta })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated payload at byte {} (wanted {n} more)",
                self.pos
            ))),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// SHA-256 of the JSON serialisation of a config value.
pub fn hash_json<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one() -> Checkpoint {
        Checkpoint {
            tensors: vec![(
                "w".into(),
                Field::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            )],
            meta: CheckpointMeta {
                step: 7,
                schedule: "gaussian-linear".into(),
                config_hash: "abc".into(),
                ..Default::default()
            },
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nsck");
        save_checkpoint(&one(), &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), one());
    }

    #[test]
    fn empty_checkpoint() {
        let c = Checkpoint::default();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert!(back.tensors.is_empty());
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let mut b = one().to_bytes().unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        b.truncate(b.len() - 5);
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version() {
        let mut b = one().to_bytes().unwrap();
        b[4] = 2;
        let err = Checkpoint::from_bytes(&b).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = one();
        c.tensors.push(c.tensors[0].clone());
        assert!(c.to_bytes().is_err());
    }

    #[test]
    fn layout_is_bit_exact() {
        let b = one().to_bytes().unwrap();
        assert_eq!(&b[0..4], b"NSCK");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 1);
        assert_eq!(b[14], b'w');
        assert_eq!(b[15], 0);
        assert_eq!(b[16], 2);
        assert_eq!(u64::from_le_bytes(b[17..25].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[33..37].try_into().unwrap()), 1.0);
    }

    proptest! {
        #[test]
        fn random_roundtrip(
            tensors in prop::collection::vec(
                (prop::collection::vec(1usize..4, 0..4), any::<u32>()), 0..6),
        ) {
            let ck = Checkpoint {
                tensors: tensors.iter().enumerate().map(|(i, (shape, seed))| {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|j| {
                        let bits = seed.wrapping_mul(2654435761).wrapping_add(j as u32 * 97);
                        let v = f32::from_bits(bits);
                        if v.is_finite() { v } else { j as f32 }
                    }).collect();
                    (format!("t{i}"), Field::new(shape.clone(), data).unwrap())
                }).collect(),
                meta: CheckpointMeta::default(),
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.content_hash(), ck.content_hash());
        }
    }
}
