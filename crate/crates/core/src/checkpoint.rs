//! Checkpoint container: a flat file of named `f64` arrays plus a plain-text
//! manifest.
//!
//! `arrays.bin` layout (little endian):
//!
//! ```text
//! b"CPCARR1\n"  u64 count
//! repeated: u32 name_len, name bytes (utf-8), u64 rows, u64 cols, rows*cols f64
//! ```
//!
//! `manifest.txt` holds `key = value` lines; `config_hash`, `step`, `seed`
//! and `arrays_sha256` are always present. Loading with an expected config
//! hash that differs from the stored one is rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cpc_autograd::Mat;
use sha2::{Digest, Sha256};

use crate::params::ParamStore;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CPCARR1\n";
pub const ARRAYS_FILE: &str = "arrays.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
    pub arrays: ParamStore,
    /// Extra manifest entries (epoch counters, best scores, ...).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>, step: u64, seed: u64, arrays: ParamStore) -> Self {
        Checkpoint { config_hash: config_hash.into(), step, seed, arrays, meta: BTreeMap::new() }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = encode_arrays(&self.arrays);
        let digest = hex::encode(Sha256::digest(&bytes));
        let arrays_path = dir.join(ARRAYS_FILE);
        fs::write(&arrays_path, &bytes).map_err(|e| Error::io(&arrays_path, e))?;
        let mut manifest = format!(
            "format = cpc-checkpoint-1\nconfig_hash = {}\nstep = {}\nseed = {}\narrays = {}\narrays_sha256 = {}\n",
            self.config_hash,
            self.step,
            self.seed,
            self.arrays.len(),
            digest
        );
        for (k, v) in &self.meta {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::Checkpoint(format!("manifest entry `{k}` is not representable")));
            }
            manifest.push_str(&format!("{k} = {v}\n"));
        }
        let manifest_path = dir.join(MANIFEST_FILE);
        fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
    }

    /// Loads a checkpoint; `expected_hash` rejects containers written under a
    /// different configuration.
    pub fn load(dir: &Path, expected_hash: Option<&str>) -> Result<Checkpoint> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut entries = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed manifest line `{line}`")))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |k: &str| {
            entries.remove(k).ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{k}`")))
        };
        let config_hash = take("config_hash")?;
        let step: u64 = take("step")?.parse().map_err(|_| Error::Checkpoint("bad step".into()))?;
        let seed: u64 = take("seed")?.parse().map_err(|_| Error::Checkpoint("bad seed".into()))?;
        let digest = take("arrays_sha256")?;
        take("format")?;
        take("arrays")?;
        if let Some(expected) = expected_hash {
            if expected != config_hash {
                return Err(Error::Checkpoint(format!(
                    "config hash mismatch: checkpoint {config_hash}, current {expected}"
                )));
            }
        }
        let arrays_path = dir.join(ARRAYS_FILE);
        let bytes = fs::read(&arrays_path).map_err(|e| Error::io(&arrays_path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != digest {
            return Err(Error::Checkpoint("array file does not match manifest digest".into()));
        }
        let arrays = decode_arrays(&bytes)?;
        Ok(Checkpoint { config_hash, step, seed, arrays, meta: entries })
    }
}

pub fn encode_arrays(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.total_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, m) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_arrays(bytes: &[u8]) -> Result<ParamStore> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint array file".into()));
    }
    let count = cur.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("array name is not utf-8".into()))?
            .to_string();
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Checkpoint("array too large".into()))?;
        let data: Vec<f64> = cur
            .take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Mat::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        store.insert(name, m);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in array file".into()));
    }
    Ok(store)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated array file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("dec.0.self.wq", Mat::from_shape_fn((3, 2), |(i, j)| (i as f64 - 0.3) * (j as f64 + 1.7).exp()));
        s.insert("capl.task.w1", Mat::from_elem((1, 4), -0.0));
        s.insert("adam.m.x", Mat::from_elem((2, 2), f64::MIN_POSITIVE));
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::new("abc123", 17, 4, sample_store());
        ck.meta.insert("epoch".into(), "3".into());
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path(), Some("abc123")).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.seed, 4);
        assert_eq!(back.meta.get("epoch").map(String::as_str), Some("3"));
        for (name, m) in ck.arrays.iter() {
            let b = back.arrays.get(name).unwrap();
            let lhs: Vec<u64> = m.iter().map(|v| v.to_bits()).collect();
            let rhs: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(lhs, rhs, "{name}");
        }
    }

    #[test]
    fn hash_mismatch_and_corruption_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::new("abc", 1, 0, sample_store()).save(dir.path()).unwrap();
        assert!(matches!(Checkpoint::load(dir.path(), Some("other")), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::load(dir.path(), None).is_ok());
        let path = dir.path().join(ARRAYS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path(), None), Err(Error::Checkpoint(_))));
        assert!(decode_arrays(b"CPCARR1\n\x05").is_err());
    }
}
