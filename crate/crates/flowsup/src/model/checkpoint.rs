//! Binary checkpoint container.
//!
//! Layout: magic `FSCKPT1\n`, a little-endian u64 header length, a JSON
//! header (step, RNG state, config hash, and one entry per array with shape
//! and offset), then the concatenated f64 payload in little-endian byte
//! order. Floats are stored bit-exactly, so save → load → save reproduces
//! the file byte for byte.

use super::ParamSet;
use crate::autodiff::Arr;
use crate::{Error, Result};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"FSCKPT1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryMeta {
    key: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    step: u64,
    rng_seed: Vec<u8>,
    rng_word_pos: String,
    config_hash: String,
    entries: Vec<EntryMeta>,
}

/// Full training state: model parameters, optimizer state, step counter,
/// RNG position, and a hash of the generating configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub student: ParamSet,
    pub supervisor: Option<ParamSet>,
    pub opt_state: BTreeMap<String, Arr>,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut flat: Vec<(String, &Arr)> = Vec::new();
        for (name, value) in self.student.iter() {
            flat.push((format!("student.{name}"), value));
        }
        if let Some(sup) = &self.supervisor {
            for (name, value) in sup.iter() {
                flat.push((format!("supervisor.{name}"), value));
            }
        }
        for (name, value) in &self.opt_state {
            flat.push((format!("opt.{name}"), value));
        }

        let mut entries = Vec::with_capacity(flat.len());
        let mut offset = 0usize;
        for (key, value) in &flat {
            entries.push(EntryMeta {
                key: key.clone(),
                shape: value.shape().to_vec(),
                offset,
                len: value.len(),
            });
            offset += value.len();
        }
        let header = Header {
            step: self.step,
            rng_seed: self.rng_seed.to_vec(),
            rng_word_pos: self.rng_word_pos.to_string(),
            config_hash: self.config_hash.clone(),
            entries,
        };
        let header_json = serde_json::to_vec(&header)?;

        let mut out = Vec::with_capacity(16 + header_json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, value) in &flat {
            let std = value.as_standard_layout();
            for v in std.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + header_len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
        let payload = &bytes[16 + header_len..];

        let mut student = ParamSet::new();
        let mut supervisor_entries = ParamSet::new();
        let mut has_supervisor = false;
        let mut opt_state = BTreeMap::new();
        for entry in &header.entries {
            let start = entry.offset * 8;
            let end = start + entry.len * 8;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("entry {} out of range", entry.key)));
            }
            let mut data = Vec::with_capacity(entry.len);
            for chunk in payload[start..end].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            let arr = Arr::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Checkpoint(format!("entry {}: {e}", entry.key)))?;
            if let Some(name) = entry.key.strip_prefix("student.") {
                student.insert(name, arr);
            } else if let Some(name) = entry.key.strip_prefix("supervisor.") {
                has_supervisor = true;
                supervisor_entries.insert(name, arr);
            } else if let Some(name) = entry.key.strip_prefix("opt.") {
                opt_state.insert(name.to_string(), arr);
            } else {
                return Err(Error::Checkpoint(format!("unknown entry key {}", entry.key)));
            }
        }

        let rng_seed: [u8; 32] = header
            .rng_seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let rng_word_pos: u128 = header
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("bad rng word position".into()))?;
        Ok(Self {
            student,
            supervisor: has_supervisor.then_some(supervisor_entries),
            opt_state,
            step: header.step,
            rng_seed,
            rng_word_pos,
            config_hash: header.config_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_student_params, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let student = init_student_params(&cfg, &mut rng);
        let supervisor = crate::model::init_supervisor_from_student(&student, &cfg).unwrap();
        let mut opt_state = BTreeMap::new();
        opt_state.insert(
            "m.student.fenc.c1.w".to_string(),
            student.get("fenc.c1.w").unwrap() * 0.123,
        );
        let ckpt = Checkpoint {
            student,
            supervisor: Some(supervisor),
            opt_state,
            step: 1234,
            rng_seed: [7u8; 32],
            rng_word_pos: 0x1234_5678_9abc_def0,
            config_hash: "deadbeef".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded, ckpt);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"NOTACKPT").unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
