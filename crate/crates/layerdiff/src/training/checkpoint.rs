//! Single-file checkpoints: a fixed magic, a JSON manifest (version,
//! config, step, RNG state, and a name -> (offset, shape) index), then one
//! raw little-endian f64 blob holding parameters and optimizer moments.
//! Round-tripping restores training state bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::tensor::{DRng, Tensor};

use super::Trainer;

const MAGIC: &[u8; 4] = b"LDCK";
const VERSION: u32 = 1;

#[derive(thiserror::Error, Debug)]
pub enum CheckpointError {
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint file truncated")]
    Truncated,
    #[error("checkpoint is missing entry `{0}`")]
    MissingEntry(String),
    #[error("checkpoint entry `{0}` has mismatched shape")]
    ShapeMismatch(String),
    #[error("invalid checkpoint config: {0}")]
    Config(#[from] crate::config::ConfigError),
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    offset: u64, // in f64 units into the blob
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: Config,
    step: u64,
    rng_state: u64,
    entries: Vec<Entry>,
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<(), CheckpointError> {
    let mut entries = Vec::new();
    let mut blob: Vec<f64> = Vec::new();
    let push = |name: String, shape: Vec<usize>, frozen: bool, data: &[f64], blob: &mut Vec<f64>, entries: &mut Vec<Entry>| {
        entries.push(Entry { name, offset: blob.len() as u64, shape, frozen });
        blob.extend_from_slice(data);
    };
    for (id, slot) in trainer.store.slots() {
        let shape = slot.value.shape().to_vec();
        push(slot.name.clone(), shape.clone(), slot.frozen, slot.value.data(), &mut blob, &mut entries);
        push(format!("optim.m.{}", slot.name), shape.clone(), false, &trainer.optim.m[id.0], &mut blob, &mut entries);
        push(format!("optim.v.{}", slot.name), shape, false, &trainer.optim.v[id.0], &mut blob, &mut entries);
        push(
            format!("optim.count.{}", slot.name),
            vec![1],
            false,
            &[trainer.optim.counts[id.0] as f64],
            &mut blob,
            &mut entries,
        );
    }
    let manifest = Manifest {
        version: VERSION,
        config: trainer.cfg.clone(),
        step: trainer.optim.step,
        rng_state: trainer.rng.state(),
        entries,
    };
    let mjson = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + mjson.len() + blob.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&mjson);
    for v in &blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Rebuild a trainer from a checkpoint. The model is reconstructed from the
/// stored config and every parameter, optimizer moment, step counter, and
/// the RNG state are restored bit-exactly.
pub fn load_checkpoint(path: &Path) -> Result<Trainer, CheckpointError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(CheckpointError::Truncated);
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])?;
    manifest.config.validate()?;
    let blob_bytes = &bytes[16 + mlen..];
    if blob_bytes.len() % 8 != 0 {
        return Err(CheckpointError::Truncated);
    }
    let blob: Vec<f64> = blob_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f64>, CheckpointError> {
        let e = manifest
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::MissingEntry(name.to_string()))?;
        if e.shape != shape {
            return Err(CheckpointError::ShapeMismatch(name.to_string()));
        }
        let n: usize = shape.iter().product();
        let start = e.offset as usize;
        if start + n > blob.len() {
            return Err(CheckpointError::Truncated);
        }
        Ok(blob[start..start + n].to_vec())
    };

    let mut trainer = Trainer::new(manifest.config.clone(), 0);
    let ids: Vec<_> = trainer.store.slots().map(|(id, s)| (id, s.name.clone(), s.value.shape().to_vec())).collect();
    for (id, name, shape) in ids {
        let value = fetch(&name, &shape)?;
        trainer.store.set_value(id, Tensor::param(&shape, value));
        let frozen = manifest
            .entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.frozen)
            .unwrap_or(false);
        trainer.store.set_frozen(id, frozen);
        trainer.optim.m[id.0] = fetch(&format!("optim.m.{name}"), &shape)?;
        trainer.optim.v[id.0] = fetch(&format!("optim.v.{name}"), &shape)?;
        trainer.optim.counts[id.0] = fetch(&format!("optim.count.{name}"), &[1])?[0] as u64;
    }
    trainer.optim.step = manifest.step;
    trainer.rng = DRng::from_state(manifest.rng_state);
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::generate_scene;
    use crate::tensor::DRng;

    fn smoke_trainer(seed: u64) -> Trainer {
        let mut cfg = Config::smoke();
        cfg.training.t0 = 2;
        cfg.training.t1 = 4;
        cfg.diffusion.timesteps = 50;
        Trainer::new(cfg, seed)
    }

    fn all_params(t: &Trainer) -> Vec<(String, Vec<f64>)> {
        t.store
            .slots()
            .map(|(_, s)| (s.name.clone(), s.value.data().to_vec()))
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut tr = smoke_trainer(1);
        let sample = generate_scene(&mut DRng::new(3), &tr.cfg.data);
        for _ in 0..3 {
            tr.train_step(&[&sample]).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&tr, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(all_params(&tr), all_params(&back));
        assert_eq!(back.optim.step, tr.optim.step);
        assert_eq!(back.optim.m, tr.optim.m);
        assert_eq!(back.optim.v, tr.optim.v);
        assert_eq!(back.optim.counts, tr.optim.counts);
        assert_eq!(back.rng.state(), tr.rng.state());

        // save -> load -> save produces identical bytes
        let path2 = dir.path().join("ck2.bin");
        save_checkpoint(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn resume_matches_unbroken_run() {
        let sample = generate_scene(&mut DRng::new(4), &Config::smoke().data);
        let mut unbroken = smoke_trainer(2);
        for _ in 0..4 {
            unbroken.train_step(&[&sample]).unwrap();
        }

        let mut first = smoke_trainer(2);
        for _ in 0..2 {
            first.train_step(&[&sample]).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.bin");
        save_checkpoint(&first, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        for _ in 0..2 {
            resumed.train_step(&[&sample]).unwrap();
        }
        assert_eq!(all_params(&unbroken), all_params(&resumed));
    }

    #[test]
    fn truncated_file_fails_cleanly() {
        let tr = smoke_trainer(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&tr, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn garbage_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
    }
}
