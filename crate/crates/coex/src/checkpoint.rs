//! Versioned binary checkpoints: hyperparameters, every named parameter
//! array, and the per-parameter optimizer state. Values are stored as raw
//! little-endian f64 bits, so save/load round-trips are bit-exact.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::config::Hyperparams;
use crate::diff::{Mat, ParamStore};
use crate::meta::GmaAgent;

const MAGIC: &[u8; 8] = b"COEXCKP1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
}

fn write_mat(w: &mut impl Write, m: &Mat) -> io::Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_mat(r: &mut impl Read) -> Result<Mat, CheckpointError> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    if rows.checked_mul(cols).is_none() || rows * cols > 1 << 28 {
        return Err(CheckpointError::Corrupt("implausible matrix shape".into()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    let mut b = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Mat::from_shape_vec((rows, cols), data)
        .map_err(|e| CheckpointError::Corrupt(format!("shape: {e}")))
}

/// Save the agent (hyperparameters + parameters + optimizer state).
pub fn save_agent(path: &Path, agent: &GmaAgent) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let hp_json = serde_json::to_vec(&agent.hp)?;
    w.write_all(&(hp_json.len() as u64).to_le_bytes())?;
    w.write_all(&hp_json)?;
    w.write_all(&(agent.store.len() as u64).to_le_bytes())?;
    for name in agent.store.names() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        write_mat(&mut w, agent.store.value(name)?)?;
        let (m, v, step) = agent.store.optimizer_state(name)?;
        write_mat(&mut w, m)?;
        write_mat(&mut w, v)?;
        w.write_all(&step.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Load an agent saved by [`save_agent`].
pub fn load_agent(path: &Path) -> Result<GmaAgent, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let hp_len = read_u64(&mut r)? as usize;
    let mut hp_json = vec![0u8; hp_len];
    r.read_exact(&mut hp_json)?;
    let hp: Hyperparams = serde_json::from_slice(&hp_json)?;
    let count = read_u64(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Corrupt("implausible name length".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Corrupt("non-UTF8 parameter name".into()))?;
        let value = read_mat(&mut r)?;
        let m = read_mat(&mut r)?;
        let v = read_mat(&mut r)?;
        let step = read_u64(&mut r)?;
        store.register(&name, value)?;
        store.set_optimizer_state(&name, m, v, step)?;
    }
    Ok(GmaAgent::from_parts(store, hp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Hyperparams;
    use crate::meta::GmaAgent;

    #[test]
    fn round_trip_is_bit_exact() {
        let hp = Hyperparams {
            history_len: 4,
            hidden: 8,
            latent_dim: 3,
            num_experts: 2,
            ..Hyperparams::default()
        };
        let agent = GmaAgent::new(&hp, 123).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_agent(&path, &agent).unwrap();
        let loaded = load_agent(&path).unwrap();
        assert_eq!(loaded.hp, agent.hp);
        assert_eq!(
            loaded.store.names().collect::<Vec<_>>(),
            agent.store.names().collect::<Vec<_>>()
        );
        for name in agent.store.names() {
            let a = agent.store.value(name).unwrap();
            let b = loaded.store.value(name).unwrap();
            assert_eq!(a.dim(), b.dim());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Double round-trip produces identical bytes.
        let path2 = dir.path().join("ckpt2.bin");
        save_agent(&path2, &loaded).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTACKPT plus junk").unwrap();
        assert!(matches!(load_agent(&path), Err(CheckpointError::BadMagic)));
    }
}
