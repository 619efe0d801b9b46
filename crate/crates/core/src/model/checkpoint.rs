//! Binary checkpoint container.
//!
//! ```text
//! "NFA1"
//! u64 meta length, meta JSON (config, optimizer settings, progress)
//! u64 blob count
//! per blob: u32 name length, name, u32 rank, u64 dims…, f64 values
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NeuFA, NeuFAConfig};
use crate::error::{Error, Result};
use crate::tensor::{Adam, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NFA1";
const META_VERSION: u32 = 1;
const MAX_NAME: usize = 4096;

/// Position inside a two-stage schedule: `step` steps of `stage` are done.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: u8,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    config: NeuFAConfig,
    optimizer: Option<OptimizerMeta>,
    progress: Option<Progress>,
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: NeuFA,
    pub optimizer: Option<Adam>,
    pub progress: Option<Progress>,
}

fn write_blob(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("checkpoint is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_blob(r: &mut impl Read) -> Result<(String, Tensor)> {
    let len = read_u32(r)? as usize;
    if len > MAX_NAME {
        return Err(Error::Format(format!("blob name of {len} bytes")));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(truncated)?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("blob name is not UTF-8".into()))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("blob `{name}` has rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.filter(|&n| n <= 1 << 32).ok_or_else(|| Error::Format(format!("blob `{name}` is too large")))?;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((name, Tensor::new(&shape, data)?))
}

/// Writes model parameters, and optionally optimizer state and progress.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &NeuFA,
    optimizer: Option<&Adam>,
    progress: Option<Progress>,
) -> Result<()> {
    let meta = Meta {
        version: META_VERSION,
        config: model.config.clone(),
        optimizer: optimizer.map(|a| OptimizerMeta {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.state.step,
        }),
        progress,
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;

    let n_params = model.store.len();
    let blobs = if optimizer.is_some() { 3 * n_params } else { n_params };
    w.write_all(&(blobs as u64).to_le_bytes())?;
    for p in model.store.iter() {
        write_blob(&mut w, &format!("param.{}", p.name), &p.value)?;
    }
    if let Some(a) = optimizer {
        for (p, m) in model.store.iter().zip(&a.state.m) {
            write_blob(&mut w, &format!("adam.m.{}", p.name), m)?;
        }
        for (p, v) in model.store.iter().zip(&a.state.v) {
            write_blob(&mut w, &format!("adam.v.{}", p.name), v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let meta_len = read_u64(&mut r)? as usize;
    if meta_len > 1 << 24 {
        return Err(Error::Format(format!("metadata of {meta_len} bytes")));
    }
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(truncated)?;
    let meta: Meta = serde_json::from_slice(&meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    if meta.version != META_VERSION {
        return Err(Error::Format(format!("checkpoint version {} (expected {META_VERSION})", meta.version)));
    }

    let mut model = NeuFA::new(meta.config)?;
    let n = model.store.len();
    let mut adam = meta.optimizer.as_ref().map(|o| {
        let mut a = Adam::new(&model.store, o.lr);
        a.beta1 = o.beta1;
        a.beta2 = o.beta2;
        a.eps = o.eps;
        a.state.step = o.step;
        a
    });
    let expected = if adam.is_some() { 3 * n } else { n };
    let count = read_u64(&mut r)? as usize;
    if count != expected {
        return Err(Error::Format(format!("{count} blobs, expected {expected}")));
    }
    let mut seen = vec![[false; 3]; n];
    for _ in 0..count {
        let (name, t) = read_blob(&mut r)?;
        let (kind, pname) = if let Some(p) = name.strip_prefix("param.") {
            (0, p)
        } else if let Some(p) = name.strip_prefix("adam.m.") {
            (1, p)
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            (2, p)
        } else {
            return Err(Error::Format(format!("unknown blob `{name}`")));
        };
        let id = model
            .store
            .id(pname)
            .ok_or_else(|| Error::Format(format!("blob `{name}` matches no parameter")))?;
        if t.shape() != model.store.value(id).shape() {
            return Err(Error::Format(format!(
                "blob `{name}` has shape {:?}, parameter has {:?}",
                t.shape(),
                model.store.value(id).shape()
            )));
        }
        let slot = match (kind, adam.as_mut()) {
            (0, _) => model.store.value_mut(id),
            (1, Some(a)) => &mut a.state.m[id.index()],
            (2, Some(a)) => &mut a.state.v[id.index()],
            _ => return Err(Error::Format(format!("optimizer blob `{name}` without optimizer metadata"))),
        };
        *slot = t;
        seen[id.index()][kind] = true;
    }
    let need = if adam.is_some() { 3 } else { 1 };
    if let Some(i) = seen.iter().position(|s| s[..need].iter().any(|&b| !b)) {
        let name = &model.store.iter().nth(i).expect("index in range").name;
        return Err(Error::Format(format!("checkpoint lacks `{name}`")));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last blob".into()));
    }
    Ok(Checkpoint {
        model,
        optimizer: adam,
        progress: meta.progress,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NeuFAConfig;

    fn model() -> NeuFA {
        NeuFA::new(NeuFAConfig::micro(5, 4)).unwrap()
    }

    #[test]
    fn round_trip_restores_every_value() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut m = model();
        let id = m.store.id("text.embedding.table").unwrap();
        m.store.value_mut(id).data_mut()[0] = 0.123456789;
        let mut adam = Adam::new(&m.store, 1e-3);
        adam.state.step = 17;
        adam.state.m[3].data_mut()[0] = -2.5;
        save_checkpoint(&p, &m, Some(&adam), Some(Progress { stage: 2, step: 5 })).unwrap();

        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.model.config, m.config);
        for (a, b) in ck.model.store.iter().zip(m.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(ck.optimizer.unwrap(), adam);
        assert_eq!(ck.progress, Some(Progress { stage: 2, step: 5 }));
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save_checkpoint(&a, &model(), None, None).unwrap();
        save_checkpoint(&b, &model(), None, None).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &model(), None, None).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format(_))));

        let mut extra = bytes;
        extra.push(0);
        std::fs::write(&p, &extra).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format(_))));
    }
}
