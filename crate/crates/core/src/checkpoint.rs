//! Binary checkpoints and feature matrices.
//!
//! Checkpoint layout (little-endian): `MGRC`, u32 version, u64 epoch,
//! u64 length + config TOML, u64 entry count, then per entry: u64 length +
//! name, u8 trainable flag, u64 rank, u64 dims, f64 values.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MGRC";
const VERSION: u32 = 1;
const FEATURE_MAGIC: &[u8; 4] = b"MGRF";

/// `<path>.manifest`, the human-readable sidecar of a checkpoint.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, config: &Config, model: &Model<T>, epoch: usize) -> Result<()> {
    let toml = config.to_toml_string();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u64(&mut buf, epoch as u64);
    put_bytes(&mut buf, toml.as_bytes());
    let entries = model.store.entries();
    put_u64(&mut buf, entries.len() as u64);
    let mut sidecar = format!("epoch = {epoch}\n\n[config]\n{toml}\n[parameters]\n");
    for e in entries {
        put_bytes(&mut buf, e.name.as_bytes());
        buf.push(e.trainable as u8);
        put_u64(&mut buf, e.value.shape().len() as u64);
        for &d in e.value.shape() {
            put_u64(&mut buf, d as u64);
        }
        for v in e.value.data() {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        let kind = if e.trainable { "param" } else { "buffer" };
        sidecar.push_str(&format!("{} {kind} {:?}\n", e.name, e.value.shape()));
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    let side = manifest_path(path);
    std::fs::write(&side, sidecar).map_err(|e| Error::io(&side, e))
}

/// Restores the config, model and epoch. Any mismatch between the stored
/// entries and the model rebuilt from the stored config is an error.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Config, Model<T>, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(take::<4>(&mut r).ok_or_else(|| bad("truncated header"))?);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let epoch = get_u64(&mut r).ok_or_else(|| bad("truncated header"))? as usize;
    let toml = get_bytes(&mut r).ok_or_else(|| bad("truncated config"))?;
    let toml = String::from_utf8(toml).map_err(|_| bad("config is not UTF-8"))?;
    let config = Config::from_toml_str(&toml)?;
    let mut model = Model::<T>::new(config.backbone.clone(), config.head.clone(), config.train.seed)?;

    let count = get_u64(&mut r).ok_or_else(|| bad("truncated entry count"))? as usize;
    if count != model.store.len() {
        return Err(bad(&format!("{count} entries stored, model has {}", model.store.len())));
    }
    for entry in model.store.entries_mut() {
        let name = get_bytes(&mut r).ok_or_else(|| bad("truncated entry"))?;
        let name = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8"))?;
        if name != entry.name {
            return Err(bad(&format!("expected `{}`, found `{name}`", entry.name)));
        }
        let trainable = take::<1>(&mut r).ok_or_else(|| bad("truncated entry"))?[0] != 0;
        if trainable != entry.trainable {
            return Err(bad(&format!("`{name}` trainable flag differs")));
        }
        let rank = get_u64(&mut r).ok_or_else(|| bad("truncated entry"))? as usize;
        let shape = (0..rank)
            .map(|_| get_u64(&mut r).map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated shape"))?;
        if shape != entry.value.shape() {
            return Err(bad(&format!(
                "`{name}` has shape {shape:?}, model expects {:?}",
                entry.value.shape()
            )));
        }
        for v in entry.value.data_mut() {
            let x = f64::from_le_bytes(take::<8>(&mut r).ok_or_else(|| bad("truncated values"))?);
            *v = T::of(x);
        }
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok((config, model, epoch))
}

/// `MGRF`, u64 rows, u64 cols, f32 values.
pub fn write_features<T: Scalar>(path: &Path, features: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 4 * features.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    put_u64(&mut buf, features.rows() as u64);
    put_u64(&mut buf, features.cols() as u64);
    for v in features.data() {
        buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Input(format!("{}: malformed feature file", path.display()));
    let mut r = bytes.as_slice();
    if take::<4>(&mut r).as_ref() != Some(FEATURE_MAGIC) {
        return Err(bad());
    }
    let rows = get_u64(&mut r).ok_or_else(bad)? as usize;
    let cols = get_u64(&mut r).ok_or_else(bad)? as usize;
    if r.len() != rows * cols * 4 {
        return Err(bad());
    }
    let data = r
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(&[rows, cols], data))
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    put_u64(buf, b.len() as u64);
    buf.extend_from_slice(b);
}

fn take<const N: usize>(r: &mut &[u8]) -> Option<[u8; N]> {
    if r.len() < N {
        return None;
    }
    let (head, tail) = r.split_at(N);
    *r = tail;
    head.try_into().ok()
}

fn get_u64(r: &mut &[u8]) -> Option<u64> {
    take::<8>(r).map(u64::from_le_bytes)
}

fn get_bytes(r: &mut &[u8]) -> Option<Vec<u8>> {
    let n = get_u64(r)? as usize;
    if r.len() < n {
        return None;
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Some(head.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut cfg = Config::toy(2);
        cfg.train.seed = 3;
        let mut model = Model::<f64>::new(cfg.backbone.clone(), cfg.head.clone(), 11).unwrap();
        model.store.entries_mut()[0].value.data_mut()[0] = 0.125;
        save_checkpoint(&path, &cfg, &model, 4).unwrap();
        let (c2, m2, epoch) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(epoch, 4);
        assert_eq!(c2, cfg);
        for (a, b) in model.store.entries().iter().zip(m2.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let side = std::fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(side.contains("stem.conv.weight param"));
    }

    #[test]
    fn mismatched_or_corrupt_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = Config::toy(2);
        let model = Model::<f64>::new(cfg.backbone.clone(), cfg.head.clone(), 0).unwrap();
        save_checkpoint(&path, &cfg, &model, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
        std::fs::write(&path, b"nope").unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let t = Tensor::from_rows(&[vec![0.5f32, -1.0], vec![2.0, 0.25]]);
        write_features(&path, &t).unwrap();
        assert_eq!(read_features(&path).unwrap(), t);
    }
}
