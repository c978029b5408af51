//! Checkpoint format: a flat archive of named parameter arrays.
//!
//! Byte layout (all integers little-endian u64 unless noted):
//!
//! ```text
//! magic "PPLAINV1" (8 bytes)
//! rng_seed
//! config_len | config bytes (UTF-8, the run-config text form)
//! param_count
//! repeated, sorted by name:
//!   name_len | name bytes
//!   trainable (1 byte)
//!   ndim | dim_0 .. dim_{ndim-1}
//!   value bytes (f64 little-endian, row-major)
//! ```
//!
//! The layout is deterministic: identical stores and configs produce
//! identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tensor};

const MAGIC: &[u8; 8] = b"PPLAINV1";

pub fn save_checkpoint(store: &ParameterStore, config_text: &str, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        w.write_all(MAGIC)?;
        w.write_all(&store.rng_seed.to_le_bytes())?;
        w.write_all(&(config_text.len() as u64).to_le_bytes())?;
        w.write_all(config_text.as_bytes())?;
        w.write_all(&(store.len() as u64).to_le_bytes())?;
        for (name, tensor) in store.iter() {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[tensor.requires_grad as u8])?;
            w.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterStore, String)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(bad("bad magic (not a checkpoint file)"));
    }
    let rng_seed = read_u64(&mut r, path)?;
    let config_len = read_u64(&mut r, path)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    read_exact(&mut r, &mut config_bytes, path)?;
    let config_text =
        String::from_utf8(config_bytes).map_err(|_| bad("config block is not UTF-8"))?;

    let count = read_u64(&mut r, path)? as usize;
    let mut store = ParameterStore::new(rng_seed);
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let name_len = read_u64(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, path)?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("parameter name not UTF-8"))?;
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(bad("parameter names out of order"));
            }
        }
        let mut flag = [0u8; 1];
        read_exact(&mut r, &mut flag, path)?;
        let ndim = read_u64(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf, path)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)?.requires_grad(flag[0] != 0);
        store.insert(&name, tensor)?;
        prev_name = Some(name);
    }
    Ok((store, config_text))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("pointplain-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample_store(seed: u64) -> ParameterStore {
        let mut rng = Rng::new(seed);
        let mut store = ParameterStore::new(seed);
        for (name, shape) in [
            ("b.w", vec![3, 2]),
            ("a.bias", vec![4]),
            ("c.t", vec![2, 2, 2]),
        ] {
            let numel = shape.iter().product();
            let data = (0..numel).map(|_| rng.range(-1.0, 1.0)).collect();
            let t = Tensor::new(shape, data)
                .unwrap()
                .requires_grad(name != "c.t");
            store.insert(name, t).unwrap();
        }
        store
    }

    #[test]
    fn round_trip_preserves_everything() {
        let store = sample_store(3);
        let p = tmp("rt.ckpt");
        save_checkpoint(&store, "[train]\nseed = 3\n", &p).unwrap();
        let (back, cfg) = load_checkpoint(&p).unwrap();
        assert_eq!(cfg, "[train]\nseed = 3\n");
        assert_eq!(back.rng_seed, 3);
        assert_eq!(back.len(), store.len());
        for (name, t) in store.iter() {
            let b = back.get(name).unwrap();
            assert_eq!(t.shape(), b.shape());
            assert_eq!(t.data(), b.data());
            assert_eq!(t.requires_grad, b.requires_grad);
        }
    }

    #[test]
    fn identical_stores_produce_identical_bytes() {
        let p1 = tmp("det1.ckpt");
        let p2 = tmp("det2.ckpt");
        save_checkpoint(&sample_store(7), "cfg", &p1).unwrap();
        save_checkpoint(&sample_store(7), "cfg", &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_garbage() {
        let p = tmp("garbage.ckpt");
        std::fs::write(&p, b"definitely not a checkpoint").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
