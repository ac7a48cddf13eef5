//! Self-describing model checkpoints.
//!
//! Layout (all integers u64 little-endian, all values f64 little-endian):
//!   magic "XLSTMCK1"        (8 bytes)
//!   config_len, config      (StackConfig as TOML, UTF-8)
//!   tensor_count
//!   per tensor, in declaration (visit) order:
//!     name_len, name, rank, dims..., values...

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::blocks::{ModelParams, StackConfig};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

const MAGIC: &[u8; 8] = b"XLSTMCK1";

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn save_model(path: &Path, model: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let config = toml::to_string(&model.config)
        .map_err(|e| Error::InvalidConfig(format!("checkpoint config: {e}")))?;
    write_u64(&mut w, config.len() as u64)?;
    w.write_all(config.as_bytes())?;
    write_u64(&mut w, model.param_groups() as u64)?;
    let mut io_err = None;
    model.visit(&mut |name, t| {
        if io_err.is_some() {
            return;
        }
        let res = (|| -> Result<()> {
            write_u64(&mut w, name.len() as u64)?;
            w.write_all(name.as_bytes())?;
            write_u64(&mut w, t.shape().len() as u64)?;
            for &d in t.shape() {
                write_u64(&mut w, d as u64)?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            io_err = Some(e);
        }
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidConfig(format!(
            "not a checkpoint file: bad magic {magic:?}"
        )));
    }
    let config_len = read_u64(&mut r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|e| Error::InvalidConfig(format!("checkpoint config not UTF-8: {e}")))?;
    let config: StackConfig = toml::from_str(&config_text)
        .map_err(|e| Error::InvalidConfig(format!("checkpoint config: {}", e.message())))?;
    // build the skeleton, then overwrite every tensor from the file
    let mut model = ModelParams::init(&config, &mut Rng::new(0))?;
    let count = read_u64(&mut r)? as usize;
    if count != model.param_groups() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has {count} tensors, config implies {}",
            model.param_groups()
        )));
    }
    let mut err = None;
    model.visit_mut(&mut |name, t: &mut Tensor| {
        if err.is_some() {
            return;
        }
        let res = (|| -> Result<()> {
            let name_len = read_u64(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            if name_bytes != name.as_bytes() {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor {} where {name} expected",
                    String::from_utf8_lossy(&name_bytes)
                )));
            }
            let rank = read_u64(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u64(&mut r)? as usize);
            }
            if dims != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor {name}: shape {dims:?} vs expected {:?}",
                    t.shape()
                )));
            }
            let mut buf = [0u8; 8];
            for v in t.data_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            Ok(())
        })();
        if let Err(e) = res {
            err = Some(e);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

impl ModelParams {
    /// Number of named tensors in visit order.
    pub fn param_groups(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> StackConfig {
        StackConfig {
            num_blocks: 2,
            ratio: (1, 1),
            slstm_positions: None,
            embedding_dim: 8,
            vocab_size: 5,
            real_input_dim: None,
            tie_weights: false,
            slstm_conv: true,
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let model = ModelParams::init(&small_config(), &mut Rng::new(77)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        let mut orig = Vec::new();
        model.visit(&mut |n, t| orig.push((n, t.data().to_vec())));
        let mut i = 0;
        loaded.visit(&mut |n, t| {
            assert_eq!(n, orig[i].0);
            assert_eq!(t.data(), &orig[i].1[..], "tensor {n} differs");
            i += 1;
        });
        assert_eq!(i, orig.len());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let model = ModelParams::init(&small_config(), &mut Rng::new(78)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_model(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, b"NOTACKPTxxxx").unwrap();
        assert!(load_model(&bad).is_err());

        let short = dir.path().join("short.bin");
        std::fs::write(&short, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_model(&short).is_err());
    }
}
