//! The full codec model and its checkpoint format.
//!
//! Parameter names are prefixed by component: `enc.` (transform encoder),
//! `dec.` (transform decoder and pixel generator), `rcm.` (compression
//! model) and `aux.` (stage-1 alignment head).
//!
//! Checkpoint layout, little-endian:
//!
//! ```text
//! "MRTC" | version u8 | config length u32 | config text (key=value lines)
//! | parameter count u32 | per parameter: name length u16, name bytes,
//! rank u8, dims u32 * rank, values f64 * product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Binding, ParamBuilder, ParamStore};
use crate::rcm::Rcm;
use crate::tensor::Tensor;
use crate::transform::{MrtDecoder, MrtEncoder, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRTC";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Prefixes of parameters that stay fixed while fine-tuning the decoder.
pub const FROZEN_IN_STAGE2: [&str; 2] = ["enc.", "aux."];

#[derive(Clone, Debug)]
pub struct MrtModel {
    pub cfg: ModelConfig,
    pub encoder: MrtEncoder,
    pub decoder: MrtDecoder,
    pub rcm: Rcm,
    /// Per decoder token logits over the alignment codebook, one group per
    /// covered target block.
    pub aux: Linear,
}

impl MrtModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(seed);
        let model = Self {
            cfg: cfg.clone(),
            encoder: MrtEncoder::new(&mut b, "enc", cfg)?,
            decoder: MrtDecoder::new(&mut b, "dec", cfg)?,
            rcm: Rcm::new(&mut b, "rcm", cfg),
            aux: Linear::new(&mut b, "aux.head", cfg.dim, cfg.codes_per_token() * cfg.target_codebook),
        };
        Ok((model, b.finish()))
    }

    /// Builds the model for a checkpoint and loads its values.
    pub fn from_checkpoint(path: &Path) -> Result<(Self, ParamStore)> {
        let (cfg, saved) = load_checkpoint(path)?;
        let (model, mut store) = Self::new(&cfg, 0)?;
        store.load_from(&saved)?;
        Ok((model, store))
    }

    /// Aux logits `[(tokens * codes_per_token) x codebook]`, rows ordered
    /// like the raster target grid.
    pub fn aux_logits<'t>(&self, bind: &Binding<'t, '_>, features: &Var<'t>, grid_rows: usize, grid_cols: usize) -> Result<Var<'t>> {
        let k = self.cfg.target_codebook;
        let r = self.cfg.patch_size / self.cfg.target_block;
        let raw = self.aux.forward(bind, features)?;
        let (rows, cols) = (grid_rows * r, grid_cols * r);
        let mut idx = Vec::with_capacity(rows * cols * k);
        for ty in 0..rows {
            for tx in 0..cols {
                let token = (ty / r) * grid_cols + tx / r;
                let sub = (ty % r) * r + tx % r;
                let base = token * r * r * k + sub * k;
                idx.extend(base..base + k);
            }
        }
        raw.gather(std::rc::Rc::new(idx), &[rows * cols, k])
    }
}

pub fn write_checkpoint(mut out: impl Write, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&[CHECKPOINT_VERSION])?;
    let text = cfg.to_kv();
    out.write_all(&(text.len() as u32).to_le_bytes())?;
    out.write_all(text.as_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("name too long: {name}")))?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| Error::Corrupt("truncated checkpoint".into()))?;
    Ok(b)
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(ModelConfig, ParamStore)> {
    if &read_exact::<4>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint".into()));
    }
    let [version] = read_exact::<1>(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(version));
    }
    let text_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut text = vec![0u8; text_len];
    r.read_exact(&mut text).map_err(|_| Error::Corrupt("truncated checkpoint".into()))?;
    let text = String::from_utf8(text).map_err(|_| Error::Corrupt("checkpoint config is not UTF-8".into()))?;
    let cfg = ModelConfig::from_kv(&text)?;
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| Error::Corrupt("truncated checkpoint".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?;
        let [rank] = read_exact::<1>(&mut r)?;
        let shape: Vec<usize> =
            (0..rank).map(|_| read_exact::<4>(&mut r).map(|b| u32::from_le_bytes(b) as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_exact(&mut r)?));
        }
        if store.id(&name).is_some() {
            return Err(Error::Corrupt(format!("duplicate parameter {name}")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Corrupt("trailing bytes after checkpoint".into()));
    }
    Ok((cfg, store))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    write_checkpoint(std::io::BufWriter::new(std::fs::File::create(path)?), cfg, store)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::Trainable;

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = ModelConfig::tiny();
        let (_, store) = MrtModel::new(&cfg, 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &store).unwrap();
        let (cfg2, store2) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(store2.len(), store.len());
        for (id, name, t) in store.iter() {
            assert_eq!(store2.get(store2.id(name).unwrap()), t, "{name} {id:?}");
        }
        for cut in [0, 3, 5, 9, buf.len() / 2, buf.len() - 1] {
            assert!(read_checkpoint(&buf[..cut]).is_err());
        }
        let mut bad = buf.clone();
        bad[4] = 7;
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Version(7))));
    }

    #[test]
    fn aux_logits_follow_target_raster() {
        let cfg = ModelConfig::tiny();
        let (model, store) = MrtModel::new(&cfg, 1).unwrap();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, Trainable::Nothing);
        let f = tape.constant(Tensor::rand_uniform(&[512, cfg.dim], -1.0, 1.0, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2)));
        let logits = model.aux_logits(&bind, &f, 16, 32).unwrap();
        assert_eq!(logits.shape(), vec![32 * 64, 64]);
        let raw = model.aux.forward(&bind, &f).unwrap().value();
        // Target (3, 5) sits in token (1, 2), sub-block (1, 1).
        let token = 32 + 2;
        let sub = 3;
        assert_eq!(logits.value().row(3 * 64 + 5), &raw.row(token)[sub * 64..(sub + 1) * 64]);
    }
}
