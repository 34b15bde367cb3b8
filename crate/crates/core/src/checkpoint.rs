//! Binary formats: a named-tensor archive and the training checkpoint.
//!
//! All integers and floats are little-endian. A tensor archive is
//!
//! ```text
//! b"ADSW" u32:version u32:count { u32:name_len name u64[4]:shape f64[len]:data }*
//! ```
//!
//! A checkpoint is `b"ADSC" u32:version`, the config text, the parameter,
//! first-moment and second-moment archives, the optimizer step, the
//! iteration counter and the sampler RNG state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const ARCHIVE_MAGIC: &[u8; 4] = b"ADSW";
const CHECKPOINT_MAGIC: &[u8; 4] = b"ADSC";
pub const FORMAT_VERSION: u32 = 1;

/// Position of the data-order RNG: its seed and how many 32-bit words of the
/// stream have been consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub params: ParamStore,
    pub optimizer: AdamState,
    pub iteration: u64,
    pub rng: RngState,
}

fn corrupt(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{what}: {e}"))
}

fn write_store(w: &mut impl Write, store: &ParamStore) -> std::io::Result<()> {
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    for (name, t) in store.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        for d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| corrupt(what, e))?;
    if &buf != magic {
        return Err(Error::Checkpoint(format!("{what}: bad magic {buf:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| corrupt(what, e))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{what}: format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

fn read_store(r: &mut impl Read) -> Result<ParamStore> {
    read_magic(r, ARCHIVE_MAGIC, "tensor archive")?;
    let io = |e| corrupt("tensor archive", e);
    let count = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut store = ParamStore::default();
    for _ in 0..count {
        let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if n > 4096 {
            return Err(Error::Checkpoint(format!("tensor name of {n} bytes")));
        }
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| corrupt("tensor name", e))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&l| l <= 1 << 31)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has absurd shape {shape:?}")))?;
        let mut data = vec![0.0; len];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
        store.insert(name, Tensor::from_vec(shape, data)?);
    }
    Ok(store)
}

pub fn write_tensor_archive(path: &Path, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_store(&mut w, store)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_archive(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    read_store(&mut r)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(self.format_version)?;
        let text = self.config.dump();
        w.write_u64::<LittleEndian>(text.len() as u64)?;
        w.write_all(text.as_bytes())?;
        write_store(&mut w, &self.params)?;
        write_store(&mut w, &self.optimizer.m)?;
        write_store(&mut w, &self.optimizer.v)?;
        w.write_u64::<LittleEndian>(self.optimizer.step)?;
        w.write_u64::<LittleEndian>(self.iteration)?;
        w.write_u64::<LittleEndian>(self.rng.seed)?;
        w.write_u128::<LittleEndian>(self.rng.word_pos)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        read_magic(&mut r, CHECKPOINT_MAGIC, "checkpoint")?;
        let io = |e| corrupt("checkpoint", e);
        let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        if n > 1 << 20 {
            return Err(Error::Checkpoint(format!("config section of {n} bytes")));
        }
        let mut text = vec![0u8; n];
        r.read_exact(&mut text).map_err(io)?;
        let text = String::from_utf8(text).map_err(|e| corrupt("config text", e))?;
        let config = RunConfig::parse(&text).map_err(|e| corrupt("embedded config", e))?;
        let params = read_store(&mut r)?;
        let m = read_store(&mut r)?;
        let v = read_store(&mut r)?;
        let step = r.read_u64::<LittleEndian>().map_err(io)?;
        let iteration = r.read_u64::<LittleEndian>().map_err(io)?;
        let seed = r.read_u64::<LittleEndian>().map_err(io)?;
        let word_pos = r.read_u128::<LittleEndian>().map_err(io)?;
        Ok(Self {
            format_version: FORMAT_VERSION,
            config,
            params,
            optimizer: AdamState { step, m, v },
            iteration,
            rng: RngState { seed, word_pos },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::default();
        s.insert("a.weight", Tensor::from_fn([2, 3, 3, 3], |n, c, y, x| (n * 31 + c * 7 + y * 3 + x) as f64 * 0.1 - 1.0));
        s.insert("a.bias", Tensor::from_vec([1, 2, 1, 1], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        s
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        write_tensor_archive(&path, &store()).unwrap();
        let back = read_tensor_archive(&path).unwrap();
        for ((ka, a), (kb, b)) in store().iter().zip(back.iter()) {
            assert_eq!(ka, kb);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let ck = Checkpoint {
            format_version: FORMAT_VERSION,
            config: RunConfig::default(),
            params: store(),
            optimizer: AdamState {
                step: 7,
                m: store(),
                v: ParamStore::default(),
            },
            iteration: 42,
            rng: RngState {
                seed: 9,
                word_pos: (1u128 << 70) + 3,
            },
        };
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        write_tensor_archive(&path, &store()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_tensor_archive(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        write_tensor_archive(&path, &store()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_tensor_archive(&path), Err(Error::Checkpoint(_))));
    }
}
