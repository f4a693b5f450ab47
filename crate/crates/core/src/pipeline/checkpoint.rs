//! Single-file checkpoint container.
//!
//! Layout (little-endian): `NDCK`, u32 version, u32 + UTF-8 config TOML,
//! u64 epoch, u64 seed, u64 optimizer step, u32 parameter count followed by
//! named tensors, u32 moment count followed by `(name, m, v)` triples, and a
//! trailing SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::path::Path;

use candle_core::{DType, Tensor};
use sha2::{Digest, Sha256};

use super::adam::Adam;
use super::model::ModelState;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::CPU;
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"NDCK";
pub const FORMAT_VERSION: u32 = 1;

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_str(buf, name);
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => buf.push(0),
        DType::F64 => buf.push(1),
        other => return Err(Error::Format(format!("unsupported dtype {other:?} for {name}"))),
    }
    buf.extend((t.rank() as u32).to_le_bytes());
    for d in t.dims() {
        buf.extend((*d as u64).to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| buf.extend(v.to_le_bytes())),
        _ => flat.to_vec1::<f64>()?.iter().for_each(|v| buf.extend(v.to_le_bytes())),
    }
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend((s.len() as u32).to_le_bytes());
    buf.extend(s.as_bytes());
}

pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend(MAGIC);
    buf.extend(FORMAT_VERSION.to_le_bytes());
    put_str(&mut buf, &state.config.to_toml_string()?);
    buf.extend((state.epoch as u64).to_le_bytes());
    buf.extend(state.seed.to_le_bytes());
    buf.extend(state.optimizer.step.to_le_bytes());
    buf.extend((state.params.len() as u32).to_le_bytes());
    for (name, var) in state.params.iter() {
        put_tensor(&mut buf, name, var.as_tensor())?;
    }
    buf.extend((state.optimizer.moments.len() as u32).to_le_bytes());
    for (name, (m, v)) in &state.optimizer.moments {
        put_tensor(&mut buf, name, m)?;
        put_tensor(&mut buf, name, v)?;
    }
    let digest = Sha256::digest(&buf);
    buf.extend(digest);
    Ok(buf)
}

/// Writes via a temporary sibling file and a rename, so an interrupted save
/// never leaves a partial checkpoint under `path`.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::io(
                self.path,
                std::io::Error::new(ErrorKind::UnexpectedEof, "checkpoint is truncated"),
            ));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let dtype = self.u8()?;
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let t = match dtype {
            0 => {
                let raw = self.take(n * 4)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Tensor::from_vec(v, dims, &CPU)?
            }
            1 => {
                let raw = self.take(n * 8)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Tensor::from_vec(v, dims, &CPU)?
            }
            other => return Err(Error::Format(format!("unknown dtype tag {other} for {name}"))),
        };
        Ok((name, t))
    }
}

pub fn decode_checkpoint(data: &[u8], path: &Path) -> Result<ModelState> {
    let mut r = Reader { data, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Compatibility(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let config = RunConfig::from_toml_str(&r.string()?)?;
    let epoch = r.u64()? as usize;
    let seed = r.u64()?;
    let step = r.u64()?;
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let (name, t) = r.tensor()?;
        params.insert(name, &t)?;
    }
    let mut moments = BTreeMap::new();
    for _ in 0..r.u32()? {
        let (name, m) = r.tensor()?;
        let (_, v) = r.tensor()?;
        moments.insert(name, (m, v));
    }
    let body = r.pos;
    let digest = r.take(32)?;
    if r.pos != data.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    if Sha256::digest(&data[..body]).as_slice() != digest {
        return Err(Error::Format(format!("{} failed its checksum", path.display())));
    }
    let mut optimizer = Adam::new(&config.train);
    optimizer.step = step;
    optimizer.moments = moments;
    Ok(ModelState {
        config,
        params,
        optimizer,
        epoch,
        seed,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&data, path)
}

/// Loads and verifies that the stored architecture matches `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &RunConfig) -> Result<ModelState> {
    let state = load_checkpoint(path)?;
    if state.config.architecture_fingerprint()? != expected.architecture_fingerprint()? {
        return Err(Error::Compatibility(format!(
            "{} was trained with a different model configuration",
            path.display()
        )));
    }
    Ok(state)
}
