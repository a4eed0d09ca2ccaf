//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"KMUN"
//! u32    format version (currently 1)
//! u32    config length, then that many UTF-8 bytes (key=value lines)
//! u32    tensor count
//! per tensor:
//!   u16  name length, then the UTF-8 name
//!   u8   dtype tag (0 = f32)
//!   u8   rank, then rank x u64 dims
//!   numel x f32 raw values
//! ```
//!
//! Tensors are stored as f32 regardless of the in-memory scalar type.
//! Every load failure — unreadable file, bad magic, wrong version,
//! truncation, malformed fields — is reported as an I/O error so the
//! command-line tool exits with code 3.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"KMUN";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn save<T: Scalar>(path: &Path, config_text: &str, params: &Params<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let werr = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(werr)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(werr)?;
    let cfg = config_text.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(werr)?;
    w.write_all(cfg).map_err(werr)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(werr)?;
    for (name, tensor) in params.iter() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes()).map_err(werr)?;
        w.write_all(nb).map_err(werr)?;
        w.write_all(&[DTYPE_F32, tensor.shape().len() as u8]).map_err(werr)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(werr)?;
        }
        for &v in tensor.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::io(self.path, format!("truncated checkpoint ({e})")))?;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.bytes(n)?)
            .map_err(|_| Error::io(self.path, "checkpoint contains invalid UTF-8"))
    }
}

/// Reads a checkpoint back as its config text plus named f32 tensors, in
/// the order they were saved.
pub fn load(path: &Path) -> Result<(String, Vec<(String, Tensor<f32>)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { inner: BufReader::new(file), path };

    if r.bytes(4)? != MAGIC {
        return Err(Error::io(path, "bad magic, not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::io(path, format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config = r.string(cfg_len)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let [dtype, rank] = r.bytes(2)?.try_into().unwrap();
        if dtype != DTYPE_F32 {
            return Err(Error::io(path, format!("unknown dtype tag {dtype} for tensor {name}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.bytes(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::io(path, format!("tensor {name}: {e}")))?;
        tensors.push((name, tensor));
    }
    Ok((config, tensors))
}

/// Copies loaded tensors into an existing registry by name. The sets must
/// match exactly; a mismatch means the checkpoint does not belong to this
/// model and is reported as an I/O error.
pub fn apply<T: Scalar>(params: &mut Params<T>, loaded: &[(String, Tensor<f32>)]) -> Result<()> {
    if loaded.len() != params.len() {
        return Err(Error::io_msg(format!(
            "checkpoint has {} tensors, model has {} parameters",
            loaded.len(),
            params.len()
        )));
    }
    for (name, tensor) in loaded {
        let id = params
            .ids()
            .find(|&id| params.name(id) == name)
            .ok_or_else(|| Error::io_msg(format!("checkpoint tensor {name} not in model")))?;
        if params.value(id).shape() != tensor.shape() {
            return Err(Error::io_msg(format!(
                "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                tensor.shape(),
                params.value(id).shape()
            )));
        }
        let cast = Tensor::from_fn(tensor.shape().to_vec(), |i| T::c(tensor.data()[i] as f64));
        params.set_value(id, cast)?;
    }
    Ok(())
}
