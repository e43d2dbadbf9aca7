//! Versioned binary checkpoint format.
//!
//! Layout (little-endian):
//! - magic `b"SCANREG\0"` (8 bytes)
//! - format version `u32`
//! - config length `u32`, then the JSON-encoded [`NetConfig`]
//! - tensor count `u32`, then per tensor: rows `u32`, cols `u32`,
//!   row-major `f32` data
//!
//! Weights are stored as 32-bit floats regardless of the in-memory scalar;
//! an f32 round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{NetConfig, NetParams};
use crate::scalar::Real;

const MAGIC: &[u8; 8] = b"SCANREG\0";
const VERSION: u32 = 1;

pub fn save<T: Real>(params: &NetParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_params(params, &mut w).map_err(|e| Error::io(path, e))
}

fn write_params<T: Real>(params: &NetParams<T>, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&params.config).expect("config serializes");
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    let tensors = params.param_tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for &v in t.data() {
            w.write_all(&v.as_f32().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<NetParams<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic string".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_len = read_u32(&mut r, "config length")? as usize;
    let mut config_buf = vec![0u8; config_len];
    read_exact(&mut r, &mut config_buf, "config")?;
    let config: NetConfig = serde_json::from_slice(&config_buf)
        .map_err(|e| Error::Checkpoint(format!("config echo does not parse: {e}")))?;

    // shapes come from the config; the stored tensors must match
    let mut params = NetParams::<T>::init(&config, 0)?;
    let count = read_u32(&mut r, "tensor count")? as usize;
    if count != params.tensor_count() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, config implies {}",
            params.tensor_count()
        )));
    }
    for tensor in params.param_tensors_mut() {
        let rows = read_u32(&mut r, "tensor rows")? as usize;
        let cols = read_u32(&mut r, "tensor cols")? as usize;
        if (rows, cols) != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor shape {rows}x{cols} does not match config shape {:?}",
                tensor.shape()
            )));
        }
        let mut buf = vec![0u8; rows * cols * 4];
        read_exact(&mut r, &mut buf, "tensor data")?;
        for (i, v) in tensor.data_mut().iter_mut().enumerate() {
            let bits = [buf[4 * i], buf[4 * i + 1], buf[4 * i + 2], buf[4 * i + 3]];
            let value = f32::from_le_bytes(bits);
            if !value.is_finite() {
                return Err(Error::Checkpoint("non-finite weight".into()));
            }
            *v = T::cast(value as f64);
        }
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => Ok(params),
        Ok(_) => Err(Error::Checkpoint("trailing bytes after tensors".into())),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated checkpoint while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}
