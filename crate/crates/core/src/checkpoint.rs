//! Binary network checkpoints.
//!
//! Layout (little-endian):
//! - magic `b"BGRD"`
//! - version: u32
//! - config length: u32, followed by the [`NetConfig`] as UTF-8 JSON
//! - every parameter tensor in [`Params::tensor_names`] order as
//!   rank: u32, dims: u64 * rank, then row-major f64 values
//!
//! Training checkpoints append an optimizer section: tag `b"OPTM"`, the
//! momentum buffers in the same tensor encoding, lr, momentum and weight decay
//! as f64, a u32 count of learning-rate multipliers followed by the f64
//! multipliers, and the completed-epoch counter as u64.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{NetConfig, OptimizerState, Params};

pub const MAGIC: &[u8; 4] = b"BGRD";
pub const VERSION: u32 = 1;
const OPT_TAG: &[u8; 4] = b"OPTM";

fn write_tensor<W: Write>(w: &mut W, dims: &[usize], values: &[f64]) -> Result<()> {
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of checkpoint".into())
    } else {
        Error::Io(e)
    }
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f64>)> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u64(r)? as usize);
    }
    let len: usize = dims.iter().product();
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        values.push(read_f64(r)?);
    }
    Ok((dims, values))
}

fn write_params<W: Write>(w: &mut W, params: &Params) -> Result<()> {
    for (dims, values) in params.tensor_shapes().iter().zip(params.tensors()) {
        write_tensor(w, dims, values)?;
    }
    Ok(())
}

/// Reads tensors into a zeroed container shaped by `config`, naming the first mismatch.
fn read_params<R: Read>(r: &mut R, config: &NetConfig) -> Result<Params> {
    let mut params = Params::zeros(config);
    let names = params.tensor_names();
    let shapes = params.tensor_shapes();
    for (i, slot) in params.tensors_mut().into_iter().enumerate() {
        let (dims, values) = read_tensor(r)?;
        if dims != shapes[i] {
            return Err(Error::Shape(format!(
                "tensor {} has shape {dims:?}, expected {:?}",
                names[i], shapes[i]
            )));
        }
        slot.copy_from_slice(&values);
    }
    Ok(params)
}

fn write_header<W: Write>(w: &mut W, config: &NetConfig) -> Result<()> {
    let text = serde_json::to_string(config).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<NetConfig> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(r)? as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text).map_err(truncated)?;
    let text = String::from_utf8(text).map_err(|e| Error::Format(e.to_string()))?;
    let config: NetConfig = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn write_network<W: Write>(w: &mut W, config: &NetConfig, params: &Params) -> Result<()> {
    write_header(w, config)?;
    write_params(w, params)
}

pub fn read_network<R: Read>(r: &mut R) -> Result<(NetConfig, Params)> {
    let config = read_header(r)?;
    let params = read_params(r, &config)?;
    Ok((config, params))
}

/// Reads a network and checks it against the caller's expected architecture.
pub fn read_network_into<R: Read>(r: &mut R, expected: &NetConfig) -> Result<Params> {
    let (_, params) = read_network(r)?;
    let reference = Params::zeros(expected);
    let names = reference.tensor_names();
    let want = reference.tensor_shapes();
    let got = params.tensor_shapes();
    for (i, name) in names.iter().enumerate() {
        match got.get(i) {
            Some(dims) if *dims == want[i] => {}
            Some(dims) => {
                return Err(Error::Shape(format!(
                    "tensor {name} has shape {dims:?}, expected {:?}",
                    want[i]
                )))
            }
            None => return Err(Error::Shape(format!("tensor {name} missing from checkpoint"))),
        }
    }
    if got.len() != want.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} tensors, expected {}",
            got.len(),
            want.len()
        )));
    }
    Ok(params)
}

pub fn save_network(path: &Path, config: &NetConfig, params: &Params) -> Result<()> {
    let mut buf = Vec::new();
    write_network(&mut buf, config, params)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<(NetConfig, Params)> {
    let bytes = fs::read(path)?;
    read_network(&mut bytes.as_slice())
}

/// Full training state: network, optimizer and completed-epoch count.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingCheckpoint {
    pub config: NetConfig,
    pub params: Params,
    pub optimizer: OptimizerState,
    pub epoch: u64,
}

impl TrainingCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_network(&mut buf, &self.config, &self.params)?;
        buf.write_all(OPT_TAG)?;
        write_params(&mut buf, &self.optimizer.velocity)?;
        for v in [self.optimizer.lr, self.optimizer.momentum, self.optimizer.weight_decay] {
            buf.write_all(&v.to_le_bytes())?;
        }
        buf.write_all(&(self.optimizer.lr_multipliers.len() as u32).to_le_bytes())?;
        for v in &self.optimizer.lr_multipliers {
            buf.write_all(&v.to_le_bytes())?;
        }
        buf.write_all(&self.epoch.to_le_bytes())?;
        Ok(buf)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let (config, params) = read_network(r)?;
        let mut tag = [0u8; 4];
        r.read_exact(&mut tag).map_err(truncated)?;
        if &tag != OPT_TAG {
            return Err(Error::Format("missing optimizer section".into()));
        }
        let velocity = read_params(r, &config)?;
        let lr = read_f64(r)?;
        let momentum = read_f64(r)?;
        let weight_decay = read_f64(r)?;
        let n = read_u32(r)? as usize;
        if n != params.layers.len() + 1 {
            return Err(Error::Format(format!("{n} learning-rate multipliers")));
        }
        let lr_multipliers = (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        let epoch = read_u64(r)?;
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            config,
            params,
            optimizer: OptimizerState { velocity, lr, momentum, weight_decay, lr_multipliers },
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
