//! Versioned training checkpoints.
//!
//! Layout (integers little-endian):
//!
//! | field | encoding |
//! |-------|----------|
//! | magic | `ISCK` |
//! | version | `u32`, currently 1 |
//! | metadata | `u32` length + JSON (architecture, precision, counters, optimizer settings) |
//! | convolutions | one `ISGW` factor container per layer, `f64` payload |
//! | batch norms | per layer: gamma, beta, running mean, running var |
//! | classifier | `u32` rows, `u32` cols, weights, then bias |
//! | optimizer | `u32` tensor count, every first moment, every second moment |
//!
//! Every float array is a `u32` length followed by `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{read_container, write_container, QuantConfig};
use crate::tensor::DenseMatrix;

use super::layers::BatchNorm;
use super::model::{ArchSpec, ConvNet};
use super::radam::RAdam;
use super::trainer::TrainState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ISCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    arch: ArchSpec,
    quant: Option<QuantConfig>,
    act_bits: Option<u32>,
    epoch: usize,
    seed: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    bn_momentum: Vec<f64>,
    bn_eps: Vec<f64>,
}

fn eof(e: std::io::Error, what: &'static str) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Eof { what }
    } else {
        Error::Io(e)
    }
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(|e| eof(e, what))
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidDims(format!("length {n} does not fit in u32")))
}

fn write_array(w: &mut impl Write, v: &[f64]) -> Result<()> {
    w.write_u32::<LittleEndian>(len_u32(v.len())?)?;
    for &x in v {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read, what: &'static str, expected: Option<usize>) -> Result<Vec<f64>> {
    let n = read_u32(r, what)? as usize;
    if let Some(e) = expected {
        if n != e {
            return Err(Error::Truncated {
                what,
                expected: e,
                found: n,
            });
        }
    }
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out).map_err(|e| eof(e, what))?;
    Ok(out)
}

/// Serializes the full training state.
pub fn save_checkpoint(state: &TrainState, w: &mut impl Write) -> Result<()> {
    let m = &state.model;
    let meta = Meta {
        arch: m.arch.clone(),
        quant: m.quant,
        act_bits: m.act_bits,
        epoch: state.epoch,
        seed: state.seed,
        beta1: state.opt.beta1,
        beta2: state.opt.beta2,
        eps: state.opt.eps,
        weight_decay: state.opt.weight_decay,
        t: state.opt.t,
        bn_momentum: m.bns.iter().map(|b| b.momentum).collect(),
        bn_eps: m.bns.iter().map(|b| b.eps).collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(len_u32(json.len())?)?;
    w.write_all(&json)?;
    let quant = m.quant.unwrap_or_default();
    for p in &m.convs {
        write_container(w, p, &quant, false)?;
    }
    for bn in &m.bns {
        for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
            write_array(w, v)?;
        }
    }
    w.write_u32::<LittleEndian>(len_u32(m.fc_w.rows())?)?;
    w.write_u32::<LittleEndian>(len_u32(m.fc_w.cols())?)?;
    write_array(w, m.fc_w.data())?;
    write_array(w, &m.fc_b)?;
    w.write_u32::<LittleEndian>(len_u32(state.opt.m.len())?)?;
    for v in state.opt.m.iter().chain(&state.opt.v) {
        write_array(w, v)?;
    }
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(r: &mut impl Read) -> Result<TrainState> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| eof(e, "checkpoint magic"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            found: u32::from_be_bytes(magic),
            expected: u32::from_be_bytes(CHECKPOINT_MAGIC),
        });
    }
    let version = read_u32(r, "checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(version));
    }
    let len = read_u32(r, "checkpoint metadata length")? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| eof(e, "checkpoint metadata"))?;
    let meta: Meta = serde_json::from_slice(&json)?;
    meta.arch.validate()?;
    let dims = meta.arch.kernel_dims();
    if meta.bn_momentum.len() != dims.len() || meta.bn_eps.len() != dims.len() {
        return Err(Error::InvalidDims("checkpoint batch-norm metadata does not match the layers".into()));
    }

    let mut convs = Vec::with_capacity(dims.len());
    for d in &dims {
        let (p, _) = read_container(r)?;
        if p.dims != *d {
            return Err(Error::InvalidDims(format!("checkpoint layer {:?} where {:?} expected", p.dims, d)));
        }
        convs.push(p);
    }
    let mut bns = Vec::with_capacity(dims.len());
    for (i, d) in dims.iter().enumerate() {
        let c = Some(d.c_out);
        bns.push(BatchNorm {
            gamma: read_array(r, "batch-norm gamma", c)?,
            beta: read_array(r, "batch-norm beta", c)?,
            running_mean: read_array(r, "batch-norm mean", c)?,
            running_var: read_array(r, "batch-norm variance", c)?,
            momentum: meta.bn_momentum[i],
            eps: meta.bn_eps[i],
        });
    }
    let rows = read_u32(r, "classifier rows")? as usize;
    let cols = read_u32(r, "classifier cols")? as usize;
    if rows != meta.arch.classes || cols != meta.arch.feature_len() {
        return Err(Error::InvalidDims(format!("classifier {rows}x{cols} does not match the architecture")));
    }
    let fc_w = DenseMatrix::new(rows, cols, read_array(r, "classifier weights", Some(rows * cols))?)?;
    let fc_b = read_array(r, "classifier bias", Some(rows))?;
    let model = ConvNet {
        arch: meta.arch,
        convs,
        bns,
        fc_w,
        fc_b,
        quant: meta.quant,
        act_bits: meta.act_bits,
    };

    let tensors = read_u32(r, "optimizer tensor count")? as usize;
    let sizes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    if tensors != 0 && tensors != sizes.len() {
        return Err(Error::InvalidDims(format!(
            "checkpoint has {tensors} moment tensors for {} parameter tensors",
            sizes.len()
        )));
    }
    let mut m = Vec::with_capacity(tensors);
    let mut v = Vec::with_capacity(tensors);
    for i in 0..2 * tensors {
        let a = read_array(r, "optimizer moment", Some(sizes[i % tensors]))?;
        if i < tensors {
            m.push(a);
        } else {
            v.push(a);
        }
    }
    let opt = RAdam {
        beta1: meta.beta1,
        beta2: meta.beta2,
        eps: meta.eps,
        weight_decay: meta.weight_decay,
        t: meta.t,
        m,
        v,
    };
    Ok(TrainState {
        model,
        opt,
        epoch: meta.epoch,
        seed: meta.seed,
    })
}

pub fn write_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_checkpoint(state, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<TrainState> {
    load_checkpoint(&mut BufReader::new(File::open(path)?))
}
