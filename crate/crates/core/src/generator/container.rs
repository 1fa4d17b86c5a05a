//! Binary factor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `ISGW` |
//! | 4     | version (`u32`, currently 1) |
//! | 4     | flags (`u32`): bit 0 intra active, bit 1 cross active, bit 2 packed |
//! | 20    | `C_o`, `C_i`, `k`, `B_i`, `B_c` (`u32` each) |
//! | 4     | `q_b`, `q_u`, `q_v`, `q_w` (`u8` each) |
//!
//! The payload follows in declaration order: every `W_i^b`, every `U_i`,
//! then `V`, each row-major. Unpacked payloads are `f64`. A packed payload
//! stores each of the three groups (bases, coefficients, `V`; empty groups
//! are omitted) as an `f64` scale followed by offset-binary codes `j + L`,
//! `bits` wide, LSB-first, padded to a whole byte at the end of the group.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Cardinality, GeneratorParams, KernelDims, QuantConfig};
use crate::error::{Error, Result};
use crate::quant;
use crate::tensor::DenseMatrix;

pub const CONTAINER_MAGIC: [u8; 4] = *b"ISGW";
pub const CONTAINER_VERSION: u32 = 1;

const FLAG_INTRA: u32 = 1;
const FLAG_CROSS: u32 = 2;
const FLAG_PACKED: u32 = 4;

fn to_u32(v: usize, what: &'static str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidDims(format!("{what} = {v} does not fit in u32")))
}

fn to_u8(v: u32, what: &'static str) -> Result<u8> {
    u8::try_from(v).map_err(|_| Error::Config {
        field: what.into(),
        reason: format!("bitwidth {v} does not fit in u8"),
    })
}

/// Writes `p` with bitwidths `quant`. `packed` stores quantized integer codes
/// instead of `f64` values; it requires factor bitwidths in `[1, 16]`.
pub fn write_container<W: Write>(w: &mut W, p: &GeneratorParams, quant: &QuantConfig, packed: bool) -> Result<()> {
    p.validate()?;
    quant.validate()?;
    if packed {
        quant.check_quantizable()?;
    }
    let mut flags = 0;
    if p.card.intra {
        flags |= FLAG_INTRA;
    }
    if p.card.cross {
        flags |= FLAG_CROSS;
    }
    if packed {
        flags |= FLAG_PACKED;
    }
    w.write_all(&CONTAINER_MAGIC)?;
    w.write_u32::<LittleEndian>(CONTAINER_VERSION)?;
    w.write_u32::<LittleEndian>(flags)?;
    for (v, what) in [
        (p.dims.c_out, "C_o"),
        (p.dims.c_in, "C_i"),
        (p.dims.k, "k"),
        (p.card.bi, "B_i"),
        (p.card.bc, "B_c"),
    ] {
        w.write_u32::<LittleEndian>(to_u32(v, what)?)?;
    }
    for (v, what) in [(quant.qb, "q_b"), (quant.qu, "q_u"), (quant.qv, "q_v"), (quant.qw, "q_w")] {
        w.write_u8(to_u8(v, what)?)?;
    }

    if packed {
        if !p.basis.is_empty() {
            write_packed(w, &p.basis, quant.qb)?;
        }
        write_packed(w, &p.coeff, quant.qu)?;
        if let Some(v) = &p.cross {
            write_packed(w, std::slice::from_ref(v), quant.qv)?;
        }
    } else {
        for m in p.factors() {
            for &x in m.data() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
    }
    Ok(())
}

fn write_packed<W: Write>(w: &mut W, group: &[DenseMatrix], bits: u32) -> Result<()> {
    let (q, scale) = quant::fake_quantize_group(group, bits)?;
    w.write_f64::<LittleEndian>(scale)?;
    let l = quant::half_levels(bits);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for m in &q {
        for &v in m.data() {
            let j = if l == 0 { 0 } else { (v / scale * l as f64).round() as i64 };
            acc |= ((j + l) as u64) << filled;
            filled += bits;
            while filled >= 8 {
                w.write_u8(acc as u8)?;
                acc >>= 8;
                filled -= 8;
            }
        }
    }
    if filled > 0 {
        w.write_u8(acc as u8)?;
    }
    Ok(())
}

struct PackedReader<'a, R> {
    r: &'a mut R,
    bits: u32,
    acc: u64,
    avail: u32,
}

impl<R: Read> PackedReader<'_, R> {
    fn next_code(&mut self) -> Result<u64> {
        while self.avail < self.bits {
            self.acc |= (read_u8(self.r, "packed codes")? as u64) << self.avail;
            self.avail += 8;
        }
        let code = self.acc & ((1u64 << self.bits) - 1);
        self.acc >>= self.bits;
        self.avail -= self.bits;
        Ok(code)
    }
}

fn map_eof<T>(r: std::io::Result<T>, what: &'static str) -> Result<T> {
    r.map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Eof { what }
        } else {
            Error::Io(e)
        }
    })
}

fn read_u8<R: Read>(r: &mut R, what: &'static str) -> Result<u8> {
    map_eof(r.read_u8(), what)
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    map_eof(r.read_u32::<LittleEndian>(), what)
}

fn read_f64<R: Read>(r: &mut R, what: &'static str) -> Result<f64> {
    map_eof(r.read_f64::<LittleEndian>(), what)
}

fn read_group<R: Read>(r: &mut R, shapes: &[(usize, usize)], packed: Option<u32>) -> Result<Vec<DenseMatrix>> {
    let mut out = Vec::with_capacity(shapes.len());
    match packed {
        None => {
            for &(rows, cols) in shapes {
                let data = (0..rows * cols)
                    .map(|_| read_f64(r, "factor payload"))
                    .collect::<Result<Vec<_>>>()?;
                out.push(DenseMatrix::new(rows, cols, data)?);
            }
        }
        Some(bits) => {
            let scale = read_f64(r, "group scale")?;
            let l = quant::half_levels(bits);
            let mut pr = PackedReader { r, bits, acc: 0, avail: 0 };
            for &(rows, cols) in shapes {
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows * cols {
                    let j = pr.next_code()? as i64 - l;
                    if j.abs() > l {
                        return Err(Error::Config {
                            field: "packed code".into(),
                            reason: format!("level {j} outside [-{l}, {l}]"),
                        });
                    }
                    data.push(if l == 0 { 0.0 } else { j as f64 / l as f64 * scale });
                }
                out.push(DenseMatrix::new(rows, cols, data)?);
            }
        }
    }
    Ok(out)
}

/// Reads a container written by [`write_container`]. Packed payloads come
/// back dequantized.
pub fn read_container<R: Read>(r: &mut R) -> Result<(GeneratorParams, QuantConfig)> {
    let mut magic = [0u8; 4];
    map_eof(r.read_exact(&mut magic), "container magic")?;
    if magic != CONTAINER_MAGIC {
        return Err(Error::BadMagic {
            what: "factor container",
            found: u32::from_be_bytes(magic),
            expected: u32::from_be_bytes(CONTAINER_MAGIC),
        });
    }
    let version = read_u32(r, "container version")?;
    if version != CONTAINER_VERSION {
        return Err(Error::Version(version));
    }
    let flags = read_u32(r, "container flags")?;
    let mut h = [0usize; 5];
    for v in h.iter_mut() {
        *v = read_u32(r, "container header")? as usize;
    }
    let mut q = [0u32; 4];
    for v in q.iter_mut() {
        *v = read_u8(r, "container bitwidths")? as u32;
    }
    let quant = QuantConfig::new(q[0], q[1], q[2], q[3])?;
    let dims = KernelDims::new(h[0], h[1], h[2]);
    let card = Cardinality {
        bi: h[3],
        bc: h[4],
        intra: flags & FLAG_INTRA != 0,
        cross: flags & FLAG_CROSS != 0,
    };
    if card.bi == 0 || card.bc == 0 || dims.c_out == 0 || dims.c_in == 0 || dims.k == 0 {
        return Err(Error::InvalidDims(format!("container header {dims:?} {card:?}")));
    }
    let packed = flags & FLAG_PACKED != 0;
    if packed {
        quant.check_quantizable()?;
    }
    let slices = card.slices(&dims);
    let basis = if card.intra {
        read_group(r, &vec![(card.bi, dims.k2()); slices], packed.then_some(quant.qb))?
    } else {
        Vec::new()
    };
    let coeff_shape = if card.intra {
        (dims.c_in, card.bi)
    } else {
        (dims.c_in, dims.k2())
    };
    let coeff = read_group(r, &vec![coeff_shape; slices], packed.then_some(quant.qu))?;
    let cross = if card.cross {
        read_group(r, &[(dims.c_out, card.bc)], packed.then_some(quant.qv))?.pop()
    } else {
        None
    };
    Ok((GeneratorParams::new(dims, card, basis, coeff, cross)?, quant))
}
