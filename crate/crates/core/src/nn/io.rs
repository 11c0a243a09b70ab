//! Flat binary weight format.
//!
//! ```text
//! magic    4 bytes  "DNET"
//! version  u32 LE   1
//! layers   u32 LE
//! per layer:
//!   rows        u64 LE   (outputs)
//!   cols        u64 LE   (inputs)
//!   activation  u8       0 linear, 1 relu, 2 sigmoid, 3 softmax
//!   weights     rows·cols f64 LE, row-major
//!   biases      rows f64 LE
//! ```
//! Several networks may be written back to back into one stream.

use std::io::{Read, Write};

use super::dense::{Activation, DenseNet, Layer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DNET";
pub const VERSION: u32 = 1;

pub fn write_net(net: &DenseNet, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(net.layers().len() as u32).to_le_bytes())?;
    for layer in net.layers() {
        w.write_all(&(layer.output_dim() as u64).to_le_bytes())?;
        w.write_all(&(layer.input_dim() as u64).to_le_bytes())?;
        w.write_all(&[layer.activation().tag()])?;
        for v in layer.weights().iter().chain(layer.bias()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_net(r: &mut impl Read) -> Result<DenseNet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::contract(format!("bad weight magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::contract(format!("unsupported weight version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let act = Activation::from_tag(tag[0])
            .ok_or_else(|| Error::contract(format!("unknown activation tag {}", tag[0])))?;
        let weights = read_f64s(r, rows * cols)?;
        let bias = read_f64s(r, rows)?;
        layers.push(Layer::new(rows, cols, weights, bias, act)?);
    }
    DenseNet::new(layers)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
