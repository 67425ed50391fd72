//! Binary network checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "CTRW" | version u32 | layer count u32 | layers... | crc32 u32
//! layer := 0u8 rows u32 cols u32 weights[rows*cols] f64 biases[rows] f64
//!        | 1u8
//! ```
//!
//! The CRC covers every byte before it.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CTRW";
pub const VERSION: u32 = 1;

const TAG_AFFINE: u8 = 0;
const TAG_RELU: u8 = 1;

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        match layer {
            Layer::Affine { weight, bias } => {
                let (rows, cols) = weight.dims2().expect("affine weight is a matrix");
                out.push(TAG_AFFINE);
                out.extend_from_slice(&(rows as u32).to_le_bytes());
                out.extend_from_slice(&(cols as u32).to_le_bytes());
                for v in weight.data().iter().chain(bias.data()) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Layer::Relu => out.push(TAG_RELU),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 16 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::Format(format!(
            "checkpoint CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { buf: payload, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::new();
    for _ in 0..count {
        match r.u8()? {
            TAG_AFFINE => {
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                let w = r.f64s(rows * cols)?;
                let b = r.f64s(rows)?;
                layers.push(Layer::affine(Tensor::matrix(rows, cols, w)?, Tensor::vector(b))?);
            }
            TAG_RELU => layers.push(Layer::Relu),
            tag => return Err(Error::Format(format!("unknown layer tag {tag}"))),
        }
    }
    if r.pos != payload.len() {
        return Err(Error::Format("trailing bytes after last layer".into()));
    }
    Network::new(layers)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network> {
    from_bytes(&fs::read(path)?)
}
