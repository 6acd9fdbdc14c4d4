//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes  "MEXN"
//! version    u32      = 1
//! arch       u8       1 = MLP, 2 = CNN
//!   MLP: input_dim u32, width u32, num_classes u32, depth u32,
//!        n_exits u32, exit_positions u32 × n_exits, dropout f64
//!   CNN: in_channels u32, n_widths u32, widths u32 × n_widths,
//!        num_classes u32, image_size u32
//! n_tensors  u32
//! tensor*    ndim u32, dims u32 × ndim, values f64 × product(dims)
//! ```
//!
//! Tensors appear in declaration order: every layer's parameters followed by
//! its buffers (batch-norm running mean and variance), blocks before heads.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::network::{Architecture, CnnConfig, MlpConfig, MultiExitNetwork};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MEXN";
pub const VERSION: u32 = 1;

const ARCH_MLP: u8 = 1;
const ARCH_CNN: u8 = 2;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_architecture(arch: &Architecture, buf: &mut Vec<u8>) -> Result<()> {
    match arch {
        Architecture::Mlp(c) => {
            buf.push(ARCH_MLP);
            for v in [c.input_dim, c.width, c.num_classes, c.depth, c.exit_positions.len()] {
                put_u32(buf, v)?;
            }
            for &p in &c.exit_positions {
                put_u32(buf, p)?;
            }
            buf.extend_from_slice(&c.dropout.to_le_bytes());
        }
        Architecture::Cnn(c) => {
            buf.push(ARCH_CNN);
            put_u32(buf, c.in_channels)?;
            put_u32(buf, c.widths.len())?;
            for &w in &c.widths {
                put_u32(buf, w)?;
            }
            put_u32(buf, c.num_classes)?;
            put_u32(buf, c.image_size)?;
        }
    }
    Ok(())
}

pub fn encode(net: &MultiExitNetwork) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    encode_architecture(net.architecture(), &mut buf)?;
    let tensors = net.state_tensors();
    put_u32(&mut buf, tensors.len())?;
    for t in tensors {
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save(net: &MultiExitNetwork, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(net)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_architecture(r: &mut Reader<'_>) -> Result<Architecture> {
    match r.u8()? {
        ARCH_MLP => {
            let input_dim = r.u32()?;
            let width = r.u32()?;
            let num_classes = r.u32()?;
            let depth = r.u32()?;
            let n_exits = r.u32()?;
            if n_exits > depth.max(1) {
                return Err(Error::Checkpoint("exit count exceeds depth".into()));
            }
            let exit_positions = (0..n_exits).map(|_| r.u32()).collect::<Result<_>>()?;
            let dropout = r.f64()?;
            Ok(Architecture::Mlp(MlpConfig {
                input_dim,
                width,
                num_classes,
                depth,
                exit_positions,
                dropout,
            }))
        }
        ARCH_CNN => {
            let in_channels = r.u32()?;
            let n = r.u32()?;
            if n > 64 {
                return Err(Error::Checkpoint(format!("implausible CNN depth {n}")));
            }
            let widths = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
            let num_classes = r.u32()?;
            let image_size = r.u32()?;
            Ok(Architecture::Cnn(CnnConfig {
                in_channels,
                widths,
                num_classes,
                image_size,
            }))
        }
        other => Err(Error::Checkpoint(format!("unknown architecture tag {other}"))),
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<Architecture> {
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (expected \"MEXN\")".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    read_architecture(r)
}

fn fill(net: &mut MultiExitNetwork, r: &mut Reader<'_>) -> Result<()> {
    let count = r.u32()?;
    let mut tensors = net.state_tensors_mut();
    if count != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, file has {count}",
            tensors.len()
        )));
    }
    for (i, t) in tensors.iter_mut().enumerate() {
        let ndim = r.u32()?;
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if dims != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {i}: expected shape {:?}, file has {dims:?}",
                t.shape()
            )));
        }
        for v in t.data_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != r.bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            r.bytes.len() - r.pos
        )));
    }
    Ok(())
}

/// Rebuilds a network from checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<MultiExitNetwork> {
    let mut r = Reader { bytes, pos: 0 };
    let arch = read_header(&mut r)?;
    let mut net = MultiExitNetwork::build(arch, 0)
        .map_err(|e| Error::Checkpoint(format!("invalid architecture descriptor: {e}")))?;
    fill(&mut net, &mut r)?;
    Ok(net)
}

pub fn load(path: impl AsRef<Path>) -> Result<MultiExitNetwork> {
    decode(&fs::read(path)?)
}

/// Loads weights into an existing network after checking that the stored
/// architecture descriptor matches it exactly.
pub fn load_into(net: &mut MultiExitNetwork, path: impl AsRef<Path>) -> Result<()> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let arch = read_header(&mut r)?;
    if &arch != net.architecture() {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: file has {arch:?}, network is {:?}",
            net.architecture()
        )));
    }
    fill(net, &mut r)
}
