// Binary checkpoint layout (all integers little-endian):
//
//   "PTDR" | u32 version=1 | u8 head_mode | u32 len + config JSON (UTF-8)
//   | u32 tensor_count | per tensor: u16 len + name (UTF-8), u8 dtype
//   (0 = f32, 1 = f64), u8 rank, u32 dims[rank], row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{HeadMode, UnetConfig, UnetModel};
use crate::error::{bail, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"PTDR";
const VERSION: u32 = 1;

fn scalar_bytes<S: Scalar>(v: S, out: &mut Vec<u8>) {
    match S::DTYPE {
        0 => out.extend_from_slice(&(v.to_f() as f32).to_le_bytes()),
        _ => out.extend_from_slice(&v.to_f().to_le_bytes()),
    }
}

pub fn write_checkpoint<S: Scalar>(model: &UnetModel<S>, mut out: impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(model.head().to_u8());
    let json = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        let name = name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(S::DTYPE);
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            scalar_bytes(v, &mut buf);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!(Format, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<S: Scalar>(mut input: impl Read) -> Result<UnetModel<S>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        bail!(Format, "not a checkpoint (bad magic)");
    }
    let version = c.u32()?;
    if version != VERSION {
        bail!(Format, "unsupported checkpoint version {version}");
    }
    let head = HeadMode::from_u8(c.u8()?)?;
    let json_len = c.u32()? as usize;
    let config: UnetConfig = serde_json::from_slice(c.take(json_len)?)?;

    // Structure comes from the config; the payload then overwrites every tensor.
    let mut model = UnetModel::<S>::new(config, &mut rng::seeded(0))?;
    model.set_head(head);
    let count = c.u32()? as usize;
    if count != model.params().len() {
        bail!(Format, "checkpoint has {count} tensors, config implies {}", model.params().len());
    }
    for i in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|e| crate::Error::Format(format!("tensor name: {e}")))?
            .to_string();
        if name != model.params().names()[i] {
            bail!(Format, "tensor {i} is {name:?}, expected {:?}", model.params().names()[i]);
        }
        let dtype = c.u8()?;
        if dtype != S::DTYPE {
            bail!(Format, "tensor {name} has dtype {dtype}, loader expects {}", S::DTYPE);
        }
        let rank = c.u8()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let expected = model.params().tensors()[i].shape().to_vec();
        if dims != expected {
            bail!(Format, "tensor {name} has shape {dims:?}, expected {expected:?}");
        }
        let numel: usize = dims.iter().product();
        let width = if dtype == 0 { 4 } else { 8 };
        let raw = c.take(numel * width)?;
        let data: Vec<S> = raw
            .chunks_exact(width)
            .map(|b| {
                if width == 4 {
                    S::from_f(f32::from_le_bytes(b.try_into().unwrap()) as f64)
                } else {
                    S::from_f(f64::from_le_bytes(b.try_into().unwrap()))
                }
            })
            .collect();
        model.params_mut().tensors_mut()[i] = Tensor::from_vec(&dims, data)?;
    }
    if c.pos != buf.len() {
        bail!(Format, "{} trailing bytes after checkpoint", buf.len() - c.pos);
    }
    Ok(model)
}

pub fn save_checkpoint<S: Scalar>(model: &UnetModel<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<UnetModel<S>> {
    let file = File::open(path).map_err(|e| crate::Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(file))
}
