//! Flat little-endian checkpoint:
//!
//! ```text
//! magic  "NGIFCKPT"         8 bytes
//! version                   u32
//! network count             u32
//! per network:
//!   name length, name       u32, utf-8 bytes
//!   activation              u8 (0 identity, 1 softplus), f32 beta
//!   head                    u8 (0 linear, 1 simplex, 2 unit vector)
//!   layer count             u32
//!   per layer:
//!     out, in               u32, u32
//!     weights               out·in f32, row-major
//!     bias                  out f32
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::mlp::{Activation, Head, Layer, Mlp};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NGIFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type NamedNet<T> = (String, Mlp<T>);

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut Vec<u8>, v: f32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint<T: Real>(nets: &[(&str, &Mlp<T>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, nets.len() as u32);
    for (name, mlp) in nets {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        match mlp.activation() {
            Activation::Identity => {
                buf.push(0);
                put_f32(&mut buf, 0.0);
            }
            Activation::Softplus { beta } => {
                buf.push(1);
                put_f32(&mut buf, beta as f32);
            }
        }
        buf.push(match mlp.head() {
            Head::Linear => 0,
            Head::Simplex => 1,
            Head::UnitVector => 2,
        });
        put_u32(&mut buf, mlp.layers().len() as u32);
        for l in mlp.layers() {
            put_u32(&mut buf, l.output_dim() as u32);
            put_u32(&mut buf, l.input_dim() as u32);
            for v in l.weight.iter().chain(l.bias.iter()) {
                put_f32(&mut buf, v.as_f32());
            }
        }
    }
    buf
}

pub fn write_checkpoint<T: Real>(path: &Path, nets: &[(&str, &Mlp<T>)]) -> Result<()> {
    let bytes = encode_checkpoint(nets);
    let tmp = path.with_extension("ckpt.tmp");
    fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&bytes).and_then(|_| f.sync_all()))
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    path: &'a Path,
}

impl Reader<'_> {
    fn bad(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.cur.position() as usize,
            reason: reason.into(),
        }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.cur
            .read_exact(&mut b)
            .map_err(|_| self.bad("truncated checkpoint"))?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8], path: &Path) -> Result<Vec<NamedNet<T>>> {
    let mut r = Reader {
        cur: Cursor::new(bytes),
        path,
    };
    if &r.bytes::<8>()? != CHECKPOINT_MAGIC {
        return Err(r.bad("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.bad(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut nets = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        if len > 1024 {
            return Err(r.bad("network name too long"));
        }
        let mut name = vec![0u8; len];
        r.cur.read_exact(&mut name).map_err(|_| r.bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| r.bad("name is not utf-8"))?;
        let act_code = r.u8()?;
        let beta = r.f32()?;
        let activation = match act_code {
            0 => Activation::Identity,
            1 => Activation::Softplus { beta: beta as f64 },
            c => return Err(r.bad(format!("unknown activation code {c}"))),
        };
        let head = match r.u8()? {
            0 => Head::Linear,
            1 => Head::Simplex,
            2 => Head::UnitVector,
            c => return Err(r.bad(format!("unknown head code {c}"))),
        };
        let nlayers = r.u32()?;
        let mut layers = Vec::with_capacity(nlayers as usize);
        for _ in 0..nlayers {
            let out = r.u32()? as usize;
            let inp = r.u32()? as usize;
            let remaining = bytes.len() - r.cur.position() as usize;
            if out.saturating_mul(inp + 1).saturating_mul(4) > remaining {
                return Err(r.bad("layer larger than file"));
            }
            let mut w = Vec::with_capacity(out * inp);
            for _ in 0..out * inp {
                w.push(T::lit(r.f32()? as f64));
            }
            let mut b = Vec::with_capacity(out);
            for _ in 0..out {
                b.push(T::lit(r.f32()? as f64));
            }
            layers.push(Layer {
                weight: Array2::from_shape_vec((out, inp), w).expect("sized"),
                bias: Array1::from(b),
            });
        }
        nets.push((name, Mlp::from_layers(layers, activation, head)?));
    }
    if (r.cur.position() as usize) != bytes.len() {
        return Err(r.bad("trailing bytes"));
    }
    Ok(nets)
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Vec<NamedNet<T>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
