//! Binary weight files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "L2DW"  u32 version
//! u32 × 11 config (channels, heads, temporal_layers, latent_channels,
//!          grid_height, grid_width, cond_channels, adapter_hidden,
//!          n_styles, n_train_steps, max_window)
//! f32 temporal_mix
//! u32 n_tensors, then per tensor: u32 ndim, u32 × ndim dims
//! f32 payload of every tensor in table order
//! ```
//!
//! The sinusoidal table is not stored; it is rebuilt from the config.

use std::io::{Read, Write};
use std::path::Path;

use crate::denoiser::{DenoiserConfig, ToyDenoiser};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"L2DW";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn write_weights<W: Write>(model: &ToyDenoiser, mut out: W) -> Result<()> {
    let c = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    for v in config_fields(c) {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.temporal_mix.to_le_bytes());
    let params = model.parameters();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in &params {
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for t in &params {
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_weights<R: Read>(mut input: R) -> Result<ToyDenoiser> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut r = Cursor { bytes: &bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != WEIGHTS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:02x?}"),
        });
    }
    let at = r.pos;
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format {
            offset: at as u64,
            msg: format!("unsupported version {version}"),
        });
    }
    let mut f = [0usize; 11];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let config = DenoiserConfig {
        channels: f[0],
        heads: f[1],
        temporal_layers: f[2],
        latent_channels: f[3],
        grid_height: f[4],
        grid_width: f[5],
        cond_channels: f[6],
        adapter_hidden: f[7],
        n_styles: f[8],
        n_train_steps: f[9],
        max_window: f[10],
        temporal_mix: f32::from_bits(r.u32()?),
    };
    let at = r.pos;
    let n = r.u32()? as usize;
    if n > 4096 {
        return Err(Error::Format {
            offset: at as u64,
            msg: format!("implausible tensor count {n}"),
        });
    }
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!("implausible rank {ndim}"),
            });
        }
        let dims = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        shapes.push(dims);
    }
    let mut params = Vec::with_capacity(n);
    for shape in shapes {
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.push(Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    ToyDenoiser::from_parts(config, params)
}

pub fn save_weights(model: &ToyDenoiser, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_weights(model, std::io::BufWriter::new(file))
}

pub fn load_weights(path: &Path) -> Result<ToyDenoiser> {
    read_weights(std::fs::File::open(path)?)
}

fn config_fields(c: &DenoiserConfig) -> [usize; 11] {
    [
        c.channels,
        c.heads,
        c.temporal_layers,
        c.latent_channels,
        c.grid_height,
        c.grid_width,
        c.cond_channels,
        c.adapter_hidden,
        c.n_styles,
        c.n_train_steps,
        c.max_window,
    ]
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                msg: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
