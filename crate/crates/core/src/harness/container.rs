//! `L2DF` frame containers.
//!
//! A 22-byte little-endian header (`"L2DF"`, u16 version, u32 width,
//! height, channels, frame_count) followed by every frame as row-major
//! `[height][width][channels]` f32 values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"L2DF";
pub const CONTAINER_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 22;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameContainer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Each `[height, width, channels]`.
    pub frames: Vec<Tensor>,
}

impl FrameContainer {
    pub fn new(width: usize, height: usize, channels: usize, frames: Vec<Tensor>) -> Result<Self> {
        if let Some(f) = frames.iter().find(|f| f.shape() != [height, width, channels]) {
            return dim_err(format!(
                "frame {:?} in a {height}x{width}x{channels} container",
                f.shape()
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            frames,
        })
    }

    /// Build from frames, taking the extents from the first one.
    pub fn from_frames(frames: Vec<Tensor>) -> Result<Self> {
        let (h, w, c) = match frames.first().map(|f| f.shape()) {
            Some(&[h, w, c]) => (h, w, c),
            Some(s) => return dim_err(format!("frames must be [H, W, ch], got {s:?}")),
            None => (0, 0, 0),
        };
        Self::new(w, h, c, frames)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.payload_len());
        buf.extend_from_slice(CONTAINER_MAGIC);
        buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        for v in [self.width, self.height, self.channels, self.frames.len()] {
            let v = u32::try_from(v).map_err(|_| Error::Parameter(format!("extent {v} exceeds u32")))?;
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for f in &self.frames {
            for &v in f.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                msg: format!("header truncated ({} of {HEADER_LEN} bytes)", bytes.len()),
            });
        }
        if &bytes[..4] != CONTAINER_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {:02x?}", &bytes[..4]),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CONTAINER_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let field = |i: usize| {
            let o = 6 + 4 * i;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        };
        let (width, height, channels, count) = (field(0), field(1), field(2), field(3));
        let frame_len = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::Format {
                offset: 6,
                msg: "frame extents overflow".into(),
            })?;
        let expected = frame_len
            .checked_mul(count)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format {
                offset: 18,
                msg: "payload size overflows".into(),
            })?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < expected {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                msg: format!("payload truncated: {} of {expected} bytes", payload.len()),
            });
        }
        if payload.len() > expected {
            return Err(Error::Format {
                offset: (HEADER_LEN + expected) as u64,
                msg: format!("{} trailing bytes", payload.len() - expected),
            });
        }
        let frames = if frame_len == 0 {
            vec![Tensor::zeros(&[height, width, channels]); count]
        } else {
            payload
                .chunks_exact(frame_len * 4)
                .map(|chunk| {
                    let data = chunk
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect();
                    Tensor::new(&[height, width, channels], data)
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            width,
            height,
            channels,
            frames,
        })
    }

    fn payload_len(&self) -> usize {
        self.frames.len() * self.width * self.height * self.channels * 4
    }
}

pub fn write_container(path: &Path, c: &FrameContainer) -> Result<()> {
    let f = std::fs::File::create(path)?;
    c.write_to(std::io::BufWriter::new(f))
}

pub fn read_container(path: &Path) -> Result<FrameContainer> {
    FrameContainer::read_from(std::fs::File::open(path)?)
}
