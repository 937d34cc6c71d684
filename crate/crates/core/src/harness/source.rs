//! Deterministic synthetic frame streams with known motion.

use std::f32::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{param_err, Error, Result};
use crate::tensor::{RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    /// Bright vertical bar moving right by `velocity` pixels per frame,
    /// wrapping around.
    MovingBar,
    /// Diagonal sinusoid whose phase drifts every frame.
    DriftingSine,
    /// One seeded pattern repeated.
    Static,
    /// Gaussian blob whose centre takes a seeded random walk.
    RandomWalk,
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "moving_bar" => SourceKind::MovingBar,
            "drifting_sine" => SourceKind::DriftingSine,
            "static" => SourceKind::Static,
            "random_walk" => SourceKind::RandomWalk,
            other => return Err(Error::Parameter(format!("unknown source kind '{other}'"))),
        })
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::MovingBar => "moving_bar",
            SourceKind::DriftingSine => "drifting_sine",
            SourceKind::Static => "static",
            SourceKind::RandomWalk => "random_walk",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceParams {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frames: usize,
    /// Pixels per frame.
    pub velocity: usize,
}

impl Default for SourceParams {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            channels: 1,
            frames: 64,
            velocity: 1,
        }
    }
}

/// Frames `[height, width, channels]` with values in `[0, 1]`.
pub fn synthetic_source(kind: SourceKind, p: SourceParams, seed: u64) -> Result<Vec<Tensor>> {
    if p.width == 0 || p.height == 0 || p.channels == 0 {
        return param_err(format!(
            "frame extents must be positive ({}x{}x{})",
            p.height, p.width, p.channels
        ));
    }
    let (w, h) = (p.width, p.height);
    let frame = |f: &dyn Fn(usize, usize, usize) -> f32| {
        let mut d = Vec::with_capacity(h * w * p.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..p.channels {
                    d.push(f(y, x, c));
                }
            }
        }
        Tensor::new(&[h, w, p.channels], d).expect("sized")
    };
    let out = match kind {
        SourceKind::MovingBar => {
            if p.velocity == 0 {
                return param_err("moving_bar needs a positive velocity");
            }
            let bar = (w / 8).max(1);
            (0..p.frames)
                .map(|t| {
                    let left = (t * p.velocity) % w;
                    frame(&|_, x, _| if (x + w - left) % w < bar { 1.0 } else { 0.1 })
                })
                .collect()
        }
        SourceKind::DriftingSine => {
            let (kx, ky) = (2.0 * PI / w as f32, 2.0 * PI / h as f32);
            let omega = 2.0 * PI * p.velocity as f32 / w as f32;
            (0..p.frames)
                .map(|t| {
                    frame(&|y, x, c| {
                        let ph = kx * x as f32 + ky * y as f32 - omega * t as f32 + c as f32;
                        0.5 + 0.4 * ph.sin()
                    })
                })
                .collect()
        }
        SourceKind::Static => {
            let mut rng = RngStream::new(seed);
            let blobs: Vec<(f32, f32, f32)> = (0..3)
                .map(|_| {
                    (
                        rng.uniform() as f32 * h as f32,
                        rng.uniform() as f32 * w as f32,
                        0.3 + 0.5 * rng.uniform() as f32,
                    )
                })
                .collect();
            let img = frame(&|y, x, _| {
                let base = 0.2 + 0.3 * x as f32 / w as f32;
                let bump: f32 = blobs
                    .iter()
                    .map(|&(by, bx, a)| a * blob(y, x, by, bx, w.min(h) as f32 / 4.0))
                    .sum();
                (base + bump).min(1.0)
            });
            vec![img; p.frames]
        }
        SourceKind::RandomWalk => {
            let mut rng = RngStream::new(seed);
            let (mut cy, mut cx) = (h as f32 / 2.0, w as f32 / 2.0);
            let step = p.velocity.max(1) as f32;
            (0..p.frames)
                .map(|_| {
                    let img = frame(&|y, x, _| 0.1 + 0.8 * blob(y, x, cy, cx, w.min(h) as f32 / 5.0));
                    cy = (cy + step * rng.normal()).clamp(0.0, h as f32 - 1.0);
                    cx = (cx + step * rng.normal()).clamp(0.0, w as f32 - 1.0);
                    img
                })
                .collect()
        }
    };
    Ok(out)
}

fn blob(y: usize, x: usize, cy: f32, cx: f32, radius: f32) -> f32 {
    let (dy, dx) = (y as f32 - cy, x as f32 - cx);
    (-(dy * dy + dx * dx) / (2.0 * radius * radius)).exp()
}
