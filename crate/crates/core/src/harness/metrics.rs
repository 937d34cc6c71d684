//! Output-quality proxies and X-T slice export.

use std::io::Write;
use std::path::Path;

use crate::denoiser::structure_map;
use crate::error::{dim_err, param_err, Result};
use crate::pipeline::{mean_std, OpCounters};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub flicker: f64,
    pub structure_mse: f64,
    pub latency_mean_s: f64,
    pub latency_std_s: f64,
}

/// Mean over consecutive frame pairs of the mean absolute difference.
pub fn flicker(frames: &[Tensor]) -> f64 {
    if frames.len() < 2 {
        return 0.0;
    }
    let total: f64 = frames
        .windows(2)
        .map(|p| {
            let n = p[0].len().max(1) as f64;
            p[0].data()
                .iter()
                .zip(p[1].data())
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .sum::<f64>()
                / n
        })
        .sum();
    total / (frames.len() - 1) as f64
}

/// Mean squared difference of full-resolution structure maps.
pub fn structure_mse(outputs: &[Tensor], inputs: &[Tensor]) -> Result<f64> {
    if outputs.len() != inputs.len() {
        return param_err(format!("{} outputs for {} inputs", outputs.len(), inputs.len()));
    }
    if outputs.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (o, i) in outputs.iter().zip(inputs) {
        if o.shape() != i.shape() {
            return dim_err(format!("output {:?} vs input {:?}", o.shape(), i.shape()));
        }
        let &[h, w, _] = o.shape() else {
            return dim_err(format!("frames must be [H, W, ch], got {:?}", o.shape()));
        };
        let (a, b) = (structure_map(o, h, w)?, structure_map(i, h, w)?);
        acc += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>();
        n += a.len();
    }
    Ok(acc / n as f64)
}

pub fn metrics(outputs: &[Tensor], inputs: &[Tensor], counters: &OpCounters) -> Result<MetricsReport> {
    let structure_mse = structure_mse(outputs, inputs)?;
    let (latency_mean_s, latency_std_s) = mean_std(&counters.frame_latency);
    Ok(MetricsReport {
        flicker: flicker(outputs),
        structure_mse,
        latency_mean_s,
        latency_std_s,
    })
}

/// Grayscale image whose column `t` is row `row` of frame `t`
/// (channel-averaged), min-max normalised to `0..=255`. A constant slice
/// maps to zero.
pub fn xt_slice(frames: &[Tensor], row: usize) -> Result<(usize, usize, Vec<u8>)> {
    let Some(first) = frames.first() else {
        return param_err("no frames to slice");
    };
    let &[h, w, ch] = first.shape() else {
        return dim_err(format!("frames must be [H, W, ch], got {:?}", first.shape()));
    };
    if row >= h {
        return param_err(format!("row {row} out of range for height {h}"));
    }
    let cols = frames.len();
    let mut vals = vec![0.0f32; w * cols];
    for (t, f) in frames.iter().enumerate() {
        if f.shape() != first.shape() {
            return dim_err(format!("frame {t} is {:?}, expected {:?}", f.shape(), first.shape()));
        }
        for x in 0..w {
            let px = &f.data()[(row * w + x) * ch..(row * w + x + 1) * ch];
            vals[x * cols + t] = px.iter().sum::<f32>() / ch as f32;
        }
    }
    let (lo, hi) = vals.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = hi - lo;
    let pixels = vals
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok((cols, w, pixels))
}

/// Write the X-T slice as a binary PGM (`P5`).
pub fn export_xt_slice(frames: &[Tensor], row: usize, path: &Path) -> Result<()> {
    let (width, height, pixels) = xt_slice(frames, row)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(&pixels)?;
    f.flush()?;
    Ok(())
}
