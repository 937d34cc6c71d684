//! Temporal self-attention across the frame axis.
//!
//! Features are laid out `[S, F, C]`: `S` independent spatial positions, each
//! a sequence of `F` frames with `C` channels. Sinusoidal positional encoding
//! is added ahead of the Q/K/V projections; because the projections are
//! bias-free this is done by adding precomputed projected tables, which is
//! what lets the cache store position-free keys and values.

use crate::error::{dim_err, param_err, Result};
use crate::mask::AttentionMask;
use crate::tensor::{dot, gaussian, linear_nobias, matvec, softmax_row, RngStream, Tensor};

/// Bias-free projection weights of one attention layer, each `[C, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_out: Tensor,
    heads: usize,
}

impl AttentionWeights {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_out: Tensor, heads: usize) -> Result<Self> {
        let c = w_q.shape().first().copied().unwrap_or(0);
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_out", &w_out)] {
            if w.shape() != [c, c] {
                return dim_err(format!("{name} must be [{c}, {c}], got {:?}", w.shape()));
            }
        }
        if c == 0 || heads == 0 || c % heads != 0 {
            return param_err(format!("head count {heads} must divide channels {c}"));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_out,
            heads,
        })
    }

    /// Gaussian init with standard deviation `gain / sqrt(C)`.
    pub fn random(rng: &mut RngStream, channels: usize, heads: usize, gain: f32) -> Result<Self> {
        let s = gain / (channels as f32).sqrt();
        let mut draw = || gaussian(rng, &[channels, channels]).scale(s);
        let (q, k, v, o) = (draw(), draw(), draw(), draw());
        Self::new(q, k, v, o, heads)
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }
}

/// Sinusoidal table `[L_max, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    table: Tensor,
}

impl PositionalEncoding {
    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn max_len(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.table.shape()[1]
    }

    /// A table of zeros, useful for isolating position-free behaviour.
    pub fn zeros(max_len: usize, channels: usize) -> Self {
        Self {
            table: Tensor::zeros(&[max_len, channels]),
        }
    }
}

pub fn make_positional_encoding(max_len: usize, channels: usize) -> Result<PositionalEncoding> {
    if channels == 0 || !channels.is_multiple_of(2) {
        return param_err(format!("positional encoding needs even channels, got {channels}"));
    }
    let mut data = vec![0.0f32; max_len * channels];
    for p in 0..max_len {
        for i in 0..channels / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / channels as f64);
            let angle = p as f64 / freq;
            data[p * channels + 2 * i] = angle.sin() as f32;
            data[p * channels + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Ok(PositionalEncoding {
        table: Tensor::new(&[max_len, channels], data)?,
    })
}

/// Positional table pushed through each projection, `[L_max, C]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct PeProjections {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl PeProjections {
    pub fn max_len(&self) -> usize {
        self.q.shape()[0]
    }

    pub(crate) fn row(table: &Tensor, index: usize) -> &[f32] {
        let c = table.shape()[1];
        &table.data()[index * c..(index + 1) * c]
    }
}

pub fn precompute_pe_projections(w: &AttentionWeights, pe: &PositionalEncoding) -> Result<PeProjections> {
    if pe.channels() != w.channels() {
        return dim_err(format!(
            "positional encoding has {} channels, weights have {}",
            pe.channels(),
            w.channels()
        ));
    }
    Ok(PeProjections {
        q: linear_nobias(&w.w_q, pe.table())?,
        k: linear_nobias(&w.w_k, pe.table())?,
        v: linear_nobias(&w.w_v, pe.table())?,
    })
}

/// Scaled dot-product attention for one spatial position.
///
/// `q` is `[nq, C]`, `k`/`v` are `[nk, C]`, all with positional terms already
/// added. `allowed(i)` gives the key flags for query `i`. Writes the merged
/// head outputs (before the output projection) into `out`, `[nq, C]`.
pub(crate) fn sdpa<'m>(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    channels: usize,
    heads: usize,
    allowed: impl Fn(usize) -> &'m [bool],
    out: &mut [f32],
) -> Result<()> {
    let nq = q.len() / channels;
    let nk = k.len() / channels;
    let d = channels / heads;
    let scale = 1.0 / (d as f32).sqrt();
    let mut scores = vec![0.0f32; nk];
    out.fill(0.0);
    for i in 0..nq {
        let flags = allowed(i);
        for h in 0..heads {
            let qi = &q[i * channels + h * d..i * channels + (h + 1) * d];
            for j in 0..nk {
                scores[j] = if flags[j] {
                    dot(qi, &k[j * channels + h * d..j * channels + (h + 1) * d]) * scale
                } else {
                    0.0
                };
            }
            softmax_row(&mut scores, flags)?;
            let oi = &mut out[i * channels + h * d..i * channels + (h + 1) * d];
            for j in 0..nk {
                if !flags[j] {
                    continue;
                }
                let p = scores[j];
                for (o, &vv) in oi.iter_mut().zip(&v[j * channels + h * d..j * channels + (h + 1) * d]) {
                    *o += p * vv;
                }
            }
        }
    }
    Ok(())
}

fn check_feat(
    feat: &Tensor,
    w: &AttentionWeights,
    mask: &AttentionMask,
    pe: &PeProjections,
) -> Result<(usize, usize, usize)> {
    let &[s, f, c] = feat.shape() else {
        return dim_err(format!("features must be [S, F, C], got {:?}", feat.shape()));
    };
    if c != w.channels() {
        return dim_err(format!("features have {c} channels, weights {}", w.channels()));
    }
    if mask.rows() != f || mask.cols() != f {
        return dim_err(format!("mask {}x{} for {f} frames", mask.rows(), mask.cols()));
    }
    if f > pe.max_len() {
        return param_err(format!("{f} frames exceed positional table length {}", pe.max_len()));
    }
    Ok((s, f, c))
}

/// Projected Q/K/V for one position with positional rows `0..F` added.
fn project_with_pe(
    x: &[f32],
    w: &AttentionWeights,
    pe: &PeProjections,
    f: usize,
    c: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut q = vec![0.0f32; f * c];
    let mut k = vec![0.0f32; f * c];
    let mut v = vec![0.0f32; f * c];
    for t in 0..f {
        let xt = &x[t * c..(t + 1) * c];
        let r = t * c..(t + 1) * c;
        matvec(w.w_q.data(), c, xt, &mut q[r.clone()]);
        matvec(w.w_k.data(), c, xt, &mut k[r.clone()]);
        matvec(w.w_v.data(), c, xt, &mut v[r.clone()]);
        for (dst, table) in [(&mut q, &pe.q), (&mut k, &pe.k), (&mut v, &pe.v)] {
            for (a, &b) in dst[r.clone()].iter_mut().zip(PeProjections::row(table, t)) {
                *a += b;
            }
        }
    }
    (q, k, v)
}

/// Masked temporal attention over all `F` frames at once (training layout,
/// positional indices `0..F`).
pub fn attend_full(feat: &Tensor, w: &AttentionWeights, mask: &AttentionMask, pe: &PeProjections) -> Result<Tensor> {
    let (s, f, c) = check_feat(feat, w, mask, pe)?;
    let mut out = vec![0.0f32; s * f * c];
    let mut merged = vec![0.0f32; f * c];
    for pos in 0..s {
        let x = &feat.data()[pos * f * c..(pos + 1) * f * c];
        let (q, k, v) = project_with_pe(x, w, pe, f, c);
        sdpa(&q, &k, &v, c, w.heads(), |i| mask.row(i), &mut merged)?;
        let o = &mut out[pos * f * c..(pos + 1) * f * c];
        for t in 0..f {
            matvec(
                w.w_out.data(),
                c,
                &merged[t * c..(t + 1) * c],
                &mut o[t * c..(t + 1) * c],
            );
        }
    }
    Tensor::new(&[s, f, c], out)
}

/// Gradient of `<upstream, attend_full(feat)>` with respect to `feat`.
pub fn attend_backward(
    feat: &Tensor,
    w: &AttentionWeights,
    mask: &AttentionMask,
    pe: &PeProjections,
    upstream: &Tensor,
) -> Result<Tensor> {
    let (s, f, c) = check_feat(feat, w, mask, pe)?;
    if upstream.shape() != feat.shape() {
        return dim_err(format!(
            "upstream gradient {:?} does not match features {:?}",
            upstream.shape(),
            feat.shape()
        ));
    }
    let heads = w.heads();
    let d = c / heads;
    let scale = 1.0 / (d as f32).sqrt();
    let mut grad = vec![0.0f32; s * f * c];
    let mut probs = vec![0.0f32; f];
    let mut dp = vec![0.0f32; f];

    for pos in 0..s {
        let base = pos * f * c;
        let x = &feat.data()[base..base + f * c];
        let up = &upstream.data()[base..base + f * c];
        let (q, k, v) = project_with_pe(x, w, pe, f, c);

        // d(merged) = W_outᵀ · upstream
        let mut d_merged = vec![0.0f32; f * c];
        for t in 0..f {
            for o in 0..c {
                let g = up[t * c + o];
                if g == 0.0 {
                    continue;
                }
                let wrow = &w.w_out.data()[o * c..(o + 1) * c];
                for (dm, &wv) in d_merged[t * c..(t + 1) * c].iter_mut().zip(wrow) {
                    *dm += g * wv;
                }
            }
        }

        let mut dq = vec![0.0f32; f * c];
        let mut dk = vec![0.0f32; f * c];
        let mut dv = vec![0.0f32; f * c];
        for i in 0..f {
            let flags = mask.row(i);
            for h in 0..heads {
                let hs = h * d..(h + 1) * d;
                let qi = &q[i * c + hs.start..i * c + hs.end];
                for j in 0..f {
                    probs[j] = if flags[j] {
                        dot(qi, &k[j * c + hs.start..j * c + hs.end]) * scale
                    } else {
                        0.0
                    };
                }
                softmax_row(&mut probs, flags)?;
                let doi = &d_merged[i * c + hs.start..i * c + hs.end];
                let mut weighted = 0.0f32;
                for j in 0..f {
                    if !flags[j] {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = dot(doi, &v[j * c + hs.start..j * c + hs.end]);
                    weighted += probs[j] * dp[j];
                    for (g, &o) in dv[j * c + hs.start..j * c + hs.end].iter_mut().zip(doi) {
                        *g += probs[j] * o;
                    }
                }
                for j in 0..f {
                    if !flags[j] {
                        continue;
                    }
                    let ds = probs[j] * (dp[j] - weighted) * scale;
                    for e in 0..d {
                        dq[i * c + hs.start + e] += ds * k[j * c + hs.start + e];
                        dk[j * c + hs.start + e] += ds * q[i * c + hs.start + e];
                    }
                }
            }
        }

        // d(feat) = W_Qᵀ dq + W_Kᵀ dk + W_Vᵀ dv
        let g = &mut grad[base..base + f * c];
        for t in 0..f {
            for (wm, dm) in [(&w.w_q, &dq), (&w.w_k, &dk), (&w.w_v, &dv)] {
                for o in 0..c {
                    let gv = dm[t * c + o];
                    if gv == 0.0 {
                        continue;
                    }
                    let wrow = &wm.data()[o * c..(o + 1) * c];
                    for (gg, &wv) in g[t * c..(t + 1) * c].iter_mut().zip(wrow) {
                        *gg += gv * wv;
                    }
                }
            }
        }
    }
    Tensor::new(&[s, f, c], grad)
}
