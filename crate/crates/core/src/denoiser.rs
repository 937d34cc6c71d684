//! Toy noise-prediction network.
//!
//! Stands in for a video U-Net: each frame's latent is lifted to `C`
//! channels, offset by a timestep and a style embedding, optionally receives
//! a structural conditioning signal through a zero-initialised adapter, and
//! then passes through blocks of per-frame spatial mixing followed by
//! temporal self-attention. The head predicts a clean latent which is turned
//! into a noise prediction through the schedule.

use crate::attention::{
    attend_full, make_positional_encoding, precompute_pe_projections, AttentionWeights, PeProjections,
    PositionalEncoding,
};
use crate::diffusion::Schedule;
use crate::error::{dim_err, param_err, Error, Result};
use crate::kvcache::{LayerCache, StreamStats};
use crate::mask::{streaming_row_mask, AttentionMask};
use crate::tensor::{gaussian, matvec, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub heads: usize,
    pub temporal_layers: usize,
    pub latent_channels: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub cond_channels: usize,
    pub adapter_hidden: usize,
    pub n_styles: usize,
    pub n_train_steps: usize,
    /// Length of the positional table, i.e. the longest attention window.
    pub max_window: usize,
    /// How far each temporal layer moves a frame's features toward its
    /// attention read-out: `h + g·(attn(h) - h)`.
    pub temporal_mix: f32,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            heads: 2,
            temporal_layers: 2,
            latent_channels: 1,
            grid_height: 8,
            grid_width: 8,
            cond_channels: 1,
            adapter_hidden: 8,
            n_styles: 4,
            n_train_steps: 1000,
            max_window: 16,
            temporal_mix: 0.5,
        }
    }
}

impl DenoiserConfig {
    pub fn positions(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || !c.is_multiple_of(2) {
            return param_err(format!("channels must be even and positive, got {c}"));
        }
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return param_err(format!("heads {} must divide channels {c}", self.heads));
        }
        let positive = [
            ("temporal_layers", self.temporal_layers),
            ("latent_channels", self.latent_channels),
            ("grid_height", self.grid_height),
            ("grid_width", self.grid_width),
            ("cond_channels", self.cond_channels),
            ("adapter_hidden", self.adapter_hidden),
            ("n_styles", self.n_styles),
            ("n_train_steps", self.n_train_steps),
            ("max_window", self.max_window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return param_err(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.temporal_mix) {
            return param_err(format!("temporal_mix {} outside [0, 1]", self.temporal_mix));
        }
        Ok(())
    }
}

/// Two-stage channel mixer for the conditioning signal. The second stage
/// starts at zero, so a fresh adapter contributes nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionAdapter {
    pub stage1: Tensor,
    pub stage2: Tensor,
}

impl ConditionAdapter {
    /// `stage2 · tanh(stage1 · cond)` for one position.
    fn apply(&self, cond: &[f32], hidden: &mut [f32], out: &mut [f32]) {
        matvec(self.stage1.data(), cond.len(), cond, hidden);
        for h in hidden.iter_mut() {
            *h = h.tanh();
        }
        matvec(self.stage2.data(), hidden.len(), hidden, out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub mixer: Tensor,
    pub attn: AttentionWeights,
    pub(crate) pe: PeProjections,
}

impl Block {
    pub fn pe_projections(&self) -> &PeProjections {
        &self.pe
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    pub w_in: Tensor,
    pub time_embed: Tensor,
    pub style_embed: Tensor,
    pub adapter: ConditionAdapter,
    pub blocks: Vec<Block>,
    pub w_head: Tensor,
    pe: PositionalEncoding,
}

/// Which slot of the per-step cache a latent in a streaming batch uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSlot {
    /// Inference step (cache row) the latent is at.
    pub step: usize,
    /// Stream index of the frame, or `None` for a pipeline placeholder that
    /// must not enter the cache.
    pub frame_index: Option<usize>,
}

/// Streaming attention state for every temporal layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamCache {
    layers: Vec<LayerCache>,
    window: usize,
    warmup: usize,
    cached: bool,
}

impl StreamCache {
    pub fn new(model: &ToyDenoiser, steps: usize, window: usize, warmup: usize, cached: bool) -> Result<Self> {
        if window > model.config.max_window {
            return param_err(format!(
                "window {window} exceeds the model's positional table ({})",
                model.config.max_window
            ));
        }
        let layers = (0..model.blocks.len())
            .map(|_| {
                LayerCache::new(
                    cached,
                    steps,
                    model.config.positions(),
                    window,
                    model.config.channels,
                    warmup,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            window,
            warmup,
            cached,
        })
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn is_cached(&self) -> bool {
        self.cached
    }
}

/// How the temporal layers see other frames during a forward pass.
#[derive(Debug)]
pub enum Temporal<'a> {
    /// Temporal layers are skipped; frames are independent.
    Off,
    /// Masked attention across the batch, which is one contiguous window.
    Batch(&'a AttentionMask),
    /// Bidirectional attention across the `L_w` warmup frames, recording
    /// their keys and values for `step`.
    Warmup { cache: &'a mut StreamCache, step: usize },
    /// Each latent attends through the cache row of its own step.
    Stream {
        cache: &'a mut StreamCache,
        slots: &'a [StreamSlot],
    },
}

/// Work done by one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// K/V frame projections for real frames in streaming mode.
    pub kv_projections: u64,
    /// K/V frame projections made while recording warmup frames.
    pub warmup_kv_projections: u64,
    /// K/V frame projections for placeholder latents.
    pub placeholder_kv_projections: u64,
    pub attention_flops: u64,
}

pub fn init_model(config: DenoiserConfig, seed: u64) -> Result<ToyDenoiser> {
    config.validate()?;
    let mut rng = RngStream::new(seed);
    let c = config.channels;
    let std = |fan_in: usize, gain: f32| gain / (fan_in as f32).sqrt();
    let w_in = gaussian(&mut rng, &[c, config.latent_channels]).scale(std(config.latent_channels, 1.0));
    let time_embed = gaussian(&mut rng, &[config.n_train_steps, c]).scale(0.3);
    let style_embed = gaussian(&mut rng, &[config.n_styles, c]).scale(0.3);
    let adapter = ConditionAdapter {
        stage1: gaussian(&mut rng, &[config.adapter_hidden, config.cond_channels])
            .scale(std(config.cond_channels, 1.0)),
        stage2: Tensor::zeros(&[c, config.adapter_hidden]),
    };
    let pe = make_positional_encoding(config.max_window, c)?;
    let mut blocks = Vec::with_capacity(config.temporal_layers);
    for _ in 0..config.temporal_layers {
        let mixer = gaussian(&mut rng, &[c, c]).scale(std(c, 0.5));
        let attn = AttentionWeights::random(&mut rng, c, config.heads, 1.0)?;
        let pe_proj = precompute_pe_projections(&attn, &pe)?;
        blocks.push(Block {
            mixer,
            attn,
            pe: pe_proj,
        });
    }
    let w_head = gaussian(&mut rng, &[config.latent_channels, c]).scale(std(c, 0.5));
    Ok(ToyDenoiser {
        config,
        w_in,
        time_embed,
        style_embed,
        adapter,
        blocks,
        w_head,
        pe,
    })
}

impl ToyDenoiser {
    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn positional_encoding(&self) -> &PositionalEncoding {
        &self.pe
    }

    /// Reassemble a model from stored parameters (see the weights module).
    pub(crate) fn from_parts(config: DenoiserConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = 6 + 5 * config.temporal_layers;
        if params.len() != expected {
            return dim_err(format!("expected {expected} parameter tensors, got {}", params.len()));
        }
        let mut it = params.into_iter();
        let mut next = |shape: &[usize]| -> Result<Tensor> {
            let t = it.next().expect("counted");
            if t.shape() != shape {
                return dim_err(format!("parameter shape {:?}, expected {shape:?}", t.shape()));
            }
            Ok(t)
        };
        let c = config.channels;
        let w_in = next(&[c, config.latent_channels])?;
        let time_embed = next(&[config.n_train_steps, c])?;
        let style_embed = next(&[config.n_styles, c])?;
        let adapter = ConditionAdapter {
            stage1: next(&[config.adapter_hidden, config.cond_channels])?,
            stage2: next(&[c, config.adapter_hidden])?,
        };
        let w_head = next(&[config.latent_channels, c])?;
        let pe = make_positional_encoding(config.max_window, c)?;
        let mut blocks = Vec::new();
        for _ in 0..config.temporal_layers {
            let mixer = next(&[c, c])?;
            let attn = AttentionWeights::new(
                next(&[c, c])?,
                next(&[c, c])?,
                next(&[c, c])?,
                next(&[c, c])?,
                config.heads,
            )?;
            let pe_proj = precompute_pe_projections(&attn, &pe)?;
            blocks.push(Block {
                mixer,
                attn,
                pe: pe_proj,
            });
        }
        Ok(Self {
            config,
            w_in,
            time_embed,
            style_embed,
            adapter,
            blocks,
            w_head,
            pe,
        })
    }

    /// Parameters in storage order.
    pub(crate) fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.w_in,
            &self.time_embed,
            &self.style_embed,
            &self.adapter.stage1,
            &self.adapter.stage2,
            &self.w_head,
        ];
        for b in &self.blocks {
            out.extend([&b.mixer, &b.attn.w_q, &b.attn.w_k, &b.attn.w_v, &b.attn.w_out]);
        }
        out
    }

    /// Predict the noise in `latents` (`[B, S, C_lat]`).
    ///
    /// `t` holds the training timestep of every latent, `cond` optional
    /// structure maps `[B, S, C_cond]`.
    pub fn forward(
        &self,
        latents: &Tensor,
        t: &[usize],
        style: usize,
        cond: Option<&Tensor>,
        sched: &Schedule,
        temporal: Temporal<'_>,
    ) -> Result<(Tensor, ForwardStats)> {
        let cfg = &self.config;
        let (s, c, cl) = (cfg.positions(), cfg.channels, cfg.latent_channels);
        let &[b, s_in, cl_in] = latents.shape() else {
            return dim_err(format!("latents must be [B, S, C_lat], got {:?}", latents.shape()));
        };
        if s_in != s || cl_in != cl {
            return dim_err(format!("latents {:?} do not match grid {s} x {cl}", latents.shape()));
        }
        if t.len() != b {
            return dim_err(format!("{} timesteps for {b} latents", t.len()));
        }
        if let Some(&bad) = t
            .iter()
            .find(|&&x| x >= cfg.n_train_steps || x >= sched.n_train_steps())
        {
            return param_err(format!("timestep {bad} outside the schedule"));
        }
        if style >= cfg.n_styles {
            return param_err(format!("style {style} out of range for {} styles", cfg.n_styles));
        }
        if let Some(cd) = cond {
            if cd.shape() != [b, s, cfg.cond_channels] {
                return dim_err(format!(
                    "conditioning {:?}, expected [{b}, {s}, {}]",
                    cd.shape(),
                    cfg.cond_channels
                ));
            }
        }

        let mut h = vec![0.0f32; b * s * c];
        let mut hidden = vec![0.0f32; cfg.adapter_hidden];
        let mut injected = vec![0.0f32; c];
        let style_row = &self.style_embed.data()[style * c..(style + 1) * c];
        for f in 0..b {
            let trow = &self.time_embed.data()[t[f] * c..(t[f] + 1) * c];
            for p in 0..s {
                let x = &latents.data()[(f * s + p) * cl..(f * s + p + 1) * cl];
                let hp = &mut h[(f * s + p) * c..(f * s + p + 1) * c];
                matvec(self.w_in.data(), cl, x, hp);
                for ((v, &te), &se) in hp.iter_mut().zip(trow).zip(style_row) {
                    *v += te + se;
                }
                if let Some(cd) = cond {
                    let cc = cfg.cond_channels;
                    self.adapter.apply(
                        &cd.data()[(f * s + p) * cc..(f * s + p + 1) * cc],
                        &mut hidden,
                        &mut injected,
                    );
                    for (v, &a) in hp.iter_mut().zip(&injected) {
                        *v += a;
                    }
                }
            }
        }

        let mut stats = ForwardStats::default();
        let mut temporal = temporal;
        for (li, block) in self.blocks.iter().enumerate() {
            self.spatial_mix(&mut h, b, &block.mixer);
            if let Some(read) = self.temporal_layer(&h, b, li, block, &mut temporal, &mut stats)? {
                let g = cfg.temporal_mix;
                for (v, r) in h.iter_mut().zip(read) {
                    *v += g * (r - *v);
                }
            }
        }

        // Clean-latent head, converted to a noise prediction.
        let mut eps = vec![0.0f32; b * s * cl];
        let mut x0 = vec![0.0f32; cl];
        for f in 0..b {
            let ab = sched.alpha_bar(t[f]);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            for p in 0..s {
                matvec(self.w_head.data(), c, &h[(f * s + p) * c..(f * s + p + 1) * c], &mut x0);
                let r = (f * s + p) * cl..(f * s + p + 1) * cl;
                for ((e, &z), &x0h) in eps[r.clone()].iter_mut().zip(&latents.data()[r]).zip(&x0) {
                    let z = z as f64;
                    let x0_hat = sa * z + x0h as f64;
                    *e = ((z - sa * x0_hat) / sn) as f32;
                }
            }
        }
        Ok((Tensor::new(latents.shape(), eps)?, stats))
    }

    /// `h += tanh(M · blur3x3(h))`, independently per frame.
    fn spatial_mix(&self, h: &mut [f32], frames: usize, mixer: &Tensor) {
        let cfg = &self.config;
        let (gh, gw, c) = (cfg.grid_height, cfg.grid_width, cfg.channels);
        let mut blurred = vec![0.0f32; gh * gw * c];
        let mut mixed = vec![0.0f32; c];
        for f in 0..frames {
            let frame = &mut h[f * gh * gw * c..(f + 1) * gh * gw * c];
            for y in 0..gh {
                for x in 0..gw {
                    let dst = &mut blurred[(y * gw + x) * c..(y * gw + x + 1) * c];
                    dst.fill(0.0);
                    let mut n = 0.0f32;
                    for yy in y.saturating_sub(1)..(y + 2).min(gh) {
                        for xx in x.saturating_sub(1)..(x + 2).min(gw) {
                            n += 1.0;
                            for (d, &v) in dst.iter_mut().zip(&frame[(yy * gw + xx) * c..(yy * gw + xx + 1) * c]) {
                                *d += v;
                            }
                        }
                    }
                    for d in dst.iter_mut() {
                        *d /= n;
                    }
                }
            }
            for p in 0..gh * gw {
                matvec(mixer.data(), c, &blurred[p * c..(p + 1) * c], &mut mixed);
                for (v, &m) in frame[p * c..(p + 1) * c].iter_mut().zip(&mixed) {
                    *v += m.tanh();
                }
            }
        }
    }

    /// Attention read-out of temporal layer `li`, or `None` when disabled.
    fn temporal_layer(
        &self,
        h: &[f32],
        frames: usize,
        li: usize,
        block: &Block,
        temporal: &mut Temporal<'_>,
        stats: &mut ForwardStats,
    ) -> Result<Option<Vec<f32>>> {
        let (s, c) = (self.config.positions(), self.config.channels);
        match temporal {
            Temporal::Off => Ok(None),
            Temporal::Batch(mask) => {
                let feat = frames_to_positions(h, frames, s, c);
                let out = attend_full(&feat, &block.attn, mask, &block.pe)?;
                stats.attention_flops += batch_flops(mask, s, c);
                Ok(Some(positions_to_frames(out.data(), frames, s, c)))
            }
            Temporal::Warmup { cache, step } => {
                if frames != cache.warmup {
                    return dim_err(format!(
                        "warmup batch of {frames} frames, cache expects {}",
                        cache.warmup
                    ));
                }
                let feat = frames_to_positions(h, frames, s, c);
                let mask = AttentionMask::all_allowed(frames, frames);
                let out = attend_full(&feat, &block.attn, &mask, &block.pe)?;
                stats.attention_flops += batch_flops(&mask, s, c);
                stats.warmup_kv_projections += cache.layers[li].write_warmup_features(*step, &feat, &block.attn)?;
                Ok(Some(positions_to_frames(out.data(), frames, s, c)))
            }
            Temporal::Stream { cache, slots } => {
                if slots.len() != frames {
                    return dim_err(format!("{} stream slots for {frames} latents", slots.len()));
                }
                let (window, warmup) = (cache.window, cache.warmup);
                let layer = &mut cache.layers[li];
                let mut delta = vec![0.0f32; frames * s * c];
                for (f, slot) in slots.iter().enumerate() {
                    let feat = Tensor::new(&[s, 1, c], h[f * s * c..(f + 1) * s * c].to_vec())?;
                    let (out, st): (Tensor, StreamStats) = match slot.frame_index {
                        Some(fi) => {
                            let row = streaming_row_mask(fi, window, warmup)?;
                            let r = layer.attend(slot.step, &feat, &block.attn, &row, &block.pe)?;
                            stats.kv_projections += r.1.kv_projections;
                            r
                        }
                        None => {
                            let r = layer.attend_detached(slot.step, &feat, &block.attn, &block.pe)?;
                            stats.placeholder_kv_projections += r.1.kv_projections;
                            r
                        }
                    };
                    stats.attention_flops += st.attention_flops;
                    delta[f * s * c..(f + 1) * s * c].copy_from_slice(out.data());
                }
                Ok(Some(delta))
            }
        }
    }
}

fn batch_flops(mask: &AttentionMask, s: usize, c: usize) -> u64 {
    let allowed: usize = (0..mask.rows())
        .map(|i| mask.row(i).iter().filter(|&&a| a).count())
        .sum();
    (4 * s * c * allowed) as u64
}

/// `[F, S, C]` → `[S, F, C]`.
fn frames_to_positions(h: &[f32], frames: usize, s: usize, c: usize) -> Tensor {
    let mut out = vec![0.0f32; frames * s * c];
    for f in 0..frames {
        for p in 0..s {
            out[(p * frames + f) * c..(p * frames + f + 1) * c]
                .copy_from_slice(&h[(f * s + p) * c..(f * s + p + 1) * c]);
        }
    }
    Tensor::new(&[s, frames, c], out).expect("sized")
}

/// `[S, F, C]` → `[F, S, C]`.
fn positions_to_frames(x: &[f32], frames: usize, s: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; frames * s * c];
    for p in 0..s {
        for f in 0..frames {
            out[(f * s + p) * c..(f * s + p + 1) * c]
                .copy_from_slice(&x[(p * frames + f) * c..(p * frames + f + 1) * c]);
        }
    }
    out
}

/// Gradient-magnitude map of a `[H, W, ch]` frame, pooled onto a
/// `grid_h × grid_w` latent grid. Returns `[grid_h·grid_w, 1]`.
///
/// Channels are averaged first; gradients are central differences with
/// clamped borders.
pub fn structure_map(frame: &Tensor, grid_h: usize, grid_w: usize) -> Result<Tensor> {
    let &[h, w, ch] = frame.shape() else {
        return dim_err(format!("frame must be [H, W, ch], got {:?}", frame.shape()));
    };
    if grid_h == 0 || grid_w == 0 || h % grid_h != 0 || w % grid_w != 0 {
        return param_err(format!("frame {h}x{w} does not pool onto grid {grid_h}x{grid_w}"));
    }
    if !frame.all_finite() {
        return Err(Error::Domain("frame contains non-finite values".into()));
    }
    let lum: Vec<f32> = frame
        .data()
        .chunks_exact(ch)
        .map(|px| px.iter().sum::<f32>() / ch as f32)
        .collect();
    let at = |y: usize, x: usize| lum[y * w + x];
    let (fy, fx) = (h / grid_h, w / grid_w);
    let mut out = vec![0.0f32; grid_h * grid_w];
    for y in 0..h {
        for x in 0..w {
            let gx = (at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1))) * 0.5;
            let gy = (at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x)) * 0.5;
            out[(y / fy) * grid_w + x / fx] += (gx * gx + gy * gy).sqrt();
        }
    }
    let norm = 1.0 / (fy * fx) as f32;
    for v in &mut out {
        *v *= norm;
    }
    Tensor::new(&[grid_h * grid_w, 1], out)
}

/// Maps frames to latents and back by average pooling over `factor²`
/// pixel blocks and nearest upsampling. With `factor == 1` both directions
/// are the identity. Frames are `[H, W, ch]`, latents `[S, ch]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentCodec {
    pub grid_height: usize,
    pub grid_width: usize,
    pub factor: usize,
}

impl LatentCodec {
    pub fn identity(grid_height: usize, grid_width: usize) -> Self {
        Self {
            grid_height,
            grid_width,
            factor: 1,
        }
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.grid_height * self.factor, self.grid_width * self.factor)
    }

    pub fn encode(&self, frame: &Tensor) -> Result<Tensor> {
        let (fh, fw) = self.frame_size();
        let &[h, w, ch] = frame.shape() else {
            return dim_err(format!("frame must be [H, W, ch], got {:?}", frame.shape()));
        };
        if h != fh || w != fw {
            return dim_err(format!("frame {h}x{w}, codec expects {fh}x{fw}"));
        }
        let (gh, gw, k) = (self.grid_height, self.grid_width, self.factor);
        let mut out = vec![0.0f32; gh * gw * ch];
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    out[((y / k) * gw + x / k) * ch + c] += frame.data()[(y * w + x) * ch + c];
                }
            }
        }
        let norm = 1.0 / (k * k) as f32;
        for v in &mut out {
            *v *= norm;
        }
        Tensor::new(&[gh * gw, ch], out)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let (gh, gw, k) = (self.grid_height, self.grid_width, self.factor);
        let &[s, ch] = latent.shape() else {
            return dim_err(format!("latent must be [S, ch], got {:?}", latent.shape()));
        };
        if s != gh * gw {
            return dim_err(format!("latent has {s} positions, grid has {}", gh * gw));
        }
        let (h, w) = self.frame_size();
        let mut out = vec![0.0f32; h * w * ch];
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    out[(y * w + x) * ch + c] = latent.data()[((y / k) * gw + x / k) * ch + c];
                }
            }
        }
        Tensor::new(&[h, w, ch], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{build_training_mask, MaskMode};

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            grid_height: 3,
            grid_width: 4,
            max_window: 8,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = init_model(small(), 1).unwrap();
        let b = init_model(small(), 1).unwrap();
        let c = init_model(small(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.w_in, c.w_in);
        assert!(a.adapter.stage2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_rejects_invalid_config() {
        let bad = DenoiserConfig {
            channels: 15,
            ..small()
        };
        assert!(init_model(bad, 0).is_err());
        let bad = DenoiserConfig { heads: 3, ..small() };
        assert!(init_model(bad, 0).is_err());
    }

    #[test]
    fn fresh_adapter_is_a_no_op() {
        let m = init_model(small(), 3).unwrap();
        let sched = Schedule::default();
        let mut rng = RngStream::new(4);
        let z = gaussian(&mut rng, &[4, 12, 1]);
        let cond = gaussian(&mut rng, &[4, 12, 1]);
        let mask = build_training_mask(MaskMode::UnidirectionalWarmup(2), 4).unwrap();
        let t = [499; 4];
        let (a, _) = m.forward(&z, &t, 1, None, &sched, Temporal::Batch(&mask)).unwrap();
        let (b, _) = m
            .forward(&z, &t, 1, Some(&cond), &sched, Temporal::Batch(&mask))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), z.shape());
        assert!(a.all_finite());
    }

    #[test]
    fn trained_adapter_changes_output() {
        let mut m = init_model(small(), 3).unwrap();
        m.adapter.stage2 = Tensor::full(m.adapter.stage2.shape(), 0.1);
        let sched = Schedule::default();
        let mut rng = RngStream::new(4);
        let z = gaussian(&mut rng, &[2, 12, 1]);
        let cond = gaussian(&mut rng, &[2, 12, 1]);
        let (a, _) = m.forward(&z, &[499, 499], 0, None, &sched, Temporal::Off).unwrap();
        let (b, _) = m
            .forward(&z, &[499, 499], 0, Some(&cond), &sched, Temporal::Off)
            .unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn forward_validates_inputs() {
        let m = init_model(small(), 3).unwrap();
        let sched = Schedule::default();
        let z = Tensor::zeros(&[2, 12, 1]);
        assert!(m.forward(&z, &[1], 0, None, &sched, Temporal::Off).is_err());
        assert!(m.forward(&z, &[1, 1000], 0, None, &sched, Temporal::Off).is_err());
        assert!(m.forward(&z, &[1, 1], 9, None, &sched, Temporal::Off).is_err());
        assert!(m
            .forward(&Tensor::zeros(&[2, 11, 1]), &[1, 1], 0, None, &sched, Temporal::Off)
            .is_err());
    }

    #[test]
    fn batch_causality() {
        let m = init_model(small(), 5).unwrap();
        let sched = Schedule::default();
        let mut rng = RngStream::new(6);
        let (l, lw) = (6, 2);
        let z = gaussian(&mut rng, &[l, 12, 1]);
        let t = [600; 6];
        let mask = build_training_mask(MaskMode::UnidirectionalWarmup(lw), l).unwrap();
        let (base, _) = m.forward(&z, &t, 0, None, &sched, Temporal::Batch(&mask)).unwrap();
        for j in lw..l {
            let mut p = z.clone();
            for v in &mut p.data_mut()[j * 12..(j + 1) * 12] {
                *v += 1e-2;
            }
            let (out, _) = m.forward(&p, &t, 0, None, &sched, Temporal::Batch(&mask)).unwrap();
            for i in lw..j {
                assert!(out.slab(i).unwrap().max_abs_diff(&base.slab(i).unwrap()) <= 1e-8);
            }
            assert!(out.slab(j).unwrap().max_abs_diff(&base.slab(j).unwrap()) > 1e-8);
        }
    }

    #[test]
    fn streaming_equals_batch_on_one_window() {
        for l in [4, 8, 16] {
            for lw in [1, l / 4, l / 2] {
                for steps in [1, 2, 4] {
                    for layers in [1, 2] {
                        check_stream_batch(l, lw, steps, layers);
                    }
                }
            }
        }
    }

    /// Every step row is an independent cache, so each step is checked with
    /// its own random latents and timestep.
    fn check_stream_batch(l: usize, lw: usize, steps: usize, layers: usize) {
        let sched = crate::diffusion::make_schedule(1000, steps, 1e-4, 0.02).unwrap();
        let cfg = DenoiserConfig {
            temporal_layers: layers,
            max_window: 16,
            ..small()
        };
        let m = init_model(cfg, 7).unwrap();
        let mut rng = RngStream::new((l * 100 + lw * 10 + steps) as u64);
        let mut cache = StreamCache::new(&m, steps, l, lw, true).unwrap();
        let mask = build_training_mask(MaskMode::UnidirectionalWarmup(lw), l).unwrap();
        for k in 0..steps {
            let tk = sched.train_step(k);
            let t = vec![tk; l];
            let z = gaussian(&mut rng, &[l, 12, 1]);
            let (batch, _) = m.forward(&z, &t, 2, None, &sched, Temporal::Batch(&mask)).unwrap();
            let warm = Tensor::new(&[lw, 12, 1], z.data()[..lw * 12].to_vec()).unwrap();
            let (wout, st) = m
                .forward(
                    &warm,
                    &t[..lw],
                    2,
                    None,
                    &sched,
                    Temporal::Warmup {
                        cache: &mut cache,
                        step: k,
                    },
                )
                .unwrap();
            assert_eq!(st.warmup_kv_projections, (lw * layers) as u64);
            for i in 0..lw {
                assert!(wout.slab(i).unwrap().max_abs_diff(&batch.slab(i).unwrap()) <= 1e-5);
            }
            for f in lw..l {
                let zf = Tensor::new(&[1, 12, 1], z.data()[f * 12..(f + 1) * 12].to_vec()).unwrap();
                let slots = [StreamSlot {
                    step: k,
                    frame_index: Some(f),
                }];
                let (out, st) = m
                    .forward(
                        &zf,
                        &[tk],
                        2,
                        None,
                        &sched,
                        Temporal::Stream {
                            cache: &mut cache,
                            slots: &slots,
                        },
                    )
                    .unwrap();
                assert_eq!(st.kv_projections, layers as u64);
                let d = out.slab(0).unwrap().max_abs_diff(&batch.slab(f).unwrap());
                assert!(
                    d <= 1e-5,
                    "L={l} L_w={lw} T={steps} layers={layers} step {k} frame {f}: {d}"
                );
            }
        }
    }

    #[test]
    fn stream_cache_rejects_window_beyond_table() {
        let m = init_model(small(), 1).unwrap();
        assert!(StreamCache::new(&m, 1, 9, 2, true).is_err());
    }

    #[test]
    fn structure_map_cases() {
        let flat = Tensor::full(&[4, 6, 1], 0.7);
        assert!(structure_map(&flat, 4, 6).unwrap().data().iter().all(|&v| v == 0.0));

        // Step between columns 2 and 3.
        let d: Vec<f32> = (0..4)
            .flat_map(|_| (0..6).map(|x| if x >= 3 { 1.0 } else { 0.0 }))
            .collect();
        let edge = Tensor::new(&[4, 6, 1], d).unwrap();
        let m = structure_map(&edge, 4, 6).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                let v = m.data()[y * 6 + x];
                if x == 2 || x == 3 {
                    assert!((v - 0.5).abs() < 1e-6);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert!(structure_map(&edge, 3, 6).is_err());
    }

    #[test]
    fn structure_map_matches_direct_loop() {
        let mut rng = RngStream::new(9);
        let frame = gaussian(&mut rng, &[8, 8, 3]);
        let got = structure_map(&frame, 4, 4).unwrap();
        let lum = |y: i64, x: i64| -> f64 {
            let (y, x) = (y.clamp(0, 7) as usize, x.clamp(0, 7) as usize);
            (0..3).map(|c| frame.data()[(y * 8 + x) * 3 + c] as f64).sum::<f64>() / 3.0
        };
        for gy in 0..4 {
            for gx in 0..4 {
                let mut acc = 0.0;
                for y in gy * 2..gy * 2 + 2 {
                    for x in gx * 2..gx * 2 + 2 {
                        let (yi, xi) = (y as i64, x as i64);
                        let dx = (lum(yi, xi + 1) - lum(yi, xi - 1)) / 2.0;
                        let dy = (lum(yi + 1, xi) - lum(yi - 1, xi)) / 2.0;
                        acc += (dx * dx + dy * dy).sqrt();
                    }
                }
                assert!((got.data()[gy * 4 + gx] as f64 - acc / 4.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn codec_round_trips_block_constant_frames() {
        let codec = LatentCodec {
            grid_height: 2,
            grid_width: 3,
            factor: 2,
        };
        let mut rng = RngStream::new(10);
        let lat = gaussian(&mut rng, &[6, 2]);
        let frame = codec.decode(&lat).unwrap();
        assert_eq!(frame.shape(), &[4, 6, 2]);
        assert!(codec.encode(&frame).unwrap().max_abs_diff(&lat) <= 1e-6);
    }
}
