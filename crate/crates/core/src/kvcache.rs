//! Per-denoising-step key/value cache for streaming temporal attention.
//!
//! Each attention layer owns one bank holding `[T, S, L, C]` buffers for keys
//! and values. Slots `[0, L_w)` hold the warmup frames and are written once;
//! slots `[L_w, L)` are a queue whose newest entry sits in slot `L-1`.
//! Entries are the raw projections `W_K·f`, `W_V·f`; positional terms are
//! re-attached at read time from the compacted slot ranks.

use std::io::{Read, Write};

use crate::attention::{sdpa, AttentionWeights, PeProjections};
use crate::error::{dim_err, param_err, Error, Result};
use crate::mask::{pe_index_compaction, MaskRow};
use crate::tensor::{matvec, Tensor};

/// `[T, S, L, C]` slot storage with a permanent warmup region and a rolling
/// recent region, tracked independently per step.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingWindow {
    steps: usize,
    positions: usize,
    window: usize,
    channels: usize,
    warmup: usize,
    data: Vec<f32>,
    warmup_written: Vec<bool>,
    occupancy: Vec<usize>,
}

impl RollingWindow {
    pub fn new(steps: usize, positions: usize, window: usize, channels: usize, warmup: usize) -> Result<Self> {
        if warmup == 0 || warmup >= window {
            return param_err(format!("cache needs 1 <= L_w < L (L_w={warmup}, L={window})"));
        }
        if steps == 0 || positions == 0 || channels == 0 {
            return param_err("cache extents T, S, C must be at least 1");
        }
        Ok(Self {
            steps,
            positions,
            window,
            channels,
            warmup,
            data: vec![0.0; steps * positions * window * channels],
            warmup_written: vec![false; steps],
            occupancy: vec![0; steps],
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn capacity(&self) -> usize {
        self.window - self.warmup
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step >= self.steps {
            return param_err(format!("step {step} out of range for {} cached steps", self.steps));
        }
        Ok(())
    }

    pub fn occupancy(&self, step: usize) -> usize {
        self.occupancy.get(step).copied().unwrap_or(0)
    }

    pub fn warmup_written(&self, step: usize) -> bool {
        self.warmup_written.get(step).copied().unwrap_or(false)
    }

    fn offset(&self, step: usize, pos: usize, slot: usize) -> usize {
        ((step * self.positions + pos) * self.window + slot) * self.channels
    }

    pub fn slot(&self, step: usize, pos: usize, slot: usize) -> &[f32] {
        let o = self.offset(step, pos, slot);
        &self.data[o..o + self.channels]
    }

    /// All slots of one step as `[S, L, C]`.
    pub fn read_step(&self, step: usize) -> Result<Tensor> {
        self.check_step(step)?;
        let n = self.positions * self.window * self.channels;
        Tensor::new(
            &[self.positions, self.window, self.channels],
            self.data[step * n..(step + 1) * n].to_vec(),
        )
    }

    /// Slot flags: warmup slots once written, plus the occupied recent slots.
    pub fn valid_slots(&self, step: usize) -> MaskRow {
        let warm = self.warmup_written(step);
        let occ = self.occupancy(step);
        MaskRow(
            (0..self.window)
                .map(|j| if j < self.warmup { warm } else { j >= self.window - occ })
                .collect(),
        )
    }

    pub fn write_warmup(&mut self, step: usize, values: &Tensor) -> Result<()> {
        self.check_step(step)?;
        if values.shape() != [self.positions, self.warmup, self.channels] {
            return dim_err(format!(
                "warmup write expects [{}, {}, {}], got {:?}",
                self.positions,
                self.warmup,
                self.channels,
                values.shape()
            ));
        }
        if self.warmup_written[step] {
            return Err(Error::State(format!("warmup slots of step {step} already written")));
        }
        let run = self.warmup * self.channels;
        for pos in 0..self.positions {
            let o = self.offset(step, pos, 0);
            self.data[o..o + run].copy_from_slice(&values.data()[pos * run..(pos + 1) * run]);
        }
        self.warmup_written[step] = true;
        Ok(())
    }

    /// Shift the recent region left by one slot and write `values`
    /// (`[S, 1, C]`) into slot `L-1`.
    pub fn roll_and_write(&mut self, step: usize, values: &Tensor) -> Result<()> {
        self.check_step(step)?;
        if values.shape() != [self.positions, 1, self.channels] {
            return dim_err(format!(
                "roll expects [{}, 1, {}], got {:?}",
                self.positions,
                self.channels,
                values.shape()
            ));
        }
        if !self.warmup_written[step] {
            return Err(Error::State(format!("roll at step {step} before its warmup write")));
        }
        let c = self.channels;
        for pos in 0..self.positions {
            let start = self.offset(step, pos, self.warmup);
            let end = self.offset(step, pos, self.window);
            self.data.copy_within(start + c..end, start);
            self.data[end - c..end].copy_from_slice(&values.data()[pos * c..(pos + 1) * c]);
        }
        self.occupancy[step] = (self.occupancy[step] + 1).min(self.capacity());
        Ok(())
    }

    /// Reject masks that reference slots holding no entry once the next
    /// entry has been written.
    fn check_mask_after_write(&self, step: usize, mask: &MaskRow) -> Result<()> {
        if mask.len() != self.window {
            return dim_err(format!("mask row has {} slots, cache has {}", mask.len(), self.window));
        }
        if !mask.0[self.window - 1] {
            return Err(Error::Consistency("mask row must allow the current frame slot".into()));
        }
        let occ = (self.occupancy(step) + 1).min(self.capacity());
        if let Some(j) = (self.warmup..self.window - occ).find(|&j| mask.0[j]) {
            return Err(Error::Consistency(format!(
                "mask allows slot {j} at step {step} but only {occ} recent slots are filled"
            )));
        }
        Ok(())
    }
}

/// Work done by one streaming attention call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamStats {
    /// Frames whose K/V projection was computed.
    pub kv_projections: u64,
    /// Multiply-adds in score and value accumulation.
    pub attention_flops: u64,
}

impl std::ops::AddAssign for StreamStats {
    fn add_assign(&mut self, o: Self) {
        self.kv_projections += o.kv_projections;
        self.attention_flops += o.attention_flops;
    }
}

fn check_current(feat: &Tensor, positions: usize, w: &AttentionWeights) -> Result<()> {
    if feat.shape() != [positions, 1, w.channels()] {
        return dim_err(format!(
            "current-frame features must be [{positions}, 1, {}], got {:?}",
            w.channels(),
            feat.shape()
        ));
    }
    Ok(())
}

fn project(weights: &Tensor, feat: &Tensor) -> Tensor {
    let c = weights.shape()[1];
    let mut out = vec![0.0f32; feat.len()];
    for (o, x) in out.chunks_exact_mut(c).zip(feat.data().chunks_exact(c)) {
        matvec(weights.data(), c, x, o);
    }
    Tensor::new(feat.shape(), out).expect("projection keeps shape")
}

fn add_row(dst: &mut [f32], src: &[f32]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Single-query attention for every spatial position. `key`/`value` give the
/// position-free entry of slot `j` at position `pos`; blocked slots are never
/// read.
fn single_query<'a>(
    positions: usize,
    window: usize,
    w: &AttentionWeights,
    pe: &PeProjections,
    mask: &MaskRow,
    query: &Tensor,
    key: impl Fn(usize, usize) -> &'a [f32],
    value: impl Fn(usize, usize) -> &'a [f32],
) -> Result<Tensor> {
    let c = w.channels();
    let idx = pe_index_compaction(mask);
    let q_pe = PeProjections::row(&pe.q, idx[window - 1]);
    let mut k_full = vec![0.0f32; window * c];
    let mut v_full = vec![0.0f32; window * c];
    let mut merged = vec![0.0f32; c];
    let mut out = vec![0.0f32; positions * c];
    for pos in 0..positions {
        let mut q = query.data()[pos * c..(pos + 1) * c].to_vec();
        add_row(&mut q, q_pe);
        for j in (0..window).filter(|&j| mask.0[j]) {
            let r = j * c..(j + 1) * c;
            k_full[r.clone()].copy_from_slice(key(pos, j));
            add_row(&mut k_full[r.clone()], PeProjections::row(&pe.k, idx[j]));
            v_full[r.clone()].copy_from_slice(value(pos, j));
            add_row(&mut v_full[r], PeProjections::row(&pe.v, idx[j]));
        }
        sdpa(&q, &k_full, &v_full, c, w.heads(), |_| mask.as_slice(), &mut merged)?;
        matvec(w.w_out.data(), c, &merged, &mut out[pos * c..(pos + 1) * c]);
    }
    Tensor::new(&[positions, 1, c], out)
}

fn flops(positions: usize, channels: usize, keys: usize) -> u64 {
    (4 * positions * channels * keys) as u64
}

fn check_pe(pe: &PeProjections, window: usize) -> Result<()> {
    if pe.max_len() < window {
        return param_err(format!(
            "positional table of {} rows is shorter than the window {window}",
            pe.max_len()
        ));
    }
    Ok(())
}

/// Key/value cache of one attention layer across all denoising steps.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCacheBank {
    k: RollingWindow,
    v: RollingWindow,
}

impl KVCacheBank {
    /// Zero-filled `[T, S, L, C]` key and value buffers.
    pub fn allocate(steps: usize, positions: usize, window: usize, channels: usize, warmup: usize) -> Result<Self> {
        let k = RollingWindow::new(steps, positions, window, channels, warmup)?;
        Ok(Self { v: k.clone(), k })
    }

    pub fn keys(&self) -> &RollingWindow {
        &self.k
    }

    pub fn values(&self) -> &RollingWindow {
        &self.v
    }

    /// Reals held across both buffers.
    pub fn memory_floats(&self) -> usize {
        self.k.data.len() + self.v.data.len()
    }

    pub fn occupancy(&self, step: usize) -> usize {
        self.k.occupancy(step)
    }

    pub fn write_warmup(&mut self, step: usize, k: &Tensor, v: &Tensor) -> Result<()> {
        if k.shape() != v.shape() {
            return dim_err("warmup keys and values differ in shape");
        }
        if self.k.warmup_written(step) {
            return Err(Error::State(format!("warmup slots of step {step} already written")));
        }
        self.k.write_warmup(step, k)?;
        self.v.write_warmup(step, v)
    }

    pub fn roll_and_write(&mut self, step: usize, k: &Tensor, v: &Tensor) -> Result<()> {
        if k.shape() != v.shape() {
            return dim_err("keys and values differ in shape");
        }
        self.k.roll_and_write(step, k)?;
        self.v.roll_and_write(step, v)
    }

    /// Project the current frame, push its K/V into the cache, then attend
    /// from it over the slots `mask` allows.
    pub fn attend_streaming(
        &mut self,
        step: usize,
        feat: &Tensor,
        w: &AttentionWeights,
        mask: &MaskRow,
        pe: &PeProjections,
    ) -> Result<(Tensor, StreamStats)> {
        check_current(feat, self.k.positions, w)?;
        check_pe(pe, self.k.window)?;
        self.k.check_step(step)?;
        if !self.k.warmup_written(step) {
            return Err(Error::State(format!(
                "streaming at step {step} before its warmup write"
            )));
        }
        self.k.check_mask_after_write(step, mask)?;
        let q = project(&w.w_q, feat);
        let k = project(&w.w_k, feat);
        let v = project(&w.w_v, feat);
        self.roll_and_write(step, &k, &v)?;
        let out = single_query(
            self.k.positions,
            self.k.window,
            w,
            pe,
            mask,
            &q,
            |p, j| self.k.slot(step, p, j),
            |p, j| self.v.slot(step, p, j),
        )?;
        let stats = StreamStats {
            kv_projections: 1,
            attention_flops: flops(self.k.positions, w.channels(), mask.allowed_count()),
        };
        Ok((out, stats))
    }

    /// Attend over the warmup slots plus the frame itself without touching
    /// the cache. Used for pipeline placeholder latents.
    pub fn attend_detached(
        &self,
        step: usize,
        feat: &Tensor,
        w: &AttentionWeights,
        pe: &PeProjections,
    ) -> Result<(Tensor, StreamStats)> {
        check_current(feat, self.k.positions, w)?;
        self.k.check_step(step)?;
        if !self.k.warmup_written(step) {
            return Err(Error::State(format!(
                "streaming at step {step} before its warmup write"
            )));
        }
        let lw = self.k.warmup;
        let q = project(&w.w_q, feat);
        let k = project(&w.w_k, feat);
        let v = project(&w.w_v, feat);
        let c = w.channels();
        let mask = MaskRow((0..=lw).map(|_| true).collect());
        let out = single_query(
            self.k.positions,
            lw + 1,
            w,
            pe,
            &mask,
            &q,
            |p, j| {
                if j < lw {
                    self.k.slot(step, p, j)
                } else {
                    &k.data()[p * c..(p + 1) * c]
                }
            },
            |p, j| {
                if j < lw {
                    self.v.slot(step, p, j)
                } else {
                    &v.data()[p * c..(p + 1) * c]
                }
            },
        )?;
        Ok((
            out,
            StreamStats {
                kv_projections: 1,
                attention_flops: flops(self.k.positions, c, lw + 1),
            },
        ))
    }

    /// Debug dump: `T, S, L, C, L_w` as little-endian u32, then all keys,
    /// then all values as little-endian f32.
    pub fn dump<W: Write>(&self, mut out: W) -> Result<()> {
        for x in [
            self.k.steps,
            self.k.positions,
            self.k.window,
            self.k.channels,
            self.k.warmup,
        ] {
            out.write_all(&(x as u32).to_le_bytes())?;
        }
        for buf in [&self.k.data, &self.v.data] {
            for x in buf.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Read back a [`dump`](Self::dump). Bookkeeping is not part of the dump;
    /// every step is marked as having its warmup written and occupancy 0.
    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let mut header = [0u8; 20];
        input.read_exact(&mut header).map_err(|_| Error::Format {
            offset: 0,
            msg: "truncated cache header".into(),
        })?;
        let h: Vec<usize> = header
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        let mut bank = Self::allocate(h[0], h[1], h[2], h[3], h[4])?;
        let mut offset = 20u64;
        for buf in [&mut bank.k.data, &mut bank.v.data] {
            for x in buf.iter_mut() {
                let mut b = [0u8; 4];
                input.read_exact(&mut b).map_err(|_| Error::Format {
                    offset,
                    msg: "truncated cache payload".into(),
                })?;
                *x = f32::from_le_bytes(b);
                offset += 4;
            }
        }
        bank.k.warmup_written.fill(true);
        bank.v.warmup_written.fill(true);
        Ok(bank)
    }
}

/// History of position-free layer inputs, used when K/V are recomputed
/// from scratch on every call instead of being cached.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    feat: RollingWindow,
}

impl FeatureBank {
    pub fn allocate(steps: usize, positions: usize, window: usize, channels: usize, warmup: usize) -> Result<Self> {
        Ok(Self {
            feat: RollingWindow::new(steps, positions, window, channels, warmup)?,
        })
    }

    pub fn occupancy(&self, step: usize) -> usize {
        self.feat.occupancy(step)
    }

    pub fn write_warmup(&mut self, step: usize, feat: &Tensor) -> Result<()> {
        self.feat.write_warmup(step, feat)
    }

    /// Store the current frame's features, then recompute K/V for every
    /// attended slot and attend.
    pub fn attend_recompute(
        &mut self,
        step: usize,
        feat: &Tensor,
        w: &AttentionWeights,
        mask: &MaskRow,
        pe: &PeProjections,
    ) -> Result<(Tensor, StreamStats)> {
        check_current(feat, self.feat.positions, w)?;
        check_pe(pe, self.feat.window)?;
        self.feat.check_step(step)?;
        if !self.feat.warmup_written(step) {
            return Err(Error::State(format!(
                "streaming at step {step} before its warmup write"
            )));
        }
        self.feat.check_mask_after_write(step, mask)?;
        self.feat.roll_and_write(step, feat)?;
        let (s, l, c) = (self.feat.positions, self.feat.window, self.feat.channels);
        let q = project(&w.w_q, feat);
        // Recompute every attended slot from stored features.
        let mut k = vec![0.0f32; s * l * c];
        let mut v = vec![0.0f32; s * l * c];
        for pos in 0..s {
            for j in (0..l).filter(|&j| mask.0[j]) {
                let x = self.feat.slot(step, pos, j);
                let r = (pos * l + j) * c..(pos * l + j + 1) * c;
                matvec(w.w_k.data(), c, x, &mut k[r.clone()]);
                matvec(w.w_v.data(), c, x, &mut v[r]);
            }
        }
        let at = |p: usize, j: usize| (p * l + j) * c..(p * l + j + 1) * c;
        let out = single_query(s, l, w, pe, mask, &q, |p, j| &k[at(p, j)], |p, j| &v[at(p, j)])?;
        let n = mask.allowed_count();
        Ok((
            out,
            StreamStats {
                kv_projections: n as u64,
                attention_flops: flops(s, c, n),
            },
        ))
    }

    pub fn attend_detached(
        &self,
        step: usize,
        feat: &Tensor,
        w: &AttentionWeights,
        pe: &PeProjections,
    ) -> Result<(Tensor, StreamStats)> {
        check_current(feat, self.feat.positions, w)?;
        self.feat.check_step(step)?;
        if !self.feat.warmup_written(step) {
            return Err(Error::State(format!(
                "streaming at step {step} before its warmup write"
            )));
        }
        let (s, lw, c) = (self.feat.positions, self.feat.warmup, self.feat.channels);
        let mut k = vec![0.0f32; s * (lw + 1) * c];
        let mut v = vec![0.0f32; s * (lw + 1) * c];
        for pos in 0..s {
            for j in 0..=lw {
                let x = if j < lw {
                    self.feat.slot(step, pos, j)
                } else {
                    &feat.data()[pos * c..(pos + 1) * c]
                };
                let r = (pos * (lw + 1) + j) * c..(pos * (lw + 1) + j + 1) * c;
                matvec(w.w_k.data(), c, x, &mut k[r.clone()]);
                matvec(w.w_v.data(), c, x, &mut v[r]);
            }
        }
        let q = project(&w.w_q, feat);
        let mask = MaskRow(vec![true; lw + 1]);
        let at = |p: usize, j: usize| (p * (lw + 1) + j) * c..(p * (lw + 1) + j + 1) * c;
        let out = single_query(s, lw + 1, w, pe, &mask, &q, |p, j| &k[at(p, j)], |p, j| &v[at(p, j)])?;
        Ok((
            out,
            StreamStats {
                kv_projections: (lw + 1) as u64,
                attention_flops: flops(s, c, lw + 1),
            },
        ))
    }
}

/// Per-layer streaming state: cached K/V, or feature history for full
/// recomputation.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerCache {
    Kv(KVCacheBank),
    Recompute(FeatureBank),
}

impl LayerCache {
    pub fn new(
        cached: bool,
        steps: usize,
        positions: usize,
        window: usize,
        channels: usize,
        warmup: usize,
    ) -> Result<Self> {
        Ok(if cached {
            LayerCache::Kv(KVCacheBank::allocate(steps, positions, window, channels, warmup)?)
        } else {
            LayerCache::Recompute(FeatureBank::allocate(steps, positions, window, channels, warmup)?)
        })
    }

    pub fn occupancy(&self, step: usize) -> usize {
        match self {
            LayerCache::Kv(b) => b.occupancy(step),
            LayerCache::Recompute(b) => b.occupancy(step),
        }
    }

    pub fn warmup_written(&self, step: usize) -> bool {
        match self {
            LayerCache::Kv(b) => b.k.warmup_written(step),
            LayerCache::Recompute(b) => b.feat.warmup_written(step),
        }
    }

    /// Record warmup frames (`[S, L_w, C]` layer inputs) for `step`.
    /// Returns the number of frame projections performed.
    pub fn write_warmup_features(&mut self, step: usize, feat: &Tensor, w: &AttentionWeights) -> Result<u64> {
        match self {
            LayerCache::Kv(b) => {
                b.write_warmup(step, &project(&w.w_k, feat), &project(&w.w_v, feat))?;
                Ok(feat.shape()[1] as u64)
            }
            LayerCache::Recompute(b) => {
                b.write_warmup(step, feat)?;
                Ok(0)
            }
        }
    }

    pub fn attend(
        &mut self,
        step: usize,
        feat: &Tensor,
        w: &AttentionWeights,
        mask: &MaskRow,
        pe: &PeProjections,
    ) -> Result<(Tensor, StreamStats)> {
        match self {
            LayerCache::Kv(b) => b.attend_streaming(step, feat, w, mask, pe),
            LayerCache::Recompute(b) => b.attend_recompute(step, feat, w, mask, pe),
        }
    }

    pub fn attend_detached(
        &self,
        step: usize,
        feat: &Tensor,
        w: &AttentionWeights,
        pe: &PeProjections,
    ) -> Result<(Tensor, StreamStats)> {
        match self {
            LayerCache::Kv(b) => b.attend_detached(step, feat, w, pe),
            LayerCache::Recompute(b) => b.attend_detached(step, feat, w, pe),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attend_full, make_positional_encoding, precompute_pe_projections};
    use crate::mask::{build_training_mask, streaming_row_mask, MaskMode};
    use crate::tensor::{gaussian, linear_nobias, RngStream};

    fn entry(value: f32, s: usize, c: usize) -> Tensor {
        Tensor::full(&[s, 1, c], value)
    }

    #[test]
    fn allocate_sizes_and_zero_occupancy() {
        let bank = KVCacheBank::allocate(2, 1, 4, 2, 2).unwrap();
        assert_eq!(bank.keys().data.len(), 16);
        assert_eq!(bank.memory_floats(), 32);
        assert_eq!(bank.occupancy(0), 0);
        assert_eq!(bank.occupancy(1), 0);
        assert!(matches!(KVCacheBank::allocate(2, 1, 4, 2, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn warmup_write_is_exact_isolated_and_once() {
        let mut bank = KVCacheBank::allocate(2, 3, 4, 2, 2).unwrap();
        let mut rng = RngStream::new(1);
        let k = gaussian(&mut rng, &[3, 2, 2]);
        let v = gaussian(&mut rng, &[3, 2, 2]);
        bank.write_warmup(0, &k, &v).unwrap();
        for pos in 0..3 {
            for slot in 0..2 {
                assert_eq!(
                    bank.keys().slot(0, pos, slot),
                    &k.data()[(pos * 2 + slot) * 2..(pos * 2 + slot + 1) * 2]
                );
                assert_eq!(
                    bank.values().slot(0, pos, slot),
                    &v.data()[(pos * 2 + slot) * 2..(pos * 2 + slot + 1) * 2]
                );
            }
        }
        assert!(bank.keys().read_step(1).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(matches!(bank.write_warmup(0, &k, &v), Err(Error::State(_))));
    }

    #[test]
    fn roll_evicts_oldest() {
        let mut bank = KVCacheBank::allocate(1, 1, 4, 1, 2).unwrap();
        assert!(matches!(
            bank.roll_and_write(0, &entry(1.0, 1, 1), &entry(1.0, 1, 1)),
            Err(Error::State(_))
        ));
        bank.write_warmup(0, &Tensor::full(&[1, 2, 1], 9.0), &Tensor::full(&[1, 2, 1], 9.0))
            .unwrap();
        bank.roll_and_write(0, &entry(1.0, 1, 1), &entry(-1.0, 1, 1)).unwrap();
        assert_eq!(bank.occupancy(0), 1);
        assert_eq!(bank.keys().slot(0, 0, 3), &[1.0]);
        for (i, x) in [2.0f32, 3.0].into_iter().enumerate() {
            bank.roll_and_write(0, &entry(x, 1, 1), &entry(-x, 1, 1)).unwrap();
            assert_eq!(bank.occupancy(0), (i + 2).min(2));
        }
        let k = bank.keys().read_step(0).unwrap();
        assert_eq!(k.data(), &[9.0, 9.0, 2.0, 3.0]);
        assert_eq!(bank.values().read_step(0).unwrap().data(), &[9.0, 9.0, -2.0, -3.0]);
    }

    #[test]
    fn warmup_slots_survive_many_rolls() {
        let mut bank = KVCacheBank::allocate(2, 2, 5, 3, 2).unwrap();
        let mut rng = RngStream::new(4);
        for step in 0..2 {
            bank.write_warmup(step, &gaussian(&mut rng, &[2, 2, 3]), &gaussian(&mut rng, &[2, 2, 3]))
                .unwrap();
        }
        let before: Vec<Vec<f32>> = (0..2)
            .flat_map(|st| (0..2).flat_map(move |p| (0..2).map(move |j| (st, p, j))))
            .map(|(st, p, j)| bank.keys().slot(st, p, j).to_vec())
            .collect();
        let other_step = bank.values().read_step(1).unwrap();
        for _ in 0..100 {
            bank.roll_and_write(0, &gaussian(&mut rng, &[2, 1, 3]), &gaussian(&mut rng, &[2, 1, 3]))
                .unwrap();
        }
        let after: Vec<Vec<f32>> = (0..2)
            .flat_map(|st| (0..2).flat_map(move |p| (0..2).map(move |j| (st, p, j))))
            .map(|(st, p, j)| bank.keys().slot(st, p, j).to_vec())
            .collect();
        let bytes = |v: &Vec<Vec<f32>>| v.iter().flatten().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(&before), bytes(&after));
        assert_eq!(bank.values().read_step(1).unwrap(), other_step);
        assert_eq!(bank.occupancy(0), 3);
        assert_eq!(bank.occupancy(1), 0);
    }

    #[test]
    fn occupancy_counts_then_saturates() {
        let mut bank = KVCacheBank::allocate(1, 1, 6, 1, 2).unwrap();
        bank.write_warmup(0, &Tensor::zeros(&[1, 2, 1]), &Tensor::zeros(&[1, 2, 1]))
            .unwrap();
        for n in 1..10 {
            bank.roll_and_write(0, &entry(n as f32, 1, 1), &entry(0.0, 1, 1))
                .unwrap();
            assert_eq!(bank.occupancy(0), n.min(4));
        }
    }

    fn stream_setup(seed: u64, l: usize, lw: usize, c: usize) -> (AttentionWeights, PeProjections) {
        let mut rng = RngStream::new(seed);
        let w = AttentionWeights::random(&mut rng, c, 2, 1.0).unwrap();
        let pe = precompute_pe_projections(&w, &make_positional_encoding(l, c).unwrap()).unwrap();
        let _ = lw;
        (w, pe)
    }

    /// Build the `[S, F, C]` window `[warmup ∥ recent]` and return the last
    /// row of `attend_full` over it.
    fn window_oracle(frames: &[Tensor], lw: usize, recent: usize, w: &AttentionWeights, pe: &PeProjections) -> Tensor {
        let n = frames.len();
        let chosen: Vec<&Tensor> = frames[..lw].iter().chain(&frames[n - recent..]).collect();
        let (s, c) = (frames[0].shape()[0], frames[0].shape()[2]);
        let f = chosen.len();
        let mut data = vec![0.0f32; s * f * c];
        for (t, fr) in chosen.iter().enumerate() {
            for p in 0..s {
                data[(p * f + t) * c..(p * f + t + 1) * c].copy_from_slice(&fr.data()[p * c..(p + 1) * c]);
            }
        }
        let feat = Tensor::new(&[s, f, c], data).unwrap();
        let mask = build_training_mask(MaskMode::UnidirectionalWarmup(lw), f).unwrap();
        let out = attend_full(&feat, w, &mask, pe).unwrap();
        let last: Vec<f32> = (0..s)
            .flat_map(|p| out.data()[(p * f + f - 1) * c..(p * f + f) * c].to_vec())
            .collect();
        Tensor::new(&[s, 1, c], last).unwrap()
    }

    fn warm_bank(bank: &mut KVCacheBank, frames: &[Tensor], lw: usize, w: &AttentionWeights) {
        let (s, c) = (frames[0].shape()[0], frames[0].shape()[2]);
        let mut data = vec![0.0f32; s * lw * c];
        for (t, fr) in frames[..lw].iter().enumerate() {
            for p in 0..s {
                data[(p * lw + t) * c..(p * lw + t + 1) * c].copy_from_slice(&fr.data()[p * c..(p + 1) * c]);
            }
        }
        let warm = Tensor::new(&[s, lw, c], data).unwrap();
        bank.write_warmup(
            0,
            &linear_nobias(&w.w_k, &warm).unwrap(),
            &linear_nobias(&w.w_v, &warm).unwrap(),
        )
        .unwrap();
    }

    #[test]
    fn streaming_matches_window_oracle_through_eviction() {
        let (l, lw, s, c) = (6, 2, 3, 8);
        let (w, pe) = stream_setup(10, l, lw, c);
        let mut rng = RngStream::new(11);
        let frames: Vec<Tensor> = (0..3 * l).map(|_| gaussian(&mut rng, &[s, 1, c])).collect();
        let mut bank = KVCacheBank::allocate(1, s, l, c, lw).unwrap();
        warm_bank(&mut bank, &frames, lw, &w);
        for f in lw..frames.len() {
            let mask = streaming_row_mask(f, l, lw).unwrap();
            let (got, stats) = bank.attend_streaming(0, &frames[f], &w, &mask, &pe).unwrap();
            assert_eq!(stats.kv_projections, 1);
            let recent = (f - lw + 1).min(l - lw);
            let want = window_oracle(&frames[..=f], lw, recent, &w, &pe);
            assert!(
                got.max_abs_diff(&want) <= 1e-5,
                "frame {f}: {}",
                got.max_abs_diff(&want)
            );
        }
    }

    #[test]
    fn degenerate_single_recent_slot() {
        let (l, lw, s, c) = (4, 3, 2, 4);
        let (w, pe) = stream_setup(20, l, lw, c);
        let mut rng = RngStream::new(21);
        let frames: Vec<Tensor> = (0..8).map(|_| gaussian(&mut rng, &[s, 1, c])).collect();
        let mut bank = KVCacheBank::allocate(1, s, l, c, lw).unwrap();
        warm_bank(&mut bank, &frames, lw, &w);
        for f in lw..8 {
            let mask = streaming_row_mask(f, l, lw).unwrap();
            assert_eq!(mask.allowed_count(), l);
            let (got, _) = bank.attend_streaming(0, &frames[f], &w, &mask, &pe).unwrap();
            let want = window_oracle(&frames[..=f], lw, 1, &w, &pe);
            assert!(got.max_abs_diff(&want) <= 1e-5);
        }
    }

    #[test]
    fn cached_entries_plus_pe_equal_direct_projection() {
        let (l, lw, s, c) = (5, 2, 2, 4);
        let (w, pe) = stream_setup(30, l, lw, c);
        let table = make_positional_encoding(l, c).unwrap();
        let mut rng = RngStream::new(31);
        let frames: Vec<Tensor> = (0..7).map(|_| gaussian(&mut rng, &[s, 1, c])).collect();
        let mut bank = KVCacheBank::allocate(1, s, l, c, lw).unwrap();
        warm_bank(&mut bank, &frames, lw, &w);
        for f in lw..7 {
            let mask = streaming_row_mask(f, l, lw).unwrap();
            bank.attend_streaming(0, &frames[f], &w, &mask, &pe).unwrap();
        }
        // Window is now warmup frames 0,1 and recent frames 4,5,6.
        let mask = streaming_row_mask(6, l, lw).unwrap();
        let idx = pe_index_compaction(&mask);
        let slot_frames = [0usize, 1, 4, 5, 6];
        for (j, &fr) in slot_frames.iter().enumerate() {
            for p in 0..s {
                let mut cached = bank.keys().slot(0, p, j).to_vec();
                add_row(&mut cached, PeProjections::row(&pe.k, idx[j]));
                let x: Vec<f32> = (0..c)
                    .map(|ch| frames[fr].data()[p * c + ch] + table.table().data()[idx[j] * c + ch])
                    .collect();
                let direct = linear_nobias(&w.w_k, &Tensor::new(&[c], x).unwrap()).unwrap();
                for (a, b) in cached.iter().zip(direct.data()) {
                    assert!((a - b).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn mask_referencing_empty_slot_is_rejected_without_mutation() {
        let (l, lw, s, c) = (6, 2, 1, 4);
        let (w, pe) = stream_setup(40, l, lw, c);
        let mut bank = KVCacheBank::allocate(1, s, l, c, lw).unwrap();
        bank.write_warmup(0, &Tensor::zeros(&[s, lw, c]), &Tensor::zeros(&[s, lw, c]))
            .unwrap();
        let saturated = streaming_row_mask(100, l, lw).unwrap();
        let before = bank.clone();
        let feat = Tensor::full(&[s, 1, c], 0.5);
        assert!(matches!(
            bank.attend_streaming(0, &feat, &w, &saturated, &pe),
            Err(Error::Consistency(_))
        ));
        assert_eq!(bank, before);
        let no_self = MaskRow(vec![true, true, false, false, false, false]);
        assert!(matches!(
            bank.attend_streaming(0, &feat, &w, &no_self, &pe),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn recompute_bank_matches_cached_bank() {
        let (l, lw, s, c) = (5, 2, 3, 8);
        let (w, pe) = stream_setup(50, l, lw, c);
        let mut rng = RngStream::new(51);
        let frames: Vec<Tensor> = (0..12).map(|_| gaussian(&mut rng, &[s, 1, c])).collect();
        let mut cached = LayerCache::new(true, 1, s, l, c, lw).unwrap();
        let mut recompute = LayerCache::new(false, 1, s, l, c, lw).unwrap();
        let mut warm = vec![0.0f32; s * lw * c];
        for t in 0..lw {
            for p in 0..s {
                warm[(p * lw + t) * c..(p * lw + t + 1) * c].copy_from_slice(&frames[t].data()[p * c..(p + 1) * c]);
            }
        }
        let warm = Tensor::new(&[s, lw, c], warm).unwrap();
        assert_eq!(cached.write_warmup_features(0, &warm, &w).unwrap(), lw as u64);
        recompute.write_warmup_features(0, &warm, &w).unwrap();
        for f in lw..12 {
            let mask = streaming_row_mask(f, l, lw).unwrap();
            let (a, sa) = cached.attend(0, &frames[f], &w, &mask, &pe).unwrap();
            let (b, sb) = recompute.attend(0, &frames[f], &w, &mask, &pe).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-6);
            assert_eq!(sa.kv_projections, 1);
            assert_eq!(sb.kv_projections, mask.allowed_count() as u64);
            let (da, _) = cached.attend_detached(0, &frames[f], &w, &pe).unwrap();
            let (db, _) = recompute.attend_detached(0, &frames[f], &w, &pe).unwrap();
            assert!(da.max_abs_diff(&db) <= 1e-6);
        }
    }

    #[test]
    fn detached_attention_equals_warmup_plus_self_window() {
        let (l, lw, s, c) = (6, 3, 2, 4);
        let (w, pe) = stream_setup(60, l, lw, c);
        let mut rng = RngStream::new(61);
        let frames: Vec<Tensor> = (0..4).map(|_| gaussian(&mut rng, &[s, 1, c])).collect();
        let mut bank = KVCacheBank::allocate(1, s, l, c, lw).unwrap();
        warm_bank(&mut bank, &frames, lw, &w);
        let before = bank.clone();
        let (got, _) = bank.attend_detached(0, &frames[3], &w, &pe).unwrap();
        assert_eq!(bank, before);
        let want = window_oracle(&frames, lw, 1, &w, &pe);
        assert!(got.max_abs_diff(&want) <= 1e-5);
    }

    #[test]
    fn dump_round_trip() {
        let mut bank = KVCacheBank::allocate(2, 2, 3, 2, 1).unwrap();
        let mut rng = RngStream::new(70);
        bank.write_warmup(1, &gaussian(&mut rng, &[2, 1, 2]), &gaussian(&mut rng, &[2, 1, 2]))
            .unwrap();
        let mut buf = Vec::new();
        bank.dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 20 + 2 * 24 * 4);
        assert_eq!(&buf[..4], &2u32.to_le_bytes());
        let back = KVCacheBank::load(buf.as_slice()).unwrap();
        assert_eq!(back.keys().read_step(1).unwrap(), bank.keys().read_step(1).unwrap());
        assert_eq!(back.values().read_step(1).unwrap(), bank.values().read_step(1).unwrap());
        assert!(matches!(
            KVCacheBank::load(&buf[..30]),
            Err(Error::Format { offset: 28, .. })
        ));
    }
}
