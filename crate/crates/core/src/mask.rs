//! Temporal attention masks.
//!
//! Four geometries are supported: bidirectional chunks, overlapping sliding
//! chunks, plain causal attention and causal attention with a bidirectional
//! warmup block. Each can be built either as the `L×L` mask a model sees on
//! one training window, or as the `F×F` visibility pattern it induces over a
//! whole stream. Streaming inference works one query row at a time against a
//! cache whose slots are laid out warmup-first, newest-last.

use crate::error::{param_err, Error, Result};

/// Boolean query×key matrix; `true` means the key may be attended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn all_allowed(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Build from per-row flags. Every row must allow at least one key.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut allowed = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "mask row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            if !r.iter().any(|&a| a) {
                return Err(Error::Domain(format!("mask row {i} blocks every key")));
            }
            allowed.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            allowed,
        })
    }

    fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let rows: Vec<Vec<bool>> = (0..rows).map(|i| (0..cols).map(|j| f(i, j)).collect()).collect();
        Self::from_rows(&rows)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    /// Additive encoding: `0.0` where attended, `-inf` where blocked.
    pub fn to_additive(&self) -> Vec<f32> {
        self.allowed.iter().map(|&a| additive(a)).collect()
    }

    /// Render rows as `1`/`0` strings, e.g. `["1100", "1110"]`.
    pub fn to_bit_rows(&self) -> Vec<String> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|&a| if a { '1' } else { '0' }).collect())
            .collect()
    }
}

fn additive(allowed: bool) -> f32 {
    if allowed {
        0.0
    } else {
        f32::NEG_INFINITY
    }
}

/// One query row over the `L` cache slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRow(pub Vec<bool>);

impl MaskRow {
    /// Parse the additive form (`0` attend, `-inf` blocked).
    pub fn from_additive(values: &[f32]) -> Self {
        Self(values.iter().map(|&v| v == 0.0).collect())
    }

    pub fn to_additive(&self) -> Vec<f32> {
        self.0.iter().map(|&a| additive(a)).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn allowed_count(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// Temporal mask geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Full attention inside non-overlapping chunks of `L` frames.
    BidirectionalChunk,
    /// Full attention inside chunks that overlap by the given number of frames.
    SlidingOverlap(usize),
    /// Causal attention over the last `L` frames.
    Unidirectional,
    /// Causal attention plus a bidirectional block of the given number of
    /// warmup frames that every later frame also sees.
    UnidirectionalWarmup(usize),
}

impl MaskMode {
    fn validate(self, window: usize) -> Result<()> {
        if window == 0 {
            return param_err("window length must be at least 1");
        }
        match self {
            MaskMode::SlidingOverlap(ls) if ls == 0 || ls >= window => {
                param_err(format!("overlap must satisfy 0 < L_s < L (L_s={ls}, L={window})"))
            }
            MaskMode::UnidirectionalWarmup(lw) if lw == 0 || lw >= window => {
                param_err(format!("warmup must satisfy 1 <= L_w < L (L_w={lw}, L={window})"))
            }
            _ => Ok(()),
        }
    }
}

/// The `L×L` mask applied to one training window.
///
/// Both chunked geometries are unmasked inside a window; they differ only in
/// how windows are laid over a longer stream (see [`build_stream_mask`]).
pub fn build_training_mask(mode: MaskMode, window: usize) -> Result<AttentionMask> {
    mode.validate(window)?;
    match mode {
        MaskMode::BidirectionalChunk | MaskMode::SlidingOverlap(_) => Ok(AttentionMask::all_allowed(window, window)),
        MaskMode::Unidirectional => AttentionMask::from_fn(window, window, |i, j| j <= i),
        MaskMode::UnidirectionalWarmup(lw) => {
            AttentionMask::from_fn(window, window, |i, j| j < lw || (i >= lw && j <= i))
        }
    }
}

/// `F×F` visibility over a stream: entry `(i, j)` is set when the output for
/// frame `i` reads frame `j` directly in some window.
pub fn build_stream_mask(mode: MaskMode, frames: usize, window: usize) -> Result<AttentionMask> {
    mode.validate(window)?;
    match mode {
        MaskMode::BidirectionalChunk => AttentionMask::from_fn(frames, frames, |i, j| i / window == j / window),
        MaskMode::SlidingOverlap(ls) => {
            let plan = sliding_window_plan(frames, window, ls)?;
            AttentionMask::from_fn(frames, frames, |i, j| {
                plan.iter().any(|c| c.contains(i) && c.contains(j))
            })
        }
        MaskMode::Unidirectional => AttentionMask::from_fn(frames, frames, |i, j| j <= i && i - j < window),
        MaskMode::UnidirectionalWarmup(lw) => AttentionMask::from_fn(frames, frames, |i, j| {
            if i < lw {
                j < lw
            } else {
                j < lw || (j >= lw && j <= i && i - j < window - lw)
            }
        }),
    }
}

/// Mask row for frame `frame_index` in the streaming phase.
///
/// Slot layout: `[0, L_w)` warmup, `[L_w, L)` recent frames with the current
/// frame in slot `L-1`.
pub fn streaming_row_mask(frame_index: usize, window: usize, warmup: usize) -> Result<MaskRow> {
    MaskMode::UnidirectionalWarmup(warmup).validate(window)?;
    if frame_index < warmup {
        return Err(Error::State(format!(
            "frame {frame_index} is a warmup frame (L_w={warmup}); use the training mask"
        )));
    }
    let recent = (frame_index - warmup + 1).min(window - warmup);
    Ok(MaskRow(
        (0..window).map(|j| j < warmup || j >= window - recent).collect(),
    ))
}

/// Positional index for each slot: the rank of the slot among allowed slots.
/// Blocked slots repeat the previous rank. The query uses the final entry.
pub fn pe_index_compaction(row: &MaskRow) -> Vec<usize> {
    let mut count = 0usize;
    row.0
        .iter()
        .map(|&a| {
            if a {
                count += 1;
            }
            count.saturating_sub(1)
        })
        .collect()
}

/// One window of a sliding-overlap plan.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowChunk {
    pub start: usize,
    pub len: usize,
    /// Weight for each frame of the chunk when fusing overlapping outputs.
    pub weights: Vec<f32>,
}

impl WindowChunk {
    pub fn contains(&self, frame: usize) -> bool {
        frame >= self.start && frame < self.start + self.len
    }
}

/// Lay windows of length `window` over `frames` frames with stride
/// `window - overlap`, adding a final window flush with the end of the
/// stream when the stride does not land there. Overlapping frames are fused
/// by uniform averaging.
pub fn sliding_window_plan(frames: usize, window: usize, overlap: usize) -> Result<Vec<WindowChunk>> {
    if window == 0 || window > frames {
        return param_err(format!("need 0 < L <= F (L={window}, F={frames})"));
    }
    if overlap == 0 || overlap >= window {
        return param_err(format!(
            "need 0 < L_s < L for a sliding plan (L_s={overlap}, L={window})"
        ));
    }
    let stride = window - overlap;
    let mut starts: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&s| s + window <= frames)
        .collect();
    if starts.last().is_none_or(|&s| s + window < frames) {
        starts.push(frames - window);
    }
    let mut coverage = vec![0usize; frames];
    for &s in &starts {
        for c in &mut coverage[s..s + window] {
            *c += 1;
        }
    }
    Ok(starts
        .into_iter()
        .map(|start| WindowChunk {
            start,
            len: window,
            weights: (start..start + window).map(|f| 1.0 / coverage[f] as f32).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(m: &AttentionMask) -> Vec<String> {
        m.to_bit_rows()
    }

    #[test]
    fn unidirectional_l4() {
        let m = build_training_mask(MaskMode::Unidirectional, 4).unwrap();
        assert_eq!(bits(&m), ["1000", "1100", "1110", "1111"]);
    }

    #[test]
    fn warmup_l4_lw2() {
        let m = build_training_mask(MaskMode::UnidirectionalWarmup(2), 4).unwrap();
        assert_eq!(bits(&m), ["1100", "1100", "1110", "1111"]);
    }

    #[test]
    fn bidirectional_l3() {
        let m = build_training_mask(MaskMode::BidirectionalChunk, 3).unwrap();
        assert_eq!(bits(&m), ["111", "111", "111"]);
    }

    #[test]
    fn warmup_must_be_shorter_than_window() {
        assert!(matches!(
            build_training_mask(MaskMode::UnidirectionalWarmup(4), 4),
            Err(Error::Parameter(_))
        ));
        assert!(build_training_mask(MaskMode::UnidirectionalWarmup(0), 4).is_err());
    }

    #[test]
    fn streaming_rows_from_listing_example() {
        // 2 recent frames present, then 1 recent frame.
        let two = streaming_row_mask(5, 8, 4).unwrap();
        let inf = f32::NEG_INFINITY;
        assert_eq!(two.to_additive(), [0., 0., 0., 0., inf, inf, 0., 0.]);
        let one = streaming_row_mask(4, 8, 4).unwrap();
        assert_eq!(one.to_additive(), [0., 0., 0., 0., inf, inf, inf, 0.]);
        for f in 7..12 {
            assert_eq!(streaming_row_mask(f, 8, 4).unwrap().allowed_count(), 8);
        }
    }

    #[test]
    fn streaming_row_rejects_warmup_frames() {
        assert!(matches!(streaming_row_mask(3, 8, 4), Err(Error::State(_))));
    }

    #[test]
    fn compaction_listing_example() {
        let inf = f32::NEG_INFINITY;
        let a = MaskRow::from_additive(&[0., 0., 0., 0., inf, inf, 0., 0.]);
        assert_eq!(pe_index_compaction(&a), [0, 1, 2, 3, 3, 3, 4, 5]);
        let b = MaskRow::from_additive(&[0., 0., 0., 0., inf, inf, inf, 0.]);
        assert_eq!(pe_index_compaction(&b), [0, 1, 2, 3, 3, 3, 3, 4]);
        let c = MaskRow(vec![true; 4]);
        assert_eq!(pe_index_compaction(&c), [0, 1, 2, 3]);
    }

    #[test]
    fn saturated_streaming_row_matches_last_training_row() {
        for window in 2..=16 {
            for warmup in 1..window {
                let last = build_training_mask(MaskMode::UnidirectionalWarmup(warmup), window)
                    .unwrap()
                    .row(window - 1)
                    .to_vec();
                let row = streaming_row_mask(window + 3, window, warmup).unwrap();
                assert_eq!(row.0, last);
            }
        }
    }

    #[test]
    fn compaction_is_rank_on_allowed_slots() {
        let row = MaskRow(vec![true, false, true, true, false, false, true]);
        let idx = pe_index_compaction(&row);
        let ranks: Vec<usize> = idx.iter().zip(&row.0).filter(|(_, &a)| a).map(|(&i, _)| i).collect();
        assert_eq!(ranks, [0, 1, 2, 3]);
        assert_eq!(*idx.last().unwrap(), row.allowed_count() - 1);
    }

    #[test]
    fn sliding_plan_f8_l4_ls2() {
        let plan = sliding_window_plan(8, 4, 2).unwrap();
        let starts: Vec<usize> = plan.iter().map(|c| c.start).collect();
        assert_eq!(starts, [0, 2, 4]);
        for f in 0..8 {
            let w: f32 = plan
                .iter()
                .filter(|c| c.contains(f))
                .map(|c| c.weights[f - c.start])
                .sum();
            assert!((w - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sliding_plan_adds_tail_window() {
        let plan = sliding_window_plan(9, 4, 1).unwrap();
        let starts: Vec<usize> = plan.iter().map(|c| c.start).collect();
        assert_eq!(starts, [0, 3, 5]);
    }

    #[test]
    fn sliding_plan_errors_and_degenerate() {
        assert!(matches!(sliding_window_plan(8, 4, 0), Err(Error::Parameter(_))));
        assert!(sliding_window_plan(8, 4, 4).is_err());
        assert!(sliding_window_plan(3, 4, 1).is_err());
        let single = sliding_window_plan(4, 4, 1).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].weights, vec![1.0; 4]);
    }
}
