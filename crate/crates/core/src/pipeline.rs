//! Live inference engine.
//!
//! The first `L_w` frames are collected and denoised together with
//! bidirectional attention, which also records their keys and values. From
//! then on every ingested frame is noised to its start step and joins a
//! queue of in-flight latents, one per remaining denoising step. A single
//! batched denoiser call advances the whole queue by one step and the
//! oldest latent leaves it fully denoised, so one frame goes in and one
//! comes out per call.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::denoiser::{structure_map, ForwardStats, LatentCodec, StreamCache, StreamSlot, Temporal, ToyDenoiser};
use crate::diffusion::{add_noise, denoise_step, make_schedule, Schedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN};
use crate::error::{dim_err, param_err, Error, Result};
use crate::mask::{sliding_window_plan, AttentionMask, WindowChunk};
use crate::tensor::{gaussian, RngStream, Tensor};

/// Seed offset separating placeholder noise from per-frame noise.
const PLACEHOLDER_DOMAIN: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub window: usize,
    pub warmup: usize,
    pub steps: usize,
    pub strength: f64,
    pub style: usize,
    pub cond: bool,
    pub cache: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: 16,
            warmup: 8,
            steps: 4,
            strength: 0.5,
            style: 0,
            cond: true,
            cache: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 || self.warmup >= self.window {
            return param_err(format!(
                "need 1 <= warmup < window (warmup={}, window={})",
                self.warmup, self.window
            ));
        }
        if self.steps == 0 {
            return param_err("steps must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return param_err(format!("strength {} outside [0, 1]", self.strength));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    CollectingWarmup,
    Warmup,
    Streaming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Live2Diff,
    Live2DiffNoCache,
    PerFrame,
    Chunked,
    /// Overlapping windows sharing this many frames with their neighbour;
    /// `None` means half the window.
    Sliding(Option<usize>),
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "live2diff" => Mode::Live2Diff,
            "live2diff_nocache" => Mode::Live2DiffNoCache,
            "perframe" => Mode::PerFrame,
            "chunked" => Mode::Chunked,
            "sliding" => Mode::Sliding(None),
            other => return Err(Error::Parameter(format!("unknown mode '{other}'"))),
        })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Live2Diff => "live2diff",
            Mode::Live2DiffNoCache => "live2diff_nocache",
            Mode::PerFrame => "perframe",
            Mode::Chunked => "chunked",
            Mode::Sliding(_) => "sliding",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Int(u64),
    Real(f64),
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Int(v) => write!(f, "{v}"),
            Metric::Real(v) => write!(f, "{v:.6}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpCounters {
    /// Real frames passed to `ingest`.
    pub frames_ingested: u64,
    pub frames_emitted: u64,
    /// K/V frame projections for real frames after warmup.
    pub kv_projection_count: u64,
    pub warmup_kv_projections: u64,
    pub placeholder_kv_projections: u64,
    pub attention_flop_estimate: u64,
    /// Denoiser calls made by `ingest` (or by a baseline mode).
    pub denoiser_calls: u64,
    pub warmup_calls: u64,
    /// Calls made while draining the pipeline at end of stream.
    pub flush_calls: u64,
    /// Seconds from a frame's arrival to the return of its output.
    pub frame_latency: Vec<f64>,
    /// Seconds per denoiser call.
    pub call_latency: Vec<f64>,
}

impl OpCounters {
    fn add_forward(&mut self, s: &ForwardStats) {
        self.kv_projection_count += s.kv_projections;
        self.warmup_kv_projections += s.warmup_kv_projections;
        self.placeholder_kv_projections += s.placeholder_kv_projections;
        self.attention_flop_estimate += s.attention_flops;
    }

    pub fn to_map(&self) -> BTreeMap<&'static str, Metric> {
        let (fm, fs) = mean_std(&self.frame_latency);
        let (cm, cs) = mean_std(&self.call_latency);
        BTreeMap::from([
            ("frames_ingested", Metric::Int(self.frames_ingested)),
            ("frames_emitted", Metric::Int(self.frames_emitted)),
            ("kv_projection_count", Metric::Int(self.kv_projection_count)),
            ("warmup_kv_projections", Metric::Int(self.warmup_kv_projections)),
            (
                "placeholder_kv_projections",
                Metric::Int(self.placeholder_kv_projections),
            ),
            ("attention_flop_estimate", Metric::Int(self.attention_flop_estimate)),
            ("denoiser_calls", Metric::Int(self.denoiser_calls)),
            ("warmup_calls", Metric::Int(self.warmup_calls)),
            ("flush_calls", Metric::Int(self.flush_calls)),
            ("frame_latency_mean_s", Metric::Real(fm)),
            ("frame_latency_std_s", Metric::Real(fs)),
            ("call_latency_mean_s", Metric::Real(cm)),
            ("call_latency_std_s", Metric::Real(cs)),
        ])
    }
}

/// Population mean and standard deviation; zeros for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// `0.0600s (±0.0200)`.
pub fn format_mean_std(xs: &[f64]) -> String {
    let (m, s) = mean_std(xs);
    format!("{m:.4}s (±{s:.4})")
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputFrame {
    pub index: usize,
    pub frame: Tensor,
    /// Denoising steps this frame went through.
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRecord {
    pub index: usize,
    pub start_step: usize,
    pub steps: usize,
}

#[derive(Debug, Clone)]
struct InFlight {
    latent: Tensor,
    /// Next inference step to apply.
    step: usize,
    frame: Option<usize>,
    cond: Option<Tensor>,
    steps_done: usize,
    arrived: Instant,
}

#[derive(Debug, Clone)]
struct Prepared {
    latent: Tensor,
    cond: Option<Tensor>,
    start: usize,
}

#[derive(Debug)]
pub struct PipelineState<'m> {
    model: &'m ToyDenoiser,
    sched: Schedule,
    codec: LatentCodec,
    cfg: PipelineConfig,
    start: usize,
    phase: Phase,
    collected: Vec<(Tensor, Instant)>,
    in_flight: VecDeque<InFlight>,
    cache: StreamCache,
    next_frame: usize,
    placeholders: u64,
    counters: OpCounters,
    step_log: Vec<StepRecord>,
}

impl<'m> PipelineState<'m> {
    pub fn new(model: &'m ToyDenoiser, codec: LatentCodec, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mc = model.config();
        if codec.grid_height != mc.grid_height || codec.grid_width != mc.grid_width {
            return param_err("codec grid does not match the model grid");
        }
        if cfg.cond && mc.cond_channels != 1 {
            return param_err(format!(
                "structure conditioning is single-channel, model expects {}",
                mc.cond_channels
            ));
        }
        if cfg.style >= mc.n_styles {
            return param_err(format!("style {} out of range for {} styles", cfg.style, mc.n_styles));
        }
        let sched = make_schedule(mc.n_train_steps, cfg.steps, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)?;
        let start = sched.start_step(cfg.strength);
        let cache = StreamCache::new(model, cfg.steps, cfg.window, cfg.warmup, cfg.cache)?;
        Ok(Self {
            model,
            sched,
            codec,
            cfg,
            start,
            phase: Phase::CollectingWarmup,
            collected: Vec::new(),
            in_flight: VecDeque::new(),
            cache,
            next_frame: 0,
            placeholders: 0,
            counters: OpCounters::default(),
            step_log: Vec::new(),
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &Schedule {
        &self.sched
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    pub fn cache(&self) -> &StreamCache {
        &self.cache
    }

    pub fn step_log(&self) -> &[StepRecord] {
        &self.step_log
    }

    /// Denoising steps each frame goes through.
    pub fn depth(&self) -> usize {
        self.cfg.steps - self.start
    }

    pub fn start_step(&self) -> usize {
        self.start
    }

    /// `(next step, is real)` for every in-flight latent, oldest first.
    pub fn in_flight(&self) -> Vec<(usize, bool)> {
        self.in_flight.iter().map(|x| (x.step, x.frame.is_some())).collect()
    }

    /// Feed one frame, collecting warmup frames first. Returns every output
    /// that became ready.
    pub fn push(&mut self, frame: &Tensor) -> Result<Vec<OutputFrame>> {
        match self.phase {
            Phase::CollectingWarmup => {
                self.collected.push((frame.clone(), Instant::now()));
                if self.collected.len() < self.cfg.warmup {
                    return Ok(Vec::new());
                }
                let (frames, arrived): (Vec<_>, Vec<_>) = std::mem::take(&mut self.collected).into_iter().unzip();
                self.run_warmup(&frames, &arrived)
            }
            Phase::Streaming => Ok(self.ingest(frame)?.into_iter().collect()),
            Phase::Warmup => Err(Error::State("pipeline is mid-warmup".into())),
        }
    }

    /// Denoise the `L_w` warmup frames completely and record their keys and
    /// values for every step.
    pub fn warmup(&mut self, frames: &[Tensor]) -> Result<Vec<OutputFrame>> {
        if self.phase != Phase::CollectingWarmup || !self.collected.is_empty() {
            return Err(Error::State("warmup called out of phase".into()));
        }
        let now = Instant::now();
        self.run_warmup(frames, &vec![now; frames.len()])
    }

    fn run_warmup(&mut self, frames: &[Tensor], arrived: &[Instant]) -> Result<Vec<OutputFrame>> {
        if frames.len() != self.cfg.warmup {
            return dim_err(format!("warmup needs {} frames, got {}", self.cfg.warmup, frames.len()));
        }
        self.phase = Phase::Warmup;
        let prepared = frames
            .iter()
            .enumerate()
            .map(|(i, f)| self.prepare(f, i))
            .collect::<Result<Vec<_>>>()?;
        let mut z = stack_latents(prepared.iter().map(|p| &p.latent))?;
        let cond = self.stack_cond(prepared.iter().map(|p| p.cond.as_ref()))?;
        for k in self.start..self.cfg.steps {
            let t0 = Instant::now();
            let t = vec![self.sched.train_step(k); frames.len()];
            let (eps, st) = self.model.forward(
                &z,
                &t,
                self.cfg.style,
                cond.as_ref(),
                &self.sched,
                Temporal::Warmup {
                    cache: &mut self.cache,
                    step: k,
                },
            )?;
            z = denoise_step(&z, &eps, k, &self.sched)?;
            self.counters.add_forward(&st);
            self.counters.warmup_calls += 1;
            self.counters.call_latency.push(t0.elapsed().as_secs_f64());
        }
        let mut out = Vec::with_capacity(frames.len());
        for i in 0..frames.len() {
            out.push(self.emit(i, z.slab(i)?, self.depth(), arrived[i])?);
        }
        self.next_frame = frames.len();
        for j in (1..self.depth()).rev() {
            let p = self.placeholder(self.start + j);
            self.in_flight.push_back(p);
        }
        self.phase = Phase::Streaming;
        Ok(out)
    }

    /// Admit one frame and advance every in-flight latent by one step.
    pub fn ingest(&mut self, frame: &Tensor) -> Result<Option<OutputFrame>> {
        if self.phase != Phase::Streaming {
            return Err(Error::State("ingest before warmup completed".into()));
        }
        let arrived = Instant::now();
        let index = self.next_frame;
        let p = self.prepare(frame, index)?;
        self.next_frame += 1;
        self.counters.frames_ingested += 1;
        if self.depth() == 0 {
            return self.emit(index, p.latent, 0, arrived).map(Some);
        }
        self.in_flight.push_back(InFlight {
            latent: p.latent,
            step: p.start,
            frame: Some(index),
            cond: p.cond,
            steps_done: 0,
            arrived,
        });
        self.counters.denoiser_calls += 1;
        self.advance()
    }

    /// Drain the pipeline with placeholder frames and return the remaining
    /// real outputs. Frames still waiting for warmup are denoised together
    /// with bidirectional attention.
    pub fn flush(&mut self) -> Result<Vec<OutputFrame>> {
        let mut out = Vec::new();
        match self.phase {
            Phase::CollectingWarmup if !self.collected.is_empty() => {
                let (frames, arrived): (Vec<_>, Vec<_>) = std::mem::take(&mut self.collected).into_iter().unzip();
                let z = self.denoise_batch(&frames, 0, false)?;
                for (i, zi) in z.into_iter().enumerate() {
                    out.push(self.emit(i, zi, self.depth(), arrived[i])?);
                }
                self.next_frame = frames.len();
            }
            Phase::Streaming => {
                while self.in_flight.iter().any(|x| x.frame.is_some()) {
                    let p = self.placeholder(self.start);
                    self.in_flight.push_back(p);
                    self.counters.flush_calls += 1;
                    out.extend(self.advance()?);
                }
            }
            _ => {}
        }
        Ok(out)
    }

    /// One batched call over the queue; pops the oldest latent if done.
    fn advance(&mut self) -> Result<Option<OutputFrame>> {
        let t0 = Instant::now();
        let z = stack_latents(self.in_flight.iter().map(|x| &x.latent))?;
        let cond = self.stack_cond(self.in_flight.iter().map(|x| x.cond.as_ref()))?;
        let t: Vec<usize> = self.in_flight.iter().map(|x| self.sched.train_step(x.step)).collect();
        let slots: Vec<StreamSlot> = self
            .in_flight
            .iter()
            .map(|x| StreamSlot {
                step: x.step,
                frame_index: x.frame,
            })
            .collect();
        let (eps, st) = self.model.forward(
            &z,
            &t,
            self.cfg.style,
            cond.as_ref(),
            &self.sched,
            Temporal::Stream {
                cache: &mut self.cache,
                slots: &slots,
            },
        )?;
        self.counters.add_forward(&st);
        for (i, x) in self.in_flight.iter_mut().enumerate() {
            x.latent = denoise_step(&x.latent, &eps.slab(i)?, x.step, &self.sched)?;
            x.step += 1;
            x.steps_done += 1;
        }
        self.counters.call_latency.push(t0.elapsed().as_secs_f64());
        if self.in_flight.front().is_some_and(|x| x.step == self.cfg.steps) {
            let done = self.in_flight.pop_front().expect("non-empty");
            if let Some(index) = done.frame {
                return self.emit(index, done.latent, done.steps_done, done.arrived).map(Some);
            }
        }
        Ok(None)
    }

    fn emit(&mut self, index: usize, latent: Tensor, steps: usize, arrived: Instant) -> Result<OutputFrame> {
        let frame = self.codec.decode(&latent)?;
        self.counters.frames_emitted += 1;
        self.counters.frame_latency.push(arrived.elapsed().as_secs_f64());
        self.step_log.push(StepRecord {
            index,
            start_step: self.start,
            steps,
        });
        Ok(OutputFrame { index, frame, steps })
    }

    fn prepare(&self, frame: &Tensor, index: usize) -> Result<Prepared> {
        let z0 = self.codec.encode(frame)?;
        let cond = if self.cfg.cond {
            let mc = self.model.config();
            Some(structure_map(frame, mc.grid_height, mc.grid_width)?)
        } else {
            None
        };
        let mut rng = RngStream::substream(self.cfg.seed, index as u64);
        let noised = add_noise(&z0, self.cfg.strength, &self.sched, &mut rng)?;
        Ok(Prepared {
            latent: noised.latent,
            cond,
            start: noised.start_step,
        })
    }

    fn placeholder(&mut self, step: usize) -> InFlight {
        let mc = self.model.config();
        let mut rng = RngStream::substream(self.cfg.seed.wrapping_add(PLACEHOLDER_DOMAIN), self.placeholders);
        self.placeholders += 1;
        InFlight {
            latent: gaussian(&mut rng, &[mc.positions(), mc.latent_channels]),
            step,
            frame: None,
            cond: None,
            steps_done: 0,
            arrived: Instant::now(),
        }
    }

    /// `[B, S, C_cond]`, zeros for latents without a map; `None` when
    /// conditioning is off.
    fn stack_cond<'a>(&self, conds: impl Iterator<Item = Option<&'a Tensor>>) -> Result<Option<Tensor>> {
        if !self.cfg.cond {
            return Ok(None);
        }
        let mc = self.model.config();
        let zero = Tensor::zeros(&[mc.positions(), mc.cond_channels]);
        let items: Vec<Tensor> = conds.map(|c| c.cloned().unwrap_or_else(|| zero.clone())).collect();
        Tensor::stack(&items).map(Some)
    }

    /// Fully denoise `frames` (stream indices from `first`) as one batch,
    /// with bidirectional temporal attention or none at all.
    fn denoise_batch(&mut self, frames: &[Tensor], first: usize, independent: bool) -> Result<Vec<Tensor>> {
        let prepared = frames
            .iter()
            .enumerate()
            .map(|(i, f)| self.prepare(f, first + i))
            .collect::<Result<Vec<_>>>()?;
        let mut z = stack_latents(prepared.iter().map(|p| &p.latent))?;
        let cond = self.stack_cond(prepared.iter().map(|p| p.cond.as_ref()))?;
        let mask = AttentionMask::all_allowed(frames.len(), frames.len());
        for k in self.start..self.cfg.steps {
            let t0 = Instant::now();
            let t = vec![self.sched.train_step(k); frames.len()];
            let temporal = if independent {
                Temporal::Off
            } else {
                Temporal::Batch(&mask)
            };
            let (eps, st) = self
                .model
                .forward(&z, &t, self.cfg.style, cond.as_ref(), &self.sched, temporal)?;
            z = denoise_step(&z, &eps, k, &self.sched)?;
            self.counters.add_forward(&st);
            self.counters.denoiser_calls += 1;
            self.counters.call_latency.push(t0.elapsed().as_secs_f64());
        }
        (0..frames.len()).map(|i| z.slab(i)).collect()
    }

    /// Denoise one post-warmup frame to completion on its own, reading and
    /// writing the caches exactly as the pipelined path does.
    fn denoise_alone(&mut self, frame: &Tensor) -> Result<OutputFrame> {
        let arrived = Instant::now();
        let index = self.next_frame;
        let p = self.prepare(frame, index)?;
        self.next_frame += 1;
        self.counters.frames_ingested += 1;
        let mut z = p
            .latent
            .reshape(&[1, self.model.config().positions(), self.model.config().latent_channels])?;
        let cond = self.stack_cond(std::iter::once(p.cond.as_ref()))?;
        for k in self.start..self.cfg.steps {
            let slots = [StreamSlot {
                step: k,
                frame_index: Some(index),
            }];
            let (eps, st) = self.model.forward(
                &z,
                &[self.sched.train_step(k)],
                self.cfg.style,
                cond.as_ref(),
                &self.sched,
                Temporal::Stream {
                    cache: &mut self.cache,
                    slots: &slots,
                },
            )?;
            z = denoise_step(&z, &eps, k, &self.sched)?;
            self.counters.add_forward(&st);
            self.counters.denoiser_calls += 1;
        }
        let latent = z.slab(0)?;
        self.emit(index, latent, self.depth(), arrived)
    }
}

fn stack_latents<'a>(items: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let v: Vec<Tensor> = items.cloned().collect();
    Tensor::stack(&v)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub frames: Vec<Tensor>,
    pub counters: OpCounters,
    pub step_log: Vec<StepRecord>,
}

/// Translate a whole stream with one of the engines.
pub fn run_mode(
    model: &ToyDenoiser,
    codec: LatentCodec,
    frames: &[Tensor],
    mode: Mode,
    cfg: PipelineConfig,
) -> Result<RunOutput> {
    let cfg = match mode {
        Mode::Live2DiffNoCache => PipelineConfig { cache: false, ..cfg },
        _ => cfg,
    };
    let mut state = PipelineState::new(model, codec, cfg)?;
    let out = match mode {
        Mode::Live2Diff | Mode::Live2DiffNoCache => {
            let mut out = Vec::with_capacity(frames.len());
            for f in frames {
                out.extend(state.push(f)?);
            }
            out.extend(state.flush()?);
            debug_assert!(out.iter().enumerate().all(|(i, o)| o.index == i));
            out.into_iter().map(|o| o.frame).collect()
        }
        Mode::PerFrame => {
            let mut out = Vec::with_capacity(frames.len());
            for (i, f) in frames.iter().enumerate() {
                let t0 = Instant::now();
                let z = state.denoise_batch(std::slice::from_ref(f), i, true)?;
                let depth = state.depth();
                out.push(
                    state
                        .emit(i, z.into_iter().next().expect("one frame"), depth, t0)?
                        .frame,
                );
            }
            out
        }
        Mode::Chunked => {
            let mut out = Vec::with_capacity(frames.len());
            for (c, chunk) in frames.chunks(cfg.window).enumerate() {
                let t0 = Instant::now();
                let z = state.denoise_batch(chunk, c * cfg.window, false)?;
                let depth = state.depth();
                for (j, zj) in z.into_iter().enumerate() {
                    out.push(state.emit(c * cfg.window + j, zj, depth, t0)?.frame);
                }
            }
            out
        }
        Mode::Sliding(overlap) => {
            let overlap = overlap.unwrap_or(cfg.window / 2).max(1);
            let plan = if frames.len() <= cfg.window {
                vec![WindowChunk {
                    start: 0,
                    len: frames.len(),
                    weights: vec![1.0; frames.len()],
                }]
            } else {
                sliding_window_plan(frames.len(), cfg.window, overlap)?
            };
            let mut acc: Vec<Option<Tensor>> = vec![None; frames.len()];
            let t0 = Instant::now();
            for chunk in &plan {
                let z = state.denoise_batch(&frames[chunk.start..chunk.start + chunk.len], chunk.start, false)?;
                for (j, zj) in z.into_iter().enumerate() {
                    let w = zj.scale(chunk.weights[j]);
                    let slot = &mut acc[chunk.start + j];
                    *slot = Some(match slot.take() {
                        Some(prev) => prev.add(&w)?,
                        None => w,
                    });
                }
            }
            let depth = state.depth();
            let mut out = Vec::with_capacity(frames.len());
            for (i, z) in acc.into_iter().enumerate() {
                let z = z.ok_or_else(|| Error::Consistency(format!("frame {i} not covered by the window plan")))?;
                out.push(state.emit(i, z, depth, t0)?.frame);
            }
            out
        }
    };
    Ok(RunOutput {
        frames: out,
        counters: state.counters.clone(),
        step_log: state.step_log.clone(),
    })
}

/// Reference engine: warmup as usual, then every later frame is denoised to
/// completion before the next one is admitted.
pub fn run_sequential(
    model: &ToyDenoiser,
    codec: LatentCodec,
    frames: &[Tensor],
    cfg: PipelineConfig,
) -> Result<RunOutput> {
    let mut state = PipelineState::new(model, codec, cfg)?;
    let lw = cfg.warmup.min(frames.len());
    let mut out: Vec<Tensor> = if lw == cfg.warmup {
        state.warmup(&frames[..lw])?.into_iter().map(|o| o.frame).collect()
    } else {
        for f in frames {
            state.push(f)?;
        }
        state.flush()?.into_iter().map(|o| o.frame).collect()
    };
    if lw == cfg.warmup {
        for f in &frames[lw..] {
            out.push(state.denoise_alone(f)?.frame);
        }
    }
    Ok(RunOutput {
        frames: out,
        counters: state.counters.clone(),
        step_log: state.step_log.clone(),
    })
}
