use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;
use std::thread;

use clap::{Args, Parser, Subcommand};
use l2d_core::denoiser::{init_model, DenoiserConfig, LatentCodec, ToyDenoiser};
use l2d_core::harness::{
    export_xt_slice, metrics, read_container, synthetic_source, write_container, FrameContainer, RunConfig,
    SourceParams,
};
use l2d_core::pipeline::{format_mean_std, run_mode, Mode, OpCounters, PipelineState, RunOutput};
use l2d_core::weights::load_weights;
use l2d_core::{Error, Result, Tensor};

/// `println!` that exits quietly when stdout is closed (e.g. piped into `head`).
macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        if writeln!(std::io::stdout(), $($t)*).is_err() {
            std::process::exit(0);
        }
    }};
}

mod verify;

#[derive(Parser)]
#[command(
    name = "l2d",
    version,
    about = "Streaming video diffusion with cached causal temporal attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Translate a frame stream.
    Run(Common),
    /// Compare cached and recomputing attention on the same stream.
    Bench(Common),
    /// Run the equivalence oracles and print pass/fail.
    Verify(Common),
    /// Export an X-T slice of a stream as a PGM image.
    Xt {
        #[command(flatten)]
        common: Common,
        /// Translate the stream with --mode before slicing.
        #[arg(long)]
        translate: bool,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat key=value config file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    strength: Option<f64>,
    /// live2diff, live2diff_nocache, perframe, chunked or sliding.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    style: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_cond: bool,
    #[arg(long)]
    no_kv_cache: bool,
    /// moving_bar, drifting_sine, static or random_walk.
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    frames: Option<usize>,
    /// Read frames from an L2DF container instead of a synthetic source.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Load denoiser weights from an L2DW file.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    xt_row: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(p) = &self.config {
            c.apply_file(p)?;
        }
        let num = [
            ("window", self.window.map(|v| v.to_string())),
            ("warmup", self.warmup.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("strength", self.strength.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("style", self.style.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("source", self.source.clone()),
            ("frames", self.frames.map(|v| v.to_string())),
            ("xt_row", self.xt_row.map(|v| v.to_string())),
        ];
        for (k, v) in num {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        if self.no_cond {
            c.cond = false;
        }
        if self.no_kv_cache {
            c.cache = false;
        }
        if let Some(p) = &self.input {
            c.input = Some(p.clone());
        }
        if let Some(p) = &self.output {
            c.output = Some(p.clone());
        }
        if let Some(p) = &self.weights {
            c.weights = Some(p.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={first}");
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), e.detail().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run(c) => run(&c.resolve()?),
        Command::Bench(c) => bench(&c.resolve()?),
        Command::Verify(c) => Ok(verify::run(&c.resolve()?)),
        Command::Xt { common, translate } => xt(&common.resolve()?, translate),
    }
}

fn model_for(cfg: &RunConfig) -> Result<ToyDenoiser> {
    let model = match &cfg.weights {
        Some(p) => load_weights(p)?,
        None => init_model(
            DenoiserConfig {
                max_window: cfg.window.max(DenoiserConfig::default().max_window),
                ..DenoiserConfig::default()
            },
            cfg.seed,
        )?,
    };
    if model.config().max_window < cfg.window {
        return Err(Error::Parameter(format!(
            "window {} exceeds the model's positional table ({})",
            cfg.window,
            model.config().max_window
        )));
    }
    Ok(model)
}

fn codec_for(model: &ToyDenoiser) -> LatentCodec {
    LatentCodec::identity(model.config().grid_height, model.config().grid_width)
}

fn load_frames(cfg: &RunConfig, model: &ToyDenoiser) -> Result<Vec<Tensor>> {
    if let Some(p) = &cfg.input {
        return Ok(read_container(p)?.frames);
    }
    let mc = model.config();
    let params = SourceParams {
        width: mc.grid_width,
        height: mc.grid_height,
        channels: mc.latent_channels,
        frames: cfg.frames,
        ..SourceParams::default()
    };
    synthetic_source(cfg.source, params, cfg.seed)
}

/// Live modes run behind a bounded frame queue fed by a producer thread.
fn translate(model: &ToyDenoiser, frames: Vec<Tensor>, cfg: &RunConfig) -> Result<RunOutput> {
    let codec = codec_for(model);
    match cfg.mode {
        Mode::Live2Diff | Mode::Live2DiffNoCache => {
            let mut pc = cfg.pipeline();
            if cfg.mode == Mode::Live2DiffNoCache {
                pc.cache = false;
            }
            let mut state = PipelineState::new(model, codec, pc)?;
            let (tx, rx) = mpsc::sync_channel::<Tensor>(4);
            let mut out = Vec::with_capacity(frames.len());
            thread::scope(|s| -> Result<()> {
                s.spawn(move || {
                    for f in frames {
                        if tx.send(f).is_err() {
                            break;
                        }
                    }
                });
                for f in rx {
                    out.extend(state.push(&f)?);
                }
                out.extend(state.flush()?);
                Ok(())
            })?;
            Ok(RunOutput {
                frames: out.into_iter().map(|o| o.frame).collect(),
                counters: state.counters().clone(),
                step_log: state.step_log().to_vec(),
            })
        }
        mode => run_mode(model, codec, &frames, mode, cfg.pipeline()),
    }
}

fn print_counters(prefix: &str, c: &OpCounters) {
    for (k, v) in c.to_map() {
        outln!("{prefix}{k}={v}");
    }
}

fn run(cfg: &RunConfig) -> Result<ExitCode> {
    let model = model_for(cfg)?;
    let frames = load_frames(cfg, &model)?;
    let out = translate(&model, frames.clone(), cfg)?;
    let report = metrics(&out.frames, &frames, &out.counters)?;
    outln!(
        "mode={} frames_in={} frames_out={}",
        cfg.mode,
        frames.len(),
        out.frames.len()
    );
    outln!("flicker={:.6}", report.flicker);
    outln!("structure_mse={:.6}", report.structure_mse);
    outln!("latency={}", format_mean_std(&out.counters.frame_latency));
    print_counters("counter.", &out.counters);
    if let Some(p) = &cfg.output {
        write_container(p, &FrameContainer::from_frames(out.frames)?)?;
        outln!("wrote={}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn bench(cfg: &RunConfig) -> Result<ExitCode> {
    let model = model_for(cfg)?;
    let frames = load_frames(cfg, &model)?;
    let cached = translate(
        &model,
        frames.clone(),
        &RunConfig {
            mode: Mode::Live2Diff,
            cache: true,
            ..cfg.clone()
        },
    )?;
    let nocache = translate(
        &model,
        frames,
        &RunConfig {
            mode: Mode::Live2DiffNoCache,
            ..cfg.clone()
        },
    )?;
    outln!(
        "{:<18} {:>22} {:>16} {:>14}",
        "mode",
        "latency/frame",
        "kv_projections",
        "calls"
    );
    for (name, o) in [("live2diff", &cached), ("live2diff_nocache", &nocache)] {
        outln!(
            "{:<18} {:>22} {:>16} {:>14}",
            name,
            format_mean_std(&o.counters.frame_latency),
            o.counters.kv_projection_count,
            o.counters.denoiser_calls
        );
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (lc, ln) = (
        mean(&cached.counters.frame_latency),
        mean(&nocache.counters.frame_latency),
    );
    let kc = cached.counters.kv_projection_count.max(1);
    outln!(
        "projection_ratio={:.4}",
        nocache.counters.kv_projection_count as f64 / kc as f64
    );
    outln!("latency_ratio={:.4}", if lc > 0.0 { ln / lc } else { 0.0 });
    let diff = cached
        .frames
        .iter()
        .zip(&nocache.frames)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0f32, f32::max);
    outln!("max_output_diff={diff:.3e}");
    Ok(ExitCode::SUCCESS)
}

fn xt(cfg: &RunConfig, translate_first: bool) -> Result<ExitCode> {
    let out = cfg
        .output
        .as_ref()
        .ok_or_else(|| Error::Parameter("xt needs --output".into()))?;
    let model = model_for(cfg)?;
    let mut frames = load_frames(cfg, &model)?;
    if translate_first {
        frames = translate(&model, frames, cfg)?.frames;
    }
    export_xt_slice(&frames, cfg.xt_row, out)?;
    outln!("wrote={} columns={} row={}", out.display(), frames.len(), cfg.xt_row);
    Ok(ExitCode::SUCCESS)
}
