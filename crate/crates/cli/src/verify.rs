//! Oracle suite behind `l2d verify`, run at the configured window sizes.

use std::process::ExitCode;

use l2d_core::denoiser::{init_model, DenoiserConfig, LatentCodec, StreamCache, StreamSlot, Temporal, ToyDenoiser};
use l2d_core::diffusion::{denoise_step, exact_eps, make_schedule};
use l2d_core::harness::RunConfig;
use l2d_core::mask::{build_training_mask, pe_index_compaction, streaming_row_mask, MaskMode, MaskRow};
use l2d_core::pipeline::{run_mode, run_sequential, Mode};
use l2d_core::tensor::{gaussian, RngStream};
use l2d_core::{Result, Tensor};

type Check = fn(&RunConfig, &ToyDenoiser) -> Result<std::result::Result<String, String>>;

pub fn run(cfg: &RunConfig) -> ExitCode {
    let model = match small_model(cfg) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), e.detail());
            return ExitCode::from(1);
        }
    };
    let checks: [(&str, Check); 6] = [
        ("streaming_batch", streaming_batch),
        ("pipeline_sequential", pipeline_sequential),
        ("cache_recompute", cache_recompute),
        ("adapter_noop", adapter_noop),
        ("pe_compaction", pe_compaction),
        ("sampler_recovery", sampler_recovery),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check(cfg, &model) {
            Ok(Ok(detail)) => outln!("PASS {name}: {detail}"),
            Ok(Err(detail)) => {
                failed += 1;
                outln!("FAIL {name}: {detail}");
            }
            Err(e) => {
                failed += 1;
                outln!("FAIL {name}: kind={} msg={}", e.kind(), e.detail());
            }
        }
    }
    outln!("verify: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn small_model(cfg: &RunConfig) -> Result<ToyDenoiser> {
    let c = DenoiserConfig {
        grid_height: 3,
        grid_width: 3,
        max_window: cfg.window,
        ..DenoiserConfig::default()
    };
    init_model(c, cfg.seed)
}

fn frames(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = RngStream::new(seed);
    (0..n).map(|_| gaussian(&mut rng, &[3, 3, 1]).scale(0.5)).collect()
}

fn verdict(worst: f32, tol: f32, what: &str) -> std::result::Result<String, String> {
    if worst <= tol {
        Ok(format!("{what} max abs diff {worst:.2e} <= {tol:.0e}"))
    } else {
        Err(format!("{what} max abs diff {worst:.2e} > {tol:.0e}"))
    }
}

fn streaming_batch(cfg: &RunConfig, m: &ToyDenoiser) -> Result<std::result::Result<String, String>> {
    let (l, lw) = (cfg.window, cfg.warmup);
    let sched = make_schedule(m.config().n_train_steps, cfg.steps, 1e-4, 0.02)?;
    let mut cache = StreamCache::new(m, cfg.steps, l, lw, true)?;
    let mask = build_training_mask(MaskMode::UnidirectionalWarmup(lw), l)?;
    let mut rng = RngStream::new(cfg.seed ^ 1);
    let s = m.config().positions();
    let mut worst = 0.0f32;
    for k in 0..cfg.steps {
        let tk = sched.train_step(k);
        let z = gaussian(&mut rng, &[l, s, 1]);
        let (batch, _) = m.forward(&z, &vec![tk; l], 0, None, &sched, Temporal::Batch(&mask))?;
        let warm = Tensor::new(&[lw, s, 1], z.data()[..lw * s].to_vec())?;
        m.forward(
            &warm,
            &vec![tk; lw],
            0,
            None,
            &sched,
            Temporal::Warmup {
                cache: &mut cache,
                step: k,
            },
        )?;
        for f in lw..l {
            let zf = Tensor::new(&[1, s, 1], z.data()[f * s..(f + 1) * s].to_vec())?;
            let slots = [StreamSlot {
                step: k,
                frame_index: Some(f),
            }];
            let (out, _) = m.forward(
                &zf,
                &[tk],
                0,
                None,
                &sched,
                Temporal::Stream {
                    cache: &mut cache,
                    slots: &slots,
                },
            )?;
            worst = worst.max(out.slab(0)?.max_abs_diff(&batch.slab(f)?));
        }
    }
    Ok(verdict(worst, 1e-5, "streamed vs batch"))
}

fn pipeline_sequential(cfg: &RunConfig, m: &ToyDenoiser) -> Result<std::result::Result<String, String>> {
    let stream = frames(3 * cfg.window, cfg.seed ^ 2);
    let codec = LatentCodec::identity(3, 3);
    let a = run_mode(m, codec, &stream, Mode::Live2Diff, cfg.pipeline())?;
    let b = run_sequential(m, codec, &stream, cfg.pipeline())?;
    let worst = a
        .frames
        .iter()
        .zip(&b.frames)
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f32::max);
    if a.frames.len() != b.frames.len() {
        return Ok(Err(format!("{} vs {} outputs", a.frames.len(), b.frames.len())));
    }
    Ok(verdict(worst, 1e-5, "pipelined vs sequential"))
}

fn cache_recompute(cfg: &RunConfig, m: &ToyDenoiser) -> Result<std::result::Result<String, String>> {
    let stream = frames(3 * cfg.window, cfg.seed ^ 3);
    let codec = LatentCodec::identity(3, 3);
    let a = run_mode(m, codec, &stream, Mode::Live2Diff, cfg.pipeline())?;
    let b = run_mode(m, codec, &stream, Mode::Live2DiffNoCache, cfg.pipeline())?;
    let worst = a
        .frames
        .iter()
        .zip(&b.frames)
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f32::max);
    let real = stream.len().saturating_sub(cfg.warmup) as u64;
    let mut window_sum = 0u64;
    for f in cfg.warmup..stream.len() {
        window_sum += streaming_row_mask(f, cfg.window, cfg.warmup)?.allowed_count() as u64;
    }
    let (kc, kn) = (a.counters.kv_projection_count, b.counters.kv_projection_count);
    if kn * real != kc * window_sum {
        return Ok(Err(format!(
            "projection ratio {kn}/{kc} != mean window {window_sum}/{real}"
        )));
    }
    Ok(verdict(worst, 1e-6, "cached vs recomputed").map(|s| format!("{s}; projections {kn}/{kc}")))
}

fn adapter_noop(_cfg: &RunConfig, m: &ToyDenoiser) -> Result<std::result::Result<String, String>> {
    let sched = make_schedule(m.config().n_train_steps, 4, 1e-4, 0.02)?;
    let mut rng = RngStream::new(4);
    let s = m.config().positions();
    let z = gaussian(&mut rng, &[4, s, 1]);
    let cond = gaussian(&mut rng, &[4, s, 1]);
    let (a, _) = m.forward(&z, &[10, 200, 400, 900], 0, None, &sched, Temporal::Off)?;
    let (b, _) = m.forward(&z, &[10, 200, 400, 900], 0, Some(&cond), &sched, Temporal::Off)?;
    Ok(if a == b {
        Ok("bit-identical".into())
    } else {
        Err("conditioning changed a freshly initialised model".into())
    })
}

fn pe_compaction(_cfg: &RunConfig, _m: &ToyDenoiser) -> Result<std::result::Result<String, String>> {
    let ninf = f32::NEG_INFINITY;
    let got = pe_index_compaction(&MaskRow::from_additive(&[0., 0., 0., 0., ninf, ninf, 0., 0.]));
    Ok(if got == [0, 1, 2, 3, 3, 3, 4, 5] {
        Ok(format!("{got:?}"))
    } else {
        Err(format!("got {got:?}"))
    })
}

fn sampler_recovery(cfg: &RunConfig, _m: &ToyDenoiser) -> Result<std::result::Result<String, String>> {
    let sched = make_schedule(1000, cfg.steps, 1e-4, 0.02)?;
    let mut rng = RngStream::new(5);
    let x0 = gaussian(&mut rng, &[32]);
    let mut z = gaussian(&mut rng, &[32]);
    for k in 0..cfg.steps {
        let eps = exact_eps(&z, &x0, sched.alpha_bar(sched.train_step(k)));
        z = denoise_step(&z, &eps, k, &sched)?;
    }
    Ok(verdict(z.max_abs_diff(&x0), 1e-4, "exact-noise sampler"))
}
