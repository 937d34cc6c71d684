use l2d_core::denoiser::{init_model, DenoiserConfig, LatentCodec, ToyDenoiser};
use l2d_core::mask::streaming_row_mask;
use l2d_core::pipeline::{run_mode, run_sequential, Mode, PipelineConfig, PipelineState};
use l2d_core::tensor::gaussian;
use l2d_core::{RngStream, Tensor};
use proptest::prelude::*;

fn model(window: usize) -> ToyDenoiser {
    let c = DenoiserConfig {
        grid_height: 3,
        grid_width: 3,
        max_window: window,
        ..DenoiserConfig::default()
    };
    init_model(c, 3).unwrap()
}

fn frames(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = RngStream::new(seed);
    (0..n).map(|_| gaussian(&mut rng, &[3, 3, 1]).scale(0.5)).collect()
}

fn geometry() -> impl Strategy<Value = (usize, usize, usize, usize, f64)> {
    (2usize..=8).prop_flat_map(|l| (Just(l), 1..l, 1usize..=4, 0usize..20, prop_oneof![Just(0.5), Just(1.0)]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_frame_comes_out_once_in_order((l, lw, t, extra, strength) in geometry()) {
        let m = model(l);
        let cfg = PipelineConfig { window: l, warmup: lw, steps: t, strength, ..PipelineConfig::default() };
        let input = frames(lw + extra, 1);
        let mut state = PipelineState::new(&m, LatentCodec::identity(3, 3), cfg).unwrap();
        let mut seen = Vec::new();
        for f in &input {
            seen.extend(state.push(f).unwrap().into_iter().map(|o| o.index));
        }
        seen.extend(state.flush().unwrap().into_iter().map(|o| o.index));
        prop_assert_eq!(seen, (0..input.len()).collect::<Vec<_>>());
        prop_assert_eq!(state.counters().frames_emitted, input.len() as u64);
        prop_assert_eq!(state.counters().frames_ingested, extra as u64);
    }

    #[test]
    fn pipelined_matches_sequential((l, lw, t, extra, strength) in geometry()) {
        let m = model(l);
        let cfg = PipelineConfig { window: l, warmup: lw, steps: t, strength, seed: 9, ..PipelineConfig::default() };
        let input = frames(lw + extra, 2);
        let codec = LatentCodec::identity(3, 3);
        let a = run_mode(&m, codec, &input, Mode::Live2Diff, cfg).unwrap();
        let b = run_sequential(&m, codec, &input, cfg).unwrap();
        prop_assert_eq!(a.frames.len(), b.frames.len());
        for (x, y) in a.frames.iter().zip(&b.frames) {
            prop_assert!(x.max_abs_diff(y) <= 1e-5);
        }
    }

    #[test]
    fn recompute_costs_the_window_size((l, lw, t, extra, _s) in geometry()) {
        let m = model(l);
        let cfg = PipelineConfig { window: l, warmup: lw, steps: t, strength: 1.0, ..PipelineConfig::default() };
        let input = frames(lw + extra, 3);
        let codec = LatentCodec::identity(3, 3);
        let a = run_mode(&m, codec, &input, Mode::Live2Diff, cfg).unwrap();
        let b = run_mode(&m, codec, &input, Mode::Live2DiffNoCache, cfg).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            prop_assert!(x.max_abs_diff(y) <= 1e-6);
        }
        let window_sum: u64 = (lw..input.len())
            .map(|f| streaming_row_mask(f, l, lw).unwrap().allowed_count() as u64)
            .sum();
        let (kc, kn) = (a.counters.kv_projection_count, b.counters.kv_projection_count);
        prop_assert_eq!(kn * extra as u64, kc * window_sum);
    }
}

#[test]
fn same_seed_same_stream() {
    let m = model(8);
    let cfg = PipelineConfig {
        window: 8,
        warmup: 2,
        steps: 2,
        ..PipelineConfig::default()
    };
    let input = frames(20, 4);
    let codec = LatentCodec::identity(3, 3);
    let a = run_mode(&m, codec, &input, Mode::Live2Diff, cfg).unwrap();
    let b = run_mode(&m, codec, &input, Mode::Live2Diff, cfg).unwrap();
    assert_eq!(a.frames, b.frames);
    let c = run_mode(&m, codec, &input, Mode::Live2Diff, PipelineConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.frames, c.frames);
}
