use std::path::Path;
use std::process::{Command, Output};

use l2d_core::harness::{read_container, synthetic_source, write_container, FrameContainer, SourceKind, SourceParams};

fn l2d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l2d"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
}

const SMALL: &[&str] = &["--window", "8", "--warmup", "2", "--steps", "2", "--frames", "12"];

fn with(extra: &[&str]) -> Vec<String> {
    extra.iter().chain(SMALL).map(|s| s.to_string()).collect()
}

fn run(args: &[String]) -> Output {
    let v: Vec<&str> = args.iter().map(String::as_str).collect();
    l2d(&v)
}

#[test]
fn run_reports_metrics_and_counters() {
    let o = run(&with(&["run", "--source", "moving_bar"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("frames_in=12 frames_out=12"));
    assert!(value(&out, "flicker").is_some());
    assert!(value(&out, "structure_mse").is_some());
    assert_eq!(value(&out, "counter.denoiser_calls"), Some("10"));
}

#[test]
fn run_writes_container() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.l2df");
    let p = path.to_str().unwrap();
    let o = run(&with(&["run", "--mode", "chunked", "--output", p]));
    assert!(o.status.success(), "{}", stderr(&o));
    let c = read_container(&path).unwrap();
    assert_eq!((c.frames.len(), c.width, c.height, c.channels), (12, 8, 8, 1));
}

#[test]
fn run_reads_container_input() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("in.l2df");
    let params = SourceParams {
        frames: 6,
        ..SourceParams::default()
    };
    let frames = synthetic_source(SourceKind::DriftingSine, params, 0).unwrap();
    write_container(&path, &FrameContainer::from_frames(frames).unwrap()).unwrap();
    let o = run(&with(&["run", "--mode", "perframe", "--input", path.to_str().unwrap()]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("frames_in=6 frames_out=6"));
}

#[test]
fn every_mode_runs() {
    for mode in ["live2diff", "live2diff_nocache", "perframe", "chunked", "sliding"] {
        let o = run(&with(&["run", "--mode", mode, "--no-cond"]));
        assert!(o.status.success(), "{mode}: {}", stderr(&o));
    }
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# test\nmode = perframe\nframes = 5\nwindow = 8\nwarmup = 2\nsteps = 2\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let o = l2d(&["run", "--config", c]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mode=perframe frames_in=5"));
    let o = l2d(&["run", "--config", c, "--mode", "chunked", "--frames", "7"]);
    assert!(stdout(&o).contains("mode=chunked frames_in=7"));
}

#[test]
fn bench_prints_table() {
    let o = run(&with(&["bench"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("live2diff_nocache"));
    let ratio: f64 = value(&out, "projection_ratio").unwrap().parse().unwrap();
    assert!(ratio > 1.0);
    let diff: f64 = value(&out, "max_output_diff").unwrap().parse().unwrap();
    assert!(diff <= 1e-6);
}

#[test]
fn verify_passes() {
    let o = l2d(&["verify", "--window", "8", "--warmup", "2", "--steps", "2"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 6);
    assert!(!out.contains("FAIL"));
}

#[test]
fn xt_writes_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("slice.pgm");
    let o = run(&with(&[
        "xt",
        "--source",
        "moving_bar",
        "--xt-row",
        "3",
        "--output",
        path.to_str().unwrap(),
    ]));
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P5\n12 8\n255\n"));

    let o = run(&with(&["xt", "--translate", "--output", path.to_str().unwrap()]));
    assert!(o.status.success(), "{}", stderr(&o));
}

fn assert_error_line(o: &Output, kind: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    let line = err.lines().find(|l| l.starts_with("error: ")).expect("error line");
    assert!(line.starts_with(&format!("error: kind={kind} msg=")), "{line}");
}

#[test]
fn failures_print_machine_readable_errors() {
    assert_error_line(&l2d(&["run", "--mode", "fast"]), "parameter");
    assert_error_line(&l2d(&["run", "--source", "webcam"]), "parameter");
    assert_error_line(&l2d(&["run", "--warmup", "16"]), "parameter");
    assert_error_line(&l2d(&["run", "--strength", "2"]), "parameter");
    assert_error_line(&l2d(&["run", "--bogus-flag"]), "usage");
    assert_error_line(&l2d(&["xt"]), "parameter");
    assert_error_line(
        &run(&with(&["xt", "--xt-row", "99", "--output", "/tmp/never.pgm"])),
        "parameter",
    );
    assert_error_line(&l2d(&["run", "--input", "/nonexistent/x.l2df"]), "io");
}

#[test]
fn corrupt_container_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.l2df");
    std::fs::write(&path, b"NOPE\x01\x00aaaaaaaaaaaaaaaa").unwrap();
    let o = l2d(&["run", "--input", path.to_str().unwrap()]);
    assert_error_line(&o, "format");
    assert!(stderr(&o).contains("offset=0"));
}

#[test]
fn help_succeeds() {
    let o = l2d(&["--help"]);
    assert!(o.status.success());
    for sub in ["run", "bench", "verify", "xt"] {
        assert!(stdout(&o).contains(sub));
    }
    assert!(Path::new(env!("CARGO_BIN_EXE_l2d")).exists());
}
