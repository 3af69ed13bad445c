use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use fieldline::backend::{
    segment, to_rlej_string, DetectionSet, ExternalBackend, FieldInstance, Segmenter,
};
use fieldline::mask::InstanceMask;
use fieldline::pipeline::segment_tiled;
use fieldline::raster::{PixelRect, RasterPatch};
use fieldline::stitch::StitchConfig;
use fieldline::Error;

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
    std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
    p
}

/// Script that copies a canned `.rlej` to whatever `--output` names.
fn canned(dir: &Path, name: &str, rlej: &str) -> PathBuf {
    let data = dir.join(format!("{name}.rlej"));
    std::fs::write(&data, rlej).unwrap();
    script(
        dir,
        name,
        &format!(
            r#"while [ $# -gt 0 ]; do case "$1" in --output) out="$2"; shift;; esac; shift; done
cp "{}" "$out""#,
            data.display()
        ),
    )
}

fn patch(w: u32, h: u32) -> RasterPatch {
    RasterPatch::from_fn(w, h, 3, |x, y| (x * 7 + y * 3) as u8).unwrap()
}

fn one_field(w: u32, h: u32, score: Option<f64>) -> DetectionSet {
    DetectionSet {
        width: w,
        height: h,
        instances: vec![FieldInstance {
            id: 4,
            mask: InstanceMask::from_rect(w, h, PixelRect::new(2, 3, 5, 6)),
            score,
        }],
    }
}

#[test]
fn canned_output_is_returned() {
    let dir = tempfile::tempdir().unwrap();
    let want = one_field(20, 20, Some(0.75));
    let prog = canned(dir.path(), "echo_backend", &to_rlej_string(&want));
    let got = segment(&patch(20, 20), &ExternalBackend::new(prog, vec![])).unwrap();
    assert_eq!(got, want);
}

#[test]
fn input_png_and_args_are_passed() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("args.txt");
    let want = one_field(20, 20, Some(0.5));
    let data = dir.path().join("out.rlej");
    std::fs::write(&data, to_rlej_string(&want)).unwrap();
    let prog = script(
        dir.path(),
        "logging_backend",
        &format!(
            r#"echo "$@" > "{log}"
while [ $# -gt 0 ]; do case "$1" in --input) inp="$2"; shift;; --output) out="$2"; shift;; esac; shift; done
test -s "$inp" || exit 9
cp "{data}" "$out""#,
            log = log.display(),
            data = data.display()
        ),
    );
    let backend = ExternalBackend::new(prog, vec!["--model".into(), "m.onnx".into()]);
    segment(&patch(20, 20), &backend).unwrap();
    let args = std::fs::read_to_string(&log).unwrap();
    assert!(args.starts_with("--model m.onnx --input "), "{args}");
    assert!(args.contains("--output "), "{args}");
}

#[test]
fn wrong_width_is_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let prog = canned(dir.path(), "narrow", &to_rlej_string(&one_field(10, 20, Some(0.9))));
    let e = segment(&patch(20, 20), &ExternalBackend::new(prog, vec![])).unwrap_err();
    assert!(matches!(&e, Error::Protocol(m) if m.contains("dimension mismatch")), "{e}");
    assert_eq!(e.code(), "PROTOCOL");
}

#[test]
fn nonzero_exit_surfaces_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let prog = script(dir.path(), "oom", "echo OOM >&2\nexit 3");
    let e = segment(&patch(20, 20), &ExternalBackend::new(prog, vec![])).unwrap_err();
    match &e {
        Error::BackendProcess { code, stderr } => {
            assert_eq!(*code, Some(3));
            assert!(stderr.contains("OOM"));
        }
        other => panic!("unexpected {other}"),
    }
    assert!(e.to_string().contains("OOM"));
}

#[test]
fn missing_output_and_null_score_are_protocol_errors() {
    let dir = tempfile::tempdir().unwrap();
    let silent = script(dir.path(), "silent", "exit 0");
    let e = segment(&patch(20, 20), &ExternalBackend::new(silent, vec![])).unwrap_err();
    assert_eq!(e.code(), "PROTOCOL");

    let unscored = canned(dir.path(), "unscored", &to_rlej_string(&one_field(20, 20, None)));
    let e = segment(&patch(20, 20), &ExternalBackend::new(unscored, vec![])).unwrap_err();
    assert!(matches!(&e, Error::Protocol(m) if m.contains("missing score")), "{e}");

    let garbage = canned(dir.path(), "garbage", "{not json");
    let e = segment(&patch(20, 20), &ExternalBackend::new(garbage, vec![])).unwrap_err();
    assert_eq!(e.code(), "PROTOCOL");
}

#[test]
fn concurrent_tiles_do_not_share_files() {
    // every tile gets the same full-tile field; output must be stable across worker counts
    let dir = tempfile::tempdir().unwrap();
    let prog = script(
        dir.path(),
        "full_tile",
        r#"while [ $# -gt 0 ]; do case "$1" in --output) out="$2"; shift;; esac; shift; done
printf '{"width":64,"height":64,"instances":[{"id":1,"score":0.5,"counts":[0,4096]}]}' > "$out""#,
    );
    let backend: Box<dyn Segmenter> = Box::new(ExternalBackend::new(prog, vec![]));
    let p = patch(120, 120);
    let a = segment_tiled(&p, backend.as_ref(), 64, 8, &StitchConfig::default(), 1).unwrap();
    let b = segment_tiled(&p, backend.as_ref(), 64, 8, &StitchConfig::default(), 4).unwrap();
    assert_eq!(a, b);
    assert!(!a.instances.is_empty());
}
