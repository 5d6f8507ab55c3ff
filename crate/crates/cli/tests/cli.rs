use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsgm::dataset::read_disparity_png;
use rsgm::raster::GrayImage;

fn rsgm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsgm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = rsgm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, frames: usize) {
    let f = frames.to_string();
    ok(&["--d-max", "48", "synth", "--out", s(dir), "--frames", &f, "--width", "120", "--height", "90"]);
}

#[test]
fn match_recovers_a_constant_shift() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, h, shift) = (96, 64, 7);
    let tex: Vec<u8> = (0..(w + shift) * h).map(|_| rng.gen()).collect();
    let row = w + shift;
    let left = GrayImage::from_fn(w, h, |x, y| tex[y * row + x]);
    // The right image shows each texel `shift` columns further left.
    let right = GrayImage::from_fn(w, h, |x, y| tex[y * row + x + shift]);
    let (l, r, o) = (dir.path().join("l.png"), dir.path().join("r.png"), dir.path().join("d.png"));
    left.save(&l).unwrap();
    right.save(&r).unwrap();

    ok(&["--d-max", "32", "match", "--left", s(&l), "--right", s(&r), "--out", s(&o)]);
    let d = read_disparity_png(&o).unwrap();
    let (mut hit, mut n) = (0, 0);
    for y in 2..h - 2 {
        for x in shift + 4..w - 2 {
            n += 1;
            if d.get(x, y) == Some(shift as f32) {
                hit += 1;
            }
        }
    }
    assert!(hit * 100 >= n * 95, "{hit}/{n}");
}

#[test]
fn eval_of_ground_truth_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    let csv = dir.path().join("r.csv");
    synth(&seq, 5);
    let table = ok(&["--d-max", "48", "eval", s(&seq), "--methods", "gt,reduced", "--out", s(&csv)]);
    assert!(table.contains("gt"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let gt = text.lines().find(|l| l.starts_with("gt,")).unwrap();
    let fields: Vec<&str> = gt.split(',').collect();
    assert_eq!(fields[1], "5");
    assert_eq!(fields[4].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    synth(&seq, 3);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--d-max", "48", "run", s(&seq), "--out", s(&a)]);
    ok(&["--d-max", "48", "--threads", "1", "run", s(&seq), "--out", s(&b)]);
    for k in 0..3 {
        let name = format!("disparity/{k:010}.png");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
    assert_eq!(
        std::fs::read(a.join("detections.txt")).unwrap(),
        std::fs::read(b.join("detections.txt")).unwrap()
    );
}

#[test]
fn calib_noise_reports_both_variances() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    synth(&seq, 3);
    let report = ok(&["--d-max", "48", "calib-noise", s(&seq)]);
    let keys: Vec<&str> = report
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('=').next().unwrap().trim())
        .collect();
    assert_eq!(keys, ["q", "r"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(rsgm(&["run", s(&missing), "--out", s(dir.path())]).status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "paths = 6\n").unwrap();
    let out = rsgm(&["--config", s(&cfg), "synth", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    // A readable directory without images fails while loading.
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(rsgm(&["eval", s(&empty)]).status.code(), Some(1));
}
