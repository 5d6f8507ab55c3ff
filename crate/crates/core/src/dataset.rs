//! Sequence ingestion (KITTI raw layout) and synthetic sequences with exact
//! ground truth.
//!
//! On-disk layout, read and written:
//!
//! ```text
//! <seq>/image_00/data/NNNNNNNNNN.png   left  (image_02 used if image_00 is absent)
//! <seq>/image_01/data/NNNNNNNNNN.png   right (image_03 likewise)
//! <seq>/disp_gt/NNNNNNNNNN.png         16-bit disparity, value / 256, 0 = no data
//! <seq>/poses.txt                      12 numbers per line, camera-to-world [R | t]
//! <seq>/calib.txt                      P_rect_00 / P_rect_01 / S_rect_00 lines
//! <seq>/gt_boxes.txt                   "frame x0 y0 x1 y1" per moving region
//! ```
//!
//! The `data/` level is optional. KITTI's `calib_cam_to_cam.txt` is accepted
//! in the sequence directory or its parent.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::detect::DetectionBox;
use crate::error::{Error, Result};
use crate::geometry::{RigidMotion, StereoCalib};
use crate::raster::{DisparityMap, GrayImage};

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFrame {
    pub index: usize,
    pub left: GrayImage,
    pub right: GrayImage,
    /// Absolute camera-to-world pose.
    pub pose: Option<RigidMotion>,
    pub gt_disp: Option<DisparityMap>,
    pub gt_boxes: Option<Vec<DetectionBox>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub calib: Option<StereoCalib>,
    pub frames: Vec<SequenceFrame>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Ego-motion from frame `k - 1` to frame `k`; `None` for `k == 0` or
    /// when either pose is unknown.
    pub fn motion(&self, k: usize) -> Option<RigidMotion> {
        if k == 0 || k >= self.frames.len() {
            return None;
        }
        let prev = self.frames[k - 1].pose?;
        let cur = self.frames[k].pose?;
        Some(RigidMotion::between_poses(&prev, &cur))
    }

    pub fn calib_or_err(&self) -> Result<StereoCalib> {
        self.calib
            .ok_or_else(|| Error::Load("sequence has no calibration".into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    /// Pose file overriding `<seq>/poses.txt`.
    pub poses: Option<PathBuf>,
    /// Ground-truth directory overriding `<seq>/disp_gt`.
    pub gt_dir: Option<PathBuf>,
    /// Disparity levels recorded in the calibration.
    pub d_max: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            poses: None,
            gt_dir: None,
            d_max: 128,
        }
    }
}

fn camera_dir(seq: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| seq.join(n)).find(|p| p.is_dir()).map(|p| {
        let data = p.join("data");
        if data.is_dir() {
            data
        } else {
            p
        }
    })
}

/// `(index, path)` for every `NNN.png` in `dir`, sorted by index.
fn indexed_pngs(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let index = stem
            .parse::<usize>()
            .map_err(|_| Error::Load(format!("image name {} is not a frame number", path.display())))?;
        out.push((index, path));
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Load(format!("duplicate frame index {} in {}", w[0].0, dir.display())));
    }
    Ok(out)
}

fn frame_name(index: usize) -> String {
    format!("{index:010}.png")
}

fn parse_numbers(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("not a number: {t:?}"))))
        .collect()
}

/// One absolute pose per non-empty line.
pub fn read_poses(path: &Path) -> Result<Vec<RigidMotion>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("cannot read poses {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let v = parse_numbers(l)?;
            if v.len() != 12 {
                return Err(Error::Format(format!(
                    "{} line {}: expected 12 numbers, got {}",
                    path.display(),
                    n + 1,
                    v.len()
                )));
            }
            RigidMotion::from_row_major_3x4(&v)
        })
        .collect()
}

pub fn write_poses(path: &Path, poses: &[RigidMotion]) -> Result<()> {
    let mut text = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major_3x4().iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads `P_rect_00`, `P_rect_01` (and `S_rect_00` when present) from a
/// KITTI-style `key: values` calibration file.
pub fn read_calib(path: &Path, width: usize, height: usize, d_max: usize) -> Result<StereoCalib> {
    let text = fs::read_to_string(path)?;
    let mut keys = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once(':') {
            keys.insert(k.trim().to_string(), v.to_string());
        }
    }
    let get = |k: &str, n: usize| -> Result<Vec<f64>> {
        let v = keys
            .get(k)
            .ok_or_else(|| Error::Format(format!("{}: missing {k}", path.display())))
            .and_then(|s| parse_numbers(s))?;
        if v.len() != n {
            return Err(Error::Format(format!("{}: {k} needs {n} numbers", path.display())));
        }
        Ok(v)
    };
    let p0 = get("P_rect_00", 12)?;
    let p1 = get("P_rect_01", 12)?;
    if let Ok(s) = get("S_rect_00", 2) {
        if s[0] as usize != width || s[1] as usize != height {
            return Err(Error::Format(format!(
                "{}: calibrated size {}x{} but images are {width}x{height}",
                path.display(),
                s[0],
                s[1]
            )));
        }
    }
    let f = p0[0];
    let baseline = -p1[3] / p1[0];
    StereoCalib::new(f, p0[2], p0[6], baseline, width, height, d_max)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_calib(path: &Path, c: &StereoCalib) -> Result<()> {
    let p = |tx: f64| {
        format!(
            "{:e} 0 {:e} {:e} 0 {:e} {:e} 0 0 0 1 0",
            c.focal_px, c.cx, tx, c.focal_px, c.cy
        )
    };
    let text = format!(
        "S_rect_00: {} {}\nP_rect_00: {}\nP_rect_01: {}\n",
        c.width,
        c.height,
        p(0.0),
        p(-c.focal_px * c.baseline_m)
    );
    fs::write(path, text)?;
    Ok(())
}

fn read_gt_boxes(path: &Path) -> Result<BTreeMap<usize, Vec<DetectionBox>>> {
    let text = fs::read_to_string(path)?;
    let mut out: BTreeMap<usize, Vec<DetectionBox>> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format(format!("{}: bad line {line:?}", path.display()))))
            .collect::<Result<_>>()?;
        if v.len() != 5 {
            return Err(Error::Format(format!("{}: bad line {line:?}", path.display())));
        }
        out.entry(v[0]).or_default().push(DetectionBox::new(v[1], v[2], v[3], v[4]));
    }
    Ok(out)
}

/// Reads a 16-bit disparity PNG: `d = value / 256`, 0 marks no data.
pub fn read_disparity_png(path: impl AsRef<Path>) -> Result<DisparityMap> {
    let path = path.as_ref();
    let img = match image::open(path)? {
        DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::Format(format!(
                "{}: expected 16-bit grayscale disparity, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(DisparityMap::from_fn(w, h, |x, y| {
        let v = raw[y * w + x];
        (v != 0).then(|| v as f32 / 256.0)
    }))
}

/// Inverse of [`read_disparity_png`]. A valid disparity that rounds to 0
/// cannot be told apart from "no data" and reads back as invalid.
pub fn write_disparity_png(path: impl AsRef<Path>, map: &DisparityMap) -> Result<()> {
    let (w, h) = (map.width(), map.height());
    let raw: Vec<u16> = (0..map.len())
        .map(|i| map.at(i).map_or(0, |d| (d as f64 * 256.0).round().clamp(0.0, 65535.0) as u16))
        .collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Format("disparity buffer size mismatch".into()))?;
    buf.save(path.as_ref())?;
    Ok(())
}

fn load_gray(path: &Path) -> Result<GrayImage> {
    GrayImage::load(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
}

/// Loads a sequence laid out as described in the module docs.
pub fn load_kitti_sequence(dir: impl AsRef<Path>, opts: &LoadOptions) -> Result<Sequence> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Load(format!("{} is not a directory", dir.display())));
    }
    let left_dir = camera_dir(dir, &["image_00", "image_02"])
        .ok_or_else(|| Error::Load(format!("{}: no image_00 or image_02 folder", dir.display())))?;
    let right_dir = camera_dir(dir, &["image_01", "image_03"])
        .ok_or_else(|| Error::Load(format!("{}: no image_01 or image_03 folder", dir.display())))?;
    let lefts = indexed_pngs(&left_dir)?;
    if lefts.is_empty() {
        return Err(Error::Load(format!("{}: no frames", left_dir.display())));
    }
    let rights: BTreeMap<usize, PathBuf> = indexed_pngs(&right_dir)?.into_iter().collect();
    for (index, _) in &lefts {
        if !rights.contains_key(index) {
            return Err(Error::Load(format!("frame {index}: right image missing in {}", right_dir.display())));
        }
    }
    if let Some(extra) = rights.keys().find(|k| lefts.binary_search_by_key(*k, |(i, _)| *i).is_err()) {
        return Err(Error::Load(format!("frame {extra}: left image missing in {}", left_dir.display())));
    }

    let gt_dir = match &opts.gt_dir {
        Some(g) if !g.is_dir() => {
            return Err(Error::Load(format!("ground-truth folder {} not found", g.display())))
        }
        Some(g) => Some(g.clone()),
        None => Some(dir.join("disp_gt")).filter(|g| g.is_dir()),
    };

    let mut frames: Vec<SequenceFrame> = lefts
        .par_iter()
        .map(|(index, lpath)| {
            let left = load_gray(lpath)?;
            let right = load_gray(&rights[index])?;
            if left.width() != right.width() || left.height() != right.height() {
                return Err(Error::Load(format!("frame {index}: left and right sizes differ")));
            }
            let gt_disp = match &gt_dir {
                Some(g) => {
                    let p = g.join(frame_name(*index));
                    if p.is_file() {
                        let gt = read_disparity_png(&p)?;
                        if gt.width() != left.width() || gt.height() != left.height() {
                            return Err(Error::Load(format!("frame {index}: ground truth size differs")));
                        }
                        Some(gt)
                    } else {
                        None
                    }
                }
                None => None,
            };
            Ok(SequenceFrame {
                index: *index,
                left,
                right,
                pose: None,
                gt_disp,
                gt_boxes: None,
            })
        })
        .collect::<Result<_>>()?;

    let (w, h) = (frames[0].left.width(), frames[0].left.height());
    if let Some(f) = frames.iter().find(|f| f.left.width() != w || f.left.height() != h) {
        return Err(Error::Load(format!("frame {}: image size differs from frame {}", f.index, frames[0].index)));
    }

    let pose_path = opts.poses.clone().or_else(|| Some(dir.join("poses.txt")).filter(|p| p.is_file()));
    if let Some(p) = pose_path {
        let poses = read_poses(&p)?;
        if poses.len() < frames.len() {
            return Err(Error::Load(format!(
                "{} has {} poses for {} frames",
                p.display(),
                poses.len(),
                frames.len()
            )));
        }
        for (f, pose) in frames.iter_mut().zip(poses) {
            f.pose = Some(pose);
        }
    }

    let boxes_path = dir.join("gt_boxes.txt");
    if boxes_path.is_file() {
        let mut boxes = read_gt_boxes(&boxes_path)?;
        for f in frames.iter_mut() {
            f.gt_boxes = Some(boxes.remove(&f.index).unwrap_or_default());
        }
    }

    let calib_path = [
        dir.join("calib.txt"),
        dir.join("calib_cam_to_cam.txt"),
        dir.parent().map(|p| p.join("calib_cam_to_cam.txt")).unwrap_or_default(),
    ]
    .into_iter()
    .find(|p| p.is_file());
    let calib = calib_path.map(|p| read_calib(&p, w, h, opts.d_max)).transpose()?;

    Ok(Sequence { calib, frames })
}

/// Writes `seq` in the layout [`load_kitti_sequence`] reads.
pub fn write_sequence(seq: &Sequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let left = dir.join("image_00").join("data");
    let right = dir.join("image_01").join("data");
    let gt = dir.join("disp_gt");
    fs::create_dir_all(&left)?;
    fs::create_dir_all(&right)?;
    if seq.frames.iter().any(|f| f.gt_disp.is_some()) {
        fs::create_dir_all(&gt)?;
    }
    seq.frames.par_iter().try_for_each(|f| -> Result<()> {
        let name = frame_name(f.index);
        f.left.save(left.join(&name))?;
        f.right.save(right.join(&name))?;
        if let Some(d) = &f.gt_disp {
            write_disparity_png(gt.join(&name), d)?;
        }
        Ok(())
    })?;
    if let Some(poses) = seq.frames.iter().map(|f| f.pose).collect::<Option<Vec<_>>>() {
        write_poses(&dir.join("poses.txt"), &poses)?;
    }
    if let Some(c) = &seq.calib {
        write_calib(&dir.join("calib.txt"), c)?;
    }
    if seq.frames.iter().any(|f| f.gt_boxes.is_some()) {
        let mut text = String::new();
        for f in &seq.frames {
            for b in f.gt_boxes.iter().flatten() {
                let _ = writeln!(text, "{} {} {} {} {}", f.index, b.x0, b.y0, b.x1, b.y1);
            }
        }
        fs::write(dir.join("gt_boxes.txt"), text)?;
    }
    Ok(())
}

/// Image-space rectangle moving at constant velocity, at a constant
/// disparity `offset` in front of the background under its center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthObject {
    pub x: f64,
    pub y: f64,
    pub width: usize,
    pub height: usize,
    pub disparity_offset: f64,
    /// Pixels per frame.
    pub velocity: (f64, f64),
}

impl SynthObject {
    fn origin(&self, frame: usize) -> (f64, f64) {
        (
            self.x + self.velocity.0 * frame as f64,
            self.y + self.velocity.1 * frame as f64,
        )
    }

    /// Pixels whose centers fall inside the rectangle at `frame`.
    fn footprint(&self, frame: usize, w: usize, h: usize) -> Option<DetectionBox> {
        let (ox, oy) = self.origin(frame);
        let x0 = ox.ceil().max(0.0);
        let y0 = oy.ceil().max(0.0);
        let x1 = (ox + self.width as f64).ceil().min(w as f64);
        let y1 = (oy + self.height as f64).ceil().min(h as f64);
        (x0 < x1 && y0 < y1).then(|| DetectionBox::new(x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub calib: StereoCalib,
    pub seed: u64,
    /// Distance of the fronto-parallel background plane at the world origin.
    pub plane_depth_m: f64,
    /// Absolute camera-to-world pose of the left camera, one per frame.
    pub trajectory: Vec<RigidMotion>,
    pub objects: Vec<SynthObject>,
    /// Standard deviation of additive Gaussian intensity noise.
    pub noise_sigma: f64,
}

impl SynthConfig {
    /// Static camera looking at a plane of disparity `disparity`.
    pub fn static_plane(calib: StereoCalib, disparity: f64, frames: usize) -> Self {
        Self {
            plane_depth_m: calib.focal_px * calib.baseline_m / disparity,
            calib,
            seed: 7,
            trajectory: vec![RigidMotion::identity(); frames],
            objects: Vec::new(),
            noise_sigma: 0.0,
        }
    }
}

const TEXTURE_SIZE: usize = 1024;

/// Wrapping noise lattice sampled bilinearly.
struct Texture {
    cells: Vec<f32>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            cells: (0..TEXTURE_SIZE * TEXTURE_SIZE).map(|_| rng.gen_range(0.0f32..255.0)).collect(),
        }
    }

    fn cell(&self, x: i64, y: i64) -> f64 {
        let n = TEXTURE_SIZE as i64;
        self.cells[(y.rem_euclid(n) * n + x.rem_euclid(n)) as usize] as f64
    }

    fn sample(&self, u: f64, v: f64) -> f64 {
        let (fx, fy) = (u.floor(), v.floor());
        let (ax, ay) = (u - fx, v - fy);
        let (x, y) = (fx as i64, fy as i64);
        let top = self.cell(x, y) * (1.0 - ax) + self.cell(x + 1, y) * ax;
        let bot = self.cell(x, y + 1) * (1.0 - ax) + self.cell(x + 1, y + 1) * ax;
        top * (1.0 - ay) + bot * ay
    }
}

/// Where the ray through pixel `(x, y)` of a camera at `pose` meets the
/// background plane: `(texture u, texture v, depth)`.
fn hit_plane(cfg: &SynthConfig, pose: &RigidMotion, x: f64, y: f64) -> Option<(f64, f64, f64)> {
    let c = &cfg.calib;
    let dir = Vector3::new((x - c.cx) / c.focal_px, (y - c.cy) / c.focal_px, 1.0);
    let world_dir = pose.rotation * dir;
    let s = (cfg.plane_depth_m - pose.translation.z) / world_dir.z;
    if !(s > 0.0 && s.is_finite()) {
        return None;
    }
    let p = pose.translation + world_dir * s;
    let scale = c.focal_px / cfg.plane_depth_m;
    Some((p.x * scale + c.cx, p.y * scale + c.cy, s))
}

/// Renders the configured scene. Ground truth is exact: disparity from the
/// ray-plane depth, objects at their configured disparity.
pub fn synth_sequence(cfg: &SynthConfig) -> Result<Sequence> {
    let c = cfg.calib;
    c.validate()?;
    if cfg.trajectory.is_empty() {
        return Err(Error::Config("trajectory has no frames".into()));
    }
    if !(cfg.plane_depth_m > 0.0) || !(cfg.noise_sigma >= 0.0) {
        return Err(Error::Config("plane depth must be positive and noise non-negative".into()));
    }
    for o in &cfg.objects {
        if !(o.disparity_offset > 0.0) || o.width == 0 || o.height == 0 {
            return Err(Error::Config("objects need a size and a positive disparity offset".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let background = Texture::new(&mut rng);
    let object_tex: Vec<Texture> = cfg.objects.iter().map(|_| Texture::new(&mut rng)).collect();
    let (w, h) = (c.width, c.height);
    let d_max = c.d_max as f64;
    let fb = c.focal_px * c.baseline_m;

    let frames = cfg
        .trajectory
        .par_iter()
        .enumerate()
        .map(|(k, pose)| -> Result<SequenceFrame> {
            pose.validate()?;
            let right_pose = pose.compose(&RigidMotion::translation(Vector3::new(c.baseline_m, 0.0, 0.0)));
            // Object disparity is fixed per frame from the background under its center.
            let objects: Vec<(DetectionBox, (f64, f64), f64)> = cfg
                .objects
                .iter()
                .filter_map(|o| {
                    let fp = o.footprint(k, w, h)?;
                    let (ox, oy) = o.origin(k);
                    let cx = ox + o.width as f64 / 2.0;
                    let cy = oy + o.height as f64 / 2.0;
                    let depth = hit_plane(cfg, pose, cx, cy).map_or(cfg.plane_depth_m, |t| t.2);
                    Some((fp, (ox, oy), fb / depth + o.disparity_offset))
                })
                .collect();
            let object_at = |x: usize, y: usize| {
                objects
                    .iter()
                    .enumerate()
                    .filter(|(_, (fp, _, _))| fp.contains(x, y))
                    .max_by(|a, b| a.1 .2.total_cmp(&b.1 .2))
                    .map(|(i, &(_, o, d))| (i, o, d))
            };

            let mut left = vec![0.0f64; w * h];
            let mut right = vec![0.0f64; w * h];
            let mut gt = DisparityMap::invalid(w, h);
            for y in 0..h {
                for x in 0..w {
                    let idx = y * w + x;
                    let (xf, yf) = (x as f64, y as f64);
                    let (val, d) = match object_at(x, y) {
                        Some((i, (ox, oy), d)) => (object_tex[i].sample(xf - ox, yf - oy), d),
                        None => {
                            let (u, v, depth) = hit_plane(cfg, pose, xf, yf)
                                .ok_or_else(|| Error::Config(format!("frame {k}: camera does not see the plane")))?;
                            (background.sample(u, v), fb / depth)
                        }
                    };
                    if !(d > 0.0 && d < d_max) {
                        return Err(Error::Config(format!(
                            "frame {k}: disparity {d:.2} at ({x}, {y}) outside (0, {d_max})"
                        )));
                    }
                    left[idx] = val;
                    gt.set_at(idx, d as f32);

                    // Right view: the nearest surface wins.
                    let mut best: Option<(f64, f64)> = None;
                    for (i, &(fp, (ox, oy), d)) in objects.iter().enumerate() {
                        let xl = xf + d;
                        let xi = xl.round();
                        if xi >= 0.0 && (xi as usize) < w && fp.contains(xi as usize, y) && best.map_or(true, |b| d > b.0) {
                            best = Some((d, object_tex[i].sample(xl - ox, yf - oy)));
                        }
                    }
                    right[idx] = match best {
                        Some((_, v)) => v,
                        None => hit_plane(cfg, &right_pose, xf, yf)
                            .map_or(0.0, |(u, v, _)| background.sample(u, v)),
                    };
                }
            }

            let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k as u64 + 1)));
            let normal = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
                .map_err(|e| Error::Config(e.to_string()))?;
            let mut quantize = |buf: &[f64]| {
                let data = buf
                    .iter()
                    .map(|&v| {
                        let n = if cfg.noise_sigma > 0.0 { normal.sample(&mut noise) } else { 0.0 };
                        (v + n).round().clamp(0.0, 255.0) as u8
                    })
                    .collect();
                GrayImage::from_vec(w, h, data)
            };
            let left = quantize(&left)?;
            let right = quantize(&right)?;

            let gt_boxes = cfg
                .objects
                .iter()
                .filter(|o| k > 0 && o.velocity != (0.0, 0.0))
                .filter_map(|o| match (o.footprint(k - 1, w, h), o.footprint(k, w, h)) {
                    (Some(a), Some(b)) => Some(a.enclose(&b)),
                    (a, b) => a.or(b),
                })
                .collect();

            Ok(SequenceFrame {
                index: k,
                left,
                right,
                pose: Some(*pose),
                gt_disp: Some(gt),
                gt_boxes: Some(gt_boxes),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Sequence {
        calib: Some(c),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, triangulate};
    use crate::matching_cost::SearchRangeMap;
    use crate::sgm::{sgm_match, SgmParams};

    fn calib(w: usize, h: usize, d_max: usize) -> StereoCalib {
        StereoCalib::new(300.0, w as f64 / 2.0, h as f64 / 2.0, 0.5, w, h, d_max).unwrap()
    }

    #[test]
    fn static_plane_has_constant_gt_and_no_boxes() {
        let seq = synth_sequence(&SynthConfig::static_plane(calib(64, 48, 32), 20.0, 2)).unwrap();
        assert_eq!(seq.len(), 2);
        for f in &seq.frames {
            let gt = f.gt_disp.as_ref().unwrap();
            assert_eq!(gt.valid_count(), 64 * 48);
            assert!((0..gt.len()).all(|i| (gt.at(i).unwrap() - 20.0).abs() < 1e-4));
            assert!(f.gt_boxes.as_ref().unwrap().is_empty());
        }
        assert_eq!(seq.frames[0].left, seq.frames[1].left);
    }

    #[test]
    fn right_view_is_left_shifted_by_disparity() {
        let seq = synth_sequence(&SynthConfig::static_plane(calib(64, 48, 32), 12.0, 1)).unwrap();
        let f = &seq.frames[0];
        for y in 0..48 {
            for x in 0..52 {
                assert!((f.right.get(x, y) as i32 - f.left.get(x + 12, y) as i32).abs() <= 1);
            }
        }
    }

    #[test]
    fn moving_object_box_is_old_union_new() {
        let mut cfg = SynthConfig::static_plane(calib(120, 90, 64), 10.0, 3);
        cfg.objects.push(SynthObject {
            x: 20.0,
            y: 40.0,
            width: 30,
            height: 20,
            disparity_offset: 8.0,
            velocity: (3.0, 0.0),
        });
        let seq = synth_sequence(&cfg).unwrap();
        assert!(seq.frames[0].gt_boxes.as_ref().unwrap().is_empty());
        assert_eq!(seq.frames[1].gt_boxes.as_ref().unwrap(), &vec![DetectionBox::new(20, 40, 53, 60)]);
        assert_eq!(seq.frames[2].gt_boxes.as_ref().unwrap(), &vec![DetectionBox::new(23, 40, 56, 60)]);
        let gt = seq.frames[2].gt_disp.as_ref().unwrap();
        assert_eq!(gt.get(30, 50), Some(18.0));
        assert_eq!(gt.get(60, 50), Some(10.0));
        // The right view shows the object shifted left by its disparity.
        let f = &seq.frames[2];
        assert_eq!(f.right.get(40 - 18, 50), f.left.get(40, 50));
    }

    #[test]
    fn forward_motion_matches_projection() {
        let c = calib(80, 60, 64);
        let mut cfg = SynthConfig::static_plane(c, 15.0, 3);
        cfg.trajectory = (0..3)
            .map(|k| RigidMotion::translation(Vector3::new(0.0, 0.0, 0.6 * k as f64)))
            .collect();
        let seq = synth_sequence(&cfg).unwrap();
        for k in 1..3 {
            let motion = seq.motion(k).unwrap();
            let prev = seq.frames[k - 1].gt_disp.as_ref().unwrap();
            let cur = seq.frames[k].gt_disp.as_ref().unwrap();
            let (x, y) = (40.0, 30.0);
            let p = triangulate(x, y, prev.get(40, 30).unwrap() as f64, &c).unwrap();
            let (xp, yp, dp) = project(&motion.transform_point(&p), &c).unwrap();
            assert!((xp - x).abs() < 1e-9 && (yp - y).abs() < 1e-9);
            assert!((cur.get(40, 30).unwrap() as f64 - dp).abs() < 1e-3);
            assert!(cur.get(40, 30) > prev.get(40, 30));
        }
    }

    #[test]
    fn overflowing_disparity_is_config_error() {
        let cfg = SynthConfig::static_plane(calib(40, 30, 16), 20.0, 1);
        assert!(matches!(synth_sequence(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn full_range_sgm_recovers_synthetic_gt() {
        let c = calib(96, 64, 32);
        let mut cfg = SynthConfig::static_plane(c, 9.0, 1);
        cfg.objects.push(SynthObject {
            x: 40.0,
            y: 20.0,
            width: 24,
            height: 24,
            disparity_offset: 10.0,
            velocity: (0.0, 0.0),
        });
        let f = &synth_sequence(&cfg).unwrap().frames[0];
        let params = SgmParams {
            d_max: 32,
            ..SgmParams::default()
        };
        let est = sgm_match(&f.left, &f.right, &SearchRangeMap::full(96, 64, 32), &params).unwrap();
        let gt = f.gt_disp.as_ref().unwrap();
        let (mut good, mut total) = (0, 0);
        for y in 4..60 {
            for x in 36..92 {
                total += 1;
                if let (Some(e), Some(g)) = (est.get(x, y), gt.get(x, y)) {
                    if (e - g).abs() <= 1.0 {
                        good += 1;
                    }
                }
            }
        }
        assert!(good as f64 >= 0.95 * total as f64, "{good}/{total}");
    }

    #[test]
    fn disparity_png_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let map = DisparityMap::from_fn(3, 1, |x, _| [Some(1.0), None, Some(2.5)][x]);
        write_disparity_png(&path, &map).unwrap();
        let raw = image::open(&path).unwrap().into_luma16().into_raw();
        assert_eq!(raw, vec![256, 0, 640]);
        assert_eq!(read_disparity_png(&path).unwrap(), map);
    }

    #[test]
    fn disparity_png_roundtrip_random() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = DisparityMap::from_fn(40, 30, |_, _| rng.gen_bool(0.8).then(|| rng.gen_range(0.01f32..200.0)));
        write_disparity_png(&path, &map).unwrap();
        let back = read_disparity_png(&path).unwrap();
        for i in 0..map.len() {
            match (map.at(i), back.at(i)) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1.0 / 512.0 + 1e-6),
                (None, None) => {}
                other => panic!("validity changed at {i}: {other:?}"),
            }
        }
    }

    #[test]
    fn eight_bit_disparity_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        GrayImage::new(4, 4).save(&path).unwrap();
        assert!(matches!(read_disparity_png(&path), Err(Error::Format(_))));
    }

    fn three_frame_fixture() -> (tempfile::TempDir, Sequence) {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SynthConfig::static_plane(calib(48, 32, 32), 6.0, 3);
        cfg.trajectory = (0..3)
            .map(|k| RigidMotion::translation(Vector3::new(0.0, 0.0, 0.1 * k as f64)))
            .collect();
        cfg.objects.push(SynthObject {
            x: 5.0,
            y: 5.0,
            width: 10,
            height: 10,
            disparity_offset: 4.0,
            velocity: (2.0, 0.0),
        });
        let seq = synth_sequence(&cfg).unwrap();
        write_sequence(&seq, dir.path()).unwrap();
        (dir, seq)
    }

    #[test]
    fn write_then_load_roundtrip() {
        let (dir, seq) = three_frame_fixture();
        let opts = LoadOptions {
            d_max: 32,
            ..LoadOptions::default()
        };
        let back = load_kitti_sequence(dir.path(), &opts).unwrap();
        assert_eq!(back.frames.iter().map(|f| f.index).collect::<Vec<_>>(), vec![0, 1, 2]);
        let (c0, c1) = (seq.calib.unwrap(), back.calib.unwrap());
        assert!((c0.focal_px - c1.focal_px).abs() < 1e-9 && (c0.baseline_m - c1.baseline_m).abs() < 1e-9);
        assert_eq!((c1.width, c1.height, c1.d_max), (48, 32, 32));
        for (a, b) in seq.frames.iter().zip(&back.frames) {
            assert_eq!(a.left, b.left);
            assert_eq!(a.right, b.right);
            assert_eq!(a.gt_boxes, b.gt_boxes);
            let pa = a.pose.unwrap().to_row_major_3x4();
            let pb = b.pose.unwrap().to_row_major_3x4();
            assert!(pa.iter().zip(pb).all(|(x, y)| (x - y).abs() < 1e-12));
            let (ga, gb) = (a.gt_disp.as_ref().unwrap(), b.gt_disp.as_ref().unwrap());
            assert!((0..ga.len()).all(|i| (ga.at(i).unwrap() - gb.at(i).unwrap()).abs() <= 1.0 / 512.0));
        }
        assert_eq!(load_kitti_sequence(dir.path(), &opts).unwrap(), back);
    }

    #[test]
    fn gt_values_are_png_over_256() {
        let (dir, _) = three_frame_fixture();
        let gt = DisparityMap::from_fn(48, 32, |x, y| ((x + y) % 3 != 0).then(|| (x * 256 + y) as f32 / 256.0));
        write_disparity_png(dir.path().join("disp_gt").join(frame_name(1)), &gt).unwrap();
        let seq = load_kitti_sequence(dir.path(), &LoadOptions { d_max: 32, ..LoadOptions::default() }).unwrap();
        assert_eq!(seq.frames[1].gt_disp.as_ref().unwrap(), &gt);
    }

    #[test]
    fn missing_right_image_names_the_index() {
        let (dir, _) = three_frame_fixture();
        fs::remove_file(dir.path().join("image_01/data").join(frame_name(1))).unwrap();
        let err = load_kitti_sequence(dir.path(), &LoadOptions { d_max: 32, ..LoadOptions::default() }).unwrap_err();
        assert!(err.to_string().contains("frame 1"), "{err}");
    }

    #[test]
    fn color_folders_are_a_fallback() {
        let (dir, _) = three_frame_fixture();
        fs::rename(dir.path().join("image_00"), dir.path().join("image_02")).unwrap();
        fs::rename(dir.path().join("image_01"), dir.path().join("image_03")).unwrap();
        let seq = load_kitti_sequence(dir.path(), &LoadOptions { d_max: 32, ..LoadOptions::default() }).unwrap();
        assert_eq!(seq.len(), 3);
    }

    #[test]
    fn kitti_cam_to_cam_calibration() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib_cam_to_cam.txt");
        fs::write(
            &path,
            "calib_time: 09-Jan-2012 13:57:47\n\
             S_rect_00: 1.242000e+03 3.750000e+02\n\
             P_rect_00: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00\n\
             P_rect_01: 7.215377e+02 0.000000e+00 6.095593e+02 -3.875744e+02 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00\n",
        )
        .unwrap();
        let c = read_calib(&path, 1242, 375, 128).unwrap();
        assert!((c.focal_px - 721.5377).abs() < 1e-9);
        assert!((c.baseline_m - 0.537150).abs() < 1e-5);
        assert!(read_calib(&path, 640, 480, 128).is_err());
    }
}
