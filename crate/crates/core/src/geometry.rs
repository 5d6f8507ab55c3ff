//! Rectified stereo geometry in disparity space.
//!
//! A pixel `(x, y)` with disparity `d` of a rectified pair is a homogeneous
//! point `(x, y, d, 1)` of disparity space. Rigid camera motion acts on those
//! points as a 4x4 linear map, which is what lets the temporal filter predict
//! a whole disparity image from the previous one.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{invalid, Result};

/// Intrinsics of a rectified pair plus the disparity search bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoCalib {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline_m: f64,
    pub width: usize,
    pub height: usize,
    /// Number of disparity levels; valid disparities lie in `[0, d_max)`.
    pub d_max: usize,
}

impl StereoCalib {
    pub fn new(
        focal_px: f64,
        cx: f64,
        cy: f64,
        baseline_m: f64,
        width: usize,
        height: usize,
        d_max: usize,
    ) -> Result<Self> {
        let calib = Self {
            focal_px,
            cx,
            cy,
            baseline_m,
            width,
            height,
            d_max,
        };
        calib.validate()?;
        Ok(calib)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px > 0.0 && self.focal_px.is_finite()) {
            return invalid(format!("focal length must be positive, got {}", self.focal_px));
        }
        if !(self.baseline_m > 0.0 && self.baseline_m.is_finite()) {
            return invalid(format!("baseline must be positive, got {}", self.baseline_m));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return invalid(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            ));
        }
        if self.d_max == 0 || self.d_max > u16::MAX as usize {
            return invalid(format!("d_max must be in 1..=65535, got {}", self.d_max));
        }
        Ok(())
    }

    /// Disparity of a point at depth `z` meters.
    pub fn disparity_at_depth(&self, z: f64) -> f64 {
        self.focal_px * self.baseline_m / z
    }
}

/// Rigid transform. As ego-motion it is the pose of the current camera
/// expressed in the previous camera's frame; as an absolute pose it is
/// camera-to-world (KITTI odometry convention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ORTHO_TOL: f64 = 1e-9;

impl RigidMotion {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let motion = Self {
            rotation,
            translation,
        };
        motion.validate()?;
        Ok(motion)
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation by `angle` radians about `axis` followed by `t`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation: t,
        }
    }

    /// Parses 12 numbers as a row-major `[R | t]`.
    pub fn from_row_major_3x4(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return invalid(format!("pose needs 12 values, got {}", v.len()));
        }
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        Self::new(rotation, translation)
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let gram = r.transpose() * r;
        if (gram - Matrix3::identity()).abs().max() > ORTHO_TOL {
            return invalid("rotation is not orthonormal");
        }
        if (r.determinant() - 1.0).abs() > ORTHO_TOL {
            return invalid("rotation determinant is not +1");
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return invalid("translation is not finite");
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self` followed by `next`, both read as poses: `self * next`.
    pub fn compose(&self, next: &RigidMotion) -> Self {
        Self {
            rotation: self.rotation * next.rotation,
            translation: self.rotation * next.translation + self.translation,
        }
    }

    /// Ego-motion between two absolute camera-to-world poses.
    pub fn between_poses(prev: &RigidMotion, cur: &RigidMotion) -> Self {
        prev.inverse().compose(cur)
    }

    /// Maps a point from the previous camera frame into the current one.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Homogeneous matrix acting on points of the previous frame.
    pub fn point_transform(&self) -> Matrix4<f64> {
        let inv = self.inverse();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&inv.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&inv.translation);
        m
    }
}

/// Back-projects a pixel with disparity `d` to a 3D point in the camera frame.
pub fn triangulate(x: f64, y: f64, d: f64, calib: &StereoCalib) -> Result<Vector3<f64>> {
    if !(d > 0.0) {
        return invalid(format!("cannot triangulate non-positive disparity {d}"));
    }
    let z = calib.focal_px * calib.baseline_m / d;
    Ok(Vector3::new(
        (x - calib.cx) * z / calib.focal_px,
        (y - calib.cy) * z / calib.focal_px,
        z,
    ))
}

/// Projects a camera-frame point to `(x, y, d)`.
pub fn project(p: &Vector3<f64>, calib: &StereoCalib) -> Result<(f64, f64, f64)> {
    if !(p.z > 0.0) {
        return invalid(format!("point behind the camera (z = {})", p.z));
    }
    let f = calib.focal_px;
    Ok((
        f * p.x / p.z + calib.cx,
        f * p.y / p.z + calib.cy,
        f * calib.baseline_m / p.z,
    ))
}

/// Reprojection matrix taking `(x, y, d, 1)` to homogeneous 3D.
fn reprojection(calib: &StereoCalib) -> Matrix4<f64> {
    let (f, b) = (calib.focal_px, calib.baseline_m);
    #[rustfmt::skip]
    let q = Matrix4::new(
        1.0, 0.0, 0.0, -calib.cx,
        0.0, 1.0, 0.0, -calib.cy,
        0.0, 0.0, 0.0, f,
        0.0, 0.0, 1.0 / b, 0.0,
    );
    q
}

/// Closed-form inverse of [`reprojection`].
fn reprojection_inverse(calib: &StereoCalib) -> Matrix4<f64> {
    let (f, b) = (calib.focal_px, calib.baseline_m);
    #[rustfmt::skip]
    let q_inv = Matrix4::new(
        1.0, 0.0, calib.cx / f, 0.0,
        0.0, 1.0, calib.cy / f, 0.0,
        0.0, 0.0, 0.0, b,
        0.0, 0.0, 1.0 / f, 0.0,
    );
    q_inv
}

/// Frame-to-frame map on homogeneous disparity-space points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispHomography {
    pub m: Matrix4<f64>,
}

impl DispHomography {
    pub fn identity() -> Self {
        Self {
            m: Matrix4::identity(),
        }
    }

    /// Maps `(x, y, d)`; `None` when the point lands on the plane at infinity.
    #[inline]
    pub fn apply(&self, x: f64, y: f64, d: f64) -> Option<(f64, f64, f64)> {
        let h = self.m * Vector4::new(x, y, d, 1.0);
        if h[3].abs() < f64::MIN_POSITIVE || !h[3].is_finite() {
            return None;
        }
        Some((h[0] / h[3], h[1] / h[3], h[2] / h[3]))
    }
}

/// Builds `Q^-1 * T * Q` for the given ego-motion, scaled so that the
/// disparity row reads `(0, 0, 1, 0)`.
pub fn disparity_homography(motion: &RigidMotion, calib: &StereoCalib) -> Result<DispHomography> {
    if !(calib.focal_px > 0.0) || !(calib.baseline_m > 0.0) {
        return invalid("singular calibration: focal length and baseline must be positive");
    }
    motion.validate()?;
    if motion.is_identity() {
        return Ok(DispHomography::identity());
    }
    let m = reprojection_inverse(calib) * motion.point_transform() * reprojection(calib);
    let scale = m[(2, 2)];
    if !(scale > 0.0) {
        return invalid("degenerate disparity homography");
    }
    Ok(DispHomography { m: m / scale })
}

/// Per-pixel disparity mean, variance and validity: the filter state image.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityState {
    width: usize,
    height: usize,
    d: Vec<f64>,
    p: Vec<f64>,
    valid: Vec<bool>,
}

impl DisparityState {
    pub fn invalid(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            d: vec![0.0; n],
            p: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    /// Every pixel valid with the same mean and variance.
    pub fn uniform(width: usize, height: usize, d: f64, p: f64) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            d: vec![d; n],
            p: vec![p; n],
            valid: vec![true; n],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> Option<(f64, f64)>,
    ) -> Self {
        let mut s = Self::invalid(width, height);
        for y in 0..height {
            for x in 0..width {
                if let Some((d, p)) = f(x, y) {
                    s.set(x, y, d, p);
                }
            }
        }
        s
    }

    /// Lifts a disparity map into a state with a fixed variance.
    pub fn from_map(map: &crate::raster::DisparityMap, variance: f64) -> Self {
        let mut s = Self::invalid(map.width(), map.height());
        for idx in 0..map.len() {
            if let Some(d) = map.at(idx) {
                s.set_at(idx, d as f64, variance);
            }
        }
        s
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        self.at(y * self.width + x)
    }

    #[inline]
    pub fn at(&self, idx: usize) -> Option<(f64, f64)> {
        self.valid[idx].then(|| (self.d[idx], self.p[idx]))
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f64, p: f64) {
        let idx = y * self.width + x;
        self.set_at(idx, d, p);
    }

    #[inline]
    pub fn set_at(&mut self, idx: usize, d: f64, p: f64) {
        self.d[idx] = d;
        self.p[idx] = p;
        self.valid[idx] = true;
    }

    #[inline]
    pub fn invalidate_at(&mut self, idx: usize) {
        self.d[idx] = 0.0;
        self.p[idx] = 0.0;
        self.valid[idx] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Disparity map view of the mean.
    pub fn to_map(&self) -> crate::raster::DisparityMap {
        let mut map = crate::raster::DisparityMap::invalid(self.width, self.height);
        for idx in 0..self.len() {
            if let Some((d, _)) = self.at(idx) {
                map.set_at(idx, d as f32);
            }
        }
        map
    }
}

/// One surviving source pixel after the forward warp.
#[derive(Debug, Clone, Copy)]
struct Splat {
    target: usize,
    d: f64,
    p: f64,
    src_d: f64,
    src: usize,
}

impl Splat {
    /// Nearer surface wins; equal disparities fall back to the lower source
    /// index so the result never depends on traversal order.
    fn beats(&self, other: &Splat) -> bool {
        self.d > other.d || (self.d == other.d && self.src < other.src)
    }
}

/// Forward warp that also reports, per target pixel, the disparity of the
/// source pixel that landed there (needed for the variance transition).
pub(crate) fn warp_with_sources(
    state: &DisparityState,
    h: &DispHomography,
    calib: &StereoCalib,
) -> (DisparityState, Vec<f64>) {
    let (w, ht) = (state.width, state.height);
    let d_max = calib.d_max as f64;

    let splats: Vec<Splat> = (0..ht)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).filter_map(move |x| {
                let src = y * w + x;
                let (d, p) = state.at(src)?;
                let (xt, yt, dt) = h.apply(x as f64, y as f64, d)?;
                if !(dt > 0.0 && dt < d_max) {
                    return None;
                }
                let (xr, yr) = (xt.round(), yt.round());
                if !(xr >= 0.0 && yr >= 0.0 && xr < w as f64 && yr < ht as f64) {
                    return None;
                }
                Some(Splat {
                    target: yr as usize * w + xr as usize,
                    d: dt,
                    p,
                    src_d: d,
                    src,
                })
            })
        })
        .collect();

    let mut best: Vec<Option<Splat>> = vec![None; w * ht];
    for s in splats {
        let slot = &mut best[s.target];
        match slot {
            Some(cur) if !s.beats(cur) => {}
            _ => *slot = Some(s),
        }
    }

    let mut out = DisparityState::invalid(w, ht);
    let mut sources = vec![0.0; w * ht];
    for (idx, s) in best.into_iter().enumerate() {
        if let Some(s) = s {
            out.set_at(idx, s.d, s.p);
            sources[idx] = s.src_d;
        }
    }
    (out, sources)
}

/// Forward-warps the state image through `h`. Variance is carried unchanged.
pub fn warp_state(state: &DisparityState, h: &DispHomography, calib: &StereoCalib) -> DisparityState {
    warp_with_sources(state, h, calib).0
}
