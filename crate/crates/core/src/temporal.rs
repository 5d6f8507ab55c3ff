//! Per-pixel scalar Kalman filter over disparity.
//!
//! Every frame the previous state is pushed through the ego-motion
//! homography, its variance is propagated, unreliable predictions are
//! dropped, the prediction sets each pixel's search interval for the
//! matcher, and the matcher's winner-takes-all output is fused back in.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::geometry::{disparity_homography, warp_with_sources, DisparityState, RigidMotion, StereoCalib};
use crate::matching_cost::SearchRangeMap;
use crate::raster::{DisparityMap, GrayImage, RealImage};
use crate::sgm::{median_refine, sgm_match_timed, SgmParams, SgmTimings};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    /// Process noise variance (px^2).
    pub q: f64,
    /// Measurement noise variance (px^2).
    pub r: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self { q: 0.5, r: 1.0 }
    }
}

/// How a predicted variance turns into a search half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RangeMode {
    /// Half-width equals the variance itself.
    Variance,
    /// Half-width is `k` standard deviations.
    StdDev { k: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub noise: NoiseParams,
    /// Variance standing for "anywhere in the disparity space".
    pub p_init: f64,
    /// Neighbor disparity jump (px) above which a prediction is dropped.
    pub disc_thresh: f64,
    /// Search intervals are never narrower than `2 * min_range_halfwidth + 1`.
    pub min_range_halfwidth: u16,
    pub range_mode: RangeMode,
}

impl FilterConfig {
    pub fn for_d_max(d_max: usize) -> Self {
        Self {
            noise: NoiseParams::default(),
            p_init: (d_max * d_max) as f64 / 4.0,
            disc_thresh: 2.0,
            min_range_halfwidth: 2,
            range_mode: RangeMode::Variance,
        }
    }

    pub fn validate(&self, d_max: usize) -> Result<()> {
        let NoiseParams { q, r } = self.noise;
        if !(q > 0.0 && q.is_finite()) || !(r > 0.0 && r.is_finite()) {
            return invalid(format!("noise variances must be positive, got q={q} r={r}"));
        }
        let floor = (d_max * d_max) as f64 / 4.0;
        if !(self.p_init >= floor) {
            return invalid(format!(
                "p_init={} does not cover the disparity space (needs >= {floor})",
                self.p_init
            ));
        }
        if !(self.disc_thresh >= 1.0) {
            return invalid(format!("disc_thresh must be >= 1, got {}", self.disc_thresh));
        }
        if let RangeMode::StdDev { k } = self.range_mode {
            if !(k > 0.0 && k.is_finite()) {
                return invalid(format!("range multiplier must be positive, got {k}"));
            }
        }
        Ok(())
    }
}

/// Ego-motion prediction: warp, variance transition, discontinuity
/// rejection, then zoom-hole filling.
pub fn predict(
    state: &DisparityState,
    motion: &RigidMotion,
    calib: &StereoCalib,
    cfg: &FilterConfig,
) -> Result<DisparityState> {
    if state.width() != calib.width || state.height() != calib.height {
        return invalid("state size does not match calibration");
    }
    let h = disparity_homography(motion, calib)?;
    let (mut warped, sources) = warp_with_sources(state, &h, calib);
    let q = cfg.noise.q;
    for (idx, &src_d) in sources.iter().enumerate() {
        if let Some((d, p)) = warped.at(idx) {
            let phi = d / src_d;
            warped.set_at(idx, d, phi * phi * p + q);
        }
    }
    Ok(fill_zoom_holes(&reject_discontinuities(&warped, cfg)))
}

/// Drops every valid pixel whose valid 4-neighbor differs by more than
/// `disc_thresh`.
pub fn reject_discontinuities(state: &DisparityState, cfg: &FilterConfig) -> DisparityState {
    let (w, h) = (state.width(), state.height());
    let mut out = state.clone();
    let jump = |a: usize, b: usize| match (state.at(a), state.at(b)) {
        (Some((da, _)), Some((db, _))) => (da - db).abs() > cfg.disc_thresh,
        _ => false,
    };
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            if state.at(idx).is_none() {
                continue;
            }
            let hit = (x > 0 && jump(idx, idx - 1))
                || (x + 1 < w && jump(idx, idx + 1))
                || (y > 0 && jump(idx, idx - w))
                || (y + 1 < h && jump(idx, idx + w));
            if hit {
                out.invalidate_at(idx);
            }
        }
    }
    out
}

/// Single pass: an invalid pixel flanked by valid pixels on both sides
/// (vertically or horizontally) takes the average of that pair, or of all
/// four when both pairs exist. Reads only the input state.
pub fn fill_zoom_holes(state: &DisparityState) -> DisparityState {
    let (w, h) = (state.width(), state.height());
    let mut out = state.clone();
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            if state.at(idx).is_some() {
                continue;
            }
            let horiz = (x > 0 && x + 1 < w)
                .then(|| state.at(idx - 1).zip(state.at(idx + 1)))
                .flatten();
            let vert = (y > 0 && y + 1 < h)
                .then(|| state.at(idx - w).zip(state.at(idx + w)))
                .flatten();
            let pairs: Vec<_> = [horiz, vert].into_iter().flatten().collect();
            if pairs.is_empty() {
                continue;
            }
            let n = 2.0 * pairs.len() as f64;
            let d = pairs.iter().map(|(a, b)| a.0 + b.0).sum::<f64>() / n;
            let p = pairs.iter().map(|(a, b)| a.1 + b.1).sum::<f64>() / n;
            out.set_at(idx, d, p);
        }
    }
    out
}

/// Search interval per pixel from the predicted mean and variance; the full
/// space where there is no prediction.
pub fn derive_search_ranges(state: &DisparityState, calib: &StereoCalib, cfg: &FilterConfig) -> SearchRangeMap {
    let (w, h) = (state.width(), state.height());
    let top = calib.d_max as i64 - 1;
    let min_width = (2 * cfg.min_range_halfwidth as i64 + 1).min(top + 1);
    let mut lo = vec![0u16; w * h];
    let mut hi = vec![top as u16; w * h];
    lo.par_iter_mut()
        .zip(hi.par_iter_mut())
        .enumerate()
        .for_each(|(idx, (l, u))| {
            let Some((d, p)) = state.at(idx) else { return };
            let half = match cfg.range_mode {
                RangeMode::Variance => p,
                RangeMode::StdDev { k } => k * p.sqrt(),
            };
            let mut a = ((d - half).floor() as i64).clamp(0, top);
            let mut b = ((d + half).ceil() as i64).clamp(0, top);
            let width = b - a + 1;
            if width < min_width {
                let deficit = min_width - width;
                a -= deficit / 2;
                b += deficit - deficit / 2;
                if a < 0 {
                    b -= a;
                    a = 0;
                }
                if b > top {
                    a -= b - top;
                    b = top;
                }
            }
            *l = a as u16;
            *u = b as u16;
        });
    SearchRangeMap::from_vecs(w, h, calib.d_max, lo, hi).expect("ranges are clamped into [0, d_max)")
}

/// Measurement update with `K = p / (p + r)`.
pub fn correct(pred: &DisparityState, meas: &DisparityMap, cfg: &FilterConfig) -> Result<DisparityState> {
    if pred.width() != meas.width() || pred.height() != meas.height() {
        return invalid("prediction and measurement sizes differ");
    }
    let r = cfg.noise.r;
    let mut out = DisparityState::invalid(pred.width(), pred.height());
    for idx in 0..pred.len() {
        match (pred.at(idx), meas.at(idx)) {
            (Some((d, p)), Some(z)) => {
                let k = p / (p + r);
                let d_post = d + k * (z as f64 - d);
                let p_post = (1.0 - k) * (1.0 - k) * p + k * k * r;
                out.set_at(idx, d_post, p_post);
            }
            (None, Some(z)) => out.set_at(idx, z as f64, r),
            (Some((d, p)), None) => out.set_at(idx, d, p),
            (None, None) => {}
        }
    }
    Ok(out)
}

/// `|d_pred - d_meas|` where both are valid, 0 elsewhere.
pub fn difference_map(pred: &DisparityState, meas: &DisparityMap) -> RealImage {
    let mut diff = RealImage::zeros(pred.width(), pred.height());
    for (idx, v) in diff.data_mut().iter_mut().enumerate() {
        if let (Some((d, _)), Some(z)) = (pred.at(idx), meas.at(idx)) {
            *v = (d - z as f64).abs();
        }
    }
    diff
}

/// Integer rendering of the fused state, median refined for export.
pub fn export_map(state: &DisparityState, d_max: usize) -> DisparityMap {
    let top = (d_max - 1) as f64;
    let mut map = DisparityMap::invalid(state.width(), state.height());
    for idx in 0..state.len() {
        if let Some((d, _)) = state.at(idx) {
            map.set_at(idx, d.round().clamp(0.0, top) as f32);
        }
    }
    median_refine(&map)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepTimings {
    pub predict: Duration,
    pub sgm: SgmTimings,
    pub correct: Duration,
}

impl StepTimings {
    pub fn total(&self) -> Duration {
        self.predict + self.sgm.total() + self.correct
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Posterior state, input to the next step.
    pub state: DisparityState,
    pub prediction: DisparityState,
    pub ranges: SearchRangeMap,
    /// Raw winner-takes-all measurement.
    pub measurement: DisparityMap,
    /// Median-refined integer map for export; never fed back.
    pub export: DisparityMap,
    pub diff: RealImage,
    pub timings: StepTimings,
}

/// One filter iteration: predict, derive ranges, match, correct.
pub fn step(
    state: &DisparityState,
    left: &GrayImage,
    right: &GrayImage,
    motion: &RigidMotion,
    calib: &StereoCalib,
    params: &SgmParams,
    cfg: &FilterConfig,
) -> Result<StepOutput> {
    if left.width() != calib.width || left.height() != calib.height {
        return invalid(format!(
            "image is {}x{} but calibration says {}x{}",
            left.width(),
            left.height(),
            calib.width,
            calib.height
        ));
    }
    if params.d_max != calib.d_max {
        return invalid("matcher and calibration disagree on d_max");
    }
    let t0 = Instant::now();
    let prediction = predict(state, motion, calib, cfg)?;
    let ranges = derive_search_ranges(&prediction, calib, cfg);
    let t_predict = t0.elapsed();

    let (measurement, sgm) = sgm_match_timed(left, right, &ranges, params)?;

    let t0 = Instant::now();
    let posterior = correct(&prediction, &measurement, cfg)?;
    let t_correct = t0.elapsed();

    let export = export_map(&posterior, calib.d_max);
    let diff = difference_map(&prediction, &measurement);
    Ok(StepOutput {
        state: posterior,
        prediction,
        ranges,
        measurement,
        export,
        diff,
        timings: StepTimings {
            predict: t_predict,
            sgm,
            correct: t_correct,
        },
    })
}

/// Owns the filter state of one camera stream.
#[derive(Debug, Clone)]
pub struct TemporalPipeline {
    calib: StereoCalib,
    params: SgmParams,
    cfg: FilterConfig,
    state: DisparityState,
}

impl TemporalPipeline {
    pub fn new(calib: StereoCalib, params: SgmParams, cfg: FilterConfig) -> Result<Self> {
        calib.validate()?;
        params.validate()?;
        cfg.validate(calib.d_max)?;
        if params.d_max != calib.d_max {
            return invalid("matcher and calibration disagree on d_max");
        }
        Ok(Self {
            state: DisparityState::invalid(calib.width, calib.height),
            calib,
            params,
            cfg,
        })
    }

    pub fn state(&self) -> &DisparityState {
        &self.state
    }

    pub fn calib(&self) -> &StereoCalib {
        &self.calib
    }

    /// Forgets everything; the next frame is matched over the full range.
    pub fn reset(&mut self) {
        self.state = DisparityState::invalid(self.calib.width, self.calib.height);
    }

    /// `motion` is the camera's ego-motion since the previous frame; ignored
    /// on the first frame.
    pub fn step(&mut self, left: &GrayImage, right: &GrayImage, motion: &RigidMotion) -> Result<StepOutput> {
        let out = step(&self.state, left, right, motion, &self.calib, &self.params, &self.cfg)?;
        self.state = out.state.clone();
        Ok(out)
    }
}
