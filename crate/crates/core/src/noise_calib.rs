//! Offline estimation of the filter's process noise `q` and measurement
//! noise `r` from sequences with ground-truth disparity.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataset::{Sequence, SequenceFrame};
use crate::error::{invalid, Error, Result};
use crate::geometry::{disparity_homography, warp_state, DisparityState, StereoCalib};
use crate::matching_cost::SearchRangeMap;
use crate::raster::{DisparityMap, RealImage};
use crate::sgm::{sgm_match, SgmParams};

/// Errors beyond this magnitude (px) are histogrammed but kept out of the
/// mean and variance.
pub const ERROR_GATE: f64 = 10.0;
pub const BIN_WIDTH: f64 = 0.5;
/// Lower bound applied to a degenerate process-noise estimate.
pub const Q_FLOOR: f64 = 0.1;

/// Pooled signed disparity errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorHistogram {
    counts: Vec<u64>,
    underflow: u64,
    overflow: u64,
    within_one: u64,
    gated: u64,
    mean: f64,
    m2: f64,
}

impl Default for ErrorHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl ErrorHistogram {
    pub fn new() -> Self {
        let bins = (2.0 * ERROR_GATE / BIN_WIDTH) as usize;
        Self {
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
            within_one: 0,
            gated: 0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    /// Bin edges from `-ERROR_GATE` to `ERROR_GATE`.
    pub fn edges(&self) -> Vec<f64> {
        (0..=self.counts.len()).map(|i| -ERROR_GATE + i as f64 * BIN_WIDTH).collect()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Samples below the first edge and above the last.
    pub fn outside(&self) -> (u64, u64) {
        (self.underflow, self.overflow)
    }

    pub fn add(&mut self, e: f64) {
        if e.abs() <= 1.0 {
            self.within_one += 1;
        }
        if e < -ERROR_GATE {
            self.underflow += 1;
        } else if e > ERROR_GATE {
            self.overflow += 1;
        } else {
            let bin = (((e + ERROR_GATE) / BIN_WIDTH) as usize).min(self.counts.len() - 1);
            self.counts[bin] += 1;
            self.gated += 1;
            let delta = e - self.mean;
            self.mean += delta / self.gated as f64;
            self.m2 += delta * (e - self.mean);
        }
    }

    pub fn merge(&mut self, other: &ErrorHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        self.within_one += other.within_one;
        let n = self.gated + other.gated;
        if n > 0 {
            let delta = other.mean - self.mean;
            let (na, nb) = (self.gated as f64, other.gated as f64);
            self.mean += delta * nb / n as f64;
            self.m2 += other.m2 + delta * delta * na * nb / n as f64;
        }
        self.gated = n;
    }

    /// Every sample added, including those outside the gate.
    pub fn total(&self) -> u64 {
        self.gated + self.underflow + self.overflow
    }

    /// Samples inside the gate.
    pub fn gated(&self) -> u64 {
        self.gated
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample variance of the gated errors; 0 with fewer than two.
    pub fn variance(&self) -> f64 {
        if self.gated < 2 {
            0.0
        } else {
            self.m2 / (self.gated - 1) as f64
        }
    }

    /// Share of all samples with `|e| <= 1`.
    pub fn fraction_within_one(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.within_one as f64 / n as f64,
        }
    }

    fn from_errors(errors: impl IntoIterator<Item = f64>) -> Self {
        let mut h = Self::new();
        for e in errors {
            h.add(e);
        }
        h
    }
}

fn require_gt(f: &SequenceFrame) -> Result<&DisparityMap> {
    f.gt_disp
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("frame {} has no ground truth", f.index)))
}

/// Signed `warped GT(k-1) - GT(k)` per pixel, `None` where either is missing.
fn transfer_errors(seq: &Sequence, calib: &StereoCalib, k: usize) -> Result<Vec<Option<f64>>> {
    let (prev, cur) = (&seq.frames[k - 1], &seq.frames[k]);
    let motion = seq
        .motion(k)
        .ok_or_else(|| Error::InvalidArgument(format!("frame {} or {} has no pose", prev.index, cur.index)))?;
    let gt_prev = require_gt(prev)?;
    let gt_cur = require_gt(cur)?;
    let h = disparity_homography(&motion, calib)?;
    let warped = warp_state(&DisparityState::from_map(gt_prev, 0.0), &h, calib);
    Ok((0..warped.len())
        .map(|i| Some(warped.at(i)?.0 - gt_cur.at(i)? as f64))
        .collect())
}

fn check_pairs(seq: &Sequence) -> Result<StereoCalib> {
    if seq.len() < 2 {
        return invalid(format!("need at least 2 frames, got {}", seq.len()));
    }
    seq.calib_or_err()
}

/// Variance of the GT-to-GT transfer error through the ego-motion warp.
/// The caller should apply [`Q_FLOOR`] to a degenerate result.
pub fn estimate_process_noise(seq: &Sequence) -> Result<(f64, ErrorHistogram)> {
    let calib = check_pairs(seq)?;
    let hists = (1..seq.len())
        .into_par_iter()
        .map(|k| Ok(ErrorHistogram::from_errors(transfer_errors(seq, &calib, k)?.into_iter().flatten())))
        .collect::<Result<Vec<_>>>()?;
    pooled(hists, "no pixel is valid in both warped and current ground truth")
}

/// Variance of full-range matcher output against GT, each frame matched as
/// if it started the sequence.
pub fn estimate_measurement_noise(seq: &Sequence, params: &SgmParams) -> Result<(f64, ErrorHistogram)> {
    if seq.is_empty() {
        return invalid("need at least 1 frame");
    }
    let hists = seq
        .frames
        .par_iter()
        .map(|f| {
            let gt = require_gt(f)?;
            let ranges = SearchRangeMap::full(f.left.width(), f.left.height(), params.d_max);
            let est = sgm_match(&f.left, &f.right, &ranges, params)?;
            if gt.width() != est.width() || gt.height() != est.height() {
                return invalid(format!("frame {}: ground truth size differs", f.index));
            }
            Ok(ErrorHistogram::from_errors(
                (0..est.len()).filter_map(|i| Some(est.at(i)? as f64 - gt.at(i)? as f64)),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    pooled(hists, "no pixel is valid in both estimate and ground truth")
}

fn pooled(hists: Vec<ErrorHistogram>, empty_msg: &str) -> Result<(f64, ErrorHistogram)> {
    let mut all = ErrorHistogram::new();
    for h in &hists {
        all.merge(h);
    }
    if all.total() == 0 {
        return Err(Error::EmptyData(empty_msg.into()));
    }
    Ok((all.variance(), all))
}

/// Adds `|warped GT - GT|` of every consecutive pair to `acc`.
pub fn accumulate_error_into(acc: &mut RealImage, seq: &Sequence) -> Result<()> {
    let calib = check_pairs(seq)?;
    if acc.width() != calib.width || acc.height() != calib.height {
        return invalid("accumulator size does not match the sequence");
    }
    let per_pair = (1..seq.len())
        .into_par_iter()
        .map(|k| transfer_errors(seq, &calib, k))
        .collect::<Result<Vec<_>>>()?;
    for errors in per_pair {
        for (v, e) in acc.data_mut().iter_mut().zip(errors) {
            if let Some(e) = e {
                *v += e.abs();
            }
        }
    }
    Ok(())
}

pub fn accumulate_error_map(seq: &Sequence) -> Result<RealImage> {
    let calib = check_pairs(seq)?;
    let mut acc = RealImage::zeros(calib.width, calib.height);
    accumulate_error_into(&mut acc, seq)?;
    Ok(acc)
}

/// Renders estimates as a report whose `q = ` / `r = ` lines are valid
/// config entries; everything else is a `#` comment.
pub fn format_report(q: Option<&(f64, ErrorHistogram)>, r: Option<&(f64, ErrorHistogram)>) -> String {
    let mut out = String::new();
    let mut section = |name: &str, what: &str, est: &(f64, ErrorHistogram), floor: Option<f64>| {
        let (v, h) = est;
        let value = floor.map_or(*v, |f| v.max(f));
        let _ = writeln!(out, "# {what}");
        if value != *v {
            let _ = writeln!(out, "# raw estimate {v:.6} raised to floor {value}");
        }
        let _ = writeln!(out, "{name} = {value:.6}");
        let _ = writeln!(
            out,
            "# samples {}  gated {}  mean {:.4}  within +-1 px {:.4}%",
            h.total(),
            h.gated(),
            h.mean(),
            100.0 * h.fraction_within_one()
        );
        let (under, over) = h.outside();
        let _ = writeln!(out, "# {:>7} {:>7} {:>10}", "from", "to", "count");
        let _ = writeln!(out, "# {:>7} {:>7.1} {:>10}", "-inf", -ERROR_GATE, under);
        let edges = h.edges();
        for (i, c) in h.counts().iter().enumerate() {
            let _ = writeln!(out, "# {:>7.1} {:>7.1} {:>10}", edges[i], edges[i + 1], c);
        }
        let _ = writeln!(out, "# {:>7.1} {:>7} {:>10}", ERROR_GATE, "inf", over);
    };
    if let Some(q) = q {
        section("q", "process noise (px^2)", q, Some(Q_FLOOR));
    }
    if let Some(r) = r {
        section("r", "measurement noise (px^2)", r, None);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_sequence, SynthConfig};
    use crate::geometry::RigidMotion;
    use crate::raster::GrayImage;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn calib(w: usize, h: usize, d_max: usize) -> StereoCalib {
        StereoCalib::new(300.0, w as f64 / 2.0, h as f64 / 2.0, 0.5, w, h, d_max).unwrap()
    }

    fn sample_variance(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    }

    #[test]
    fn histogram_statistics() {
        let errs = [0.0, 0.5, -0.5, 1.0, -3.0, 12.0, -11.0, 10.0];
        let h = ErrorHistogram::from_errors(errs);
        assert_eq!(h.total(), 8);
        assert_eq!(h.outside(), (1, 1));
        assert_eq!(h.counts().iter().sum::<u64>(), 6);
        assert_eq!(h.fraction_within_one(), 4.0 / 8.0);
        let inside = [0.0, 0.5, -0.5, 1.0, -3.0, 10.0];
        assert!((h.variance() - sample_variance(&inside)).abs() < 1e-12);
        // 10.0 lands in the last bin, 0.0 in [0, 0.5).
        assert_eq!(h.counts()[39], 1);
        assert_eq!(h.counts()[20], 1);
        assert_eq!(h.counts()[21], 1);
    }

    proptest! {
        #[test]
        fn merge_matches_single_pass(a in prop::collection::vec(-15.0f64..15.0, 0..60), b in prop::collection::vec(-15.0f64..15.0, 0..60)) {
            let mut m = ErrorHistogram::from_errors(a.iter().copied());
            m.merge(&ErrorHistogram::from_errors(b.iter().copied()));
            let one = ErrorHistogram::from_errors(a.iter().chain(&b).copied());
            prop_assert_eq!(m.counts(), one.counts());
            prop_assert_eq!(m.total(), one.total());
            prop_assert_eq!(m.total() as usize, a.len() + b.len());
            prop_assert!((m.variance() - one.variance()).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&m.fraction_within_one()));
        }
    }

    #[test]
    fn identical_frames_give_zero_q() {
        let seq = synth_sequence(&SynthConfig::static_plane(calib(40, 30, 32), 10.0, 3)).unwrap();
        let (q, h) = estimate_process_noise(&seq).unwrap();
        assert_eq!(q, 0.0);
        assert_eq!(h.total(), 2 * 40 * 30);
        assert_eq!(h.fraction_within_one(), 1.0);
        assert!(accumulate_error_map(&seq).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn process_noise_preconditions() {
        let seq = synth_sequence(&SynthConfig::static_plane(calib(40, 30, 32), 10.0, 1)).unwrap();
        assert!(matches!(estimate_process_noise(&seq), Err(Error::InvalidArgument(_))));
        let mut seq = synth_sequence(&SynthConfig::static_plane(calib(40, 30, 32), 10.0, 2)).unwrap();
        seq.frames[1].gt_disp = Some(DisparityMap::invalid(40, 30));
        assert!(matches!(estimate_process_noise(&seq), Err(Error::EmptyData(_))));
        seq.frames[1].pose = None;
        assert!(estimate_process_noise(&seq).is_err());
    }

    #[test]
    fn perfect_pair_has_zero_measurement_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h, shift) = (60, 40, 7);
        let left = GrayImage::from_fn(w, h, |_, _| rng.gen());
        let right = GrayImage::from_fn(w, h, |x, y| if x + shift < w { left.get(x + shift, y) } else { 0 });
        let margin = 2;
        let gt = DisparityMap::from_fn(w, h, |x, y| {
            (x >= shift + margin + 8 && x + margin < w && y >= margin && y + margin < h).then_some(shift as f32)
        });
        let seq = Sequence {
            calib: Some(calib(w, h, 16)),
            frames: vec![SequenceFrame {
                index: 0,
                left,
                right,
                pose: None,
                gt_disp: Some(gt),
                gt_boxes: None,
            }],
        };
        let params = SgmParams { d_max: 16, ..SgmParams::default() };
        let (r, hist) = estimate_measurement_noise(&seq, &params).unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(hist.fraction_within_one(), 1.0);
    }

    #[test]
    fn measurement_noise_ignores_frame_order() {
        let c = calib(64, 48, 32);
        let mut cfg = SynthConfig::static_plane(c, 9.0, 3);
        cfg.noise_sigma = 6.0;
        cfg.trajectory = (0..3).map(|k| RigidMotion::translation(Vector3::new(0.0, 0.0, 0.3 * k as f64))).collect();
        let seq = synth_sequence(&cfg).unwrap();
        let params = SgmParams { d_max: 32, ..SgmParams::default() };
        let (r1, h1) = estimate_measurement_noise(&seq, &params).unwrap();
        let mut rev = seq.clone();
        rev.frames.reverse();
        let (r2, h2) = estimate_measurement_noise(&rev, &params).unwrap();
        assert_eq!(h1.counts(), h2.counts());
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn accumulation_is_additive_and_peaks_at_edges() {
        let c = calib(80, 60, 64);
        let mut cfg = SynthConfig::static_plane(c, 10.0, 3);
        cfg.objects.push(crate::dataset::SynthObject {
            x: 30.0,
            y: 25.0,
            width: 20,
            height: 20,
            disparity_offset: 10.0,
            velocity: (0.0, 0.0),
        });
        cfg.trajectory = (0..3)
            .map(|k| RigidMotion::translation(Vector3::new(0.05 * k as f64, 0.0, 0.0)))
            .collect();
        let seq = synth_sequence(&cfg).unwrap();
        let once = accumulate_error_map(&seq).unwrap();
        let mut twice = once.clone();
        accumulate_error_into(&mut twice, &seq).unwrap();
        assert!(once.data().iter().zip(twice.data()).all(|(a, b)| *b == 2.0 * a));

        // The object does not move with the scene, so its edges carry the error.
        let max = once.max();
        assert!(max > 1.0);
        for y in 0..60 {
            for x in 0..80 {
                if once.get(x, y) == max {
                    let near_edge = (26..=52).contains(&x) && (23..=47).contains(&y);
                    assert!(near_edge, "max at ({x}, {y})");
                }
            }
        }
    }

    #[test]
    fn report_lines_are_config_entries() {
        let h = ErrorHistogram::from_errors([0.1, -0.1]);
        let text = format_report(Some(&(0.0, h.clone())), Some(&(1.25, h)));
        let keys: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(keys, vec!["q = 0.100000", "r = 1.250000"]);
    }
}
