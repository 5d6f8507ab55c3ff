//! KITTI outlier metric and full-space vs reduced-space benchmarking.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::dataset::Sequence;
use crate::detect::{detect_in_diff, DetectConfig};
use crate::error::{invalid, Error, Result};
use crate::geometry::RigidMotion;
use crate::matching_cost::SearchRangeMap;
use crate::raster::DisparityMap;
use crate::sgm::{median_refine, sgm_match_timed, SgmParams};
use crate::temporal::{FilterConfig, TemporalPipeline};

pub const OUTLIER_ABS_PX: f64 = 3.0;
pub const OUTLIER_REL: f64 = 0.05;

/// Outlier and evaluated pixel counts; pooled across frames by addition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OutlierCount {
    pub outliers: u64,
    pub evaluated: u64,
}

impl OutlierCount {
    pub fn add(&mut self, other: OutlierCount) {
        self.outliers += other.outliers;
        self.evaluated += other.evaluated;
    }

    pub fn percent(&self) -> Option<f64> {
        (self.evaluated > 0).then(|| 100.0 * self.outliers as f64 / self.evaluated as f64)
    }
}

#[inline]
fn is_outlier(est: f64, gt: f64) -> bool {
    let err = (est - gt).abs();
    err > OUTLIER_ABS_PX && err > OUTLIER_REL * gt.abs()
}

/// Counts over pixels with ground truth. Without `strict`, pixels missing
/// from the estimate are skipped; with it they count as outliers.
pub fn count_outliers(est: &DisparityMap, gt: &DisparityMap, strict: bool) -> Result<OutlierCount> {
    if est.width() != gt.width() || est.height() != gt.height() {
        return invalid(format!(
            "estimate is {}x{} but ground truth is {}x{}",
            est.width(),
            est.height(),
            gt.width(),
            gt.height()
        ));
    }
    let mut c = OutlierCount::default();
    for i in 0..gt.len() {
        let Some(g) = gt.at(i) else { continue };
        match est.at(i) {
            Some(e) => {
                c.evaluated += 1;
                if is_outlier(e as f64, g as f64) {
                    c.outliers += 1;
                }
            }
            None if strict => {
                c.evaluated += 1;
                c.outliers += 1;
            }
            None => {}
        }
    }
    Ok(c)
}

/// Percentage of outliers; error when nothing overlaps.
pub fn outlier_rate(est: &DisparityMap, gt: &DisparityMap, strict: bool) -> Result<f64> {
    count_outliers(est, gt, strict)?
        .percent()
        .ok_or_else(|| Error::EmptyData("no pixel has both estimate and ground truth".into()))
}

/// Per-stage wall-clock time of one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FrameTimings {
    pub census: Duration,
    pub cost: Duration,
    pub aggregate: Duration,
    pub wta: Duration,
    pub predict: Duration,
    pub correct: Duration,
    pub detect: Duration,
}

impl FrameTimings {
    pub fn total(&self) -> Duration {
        self.census + self.cost + self.aggregate + self.wta + self.predict + self.correct + self.detect
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub index: usize,
    pub outliers: Option<OutlierCount>,
    /// Share of pixels with an estimate, percent.
    pub density_pct: f64,
    pub timings: FrameTimings,
}

impl FrameReport {
    pub fn outlier_pct(&self) -> Option<f64> {
        self.outliers.and_then(|c| c.percent())
    }

    pub fn total_s(&self) -> f64 {
        self.timings.total().as_secs_f64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BenchmarkMethod {
    /// The ground truth scored against itself; checks the plumbing.
    GroundTruth,
    /// Every frame matched over the whole disparity range, median refined.
    FullSpace,
    /// The temporal pipeline.
    Reduced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub name: String,
    pub method: BenchmarkMethod,
    pub params: SgmParams,
    pub filter: FilterConfig,
    /// Also times moving-object detection (reduced method only).
    pub detect: Option<DetectConfig>,
    /// Missing estimates count as outliers.
    pub strict: bool,
}

impl BenchmarkConfig {
    pub fn new(name: impl Into<String>, method: BenchmarkMethod, params: SgmParams) -> Self {
        Self {
            name: name.into(),
            method,
            filter: FilterConfig::for_d_max(params.d_max),
            params,
            detect: None,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub name: String,
    pub frames: Vec<FrameReport>,
}

impl BenchmarkReport {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn mean_time_s(&self) -> f64 {
        mean(self.frames.iter().map(FrameReport::total_s))
    }

    pub fn median_time_s(&self) -> f64 {
        let mut t: Vec<f64> = self.frames.iter().map(FrameReport::total_s).collect();
        if t.is_empty() {
            return 0.0;
        }
        t.sort_by(f64::total_cmp);
        let n = t.len();
        if n % 2 == 1 {
            t[n / 2]
        } else {
            (t[n / 2 - 1] + t[n / 2]) / 2.0
        }
    }

    /// Mean time over frames after the first, which the reduced method
    /// always spends on a full-range match.
    pub fn mean_time_after_first_s(&self) -> f64 {
        mean(self.frames.iter().skip(1).map(FrameReport::total_s))
    }

    /// Outlier percentage over all evaluated pixels of all frames.
    pub fn pooled_outlier_pct(&self) -> Option<f64> {
        let mut c = OutlierCount::default();
        for f in &self.frames {
            c.add(f.outliers?);
        }
        c.percent()
    }

    /// Mean of the per-frame percentages.
    pub fn mean_frame_outlier_pct(&self) -> Option<f64> {
        let v: Vec<f64> = self.frames.iter().map(|f| f.outlier_pct()).collect::<Option<_>>()?;
        (!v.is_empty()).then(|| mean(v.into_iter()))
    }

    pub fn density_pct(&self) -> f64 {
        mean(self.frames.iter().map(|f| f.density_pct))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn density(map: &DisparityMap) -> f64 {
    if map.is_empty() {
        0.0
    } else {
        100.0 * map.valid_count() as f64 / map.len() as f64
    }
}

/// Runs each configuration over the already loaded sequence, one after the
/// other. Only computation is timed. Frames without poses are assumed not
/// to have moved.
pub fn run_benchmark(seq: &Sequence, configs: &[BenchmarkConfig]) -> Result<Vec<BenchmarkReport>> {
    if seq.is_empty() {
        return Err(Error::EmptyData("sequence has no frames".into()));
    }
    configs.iter().map(|c| run_one(seq, c)).collect()
}

fn run_one(seq: &Sequence, cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let mut outputs: Vec<(DisparityMap, FrameTimings)> = Vec::with_capacity(seq.len());
    match cfg.method {
        BenchmarkMethod::GroundTruth => {
            for f in &seq.frames {
                let gt = f
                    .gt_disp
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument(format!("frame {} has no ground truth", f.index)))?;
                outputs.push((gt, FrameTimings::default()));
            }
        }
        BenchmarkMethod::FullSpace => {
            for f in &seq.frames {
                let ranges = SearchRangeMap::full(f.left.width(), f.left.height(), cfg.params.d_max);
                let (raw, t) = sgm_match_timed(&f.left, &f.right, &ranges, &cfg.params)?;
                let start = Instant::now();
                let map = median_refine(&raw);
                let wta = t.wta + start.elapsed();
                outputs.push((
                    map,
                    FrameTimings {
                        census: t.census,
                        cost: t.cost,
                        aggregate: t.aggregate,
                        wta,
                        ..FrameTimings::default()
                    },
                ));
            }
        }
        BenchmarkMethod::Reduced => {
            let mut calib = seq.calib_or_err()?;
            calib.d_max = cfg.params.d_max;
            let mut pipe = TemporalPipeline::new(calib, cfg.params, cfg.filter)?;
            for (k, f) in seq.frames.iter().enumerate() {
                let motion = seq.motion(k).unwrap_or_else(RigidMotion::identity);
                let out = pipe.step(&f.left, &f.right, &motion)?;
                let mut t = FrameTimings {
                    census: out.timings.sgm.census,
                    cost: out.timings.sgm.cost,
                    aggregate: out.timings.sgm.aggregate,
                    wta: out.timings.sgm.wta,
                    predict: out.timings.predict,
                    correct: out.timings.correct,
                    detect: Duration::ZERO,
                };
                if let Some(dc) = &cfg.detect {
                    let start = Instant::now();
                    let _ = detect_in_diff(&out.diff, dc);
                    t.detect = start.elapsed();
                }
                outputs.push((out.export, t));
            }
        }
    }

    let frames = seq
        .frames
        .par_iter()
        .zip(outputs.par_iter())
        .map(|(f, (map, t))| {
            let outliers = f.gt_disp.as_ref().map(|gt| count_outliers(map, gt, cfg.strict)).transpose()?;
            Ok(FrameReport {
                index: f.index,
                outliers,
                density_pct: density(map),
                timings: *t,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkReport {
        name: cfg.name.clone(),
        frames,
    })
}

pub const CSV_HEADER: &str = "config,frames,mean_time_s,median_time_s,outlier_pct,density_pct";

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.prec$}"))
}

pub fn format_csv(reports: &[BenchmarkReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{},{:.4}",
            r.name,
            r.frame_count(),
            r.mean_time_s(),
            r.median_time_s(),
            fmt_opt(r.pooled_outlier_pct(), 4),
            r.density_pct()
        );
    }
    out
}

pub fn format_table(reports: &[BenchmarkReport]) -> String {
    let name_w = reports.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<name_w$} {:>6} {:>10} {:>10} {:>10} {:>10} {:>9}\n",
        "config", "frames", "mean_s", "median_s", "outl_pool", "outl_mean", "density"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<name_w$} {:>6} {:>10.4} {:>10.4} {:>9}% {:>9}% {:>8.2}%",
            r.name,
            r.frame_count(),
            r.mean_time_s(),
            r.median_time_s(),
            fmt_opt(r.pooled_outlier_pct(), 2),
            fmt_opt(r.mean_frame_outlier_pct(), 2),
            r.density_pct()
        );
    }
    out
}
