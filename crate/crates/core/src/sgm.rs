//! Semi-global matching over per-pixel disparity ranges.
//!
//! Each path recursion is
//!
//! ```text
//! L(p, d) = C(p, d) + min(L(q, d), L(q, d - 1) + P1, L(q, d + 1) + P1, min_k L(q, k) + P2) - min_k L(q, k)
//! ```
//!
//! with `q` the predecessor of `p` along the path. Terms referring to
//! disparities outside `q`'s range are dropped, so a disparity the
//! predecessor never searched costs `C + P2`. With the normalization every
//! per-path value satisfies `C <= L <= C + P2`, which keeps the sum over all
//! paths inside 16 bits.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::matching_cost::{
    build_cost_volume, census_transform, split_at_bounds, AggregatedCosts, MatchingCosts,
    SearchRangeMap, MAX_COST,
};
use crate::raster::{DisparityMap, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathCount {
    Four,
    Eight,
}

/// Which four directions a 4-path run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathSet {
    /// left, right, up, down
    NonDiagonal,
    /// the four diagonals
    Diagonal,
}

/// Direction a path travels in; the predecessor of `(x, y)` is
/// `(x - dx, y - dy)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Direction {
    pub dx: i32,
    pub dy: i32,
}

impl Direction {
    pub const fn new(dx: i32, dy: i32) -> Self {
        Self { dx, dy }
    }

    fn is_horizontal(self) -> bool {
        self.dy == 0
    }
}

const NONDIAGONAL: [Direction; 4] = [
    Direction::new(1, 0),
    Direction::new(-1, 0),
    Direction::new(0, 1),
    Direction::new(0, -1),
];
const DIAGONAL: [Direction; 4] = [
    Direction::new(1, 1),
    Direction::new(-1, 1),
    Direction::new(-1, -1),
    Direction::new(1, -1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SgmParams {
    pub p1: u16,
    pub p2: u16,
    pub paths: PathCount,
    /// Only consulted for [`PathCount::Four`].
    pub path_set: PathSet,
    pub d_max: usize,
}

impl Default for SgmParams {
    fn default() -> Self {
        Self {
            p1: 6,
            p2: 65,
            paths: PathCount::Eight,
            path_set: PathSet::NonDiagonal,
            d_max: 128,
        }
    }
}

impl SgmParams {
    pub fn validate(&self) -> Result<()> {
        if self.p1 == 0 || self.p1 > self.p2 {
            return invalid(format!(
                "penalties must satisfy 0 < p1 <= p2, got p1={} p2={}",
                self.p1, self.p2
            ));
        }
        let n = self.directions().len() as u32;
        if n * (MAX_COST as u32 + self.p2 as u32) > u16::MAX as u32 {
            return invalid(format!(
                "p2={} overflows 16-bit aggregation over {n} paths",
                self.p2
            ));
        }
        if self.d_max == 0 || self.d_max > u16::MAX as usize {
            return invalid(format!("d_max must be in 1..=65535, got {}", self.d_max));
        }
        Ok(())
    }

    pub fn directions(&self) -> Vec<Direction> {
        match (self.paths, self.path_set) {
            (PathCount::Eight, _) => NONDIAGONAL.iter().chain(&DIAGONAL).copied().collect(),
            (PathCount::Four, PathSet::NonDiagonal) => NONDIAGONAL.to_vec(),
            (PathCount::Four, PathSet::Diagonal) => DIAGONAL.to_vec(),
        }
    }
}

/// Predecessor's path costs over its own range.
#[derive(Clone, Copy)]
struct Pred<'a> {
    l: &'a [u16],
    lo: usize,
    min: u16,
}

/// One step of the path recursion at a single pixel. Returns the minimum of
/// the written values.
#[inline]
fn path_step(cost: &[u8], lo: usize, pred: Option<Pred<'_>>, p1: u16, p2: u16, out: &mut [u16]) -> u16 {
    let n = out.len();
    debug_assert_eq!(cost.len(), n);
    let mut min = u16::MAX;
    let Some(pr) = pred else {
        for (o, &c) in out.iter_mut().zip(cost) {
            *o = c as u16;
            min = min.min(*o);
        }
        return min;
    };
    let far = pr.min + p2;
    let l = pr.l;
    if pr.lo == lo && l.len() == n {
        for i in 0..n {
            let mut best = far.min(l[i]);
            if i > 0 {
                best = best.min(l[i - 1] + p1);
            }
            if i + 1 < n {
                best = best.min(l[i + 1] + p1);
            }
            let v = cost[i] as u16 + best - pr.min;
            out[i] = v;
            min = min.min(v);
        }
        return min;
    }
    let (plo, phi) = (pr.lo, pr.lo + l.len());
    for i in 0..n {
        let d = lo + i;
        let mut best = far;
        if d >= plo && d < phi {
            best = best.min(l[d - plo]);
        }
        if d > plo && d - 1 < phi {
            best = best.min(l[d - 1 - plo] + p1);
        }
        if d + 1 >= plo && d + 1 < phi {
            best = best.min(l[d + 1 - plo] + p1);
        }
        let v = cost[i] as u16 + best - pr.min;
        out[i] = v;
        min = min.min(v);
    }
    min
}

/// Path costs of a single direction.
///
/// This is the straightforward sequential recursion; [`aggregate_paths`]
/// computes the same values for all directions at once.
pub fn aggregate_single_path(vol: &MatchingCosts, dir: Direction, params: &SgmParams) -> AggregatedCosts {
    let (w, h) = (vol.width(), vol.height());
    let mut out: AggregatedCosts = vol.same_shape();
    let mut mins = vec![0u16; w * h];
    let forward = dir.dy > 0 || (dir.dy == 0 && dir.dx > 0);
    let order: Box<dyn Iterator<Item = usize>> = if forward {
        Box::new(0..w * h)
    } else {
        Box::new((0..w * h).rev())
    };
    let offsets = vol.offsets().to_vec();
    let mut scratch = Vec::new();
    for idx in order {
        let (x, y) = ((idx % w) as i32, (idx / w) as i32);
        let (px, py) = (x - dir.dx, y - dir.dy);
        let has_pred = px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h;
        let pidx = if has_pred { py as usize * w + px as usize } else { 0 };
        if has_pred {
            scratch.clear();
            scratch.extend_from_slice(&out.raw()[offsets[pidx]..offsets[pidx + 1]]);
        }
        let pred = has_pred.then(|| Pred {
            l: &scratch,
            lo: vol.ranges().at(pidx).0 as usize,
            min: mins[pidx],
        });
        let lo = vol.ranges().at(idx).0 as usize;
        let cell = &mut out.raw_mut()[offsets[idx]..offsets[idx + 1]];
        mins[idx] = path_step(vol.costs_at(idx), lo, pred, params.p1, params.p2, cell);
    }
    out
}

/// Pixels handled by one parallel task inside a row.
const ROW_CHUNK: usize = 64;

/// Sum of the path costs over every direction selected by `params`.
///
/// Horizontal paths are independent per row and run row-parallel. The
/// remaining directions go in two sweeps, top-down for those coming from
/// above and bottom-up for those coming from below; each row of a sweep only
/// reads the previous row, so pixels within a row run in parallel.
pub fn aggregate_paths(vol: &MatchingCosts, params: &SgmParams) -> Result<AggregatedCosts> {
    params.validate()?;
    let dirs = params.directions();
    let mut agg: AggregatedCosts = vol.same_shape();
    let (w, h) = (vol.width(), vol.height());
    if w == 0 || h == 0 {
        return Ok(agg);
    }

    let horizontal: Vec<Direction> = dirs.iter().copied().filter(|d| d.is_horizontal()).collect();
    if !horizontal.is_empty() {
        let offsets = vol.offsets();
        agg.rows_mut()
            .into_par_iter()
            .enumerate()
            .for_each(|(y, row)| aggregate_row_horizontal(vol, y, &horizontal, params, &offsets[y * w..=(y + 1) * w], row));
    }

    for dy in [1, -1] {
        let group: Vec<Direction> = dirs.iter().copied().filter(|d| d.dy == dy).collect();
        if !group.is_empty() {
            vertical_sweep(vol, &group, params, &mut agg);
        }
    }
    Ok(agg)
}

fn aggregate_row_horizontal(
    vol: &MatchingCosts,
    y: usize,
    dirs: &[Direction],
    params: &SgmParams,
    row_offsets: &[usize],
    agg_row: &mut [u16],
) {
    let w = vol.width();
    let base = row_offsets[0];
    let d_max = vol.ranges().d_max();
    let mut prev = Vec::with_capacity(d_max);
    let mut cur = Vec::with_capacity(d_max);
    for dir in dirs {
        let xs: Box<dyn Iterator<Item = usize>> = if dir.dx > 0 {
            Box::new(0..w)
        } else {
            Box::new((0..w).rev())
        };
        let mut prev_lo = 0usize;
        let mut prev_min = 0u16;
        let mut first = true;
        for x in xs {
            let idx = y * w + x;
            let lo = vol.ranges().at(idx).0 as usize;
            let costs = vol.costs_at(idx);
            cur.clear();
            cur.resize(costs.len(), 0);
            let pred = (!first).then(|| Pred {
                l: &prev,
                lo: prev_lo,
                min: prev_min,
            });
            let min = path_step(costs, lo, pred, params.p1, params.p2, &mut cur);
            let cell = &mut agg_row[row_offsets[x] - base..row_offsets[x + 1] - base];
            for (a, &v) in cell.iter_mut().zip(&cur) {
                *a += v;
            }
            std::mem::swap(&mut prev, &mut cur);
            prev_lo = lo;
            prev_min = min;
            first = false;
        }
    }
}

/// Per-direction path costs of one row.
struct RowBuf {
    l: Vec<u16>,
    min: Vec<u16>,
}

fn vertical_sweep(vol: &MatchingCosts, dirs: &[Direction], params: &SgmParams, agg: &mut AggregatedCosts) {
    let (w, h) = (vol.width(), vol.height());
    let dy = dirs[0].dy;
    let offsets = vol.offsets().to_vec();
    let rows: Vec<usize> = if dy > 0 { (0..h).collect() } else { (0..h).rev().collect() };
    let mut prev: Vec<RowBuf> = dirs.iter().map(|_| RowBuf { l: Vec::new(), min: vec![0; w] }).collect();
    let mut cur: Vec<RowBuf> = dirs.iter().map(|_| RowBuf { l: Vec::new(), min: vec![0; w] }).collect();
    let chunk_px: Vec<usize> = (0..w).step_by(ROW_CHUNK).chain(std::iter::once(w)).collect();
    let mut agg_rows = agg.rows_mut();

    for (step, &y) in rows.iter().enumerate() {
        let row_base = offsets[y * w];
        let row_len = offsets[(y + 1) * w] - row_base;
        let rel: Vec<usize> = chunk_px.iter().map(|&x| offsets[y * w + x] - row_base).collect();
        let pred_row = (step > 0).then(|| (y as i32 - dy) as usize);
        let prev_base = pred_row.map(|py| offsets[py * w]).unwrap_or(0);

        for buf in cur.iter_mut() {
            buf.l.clear();
            buf.l.resize(row_len, 0);
        }
        let mut tasks: Vec<(usize, &mut [u16], Vec<&mut [u16]>, Vec<&mut [u16]>)> =
            split_at_bounds(&mut agg_rows[y][..], &rel)
                .into_iter()
                .enumerate()
                .map(|(ci, a)| (ci, a, Vec::new(), Vec::new()))
                .collect();
        for buf in cur.iter_mut() {
            for (task, s) in tasks.iter_mut().zip(split_at_bounds(&mut buf.l, &rel)) {
                task.2.push(s);
            }
            for (task, s) in tasks.iter_mut().zip(split_at_bounds(&mut buf.min, &chunk_px)) {
                task.3.push(s);
            }
        }
        let prev_ref = &prev;
        let offsets_ref = &offsets;
        tasks.into_par_iter().for_each(|(ci, agg_chunk, mut ls, mut mins)| {
            let (x0, x1) = (chunk_px[ci], chunk_px[ci + 1]);
            let chunk_base = offsets_ref[y * w + x0];
            for x in x0..x1 {
                let idx = y * w + x;
                let lo = vol.ranges().at(idx).0 as usize;
                let costs = vol.costs_at(idx);
                let cell = offsets_ref[idx] - chunk_base..offsets_ref[idx + 1] - chunk_base;
                for (k, dir) in dirs.iter().enumerate() {
                    let px = x as i32 - dir.dx;
                    let pred = match pred_row {
                        Some(py) if px >= 0 && (px as usize) < w => {
                            let pidx = py * w + px as usize;
                            Some(Pred {
                                l: &prev_ref[k].l[offsets_ref[pidx] - prev_base..offsets_ref[pidx + 1] - prev_base],
                                lo: vol.ranges().at(pidx).0 as usize,
                                min: prev_ref[k].min[px as usize],
                            })
                        }
                        _ => None,
                    };
                    let out = &mut ls[k][cell.clone()];
                    mins[k][x - x0] = path_step(costs, lo, pred, params.p1, params.p2, out);
                    for (a, &v) in agg_chunk[cell.clone()].iter_mut().zip(out.iter()) {
                        *a += v;
                    }
                }
            }
        });
        std::mem::swap(&mut prev, &mut cur);
    }
}

/// Per-pixel argmin over the pixel's range; ties go to the smaller disparity.
/// Pixels without a census signature come out invalid.
pub fn winner_takes_all(agg: &AggregatedCosts) -> DisparityMap {
    let (w, h) = (agg.width(), agg.height());
    let mut map = DisparityMap::invalid(w, h);
    if w == 0 {
        return map;
    }
    let (disp, valid) = map.parts_mut();
    disp.par_chunks_mut(w)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (drow, vrow))| {
            for x in 0..w {
                let idx = y * w + x;
                if !agg.is_defined(idx) {
                    continue;
                }
                let costs = agg.costs_at(idx);
                let mut best = 0;
                for (i, &c) in costs.iter().enumerate().skip(1) {
                    if c < costs[best] {
                        best = i;
                    }
                }
                drow[x] = (agg.ranges().at(idx).0 as usize + best) as f32;
                vrow[x] = true;
            }
        });
    map
}

/// Number of valid pixels in a 3x3 block needed to fill an invalid center.
pub const MEDIAN_FILL_MIN: usize = 5;

/// 3x3 median over valid neighbors. Valid pixels stay valid; invalid ones are
/// filled when at least [`MEDIAN_FILL_MIN`] pixels of the block are valid.
/// With an even count the lower median is taken.
pub fn median_refine(dm: &DisparityMap) -> DisparityMap {
    let (w, h) = (dm.width(), dm.height());
    let mut out = DisparityMap::invalid(w, h);
    if w == 0 {
        return out;
    }
    let (disp, valid) = out.parts_mut();
    disp.par_chunks_mut(w)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (drow, vrow))| {
            let mut block = [0f32; 9];
            for x in 0..w {
                let mut n = 0;
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if let Some(d) = dm.get(nx, ny) {
                            block[n] = d;
                            n += 1;
                        }
                    }
                }
                let center_valid = dm.get(x, y).is_some();
                if n == 0 || (!center_valid && n < MEDIAN_FILL_MIN) {
                    continue;
                }
                let vals = &mut block[..n];
                vals.sort_by(f32::total_cmp);
                drow[x] = vals[(n - 1) / 2];
                vrow[x] = true;
            }
        });
    out
}

/// Wall-clock time of each matcher stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SgmTimings {
    pub census: Duration,
    pub cost: Duration,
    pub aggregate: Duration,
    pub wta: Duration,
}

impl SgmTimings {
    pub fn total(&self) -> Duration {
        self.census + self.cost + self.aggregate + self.wta
    }
}

/// Census, cost volume, aggregation and winner-takes-all. No median: that
/// stays outside the temporal loop.
pub fn sgm_match(
    left: &GrayImage,
    right: &GrayImage,
    ranges: &SearchRangeMap,
    params: &SgmParams,
) -> Result<DisparityMap> {
    sgm_match_timed(left, right, ranges, params).map(|(m, _)| m)
}

pub fn sgm_match_timed(
    left: &GrayImage,
    right: &GrayImage,
    ranges: &SearchRangeMap,
    params: &SgmParams,
) -> Result<(DisparityMap, SgmTimings)> {
    params.validate()?;
    if left.width() != right.width() || left.height() != right.height() {
        return invalid(format!(
            "stereo pair sizes differ: {}x{} vs {}x{}",
            left.width(),
            left.height(),
            right.width(),
            right.height()
        ));
    }
    if ranges.d_max() != params.d_max {
        return invalid(format!(
            "search ranges built for d_max={} but matcher uses {}",
            ranges.d_max(),
            params.d_max
        ));
    }
    let mut t = SgmTimings::default();
    let start = Instant::now();
    let (cl, cr) = rayon::join(|| census_transform(left), || census_transform(right));
    let (cl, cr) = (cl?, cr?);
    t.census = start.elapsed();

    let start = Instant::now();
    let vol = build_cost_volume(&cl, &cr, ranges)?;
    t.cost = start.elapsed();

    let start = Instant::now();
    let agg = aggregate_paths(&vol, params)?;
    t.aggregate = start.elapsed();

    let start = Instant::now();
    let map = winner_takes_all(&agg);
    t.wta = start.elapsed();
    Ok((map, t))
}

/// Single-pair matching over the full disparity range, median refined: the
/// conventional matcher output.
pub fn match_full_range(left: &GrayImage, right: &GrayImage, params: &SgmParams) -> Result<DisparityMap> {
    let ranges = SearchRangeMap::full(left.width(), left.height(), params.d_max);
    Ok(median_refine(&sgm_match(left, right, &ranges, params)?))
}
