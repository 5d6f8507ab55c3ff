//! Dense moving-object detection on the prediction-vs-measurement
//! disparity difference map.
//!
//! Windows of several sizes slide over the lower two thirds of the image; any
//! window whose mean absolute difference clears the threshold becomes a
//! candidate, and candidates are merged greedily by IoU.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::geometry::DisparityState;
use crate::raster::{DisparityMap, GrayImage, RealImage};
use crate::temporal::difference_map;

/// `(h + 1) x (w + 1)` cumulative sums; entry `(i, j)` is the sum over rows
/// `< i` and columns `< j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummedAreaTable {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl SummedAreaTable {
    /// Width of the source map.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * (self.width + 1) + col]
    }
}

pub fn integral_image(map: &RealImage) -> SummedAreaTable {
    let (w, h) = (map.width(), map.height());
    let stride = w + 1;
    let mut data = vec![0.0; stride * (h + 1)];
    for y in 0..h {
        let mut row_sum = 0.0;
        for x in 0..w {
            row_sum += map.get(x, y);
            data[(y + 1) * stride + x + 1] = data[y * stride + x + 1] + row_sum;
        }
    }
    SummedAreaTable {
        width: w,
        height: h,
        data,
    }
}

/// Axis-aligned box, `[x0, x1) x [y0, y1)`, with the mean absolute
/// disparity difference inside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub score: f64,
}

impl DetectionBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self {
            x0,
            y0,
            x1,
            y1,
            score: 0.0,
        }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &DetectionBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn iou(&self, other: &DetectionBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Smallest box containing both; the score is the area-weighted mean.
    pub fn enclose(&self, other: &DetectionBox) -> DetectionBox {
        let (a, b) = (self.area() as f64, other.area() as f64);
        let score = if a + b > 0.0 {
            (self.score * a + other.score * b) / (a + b)
        } else {
            0.0
        };
        DetectionBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
            score,
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Sum of the source map inside `b` by inclusion-exclusion.
pub fn box_sum(sat: &SummedAreaTable, b: &DetectionBox) -> Result<f64> {
    if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 > sat.width || b.y1 > sat.height {
        return invalid(format!(
            "box [{}, {}) x [{}, {}) outside {}x{} map",
            b.x0, b.x1, b.y0, b.y1, sat.width, sat.height
        ));
    }
    Ok(sat.at(b.y1, b.x1) - sat.at(b.y0, b.x1) - sat.at(b.y1, b.x0) + sat.at(b.y0, b.x0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    /// Sliding window sizes as `(width, height)`.
    pub windows: Vec<(usize, usize)>,
    /// Fraction of the image height, from the top, that is never scanned.
    pub skip_top_fraction: f64,
    /// Minimum mean |delta d| (px) for a window to count.
    pub score_thresh: f64,
    /// Merging stops once the best pair's IoU falls below this.
    pub merge_stop_iou: f64,
    /// Merged boxes smaller than this (px^2) are dropped.
    pub min_box_area: usize,
}

/// Smallest and largest window the detector is designed for.
pub const WINDOW_MIN: (usize, usize) = (20, 20);
pub const WINDOW_MAX: (usize, usize) = (50, 75);

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            windows: vec![(20, 20), (30, 30), (40, 40), (50, 50), (50, 75)],
            skip_top_fraction: 1.0 / 3.0,
            score_thresh: 2.0,
            merge_stop_iou: 0.2,
            min_box_area: 400,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() {
            return invalid("no sliding window sizes configured");
        }
        for &(w, h) in &self.windows {
            if w < WINDOW_MIN.0 || h < WINDOW_MIN.1 || w > WINDOW_MAX.0 || h > WINDOW_MAX.1 {
                return invalid(format!(
                    "window {w}x{h} outside {}x{} .. {}x{}",
                    WINDOW_MIN.0, WINDOW_MIN.1, WINDOW_MAX.0, WINDOW_MAX.1
                ));
            }
        }
        if !(self.merge_stop_iou > 0.0 && self.merge_stop_iou < 1.0) {
            return invalid(format!("merge_stop_iou must be in (0, 1), got {}", self.merge_stop_iou));
        }
        if !(0.0..1.0).contains(&self.skip_top_fraction) {
            return invalid("skip_top_fraction must be in [0, 1)");
        }
        if !(self.score_thresh >= 0.0) {
            return invalid("score_thresh must be non-negative");
        }
        Ok(())
    }
}

fn stride(dim: usize) -> usize {
    (dim / 4).max(1)
}

/// Every window position (per configured size, row-major) whose mean
/// difference exceeds the threshold.
pub fn candidate_windows(sat: &SummedAreaTable, cfg: &DetectConfig) -> Vec<DetectionBox> {
    let (w, h) = (sat.width, sat.height);
    let top = (h as f64 * cfg.skip_top_fraction).floor() as usize;
    cfg.windows
        .par_iter()
        .flat_map_iter(|&(ww, wh)| {
            let ys = (top..).step_by(stride(wh)).take_while(move |&y| y + wh <= h);
            ys.flat_map(move |y| {
                (0..)
                    .step_by(stride(ww))
                    .take_while(move |&x| x + ww <= w)
                    .filter_map(move |x| {
                        let mut b = DetectionBox::new(x, y, x + ww, y + wh);
                        let mean = box_sum(sat, &b).ok()? / b.area() as f64;
                        (mean > cfg.score_thresh).then(|| {
                            b.score = mean;
                            b
                        })
                    })
            })
        })
        .collect()
}

pub fn detect_candidate_windows(diff: &RealImage, cfg: &DetectConfig) -> Vec<DetectionBox> {
    candidate_windows(&integral_image(diff), cfg)
}

/// Best partner `(iou, j)` of row `i` over live `j > i`; lower `j` wins ties.
fn row_best(boxes: &[DetectionBox], alive: &[bool], i: usize) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for j in i + 1..boxes.len() {
        if !alive[j] {
            continue;
        }
        let v = boxes[i].iou(&boxes[j]);
        if best.map_or(true, |(b, _)| v > b) {
            best = Some((v, j));
        }
    }
    best
}

/// Repeatedly replaces the highest-IoU pair by its enclosing box until the
/// best IoU drops below `merge_stop_iou`, then discards small boxes.
///
/// Ties go to the lexicographically smallest index pair in current list
/// order. The merged box takes the place of the first of the pair.
pub fn greedy_merge(boxes: &[DetectionBox], cfg: &DetectConfig) -> Vec<DetectionBox> {
    let mut bx = boxes.to_vec();
    let n = bx.len();
    let mut alive = vec![true; n];
    let mut best: Vec<Option<(f64, usize)>> = (0..n).map(|i| row_best(&bx, &alive, i)).collect();

    loop {
        let mut pick: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            if let Some((v, j)) = best[i] {
                if pick.map_or(true, |(b, _, _)| v > b) {
                    pick = Some((v, i, j));
                }
            }
        }
        let Some((v, i, j)) = pick else { break };
        if v < cfg.merge_stop_iou {
            break;
        }
        bx[i] = bx[i].enclose(&bx[j]);
        alive[j] = false;
        best[j] = None;
        for k in 0..n {
            if !alive[k] {
                continue;
            }
            if k == i {
                best[k] = row_best(&bx, &alive, k);
            } else if k < i {
                match best[k] {
                    Some((_, bj)) if bj == i || bj == j => best[k] = row_best(&bx, &alive, k),
                    Some((bv, bj)) => {
                        let nv = bx[k].iou(&bx[i]);
                        if nv > bv || (nv == bv && i < bj) {
                            best[k] = Some((nv, i));
                        }
                    }
                    None => best[k] = row_best(&bx, &alive, k),
                }
            } else if matches!(best[k], Some((_, bj)) if bj == j) {
                best[k] = row_best(&bx, &alive, k);
            }
        }
    }

    bx.into_iter()
        .zip(alive)
        .filter(|(b, a)| *a && b.area() >= cfg.min_box_area)
        .map(|(b, _)| b)
        .collect()
}

/// Difference map, candidate windows, greedy merge.
pub fn detect_moving_objects(pred: &DisparityState, meas: &DisparityMap, cfg: &DetectConfig) -> Vec<DetectionBox> {
    detect_in_diff(&difference_map(pred, meas), cfg)
}

pub fn detect_in_diff(diff: &RealImage, cfg: &DetectConfig) -> Vec<DetectionBox> {
    greedy_merge(&detect_candidate_windows(diff, cfg), cfg)
}

/// One `frame x0 y0 x1 y1 score` line per box.
pub fn format_detections(frame: usize, boxes: &[DetectionBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{frame} {} {} {} {} {:.4}\n", b.x0, b.y0, b.x1, b.y1, b.score))
        .collect()
}

/// Copy of `img` with each box outlined, white with a black inner line so
/// it shows on any background.
pub fn draw_boxes(img: &GrayImage, boxes: &[DetectionBox]) -> GrayImage {
    let mut out = img.clone();
    let (w, h) = (img.width(), img.height());
    let mut outline = |b: &DetectionBox, inset: usize, v: u8| {
        let (x0, y0) = (b.x0 + inset, b.y0 + inset);
        let (Some(x1), Some(y1)) = (b.x1.min(w).checked_sub(1 + inset), b.y1.min(h).checked_sub(1 + inset)) else {
            return;
        };
        if x0 > x1 || y0 > y1 {
            return;
        }
        for x in x0..=x1 {
            out.set(x, y0, v);
            out.set(x, y1, v);
        }
        for y in y0..=y1 {
            out.set(x0, y, v);
            out.set(x1, y, v);
        }
    };
    for b in boxes {
        outline(b, 0, 255);
        outline(b, 1, 0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_sum(map: &RealImage, b: &DetectionBox) -> f64 {
        let mut s = 0.0;
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                s += map.get(x, y);
            }
        }
        s
    }

    /// Direct transcription of the merge loop, O(n^3).
    fn naive_merge(boxes: &[DetectionBox], cfg: &DetectConfig) -> Vec<DetectionBox> {
        let mut list = boxes.to_vec();
        loop {
            let mut pick: Option<(f64, usize, usize)> = None;
            for i in 0..list.len() {
                for j in i + 1..list.len() {
                    let v = list[i].iou(&list[j]);
                    if pick.map_or(true, |(b, _, _)| v > b) {
                        pick = Some((v, i, j));
                    }
                }
            }
            match pick {
                Some((v, i, j)) if v >= cfg.merge_stop_iou => {
                    list[i] = list[i].enclose(&list[j]);
                    list.remove(j);
                }
                _ => break,
            }
        }
        list.retain(|b| b.area() >= cfg.min_box_area);
        list
    }

    #[test]
    fn ones_and_zeros() {
        let ones = RealImage::from_fn(5, 4, |_, _| 1.0);
        let sat = integral_image(&ones);
        assert_eq!(sat.at(4, 5), 20.0);
        assert_eq!(box_sum(&sat, &DetectionBox::new(0, 0, 5, 4)).unwrap(), 20.0);
        let zeros = integral_image(&RealImage::zeros(5, 4));
        assert!(zeros.data.iter().all(|&v| v == 0.0));
        let m = RealImage::from_fn(5, 4, |x, y| (x * 10 + y) as f64);
        assert_eq!(box_sum(&integral_image(&m), &DetectionBox::new(3, 2, 4, 3)).unwrap(), 32.0);
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        let sat = integral_image(&RealImage::zeros(5, 4));
        assert!(box_sum(&sat, &DetectionBox::new(0, 0, 6, 4)).is_err());
        assert!(box_sum(&sat, &DetectionBox::new(3, 0, 2, 4)).is_err());
    }

    #[test]
    fn random_boxes_match_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = RealImage::from_fn(100, 100, |_, _| rng.gen_range(0..50) as f64);
        let sat = integral_image(&m);
        for _ in 0..2000 {
            let (x0, y0) = (rng.gen_range(0..100), rng.gen_range(0..100));
            let b = DetectionBox::new(x0, y0, rng.gen_range(x0..=100), rng.gen_range(y0..=100));
            assert_eq!(box_sum(&sat, &b).unwrap(), naive_sum(&m, &b));
        }
    }

    #[test]
    fn sat_first_row_and_column_zero_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = RealImage::from_fn(13, 9, |_, _| rng.gen_range(0.0..3.0));
        let sat = integral_image(&m);
        for i in 0..=9 {
            assert_eq!(sat.at(i, 0), 0.0);
            for j in 1..=13 {
                assert!(sat.at(i, j) >= sat.at(i, j - 1));
                if i > 0 {
                    assert!(sat.at(i, j) >= sat.at(i - 1, j));
                }
            }
        }
        assert!((0..=13).all(|j| sat.at(0, j) == 0.0));
    }

    #[test]
    fn zero_diff_gives_nothing() {
        let cfg = DetectConfig::default();
        assert!(detect_candidate_windows(&RealImage::zeros(200, 150), &cfg).is_empty());
    }

    fn blob(w: usize, h: usize, bx: usize, by: usize) -> RealImage {
        RealImage::from_fn(w, h, |x, y| {
            if (bx..bx + 40).contains(&x) && (by..by + 40).contains(&y) {
                10.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn candidates_all_touch_the_blob() {
        let cfg = DetectConfig::default();
        let map = blob(200, 150, 80, 70);
        let b = DetectionBox::new(80, 70, 120, 110);
        let found = detect_candidate_windows(&map, &cfg);
        assert!(!found.is_empty());
        for f in &found {
            assert!(f.intersection(&b) > 0);
            assert!((f.score - naive_sum(&map, f) / f.area() as f64).abs() < 1e-12);
        }
        // Naive scan over the same grid agrees on the count.
        let top = 50;
        let mut count = 0;
        for &(ww, wh) in &cfg.windows {
            let mut y = top;
            while y + wh <= 150 {
                let mut x = 0;
                while x + ww <= 200 {
                    let c = DetectionBox::new(x, y, x + ww, y + wh);
                    if naive_sum(&map, &c) / c.area() as f64 > 2.0 {
                        count += 1;
                    }
                    x += (ww / 4).max(1);
                }
                y += (wh / 4).max(1);
            }
        }
        assert_eq!(found.len(), count);
    }

    #[test]
    fn blob_in_top_third_is_ignored() {
        let map = blob(200, 150, 80, 5);
        assert!(detect_candidate_windows(&map, &DetectConfig::default()).is_empty());
    }

    #[test]
    fn merge_examples() {
        let cfg = DetectConfig {
            merge_stop_iou: 0.1,
            min_box_area: 0,
            ..DetectConfig::default()
        };
        let a = DetectionBox::new(0, 0, 10, 10);
        assert_eq!(greedy_merge(&[a, a], &cfg), vec![a]);

        let b = DetectionBox::new(20, 0, 30, 10);
        assert_eq!(greedy_merge(&[a, b], &cfg), vec![a, b]);

        // Chain: a-c and c-d overlap by half, a-d do not. First merge a+c
        // (IoU 1/3, lower index), giving [0,15); that overlaps d [10,20) with
        // IoU 1/4 -> merged to [0,20).
        let c = DetectionBox::new(5, 0, 15, 10);
        let d = DetectionBox::new(10, 0, 20, 10);
        let out = greedy_merge(&[a, c, d], &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].x0, out[0].y0, out[0].x1, out[0].y1), (0, 0, 20, 10));
    }

    #[test]
    fn merge_score_is_area_weighted() {
        let cfg = DetectConfig {
            merge_stop_iou: 0.1,
            min_box_area: 0,
            ..DetectConfig::default()
        };
        let mut a = DetectionBox::new(0, 0, 10, 10);
        a.score = 2.0;
        let mut b = DetectionBox::new(0, 0, 10, 20);
        b.score = 5.0;
        let out = greedy_merge(&[a, b], &cfg);
        assert!((out[0].score - (200.0 + 1000.0) / 300.0).abs() < 1e-12);
    }

    #[test]
    fn small_boxes_dropped() {
        let cfg = DetectConfig::default();
        assert!(greedy_merge(&[DetectionBox::new(0, 0, 19, 20)], &cfg).is_empty());
        assert_eq!(greedy_merge(&[DetectionBox::new(0, 0, 20, 20)], &cfg).len(), 1);
    }

    #[test]
    fn export_and_overlay() {
        let mut b = DetectionBox::new(2, 3, 8, 9);
        b.score = 4.5;
        assert_eq!(format_detections(7, &[b]), "7 2 3 8 9 4.5000\n");
        let img = draw_boxes(&GrayImage::from_fn(12, 12, |_, _| 100), &[b]);
        assert_eq!(img.get(2, 3), 255);
        assert_eq!(img.get(7, 8), 255);
        assert_eq!(img.get(3, 4), 0);
        assert_eq!(img.get(5, 6), 100);
        assert_eq!(img.get(10, 10), 100);
    }

    #[test]
    fn identical_states_detect_nothing() {
        let s = DisparityState::uniform(200, 150, 20.0, 1.0);
        assert!(detect_moving_objects(&s, &s.to_map(), &DetectConfig::default()).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(DetectConfig::default().validate().is_ok());
        let mut c = DetectConfig::default();
        c.windows.push((10, 10));
        assert!(c.validate().is_err());
        let c = DetectConfig {
            merge_stop_iou: 1.0,
            ..DetectConfig::default()
        };
        assert!(c.validate().is_err());
    }

    fn arb_boxes() -> impl Strategy<Value = Vec<DetectionBox>> {
        prop::collection::vec((0usize..80, 0usize..60, 1usize..40, 1usize..40, 0.0f64..5.0), 0..40).prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h, s)| DetectionBox {
                    x0: x,
                    y0: y,
                    x1: x + w,
                    y1: y + h,
                    score: s,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn merge_matches_naive_and_separates(boxes in arb_boxes(), stop in 0.05f64..0.9, min_area in 0usize..300) {
            let cfg = DetectConfig { merge_stop_iou: stop, min_box_area: min_area, ..DetectConfig::default() };
            let fast = greedy_merge(&boxes, &cfg);
            prop_assert_eq!(&fast, &naive_merge(&boxes, &cfg));
            for i in 0..fast.len() {
                for j in i + 1..fast.len() {
                    prop_assert!(fast[i].iou(&fast[j]) < stop);
                }
            }
        }

        #[test]
        fn merge_never_shrinks_coverage(boxes in arb_boxes(), stop in 0.05f64..0.9) {
            let cfg = DetectConfig { merge_stop_iou: stop, min_box_area: 0, ..DetectConfig::default() };
            let out = greedy_merge(&boxes, &cfg);
            for b in &boxes {
                for (x, y) in [(b.x0, b.y0), (b.x1 - 1, b.y1 - 1), (b.x0, b.y1 - 1), (b.x1 - 1, b.y0)] {
                    prop_assert!(out.iter().any(|o| o.contains(x, y)));
                }
            }
        }
    }
}
