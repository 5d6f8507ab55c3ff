//! 5x5 census transform, Hamming matching cost, and the ragged cost volume
//! that only stores each pixel's own disparity interval.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::raster::GrayImage;

/// Census window radius (5x5 window).
pub const CENSUS_RADIUS: usize = 2;
/// Number of non-center pixels in the window, hence signature bits.
pub const CENSUS_BITS: u32 = 24;
/// Largest possible Hamming distance; also the cost of impossible matches.
pub const MAX_COST: u8 = CENSUS_BITS as u8;

/// Per-pixel 24-bit census signatures.
///
/// Bit order: neighbors are visited in raster order over the 5x5 window
/// (top-left first, center skipped) and shifted in from the right, so the
/// top-left neighbor ends up in bit 23 and the bottom-right one in bit 0.
/// A bit is set iff that neighbor is strictly darker than the center.
/// Pixels within 2 of the border carry 0 and are undefined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CensusMap {
    width: usize,
    height: usize,
    sig: Vec<u32>,
}

impl CensusMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn is_defined(&self, x: usize, y: usize) -> bool {
        x >= CENSUS_RADIUS
            && y >= CENSUS_RADIUS
            && x + CENSUS_RADIUS < self.width
            && y + CENSUS_RADIUS < self.height
    }

    #[inline]
    pub fn signature(&self, x: usize, y: usize) -> u32 {
        self.sig[y * self.width + x]
    }

    pub fn signatures(&self) -> &[u32] {
        &self.sig
    }
}

pub fn census_transform(img: &GrayImage) -> Result<CensusMap> {
    let (w, h) = (img.width(), img.height());
    let min = 2 * CENSUS_RADIUS + 1;
    if w < min || h < min {
        return invalid(format!("census needs at least {min}x{min} pixels, got {w}x{h}"));
    }
    let r = CENSUS_RADIUS;
    let data = img.data();
    let mut sig = vec![0u32; w * h];
    sig.par_chunks_mut(w)
        .enumerate()
        .filter(|(y, _)| *y >= r && *y + r < h)
        .for_each(|(y, row)| {
            for x in r..w - r {
                let center = data[y * w + x];
                let mut s = 0u32;
                for wy in y - r..=y + r {
                    let line = &data[wy * w + x - r..=wy * w + x + r];
                    for (i, &v) in line.iter().enumerate() {
                        if wy == y && i == r {
                            continue;
                        }
                        s = (s << 1) | u32::from(v < center);
                    }
                }
                row[x] = s;
            }
        });
    Ok(CensusMap {
        width: w,
        height: h,
        sig,
    })
}

#[inline]
pub fn hamming(a: u32, b: u32) -> u8 {
    (a ^ b).count_ones() as u8
}

/// Hamming cost of matching left `(x, y)` with right `(x - d, y)`.
/// Impossible or undefined matches cost [`MAX_COST`].
#[inline]
pub fn matching_cost(cl: &CensusMap, cr: &CensusMap, x: usize, y: usize, d: usize) -> u8 {
    if d > x || !cl.is_defined(x, y) || !cr.is_defined(x - d, y) {
        return MAX_COST;
    }
    hamming(cl.signature(x, y), cr.signature(x - d, y))
}

/// Inclusive per-pixel disparity interval `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchRangeMap {
    width: usize,
    height: usize,
    d_max: usize,
    lo: Vec<u16>,
    hi: Vec<u16>,
}

impl SearchRangeMap {
    /// `[0, d_max - 1]` everywhere.
    pub fn full(width: usize, height: usize, d_max: usize) -> Self {
        assert!(d_max >= 1 && d_max <= u16::MAX as usize, "d_max out of range");
        Self::uniform_unchecked(width, height, d_max, 0, (d_max - 1) as u16)
    }

    pub fn uniform(width: usize, height: usize, d_max: usize, lo: u16, hi: u16) -> Result<Self> {
        Self::from_vecs(
            width,
            height,
            d_max,
            vec![lo; width * height],
            vec![hi; width * height],
        )
    }

    fn uniform_unchecked(width: usize, height: usize, d_max: usize, lo: u16, hi: u16) -> Self {
        Self {
            width,
            height,
            d_max,
            lo: vec![lo; width * height],
            hi: vec![hi; width * height],
        }
    }

    pub fn from_vecs(
        width: usize,
        height: usize,
        d_max: usize,
        lo: Vec<u16>,
        hi: Vec<u16>,
    ) -> Result<Self> {
        if lo.len() != width * height || hi.len() != width * height {
            return invalid("range buffers do not match image size");
        }
        if d_max == 0 || d_max > u16::MAX as usize {
            return invalid(format!("d_max must be in 1..=65535, got {d_max}"));
        }
        if let Some(i) = (0..lo.len()).find(|&i| lo[i] > hi[i] || hi[i] as usize >= d_max) {
            return invalid(format!(
                "range [{}, {}] at pixel {i} is not inside [0, {})",
                lo[i], hi[i], d_max
            ));
        }
        Ok(Self {
            width,
            height,
            d_max,
            lo,
            hi,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (u16, u16) {
        self.at(y * self.width + x)
    }

    #[inline]
    pub fn at(&self, idx: usize) -> (u16, u16) {
        (self.lo[idx], self.hi[idx])
    }

    /// Number of disparities covered over the whole image.
    pub fn total_len(&self) -> usize {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| (h - l) as usize + 1)
            .sum()
    }

    pub fn is_full(&self) -> bool {
        let top = (self.d_max - 1) as u16;
        self.lo.iter().all(|&l| l == 0) && self.hi.iter().all(|&h| h == top)
    }
}

/// Costs over each pixel's own range, stored back to back in raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostVolume<T> {
    ranges: SearchRangeMap,
    offsets: Vec<usize>,
    costs: Vec<T>,
    defined: Vec<bool>,
}

pub type MatchingCosts = CostVolume<u8>;
pub type AggregatedCosts = CostVolume<u16>;

impl<T: Copy + Default + Send + Sync> CostVolume<T> {
    pub(crate) fn zeroed(ranges: SearchRangeMap, defined: Vec<bool>) -> Self {
        let mut offsets = Vec::with_capacity(ranges.lo.len() + 1);
        let mut acc = 0usize;
        offsets.push(0);
        for i in 0..ranges.lo.len() {
            let (lo, hi) = ranges.at(i);
            acc += (hi - lo) as usize + 1;
            offsets.push(acc);
        }
        Self {
            ranges,
            offsets,
            costs: vec![T::default(); acc],
            defined,
        }
    }

    /// A volume shaped like `self` with fresh zeroed storage.
    pub(crate) fn same_shape<U: Copy + Default>(&self) -> CostVolume<U> {
        CostVolume {
            ranges: self.ranges.clone(),
            offsets: self.offsets.clone(),
            costs: vec![U::default(); self.costs.len()],
            defined: self.defined.clone(),
        }
    }

    pub fn width(&self) -> usize {
        self.ranges.width
    }

    pub fn height(&self) -> usize {
        self.ranges.height
    }

    pub fn ranges(&self) -> &SearchRangeMap {
        &self.ranges
    }

    /// Total number of stored entries.
    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    /// False for pixels without a census signature (the 2-pixel frame).
    #[inline]
    pub fn is_defined(&self, idx: usize) -> bool {
        self.defined[idx]
    }

    #[inline]
    pub fn costs_at(&self, idx: usize) -> &[T] {
        &self.costs[self.offsets[idx]..self.offsets[idx + 1]]
    }

    #[inline]
    pub fn costs(&self, x: usize, y: usize) -> &[T] {
        self.costs_at(y * self.width() + x)
    }

    /// Cost at disparity `d`, if `d` is inside the pixel's range.
    pub fn cost(&self, x: usize, y: usize, d: usize) -> Option<T> {
        let (lo, hi) = self.ranges.get(x, y);
        (lo as usize..=hi as usize)
            .contains(&d)
            .then(|| self.costs(x, y)[d - lo as usize])
    }

    pub(crate) fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub(crate) fn raw(&self) -> &[T] {
        &self.costs
    }

    pub(crate) fn raw_mut(&mut self) -> &mut [T] {
        &mut self.costs
    }

    /// Splits storage into one mutable slice per image row.
    pub(crate) fn rows_mut(&mut self) -> Vec<&mut [T]> {
        let w = self.ranges.width;
        let bounds: Vec<usize> = (0..=self.ranges.height).map(|y| self.offsets[y * w]).collect();
        split_at_bounds(&mut self.costs, &bounds)
    }
}

/// Splits `buf` into consecutive pieces `[b[i], b[i+1])`.
pub(crate) fn split_at_bounds<'a, T>(mut buf: &'a mut [T], bounds: &[usize]) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(bounds.len().saturating_sub(1));
    for win in bounds.windows(2) {
        let (head, tail) = buf.split_at_mut(win[1] - win[0]);
        out.push(head);
        buf = tail;
    }
    out
}

pub fn build_cost_volume(
    cl: &CensusMap,
    cr: &CensusMap,
    ranges: &SearchRangeMap,
) -> Result<MatchingCosts> {
    if cl.width != cr.width || cl.height != cr.height {
        return invalid("left and right census maps differ in size");
    }
    if ranges.width != cl.width || ranges.height != cl.height {
        return invalid("search ranges do not match image size");
    }
    let w = cl.width;
    let defined = (0..cl.height)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| cl.is_defined(x, y))
        .collect();
    let mut vol = MatchingCosts::zeroed(ranges.clone(), defined);
    let offsets = vol.offsets.clone();
    vol.rows_mut()
        .into_par_iter()
        .enumerate()
        .for_each(|(y, row)| {
            let base = offsets[y * w];
            for x in 0..w {
                let idx = y * w + x;
                let (lo, hi) = ranges.at(idx);
                let cell = &mut row[offsets[idx] - base..offsets[idx + 1] - base];
                if !cl.is_defined(x, y) {
                    cell.fill(MAX_COST);
                    continue;
                }
                let left = cl.signature(x, y);
                for (c, d) in cell.iter_mut().zip(lo as usize..=hi as usize) {
                    *c = if d <= x && cr.is_defined(x - d, y) {
                        hamming(left, cr.signature(x - d, y))
                    } else {
                        MAX_COST
                    };
                }
            }
        });
    Ok(vol)
}
