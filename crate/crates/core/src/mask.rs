//! Run-length-encoded binary masks and the mask algebra used by metrics,
//! stitching and vectorization.
//!
//! Counts follow the uncompressed COCO convention: runs over a column-major
//! scan (pixel `(x, y)` at linear index `x * height + y`), alternating
//! background/foreground and starting with a (possibly empty) background run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::PixelRect;

/// Dense row-major boolean image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: u32, height: u32) -> Self {
        Bitmap {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Bitmap {
            width,
            height,
            bits,
        }
    }

    pub fn from_vec(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "bitmap has {} pixels, expected {width}x{height}",
                bits.len()
            )));
        }
        Ok(Bitmap {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    fn eroded(&self) -> Bitmap {
        let (w, h) = (self.width, self.height);
        Bitmap::from_fn(w, h, |x, y| {
            self.get(x, y)
                && x > 0
                && y > 0
                && x + 1 < w
                && y + 1 < h
                && self.get(x - 1, y)
                && self.get(x + 1, y)
                && self.get(x, y - 1)
                && self.get(x, y + 1)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Run-length-encoded binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InstanceMask {
    width: u32,
    height: u32,
    counts: Vec<u32>,
}

impl InstanceMask {
    /// Validates and wraps raw counts.
    pub fn from_counts(width: u32, height: u32, counts: Vec<u32>) -> Result<Self> {
        validate_counts(width, height, &counts)?;
        Ok(InstanceMask {
            width,
            height,
            counts,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        InstanceMask {
            width,
            height,
            counts: vec![width * height],
        }
    }

    /// Mask with exactly the pixels of `rect` set; `rect` is clipped to the extent.
    pub fn from_rect(width: u32, height: u32, rect: PixelRect) -> Self {
        let frame = PixelRect::new(0, 0, width, height);
        let Some(r) = rect.intersection(&frame) else {
            return Self::empty(width, height);
        };
        let h = height as u64;
        let runs = (r.offset_x..r.right())
            .map(|x| (x as u64 * h + r.offset_y as u64, r.height as u64));
        Self::from_fg_runs(width, height, runs)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.len() < 2
    }

    /// Foreground runs as `(start, len)` in column-major linear index.
    pub fn fg_runs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += c as u64;
            (i % 2 == 1).then_some((start, c as u64))
        })
    }

    /// Builds a mask from sorted, non-overlapping foreground runs; adjacent runs are merged.
    pub fn from_fg_runs(
        width: u32,
        height: u32,
        runs: impl IntoIterator<Item = (u64, u64)>,
    ) -> Self {
        let total = width as u64 * height as u64;
        let mut counts = Vec::new();
        let mut pos = 0u64;
        for (start, len) in runs {
            if len == 0 {
                continue;
            }
            debug_assert!(start >= pos, "runs must be sorted and disjoint");
            if start == pos && !counts.is_empty() {
                *counts.last_mut().unwrap() += len as u32;
            } else {
                counts.push((start - pos) as u32);
                counts.push(len as u32);
            }
            pos = start + len;
        }
        if counts.is_empty() {
            counts.push(total as u32);
        } else if pos < total {
            counts.push((total - pos) as u32);
        }
        InstanceMask {
            width,
            height,
            counts,
        }
    }

    /// Builds a mask from sorted column-major linear indices of foreground pixels.
    pub(crate) fn from_sorted_indices(width: u32, height: u32, idx: &[u64]) -> Self {
        let mut runs: Vec<(u64, u64)> = Vec::new();
        for &i in idx {
            match runs.last_mut() {
                Some((s, l)) if *s + *l == i => *l += 1,
                _ => runs.push((i, 1)),
            }
        }
        Self::from_fg_runs(width, height, runs)
    }

    pub fn to_bitmap(&self) -> Bitmap {
        let mut bm = Bitmap::new(self.width, self.height);
        let h = self.height as u64;
        for (start, len) in self.fg_runs() {
            for i in start..start + len {
                bm.set((i / h) as u32, (i % h) as u32, true);
            }
        }
        bm
    }

    /// Tight bounding rectangle of the foreground, `None` when empty.
    pub fn bbox(&self) -> Option<PixelRect> {
        let h = self.height as u64;
        let mut bounds: Option<(u64, u64, u64, u64)> = None;
        for (start, len) in self.fg_runs() {
            let end = start + len - 1;
            let (x0, y0) = (start / h, start % h);
            let (x1, y1) = (end / h, end % h);
            let (ymin, ymax) = if x0 == x1 { (y0, y1) } else { (0, h - 1) };
            bounds = Some(match bounds {
                None => (x0, ymin, x1, ymax),
                Some((a, b, c, d)) => (a.min(x0), b.min(ymin), c.max(x1), d.max(ymax)),
            });
        }
        bounds.map(|(x0, y0, x1, y1)| {
            PixelRect::new(x0 as u32, y0 as u32, (x1 - x0 + 1) as u32, (y1 - y0 + 1) as u32)
        })
    }

    /// Decodes only the pixels inside `rect` into a `rect`-sized bitmap.
    pub fn crop_to_bitmap(&self, rect: PixelRect) -> Bitmap {
        let mut bm = Bitmap::new(rect.width, rect.height);
        let h = self.height as u64;
        for (start, len) in self.fg_runs() {
            let mut i = start;
            let end = start + len;
            while i < end {
                let x = (i / h) as u32;
                let col_end = (x as u64 + 1) * h;
                let stop = end.min(col_end);
                if x >= rect.offset_x && x < rect.right() {
                    let y0 = (i % h) as u32;
                    let y1 = y0 + (stop - i) as u32;
                    for y in y0.max(rect.offset_y)..y1.min(rect.bottom()) {
                        bm.set(x - rect.offset_x, y - rect.offset_y, true);
                    }
                }
                i = stop;
            }
        }
        bm
    }

    /// Foreground pixel count inside `rect`.
    pub fn area_in_rect(&self, rect: PixelRect) -> u64 {
        let h = self.height as u64;
        let mut n = 0u64;
        for (start, len) in self.fg_runs() {
            let end = start + len;
            let first_col = start / h;
            let last_col = (end - 1) / h;
            if last_col < rect.offset_x as u64 || first_col >= rect.right() as u64 {
                continue;
            }
            for x in first_col.max(rect.offset_x as u64)..=last_col.min(rect.right() as u64 - 1) {
                let col_start = x * h;
                let a = start.max(col_start + rect.offset_y as u64);
                let b = end.min(col_start + rect.bottom() as u64);
                if b > a {
                    n += b - a;
                }
            }
        }
        n
    }

    /// Re-embeds this mask at `(offset_x, offset_y)` inside a larger canvas.
    pub fn embed(&self, offset_x: u32, offset_y: u32, width: u32, height: u32) -> Result<Self> {
        if offset_x as u64 + self.width as u64 > width as u64
            || offset_y as u64 + self.height as u64 > height as u64
        {
            return Err(Error::Bounds(format!(
                "{}x{} mask at ({offset_x}, {offset_y}) overruns {width}x{height}",
                self.width, self.height
            )));
        }
        let h = self.height as u64;
        let big_h = height as u64;
        let mut runs: Vec<(u64, u64)> = Vec::new();
        for (start, len) in self.fg_runs() {
            let mut i = start;
            let end = start + len;
            while i < end {
                let x = i / h;
                let stop = end.min((x + 1) * h);
                let y = i % h;
                let s = (x + offset_x as u64) * big_h + y + offset_y as u64;
                let l = stop - i;
                match runs.last_mut() {
                    Some((ps, pl)) if *ps + *pl == s => *pl += l,
                    _ => runs.push((s, l)),
                }
                i = stop;
            }
        }
        Ok(Self::from_fg_runs(width, height, runs))
    }

    fn check_same_dims(&self, other: &InstanceMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "mask dimensions differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &InstanceMask) -> Result<u64> {
        self.check_same_dims(other)?;
        Ok(intersect_runs(self.fg_runs(), other.fg_runs()).map(|(_, l)| l).sum())
    }

    pub fn intersection(&self, other: &InstanceMask) -> Result<InstanceMask> {
        self.check_same_dims(other)?;
        Ok(Self::from_fg_runs(
            self.width,
            self.height,
            intersect_runs(self.fg_runs(), other.fg_runs()),
        ))
    }

    pub fn union(&self, other: &InstanceMask) -> Result<InstanceMask> {
        self.check_same_dims(other)?;
        let mut all: Vec<(u64, u64)> = self.fg_runs().chain(other.fg_runs()).collect();
        all.sort_unstable();
        Ok(Self::from_fg_runs(self.width, self.height, coalesce(all)))
    }

    /// Pixels of `self` not in `other`.
    pub fn difference(&self, other: &InstanceMask) -> Result<InstanceMask> {
        self.check_same_dims(other)?;
        let inter: Vec<(u64, u64)> = intersect_runs(self.fg_runs(), other.fg_runs()).collect();
        let mut out = Vec::new();
        let mut cut = inter.iter().peekable();
        for (start, len) in self.fg_runs() {
            let end = start + len;
            let mut pos = start;
            while let Some(&&(cs, cl)) = cut.peek() {
                if cs >= end {
                    break;
                }
                if cs > pos {
                    out.push((pos, cs - pos));
                }
                pos = cs + cl;
                cut.next();
            }
            if pos < end {
                out.push((pos, end - pos));
            }
        }
        Ok(Self::from_fg_runs(self.width, self.height, out))
    }
}

fn validate_counts(width: u32, height: u32, counts: &[u32]) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::CorruptMask(format!(
            "mask extent must be at least 1x1, got {width}x{height}"
        )));
    }
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    let expected = width as u64 * height as u64;
    if total != expected {
        return Err(Error::CorruptMask(format!(
            "counts sum to {total}, expected {expected} for {width}x{height}"
        )));
    }
    if expected > u32::MAX as u64 {
        return Err(Error::CorruptMask(format!("{width}x{height} mask too large")));
    }
    if let Some(i) = counts.iter().skip(1).position(|&c| c == 0) {
        return Err(Error::CorruptMask(format!("zero-length run at position {}", i + 1)));
    }
    Ok(())
}

/// Intersection of two sorted disjoint run lists.
fn intersect_runs(
    a: impl Iterator<Item = (u64, u64)>,
    b: impl Iterator<Item = (u64, u64)>,
) -> impl Iterator<Item = (u64, u64)> {
    let mut a = a.peekable();
    let mut b = b.peekable();
    std::iter::from_fn(move || loop {
        let (&(sa, la), &(sb, lb)) = (a.peek()?, b.peek()?);
        let (ea, eb) = (sa + la, sb + lb);
        let s = sa.max(sb);
        let e = ea.min(eb);
        if ea <= eb {
            a.next();
        } else {
            b.next();
        }
        if e > s {
            return Some((s, e - s));
        }
    })
}

/// Merges sorted, possibly overlapping runs.
fn coalesce(sorted: Vec<(u64, u64)>) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::with_capacity(sorted.len());
    for (s, l) in sorted {
        match out.last_mut() {
            Some((ps, pl)) if s <= *ps + *pl => *pl = (*pl).max(s + l - *ps),
            _ => out.push((s, l)),
        }
    }
    out
}

pub fn rle_encode(bitmap: &Bitmap) -> InstanceMask {
    let (w, h) = (bitmap.width, bitmap.height);
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..w {
        for y in 0..h {
            let v = bitmap.get(x, y);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    InstanceMask {
        width: w,
        height: h,
        counts,
    }
}

/// Decodes raw counts, rejecting any that violate the run invariants.
pub fn rle_decode(width: u32, height: u32, counts: &[u32]) -> Result<Bitmap> {
    validate_counts(width, height, counts)?;
    let mask = InstanceMask {
        width,
        height,
        counts: counts.to_vec(),
    };
    Ok(mask.to_bitmap())
}

/// `|a ∩ b| / |a ∪ b|`; two empty masks score 0.
pub fn mask_iou(a: &InstanceMask, b: &InstanceMask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Inner boundary band: `mask \ erode^thickness(mask)`, 4-connected erosion
/// with everything outside the frame treated as background.
pub fn boundary_band(mask: &InstanceMask, thickness: u32) -> Result<InstanceMask> {
    if thickness < 1 {
        return Err(Error::InvalidConfig("boundary thickness must be >= 1".into()));
    }
    let Some(bb) = mask.bbox() else {
        return Ok(mask.clone());
    };
    // Pixels outside the bbox are background, so eroding the crop is equivalent.
    let crop = mask.crop_to_bitmap(bb);
    let mut eroded = crop.clone();
    for _ in 0..thickness {
        eroded = eroded.eroded();
        if eroded.count() == 0 {
            break;
        }
    }
    let h = mask.height as u64;
    let mut idx = Vec::new();
    for x in 0..bb.width {
        for y in 0..bb.height {
            if crop.get(x, y) && !eroded.get(x, y) {
                idx.push((x + bb.offset_x) as u64 * h + (y + bb.offset_y) as u64);
            }
        }
    }
    Ok(InstanceMask::from_sorted_indices(mask.width, mask.height, &idx))
}

/// Labels foreground components, ordered by their minimum column-major index.
pub fn connected_components(bitmap: &Bitmap, connectivity: Connectivity) -> Vec<InstanceMask> {
    let (w, h) = (bitmap.width, bitmap.height);
    let mut seen = vec![false; bitmap.bits.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    let offsets: &[(i64, i64)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (0, -1),
            (1, -1),
            (-1, 0),
            (1, 0),
            (-1, 1),
            (0, 1),
            (1, 1),
        ],
    };
    for x in 0..w {
        for y in 0..h {
            let i = y as usize * w as usize + x as usize;
            if !bitmap.bits[i] || seen[i] {
                continue;
            }
            seen[i] = true;
            stack.push((x, y));
            let mut members: Vec<u64> = Vec::new();
            while let Some((cx, cy)) = stack.pop() {
                members.push(cx as u64 * h as u64 + cy as u64);
                for &(dx, dy) in offsets {
                    let nx = cx as i64 + dx;
                    let ny = cy as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w as usize + nx as usize;
                    if bitmap.bits[j] && !seen[j] {
                        seen[j] = true;
                        stack.push((nx as u32, ny as u32));
                    }
                }
            }
            members.sort_unstable();
            out.push(InstanceMask::from_sorted_indices(w, h, &members));
        }
    }
    out
}

/// Pixelwise OR of equally sized masks.
pub fn mask_union(masks: &[InstanceMask]) -> Result<InstanceMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Shape("union of zero masks".into()))?;
    for m in &masks[1..] {
        first.check_same_dims(m)?;
    }
    let mut all: Vec<(u64, u64)> = masks.iter().flat_map(|m| m.fg_runs()).collect();
    all.sort_unstable();
    Ok(InstanceMask::from_fg_runs(first.width, first.height, coalesce(all)))
}
