//! Mask-to-polygon conversion and GeoJSON export.
//!
//! Contours follow the cracks between pixels, so every vertex is an integer
//! pixel corner and the enclosed area equals the pixel count exactly.
//! Foreground is 4-connected and background 8-connected.

use std::path::Path;

use serde_json::{json, Map, Value};

use crate::backend::DetectionSet;
use crate::error::{Error, Result};
use crate::mask::InstanceMask;
use crate::raster::{corner_to_geo, GeoTransform};

pub type Point = (f64, f64);

/// Closed ring: first vertex repeated at the end.
pub type Ring = Vec<Point>;

/// Rings of one 4-connected component, in pixel-corner coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPolygon {
    pub exterior: Ring,
    pub holes: Vec<Ring>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldPolygon {
    pub exterior: Ring,
    pub holes: Vec<Ring>,
    pub source_id: u64,
    pub score: Option<f64>,
    /// Net area in CRS units squared (pixels squared in pixel-space mode).
    pub area: f64,
}

/// Signed shoelace area; positive for clockwise-on-screen rings (y down).
pub fn signed_area(ring: &[Point]) -> f64 {
    ring.windows(2)
        .map(|w| w[0].0 * w[1].1 - w[1].0 * w[0].1)
        .sum::<f64>()
        / 2.0
}

// Directions, clockwise on screen.
const EAST: u8 = 0;
const SOUTH: u8 = 1;
const WEST: u8 = 2;
const NORTH: u8 = 3;

#[derive(Clone, Copy)]
struct Crack {
    x: u32,
    y: u32,
    dir: u8,
    label: u32,
}

impl Crack {
    fn end(&self) -> (u32, u32) {
        match self.dir {
            EAST => (self.x + 1, self.y),
            SOUTH => (self.x, self.y + 1),
            WEST => (self.x - 1, self.y),
            _ => (self.x, self.y - 1),
        }
    }
}

/// Traces every 4-connected component of `mask` into an exterior ring and its holes.
///
/// Components are returned in order of their first pixel in a row-major scan.
pub fn trace_contours(mask: &InstanceMask) -> Result<Vec<PixelPolygon>> {
    let bb = mask.bbox().ok_or(Error::EmptyMask)?;
    let bm = mask.crop_to_bitmap(bb);
    let (w, h) = (bb.width as usize, bb.height as usize);
    let fg = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && bm.get(x as u32, y as u32);

    // 4-connected labels in row-major discovery order
    const NONE: u32 = u32::MAX;
    let mut labels = vec![NONE; w * h];
    let mut n_labels = 0u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if labels[y * w + x] != NONE || !fg(x as i64, y as i64) {
                continue;
            }
            labels[y * w + x] = n_labels;
            stack.push((x, y));
            while let Some((cx, cy)) = stack.pop() {
                for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                    if fg(nx, ny) && labels[ny as usize * w + nx as usize] == NONE {
                        labels[ny as usize * w + nx as usize] = n_labels;
                        stack.push((nx as usize, ny as usize));
                    }
                }
            }
            n_labels += 1;
        }
    }

    // Directed cracks with foreground on the right-hand side.
    let mut cracks: Vec<Crack> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let label = labels[y * w + x];
            if label == NONE {
                continue;
            }
            let (xi, yi) = (x as i64, y as i64);
            let (x, y) = (x as u32, y as u32);
            if !fg(xi, yi - 1) {
                cracks.push(Crack { x, y, dir: EAST, label });
            }
            if !fg(xi + 1, yi) {
                cracks.push(Crack { x: x + 1, y, dir: SOUTH, label });
            }
            if !fg(xi, yi + 1) {
                cracks.push(Crack { x: x + 1, y: y + 1, dir: WEST, label });
            }
            if !fg(xi - 1, yi) {
                cracks.push(Crack { x, y: y + 1, dir: NORTH, label });
            }
        }
    }

    // Outgoing cracks per vertex; at most two (at a saddle).
    let vw = w + 1;
    let mut out_edges = vec![[usize::MAX; 2]; vw * (h + 1)];
    for (i, c) in cracks.iter().enumerate() {
        let slot = &mut out_edges[c.y as usize * vw + c.x as usize];
        if slot[0] == usize::MAX {
            slot[0] = i;
        } else {
            slot[1] = i;
        }
    }
    let next_of = |i: usize| -> usize {
        let (ex, ey) = cracks[i].end();
        let slot = out_edges[ey as usize * vw + ex as usize];
        if slot[1] == usize::MAX {
            return slot[0];
        }
        // saddle: turn right, which keeps diagonal foreground pixels apart
        let right = (cracks[i].dir + 1) % 4;
        if cracks[slot[0]].dir == right {
            slot[0]
        } else {
            slot[1]
        }
    };

    let mut used = vec![false; cracks.len()];
    let mut polys: Vec<(Option<Ring>, Vec<Ring>)> = vec![(None, Vec::new()); n_labels as usize];
    let (ox, oy) = (bb.offset_x as f64, bb.offset_y as f64);
    for start in 0..cracks.len() {
        if used[start] {
            continue;
        }
        let mut verts: Vec<(u32, u32, u8)> = Vec::new();
        let mut i = start;
        loop {
            used[i] = true;
            verts.push((cracks[i].x, cracks[i].y, cracks[i].dir));
            i = next_of(i);
            if i == start {
                break;
            }
        }
        // keep only corners: vertices where the direction changes
        let m = verts.len();
        let corners: Vec<(u32, u32)> = (0..m)
            .filter(|&k| verts[k].2 != verts[(k + m - 1) % m].2)
            .map(|k| (verts[k].0, verts[k].1))
            .collect();
        let mut ring: Ring = corners
            .iter()
            .map(|&(x, y)| (x as f64 + ox, y as f64 + oy))
            .collect();
        ring.push(ring[0]);
        let label = cracks[start].label as usize;
        if signed_area(&ring) > 0.0 {
            polys[label].0 = Some(ring);
        } else {
            polys[label].1.push(ring);
        }
    }
    Ok(polys
        .into_iter()
        .map(|(ext, holes)| PixelPolygon {
            exterior: ext.expect("every component has an outer boundary"),
            holes,
        })
        .collect())
}

fn dist_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((p.0 - a.0).powi(2) + (p.1 - a.1).powi(2)).sqrt();
    }
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Index pair of the two mutually farthest points (diameter), smallest indices on ties.
fn diameter(pts: &[Point]) -> (usize, usize) {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| {
        pts[a]
            .0
            .total_cmp(&pts[b].0)
            .then(pts[a].1.total_cmp(&pts[b].1))
            .then(a.cmp(&b))
    });
    let cross = |o: Point, a: Point, b: Point| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<usize> = Vec::new();
    for pass in 0..2 {
        let base = hull.len();
        let iter: Box<dyn Iterator<Item = &usize>> = if pass == 0 {
            Box::new(idx.iter())
        } else {
            Box::new(idx.iter().rev())
        };
        for &i in iter {
            while hull.len() >= base + 2
                && cross(pts[hull[hull.len() - 2]], pts[hull[hull.len() - 1]], pts[i]) <= 0.0
            {
                hull.pop();
            }
            hull.push(i);
        }
        hull.pop();
    }
    hull.sort_unstable();
    hull.dedup();
    let mut best = (0, 1, -1.0);
    for (k, &a) in hull.iter().enumerate() {
        for &b in &hull[k + 1..] {
            let d = (pts[a].0 - pts[b].0).powi(2) + (pts[a].1 - pts[b].1).powi(2);
            if d > best.2 {
                best = (a, b, d);
            }
        }
    }
    (best.0, best.1)
}

/// Douglas-Peucker over `chain` (indices into `pts`), marking kept interior points.
fn dp_chain(pts: &[Point], chain: &[usize], tol: f64, keep: &mut [bool]) {
    let mut stack = vec![(0usize, chain.len() - 1)];
    while let Some((s, e)) = stack.pop() {
        if e <= s + 1 {
            continue;
        }
        let (a, b) = (pts[chain[s]], pts[chain[e]]);
        let (mut far, mut far_d) = (s, -1.0);
        for k in s + 1..e {
            let d = dist_to_segment(pts[chain[k]], a, b);
            if d > far_d {
                far = k;
                far_d = d;
            }
        }
        if far_d > tol {
            keep[chain[far]] = true;
            stack.push((s, far));
            stack.push((far, e));
        }
    }
}

/// Closed-ring Douglas-Peucker anchored at the ring's two mutually farthest vertices.
pub fn simplify(ring: &[Point], tolerance: f64) -> Result<Ring> {
    if ring.len() < 4 || ring.first() != ring.last() {
        return Err(Error::InvalidRing(format!(
            "ring must be closed with >= 4 vertices, got {} vertices",
            ring.len()
        )));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance {tolerance} must be >= 0")));
    }
    if tolerance == 0.0 {
        return Ok(ring.to_vec());
    }
    let pts = &ring[..ring.len() - 1];
    let m = pts.len();
    let (a, b) = diameter(pts);
    let chain1: Vec<usize> = (a..=b).collect();
    let chain2: Vec<usize> = (b..m).chain(0..=a).collect();
    let mut keep = vec![false; m];
    keep[a] = true;
    keep[b] = true;
    dp_chain(pts, &chain1, tolerance, &mut keep);
    dp_chain(pts, &chain2, tolerance, &mut keep);
    if keep.iter().filter(|&&k| k).count() < 3 {
        // Too flat to survive: force a split at the farthest vertex and recurse.
        let mut best: Option<(&Vec<usize>, usize, f64)> = None;
        for chain in [&chain1, &chain2] {
            for k in 1..chain.len() - 1 {
                let d = dist_to_segment(pts[chain[k]], pts[a], pts[b]);
                if best.is_none_or(|(_, _, bd)| d > bd) {
                    best = Some((chain, k, d));
                }
            }
        }
        let (chain, far, _) = best.ok_or_else(|| Error::InvalidRing("degenerate ring".into()))?;
        keep[chain[far]] = true;
        dp_chain(pts, &chain[..=far], tolerance, &mut keep);
        dp_chain(pts, &chain[far..], tolerance, &mut keep);
    }
    let mut out: Ring = (0..m).filter(|&i| keep[i]).map(|i| pts[i]).collect();
    out.push(out[0]);
    Ok(out)
}

/// Vectorizes every instance, simplifying in pixel units and mapping to CRS
/// coordinates when a geo-transform is given.
pub fn to_field_polygons(
    dets: &DetectionSet,
    gt: Option<&GeoTransform>,
    tolerance_px: f64,
) -> Result<Vec<FieldPolygon>> {
    let pixel_area = gt.map(|g| g.pixel_area()).unwrap_or(1.0);
    let to_crs = |ring: &Ring| -> Ring {
        match gt {
            Some(g) => ring.iter().map(|&(x, y)| corner_to_geo(g, x, y)).collect(),
            None => ring.clone(),
        }
    };
    let mut out = Vec::new();
    for inst in &dets.instances {
        let polys = match trace_contours(&inst.mask) {
            Ok(p) => p,
            Err(Error::EmptyMask) => {
                log::warn!("instance {} has an empty mask; skipped", inst.id);
                continue;
            }
            Err(e) => return Err(e),
        };
        for poly in polys {
            let mut exterior = simplify(&poly.exterior, tolerance_px)?;
            let mut holes = poly
                .holes
                .iter()
                .map(|h| simplify(h, tolerance_px))
                .collect::<Result<Vec<_>>>()?;
            let mut net = signed_area(&exterior) - holes.iter().map(|h| signed_area(h).abs()).sum::<f64>();
            if net <= 0.0 {
                exterior = poly.exterior.clone();
                holes = poly.holes.clone();
                net = signed_area(&exterior) - holes.iter().map(|h| signed_area(h).abs()).sum::<f64>();
            }
            out.push(FieldPolygon {
                exterior: to_crs(&exterior),
                holes: holes.iter().map(&to_crs).collect(),
                source_id: inst.id,
                score: inst.score,
                area: net * pixel_area,
            });
        }
    }
    Ok(out)
}

/// GeoJSON rings wind counter-clockwise for exteriors in a y-up CRS. In
/// pixel space (y down) the traced orientation is kept as is.
fn ring_coords(ring: &Ring) -> Value {
    Value::Array(ring.iter().map(|&(x, y)| json!([x, y])).collect())
}

/// Builds a GeoJSON FeatureCollection. `pipeline` is embedded as a foreign member.
pub fn feature_collection(
    polys: &[FieldPolygon],
    gt: Option<&GeoTransform>,
    pipeline: Option<Value>,
) -> Value {
    let features: Vec<Value> = polys
        .iter()
        .map(|p| {
            let mut rings = vec![ring_coords(&p.exterior)];
            rings.extend(p.holes.iter().map(ring_coords));
            json!({
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": rings},
                "properties": {"id": p.source_id, "score": p.score, "area_m2": p.area},
            })
        })
        .collect();
    let mut fc = Map::new();
    fc.insert("type".into(), json!("FeatureCollection"));
    match gt {
        Some(g) => {
            fc.insert(
                "crs".into(),
                json!({"type": "name", "properties": {"name": format!("EPSG:{}", g.crs_code)}}),
            );
        }
        None => {
            fc.insert("crs_note".into(), json!("pixel"));
        }
    }
    if let Some(p) = pipeline {
        fc.insert("pipeline".into(), p);
    }
    fc.insert("features".into(), Value::Array(features));
    Value::Object(fc)
}

pub fn write_geojson(path: &Path, fc: &Value) -> Result<()> {
    let text = serde_json::to_string(fc).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
