//! Merging per-tile detections into one scene-level detection set.
//!
//! Two halves of a field cut by a tile seam have almost no mutual IoU, so
//! seam unification compares the instances only inside the strip both tiles
//! observed. Afterwards a greedy mask-IoU suppression removes duplicates.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backend::{DetectionSet, FieldInstance};
use crate::error::{Error, Result};
use crate::mask::{mask_iou, mask_union, InstanceMask};
use crate::raster::{PixelRect, Tile, TileGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StitchConfig {
    pub strip_agreement_min: f64,
    pub nms_iou_max: f64,
    pub containment_min: f64,
}

impl Default for StitchConfig {
    fn default() -> Self {
        StitchConfig {
            strip_agreement_min: 0.8,
            nms_iou_max: 0.5,
            containment_min: 0.8,
        }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("strip_agreement_min", self.strip_agreement_min),
            ("nms_iou_max", self.nms_iou_max),
            ("containment_min", self.containment_min),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Scene-space detections produced from one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileDetections {
    pub tile_index: usize,
    pub detections: DetectionSet,
}

/// Scene-level id of a tile-local instance.
pub fn global_id(tile_index: usize, local_id: u64) -> u64 {
    ((tile_index as u64) << 32) | (local_id & 0xffff_ffff)
}

/// Re-embeds tile-local detections into a `scene_width x scene_height` canvas.
pub fn globalize(
    dets: &DetectionSet,
    tile: &Tile,
    scene_width: u32,
    scene_height: u32,
) -> Result<TileDetections> {
    if tile.offset_x as u64 + dets.width as u64 > scene_width as u64
        || tile.offset_y as u64 + dets.height as u64 > scene_height as u64
    {
        return Err(Error::Bounds(format!(
            "{}x{} tile at ({}, {}) overruns {scene_width}x{scene_height} scene",
            dets.width, dets.height, tile.offset_x, tile.offset_y
        )));
    }
    let instances = dets
        .instances
        .iter()
        .map(|inst| {
            Ok(FieldInstance {
                id: global_id(tile.index, inst.id),
                mask: inst
                    .mask
                    .embed(tile.offset_x, tile.offset_y, scene_width, scene_height)?,
                score: inst.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TileDetections {
        tile_index: tile.index,
        detections: DetectionSet {
            width: scene_width,
            height: scene_height,
            instances,
        },
    })
}

struct Candidate {
    tile: usize,
    id: u64,
    mask: InstanceMask,
    score: f64,
    area: u64,
    bbox: Option<PixelRect>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    /// Returns true if the sets were distinct.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        self.0[hi] = lo;
        true
    }
}

fn boxes_meet(a: Option<PixelRect>, b: Option<PixelRect>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a.intersection(&b).is_some(),
        _ => false,
    }
}

fn contained(a: &Candidate, b: &Candidate, min: f64) -> Result<bool> {
    let smaller = a.area.min(b.area);
    if smaller == 0 {
        return Ok(false);
    }
    let inter = if boxes_meet(a.bbox, b.bbox) {
        a.mask.intersection_area(&b.mask)?
    } else {
        0
    };
    Ok(inter as f64 / smaller as f64 >= min)
}

fn strip_agrees(a: &Candidate, b: &Candidate, strip: PixelRect, min: f64) -> Result<bool> {
    let a_s = a.mask.area_in_rect(strip);
    let b_s = b.mask.area_in_rect(strip);
    if a_s == 0 || b_s == 0 {
        return Ok(false);
    }
    let ab_s = if boxes_meet(a.bbox, b.bbox) {
        a.mask.intersection(&b.mask)?.area_in_rect(strip)
    } else {
        0
    };
    Ok(ab_s as f64 / a_s.min(b_s) as f64 >= min)
}

/// Unifies seam-split instances, merges nested duplicates and suppresses overlaps.
///
/// The result is independent of the order of `tiles`; output ids are the
/// output ranks `0..n`.
pub fn stitch(tiles: &[TileDetections], grid: &TileGrid, cfg: &StitchConfig) -> Result<DetectionSet> {
    cfg.validate()?;
    let (w, h) = (grid.width, grid.height);
    let mut cands = Vec::new();
    for td in tiles {
        let d = &td.detections;
        if (d.width, d.height) != (w, h) {
            return Err(Error::Shape(format!(
                "tile {} detections are {}x{}, scene is {w}x{h}",
                td.tile_index, d.width, d.height
            )));
        }
        if grid.tile(td.tile_index).is_none() {
            return Err(Error::Bounds(format!("tile index {} not in grid", td.tile_index)));
        }
        for inst in &d.instances {
            if inst.mask.dims() != (w, h) {
                return Err(Error::Shape(format!(
                    "instance {} is {}x{}, scene is {w}x{h}",
                    inst.id,
                    inst.mask.width(),
                    inst.mask.height()
                )));
            }
            cands.push(Candidate {
                tile: td.tile_index,
                id: inst.id,
                area: inst.mask.area(),
                bbox: inst.mask.bbox(),
                mask: inst.mask.clone(),
                score: inst.rank_score(),
            });
        }
    }
    cands.sort_by_key(|c| (c.tile, c.id));

    // Phase 1a: seam agreement and containment between original instances.
    let n = cands.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&cands[i], &cands[j]);
            if a.tile != b.tile {
                let ta = grid.tiles[a.tile].rect();
                let tb = grid.tiles[b.tile].rect();
                if let Some(strip) = ta.intersection(&tb) {
                    if strip_agrees(a, b, strip, cfg.strip_agreement_min)? {
                        uf.union(i, j);
                        continue;
                    }
                }
            }
            if contained(a, b, cfg.containment_min)? {
                uf.union(i, j);
            }
        }
    }

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = uf.find(i);
        if root_slot[r] == usize::MAX {
            root_slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[root_slot[r]].push(i);
    }

    let mut merged: Vec<(Candidate, BTreeSet<usize>)> = Vec::with_capacity(groups.len());
    for g in &groups {
        let masks: Vec<InstanceMask> = g.iter().map(|&i| cands[i].mask.clone()).collect();
        let mask = mask_union(&masks)?;
        let first = &cands[g[0]];
        let tiles: BTreeSet<usize> = g.iter().map(|&i| cands[i].tile).collect();
        merged.push((
            Candidate {
                tile: first.tile,
                id: first.id,
                score: g.iter().map(|&i| cands[i].score).fold(f64::MIN, f64::max),
                area: mask.area(),
                bbox: mask.bbox(),
                mask,
            },
            tiles,
        ));
    }

    // Phase 1b: unions can create new nested pairs; repeat until none remain.
    loop {
        let mut hit = None;
        'scan: for i in 0..merged.len() {
            for j in i + 1..merged.len() {
                if contained(&merged[i].0, &merged[j].0, cfg.containment_min)? {
                    hit = Some((i, j));
                    break 'scan;
                }
            }
        }
        let Some((i, j)) = hit else { break };
        let (b, b_tiles) = merged.remove(j);
        let (a, a_tiles) = &mut merged[i];
        a.mask = a.mask.union(&b.mask)?;
        a.area = a.mask.area();
        a.bbox = a.mask.bbox();
        a.score = a.score.max(b.score);
        if (b.tile, b.id) < (a.tile, a.id) {
            a.tile = b.tile;
            a.id = b.id;
        }
        a_tiles.extend(b_tiles);
    }

    for (c, tiles) in &merged {
        if tiles.len() >= 3 {
            log::warn!(
                "field seeded by instance {} of tile {} spans {} tiles; large fields may fragment",
                c.id as u32,
                c.tile,
                tiles.len()
            );
        }
    }

    // Phase 2: greedy suppression.
    let mut order: Vec<Candidate> = merged.into_iter().map(|(c, _)| c).collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.area.cmp(&a.area))
            .then((a.tile, a.id).cmp(&(b.tile, b.id)))
    });
    let mut kept: Vec<Candidate> = Vec::new();
    for c in order {
        let mut suppressed = false;
        for k in &kept {
            if boxes_meet(c.bbox, k.bbox) && mask_iou(&c.mask, &k.mask)? >= cfg.nms_iou_max {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(c);
        }
    }

    Ok(DetectionSet {
        width: w,
        height: h,
        instances: kept
            .into_iter()
            .enumerate()
            .map(|(rank, c)| FieldInstance {
                id: rank as u64,
                mask: c.mask,
                score: Some(c.score),
            })
            .collect(),
    })
}
