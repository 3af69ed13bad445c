//! Dataset construction from parcel vectors: rasterization, patch
//! extraction, spatial-block train/test splitting and summary statistics.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backend::{read_rlej, write_rlej, DetectionSet, FieldInstance};
use crate::error::{Error, Result};
use crate::mask::{rle_encode, InstanceMask};
use crate::raster::{axis_starts, crop, write_png, GeoTransform, PixelRect, RasterPatch};
use crate::vector::{signed_area, Point, Ring};

/// A parcel: exterior ring followed by hole rings, all closed.
pub type Parcel = Vec<Ring>;

/// Reads the Polygon features of a GeoJSON FeatureCollection.
pub fn read_parcels(path: &Path) -> Result<Vec<Parcel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_parcels(&text).map_err(|e| Error::json(path, e))
}

pub fn parse_parcels(text: &str) -> std::result::Result<Vec<Parcel>, String> {
    let v: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let features = v["features"]
        .as_array()
        .ok_or("expected a FeatureCollection with a features array")?;
    let mut out = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        let geom = &f["geometry"];
        if geom["type"] != "Polygon" {
            return Err(format!("feature {i}: geometry type must be Polygon"));
        }
        let rings = geom["coordinates"]
            .as_array()
            .ok_or_else(|| format!("feature {i}: missing coordinates"))?;
        let mut parcel = Vec::with_capacity(rings.len());
        for ring in rings {
            let pts = ring
                .as_array()
                .ok_or_else(|| format!("feature {i}: ring is not an array"))?
                .iter()
                .map(|p| match (p[0].as_f64(), p[1].as_f64()) {
                    (Some(x), Some(y)) => Ok((x, y)),
                    _ => Err(format!("feature {i}: bad coordinate {p}")),
                })
                .collect::<std::result::Result<Ring, String>>()?;
            parcel.push(pts);
        }
        out.push(parcel);
    }
    Ok(out)
}

/// Two parcels claimed the same pixels; the smaller one kept them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapWarning {
    pub winner: usize,
    pub loser: usize,
    pub pixels: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterizedParcels {
    /// `(parcel index, mask)` for every parcel that received at least one pixel.
    pub masks: Vec<(usize, InstanceMask)>,
    pub warnings: Vec<OverlapWarning>,
}

fn check_ring(ring: &[Point]) -> Result<()> {
    if ring.len() < 4 || ring.first() != ring.last() {
        return Err(Error::InvalidRing(format!(
            "ring must be closed with >= 4 vertices, got {}",
            ring.len()
        )));
    }
    Ok(())
}

/// Pixels whose centers fall inside `rings` by the even-odd rule, returned
/// as `(x, y)` in row-major order.
///
/// A center on a left or top edge is inside, on a right or bottom edge outside.
pub fn scanline_fill(rings: &[Ring], width: u32, height: u32) -> Vec<(u32, u32)> {
    let edges: Vec<(Point, Point)> = rings
        .iter()
        .flat_map(|r| r.windows(2).map(|w| (w[0], w[1])))
        .filter(|(a, b)| a.1 != b.1)
        .collect();
    if edges.is_empty() {
        return Vec::new();
    }
    let ymin = edges.iter().map(|(a, b)| a.1.min(b.1)).fold(f64::INFINITY, f64::min);
    let ymax = edges.iter().map(|(a, b)| a.1.max(b.1)).fold(f64::NEG_INFINITY, f64::max);
    let row0 = ((ymin - 0.5).floor().max(0.0) as u32).min(height);
    let row1 = ((ymax - 0.5).ceil().max(0.0) as u32 + 1).min(height);
    let mut out = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    for row in row0..row1 {
        let cy = row as f64 + 0.5;
        xs.clear();
        for &(a, b) in &edges {
            if (a.1 > cy) != (b.1 > cy) {
                xs.push(a.0 + (cy - a.1) * (b.0 - a.0) / (b.1 - a.1));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // columns c with xa <= c + 0.5 < xb
            let (xa, xb) = (pair[0], pair[1]);
            let first = first_center_at_or_after(xa);
            let last = first_center_at_or_after(xb);
            let lo = first.max(0);
            let hi = last.min(width as i64);
            for c in lo..hi {
                out.push((c as u32, row));
            }
        }
    }
    out
}

/// Smallest column `c` with `c + 0.5 >= x`.
fn first_center_at_or_after(x: f64) -> i64 {
    if !x.is_finite() {
        return if x > 0.0 { i64::MAX / 2 } else { i64::MIN / 2 };
    }
    let mut c = (x - 0.5).ceil() as i64;
    while (c as f64 + 0.5) < x {
        c += 1;
    }
    while ((c - 1) as f64 + 0.5) >= x {
        c -= 1;
    }
    c
}

/// Burns parcels into instance masks using pixel-center membership.
///
/// `gt = None` means the parcel coordinates are already pixel corners.
/// Pixels claimed by several parcels go to the smallest parcel (lower index
/// on ties) and one warning is recorded per conflicting pair.
pub fn rasterize_parcels(
    parcels: &[Parcel],
    gt: Option<&GeoTransform>,
    width: u32,
    height: u32,
) -> Result<RasterizedParcels> {
    for p in parcels {
        if p.is_empty() {
            return Err(Error::InvalidRing("parcel without rings".into()));
        }
        for r in p {
            check_ring(r)?;
        }
    }
    let to_pixel = |ring: &Ring| -> Ring {
        match gt {
            Some(g) => ring.iter().map(|&(x, y)| g.geo_to_corner(x, y)).collect(),
            None => ring.clone(),
        }
    };
    let filled: Vec<(f64, Vec<(u32, u32)>)> = parcels
        .par_iter()
        .map(|p| {
            let rings: Vec<Ring> = p.iter().map(to_pixel).collect();
            let area = signed_area(&rings[0]).abs()
                - rings[1..].iter().map(|r| signed_area(r).abs()).sum::<f64>();
            (area, scanline_fill(&rings, width, height))
        })
        .collect();

    const NONE: u32 = u32::MAX;
    let mut owner = vec![NONE; width as usize * height as usize];
    let mut conflicts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (i, (area, pixels)) in filled.iter().enumerate() {
        for &(x, y) in pixels {
            let slot = &mut owner[y as usize * width as usize + x as usize];
            if *slot == NONE {
                *slot = i as u32;
                continue;
            }
            let j = *slot as usize;
            let (winner, loser) = if filled[j].0 <= *area { (j, i) } else { (i, j) };
            *slot = winner as u32;
            *conflicts.entry((winner, loser)).or_default() += 1;
        }
    }

    let mut members: Vec<Vec<u64>> = vec![Vec::new(); parcels.len()];
    for x in 0..width {
        for y in 0..height {
            let o = owner[y as usize * width as usize + x as usize];
            if o != NONE {
                members[o as usize].push(x as u64 * height as u64 + y as u64);
            }
        }
    }
    let masks = members
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(i, m)| (i, InstanceMask::from_sorted_indices(width, height, m)))
        .collect();
    let warnings = conflicts
        .into_iter()
        .map(|((winner, loser), pixels)| {
            log::warn!("parcels {winner} and {loser} overlap on {pixels} px; kept {winner}");
            OverlapWarning {
                winner,
                loser,
                pixels,
            }
        })
        .collect();
    Ok(RasterizedParcels { masks, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchExtractionConfig {
    pub patch_size_px: u32,
    /// Defaults to `patch_size_px` (no overlap) when absent.
    pub stride_px: Option<u32>,
    pub min_field_px: u64,
    pub drop_empty: bool,
}

impl Default for PatchExtractionConfig {
    fn default() -> Self {
        PatchExtractionConfig {
            patch_size_px: 512,
            stride_px: None,
            min_field_px: 32,
            drop_empty: true,
        }
    }
}

impl PatchExtractionConfig {
    pub fn stride(&self) -> u32 {
        self.stride_px.unwrap_or(self.patch_size_px)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size_px < 64 {
            return Err(Error::InvalidConfig(format!(
                "patch_size_px {} must be >= 64",
                self.patch_size_px
            )));
        }
        let stride = self.stride();
        if stride < 1 || stride > self.patch_size_px {
            return Err(Error::InvalidConfig(format!(
                "stride_px {stride} must be in 1..={}",
                self.patch_size_px
            )));
        }
        if self.min_field_px < 1 {
            return Err(Error::InvalidConfig("min_field_px must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub rect: PixelRect,
    pub patch: RasterPatch,
    /// Clipped instances; ids are scene mask indices, scores are `None`.
    pub annotations: DetectionSet,
}

/// Cuts a scene and its instance masks into patches on a stride grid.
pub fn extract_patches(
    scene: &RasterPatch,
    masks: &[InstanceMask],
    cfg: &PatchExtractionConfig,
) -> Result<Vec<PatchSample>> {
    cfg.validate()?;
    let (w, h) = (scene.width(), scene.height());
    if let Some(m) = masks.iter().find(|m| m.dims() != (w, h)) {
        return Err(Error::Shape(format!(
            "mask is {}x{}, scene is {w}x{h}",
            m.width(),
            m.height()
        )));
    }
    let overlap = cfg.patch_size_px - cfg.stride();
    let xs = axis_starts(w, cfg.patch_size_px, overlap);
    let ys = axis_starts(h, cfg.patch_size_px, overlap);
    let (pw, ph) = (cfg.patch_size_px.min(w), cfg.patch_size_px.min(h));
    let boxes: Vec<Option<PixelRect>> = masks.iter().map(|m| m.bbox()).collect();
    let mut out = Vec::new();
    for &oy in &ys {
        for &ox in &xs {
            let rect = PixelRect::new(ox, oy, pw, ph);
            let mut instances = Vec::new();
            for (i, m) in masks.iter().enumerate() {
                if !boxes[i].is_some_and(|b| b.intersection(&rect).is_some()) {
                    continue;
                }
                let clipped = rle_encode(&m.crop_to_bitmap(rect));
                if clipped.area() < cfg.min_field_px {
                    continue;
                }
                instances.push(FieldInstance {
                    id: i as u64,
                    mask: clipped,
                    score: None,
                });
            }
            if instances.is_empty() && cfg.drop_empty {
                continue;
            }
            out.push(PatchSample {
                rect,
                patch: crop(scene, rect)?,
                annotations: DetectionSet {
                    width: pw,
                    height: ph,
                    instances,
                },
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One line of a JSON-lines manifest. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub annotation_path: PathBuf,
    pub resolution_m_per_px: f64,
    pub region_tag: String,
    pub split: Split,
    /// Top-left corner of the image in CRS units (pixels when not geo-referenced).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ManifestTotals {
    pub images: usize,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub totals: ManifestTotals,
}

impl DatasetManifest {
    /// Wraps entries after checking unique paths and positive resolutions.
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(&e.image_path) || !seen.insert(&e.annotation_path) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate manifest path {}",
                    e.image_path.display()
                )));
            }
            if !(e.resolution_m_per_px > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{}: resolution must be > 0",
                    e.image_path.display()
                )));
            }
        }
        let totals = ManifestTotals {
            images: entries.len(),
            instances: entries.iter().filter_map(|e| e.instances).sum(),
        };
        Ok(DatasetManifest { entries, totals })
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::json(path, format!("line {}: {e}", n + 1)))?;
        entries.push(entry);
    }
    DatasetManifest::new(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e).map_err(|err| Error::json(path, err))?;
        writeln!(file, "{line}").map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

/// Writes patch PNGs (with geo sidecars) and `.rlej` annotations, returning
/// manifest entries with paths relative to `out_dir`.
pub fn write_patch_samples(
    samples: &[PatchSample],
    out_dir: &Path,
    stem: &str,
    region_tag: &str,
) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let name = format!("{stem}_{}_{}", s.rect.offset_x, s.rect.offset_y);
        let image = PathBuf::from(format!("{name}.png"));
        let annotation = PathBuf::from(format!("{name}.rlej"));
        write_png(&out_dir.join(&image), &s.patch)?;
        write_rlej(&out_dir.join(&annotation), &s.annotations)?;
        let (resolution, origin) = match s.patch.geo() {
            Some(g) => (g.pixel_size_x, [g.origin_x, g.origin_y]),
            None => (1.0, [s.rect.offset_x as f64, -(s.rect.offset_y as f64)]),
        };
        entries.push(ManifestEntry {
            image_path: image,
            annotation_path: annotation,
            resolution_m_per_px: resolution,
            region_tag: region_tag.to_string(),
            split: Split::Train,
            origin: Some(origin),
            instances: Some(s.annotations.instances.len()),
        });
    }
    Ok(entries)
}

/// Field-count buckets: <10, 10-49, 50-99, 100-299, >=300.
pub const FIELD_COUNT_BUCKETS: [&str; 5] = ["<10", "10-49", "50-99", "100-299", ">=300"];

fn bucket_of(n: usize) -> usize {
    match n {
        0..=9 => 0,
        10..=49 => 1,
        50..=99 => 2,
        100..=299 => 3,
        _ => 4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRow {
    pub resolution_m_per_px: f64,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryError {
    pub annotation_path: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: usize,
    pub instances: usize,
    pub per_resolution: Vec<ResolutionRow>,
    pub field_count_histogram: BTreeMap<String, usize>,
    pub errors: Vec<EntryError>,
    /// Fraction of entries whose annotations could be read.
    pub completeness: f64,
}

/// Totals, per-resolution image counts and field-count histogram.
/// Annotation paths are resolved against `base_dir`.
pub fn dataset_stats(manifest: &DatasetManifest, base_dir: &Path) -> DatasetStats {
    let counts: Vec<std::result::Result<usize, String>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            read_rlej(&base_dir.join(&e.annotation_path))
                .map(|d| d.instances.len())
                .map_err(|err| err.to_string())
        })
        .collect();
    let mut histogram: BTreeMap<String, usize> =
        FIELD_COUNT_BUCKETS.iter().map(|b| (b.to_string(), 0)).collect();
    let mut per_res: Vec<ResolutionRow> = Vec::new();
    let mut errors = Vec::new();
    let (mut images, mut instances) = (0, 0);
    for (e, c) in manifest.entries.iter().zip(counts) {
        match c {
            Ok(n) => {
                images += 1;
                instances += n;
                *histogram.get_mut(FIELD_COUNT_BUCKETS[bucket_of(n)]).unwrap() += 1;
                match per_res
                    .iter_mut()
                    .find(|r| r.resolution_m_per_px == e.resolution_m_per_px)
                {
                    Some(r) => r.images += 1,
                    None => per_res.push(ResolutionRow {
                        resolution_m_per_px: e.resolution_m_per_px,
                        images: 1,
                    }),
                }
            }
            Err(error) => errors.push(EntryError {
                annotation_path: e.annotation_path.clone(),
                error,
            }),
        }
    }
    per_res.sort_by(|a, b| a.resolution_m_per_px.total_cmp(&b.resolution_m_per_px));
    let total = manifest.entries.len();
    DatasetStats {
        images,
        instances,
        per_resolution: per_res,
        field_count_histogram: histogram,
        errors,
        completeness: if total == 0 { 1.0 } else { images as f64 / total as f64 },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct BlockKey {
    region: String,
    bx: i64,
    by: i64,
}

fn block_hash(seed: u64, key: &BlockKey) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.region.as_bytes());
    h.update([0u8]);
    h.update(key.bx.to_le_bytes());
    h.update(key.by.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

/// Assigns whole spatial blocks to the test split in seeded-hash order until
/// `test_fraction` of the entries is reached.
///
/// Blocks are `block_px` pixels on a side at each entry's resolution, keyed by
/// region tag and quantized origin.
pub fn split_manifest(
    entries: &[ManifestEntry],
    test_fraction: f64,
    seed: u64,
    block_px: u32,
) -> Result<SplitOutcome> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test fraction {test_fraction} must be in (0, 1)"
        )));
    }
    if block_px < 1 {
        return Err(Error::InvalidConfig("block_px must be >= 1".into()));
    }
    let mut blocks: BTreeMap<BlockKey, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        let origin = e.origin.ok_or_else(|| {
            Error::InvalidConfig(format!("{}: entry has no origin", e.image_path.display()))
        })?;
        let size = block_px as f64 * e.resolution_m_per_px;
        let key = BlockKey {
            region: e.region_tag.clone(),
            bx: (origin[0] / size).floor() as i64,
            by: (origin[1] / size).floor() as i64,
        };
        blocks.entry(key).or_default().push(i);
    }
    let mut warnings = Vec::new();
    if blocks.len() < 2 && !entries.is_empty() {
        let w = format!(
            "all {} entries fall in one spatial block; no test split possible",
            entries.len()
        );
        log::warn!("{w}");
        warnings.push(w);
    }
    let mut order: Vec<(u64, &BlockKey, &Vec<usize>)> =
        blocks.iter().map(|(k, v)| (block_hash(seed, k), k, v)).collect();
    order.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let total = entries.len();
    let target = test_fraction * total as f64;
    let mut split = vec![Split::Train; total];
    let mut n_test = 0usize;
    for (_, _, members) in order {
        if n_test as f64 >= target {
            break;
        }
        if n_test + members.len() >= total {
            continue;
        }
        for &i in members {
            split[i] = Split::Test;
        }
        n_test += members.len();
    }
    let out: Vec<ManifestEntry> = entries
        .iter()
        .zip(split)
        .map(|(e, s)| ManifestEntry {
            split: s,
            ..e.clone()
        })
        .collect();
    Ok(SplitOutcome {
        manifest: DatasetManifest::new(out)?,
        warnings,
    })
}
