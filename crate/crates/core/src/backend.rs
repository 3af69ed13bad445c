//! Segmentation backends: the common contract, the classical
//! gradient/components baseline and the external-process protocol.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{connected_components, Bitmap, Connectivity, InstanceMask};
use crate::raster::{write_png, RasterPatch};

/// One predicted or annotated field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldInstance {
    pub id: u64,
    pub mask: InstanceMask,
    /// Confidence in `[0, 1]`; `None` for annotations.
    pub score: Option<f64>,
}

impl FieldInstance {
    /// Score used for ranking; annotations rank as fully confident.
    pub fn rank_score(&self) -> f64 {
        self.score.unwrap_or(1.0)
    }
}

/// All instances for one image or scene.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub width: u32,
    pub height: u32,
    pub instances: Vec<FieldInstance>,
}

impl DetectionSet {
    pub fn empty(width: u32, height: u32) -> Self {
        DetectionSet {
            width,
            height,
            instances: Vec::new(),
        }
    }

    /// Checks shared dimensions, unique ids, non-empty masks and score domain.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut ids = HashSet::new();
        for inst in &self.instances {
            if inst.mask.dims() != (self.width, self.height) {
                return Err(format!(
                    "dimension mismatch: instance {} is {}x{}, set is {}x{}",
                    inst.id,
                    inst.mask.width(),
                    inst.mask.height(),
                    self.width,
                    self.height
                ));
            }
            if !ids.insert(inst.id) {
                return Err(format!("duplicate instance id {}", inst.id));
            }
            if inst.mask.area() == 0 {
                return Err(format!("empty mask for instance {}", inst.id));
            }
            if let Some(s) = inst.score {
                if !(0.0..=1.0).contains(&s) {
                    return Err(format!("score out of range: {s} for instance {}", inst.id));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RlejInstance {
    id: u64,
    score: Option<f64>,
    counts: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RlejFile {
    width: u32,
    height: u32,
    instances: Vec<RlejInstance>,
}

/// Serializes a detection set in the `.rlej` interchange format.
pub fn to_rlej_string(dets: &DetectionSet) -> String {
    let file = RlejFile {
        width: dets.width,
        height: dets.height,
        instances: dets
            .instances
            .iter()
            .map(|i| RlejInstance {
                id: i.id,
                score: i.score,
                counts: i.mask.counts().to_vec(),
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("rlej serialization is infallible")
}

/// Parses `.rlej` text. Rule violations come back as a plain message.
pub fn parse_rlej(text: &str) -> std::result::Result<DetectionSet, String> {
    let file: RlejFile = serde_json::from_str(text).map_err(|e| format!("malformed json: {e}"))?;
    let mut instances = Vec::with_capacity(file.instances.len());
    for inst in file.instances {
        let counts_sum: u64 = inst.counts.iter().map(|&c| c as u64).sum();
        if counts_sum != file.width as u64 * file.height as u64 {
            return Err(format!(
                "dimension mismatch: counts of instance {} sum to {counts_sum}, expected {}x{}",
                inst.id, file.width, file.height
            ));
        }
        let mask = InstanceMask::from_counts(file.width, file.height, inst.counts)
            .map_err(|e| format!("invalid counts for instance {}: {e}", inst.id))?;
        instances.push(FieldInstance {
            id: inst.id,
            mask,
            score: inst.score,
        });
    }
    let set = DetectionSet {
        width: file.width,
        height: file.height,
        instances,
    };
    set.validate()?;
    Ok(set)
}

pub fn read_rlej(path: &Path) -> Result<DetectionSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rlej(&text).map_err(|e| Error::CorruptMask(format!("{}: {e}", path.display())))
}

pub fn write_rlej(path: &Path, dets: &DetectionSet) -> Result<()> {
    std::fs::write(path, to_rlej_string(dets)).map_err(|e| Error::io(path, e))
}

/// Anything that turns a raster patch into field instances.
pub trait Segmenter: Send + Sync {
    fn segment(&self, patch: &RasterPatch) -> Result<DetectionSet>;
}

/// Runs `backend` and enforces the output contract.
pub fn segment(patch: &RasterPatch, backend: &dyn Segmenter) -> Result<DetectionSet> {
    let dets = backend.segment(patch)?;
    if (dets.width, dets.height) != (patch.width(), patch.height()) {
        return Err(Error::Protocol(format!(
            "dimension mismatch: backend returned {}x{} for {}x{} patch",
            dets.width,
            dets.height,
            patch.width(),
            patch.height()
        )));
    }
    dets.validate().map_err(Error::Protocol)?;
    Ok(dets)
}

/// Returns a preloaded detection set regardless of input.
#[derive(Debug, Clone)]
pub struct FixtureBackend {
    pub fixture: DetectionSet,
}

impl Segmenter for FixtureBackend {
    fn segment(&self, _patch: &RasterPatch) -> Result<DetectionSet> {
        Ok(self.fixture.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GradientThreshold {
    Fixed(f64),
    #[serde(with = "otsu_tag")]
    Otsu,
}

mod otsu_tag {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("otsu")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "otsu" {
            Ok(())
        } else {
            Err(D::Error::custom(format!("expected \"otsu\" or a number, got {s:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub gradient_threshold: GradientThreshold,
    pub min_area_px: u64,
    pub reclaim_boundary: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            gradient_threshold: GradientThreshold::Otsu,
            min_area_px: 64,
            reclaim_boundary: true,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if let GradientThreshold::Fixed(t) = self.gradient_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!(
                    "gradient threshold {t} outside [0, 1]"
                )));
            }
        }
        if self.min_area_px < 1 {
            return Err(Error::InvalidConfig("min_area_px must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sobel gradient magnitude with clamped borders, row-major.
fn sobel_magnitude(lum: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        lum[y * w + x]
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

fn histogram_bin(g: f64) -> usize {
    ((g * 255.0).round() as usize).min(255)
}

/// Otsu threshold over a 256-bin histogram; returns the last background bin.
fn otsu_bin(values: &[f64]) -> usize {
    let mut hist = [0u64; 256];
    for &g in values {
        hist[histogram_bin(g)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0usize, -1.0);
    for (k, &c) in hist.iter().enumerate().take(255) {
        w0 += c as f64;
        sum0 += k as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = sum0 / w0 - (sum_all - sum0) / w1;
        let var = w0 * w1 * diff * diff;
        if var > best_var {
            best_var = var;
            best = k;
        }
    }
    best
}

/// Classical baseline: Sobel edges, components of the non-edge complement,
/// area filtering and a one-pixel boundary reclaim.
pub fn baseline_edge_watershed(patch: &RasterPatch, cfg: &BaselineConfig) -> Result<DetectionSet> {
    cfg.validate()?;
    let (w, h) = (patch.width() as usize, patch.height() as usize);
    let lum = patch.luminance();
    let mag = sobel_magnitude(&lum, w, h);
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let mut dets = DetectionSet::empty(w as u32, h as u32);
    if max == 0.0 {
        if (w * h) as u64 >= cfg.min_area_px {
            dets.instances.push(FieldInstance {
                id: 0,
                mask: InstanceMask::from_counts(w as u32, h as u32, vec![0, (w * h) as u32])?,
                score: Some(1.0),
            });
        }
        return Ok(dets);
    }
    let grad: Vec<f64> = mag.iter().map(|m| m / max).collect();
    let edge: Vec<bool> = match cfg.gradient_threshold {
        GradientThreshold::Fixed(t) => grad.iter().map(|&g| g > t).collect(),
        GradientThreshold::Otsu => {
            let k = otsu_bin(&grad);
            grad.iter().map(|&g| histogram_bin(g) > k).collect()
        }
    };
    let interior = Bitmap::from_vec(w as u32, h as u32, edge.iter().map(|e| !e).collect())?;
    let components: Vec<InstanceMask> = connected_components(&interior, Connectivity::Four)
        .into_iter()
        .filter(|m| m.area() >= cfg.min_area_px)
        .collect();

    // label map, row-major; u32::MAX = unclaimed
    const NONE: u32 = u32::MAX;
    let mut labels = vec![NONE; w * h];
    for (label, comp) in components.iter().enumerate() {
        for (start, len) in comp.fg_runs() {
            for i in start..start + len {
                let (x, y) = ((i / h as u64) as usize, (i % h as u64) as usize);
                labels[y * w + x] = label as u32;
            }
        }
    }
    if cfg.reclaim_boundary {
        let base = labels.clone();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !edge[i] || base[i] != NONE {
                    continue;
                }
                let mut best = NONE;
                if x > 0 {
                    best = best.min(base[i - 1]);
                }
                if x + 1 < w {
                    best = best.min(base[i + 1]);
                }
                if y > 0 {
                    best = best.min(base[i - w]);
                }
                if y + 1 < h {
                    best = best.min(base[i + w]);
                }
                labels[i] = best;
            }
        }
    }

    let n = components.len();
    let mut members: Vec<Vec<u64>> = vec![Vec::new(); n];
    let mut grad_sum = vec![0.0f64; n];
    for x in 0..w {
        for y in 0..h {
            let l = labels[y * w + x];
            if l != NONE {
                members[l as usize].push((x * h + y) as u64);
                grad_sum[l as usize] += grad[y * w + x];
            }
        }
    }
    for (label, idx) in members.iter().enumerate() {
        let score = (1.0 - grad_sum[label] / idx.len() as f64).clamp(0.0, 1.0);
        dets.instances.push(FieldInstance {
            id: label as u64,
            mask: InstanceMask::from_sorted_indices(w as u32, h as u32, idx),
            score: Some(score),
        });
    }
    Ok(dets)
}

#[derive(Debug, Clone, Default)]
pub struct BaselineBackend {
    pub config: BaselineConfig,
}

impl Segmenter for BaselineBackend {
    fn segment(&self, patch: &RasterPatch) -> Result<DetectionSet> {
        baseline_edge_watershed(patch, &self.config)
    }
}

/// Runs an external program once per patch:
/// `PROGRAM [args] --input <patch.png> --output <out.rlej>`.
#[derive(Debug, Clone)]
pub struct ExternalBackend {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ExternalBackend {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        ExternalBackend {
            program: program.into(),
            args,
        }
    }
}

impl Segmenter for ExternalBackend {
    fn segment(&self, patch: &RasterPatch) -> Result<DetectionSet> {
        external_segment(patch, &self.program, &self.args)
    }
}

pub fn external_segment(patch: &RasterPatch, program: &Path, args: &[String]) -> Result<DetectionSet> {
    // a fresh directory per call keeps concurrent invocations apart
    let dir = tempfile::Builder::new()
        .prefix("fieldline-")
        .tempdir()
        .map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let input = dir.path().join("patch.png");
    let output = dir.path().join("patch.rlej");
    write_png(&input, patch)?;
    let out = Command::new(program)
        .args(args)
        .arg("--input")
        .arg(&input)
        .arg("--output")
        .arg(&output)
        .output()
        .map_err(|e| Error::io(program, e))?;
    if !out.status.success() {
        return Err(Error::BackendProcess {
            code: out.status.code(),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    let text = std::fs::read_to_string(&output)
        .map_err(|e| Error::Protocol(format!("missing output {}: {e}", output.display())))?;
    let dets = parse_rlej(&text).map_err(Error::Protocol)?;
    if (dets.width, dets.height) != (patch.width(), patch.height()) {
        return Err(Error::Protocol(format!(
            "dimension mismatch: output is {}x{}, patch is {}x{}",
            dets.width,
            dets.height,
            patch.width(),
            patch.height()
        )));
    }
    if let Some(inst) = dets.instances.iter().find(|i| i.score.is_none()) {
        return Err(Error::Protocol(format!("missing score for instance {}", inst.id)));
    }
    Ok(dets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::PixelRect;

    fn split_patch() -> RasterPatch {
        RasterPatch::from_fn(64, 64, 3, |x, _| if x < 32 { 0 } else { 255 }).unwrap()
    }

    #[test]
    fn constant_image_is_one_field() {
        let p = RasterPatch::from_fn(64, 64, 3, |_, _| 90).unwrap();
        let d = segment(&p, &BaselineBackend::default()).unwrap();
        assert_eq!(d.instances.len(), 1);
        assert_eq!(d.instances[0].mask.area(), 64 * 64);
        assert_eq!(d.instances[0].score, Some(1.0));
    }

    #[test]
    fn min_area_filters_small_patch() {
        let p = RasterPatch::from_fn(8, 8, 1, |x, y| ((x * 37 + y * 11) % 256) as u8).unwrap();
        let cfg = BaselineConfig {
            min_area_px: 100,
            ..Default::default()
        };
        assert!(baseline_edge_watershed(&p, &cfg).unwrap().instances.is_empty());
        let flat = RasterPatch::from_fn(8, 8, 1, |_, _| 7).unwrap();
        assert!(baseline_edge_watershed(&flat, &cfg).unwrap().instances.is_empty());
    }

    #[test]
    fn split_image_gives_two_fields() {
        // Sobel responds only at columns 31 and 32 (|gx| = 4 * 255); both
        // normalize to 1.0, everything else to 0.0.
        for thr in [GradientThreshold::Fixed(0.5), GradientThreshold::Otsu] {
            let cfg = BaselineConfig {
                gradient_threshold: thr,
                ..Default::default()
            };
            let d = baseline_edge_watershed(&split_patch(), &cfg).unwrap();
            assert_eq!(d.instances.len(), 2);
            let left = InstanceMask::from_rect(64, 64, PixelRect::new(0, 0, 32, 64));
            let right = InstanceMask::from_rect(64, 64, PixelRect::new(32, 0, 32, 64));
            assert_eq!(d.instances[0].mask, left);
            assert_eq!(d.instances[1].mask, right);
            for inst in &d.instances {
                assert!(inst.mask.area().abs_diff(2048) <= 128);
                // 64 edge pixels at gradient 1.0 out of 2048
                assert_eq!(inst.score, Some(1.0 - 64.0 / 2048.0));
            }
        }
    }

    #[test]
    fn without_reclaim_edges_stay_unclaimed() {
        let cfg = BaselineConfig {
            gradient_threshold: GradientThreshold::Fixed(0.5),
            reclaim_boundary: false,
            ..Default::default()
        };
        let d = baseline_edge_watershed(&split_patch(), &cfg).unwrap();
        assert_eq!(
            d.instances.iter().map(|i| i.mask.area()).collect::<Vec<_>>(),
            vec![31 * 64, 31 * 64]
        );
        assert_eq!(d.instances[0].score, Some(1.0));
    }

    #[test]
    fn checkerboard_yields_nothing() {
        // A 1-px checkerboard cancels in the Sobel interior; only the clamped
        // border responds, leaving a 6x6 interior below min_area_px.
        let p = RasterPatch::from_fn(8, 8, 1, |x, y| if (x + y) % 2 == 0 { 0 } else { 255 }).unwrap();
        let cfg = BaselineConfig {
            min_area_px: 64,
            ..Default::default()
        };
        assert!(baseline_edge_watershed(&p, &cfg).unwrap().instances.is_empty());
    }

    #[test]
    fn baseline_is_deterministic_and_disjoint() {
        let p = RasterPatch::from_fn(96, 80, 3, |x, y| {
            if x % 30 < 2 || y % 25 < 2 {
                10
            } else {
                ((x / 30) * 60 + (y / 25) * 20 + 80) as u8
            }
        })
        .unwrap();
        let cfg = BaselineConfig {
            min_area_px: 16,
            ..Default::default()
        };
        let a = baseline_edge_watershed(&p, &cfg).unwrap();
        let b = baseline_edge_watershed(&p, &cfg).unwrap();
        assert_eq!(to_rlej_string(&a), to_rlej_string(&b));
        assert!(a.instances.len() > 4);
        for (i, x) in a.instances.iter().enumerate() {
            let s = x.score.unwrap();
            assert!((0.0..=1.0).contains(&s));
            for y in &a.instances[i + 1..] {
                assert_eq!(x.mask.intersection_area(&y.mask).unwrap(), 0);
            }
        }
    }

    #[test]
    fn bad_fixed_threshold_rejected() {
        let cfg = BaselineConfig {
            gradient_threshold: GradientThreshold::Fixed(1.5),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn threshold_config_serde() {
        let c: BaselineConfig = serde_json::from_str(r#"{"gradient_threshold":"otsu"}"#).unwrap();
        assert_eq!(c.gradient_threshold, GradientThreshold::Otsu);
        let c: BaselineConfig = serde_json::from_str(r#"{"gradient_threshold":0.3}"#).unwrap();
        assert_eq!(c.gradient_threshold, GradientThreshold::Fixed(0.3));
        assert_eq!(c.min_area_px, 64);
        let text = serde_json::to_string(&BaselineConfig::default()).unwrap();
        assert!(text.contains(r#""gradient_threshold":"otsu""#));
    }

    #[test]
    fn fixture_backend_passes_through() {
        let fixture = DetectionSet {
            width: 4,
            height: 4,
            instances: vec![FieldInstance {
                id: 9,
                mask: InstanceMask::from_rect(4, 4, PixelRect::new(1, 1, 2, 2)),
                score: Some(0.7),
            }],
        };
        let p = RasterPatch::from_fn(4, 4, 1, |_, _| 0).unwrap();
        let d = segment(&p, &FixtureBackend { fixture: fixture.clone() }).unwrap();
        assert_eq!(d, fixture);
    }

    #[test]
    fn rlej_rejects_rule_violations() {
        assert!(parse_rlej("{").unwrap_err().contains("malformed"));
        let bad_score = r#"{"width":2,"height":2,"instances":[{"id":1,"score":1.5,"counts":[0,4]}]}"#;
        assert!(parse_rlej(bad_score).unwrap_err().contains("score out of range"));
        let dup = r#"{"width":2,"height":2,"instances":[{"id":1,"score":0.5,"counts":[0,4]},{"id":1,"score":0.5,"counts":[1,3]}]}"#;
        assert!(parse_rlej(dup).unwrap_err().contains("duplicate"));
        let zero = r#"{"width":2,"height":2,"instances":[{"id":1,"score":null,"counts":[1,0,3]}]}"#;
        assert!(parse_rlej(zero).unwrap_err().contains("invalid counts"));
    }
}
