//! End-to-end delineation: tile, segment, globalize, stitch, vectorize.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{segment, BaselineBackend, BaselineConfig, DetectionSet, ExternalBackend, Segmenter};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::raster::{build_tile_grid, crop, read_png, RasterPatch};
use crate::stitch::{globalize, stitch, StitchConfig, TileDetections};
use crate::vector::{feature_collection, to_field_polygons, FieldPolygon};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendConfig {
    Baseline(BaselineConfig),
    /// Program followed by its fixed arguments.
    Exec(Vec<String>),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Baseline(BaselineConfig::default())
    }
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn Segmenter>> {
        match self {
            BackendConfig::Baseline(cfg) => {
                cfg.validate()?;
                Ok(Box::new(BaselineBackend { config: *cfg }))
            }
            BackendConfig::Exec(cmd) => {
                let (program, args) = cmd
                    .split_first()
                    .ok_or_else(|| Error::InvalidConfig("exec backend needs a command".into()))?;
                Ok(Box::new(ExternalBackend::new(program, args.to_vec())))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threads {
    Count(usize),
    #[serde(with = "auto_tag")]
    Auto,
}

mod auto_tag {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(D::Error::custom(format!("expected \"auto\" or an integer, got {s:?}")))
        }
    }
}

impl Threads {
    pub fn resolve(self) -> usize {
        match self {
            Threads::Count(n) => n,
            Threads::Auto => std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub backend: BackendConfig,
    pub tile_px: u32,
    pub overlap_px: u32,
    pub stitch: StitchConfig,
    pub simplify_tolerance_px: f64,
    pub eval: EvalConfig,
    pub threads: Threads,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            backend: BackendConfig::default(),
            tile_px: 512,
            overlap_px: 64,
            stitch: StitchConfig::default(),
            simplify_tolerance_px: 1.0,
            eval: EvalConfig::default(),
            threads: Threads::Auto,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_px <= self.overlap_px {
            return Err(Error::InvalidConfig(format!(
                "tile_px {} must exceed overlap_px {}",
                self.tile_px, self.overlap_px
            )));
        }
        if let BackendConfig::Baseline(b) = &self.backend {
            b.validate()?;
        }
        self.stitch.validate()?;
        self.eval.validate()?;
        if !(self.simplify_tolerance_px >= 0.0) {
            return Err(Error::InvalidConfig("simplify_tolerance_px must be >= 0".into()));
        }
        if self.threads == Threads::Count(0) {
            return Err(Error::InvalidConfig("threads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// The config as echoed into output artifacts. `threads` is left out
    /// because results do not depend on it.
    pub fn provenance_json(&self) -> Value {
        let mut v = self.to_json();
        if let Value::Object(m) = &mut v {
            m.remove("threads");
        }
        v
    }
}

/// Segments every tile (in parallel on `threads` workers) and stitches the result.
///
/// Output does not depend on the worker count.
pub fn segment_tiled(
    patch: &RasterPatch,
    backend: &dyn Segmenter,
    tile_px: u32,
    overlap_px: u32,
    stitch_cfg: &StitchConfig,
    threads: usize,
) -> Result<DetectionSet> {
    let grid = build_tile_grid(patch.width(), patch.height(), tile_px, overlap_px)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let per_tile: Vec<Result<TileDetections>> = pool.install(|| {
        grid.tiles
            .par_iter()
            .map(|t| {
                let sub = crop(patch, t.rect())?;
                let dets = segment(&sub, backend)?;
                globalize(&dets, t, patch.width(), patch.height())
            })
            .collect()
    });
    let per_tile = per_tile.into_iter().collect::<Result<Vec<_>>>()?;
    stitch(&per_tile, &grid, stitch_cfg)
}

#[derive(Debug, Clone)]
pub struct Delineation {
    pub detections: DetectionSet,
    pub polygons: Vec<FieldPolygon>,
    pub geojson: Value,
}

pub fn delineate_patch(
    patch: &RasterPatch,
    backend: &dyn Segmenter,
    cfg: &PipelineConfig,
) -> Result<Delineation> {
    cfg.validate()?;
    let detections = segment_tiled(
        patch,
        backend,
        cfg.tile_px,
        cfg.overlap_px,
        &cfg.stitch,
        cfg.threads.resolve(),
    )?;
    let polygons = to_field_polygons(&detections, patch.geo(), cfg.simplify_tolerance_px)?;
    let geojson = feature_collection(&polygons, patch.geo(), Some(cfg.provenance_json()));
    Ok(Delineation {
        detections,
        polygons,
        geojson,
    })
}

/// Raster load through polygon output for one file.
pub fn delineate_file(path: &Path, backend: &dyn Segmenter, cfg: &PipelineConfig) -> Result<Delineation> {
    let patch = read_png(path)?;
    delineate_patch(&patch, backend, cfg)
}
