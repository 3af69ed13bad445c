//! Raster patches, geo-referencing and overlapping tile grids.
//!
//! Coordinates follow the pixel-corner convention: corner `(0, 0)` is the
//! top-left corner of pixel `(0, 0)`, and corner `(col, row)` maps to
//! `origin + (col * psx, -row * psy)` in CRS units.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// North-up affine geo-transform of a raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size_x: f64,
    pub pixel_size_y: f64,
    /// EPSG code of the coordinate reference system.
    #[serde(rename = "epsg")]
    pub crs_code: u32,
}

impl GeoTransform {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        pixel_size_x: f64,
        pixel_size_y: f64,
        crs_code: u32,
    ) -> Result<Self> {
        let gt = GeoTransform {
            origin_x,
            origin_y,
            pixel_size_x,
            pixel_size_y,
            crs_code,
        };
        gt.validate()?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size_x > 0.0 && self.pixel_size_x.is_finite())
            || !(self.pixel_size_y > 0.0 && self.pixel_size_y.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "pixel sizes must be positive, got ({}, {})",
                self.pixel_size_x, self.pixel_size_y
            )));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(Error::InvalidConfig("non-finite geo origin".into()));
        }
        if self.crs_code == 0 {
            return Err(Error::InvalidConfig("crs code must be > 0".into()));
        }
        Ok(())
    }

    /// Ground area of one pixel in CRS units squared.
    pub fn pixel_area(&self) -> f64 {
        self.pixel_size_x * self.pixel_size_y
    }

    /// Inverse of [`corner_to_geo`]: fractional pixel-corner coordinates of a CRS point.
    pub fn geo_to_corner(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.pixel_size_x,
            (self.origin_y - y) / self.pixel_size_y,
        )
    }
}

/// Maps a pixel corner to CRS coordinates.
pub fn corner_to_geo(gt: &GeoTransform, col: f64, row: f64) -> (f64, f64) {
    (
        gt.origin_x + col * gt.pixel_size_x,
        gt.origin_y - row * gt.pixel_size_y,
    )
}

/// An 8-bit, band-interleaved-by-pixel raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterPatch {
    width: u32,
    height: u32,
    bands: u8,
    pixels: Vec<u8>,
    geo: Option<GeoTransform>,
}

impl RasterPatch {
    pub fn new(
        width: u32,
        height: u32,
        bands: u8,
        pixels: Vec<u8>,
        geo: Option<GeoTransform>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "raster extent must be at least 1x1, got {width}x{height}"
            )));
        }
        if !(1..=4).contains(&bands) {
            return Err(Error::InvalidConfig(format!(
                "band count must be in 1..=4, got {bands}"
            )));
        }
        let expected = width as usize * height as usize * bands as usize;
        if pixels.len() != expected {
            return Err(Error::Shape(format!(
                "pixel buffer has {} samples, expected {expected}",
                pixels.len()
            )));
        }
        if let Some(gt) = &geo {
            gt.validate()?;
        }
        Ok(RasterPatch {
            width,
            height,
            bands,
            pixels,
            geo,
        })
    }

    /// Builds a patch by evaluating `f(x, y)` for every pixel, all bands equal.
    pub fn from_fn(width: u32, height: u32, bands: u8, f: impl Fn(u32, u32) -> u8) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * bands as usize);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                pixels.extend(std::iter::repeat_n(v, bands as usize));
            }
        }
        Self::new(width, height, bands, pixels, None)
    }

    pub fn with_geo(mut self, geo: Option<GeoTransform>) -> Result<Self> {
        if let Some(gt) = &geo {
            gt.validate()?;
        }
        self.geo = geo;
        Ok(self)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bands(&self) -> u8 {
        self.bands
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn geo(&self) -> Option<&GeoTransform> {
        self.geo.as_ref()
    }

    /// Samples of pixel `(x, y)`, one per band.
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let b = self.bands as usize;
        let i = (y as usize * self.width as usize + x as usize) * b;
        &self.pixels[i..i + b]
    }

    /// Per-pixel mean over bands, row-major.
    pub fn luminance(&self) -> Vec<f64> {
        let b = self.bands as usize;
        self.pixels
            .chunks_exact(b)
            .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / b as f64)
            .collect()
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub offset_x: u32,
    pub offset_y: u32,
    pub width: u32,
    pub height: u32,
}

impl PixelRect {
    pub fn new(offset_x: u32, offset_y: u32, width: u32, height: u32) -> Self {
        PixelRect {
            offset_x,
            offset_y,
            width,
            height,
        }
    }

    pub fn right(&self) -> u32 {
        self.offset_x + self.width
    }

    pub fn bottom(&self) -> u32 {
        self.offset_y + self.height
    }

    pub fn intersection(&self, other: &PixelRect) -> Option<PixelRect> {
        let x0 = self.offset_x.max(other.offset_x);
        let y0 = self.offset_y.max(other.offset_y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| PixelRect::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.offset_x && x < self.right() && y >= self.offset_y && y < self.bottom()
    }
}

/// Copies `rect` out of `patch`, shifting the geo origin accordingly.
pub fn crop(patch: &RasterPatch, rect: PixelRect) -> Result<RasterPatch> {
    if rect.width == 0
        || rect.height == 0
        || rect.offset_x as u64 + rect.width as u64 > patch.width as u64
        || rect.offset_y as u64 + rect.height as u64 > patch.height as u64
    {
        return Err(Error::Bounds(format!(
            "crop {rect:?} exceeds {}x{} raster",
            patch.width, patch.height
        )));
    }
    let b = patch.bands as usize;
    let row_len = rect.width as usize * b;
    let mut pixels = Vec::with_capacity(row_len * rect.height as usize);
    for y in rect.offset_y..rect.bottom() {
        let start = (y as usize * patch.width as usize + rect.offset_x as usize) * b;
        pixels.extend_from_slice(&patch.pixels[start..start + row_len]);
    }
    let geo = patch.geo.map(|gt| {
        let (x, y) = corner_to_geo(&gt, rect.offset_x as f64, rect.offset_y as f64);
        GeoTransform {
            origin_x: x,
            origin_y: y,
            ..gt
        }
    });
    Ok(RasterPatch {
        width: rect.width,
        height: rect.height,
        bands: patch.bands,
        pixels,
        geo,
    })
}

/// One tile of a [`TileGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub index: usize,
    pub offset_x: u32,
    pub offset_y: u32,
    pub width: u32,
    pub height: u32,
}

impl Tile {
    pub fn rect(&self) -> PixelRect {
        PixelRect::new(self.offset_x, self.offset_y, self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub width: u32,
    pub height: u32,
    pub tile_width: u32,
    pub tile_height: u32,
    pub overlap: u32,
    pub tiles: Vec<Tile>,
}

impl TileGrid {
    pub fn tile(&self, index: usize) -> Option<&Tile> {
        self.tiles.get(index)
    }
}

/// Tile starts along one axis: stride `tile - overlap`, last start clamped so
/// the tile ends at the extent.
pub(crate) fn axis_starts(extent: u32, tile: u32, overlap: u32) -> Vec<u32> {
    let stride = tile - overlap;
    let mut starts = Vec::new();
    let mut start = 0u32;
    loop {
        let s = if start as u64 + tile as u64 > extent as u64 {
            extent.saturating_sub(tile)
        } else {
            start
        };
        if starts.last() != Some(&s) {
            starts.push(s);
        }
        if start as u64 + tile as u64 >= extent as u64 {
            break;
        }
        start += stride;
    }
    starts
}

/// Builds a row-major grid of square tiles covering a `width x height` extent.
pub fn build_tile_grid(width: u32, height: u32, tile: u32, overlap: u32) -> Result<TileGrid> {
    if tile <= overlap {
        return Err(Error::InvalidConfig(format!(
            "tile size {tile} must exceed overlap {overlap}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig(format!(
            "extent must be at least 1x1, got {width}x{height}"
        )));
    }
    let xs = axis_starts(width, tile, overlap);
    let ys = axis_starts(height, tile, overlap);
    let tile_w = tile.min(width);
    let tile_h = tile.min(height);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &oy in &ys {
        for &ox in &xs {
            tiles.push(Tile {
                index: tiles.len(),
                offset_x: ox,
                offset_y: oy,
                width: tile_w,
                height: tile_h,
            });
        }
    }
    Ok(TileGrid {
        width,
        height,
        tile_width: tile_w,
        tile_height: tile_h,
        overlap,
        tiles,
    })
}

/// Path of the geo sidecar for a raster: `<name>.geo.json` next to it.
pub fn sidecar_path(raster: &Path) -> PathBuf {
    let stem = raster
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    raster.with_file_name(format!("{stem}.geo.json"))
}

pub fn read_geo_sidecar(path: &Path) -> Result<GeoTransform> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let gt: GeoTransform = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    gt.validate()?;
    Ok(gt)
}

pub fn write_geo_sidecar(path: &Path, gt: &GeoTransform) -> Result<()> {
    let text = serde_json::to_string(gt).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads an 8-bit PNG and its optional geo sidecar.
pub fn read_png(path: &Path) -> Result<RasterPatch> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| {
        Error::Image {
            path: path.into(),
            detail: e.to_string(),
        }
    })?;
    let (width, height, bands, pixels) = match img {
        DynamicImage::ImageLuma8(b) => (b.width(), b.height(), 1, b.into_raw()),
        DynamicImage::ImageLumaA8(b) => (b.width(), b.height(), 2, b.into_raw()),
        DynamicImage::ImageRgb8(b) => (b.width(), b.height(), 3, b.into_raw()),
        DynamicImage::ImageRgba8(b) => (b.width(), b.height(), 4, b.into_raw()),
        other => {
            return Err(Error::Image {
                path: path.into(),
                detail: format!("unsupported pixel format {:?}; expected 8-bit", other.color()),
            })
        }
    };
    let sidecar = sidecar_path(path);
    let geo = if sidecar.exists() {
        Some(read_geo_sidecar(&sidecar)?)
    } else {
        None
    };
    RasterPatch::new(width, height, bands, pixels, geo)
}

/// Writes the patch as PNG, plus a sidecar when it is geo-referenced.
pub fn write_png(path: &Path, patch: &RasterPatch) -> Result<()> {
    let (w, h) = (patch.width, patch.height);
    let data = patch.pixels.clone();
    let img = match patch.bands {
        1 => ImageBuffer::from_raw(w, h, data).map(DynamicImage::ImageLuma8),
        2 => ImageBuffer::from_raw(w, h, data).map(DynamicImage::ImageLumaA8),
        3 => ImageBuffer::from_raw(w, h, data).map(DynamicImage::ImageRgb8),
        _ => ImageBuffer::from_raw(w, h, data).map(DynamicImage::ImageRgba8),
    }
    .expect("buffer length checked at construction");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.into(),
            detail: e.to_string(),
        })?;
    if let Some(gt) = &patch.geo {
        write_geo_sidecar(&sidecar_path(path), gt)?;
    }
    Ok(())
}
