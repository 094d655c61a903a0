//! Slide rasters, region masks, grid tiling and tissue filtering.
//!
//! Slides are flat RGB images that have already been rendered at the working
//! magnification; `level` on a [`PatchRef`] is carried as metadata only.
//! Background rejection uses one Otsu threshold computed over the whole-slide
//! grayscale histogram, and a patch is background when at least
//! [`BACKGROUND_FRACTION`] of its pixels are brighter than that threshold.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use image::{Rgb, RgbImage};
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PATCH_SIZE: u32 = 224;
pub const DEFAULT_LEVEL: &str = "20X";
/// A patch is background iff its bright fraction reaches this value.
pub const BACKGROUND_FRACTION: f64 = 0.9;
pub const DEFAULT_MIN_COVERAGE: f64 = 0.5;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Organ {
    Skin,
    Colorectal,
    Thorax,
    Breast,
    #[default]
    Other,
}

impl fmt::Display for Organ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Organ::Skin => "skin",
            Organ::Colorectal => "colorectal",
            Organ::Thorax => "thorax",
            Organ::Breast => "breast",
            Organ::Other => "other",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Organ {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "skin" => Ok(Organ::Skin),
            "colorectal" => Ok(Organ::Colorectal),
            "thorax" => Ok(Organ::Thorax),
            "breast" => Ok(Organ::Breast),
            "other" => Ok(Organ::Other),
            other => Err(Error::Invalid(format!("unknown organ {other:?}"))),
        }
    }
}

/// Coordinate of one square patch on a slide. Grid patches are aligned to
/// multiples of `size`; context patches may lie partly or fully off-slide.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    pub slide_id: String,
    pub x: i64,
    pub y: i64,
    #[serde(default = "default_size")]
    pub size: u32,
    #[serde(default = "default_level")]
    pub level: String,
}

fn default_size() -> u32 {
    DEFAULT_PATCH_SIZE
}

fn default_level() -> String {
    DEFAULT_LEVEL.to_string()
}

impl PatchRef {
    pub fn new(slide_id: impl Into<String>, x: i64, y: i64, size: u32) -> Self {
        Self {
            slide_id: slide_id.into(),
            x,
            y,
            size,
            level: default_level(),
        }
    }

    /// The patch displaced by whole cells.
    pub fn offset_cells(&self, dx: i64, dy: i64) -> Self {
        let s = self.size as i64;
        Self {
            slide_id: self.slide_id.clone(),
            x: self.x + dx * s,
            y: self.y + dy * s,
            size: self.size,
            level: self.level.clone(),
        }
    }

    /// True when the patch shares at least one pixel with a `width`×`height` slide.
    pub fn overlaps(&self, width: u32, height: u32) -> bool {
        let s = self.size as i64;
        self.x < width as i64 && self.y < height as i64 && self.x + s > 0 && self.y + s > 0
    }

    pub fn is_inside(&self, width: u32, height: u32) -> bool {
        let s = self.size as i64;
        self.x >= 0 && self.y >= 0 && self.x + s <= width as i64 && self.y + s <= height as i64
    }
}

impl fmt::Display for PatchRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@({},{})/{}", self.slide_id, self.x, self.y, self.size)
    }
}

// Canonical order: slide, then row-major position.
impl Ord for PatchRef {
    fn cmp(&self, other: &Self) -> Ordering {
        self.slide_id
            .cmp(&other.slide_id)
            .then(self.y.cmp(&other.y))
            .then(self.x.cmp(&other.x))
            .then(self.size.cmp(&other.size))
            .then_with(|| self.level.cmp(&other.level))
    }
}

impl PartialOrd for PatchRef {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Sidecar metadata stored next to each slide image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub slide_id: String,
    #[serde(default)]
    pub organ: Organ,
    #[serde(default)]
    pub mpp: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SlideRaster {
    pub slide_id: String,
    pub organ: Organ,
    pub mpp: Option<f64>,
    image: RgbImage,
}

impl SlideRaster {
    pub fn new(slide_id: impl Into<String>, organ: Organ, mpp: Option<f64>, image: RgbImage) -> Result<Self> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Invalid("slide must be at least 1x1".into()));
        }
        Ok(Self {
            slide_id: slide_id.into(),
            organ,
            mpp,
            image,
        })
    }

    /// Load an image plus its `<stem>.json` sidecar. Without a sidecar the
    /// file stem becomes the slide id.
    pub fn load(path: &Path) -> Result<Self> {
        let meta = read_sidecar(path)?;
        let image = image::open(path)?.to_rgb8();
        Self::new(meta.slide_id, meta.organ, meta.mpp, image)
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.image.get_pixel(x, y).0
    }
}

fn read_sidecar(path: &Path) -> Result<SlideMeta> {
    let sidecar = path.with_extension("json");
    if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar)?;
        Ok(serde_json::from_str(&text)?)
    } else {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(SlideMeta {
            slide_id: stem,
            ..SlideMeta::default()
        })
    }
}

/// Slides in a directory, indexed by slide id and loaded lazily.
pub struct SlideStore {
    entries: HashMap<String, (PathBuf, SlideMeta)>,
    loaded: RwLock<HashMap<String, Arc<SlideRaster>>>,
}

impl SlideStore {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                    .unwrap_or(false)
            })
            .collect();
        paths.sort();
        for path in paths {
            let meta = read_sidecar(&path)?;
            if entries.contains_key(&meta.slide_id) {
                return Err(Error::DuplicateKey(format!("slide id {}", meta.slide_id)));
            }
            entries.insert(meta.slide_id.clone(), (path, meta));
        }
        Ok(Self {
            entries,
            loaded: RwLock::new(HashMap::new()),
        })
    }

    /// A store over already-loaded rasters.
    pub fn from_slides(slides: impl IntoIterator<Item = SlideRaster>) -> Self {
        let mut entries = HashMap::new();
        let mut loaded = HashMap::new();
        for s in slides {
            let meta = SlideMeta {
                slide_id: s.slide_id.clone(),
                organ: s.organ,
                mpp: s.mpp,
            };
            entries.insert(s.slide_id.clone(), (PathBuf::new(), meta));
            loaded.insert(s.slide_id.clone(), Arc::new(s));
        }
        Self {
            entries,
            loaded: RwLock::new(loaded),
        }
    }

    pub fn slide_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.entries.keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn meta(&self, slide_id: &str) -> Option<&SlideMeta> {
        self.entries.get(slide_id).map(|(_, m)| m)
    }

    pub fn get(&self, slide_id: &str) -> Result<Arc<SlideRaster>> {
        if let Some(s) = self.loaded.read().expect("slide cache poisoned").get(slide_id) {
            return Ok(s.clone());
        }
        let (path, _) = self
            .entries
            .get(slide_id)
            .ok_or_else(|| Error::SlideNotFound(slide_id.to_string()))?;
        let slide = Arc::new(SlideRaster::load(path)?);
        self.loaded
            .write()
            .expect("slide cache poisoned")
            .insert(slide_id.to_string(), slide.clone());
        Ok(slide)
    }

    /// Width and height without decoding pixel data when possible.
    pub fn dimensions(&self, slide_id: &str) -> Result<(u32, u32)> {
        if let Some(s) = self.loaded.read().expect("slide cache poisoned").get(slide_id) {
            return Ok((s.width(), s.height()));
        }
        let (path, _) = self
            .entries
            .get(slide_id)
            .ok_or_else(|| Error::SlideNotFound(slide_id.to_string()))?;
        Ok(image::image_dimensions(path)?)
    }
}

/// Polygon annotation of one class on one slide, in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    pub slide_id: String,
    pub class_label: String,
    pub polygons: Vec<Vec<[f64; 2]>>,
}

impl RegionMask {
    pub fn load(path: &Path) -> Result<Self> {
        let mask: RegionMask = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, poly) in self.polygons.iter().enumerate() {
            if poly.len() < 3 {
                return Err(Error::InvalidPolygon(format!(
                    "polygon {i} of {} has {} vertices",
                    self.slide_id,
                    poly.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueVerdict {
    #[serde(flatten)]
    pub patch: PatchRef,
    pub bright_fraction: f64,
    pub is_tissue: bool,
}

/// Integer-rounded Rec.601 luma.
#[inline]
pub fn luma(rgb: [u8; 3]) -> u8 {
    let [r, g, b] = rgb.map(u32::from);
    ((299 * r + 587 * g + 114 * b + 500) / 1000) as u8
}

pub fn gray_histogram(image: &RgbImage) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for p in image.pixels() {
        hist[luma(p.0) as usize] += 1;
    }
    hist
}

/// Otsu threshold over a 256-bin histogram, splitting `{<= t}` from `{> t}`.
///
/// Between-class variance is compared exactly: with `N` pixels, total
/// intensity mass `S`, and `W0`/`S0` the count and mass at or below `t`,
/// the variance is proportional to `(N*S0 - W0*S)^2 / (W0 * (N - W0))`.
/// Ties go to the smallest `t`. A histogram with a single populated bin
/// returns that bin.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8> {
    let total: u128 = hist.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let populated: Vec<usize> = (0..256).filter(|&i| hist[i] > 0).collect();
    if populated.len() == 1 {
        return Ok(populated[0] as u8);
    }
    let mass: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();

    let mut best: Option<(usize, BigUint, BigUint)> = None;
    let (mut w0, mut s0) = (0u128, 0u128);
    for (t, &count) in hist.iter().enumerate() {
        w0 += count as u128;
        s0 += t as u128 * count as u128;
        if w0 == 0 || w0 == total {
            continue;
        }
        let a = BigUint::from(total) * BigUint::from(s0);
        let b = BigUint::from(w0) * BigUint::from(mass);
        let diff = if a > b { a - b } else { b - a };
        let num = &diff * &diff;
        let den = BigUint::from(w0) * BigUint::from(total - w0);
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => &num * bd > bn * &den,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    // At least two populated bins guarantee a split with both classes non-empty.
    Ok(best.map(|(t, _, _)| t as u8).expect("two populated bins"))
}

/// Non-overlapping grid in row-major order; partial edge strips are dropped.
pub fn grid_patches(slide: &SlideRaster, size: u32) -> Vec<PatchRef> {
    if size == 0 {
        return Vec::new();
    }
    let cols = slide.width() / size;
    let rows = slide.height() / size;
    let mut out = Vec::with_capacity((rows * cols) as usize);
    for r in 0..rows {
        for c in 0..cols {
            out.push(PatchRef::new(
                slide.slide_id.clone(),
                (c * size) as i64,
                (r * size) as i64,
                size,
            ));
        }
    }
    out
}

pub fn classify_tissue(slide: &SlideRaster, patch: &PatchRef, slide_threshold: u8) -> Result<TissueVerdict> {
    if patch.size == 0 || !patch.is_inside(slide.width(), slide.height()) {
        return Err(Error::OutOfBounds(patch.to_string()));
    }
    let (x0, y0, s) = (patch.x as u32, patch.y as u32, patch.size);
    let img = slide.image();
    let mut bright = 0u64;
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            if luma(img.get_pixel(x, y).0) > slide_threshold {
                bright += 1;
            }
        }
    }
    let bright_fraction = bright as f64 / (s as f64 * s as f64);
    Ok(TissueVerdict {
        patch: patch.clone(),
        bright_fraction,
        is_tissue: bright_fraction < BACKGROUND_FRACTION,
    })
}

/// Slide-level threshold followed by a verdict for every grid patch.
/// A pure-white slide yields threshold 255, which no pixel exceeds; it is
/// lowered to 254 so that white still counts as bright.
pub fn tile_slide(slide: &SlideRaster, size: u32) -> Result<(u8, Vec<TissueVerdict>)> {
    use rayon::prelude::*;
    let threshold = otsu_threshold(&gray_histogram(slide.image()))?.min(254);
    let verdicts = grid_patches(slide, size)
        .par_iter()
        .map(|p| classify_tissue(slide, p, threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok((threshold, verdicts))
}

/// Rasterize the union of polygons: a pixel is inside when its centre is
/// inside any polygon under the even-odd rule.
fn rasterize(polygons: &[Vec<[f64; 2]>], width: u32, height: u32) -> Vec<bool> {
    let (w, h) = (width as usize, height as usize);
    let mut inside = vec![false; w * h];
    let mut xs: Vec<f64> = Vec::new();
    for py in 0..h {
        let yc = py as f64 + 0.5;
        for poly in polygons {
            xs.clear();
            let n = poly.len();
            for i in 0..n {
                let [ax, ay] = poly[i];
                let [bx, by] = poly[(i + 1) % n];
                if (ay > yc) != (by > yc) {
                    xs.push(ax + (yc - ay) * (bx - ax) / (by - ay));
                }
            }
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
            for span in xs.chunks_exact(2) {
                // Pixel centres px + 0.5 within [x0, x1).
                let start = (span[0] - 0.5).ceil().max(0.0);
                let end = (span[1] - 0.5).ceil().min(w as f64);
                if end <= start {
                    continue;
                }
                let row = py * w;
                for px in start as usize..end as usize {
                    inside[row + px] = true;
                }
            }
        }
    }
    inside
}

/// Grid patches whose fractional area inside the mask reaches `min_coverage`.
pub fn mask_patches(slide: &SlideRaster, mask: &RegionMask, size: u32, min_coverage: f64) -> Result<Vec<PatchRef>> {
    if mask.slide_id != slide.slide_id {
        return Err(Error::SlideMismatch {
            mask: mask.slide_id.clone(),
            slide: slide.slide_id.clone(),
        });
    }
    if !(min_coverage > 0.0 && min_coverage <= 1.0) {
        return Err(Error::Invalid(format!("min_coverage {min_coverage} outside (0, 1]")));
    }
    mask.validate()?;
    let inside = rasterize(&mask.polygons, slide.width(), slide.height());
    let w = slide.width() as usize;
    let area = size as f64 * size as f64;
    Ok(grid_patches(slide, size)
        .into_iter()
        .filter(|p| {
            let (x0, y0, s) = (p.x as usize, p.y as usize, size as usize);
            let covered: usize = (y0..y0 + s)
                .map(|y| inside[y * w + x0..y * w + x0 + s].iter().filter(|&&b| b).count())
                .sum();
            covered as f64 / area >= min_coverage
        })
        .collect())
}

/// Copy a `size`×`size` block; pixels outside the slide take `pad_value`.
pub fn read_patch(slide: &SlideRaster, patch: &PatchRef, pad_value: u8) -> RgbImage {
    let s = patch.size;
    let mut out = RgbImage::from_pixel(s, s, Rgb([pad_value; 3]));
    let (w, h) = (slide.width() as i64, slide.height() as i64);
    let x_lo = patch.x.max(0);
    let x_hi = (patch.x + s as i64).min(w);
    let y_lo = patch.y.max(0);
    let y_hi = (patch.y + s as i64).min(h);
    let img = slide.image();
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            out.put_pixel(
                (x - patch.x) as u32,
                (y - patch.y) as u32,
                *img.get_pixel(x as u32, y as u32),
            );
        }
    }
    out
}
