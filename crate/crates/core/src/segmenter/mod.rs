//! Whole-slide coarse segmentation: classify every tissue grid cell with its
//! context, render a tinted overlay, and summarize tissue proportions.

mod font;

use std::collections::BTreeSet;
use std::fmt;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{context_refs, ContextSpec, DEFAULT_PAD_VALUE};
use crate::embedder::{Embedder, EmbeddingCache};
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::slide::{read_patch, tile_slide, PatchRef, SlideRaster, DEFAULT_PATCH_SIZE};
use crate::train_eval::{classify, context_tokens};

/// Cell value for background (non-tissue) cells.
pub const BACKGROUND: i32 = -1;
pub const DEFAULT_ALPHA: f64 = 0.45;
const LEGEND_ROW: u32 = 16;
const LEGEND_MARGIN: u32 = 4;
const SWATCH: u32 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub slide_id: String,
    pub patch_size: u32,
    /// `[rows, cols]`.
    pub grid: [usize; 2],
    pub classes: Vec<String>,
    /// Class index per cell, or `BACKGROUND`.
    pub cells: Vec<Vec<i32>>,
    /// Max softmax probability per cell; 0 for background.
    pub confidences: Vec<Vec<f64>>,
}

impl LabelMap {
    pub fn rows(&self) -> usize {
        self.grid[0]
    }

    pub fn cols(&self) -> usize {
        self.grid[1]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentOptions {
    pub patch_size: u32,
    pub pad_value: u8,
    pub batch_size: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            pad_value: DEFAULT_PAD_VALUE,
            batch_size: 64,
        }
    }
}

/// Classify every tissue cell of the slide's grid with the checkpoint's
/// context size. Background cells (per the tissue filter) are not
/// classified.
pub fn segment_slide(
    slide: &SlideRaster,
    ckpt: &Checkpoint,
    embedder: &dyn Embedder,
    opts: &SegmentOptions,
) -> Result<LabelMap> {
    if embedder.dim() != ckpt.model.config.embed_dim {
        return Err(Error::DimensionMismatch {
            expected: ckpt.model.config.embed_dim,
            actual: embedder.dim(),
        });
    }
    let spec = ContextSpec {
        grid: ckpt.context_grid,
        pad_value: opts.pad_value,
    };
    let size = opts.patch_size;
    let (_, verdicts) = tile_slide(slide, size)?;
    let (rows, cols) = ((slide.height() / size) as usize, (slide.width() / size) as usize);
    let tissue: Vec<(usize, &PatchRef)> = verdicts
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_tissue)
        .map(|(i, v)| (i, &v.patch))
        .collect();

    let needed: BTreeSet<PatchRef> = tissue.iter().flat_map(|(_, p)| context_refs(p, &spec)).collect();
    let needed: Vec<PatchRef> = needed.into_iter().collect();
    let mut cache = EmbeddingCache::new(embedder.dim());
    for chunk in needed.chunks(opts.batch_size.max(1)) {
        let blocks: Vec<RgbImage> = chunk.par_iter().map(|p| read_patch(slide, p, opts.pad_value)).collect();
        for (p, v) in chunk.iter().zip(embedder.embed_batch(&blocks)?) {
            cache.insert(p.clone(), v)?;
        }
    }

    let predictions: Vec<(usize, usize, f64)> = tissue
        .par_iter()
        .map(|&(i, p)| {
            let tokens = context_tokens::<f32>(&cache, p, &spec)?;
            let (c, conf) = classify(&ckpt.model, &tokens)?;
            Ok((i, c, conf))
        })
        .collect::<Result<_>>()?;
    let mut cells = vec![vec![BACKGROUND; cols]; rows];
    let mut confidences = vec![vec![0.0; cols]; rows];
    for (i, c, conf) in predictions {
        cells[i / cols][i % cols] = c as i32;
        confidences[i / cols][i % cols] = conf;
    }
    Ok(LabelMap {
        slide_id: slide.slide_id.clone(),
        patch_size: size,
        grid: [rows, cols],
        classes: ckpt.class_list.clone(),
        cells,
        confidences,
    })
}

/// Evenly spaced hues at fixed saturation and value.
pub fn palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            let h = i as f64 / n.max(1) as f64 * 6.0;
            let (s, v) = (0.75, 0.95);
            let c = v * s;
            let x = c * (1.0 - (h % 2.0 - 1.0).abs());
            let (r, g, b) = match h as u32 {
                0 => (c, x, 0.0),
                1 => (x, c, 0.0),
                2 => (0.0, c, x),
                3 => (0.0, x, c),
                4 => (x, 0.0, c),
                _ => (c, 0.0, x),
            };
            let m = v - c;
            [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
        })
        .collect()
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, color: [u8; 3]) {
    let mut x = x0;
    for ch in text.chars() {
        let g = font::glyph(ch);
        for (dy, bits) in g.iter().enumerate() {
            for dx in 0..font::GLYPH_W {
                if bits & (1 << (font::GLYPH_W - 1 - dx)) != 0 {
                    let (px, py) = (x + dx, y0 + dy as u32);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, Rgb(color));
                    }
                }
            }
        }
        x += font::GLYPH_W + 1;
        if x >= img.width() {
            break;
        }
    }
}

pub fn legend_height(classes: usize) -> u32 {
    2 * LEGEND_MARGIN + LEGEND_ROW * classes as u32
}

/// The slide with tissue cells tinted by class colour at opacity `alpha`,
/// followed by a legend strip (one swatch and name per class).
pub fn render_overlay_image(slide: &SlideRaster, map: &LabelMap, palette: &[[u8; 3]], alpha: f64) -> Result<RgbImage> {
    if let Some(missing) = (0..map.classes.len()).find(|&i| i >= palette.len()) {
        return Err(Error::MissingPalette(missing));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let (w, h) = (slide.width(), slide.height());
    let mut out = RgbImage::from_pixel(w, h + legend_height(map.classes.len()), Rgb([255; 3]));
    let s = map.patch_size;
    for (y, row) in slide.image().rows().enumerate() {
        let (y, r) = (y as u32, y / s as usize);
        for (x, px) in row.enumerate() {
            let x = x as u32;
            let c = (x / s) as usize;
            let label = map.cells.get(r).and_then(|row| row.get(c)).copied().unwrap_or(BACKGROUND);
            let value = if label == BACKGROUND {
                px.0
            } else {
                let tint = palette[label as usize];
                [0, 1, 2].map(|k| ((1.0 - alpha) * px.0[k] as f64 + alpha * tint[k] as f64).round() as u8)
            };
            out.put_pixel(x, y, Rgb(value));
        }
    }
    for (i, name) in map.classes.iter().enumerate() {
        let y = h + LEGEND_MARGIN + i as u32 * LEGEND_ROW;
        for dy in 0..SWATCH {
            for dx in 0..SWATCH {
                if LEGEND_MARGIN + dx < w {
                    out.put_pixel(LEGEND_MARGIN + dx, y + dy, Rgb(palette[i]));
                }
            }
        }
        draw_text(&mut out, 2 * LEGEND_MARGIN + SWATCH, y + (SWATCH - font::GLYPH_H) / 2, name, [0; 3]);
    }
    Ok(out)
}

pub fn render_overlay(slide: &SlideRaster, map: &LabelMap, palette: &[[u8; 3]], alpha: f64) -> Result<Vec<u8>> {
    let img = render_overlay_image(slide, map, palette, alpha)?;
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProportion {
    pub class_label: String,
    pub cells: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProportionReport {
    pub classes: Vec<ClassProportion>,
    pub tissue_patch_count: usize,
    pub background_patch_count: usize,
}

/// Class shares of tissue cells; background is excluded from the denominator.
pub fn proportions(map: &LabelMap) -> ProportionReport {
    let mut counts = vec![0usize; map.classes.len()];
    let mut background = 0;
    for &c in map.cells.iter().flatten() {
        match usize::try_from(c).ok().filter(|&c| c < counts.len()) {
            Some(i) => counts[i] += 1,
            None => background += 1,
        }
    }
    let tissue: usize = counts.iter().sum();
    ProportionReport {
        classes: map
            .classes
            .iter()
            .zip(counts)
            .map(|(name, n)| ClassProportion {
                class_label: name.clone(),
                cells: n,
                fraction: if tissue == 0 { 0.0 } else { n as f64 / tissue as f64 },
            })
            .collect(),
        tissue_patch_count: tissue,
        background_patch_count: background,
    }
}

impl fmt::Display for ProportionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.classes.iter().map(|c| c.class_label.len()).max().unwrap_or(0).max(5);
        writeln!(f, "{:<w$} {:>8} {:>9}", "Class", "Cells", "Fraction")?;
        for c in &self.classes {
            writeln!(f, "{:<w$} {:>8} {:>9.4}", c.class_label, c.cells, c.fraction)?;
        }
        write!(
            f,
            "tissue cells: {}, background cells: {} (background excluded)",
            self.tissue_patch_count, self.background_patch_count
        )
    }
}
