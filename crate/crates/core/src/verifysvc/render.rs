use std::io::Cursor;

use image::{imageops, ImageFormat, Rgb, RgbImage};

use crate::error::Result;
use crate::slide::{read_patch, PatchRef, SlideRaster, SlideStore};

/// Cells per side of the review context (9 × 224 = 2016 pixels).
pub const CONTEXT_GRID: u32 = 9;
pub const OUTLINE_WIDTH: u32 = 4;
pub const OUTLINE_COLOR: [u8; 3] = [0, 255, 0];
const PAD: u8 = 255;

/// Row-major cell refs of the review grid around `central`.
pub fn context_cells(central: &PatchRef) -> Vec<PatchRef> {
    let half = (CONTEXT_GRID / 2) as i64;
    (-half..=half)
        .flat_map(|dy| (-half..=half).map(move |dx| central.offset_cells(dx, dy)))
        .collect()
}

/// The 9×9 context mosaic with the central cell outlined; off-slide cells are white.
pub fn render_context(slide: &SlideRaster, central: &PatchRef) -> RgbImage {
    let s = central.size;
    let mut out = RgbImage::from_pixel(CONTEXT_GRID * s, CONTEXT_GRID * s, Rgb([PAD; 3]));
    for (i, cell) in context_cells(central).iter().enumerate() {
        if !cell.overlaps(slide.width(), slide.height()) {
            continue;
        }
        let block = read_patch(slide, cell, PAD);
        let (r, c) = (i as u32 / CONTEXT_GRID, i as u32 % CONTEXT_GRID);
        imageops::replace(&mut out, &block, (c * s) as i64, (r * s) as i64);
    }
    let half = CONTEXT_GRID / 2;
    let (x0, y0) = (half * s, half * s);
    let w = OUTLINE_WIDTH.min(s);
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            let (dx, dy) = (x - x0, y - y0);
            if dx < w || dy < w || dx >= s - w || dy >= s - w {
                out.put_pixel(x, y, Rgb(OUTLINE_COLOR));
            }
        }
    }
    out
}

pub fn render_context_png(store: &SlideStore, central: &PatchRef) -> Result<Vec<u8>> {
    let slide = store.get(&central.slide_id)?;
    let img = render_context(&slide, central);
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}
