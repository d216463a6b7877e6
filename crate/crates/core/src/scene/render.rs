//! Deterministic tile renderer standing in for a VQ decoder.

use std::io::Write;

use thiserror::Error;

use super::palette::{Palette, Shape};
use crate::canvas::TokenCanvas;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("canvas has {filled} of {total} tokens populated")]
    UnpopulatedCanvas { filled: usize, total: usize },
    #[error("token {0} is not in the palette")]
    UnknownToken(u16),
    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const WHITE: [u8; 3] = [255, 255, 255];

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>, RenderError> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&self.pixels)?;
        }
        Ok(out)
    }

    pub fn write_ppm(&self, mut w: impl Write) -> Result<(), RenderError> {
        w.write_all(&self.to_ppm())?;
        Ok(())
    }
}

/// Whether pixel `(x, y)` of a `t`-pixel tile belongs to `shape`.
fn in_glyph(shape: Shape, x: usize, y: usize, t: usize) -> bool {
    let m = t / 8;
    let inner = t - 2 * m;
    if x < m || y < m || x >= t - m || y >= t - m {
        return false;
    }
    // doubled coordinates around the tile center
    let dx = (2 * x + 1).abs_diff(t);
    let dy = (2 * y + 1).abs_diff(t);
    match shape {
        Shape::Square => true,
        Shape::Circle => dx * dx + dy * dy <= inner * inner,
        Shape::Triangle => dx <= y - m + 1,
    }
}

/// Render a fully populated canvas at `tile_px` pixels per token.
pub fn render(canvas: &TokenCanvas, palette: &Palette) -> Result<Image, RenderError> {
    let spec = canvas.spec();
    if !canvas.is_full() {
        return Err(RenderError::UnpopulatedCanvas { filled: canvas.filled(), total: spec.total() });
    }
    let t = spec.tile_px;
    let mut img = Image::filled(spec.w * t, spec.h * t, WHITE);
    for (pos, &tok) in canvas.tokens().iter().enumerate() {
        if tok == 0 {
            continue;
        }
        let ty = palette.object_of(tok).ok_or(RenderError::UnknownToken(tok))?;
        let (row, col) = (pos / spec.w, pos % spec.w);
        let rgb = ty.color.rgb();
        for y in 0..t {
            for x in 0..t {
                if in_glyph(ty.shape, x, y, t) {
                    img.put(col * t + x, row * t + y, rgb);
                }
            }
        }
    }
    Ok(img)
}
